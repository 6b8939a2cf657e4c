"""Full desk pipeline through the CLI: generate, both training stages, forecast, evaluate.

    python scripts/run_desk.py --config configs/desk.yaml --root runs/desk
"""
import argparse
import json
from pathlib import Path

from latentflow.cli import main


def step(*argv):
    code = main(list(argv))
    if code:
        raise SystemExit(f"{argv[0]} failed with exit code {code}")


def run(config, root, horizon=None, overrides=()):
    root = Path(root)
    sets = [x for o in overrides for x in ("--set", o)]
    common = ["--config", str(config), *sets]
    d = {k: root / k for k in ("data", "rom", "proc", "pred", "eval")}
    if not (d["data"] / "manifest.json").exists():
        step("generate", *common, "--out", str(d["data"]))
    step("train-rom", *common, "--data", str(d["data"]), "--out", str(d["rom"]))
    step("train-processor", *common, "--data", str(d["data"]), "--rom", str(d["rom"]), "--out", str(d["proc"]))
    h = ["--horizon", str(horizon)] if horizon else ["--horizon", "40"]
    step("predict", *common, "--rom", str(d["rom"]), "--proc", str(d["proc"]), "--data", str(d["data"]), *h,
         "--out", str(d["pred"]))
    step("evaluate", *common, "--pred", str(d["pred"]), "--truth", str(d["data"]), "--baseline", "persistence",
         "--plots", "--out", str(d["eval"]))
    report = json.loads((d["eval"] / "report.json").read_text())
    return report


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.yaml")
    ap.add_argument("--root", default="runs/desk")
    ap.add_argument("--horizon", type=int, default=40)
    ap.add_argument("--set", action="append", default=[])
    a = ap.parse_args()
    rep = run(a.config, a.root, a.horizon, a.set)
    for name in ("model", "baseline"):
        agg = rep[name]["aggregate"]
        print(f"{name:>9}: " + "  ".join(f"{k}={v:.4g}" for k, v in agg.items() if v is not None))
