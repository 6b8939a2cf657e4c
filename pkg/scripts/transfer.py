"""Zero-shot transfer: a processor trained on scenario A forecasting scenario B.

Generates scenario B (a different Reynolds number by default), trains its
ROM, then applies A's processor unchanged.

    python scripts/transfer.py --a-root runs/desk --b-root runs/re200 --config configs/desk.yaml --set solver.reynolds=200
"""
import argparse
import json
from pathlib import Path

from latentflow.cli import main


def step(*argv):
    code = main(list(argv))
    if code:
        raise SystemExit(f"{argv[0]} failed with exit code {code}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--a-root", required=True, help="run directory holding rom/ and proc/ for scenario A")
    ap.add_argument("--b-root", required=True)
    ap.add_argument("--config", default="configs/desk.yaml")
    ap.add_argument("--set", action="append", default=[], help="overrides defining scenario B")
    ap.add_argument("--horizon", type=int, default=40)
    ap.add_argument("--context-pairs", type=int, default=0)
    a = ap.parse_args()
    a_root, b_root = Path(a.a_root), Path(a.b_root)
    sets = [x for o in a.set for x in ("--set", o)]
    common = ["--config", a.config, *sets]
    if not (b_root / "data" / "manifest.json").exists():
        step("generate", *common, "--out", str(b_root / "data"))
    if not (b_root / "rom" / "rom_manifest.json").exists():
        step("train-rom", *common, "--data", str(b_root / "data"), "--out", str(b_root / "rom"))
    out = b_root / f"transfer_n{a.context_pairs}"
    step("transfer", *common, "--proc", str(a_root / "proc"), "--rom-a", str(a_root / "rom"),
         "--rom-b", str(b_root / "rom"), "--data-b", str(b_root / "data"), "--horizon", str(a.horizon),
         "--context-pairs", str(a.context_pairs), "--out", str(out))
    report = json.loads((out / "report.json").read_text())
    print(json.dumps({"tags": report["tags"], "aggregate": report["model"]["aggregate"]}, indent=2))
