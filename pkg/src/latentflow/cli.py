"""Command-line pipeline.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation error.
Every command writes ``run_manifest.json`` into its output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import torch

from . import __version__
from . import pipeline as pl
from .ckpt import read_json, sha256_file, write_json
from .config import CONFIG_ENV, load_config
from .dataio import read_series, write_series
from .errors import BlowupError, ConfigError, FormatError
from .processor import ProcessorCheckpoint
from .rom import RomCheckpoint

log = logging.getLogger("latentflow")

RUN_MANIFEST = "run_manifest.json"


def _digest_dir(path):
    """sha256 of every regular file in a directory, excluding run manifests."""
    path = Path(path)
    if path.is_file():
        return {path.name: sha256_file(path)}
    return {p.name: sha256_file(p) for p in sorted(path.iterdir()) if p.is_file() and p.name != RUN_MANIFEST}


class Run:
    """Collects a RunManifest and writes it atomically when the command ends."""

    def __init__(self, command, argv, out):
        self.out = Path(out)
        self.manifest = {
            "command": command,
            "argv": list(argv),
            "config": None,
            "seeds": {},
            "inputs": {},
            "outputs": {},
            "checkpoints": {},
            "results": {},
            "tool_version": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "timings": {},
        }
        self._t0 = time.perf_counter()

    def use_config(self, cfg):
        d = cfg.to_dict()
        self.manifest["config"] = d
        self.manifest["seeds"] = {
            "solver": d["solver"]["seed"], "rom": d["rom"]["seed"],
            "backbone": d["backbone"]["seed"], "processor": d["processor"]["seed"],
        }

    def input(self, name, path):
        self.manifest["inputs"][name] = {"path": str(path), "files": _digest_dir(path)}

    def checkpoint(self, name, path):
        self.manifest["checkpoints"][name] = {"path": str(path), "files": _digest_dir(path)}

    def finish(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest["outputs"] = {"path": str(self.out), "files": _digest_dir(self.out)}
        self.manifest["timings"]["wall_seconds"] = time.perf_counter() - self._t0
        write_json(self.out / RUN_MANIFEST, self.manifest)


def cmd_generate(args, run):
    cfg = load_config(args.config, args.set)
    run.use_config(cfg)
    _, info = pl.generate(cfg, args.out)
    run.manifest["results"].update(info)


def cmd_train_rom(args, run):
    cfg = load_config(args.config, args.set)
    run.use_config(cfg)
    run.input("data", args.data)
    _, summary = pl.train_rom_stage(cfg, args.data, args.out)
    run.manifest["results"].update(summary)


def cmd_train_processor(args, run):
    cfg = load_config(args.config, args.set)
    run.use_config(cfg)
    if not args.rom or not Path(args.rom).is_dir():
        raise ConfigError(f"stage 2 requires a ROM checkpoint directory (--rom), got {args.rom!r}")
    run.input("data", args.data)
    run.checkpoint("rom", args.rom)
    _, summary = pl.train_processor_stage(cfg, args.data, args.rom, args.out)
    run.manifest["results"].update(summary)


def _positive_horizon(h):
    if h is None or h < 1:
        raise ConfigError(f"--horizon must be >= 1, got {h}")
    return h


def cmd_predict(args, run):
    cfg = load_config(args.config, args.set)
    run.use_config(cfg)
    horizon = _positive_horizon(args.horizon)
    rom_ckpt = RomCheckpoint.load(args.rom)
    proc = ProcessorCheckpoint.load(args.proc)
    run.checkpoint("rom", args.rom)
    run.checkpoint("processor", args.proc)
    run.input("data", args.data)
    series = read_series(args.data)
    pred, _, _ = pl.forecast(series, rom_ckpt, proc, horizon, cfg.data.train_fraction,
                             args.context_pairs or 0, args.stride)
    write_series(pred, args.out)
    run.manifest["results"].update({"T": pred.T, "backbone_forwards": proc.forward_calls,
                                    "context_pairs": args.context_pairs or 0})


def cmd_evaluate(args, run):
    cfg = load_config(args.config, args.set)
    run.use_config(cfg)
    run.input("pred", args.pred)
    run.input("truth", args.truth)
    pred, truth = read_series(args.pred), read_series(args.truth)
    report = pl.evaluate_forecast(pred, truth, cfg.data.train_fraction, args.baseline,
                                  cfg.eval.histogram_bins, {"pred": str(args.pred), "truth": truth.scenario})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    if args.plots:
        pl.save_plots(report, out)
    run.manifest["results"]["aggregate"] = report["model"]["aggregate"]
    if "baseline" in report:
        run.manifest["results"]["baseline_aggregate"] = report["baseline"]["aggregate"]


def cmd_transfer(args, run):
    cfg = load_config(args.config, args.set)
    run.use_config(cfg)
    horizon = _positive_horizon(args.horizon)
    for name in ("proc", "rom_a", "rom_b"):
        run.checkpoint(name, getattr(args, name))
    run.input("data_b", args.data_b)
    pred, report = pl.transfer(args.proc, args.rom_a, args.rom_b, args.data_b, horizon,
                               cfg.data.train_fraction, args.context_pairs or 0, cfg.eval.histogram_bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    write_series(pred, out / "forecast")
    run.manifest["results"].update({"aggregate": report["model"]["aggregate"], **report["tags"]})


def cmd_replay(args, run):
    """Re-execute the command recorded in a run manifest into a new output directory."""
    m = read_json(args.manifest)
    argv = list(m["argv"])
    if "--out" not in argv:
        raise ConfigError("manifest argv has no --out to redirect")
    argv[argv.index("--out") + 1] = str(args.out)
    return argv


def _common(p, out_required=True):
    p.add_argument("--config", help=f"YAML config (default: ${CONFIG_ENV} or built-in defaults)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", required=out_required)


def build_parser():
    parser = argparse.ArgumentParser(prog="latentflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a Kolmogorov-flow dataset")
    _common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-rom", help="stage 1: train the reduced-order model")
    _common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train_rom)

    p = sub.add_parser("train-processor", help="stage 2: train the temporal processor")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--rom")
    p.set_defaults(func=cmd_train_processor)

    p = sub.add_parser("predict", help="forecast the test segment of a dataset")
    _common(p)
    p.add_argument("--rom", required=True)
    p.add_argument("--proc", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--context-pairs", type=int, default=0)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a forecast against ground truth")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--baseline", choices=["persistence"])
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("transfer", help="zero-shot / in-context forecast on another scenario")
    _common(p)
    p.add_argument("--proc", required=True)
    p.add_argument("--rom-a", required=True)
    p.add_argument("--rom-b", required=True)
    p.add_argument("--data-b", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--context-pairs", type=int, default=0)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("replay", help="re-run a command from its run manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        if args.command == "replay":
            return main(cmd_replay(args, None))
        run = Run(args.command, argv, args.out)
        args.func(args, run)
        run.finish()
    except (ConfigError, FormatError) as exc:
        log.error("%s", exc)
        return 2
    except (BlowupError, RuntimeError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
