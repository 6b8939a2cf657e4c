"""Forecast quality versus the number of in-context demonstration pairs n.

    python scripts/in_context_sweep.py --proc runs/desk/proc --rom-a runs/desk/rom \
        --rom-b runs/b/rom --data-b runs/b/data --pairs 0 1 3 5
"""
import argparse
import json

import torch

from latentflow import pipeline as pl


def sweep(proc, rom_a, rom_b, data_b, pairs, horizon=40, train_fraction=0.9):
    rows = []
    for n in pairs:
        _, report = pl.transfer(proc, rom_a, rom_b, data_b, horizon, train_fraction, n)
        agg = report["model"]["aggregate"]
        rows.append({"context_pairs": n, **{k: agg[k] for k in ("smape", "mse", "mae", "psnr", "ssim")}})
        print(json.dumps(rows[-1]), flush=True)
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--proc", required=True)
    ap.add_argument("--rom-a", required=True)
    ap.add_argument("--rom-b", required=True)
    ap.add_argument("--data-b", required=True)
    ap.add_argument("--pairs", type=int, nargs="+", default=[0, 1, 3, 5])
    ap.add_argument("--horizon", type=int, default=40)
    ap.add_argument("--out")
    a = ap.parse_args()
    torch.set_num_threads(1)
    rows = sweep(a.proc, a.rom_a, a.rom_b, a.data_b, a.pairs, a.horizon)
    if a.out:
        with open(a.out, "w") as f:
            json.dump(rows, f, indent=2)
