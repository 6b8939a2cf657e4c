"""Disentanglement-weight sweep: held-out reconstruction and latent correlation per lambda.

Reproduces the shape of the reconstruction-vs-lambda table and the latent
correlation maps on a desk dataset.

    python scripts/lambda_sweep.py --data runs/desk/data --out runs/lambda --lams 0 1e-5 1e-4 1e-3 1e-2 1e-1
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch

from latentflow import metrics as mt
from latentflow import rom
from latentflow.config import load_config
from latentflow.dataio import SplitSpec, read_series, split_series


def sweep(data, out, lams, cfg, plot=True):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    series = read_series(data)
    train, test = split_series(series, SplitSpec(cfg.data.train_fraction))
    rows = []
    for lam in lams:
        t0 = time.perf_counter()
        rom_cfg = rom.RomConfig(**{**cfg.rom.to_dict(), "lam": lam})
        ckpt = rom.train_rom(train, rom_cfg)
        ckpt.save(out / f"rom_lam{lam:g}")
        rec = rom.reconstruct(test, ckpt).data
        corr = rom.latent_correlation(rom.encode_series(train, ckpt))
        rep = mt.evaluate(rec, test.data, list(test.variables), bins=20)
        row = {"lambda": lam, "seconds": time.perf_counter() - t0,
               "test_mse": rep.aggregate["mse"], "test_mae": rep.aggregate["mae"],
               "test_psnr": rep.aggregate["psnr"], "test_ssim": rep.aggregate["ssim"],
               "train_mse": mt.mse(train.data, rom.reconstruct(train, ckpt).data),
               "mean_abs_offdiag_corr": corr.mean_abs_offdiag, "dropped_dims": corr.dropped}
        rows.append(row)
        np.save(out / f"corr_lam{lam:g}.npy", corr.matrix)
        print(json.dumps(row), flush=True)
    (out / "lambda_sweep.json").write_text(json.dumps(rows, indent=2))
    if plot:
        _plot(out, lams)
    return rows


def _plot(out, lams):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(lams), figsize=(3 * len(lams), 3))
    for ax, lam in zip(np.atleast_1d(axes), lams):
        ax.imshow(np.abs(np.load(out / f"corr_lam{lam:g}.npy")), vmin=0, vmax=1, cmap="viridis")
        ax.set_title(f"lambda={lam:g}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out / "latent_correlation.png", dpi=120)
    plt.close(fig)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", default="runs/lambda")
    ap.add_argument("--config", default="configs/desk.yaml")
    ap.add_argument("--lams", type=float, nargs="+", default=[0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1])
    a = ap.parse_args()
    torch.set_num_threads(1)
    sweep(a.data, a.out, a.lams, load_config(a.config))
