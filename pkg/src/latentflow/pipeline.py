"""End-to-end stages shared by the CLI and the experiment scripts."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import metrics as mt
from . import processor as pr
from . import rom
from .dataio import FlowSnapshotSeries, SplitSpec, read_series, split_series, write_series
from .errors import ConfigError
from .spectral import simulate

log = logging.getLogger(__name__)


def generate(cfg, out):
    series = simulate(cfg.solver)
    write_series(series, out)
    diag = series.diagnostics
    return series, {
        "T": series.T,
        "max_divergence": max(diag["max_divergence"]),
        "max_imag_residual": max(diag["max_imag_residual"]),
    }


def train_rom_stage(cfg, data_dir, out):
    series = read_series(data_dir)
    train, test = split_series(series, SplitSpec(cfg.data.train_fraction))
    rom_cfg = rom.RomConfig(**{**cfg.rom.to_dict(), "normalizer": cfg.data.normalizer})
    ckpt = rom.train_rom(train, rom_cfg)
    ckpt.save(out)
    latents = rom.encode_series(train, ckpt)
    corr = rom.latent_correlation(latents)
    summary = {
        "final_loss": ckpt.final_loss,
        "initial_loss": ckpt.initial_loss,
        "train_mean_abs_offdiag_corr": corr.mean_abs_offdiag,
        "dropped_latent_dims": corr.dropped,
        "test_reconstruction_mse_mu": mt.mse(test.data, rom.reconstruct(test, ckpt).data),
        "test_reconstruction_mse_sampled": mt.mse(test.data, rom.reconstruct(test, ckpt, sample=True, seed=cfg.rom.seed).data),
    }
    return ckpt, summary


def train_processor_stage(cfg, data_dir, rom_dir, out):
    if rom_dir is None or not (Path(rom_dir) / rom.MANIFEST_NAME).exists():
        raise ConfigError(f"stage 2 needs a trained ROM checkpoint, none found at {rom_dir}")
    rom_ckpt = rom.RomCheckpoint.load(rom_dir)
    series = read_series(data_dir)
    train, _ = split_series(series, SplitSpec(cfg.data.train_fraction))
    latents = rom.encode_series(train, rom_ckpt)
    handle = bb.load_or_init_backbone(cfg.backbone)
    bank = pr.build_prompt_bank(cfg.processor, handle, series.dt_record)
    base_before = handle.base_checksum()
    ckpt = pr.train_processor(latents, cfg.processor, handle, bank)
    if ckpt.handle.base_checksum() != base_before or handle.base_checksum() != base_before:
        raise RuntimeError("backbone base weights changed during processor training")
    ckpt.save(out)
    return ckpt, {
        "final_loss": ckpt.final_loss,
        "initial_loss": ckpt.initial_loss,
        "gamma": float(ckpt.net.gamma.item()),
        "backbone_base_checksum": base_before,
    }


def lookback_and_context(latents, window, n_pairs, patch_len):
    """Last ``window`` latent steps, and the 2n·M_p steps just before them as context."""
    D, T = latents.shape
    need = window + 2 * n_pairs * patch_len
    if T < need:
        raise ConfigError(f"history of {T} steps is too short for window {window} and {n_pairs} context pairs")
    tail = latents[:, T - window:]
    if n_pairs == 0:
        return tail, None
    seg = latents[:, T - need:T - window]
    return tail, pr.build_context_set(seg, n_pairs, patch_len)


def forecast(series, rom_ckpt, proc_ckpt, horizon, train_fraction=0.9, context_pairs=0, stride=None):
    """Encode the training-split tail, roll out ``horizon`` latent steps, decode.

    Returns (prediction series, training split, test split).
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    if proc_ckpt.latent_dim is not None and proc_ckpt.latent_dim != rom_ckpt.cfg.latent_dim:
        raise ConfigError(
            f"processor was trained on D={proc_ckpt.latent_dim} latents, ROM provides D={rom_ckpt.cfg.latent_dim}"
        )
    if context_pairs < 0:
        raise ConfigError("context_pairs must be >= 0")
    if stride is not None:
        proc_ckpt.cfg.rollout_stride = int(stride)
        proc_ckpt.cfg.validate()
    train, test = split_series(series, SplitSpec(train_fraction))
    cfg = proc_ckpt.cfg
    need = cfg.window + 2 * context_pairs * cfg.patch_len
    history = train.with_data(train.data[-need:])
    latents = rom.encode_series(history, rom_ckpt).values
    tail, ctx = lookback_and_context(latents, cfg.window, context_pairs, cfg.patch_len)
    z = pr.rollout(tail, horizon, proc_ckpt, ctx)
    pred = rom.decode_latents(z, rom_ckpt, scenario=f"{series.scenario}_forecast", dt_record=series.dt_record)
    pred.provenance = "forecast"
    return pred, train, test


def aligned_truth(pred, truth, train_fraction=0.9):
    """Truth snapshots matching ``pred``, and the last training snapshot if a split applies."""
    if truth.data.shape[1:] != pred.data.shape[1:]:
        raise ConfigError(f"prediction snapshots {pred.data.shape[1:]} vs truth {truth.data.shape[1:]}")
    if truth.T == pred.T:
        return truth.data, None
    train, test = split_series(truth, SplitSpec(train_fraction))
    if pred.T > test.T:
        raise ConfigError(f"prediction horizon {pred.T} exceeds the {test.T}-step test split")
    return test.data[:pred.T], train.data[-1]


def evaluate_forecast(pred, truth, train_fraction=0.9, baseline=None, bins=50, tags=None):
    target, last_train = aligned_truth(pred, truth, train_fraction)
    variables = list(truth.variables)
    report = {"model": mt.evaluate(pred.data, target, variables, bins, tags).to_dict()}
    if baseline == "persistence":
        if last_train is None:
            raise ConfigError("the persistence baseline needs the full dataset (with its training split) as truth")
        base = mt.persistence_forecast(last_train, pred.T)
        report["baseline"] = mt.evaluate(base, target, variables, bins, {**(tags or {}), "model": "persistence"}).to_dict()
    elif baseline is not None:
        raise ConfigError(f"unknown baseline {baseline!r}")
    return report


def transfer(proc_dir, rom_a_dir, rom_b_dir, data_b, horizon, train_fraction=0.9, context_pairs=0, bins=50):
    """Zero-shot (or in-context) forecast on scenario B with a processor trained on A."""
    proc_ckpt = pr.ProcessorCheckpoint.load(proc_dir)
    rom_a = rom.RomCheckpoint.load(rom_a_dir)
    rom_b = rom.RomCheckpoint.load(rom_b_dir)
    if rom_a.cfg.latent_dim != rom_b.cfg.latent_dim:
        raise ConfigError(f"latent dimensions differ: ROM-A D={rom_a.cfg.latent_dim}, ROM-B D={rom_b.cfg.latent_dim}")
    series_b = read_series(data_b) if not isinstance(data_b, FlowSnapshotSeries) else data_b
    before = proc_ckpt.checksum
    pred, _, _ = forecast(series_b, rom_b, proc_ckpt, horizon, train_fraction, context_pairs)
    if proc_ckpt.checksum != before:
        raise RuntimeError("processor parameters changed during transfer")
    tags = {
        "mode": "in-context" if context_pairs else "zero-shot",
        "context_pairs": context_pairs,
        "source_scenario": proc_ckpt.source_scenario,
        "target_scenario": series_b.scenario,
    }
    report = evaluate_forecast(pred, series_b, train_fraction, None, bins, tags)
    report["tags"] = tags
    report["processor_checksum"] = before
    return pred, report


def save_plots(report, out_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, block in report.items():
        if isinstance(block, dict) and "mse_curve" in block:
            ax.plot(np.arange(1, len(block["mse_curve"]) + 1), block["mse_curve"], label=name)
    ax.set_xlabel("forecast step")
    ax.set_ylabel("MSE")
    ax.legend()
    fig.tight_layout()
    paths.append(out_dir / "mse_curve.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    hist = report["model"]["histogram"]
    edges = np.asarray(hist["edges"])
    ax.bar(edges[:-1], hist["counts"], width=np.diff(edges), align="edge")
    ax.set_xlabel("|error|")
    ax.set_ylabel("count")
    ax.set_title(f"mean {report['model']['abs_error_mean']:.3g}, std {report['model']['abs_error_std']:.3g}")
    fig.tight_layout()
    paths.append(out_dir / "error_hist.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)
    return paths
