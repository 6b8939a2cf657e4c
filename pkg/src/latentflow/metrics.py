"""Field-level error and image-quality metrics, and the evaluation report."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigError

REPORT_SCHEMA_VERSION = 1
PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5


def _pair(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ConfigError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return x, x_hat


def mae(x, x_hat):
    x, x_hat = _pair(x, x_hat)
    return float(np.mean(np.abs(x - x_hat)))


def mse(x, x_hat):
    x, x_hat = _pair(x, x_hat)
    return float(np.mean((x - x_hat) ** 2))


def smape(x, x_hat):
    """Percentage; points where |x| + |x_hat| = 0 contribute zero."""
    x, x_hat = _pair(x, x_hat)
    denom = (np.abs(x) + np.abs(x_hat)) / 2
    num = np.abs(x - x_hat)
    terms = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return float(100.0 * terms.mean())


def r2(x, x_hat):
    """1 - SS_res/SS_tot; None when x is constant."""
    x, x_hat = _pair(x, x_hat)
    ss_tot = np.sum((x - x.mean()) ** 2)
    if ss_tot == 0:
        return None
    return float(1.0 - np.sum((x - x_hat) ** 2) / ss_tot)


def to_8bit_scale(a, lo, hi):
    """Affine map of [lo, hi] onto [0, 255] (no clipping); a zero range only shifts."""
    span = hi - lo
    scale = 255.0 / span if span > 0 else 1.0
    return (np.asarray(a, dtype=np.float64) - lo) * scale


def psnr(x, x_hat, lo=None, hi=None, bits=8):
    """PSNR in dB after scaling both fields with the ground-truth range [lo, hi].

    Returns (value, capped): an exact match gives (100.0, True).
    """
    x, x_hat = _pair(x, x_hat)
    lo = x.min() if lo is None else lo
    hi = x.max() if hi is None else hi
    err = np.mean((to_8bit_scale(x, lo, hi) - to_8bit_scale(x_hat, lo, hi)) ** 2)
    if err == 0:
        return PSNR_CAP, True
    peak = (2**bits - 1) ** 2
    return float(min(10.0 * math.log10(peak / err), PSNR_CAP)), False


def psnr_from_mse(scaled_mse, bits=8):
    if scaled_mse == 0:
        return PSNR_CAP
    return 10.0 * math.log10((2**bits - 1) ** 2 / scaled_mse)


def _gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    w = np.exp(-(r**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img, w):
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    pad = (len(w) - 1) // 2
    return out[pad:img.shape[0] - pad, pad:img.shape[1] - pad]


def ssim_2d(x, y, data_range=255.0):
    """Mean local SSIM with an 11×11 Gaussian window (sigma 1.5), valid region."""
    x, y = _pair(x, y)
    if x.ndim != 2:
        raise ConfigError("ssim_2d expects 2D fields")
    if min(x.shape) < SSIM_WIN:
        raise ConfigError(f"field {x.shape} smaller than the {SSIM_WIN}×{SSIM_WIN} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    w = _gaussian_window()
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(y * y, w) - my * my
    sxy = _filter_valid(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx**2 + my**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(x, x_hat, lo=None, hi=None):
    """SSIM on [0, 255]-scaled fields; stacks of 2D fields (..., H, W) are averaged."""
    x, x_hat = _pair(x, x_hat)
    lo = x.min() if lo is None else lo
    hi = x.max() if hi is None else hi
    xs, ys = to_8bit_scale(x, lo, hi), to_8bit_scale(x_hat, lo, hi)
    if xs.ndim == 2:
        return ssim_2d(xs, ys)
    xs = xs.reshape(-1, *xs.shape[-2:])
    ys = ys.reshape(-1, *ys.shape[-2:])
    return float(np.mean([ssim_2d(a, b) for a, b in zip(xs, ys)]))


@dataclass
class MetricsReport:
    variables: list
    per_variable: dict
    aggregate: dict
    mse_curve: list
    abs_error_mean: float
    abs_error_std: float
    histogram: dict = field(default_factory=dict)
    psnr_capped: bool = False
    tags: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ConfigError(f"unknown report schema_version {d.get('schema_version')!r}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _data(series):
    return series.data if hasattr(series, "data") else np.asarray(series)


def evaluate(pred, truth, variables=None, bins=50, tags=None):
    """All metrics per variable plus their mean over variables (T×H×W×C inputs)."""
    p = np.asarray(_data(pred), dtype=np.float64)
    t = np.asarray(_data(truth), dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigError(f"prediction {p.shape} and truth {t.shape} are misaligned")
    if p.size == 0 or p.shape[0] == 0:
        raise ConfigError("empty evaluation window")
    variables = list(variables or getattr(truth, "variables", None) or [f"c{i}" for i in range(t.shape[-1])])
    per, capped_any = {}, False
    for c, name in enumerate(variables):
        x, xh = t[..., c], p[..., c]
        lo, hi = x.min(), x.max()
        pv, capped = psnr(x, xh, lo, hi)
        capped_any |= capped
        per[name] = {
            "mae": mae(x, xh),
            "mse": mse(x, xh),
            "smape": smape(x, xh),
            "r2": r2(x, xh),
            "psnr": pv,
            "ssim": ssim(x, xh, lo, hi) if min(x.shape[-2:]) >= SSIM_WIN else None,
        }
    aggregate = {}
    for key in ("mae", "mse", "smape", "r2", "psnr", "ssim"):
        vals = [per[v][key] for v in variables if per[v][key] is not None]
        aggregate[key] = float(np.mean(vals)) if vals else None
    err = np.abs(t - p)
    curve = [float(v) for v in ((t - p) ** 2).reshape(t.shape[0], -1).mean(axis=1)]
    counts, edges = np.histogram(err, bins=bins)
    hist = {"counts": counts.tolist(), "edges": edges.tolist()}
    return MetricsReport(variables, per, aggregate, curve, float(err.mean()), float(err.std()),
                         hist, capped_any, dict(tags or {}))


def persistence_forecast(last_snapshot, horizon):
    """Repeat the last observed H×W×C snapshot ``horizon`` times."""
    last = np.asarray(last_snapshot)
    return np.repeat(last[None], horizon, axis=0)
