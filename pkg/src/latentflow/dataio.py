"""Snapshot container (manifest.json + snapshots.f32), splitting and normalization."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "snapshots.f32"
_LE_F32 = np.dtype("<f4")


@dataclass
class FlowSnapshotSeries:
    """T×H×W×C float32 snapshots with channel names and time metadata."""

    data: np.ndarray
    variables: list = field(default_factory=lambda: ["u", "v", "omega"])
    dt_record: float = 1.0
    scenario: str = "unnamed"
    provenance: object = "imported"
    seed: int | None = None
    # In-memory only; never serialized.
    diagnostics: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise FormatError(f"expected T×H×W×C data, got shape {self.data.shape}")
        if self.data.shape[0] < 1:
            raise FormatError("series must hold at least one snapshot")
        if self.data.shape[-1] != len(self.variables):
            raise FormatError(
                f"{self.data.shape[-1]} channels but {len(self.variables)} variable names"
            )

    @property
    def T(self):
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data, **changes):
        return replace(self, data=data, diagnostics={}, **changes)


def first_nonfinite(data):
    bad = np.argwhere(~np.isfinite(data))
    return tuple(int(i) for i in bad[0]) if len(bad) else None


def write_series(series, directory):
    directory = Path(directory)
    bad = first_nonfinite(series.data)
    if bad is not None:
        raise FormatError(f"non-finite value at index {bad}")
    directory.mkdir(parents=True, exist_ok=True)
    T, H, W, C = series.data.shape
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "scenario": series.scenario,
        "variables": list(series.variables),
        "T": T,
        "H": H,
        "W": W,
        "C": C,
        "dt_record": series.dt_record,
        "dtype": "f32",
        "byte_order": "little",
        "seed": series.seed,
        "provenance": series.provenance,
    }
    blob = directory / BLOB_NAME
    tmp = blob.with_suffix(".tmp")
    tmp.write_bytes(np.ascontiguousarray(series.data, dtype=_LE_F32).tobytes(order="C"))
    os.replace(tmp, blob)
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_series(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_NAME).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"no {MANIFEST_NAME} in {directory}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unknown schema_version {manifest.get('schema_version')!r}")
    if manifest.get("byte_order") != "little":
        raise FormatError(f"unsupported byte_order {manifest.get('byte_order')!r}")
    if manifest.get("dtype") != "f32":
        raise FormatError(f"unsupported dtype {manifest.get('dtype')!r}")
    T, H, W, C = (int(manifest[k]) for k in ("T", "H", "W", "C"))
    if C != len(manifest["variables"]):
        raise FormatError(f"C={C} disagrees with variables {manifest['variables']}")
    blob_path = directory / BLOB_NAME
    if not blob_path.exists():
        raise FormatError(f"missing {BLOB_NAME} in {directory}")
    raw = blob_path.read_bytes()
    expected = T * H * W * C * 4
    if len(raw) != expected:
        raise FormatError(f"size mismatch: blob has {len(raw)} bytes, manifest implies {expected}")
    data = np.frombuffer(raw, dtype=_LE_F32).reshape(T, H, W, C).astype(np.float32)
    bad = first_nonfinite(data)
    if bad is not None:
        raise FormatError(f"non-finite value at index {bad}")
    return FlowSnapshotSeries(
        data=data,
        variables=list(manifest["variables"]),
        dt_record=float(manifest["dt_record"]),
        scenario=manifest["scenario"],
        provenance=manifest.get("provenance", "imported"),
        seed=manifest.get("seed"),
    )


def import_snapshots(array, variables, dt_record, scenario, layout="THWC"):
    """Wrap an externally produced array (e.g. exported CFD slices) as a series."""
    array = np.asarray(array, dtype=np.float64)
    layout = layout.upper()
    if sorted(layout) != sorted("THWC"):
        raise ConfigError(f"layout must be a permutation of THWC, got {layout!r}")
    array = np.transpose(array, [layout.index(c) for c in "THWC"])
    bad = first_nonfinite(array)
    if bad is not None:
        raise FormatError(f"non-finite value at index {bad}")
    return FlowSnapshotSeries(array.astype(np.float32), list(variables), float(dt_record), scenario)


@dataclass
class SplitSpec:
    train_fraction: float = 0.9
    contiguous: bool = True

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if not self.contiguous:
            raise ConfigError("only contiguous temporal splits are supported")


def split_index(T, spec):
    return int(math.floor(T * spec.train_fraction))


def split_series(series, spec=None):
    spec = spec or SplitSpec()
    if series.T < 10:
        raise ConfigError(f"need at least 10 snapshots to split, got {series.T}")
    k = split_index(series.T, spec)
    return series.with_data(series.data[:k].copy()), series.with_data(series.data[k:].copy())


@dataclass
class FieldNormalizer:
    """Per-variable affine map fitted on a training split.

    minmax maps [min, max] onto [-1, 1]; zscore maps to zero mean, unit std.
    Degenerate variables (zero range or std) pass through unchanged.
    """

    mode: str = "minmax"
    offset: list = field(default_factory=list)
    scale: list = field(default_factory=list)
    degenerate: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, series, mode="minmax"):
        data = series.data if isinstance(series, FlowSnapshotSeries) else np.asarray(series)
        flat = data.reshape(-1, data.shape[-1]).astype(np.float64)
        offset, scale, degenerate = [], [], []
        if mode == "minmax":
            lo, hi = flat.min(axis=0), flat.max(axis=0)
            stats = {"min": lo.tolist(), "max": hi.tolist()}
            for a, b in zip(lo, hi):
                if b - a > 0:
                    offset.append(float((a + b) / 2))
                    scale.append(float((b - a) / 2))
                    degenerate.append(False)
                else:
                    offset.append(0.0)
                    scale.append(1.0)
                    degenerate.append(True)
        elif mode == "zscore":
            mean, std = flat.mean(axis=0), flat.std(axis=0)
            stats = {"mean": mean.tolist(), "std": std.tolist()}
            for m, s in zip(mean, std):
                if s > 0:
                    offset.append(float(m))
                    scale.append(float(s))
                    degenerate.append(False)
                else:
                    offset.append(0.0)
                    scale.append(1.0)
                    degenerate.append(True)
        else:
            raise ConfigError(f"unknown normalizer mode {mode!r}")
        return cls(mode, offset, scale, degenerate, stats)

    def to_dict(self):
        return {"mode": self.mode, "offset": self.offset, "scale": self.scale,
                "degenerate": self.degenerate, "stats": self.stats}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mode"], list(d["offset"]), list(d["scale"]), list(d["degenerate"]), dict(d.get("stats", {})))

    def apply(self, data):
        data = np.asarray(data, dtype=np.float64)
        return ((data - np.asarray(self.offset)) / np.asarray(self.scale)).astype(np.float32)

    def invert(self, data):
        data = np.asarray(data, dtype=np.float64)
        return (data * np.asarray(self.scale) + np.asarray(self.offset)).astype(np.float32)


def normalize(series, normalizer):
    return series.with_data(normalizer.apply(series.data))


def denormalize(series, normalizer):
    return series.with_data(normalizer.invert(series.data))
