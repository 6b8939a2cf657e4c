import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from latentflow.dataio import (
    BLOB_NAME,
    MANIFEST_NAME,
    FieldNormalizer,
    FlowSnapshotSeries,
    SplitSpec,
    denormalize,
    import_snapshots,
    normalize,
    read_series,
    split_series,
    write_series,
)
from latentflow.errors import ConfigError, FormatError


def _series(T=12, H=4, W=4, C=3, seed=0):
    rng = np.random.default_rng(seed)
    names = ["u", "v", "omega"][:C] if C <= 3 else [f"c{i}" for i in range(C)]
    return FlowSnapshotSeries(rng.standard_normal((T, H, W, C)), names, 0.01, "test", "imported", seed)


def test_zero_series_blob_size(tmp_path):
    s = FlowSnapshotSeries(np.zeros((1, 2, 2, 1)), ["w"])
    write_series(s, tmp_path)
    assert (tmp_path / BLOB_NAME).read_bytes() == bytes(16)
    m = json.loads((tmp_path / MANIFEST_NAME).read_text())
    assert m["dtype"] == "f32" and m["byte_order"] == "little"
    assert (m["T"], m["H"], m["W"], m["C"]) == (1, 2, 2, 1)


def test_blob_layout_is_t_major(tmp_path):
    data = np.arange(2 * 2 * 3 * 2, dtype=np.float32).reshape(2, 2, 3, 2)
    write_series(FlowSnapshotSeries(data, ["a", "b"]), tmp_path)
    raw = np.frombuffer((tmp_path / BLOB_NAME).read_bytes(), dtype="<f4")
    np.testing.assert_array_equal(raw, np.arange(24))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3)),
              elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_round_trip_bit_exact(tmp_path_factory, data):
    d = tmp_path_factory.mktemp("rt")
    s = FlowSnapshotSeries(data, [f"c{i}" for i in range(data.shape[-1])], 0.5, "x", "imported", 4)
    write_series(s, d)
    back = read_series(d)
    assert back.data.tobytes() == data.tobytes()
    assert back.variables == s.variables and back.dt_record == 0.5 and back.seed == 4


def test_nan_rejected_with_index(tmp_path):
    data = np.zeros((2, 2, 2, 1))
    data[1, 0, 1, 0] = np.nan
    with pytest.raises(FormatError, match=r"\(1, 0, 1, 0\)"):
        write_series(FlowSnapshotSeries(data, ["w"]), tmp_path)


def test_truncated_blob(tmp_path):
    write_series(_series(), tmp_path)
    blob = tmp_path / BLOB_NAME
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(FormatError, match="size mismatch"):
        read_series(tmp_path)


def test_channel_count_mismatch(tmp_path):
    write_series(_series(C=2), tmp_path)
    m = json.loads((tmp_path / MANIFEST_NAME).read_text())
    m["C"] = 3
    m["variables"] = ["u", "v", "omega"]
    (tmp_path / MANIFEST_NAME).write_text(json.dumps(m))
    with pytest.raises(FormatError):
        read_series(tmp_path)


@pytest.mark.parametrize("key,value", [("schema_version", 99), ("byte_order", "big")])
def test_manifest_validation(tmp_path, key, value):
    write_series(_series(), tmp_path)
    m = json.loads((tmp_path / MANIFEST_NAME).read_text())
    m[key] = value
    (tmp_path / MANIFEST_NAME).write_text(json.dumps(m))
    with pytest.raises(FormatError):
        read_series(tmp_path)


@pytest.mark.parametrize("T,frac,expected", [(1500, 0.9, (1350, 150)), (10, 0.9, (9, 1)), (11, 0.5, (5, 6))])
def test_split_sizes(T, frac, expected):
    train, test = split_series(_series(T=T, H=2, W=2), SplitSpec(frac))
    assert (train.T, test.T) == expected


def test_split_is_contiguous():
    s = _series(T=20)
    train, test = split_series(s)
    np.testing.assert_array_equal(np.concatenate([train.data, test.data]), s.data)


def test_split_too_short():
    with pytest.raises(ConfigError):
        split_series(_series(T=9))


def test_minmax_maps_to_unit_interval():
    s = _series(T=30)
    norm = FieldNormalizer.fit(s)
    out = normalize(s, norm).data
    np.testing.assert_allclose(out.reshape(-1, 3).min(0), -1, atol=1e-6)
    np.testing.assert_allclose(out.reshape(-1, 3).max(0), 1, atol=1e-6)


def test_constant_variable_passthrough():
    s = _series(T=10)
    s.data[..., 1] = 3.0
    norm = FieldNormalizer.fit(s)
    assert norm.degenerate == [False, True, False]
    np.testing.assert_array_equal(normalize(s, norm).data[..., 1], 3.0)


def test_zscore_identity_stats():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((50, 8, 8, 1))
    x = (x - x.mean()) / x.std()
    s = FlowSnapshotSeries(x, ["w"])
    norm = FieldNormalizer.fit(s, "zscore")
    np.testing.assert_allclose(normalize(s, norm).data, s.data, atol=1e-6)


@pytest.mark.parametrize("mode", ["minmax", "zscore"])
def test_normalizer_round_trip(mode):
    s = _series(T=40, seed=5)
    norm = FieldNormalizer.fit(s, mode)
    back = denormalize(normalize(s, norm), norm)
    assert np.abs(back.data - s.data).max() < 1e-5
    assert FieldNormalizer.from_dict(norm.to_dict()) == norm


def test_import_layout_permutation():
    arr = np.random.default_rng(0).standard_normal((3, 2, 5, 6))  # C, T, H, W
    s = import_snapshots(arr, ["p", "q", "r"], 0.1, "cavity", layout="CTHW")
    assert s.data.shape == (2, 5, 6, 3)
    np.testing.assert_allclose(s.data[1, 2, 3, 0], arr[0, 1, 2, 3], rtol=1e-6)
    assert s.provenance == "imported"
