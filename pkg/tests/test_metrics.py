import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from latentflow import metrics as M
from latentflow.errors import ConfigError

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_mae_mse_hand_examples():
    assert M.mae([0, 2], [1, 1]) == 1.0
    assert M.mse([0, 2], [1, 1]) == 1.0


def test_smape_hand_examples():
    assert abs(M.smape([1.0], [3.0]) - 100.0) < 1e-6
    assert M.smape([0.0], [0.0]) == 0.0
    assert M.smape([2.0, -1.0], [2.0, -1.0]) == 0.0


def test_r2_hand_examples():
    assert abs(M.r2([0, 2], [2, 0]) - (-3.0)) < 1e-6
    assert M.r2([0, 2], [0, 2]) == 1.0
    assert M.r2([0, 2], [1, 1]) == 0.0
    assert M.r2([3, 3, 3], [1, 2, 3]) is None


def test_psnr_hand_examples():
    assert M.psnr([0.0, 1.0], [0.0, 1.0]) == (100.0, True)
    assert abs(M.psnr_from_mse(255.0**2)) < 1e-6
    assert abs(M.psnr_from_mse(1.0) - 10 * math.log10(65025)) < 1e-6
    assert abs(M.psnr_from_mse(1.0) - 48.1308) < 1e-4


def test_psnr_scaling_from_truth_range():
    # truth spans [0, 1]; a constant offset of 1/255 is one grey level -> scaled MSE 1
    x = np.linspace(0, 1, 50)
    val, capped = M.psnr(x, x + 1 / 255)
    assert not capped
    assert abs(val - 10 * math.log10(65025)) < 1e-6
    # error of the full range everywhere -> 0 dB
    val, _ = M.psnr(x, x + 1.0)
    assert abs(val) < 1e-6


def test_ssim_identity_and_constants():
    x = np.random.default_rng(0).uniform(0, 255, (32, 32))
    assert abs(M.ssim_2d(x, x) - 1) < 1e-12
    c = np.full((16, 16), 7.0)
    assert abs(M.ssim_2d(c, c) - 1) < 1e-12


def test_ssim_inverted_below_one():
    x = np.random.default_rng(1).uniform(0, 255, (24, 24))
    assert M.ssim_2d(x, 255 - x) < 1


def test_ssim_matches_reference_implementation():
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 255, (40, 48))
    y = np.clip(x + rng.normal(0, 30, x.shape), 0, 255)
    ref = structural_similarity(x, y, data_range=255, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    # the reference averages over the valid interior (crop of 5 px each side)
    assert abs(M.ssim_2d(x, y) - ref) < 1e-3


def test_ssim_rejects_small_fields():
    with pytest.raises(ConfigError):
        M.ssim_2d(np.zeros((8, 8)), np.zeros((8, 8)))


@pytest.mark.parametrize("fn", [M.mae, M.mse, M.smape, M.r2])
def test_shape_mismatch(fn):
    with pytest.raises(ConfigError):
        fn(np.zeros(3), np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 12, elements=finite), arrays(np.float64, 12, elements=finite))
def test_symmetric_metrics(x, y):
    assert M.mae(x, y) == M.mae(y, x)
    assert M.mse(x, y) == M.mse(y, x)
    assert math.isclose(M.smape(x, y), M.smape(y, x), rel_tol=1e-12, abs_tol=1e-12)
    assert M.mse(x, y) >= 0
    assert 0 <= M.smape(x, y) <= 200 + 1e-9


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 10, elements=finite), arrays(np.float64, 10, elements=finite), st.floats(1.0, 10.0))
def test_error_scaling_monotone(x, y, c):
    z = x + c * (y - x)
    assert M.mae(x, z) >= M.mae(x, y) * (1 - 1e-12)
    assert M.mse(x, z) >= M.mse(x, y) * (1 - 1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.floats(-50, 50)))
def test_ssim_self_is_one(x):
    assert abs(M.ssim(x, x) - 1) < 1e-9


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 20, elements=finite), arrays(np.float64, 20, elements=finite))
def test_r2_at_most_one(x, y):
    v = M.r2(x, y)
    assert v is None or v <= 1.0


def _stack(seed=0, T=4, H=12, C=2):
    return np.random.default_rng(seed).standard_normal((T, H, H, C))


def test_evaluate_identity():
    t = _stack()
    rep = M.evaluate(t, t, ["u", "v"])
    for name in ("u", "v"):
        pv = rep.per_variable[name]
        assert pv["mae"] == pv["mse"] == pv["smape"] == 0
        assert pv["r2"] == 1.0
        assert abs(pv["ssim"] - 1) < 1e-12
        assert pv["psnr"] == 100.0
    assert rep.psnr_capped
    assert rep.mse_curve == [0.0] * 4


def test_evaluate_report_round_trip():
    t, p = _stack(0), _stack(1)
    rep = M.evaluate(p, t, ["u", "v"], bins=10, tags={"mode": "zero-shot"})
    back = M.MetricsReport.from_json(rep.to_json())
    assert back == rep
    assert len(rep.mse_curve) == 4
    assert sum(rep.histogram["counts"]) == t.size
    assert np.isclose(rep.aggregate["mse"], np.mean([rep.per_variable[v]["mse"] for v in ("u", "v")]))
    for v in rep.per_variable.values():
        assert -1 <= v["ssim"] <= 1 and v["r2"] <= 1
        assert all(np.isfinite(x) for x in v.values())


def test_evaluate_errors():
    with pytest.raises(ConfigError):
        M.evaluate(_stack(T=3), _stack(T=4))
    with pytest.raises(ConfigError):
        M.evaluate(np.zeros((0, 12, 12, 1)), np.zeros((0, 12, 12, 1)))


def test_report_schema_version_checked():
    d = M.evaluate(_stack(), _stack(1)).to_dict()
    d["schema_version"] = 7
    with pytest.raises(ConfigError):
        M.MetricsReport.from_dict(d)


def test_persistence_forecast():
    last = np.arange(8.0).reshape(2, 2, 2)
    out = M.persistence_forecast(last, 3)
    assert out.shape == (3, 2, 2, 2)
    assert all(np.array_equal(o, last) for o in out)
