import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from latentflow import rom
from latentflow.dataio import FlowSnapshotSeries
from latentflow.errors import ConfigError

TINY = dict(latent_dim=2, encoder_channels=(2,), input_shape=(4, 4, 1))


def tiny_net(dtype=torch.float64, seed=0, **kw):
    torch.manual_seed(seed)
    return rom.RomNet(rom.RomConfig(**{**TINY, **kw})).to(dtype)


def small_series(T=24, seed=0, H=8):
    rng = np.random.default_rng(seed)
    x = np.linspace(0, 2 * np.pi, H, endpoint=False)
    t = np.arange(T)[:, None, None]
    base = np.sin(x[None, :, None] + 0.3 * t) * np.cos(x[None, None, :] - 0.2 * t)
    data = np.stack([base, 0.5 * base**2, np.cos(base)], -1) + 0.05 * rng.standard_normal((T, H, H, 3))
    return FlowSnapshotSeries(data, ["u", "v", "omega"], 0.1, "toy")


# --- loss analytics ------------------------------------------------------------

def test_reconstruction_loss_identity():
    x = torch.randn(3, 4, 4, 2)
    assert rom.reconstruction_loss(x, x).item() == 0.0


def test_reconstruction_loss_channel_norm():
    x = torch.zeros(1, 1, 2, dtype=torch.float64)
    xh = torch.tensor([[[1.0, 2.0]]], dtype=torch.float64)
    assert abs(rom.reconstruction_loss(x, xh).item() - 5.0) < 1e-12


def test_reconstruction_loss_spatial_mean():
    x = torch.zeros(2, 1, 1, dtype=torch.float64)
    xh = torch.tensor([[[1.0]], [[3.0]]], dtype=torch.float64)
    assert abs(rom.reconstruction_loss(x, xh).item() - 5.0) < 1e-12


def test_reconstruction_loss_shape_mismatch():
    with pytest.raises(ConfigError):
        rom.reconstruction_loss(torch.zeros(2, 2, 1), torch.zeros(2, 2, 2))


@pytest.mark.parametrize("mu,sigma,expected", [
    ([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0),
    ([1.0], [1.0], 0.5),
    ([0.0], [math.e], -0.5 * (1 + 2 - 0 - math.e**2)),
])
def test_disentanglement_loss_values(mu, sigma, expected):
    val = rom.disentanglement_loss(torch.tensor(mu, dtype=torch.float64), torch.tensor(sigma, dtype=torch.float64))
    assert abs(val.item() - expected) < 1e-10


def test_disentanglement_loss_e_value():
    assert abs(-0.5 * (3 - math.e**2) - 2.1945280494653) < 1e-10


def test_disentanglement_loss_rejects_nonpositive_sigma():
    with pytest.raises(ConfigError):
        rom.disentanglement_loss(torch.zeros(2), torch.tensor([1.0, 0.0]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.05, 5)), min_size=1, max_size=6))
def test_disentanglement_loss_nonnegative(pairs):
    mu = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    sigma = torch.tensor([p[1] for p in pairs], dtype=torch.float64)
    val = rom.disentanglement_loss(mu, sigma).item()
    assert val >= -1e-12
    if val < 1e-14:
        assert torch.allclose(mu, torch.zeros_like(mu), atol=1e-6)
        assert torch.allclose(sigma, torch.ones_like(sigma), atol=1e-6)


# --- reparameterization ------------------------------------------------------

def test_reparameterize_zero_noise():
    mu = torch.tensor([0.3, -1.0])
    assert torch.equal(rom.reparameterize(mu, torch.tensor([2.0, 5.0]), torch.zeros(2)), mu)


def test_reparameterize_hand_example():
    z = rom.reparameterize(torch.tensor([1.0, 2.0]), torch.tensor([1.0, 1.0]), torch.tensor([-1.0, 1.0]))
    assert z.tolist() == [0.0, 3.0]


def test_reparameterize_small_sigma_limit():
    mu = torch.tensor([0.7], dtype=torch.float64)
    sigma = torch.exp(0.5 * torch.tensor([-80.0], dtype=torch.float64))
    assert abs(rom.reparameterize(mu, sigma, torch.tensor([3.0], dtype=torch.float64)) - mu).item() < 1e-15


# --- network contracts ----------------------------------------------------------

def _ckpt(cfg, seed=0):
    torch.manual_seed(seed)
    net = rom.RomNet(cfg)
    from latentflow.dataio import FieldNormalizer
    norm = FieldNormalizer("minmax", [0.0] * cfg.input_shape[2], [1.0] * cfg.input_shape[2], [False] * cfg.input_shape[2])
    return rom.RomCheckpoint(cfg, net.eval(), norm)


def test_encode_sigma_positive_and_deterministic():
    ck = _ckpt(rom.RomConfig(latent_dim=4, encoder_channels=(4, 8), input_shape=(8, 8, 3)))
    x = np.random.default_rng(0).standard_normal((8, 8, 3))
    a, b = rom.encode(x, ck), rom.encode(x, ck)
    assert np.all(a.sigma > 0)
    np.testing.assert_array_equal(a.mu, b.mu)
    np.testing.assert_array_equal(a.sigma, b.sigma)


def test_fresh_net_zero_inputs_finite():
    ck = _ckpt(rom.RomConfig(latent_dim=32, encoder_channels=(32, 64, 128, 256), input_shape=(64, 64, 3)))
    code = rom.encode(np.zeros((64, 64, 3)), ck)
    assert np.all(np.isfinite(code.mu)) and np.all(np.isfinite(code.sigma))
    out = rom.decode(np.zeros(32), ck)
    assert out.shape == (64, 64, 3) and np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, rom.decode(np.zeros(32), ck))


def test_encode_shape_mismatch():
    ck = _ckpt(rom.RomConfig(latent_dim=2, encoder_channels=(2,), input_shape=(4, 4, 1)))
    with pytest.raises(ConfigError):
        rom.encode(np.zeros((8, 8, 1)), ck)


def test_decode_rejects_nonfinite():
    ck = _ckpt(rom.RomConfig(**TINY))
    with pytest.raises(ConfigError):
        rom.decode(np.array([np.nan, 0.0]), ck)


def test_config_divisibility():
    with pytest.raises(ConfigError):
        rom.RomConfig(encoder_channels=(4, 4, 4), input_shape=(12, 12, 1)).validate()


# --- gradient oracle ---------------------------------------------------------------

def _flat_params(net):
    return [p for p in net.parameters()]


def test_objective_gradient_matches_finite_differences():
    net = tiny_net()
    n_params = sum(p.numel() for p in net.parameters())
    assert n_params <= 1000
    g = torch.Generator().manual_seed(1)
    x = torch.randn(3, 4, 4, 1, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 2, generator=g, dtype=torch.float64)
    lam = 0.3

    loss, _, _ = rom.rom_objective(net, x, eps, lam)
    analytic = torch.autograd.grad(loss, _flat_params(net))

    h = 1e-6
    worst = 0.0
    with torch.no_grad():
        for p, ga in zip(_flat_params(net), analytic):
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = rom.rom_objective(net, x, eps, lam)[0].item()
                flat[i] = orig - h
                down = rom.rom_objective(net, x, eps, lam)[0].item()
                flat[i] = orig
                fd = (up - down) / (2 * h)
                a = ga.view(-1)[i].item()
                scale = max(abs(a), abs(fd), 1e-3)
                worst = max(worst, abs(a - fd) / scale)
    assert worst < 1e-4


def test_lambda_zero_removes_disentanglement_gradient():
    net = tiny_net()
    x = torch.randn(2, 4, 4, 1, dtype=torch.float64)
    eps = torch.randn(2, 2, dtype=torch.float64)
    total = torch.autograd.grad(rom.rom_objective(net, x, eps, 0.0)[0], _flat_params(net))
    x_hat, _, _ = net(x, eps)
    rec = torch.autograd.grad(rom.reconstruction_loss(x, x_hat), _flat_params(net))
    for a, b in zip(total, rec):
        assert torch.equal(a, b)


# --- training, latents -------------------------------------------------------------

def test_tiny_training_reduces_loss_and_is_deterministic():
    s = small_series()
    cfg = rom.RomConfig(latent_dim=4, encoder_channels=(4, 8), epochs=2, batch_size=8, lr=3e-3)
    a = rom.train_rom(s, cfg)
    b = rom.train_rom(s, cfg)
    assert a.final_loss < a.initial_loss
    assert len(a.loss_trace) == 2
    assert a.checksum == b.checksum


def test_checkpoint_round_trip(tmp_path):
    s = small_series()
    ck = rom.train_rom(s, rom.RomConfig(latent_dim=3, encoder_channels=(4,), epochs=1, batch_size=8))
    ck.save(tmp_path)
    back = rom.RomCheckpoint.load(tmp_path)
    assert back.checksum == ck.checksum
    np.testing.assert_array_equal(rom.encode_series(s, back).values, rom.encode_series(s, ck).values)


def test_encode_series_shapes_and_repeats():
    s = small_series(T=5)
    s.data[3] = s.data[1]
    ck = rom.train_rom(s, rom.RomConfig(latent_dim=32, encoder_channels=(4,), epochs=0))
    lat = rom.encode_series(s, ck)
    assert lat.values.shape == (32, 5)
    np.testing.assert_array_equal(lat.values[:, 1], lat.values[:, 3])
    np.testing.assert_array_equal(lat.values, rom.encode_series(s, ck).values)


def test_encode_series_shape_mismatch():
    ck = rom.train_rom(small_series(H=8), rom.RomConfig(latent_dim=2, encoder_channels=(4,), epochs=0))
    with pytest.raises(ConfigError):
        rom.encode_series(small_series(H=16), ck)


# --- correlation ---------------------------------------------------------------------

def test_correlation_linear_dependence():
    row = np.array([0.1, 0.5, -0.3, 2.0, 1.1])
    c = rom.latent_correlation(np.stack([row, 2 * row])).matrix
    assert np.isclose(c[0, 1], 1.0)
    c = rom.latent_correlation(np.stack([row, -row])).matrix
    assert np.isclose(c[0, 1], -1.0)


def test_correlation_orthogonal_rows():
    c = rom.latent_correlation(np.array([[1, -1, 1, -1], [1, 1, -1, -1]], dtype=float)).matrix
    assert abs(c[0, 1]) < 1e-12


def test_correlation_drops_constant_dims():
    vals = np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0], [3.0, 1.0, 2.0]])
    res = rom.latent_correlation(vals)
    assert res.dropped == [1] and res.kept == [0, 2]
    assert res.matrix.shape == (2, 2)


def test_correlation_needs_two_steps():
    with pytest.raises(ConfigError):
        rom.latent_correlation(np.ones((3, 1)))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(3, 30), st.integers(0, 10**6))
def test_correlation_symmetric_unit_diagonal(D, T, seed):
    vals = np.random.default_rng(seed).standard_normal((D, T))
    res = rom.latent_correlation(vals)
    np.testing.assert_array_equal(res.matrix, res.matrix.T)
    assert np.all(np.diag(res.matrix) == 1.0)
    np.testing.assert_allclose(res.matrix, np.corrcoef(vals), atol=1e-10)
    assert 0 <= res.mean_abs_offdiag <= 1
