"""Disentangled reduced-order model: convolutional encoder/decoder with a Gaussian latent.

Training minimizes, per snapshot,

    L = L_rec + lam * L_dis
    L_rec = mean over mesh points of ||X - X_hat||² (squared norm over channels)
    L_dis = -1/2 sum_k (1 + log sigma_k² - mu_k² - sigma_k²)

with X_hat decoded from z = mu + sigma * eps. Latent sequences for the temporal
processor use z = mu.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .ckpt import load_params, read_json, save_params, seeded_generator, tensor_checksum, write_json
from .dataio import FieldNormalizer, FlowSnapshotSeries
from .errors import BlowupError, ConfigError, FormatError

log = logging.getLogger(__name__)

MANIFEST_NAME = "rom_manifest.json"
PARAMS_NAME = "rom_params.safetensors"

_ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU, "silu": nn.SiLU, "tanh": nn.Tanh}


@dataclass
class RomConfig:
    latent_dim: int = 32
    lam: float = 1e-4
    encoder_channels: tuple = (32, 64, 128, 256)
    input_shape: tuple = (64, 64, 3)
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 50
    weight_decay: float = 1e-2
    activation: str = "gelu"
    normalizer: str = "minmax"
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.input_shape = tuple(int(s) for s in self.input_shape)

    def validate(self):
        H, W, C = self.input_shape
        stages = len(self.encoder_channels)
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if stages < 1:
            raise ConfigError("need at least one encoder stage")
        if H % 2**stages or W % 2**stages:
            raise ConfigError(f"H={H}, W={W} must be divisible by 2^{stages}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        return self

    def to_dict(self):
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass
class LatentCode:
    mu: np.ndarray
    sigma: np.ndarray
    z: np.ndarray | None = None


@dataclass
class LatentSequence:
    """D×T latent means; column t is snapshot t."""

    values: np.ndarray
    source_scenario: str = "unnamed"
    rom_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ConfigError(f"latent sequence must be D×T, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise BlowupError("non-finite latent values")

    @property
    def D(self):
        return self.values.shape[0]

    @property
    def T(self):
        return self.values.shape[1]


class RomNet(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        cfg.validate()
        H, W, C = cfg.input_shape
        act = _ACTIVATIONS[cfg.activation]
        widths = list(cfg.encoder_channels)
        self.bottleneck = (widths[-1], H // 2 ** len(widths), W // 2 ** len(widths))
        flat = math.prod(self.bottleneck)

        layers, c = [], C
        for w in widths:
            layers += [nn.Conv2d(c, w, 4, stride=2, padding=1), act()]
            c = w
        self.encoder = nn.Sequential(*layers, nn.Flatten())
        self.mu_head = nn.Linear(flat, cfg.latent_dim)
        self.logvar_head = nn.Linear(flat, cfg.latent_dim)

        self.expand = nn.Linear(cfg.latent_dim, flat)
        layers = [act()]
        rev = widths[::-1]
        for i, w in enumerate(rev):
            nxt = rev[i + 1] if i + 1 < len(rev) else C
            layers.append(nn.ConvTranspose2d(w, nxt, 4, stride=2, padding=1))
            if i + 1 < len(rev):
                layers.append(act())
        self.decoder = nn.Sequential(*layers)

    def encode(self, x):
        """x: (B, H, W, C) -> (mu, logvar), each (B, D)."""
        h = self.encoder(x.permute(0, 3, 1, 2))
        return self.mu_head(h), self.logvar_head(h)

    def decode(self, z):
        h = self.expand(z).view(-1, *self.bottleneck)
        return self.decoder(h).permute(0, 2, 3, 1)

    def forward(self, x, eps=None):
        mu, logvar = self.encode(x)
        z = mu if eps is None else reparameterize(mu, torch.exp(0.5 * logvar), eps)
        return self.decode(z), mu, logvar


def reparameterize(mu, sigma, epsilon):
    return mu + sigma * epsilon


def reconstruction_loss(x, x_hat):
    """Squared channel-vector error summed over C, averaged over the H×W mesh.

    Accepts (..., H, W, C); leading batch dims are averaged.
    """
    x, x_hat = torch.as_tensor(x), torch.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ConfigError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    per_sample = ((x - x_hat) ** 2).sum(-1).mean(dim=(-2, -1))
    return per_sample.mean()


def disentanglement_loss(mu, sigma):
    """-1/2 sum_k (1 + log sigma_k² - mu_k² - sigma_k²); leading dims averaged."""
    mu, sigma = torch.as_tensor(mu), torch.as_tensor(sigma)
    if torch.any(sigma <= 0):
        raise ConfigError("sigma must be strictly positive")
    return kl_from_logvar(mu, torch.log(sigma**2))


def kl_from_logvar(mu, logvar):
    per_sample = -0.5 * (1 + logvar - mu**2 - torch.exp(logvar)).sum(-1)
    return per_sample.mean()


def rom_objective(net, x, eps, lam):
    x_hat, mu, logvar = net(x, eps)
    rec = reconstruction_loss(x, x_hat)
    dis = kl_from_logvar(mu, logvar)
    return rec + lam * dis, rec, dis


@dataclass
class RomCheckpoint:
    cfg: RomConfig
    net: RomNet
    normalizer: FieldNormalizer
    variables: list = field(default_factory=lambda: ["u", "v", "omega"])
    loss_trace: list = field(default_factory=list)
    initial_loss: float | None = None
    final_loss: float | None = None
    params_sha256: str = ""

    @property
    def checksum(self):
        return tensor_checksum(self.net.state_dict())

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.params_sha256 = save_params(self.net.state_dict(), directory / PARAMS_NAME)
        n_params = sum(p.numel() for p in self.net.parameters())
        manifest = {
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "variables": list(self.variables),
            "architecture": {
                "encoder": f"{len(self.cfg.encoder_channels)}x Conv2d(k=4,s=2,p=1)+{self.cfg.activation}, "
                           f"widths {list(self.cfg.encoder_channels)}, flatten, Linear heads mu/logvar",
                "decoder": "Linear, mirrored ConvTranspose2d(k=4,s=2,p=1) stages, linear output",
                "sigma": "exp(0.5*logvar)",
                "init": "torch default (kaiming-uniform)",
                "n_params": n_params,
            },
            "normalizer": self.normalizer.to_dict(),
            "loss_trace": self.loss_trace,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "params_file": PARAMS_NAME,
            "params_sha256": self.params_sha256,
        }
        write_json(directory / MANIFEST_NAME, manifest)
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        path = directory / MANIFEST_NAME
        if not path.exists():
            raise FormatError(f"no {MANIFEST_NAME} in {directory}")
        m = read_json(path)
        cfg = RomConfig(**m["config"])
        net = RomNet(cfg)
        net.load_state_dict(load_params(directory / m["params_file"]))
        net.eval()
        return cls(cfg, net, FieldNormalizer.from_dict(m["normalizer"]), m["variables"],
                   m["loss_trace"], m["initial_loss"], m["final_loss"], m["params_sha256"])


def _objective_on(net, data, lam, seed, batch_size=256):
    """Full-data objective with a fixed noise stream (for before/after comparison)."""
    g = seeded_generator(seed)
    total, n = 0.0, len(data)
    with torch.no_grad():
        for i in range(0, n, batch_size):
            x = data[i:i + batch_size]
            eps = torch.randn(len(x), net.mu_head.out_features, generator=g, dtype=x.dtype)
            loss, _, _ = rom_objective(net, x, eps, lam)
            total += loss.item() * len(x)
    return total / n


def train_rom(train_series, cfg, dtype=torch.float32, on_epoch=None):
    if train_series.T < 1:
        raise ConfigError("empty training series")
    cfg = RomConfig(**{**cfg.to_dict(), "input_shape": train_series.data.shape[1:]})
    cfg.validate()
    normalizer = FieldNormalizer.fit(train_series, cfg.normalizer)
    data = torch.as_tensor(normalizer.apply(train_series.data), dtype=dtype)

    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        net = RomNet(cfg).to(dtype)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    g = seeded_generator(cfg.seed + 1)

    initial = _objective_on(net, data, cfg.lam, cfg.seed + 2)
    trace = []
    n = len(data)
    for epoch in range(cfg.epochs):
        net.train()
        perm = torch.randperm(n, generator=g)
        running = 0.0
        for i in range(0, n, cfg.batch_size):
            x = data[perm[i:i + cfg.batch_size]]
            eps = torch.randn(len(x), cfg.latent_dim, generator=g, dtype=dtype)
            loss, _, _ = rom_objective(net, x, eps, cfg.lam)
            if not torch.isfinite(loss):
                raise BlowupError(f"non-finite ROM loss at epoch {epoch}, trace {trace}", where=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * len(x)
        trace.append(running / n)
        if on_epoch is not None:
            on_epoch(epoch, trace[-1])
        log.debug("rom epoch %d loss %.6g", epoch, trace[-1])
    net.eval()
    final = _objective_on(net, data, cfg.lam, cfg.seed + 2)
    return RomCheckpoint(cfg, net, normalizer, list(train_series.variables), trace, initial, final)


def _check_shape(series, ckpt):
    if tuple(series.data.shape[1:]) != tuple(ckpt.cfg.input_shape):
        raise ConfigError(
            f"series snapshots {series.data.shape[1:]} do not match ROM input {ckpt.cfg.input_shape}"
        )


def encode(x, ckpt):
    """Single normalized snapshot H×W×C -> LatentCode(mu, sigma)."""
    x = torch.as_tensor(np.asarray(x)[None], dtype=next(ckpt.net.parameters()).dtype)
    if tuple(x.shape[1:]) != tuple(ckpt.cfg.input_shape):
        raise ConfigError(f"snapshot shape {tuple(x.shape[1:])} != {ckpt.cfg.input_shape}")
    with torch.no_grad():
        mu, logvar = ckpt.net.encode(x)
    return LatentCode(mu[0].numpy(), torch.exp(0.5 * logvar)[0].numpy())


def decode(z, ckpt):
    """Latent vector -> normalized snapshot H×W×C."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ConfigError("latent vector must be finite")
    dtype = next(ckpt.net.parameters()).dtype
    with torch.no_grad():
        out = ckpt.net.decode(torch.as_tensor(z[None], dtype=dtype))
    return out[0].numpy()


def encode_series(series, ckpt, batch_size=256):
    _check_shape(series, ckpt)
    data = torch.as_tensor(ckpt.normalizer.apply(series.data), dtype=next(ckpt.net.parameters()).dtype)
    mus = []
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            mus.append(ckpt.net.encode(data[i:i + batch_size])[0])
    values = torch.cat(mus).T.double().numpy()
    return LatentSequence(values, series.scenario, ckpt.params_sha256 or ckpt.checksum)


def decode_latents(values, ckpt, scenario="decoded", dt_record=1.0, batch_size=256):
    """D×F latents -> FlowSnapshotSeries in physical (denormalized) units."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != ckpt.cfg.latent_dim:
        raise ConfigError(f"latent dim {values.shape[0]} != ROM latent dim {ckpt.cfg.latent_dim}")
    if not np.all(np.isfinite(values)):
        raise BlowupError("non-finite latents passed to decoder")
    dtype = next(ckpt.net.parameters()).dtype
    z = torch.as_tensor(values.T, dtype=dtype)
    outs = []
    with torch.no_grad():
        for i in range(0, len(z), batch_size):
            outs.append(ckpt.net.decode(z[i:i + batch_size]))
    fields = ckpt.normalizer.invert(torch.cat(outs).double().numpy())
    return FlowSnapshotSeries(fields, list(ckpt.variables), dt_record, scenario, "decoded")


def reconstruct(series, ckpt, sample=False, seed=0, batch_size=256):
    """Round-trip a series through the ROM using z=mu, or sampled z when ``sample``."""
    _check_shape(series, ckpt)
    dtype = next(ckpt.net.parameters()).dtype
    data = torch.as_tensor(ckpt.normalizer.apply(series.data), dtype=dtype)
    g = seeded_generator(seed)
    outs = []
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            x = data[i:i + batch_size]
            eps = torch.randn(len(x), ckpt.cfg.latent_dim, generator=g, dtype=dtype) if sample else None
            outs.append(ckpt.net(x, eps)[0])
    fields = ckpt.normalizer.invert(torch.cat(outs).double().numpy())
    return series.with_data(fields)


@dataclass
class LatentCorrelation:
    matrix: np.ndarray
    kept: list
    dropped: list

    @property
    def mean_abs_offdiag(self):
        return mean_abs_offdiag(self.matrix)


def latent_correlation(latents):
    """Pearson correlation across time between latent dimensions.

    Zero-variance dimensions are excluded and listed in ``dropped``.
    """
    values = latents.values if isinstance(latents, LatentSequence) else np.asarray(latents, dtype=np.float64)
    if values.shape[1] < 2:
        raise ConfigError("need at least two time steps for a correlation")
    centered = values - values.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=1))
    scale = np.abs(values).max(axis=1) + 1e-300
    keep = norms > 1e-12 * scale * np.sqrt(values.shape[1])
    kept = [int(i) for i in np.flatnonzero(keep)]
    dropped = [int(i) for i in np.flatnonzero(~keep)]
    unit = centered[keep] / norms[keep, None]
    corr = np.clip(unit @ unit.T, -1.0, 1.0)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return LatentCorrelation(corr, kept, dropped)


def mean_abs_offdiag(matrix):
    m = np.asarray(matrix)
    if len(m) < 2:
        return 0.0
    off = ~np.eye(len(m), dtype=bool)
    return float(np.abs(m[off]).mean())
