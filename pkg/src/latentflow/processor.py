"""Temporal processor over latent sequences.

Each latent channel is forecast independently with shared parameters:

    window (M) -> RevIN -> N patches of length M_p -> MLP(Mish) -> s
    e = s + gamma * k            (k: prompt embeddings, one per patch position)
    h = backbone(e)              (frozen, causal)
    next window = OutputProjection(h), patch j of the output is future patch N+j

Training targets are normalized with the input window's RevIN statistics.
Rollout slides the window by ``rollout_stride`` predicted steps at a time.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import backbone as bb
from .ckpt import load_params, read_json, save_params, seeded_generator, tensor_checksum, write_json
from .errors import BlowupError, ConfigError, FormatError

log = logging.getLogger(__name__)

MANIFEST_NAME = "proc_manifest.json"
PARAMS_NAME = "proc_params.safetensors"
REVIN_EPS = 1e-5
PROMPT_TEMPLATE = (
    "This patch covers time steps {a} to {b} of a lookback window of {M} steps "
    "sampled every {dt} time units; patch {j} of {N}."
)


@dataclass
class ProcessorConfig:
    window: int = 20
    patch_len: int = 5
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    weight_decay: float = 1e-2
    rollout_stride: int = 1
    lora_enabled: bool = False
    lora_rank: int = 4
    lora_alpha: float = 16.0
    gamma_init: float = 0.1
    # Spacing between the start indices of consecutive training segments.
    sample_stride: int = 1
    seed: int = 0

    @property
    def n_patches(self):
        return self.window // self.patch_len

    def validate(self):
        if self.patch_len < 1 or self.window < self.patch_len:
            raise ConfigError(f"window={self.window} must be >= patch_len={self.patch_len} >= 1")
        if self.window % self.patch_len:
            warnings.warn(f"patch_len {self.patch_len} does not divide window {self.window}; "
                          "trailing steps are dropped", stacklevel=2)
        if not 1 <= self.rollout_stride <= self.n_patches * self.patch_len:
            raise ConfigError("rollout_stride must lie in [1, N*M_p]")
        if self.sample_stride < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("sample_stride and batch_size must be >= 1, epochs >= 0")
        return self

    def to_dict(self):
        return asdict(self)


# --- per-window normalization and patching --------------------------------

def revin_apply(segment, eps=REVIN_EPS):
    """(x - mean) / (std + eps); returns the normalized segment and (mean, std + eps)."""
    x = np.asarray(segment, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ConfigError("RevIN needs at least two samples")
    mean = x.mean(axis=-1, keepdims=True)
    denom = x.std(axis=-1, keepdims=True) + eps
    out = (x - mean) / denom
    if x.ndim == 1:
        return out, (float(mean[0]), float(denom[0]))
    return out, (mean[..., 0], denom[..., 0])


def revin_invert(segment, stats):
    mean, denom = stats
    x = np.asarray(segment, dtype=np.float64)
    return x * np.asarray(denom)[..., None] + np.asarray(mean)[..., None] if x.ndim > 1 else x * denom + mean


def _revin_torch(x, eps=REVIN_EPS):
    mean = x.mean(dim=-1, keepdim=True)
    denom = x.std(dim=-1, unbiased=False, keepdim=True) + eps
    return (x - mean) / denom, mean, denom


def patchify(segment, patch_len):
    x = np.asarray(segment)
    M = x.shape[-1]
    if M < patch_len:
        raise ConfigError(f"segment length {M} shorter than patch length {patch_len}")
    n = M // patch_len
    if n * patch_len != M:
        warnings.warn(f"dropping {M - n * patch_len} trailing steps (M={M}, M_p={patch_len})", stacklevel=2)
    return x[..., : n * patch_len].reshape(*x.shape[:-1], n, patch_len)


def unpatchify(patches):
    p = np.asarray(patches)
    return p.reshape(*p.shape[:-2], p.shape[-2] * p.shape[-1])


def mish(x):
    return x * torch.tanh(F.softplus(x))


# --- prompts ---------------------------------------------------------------

@dataclass
class PromptBank:
    texts: list
    embeddings: np.ndarray  # D_e×N
    gamma: float = 0.1


def prompt_texts(cfg, dt=1.0):
    N, Mp = cfg.n_patches, cfg.patch_len
    return [PROMPT_TEMPLATE.format(a=(j - 1) * Mp + 1, b=j * Mp, M=cfg.window, dt=f"{dt:g}", j=j, N=N)
            for j in range(1, N + 1)]


def build_prompt_bank(cfg, handle, dt=1.0):
    texts = prompt_texts(cfg, dt)
    return PromptBank(texts, bb.embed_text_last_token(handle, texts), cfg.gamma_init)


# --- network ---------------------------------------------------------------

class ProcessorNet(nn.Module):
    def __init__(self, cfg, d_embed, prompt_embeddings, gamma=None):
        super().__init__()
        self.patch_len = cfg.patch_len
        self.n_patches = cfg.n_patches
        self.in1 = nn.Linear(cfg.patch_len, d_embed)
        self.in2 = nn.Linear(d_embed, d_embed)
        self.out = nn.Linear(d_embed, cfg.patch_len)
        self.gamma = nn.Parameter(torch.tensor(float(cfg.gamma_init if gamma is None else gamma)))
        k = torch.as_tensor(np.asarray(prompt_embeddings).T, dtype=torch.float32)
        if k.shape != (cfg.n_patches, d_embed):
            raise ConfigError(f"prompt embeddings {tuple(k.shape[::-1])} do not match D_e×N=({d_embed}, {cfg.n_patches})")
        self.register_buffer("prompt", k.clone())

    def project_in(self, patches):
        return self.in2(mish(self.in1(patches)))

    def align(self, s):
        return s + self.gamma * self.prompt

    def forward(self, patches, handle, context=None):
        """patches (B, N, M_p), context (B, 2n, M_p) or None -> (B, N, M_p)."""
        e = self.align(self.project_in(patches))
        if context is not None and context.shape[1]:
            e = torch.cat([self.project_in(context), e], dim=1)
        h = handle.forward(e)[:, -self.n_patches:]
        return self.out(h)


def project_in(patches, params):
    """N×M_p patches -> D_e×N physical embeddings."""
    p = torch.as_tensor(np.asarray(patches), dtype=params.in1.weight.dtype)
    if p.shape[-1] != params.patch_len:
        raise ConfigError(f"patch length {p.shape[-1]} != {params.patch_len}")
    with torch.no_grad():
        return params.project_in(p).T.double().numpy()


def align(s, bank):
    """e = s + gamma * k, column-wise (both D_e×N)."""
    s, k = np.asarray(s, dtype=np.float64), np.asarray(bank.embeddings, dtype=np.float64)
    if s.shape != k.shape:
        raise ConfigError(f"shape mismatch {s.shape} vs {k.shape}")
    return s + bank.gamma * k


def processor_loss(pred, target):
    """1/(D·N) sum_i sum_j ||z_j - z_hat_j||² over (..., D, N, M_p); leading dims averaged."""
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    per = ((pred - target) ** 2).sum(-1).mean(dim=(-2, -1))
    return per.mean()


# --- context sets -----------------------------------------------------------

@dataclass
class ContextSet:
    """n demonstration pairs per channel: pairs[i, j] = (p_j, p_{n+j}), shape (D, n, 2, M_p)."""

    n: int
    pairs: np.ndarray

    def tokens(self, eps=REVIN_EPS):
        """(D, 2n, M_p) tokens, interleaved p_j then p_{n+j}, normalized per channel."""
        D, n, _, Mp = self.pairs.shape
        seq = self.pairs.reshape(D, 2 * n, Mp)
        flat = seq.reshape(D, -1)
        mean = flat.mean(axis=1, keepdims=True)
        denom = flat.std(axis=1, keepdims=True) + eps
        return ((flat - mean) / denom).reshape(D, 2 * n, Mp)


def build_context_set(target_segment, n, patch_len):
    seg = np.asarray(target_segment, dtype=np.float64)
    if seg.ndim == 1:
        seg = seg[None]
    if seg.shape[1] != 2 * n * patch_len:
        raise ConfigError(f"context segment must have length 2·n·M_p = {2 * n * patch_len}, got {seg.shape[1]}")
    patches = seg.reshape(seg.shape[0], 2 * n, patch_len)
    pairs = np.stack([patches[:, :n], patches[:, n:]], axis=2)
    return ContextSet(n, pairs)


def empty_context(D, patch_len):
    return ContextSet(0, np.zeros((D, 0, 2, patch_len)))


# --- checkpoint -------------------------------------------------------------

@dataclass
class ProcessorCheckpoint:
    cfg: ProcessorConfig
    net: ProcessorNet
    handle: object
    bank: PromptBank
    latent_dim: int | None = None
    source_scenario: str = ""
    loss_trace: list = field(default_factory=list)
    initial_loss: float | None = None
    final_loss: float | None = None
    params_sha256: str = ""
    forward_calls: int = 0

    def trainable_state(self):
        state = dict(self.net.state_dict())
        state.update({f"lora::{k}": v for k, v in self.handle.lora_state().items()})
        return state

    @property
    def checksum(self):
        return tensor_checksum(self.trainable_state())

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.params_sha256 = save_params(self.trainable_state(), directory / PARAMS_NAME)
        manifest = {
            "config": self.cfg.to_dict(),
            "prompt_template": PROMPT_TEMPLATE,
            "prompt_texts": list(self.bank.texts),
            "gamma": float(self.net.gamma.item()),
            "backbone": self.handle.manifest(),
            "latent_dim": self.latent_dim,
            "source_scenario": self.source_scenario,
            "seed": self.cfg.seed,
            "loss_trace": self.loss_trace,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "context_layout": "interleaved pairs (p_j, p_n+j), own RevIN stats, no prompt embedding, outputs discarded",
            "params_file": PARAMS_NAME,
            "params_sha256": self.params_sha256,
        }
        write_json(directory / MANIFEST_NAME, manifest)
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        if not (directory / MANIFEST_NAME).exists():
            raise FormatError(f"no {MANIFEST_NAME} in {directory}")
        m = read_json(directory / MANIFEST_NAME)
        cfg = ProcessorConfig(**m["config"])
        spec = bb.BackboneSpec(**m["backbone"]["spec"])
        handle = bb.load_or_init_backbone(spec)
        if handle.base_checksum() != m["backbone"]["base_checksum"]:
            raise FormatError("backbone weights differ from the ones this processor was trained with")
        if cfg.lora_enabled:
            handle = bb.attach_lora(handle, bb.LoraAdapter(cfg.lora_rank, cfg.lora_alpha, d_embed=handle.d_embed))
        state = load_params(directory / m["params_file"])
        lora = {k[len("lora::"):]: v for k, v in state.items() if k.startswith("lora::")}
        net_state = {k: v for k, v in state.items() if not k.startswith("lora::")}
        net = ProcessorNet(cfg, handle.d_embed, net_state["prompt"].T.numpy())
        net.load_state_dict(net_state)
        if lora:
            handle.model.load_state_dict(lora, strict=False)
        net.eval()
        bank = PromptBank(m["prompt_texts"], net_state["prompt"].T.double().numpy(), m["gamma"])
        return cls(cfg, net, handle, bank, m["latent_dim"], m["source_scenario"], m["loss_trace"],
                   m["initial_loss"], m["final_loss"], m["params_sha256"])


# --- training ---------------------------------------------------------------

def training_segments(values, window, stride=1):
    """(S, D, M) inputs and (S, D, M) targets from contiguous 2M-step segments."""
    D, T = values.shape
    if T < 2 * window:
        raise ConfigError(f"need T >= 2M = {2 * window} latent steps, got {T}")
    starts = np.arange(0, T - 2 * window + 1, stride)
    idx = starts[:, None] + np.arange(2 * window)[None]
    seg = values[:, idx].transpose(1, 0, 2)
    return seg[..., :window], seg[..., window:]


def _batch_loss(net, handle, x, y, cfg):
    """x, y: (B, D, M) raw windows -> next-window MSE in the input-normalized space."""
    B, D, M = x.shape
    N, Mp = cfg.n_patches, cfg.patch_len
    xn, mean, denom = _revin_torch(x[..., : N * Mp])
    yn = (y[..., : N * Mp] - mean) / denom
    pred = net(xn.reshape(B * D, N, Mp), handle).reshape(B, D, N, Mp)
    return processor_loss(pred, yn.reshape(B, D, N, Mp))


def _full_loss(net, handle, X, Y, cfg, batch=256):
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(X), batch):
            total += _batch_loss(net, handle, X[i:i + batch], Y[i:i + batch], cfg).item() * len(X[i:i + batch])
    return total / len(X)


def make_processor(cfg, handle, bank, dtype=torch.float32):
    cfg.validate()
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        if cfg.lora_enabled:
            handle = bb.attach_lora(handle, bb.LoraAdapter(cfg.lora_rank, cfg.lora_alpha, d_embed=handle.d_embed))
        net = ProcessorNet(cfg, handle.d_embed, bank.embeddings, bank.gamma).to(dtype)
    handle.model.to(dtype)
    return net, handle


def train_processor(latents, cfg, handle, bank, on_epoch=None):
    values = latents.values if hasattr(latents, "values") else np.asarray(latents)
    net, handle = make_processor(cfg, handle, bank)
    dtype = net.in1.weight.dtype
    X, Y = (torch.as_tensor(a, dtype=dtype) for a in training_segments(values, cfg.window, cfg.sample_stride))
    params = list(net.parameters()) + handle.lora_parameters()
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    g = seeded_generator(cfg.seed + 1)

    net.eval()
    initial = _full_loss(net, handle, X, Y, cfg)
    trace = []
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(X), generator=g)
        running = 0.0
        for i in range(0, len(X), cfg.batch_size):
            b = perm[i:i + cfg.batch_size]
            loss = _batch_loss(net, handle, X[b], Y[b], cfg)
            if not torch.isfinite(loss):
                raise BlowupError(f"non-finite processor loss at epoch {epoch}", where=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * len(b)
        trace.append(running / len(X))
        if on_epoch is not None:
            on_epoch(epoch, trace[-1])
        log.debug("processor epoch %d loss %.6g", epoch, trace[-1])
    final = _full_loss(net, handle, X, Y, cfg)
    bank = PromptBank(bank.texts, bank.embeddings, float(net.gamma.item()))
    return ProcessorCheckpoint(cfg, net, handle, bank, values.shape[0],
                               getattr(latents, "source_scenario", ""), trace, initial, final)


# --- inference --------------------------------------------------------------

def predict_next_window(windows, ckpt, context=None):
    """Raw windows (D, M) -> predicted next N·M_p steps (D, N·M_p), denormalized."""
    cfg, net = ckpt.cfg, ckpt.net
    N, Mp = cfg.n_patches, cfg.patch_len
    dtype = net.in1.weight.dtype
    x = torch.as_tensor(np.asarray(windows)[..., -N * Mp:], dtype=dtype)
    D = x.shape[0]
    xn, mean, denom = _revin_torch(x)
    ctx = None
    if context is not None and context.n > 0:
        ctx = torch.as_tensor(context.tokens(), dtype=dtype)
        if ctx.shape[0] != D:
            raise ConfigError(f"context has {ctx.shape[0]} channels, window has {D}")
    with torch.no_grad():
        pred = net(xn.reshape(D, N, Mp), ckpt.handle, ctx).reshape(D, N * Mp)
    ckpt.forward_calls += 1
    return (pred * denom + mean).double().numpy()


def rollout(latents_tail, horizon, ckpt, context=None):
    """Autoregressive forecast of ``horizon`` steps from a D×M tail."""
    cfg = ckpt.cfg
    tail = np.asarray(latents_tail, dtype=np.float64)
    if tail.ndim != 2 or tail.shape[1] != cfg.window:
        raise ConfigError(f"lookback tail must be D×{cfg.window}, got {tail.shape}")
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    if context is not None and context.n > 0:
        total = 2 * context.n + cfg.n_patches
        if total > ckpt.handle.context_length:
            raise ConfigError(f"{total} tokens exceed the backbone context length")
    window = tail.copy()
    out = np.empty((tail.shape[0], horizon))
    done = 0
    while done < horizon:
        pred = predict_next_window(window, ckpt, context)
        if not np.all(np.isfinite(pred)):
            raise BlowupError(f"non-finite prediction at rollout step {done}", where=done)
        k = min(cfg.rollout_stride, horizon - done)
        out[:, done:done + k] = pred[:, :k]
        window = np.concatenate([window[:, k:], pred[:, :k]], axis=1)
        done += k
    return out


def forecast_in_context(latents_tail, horizon, ckpt, ctx):
    return rollout(latents_tail, horizon, ckpt, ctx)
