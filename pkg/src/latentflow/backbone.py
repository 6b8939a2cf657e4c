"""Frozen causal sequence backbone: prompt embedding, continuous-input forward, LoRA.

The desk default is a small GPT-style transformer, randomly initialized from a
seed and then frozen, with a byte-level tokenizer. A checkpoint directory may
instead point at one of our saved backbones or at a Hugging Face causal LM
(e.g. an OPT model) stored locally.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ckpt import load_params, read_json, save_params, tensor_checksum, write_json
from .errors import ConfigError, FormatError

MANIFEST_NAME = "backbone_manifest.json"
PARAMS_NAME = "backbone_params.safetensors"


class ByteTokenizer:
    """UTF-8 bytes as ids 0-255, plus EOS=256 and PAD=257."""

    eos_id = 256
    pad_id = 257
    vocab_size = 258

    def encode(self, text):
        return list(text.encode("utf-8"))

    def describe(self):
        return {"kind": "byte", "eos_id": self.eos_id, "pad_id": self.pad_id, "vocab_size": self.vocab_size}


@dataclass
class BackboneSpec:
    d_embed: int = 256
    n_layers: int = 4
    n_heads: int = 4
    context_length: int = 512
    mlp_ratio: int = 4
    seed: int = 0
    checkpoint: str | None = None

    def to_dict(self):
        return asdict(self)


@dataclass
class LoraAdapter:
    rank: int = 4
    alpha: float = 16.0
    dropout: float = 0.0
    target: str = "q_proj"
    d_embed: int | None = None

    @property
    def scale(self):
        return self.alpha / self.rank


class LoraLinear(nn.Module):
    """W x + (alpha/r) B A x with B zero-initialized."""

    def __init__(self, base, rank, alpha, dropout=0.0):
        super().__init__()
        self.base = base
        self.scale = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()

    def forward(self, x):
        return self.base(x) + self.scale * F.linear(F.linear(self.dropout(x), self.lora_A), self.lora_B)


class CausalSelfAttention(nn.Module):
    def __init__(self, d, n_heads):
        super().__init__()
        if d % n_heads:
            raise ConfigError(f"d_embed={d} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def forward(self, x, allowed):
        B, L, d = x.shape
        h = self.n_heads

        def heads(t):
            return t.view(B, L, h, d // h).transpose(1, 2)

        q, k, v = heads(self.q_proj(x)), heads(self.k_proj(x)), heads(self.v_proj(x))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(d // h)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.out_proj(out.transpose(1, 2).reshape(B, L, d))


class Block(nn.Module):
    def __init__(self, d, n_heads, mlp_ratio):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))

    def forward(self, x, allowed):
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.mlp(self.ln2(x))


class CausalTransformer(nn.Module):
    """Pre-LN decoder-only transformer with learned absolute positions."""

    def __init__(self, spec, vocab_size):
        super().__init__()
        d = spec.d_embed
        self.context_length = spec.context_length
        self.tok_emb = nn.Embedding(vocab_size, d)
        self.pos_emb = nn.Embedding(spec.context_length, d)
        self.blocks = nn.ModuleList(Block(d, spec.n_heads, spec.mlp_ratio) for _ in range(spec.n_layers))
        self.ln_f = nn.LayerNorm(d)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, std=0.02)
            if isinstance(m, nn.Linear):
                nn.init.zeros_(m.bias)

    def embed_tokens(self, ids):
        return self.tok_emb(ids)

    def forward_embeddings(self, e, attention_mask=None):
        B, L, _ = e.shape
        causal = torch.ones(L, L, dtype=torch.bool, device=e.device).tril()
        if attention_mask is None:
            allowed = causal.expand(B, L, L)
            pos = torch.arange(L, device=e.device).expand(B, L)
        else:
            mask = attention_mask.bool()
            eye = torch.eye(L, dtype=torch.bool, device=e.device)
            # Pad queries see only themselves so no row is fully masked.
            allowed = causal & (mask[:, None, :] | eye)
            pos = (mask.long().cumsum(-1) - 1).clamp(min=0)
        x = e + self.pos_emb(pos)
        for block in self.blocks:
            x = block(x, allowed)
        return self.ln_f(x)


class HFCausalModel(nn.Module):
    """Adapter giving a local Hugging Face decoder the same two-method surface."""

    def __init__(self, path):
        super().__init__()
        from transformers import AutoModel

        self.model = AutoModel.from_pretrained(str(path))
        cfg = self.model.config
        self.context_length = int(getattr(cfg, "max_position_embeddings", 2048))
        self.d_embed = int(getattr(cfg, "hidden_size"))

    def embed_tokens(self, ids):
        return self.model.get_input_embeddings()(ids)

    def forward_embeddings(self, e, attention_mask=None):
        if attention_mask is None:
            attention_mask = torch.ones(e.shape[:2], dtype=torch.long)
        return self.model(inputs_embeds=e, attention_mask=attention_mask.long()).last_hidden_state


class _HFTokenizer:
    def __init__(self, tok):
        self.tok = tok
        self.eos_id = tok.eos_token_id
        self.pad_id = tok.pad_token_id if tok.pad_token_id is not None else tok.eos_token_id

    def encode(self, text):
        return self.tok(text, add_special_tokens=False)["input_ids"]

    def describe(self):
        return {"kind": "hf", "name": getattr(self.tok, "name_or_path", ""), "eos_id": self.eos_id,
                "pad_id": self.pad_id}


class BackboneHandle:
    def __init__(self, model, tokenizer, spec, source):
        self.model = model
        self.tokenizer = tokenizer
        self.spec = spec
        self.source = source
        model.eval()
        for name, p in model.named_parameters():
            p.requires_grad_("lora_" in name)

    @property
    def d_embed(self):
        return self.spec.d_embed

    @property
    def context_length(self):
        return self.model.context_length

    def base_state(self):
        return {k: v for k, v in self.model.state_dict().items() if "lora_" not in k}

    def base_checksum(self):
        """Digest of the frozen weights; unchanged by LoRA wrapping or training."""
        return tensor_checksum({k.replace(".base.", "."): v for k, v in self.base_state().items()})

    def lora_parameters(self):
        return [p for n, p in self.model.named_parameters() if "lora_" in n]

    def lora_state(self):
        return {k: v for k, v in self.model.state_dict().items() if "lora_" in k}

    @property
    def dtype(self):
        return next(self.model.parameters()).dtype

    def forward(self, e, attention_mask=None):
        """e: (B, L, D_e) tensor -> final hidden states (B, L, D_e)."""
        if e.shape[1] > self.context_length:
            raise ConfigError(f"sequence length {e.shape[1]} exceeds context length {self.context_length}")
        if e.shape[-1] != self.d_embed:
            raise ConfigError(f"embedding width {e.shape[-1]} != d_embed {self.d_embed}")
        return self.model.forward_embeddings(e, attention_mask)

    def manifest(self):
        return {
            "spec": self.spec.to_dict(),
            "source": self.source,
            "tokenizer": self.tokenizer.describe(),
            "position_encoding": "learned absolute (internal), left-pad aware",
            "base_checksum": self.base_checksum(),
        }


def _build_scratch(spec):
    tok = ByteTokenizer()
    with torch.random.fork_rng():
        torch.manual_seed(spec.seed)
        model = CausalTransformer(spec, tok.vocab_size)
    return BackboneHandle(model, tok, spec, f"scratch-frozen({spec.seed})")


def load_or_init_backbone(spec=None):
    spec = spec or BackboneSpec()
    if spec.checkpoint is None:
        return _build_scratch(spec)
    path = Path(spec.checkpoint)
    if (path / MANIFEST_NAME).exists():
        m = read_json(path / MANIFEST_NAME)
        saved = BackboneSpec(**{**m["spec"], "checkpoint": None})
        for key in ("d_embed", "n_layers", "n_heads"):
            if getattr(spec, key) != getattr(saved, key):
                raise ConfigError(f"backbone {key} mismatch: requested {getattr(spec, key)}, checkpoint {getattr(saved, key)}")
        handle = _build_scratch(saved)
        handle.model.load_state_dict(load_params(path / PARAMS_NAME))
        handle.source = f"checkpoint({path})"
        handle.spec = BackboneSpec(**{**saved.to_dict(), "checkpoint": str(path)})
        return handle
    if (path / "config.json").exists():
        model = HFCausalModel(path)
        if model.d_embed != spec.d_embed:
            raise ConfigError(f"backbone d_embed mismatch: requested {spec.d_embed}, checkpoint {model.d_embed}")
        try:
            from transformers import AutoTokenizer

            tok = _HFTokenizer(AutoTokenizer.from_pretrained(str(path)))
        except (OSError, ValueError):
            tok = ByteTokenizer()
            if model.model.get_input_embeddings().num_embeddings < tok.vocab_size:
                raise ConfigError("checkpoint ships no tokenizer and its vocabulary is too small for bytes")
        return BackboneHandle(model, tok, spec, f"checkpoint({path})")
    raise FormatError(f"cannot load backbone checkpoint at {path}")


def save_backbone(handle, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not isinstance(handle.model, CausalTransformer):
        raise ConfigError("only scratch backbones can be saved in the native format")
    sha = save_params(handle.base_state(), directory / PARAMS_NAME)
    write_json(directory / MANIFEST_NAME, {**handle.manifest(), "params_sha256": sha})
    return directory


def attach_lora(handle, adapter):
    if adapter.d_embed is not None and adapter.d_embed != handle.d_embed:
        raise ConfigError(f"adapter built for d_embed={adapter.d_embed}, backbone has {handle.d_embed}")
    model = copy.deepcopy(handle.model)
    targets = [(name, mod) for name, mod in model.named_modules()
               if name.split(".")[-1] == adapter.target and isinstance(mod, nn.Linear)]
    if not targets:
        raise ConfigError(f"no {adapter.target!r} linear layers in backbone")
    for name, mod in targets:
        parent = model.get_submodule(name.rsplit(".", 1)[0]) if "." in name else model
        setattr(parent, name.split(".")[-1], LoraLinear(mod, adapter.rank, adapter.alpha, adapter.dropout))
    return BackboneHandle(model, handle.tokenizer, handle.spec, handle.source + "+lora")


def tokenize_left_padded(handle, texts):
    if not texts:
        raise ConfigError("need at least one text")
    tok = handle.tokenizer
    seqs = []
    for t in texts:
        if not t:
            raise ConfigError("empty prompt text")
        ids = tok.encode(t) + [tok.eos_id]
        if len(ids) > handle.context_length:
            raise ConfigError(f"prompt of {len(ids)} tokens exceeds context length {handle.context_length}")
        seqs.append(ids)
    L = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), L), tok.pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), L), dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, L - len(s):] = torch.tensor(s)
        mask[i, L - len(s):] = 1
    return ids, mask


def embed_text_last_token_tensor(handle, texts):
    ids, mask = tokenize_left_padded(handle, texts)
    with torch.no_grad():
        hidden = handle.forward(handle.model.embed_tokens(ids), mask)
    return hidden[:, -1]


def embed_text_last_token(handle, texts):
    """Hidden state at each text's trailing EOS token, as a D_e×N array."""
    return embed_text_last_token_tensor(handle, list(texts)).T.double().numpy()


def forward_embeddings(handle, e):
    """D_e×L continuous inputs -> D_e×L final hidden states (causal)."""
    e = np.asarray(e)
    if e.ndim != 2 or e.shape[1] < 1:
        raise ConfigError(f"expected a D_e×L matrix, got {e.shape}")
    with torch.no_grad():
        out = handle.forward(torch.as_tensor(e.T[None], dtype=handle.dtype))
    return out[0].T.double().numpy()
