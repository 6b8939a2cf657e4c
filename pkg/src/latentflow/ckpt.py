"""Parameter blobs and checksums shared by the ROM, backbone and processor checkpoints."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tensor_checksum(tensors):
    """Order-independent digest of a name→tensor mapping."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_params(tensors, path):
    path = Path(path)
    clean = {k: v.detach().cpu().contiguous().clone() for k, v in tensors.items()}
    save_file(clean, str(path))
    return sha256_file(path)


def load_params(path):
    return load_file(str(path))


def write_json(path, obj):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)
    return path


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def seeded_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g
