"""Atomic artifact writes, hashing and model checkpoints."""
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import torch

from .models import build_model

CHECKPOINT_FORMAT = "gacd-checkpoint"
CHECKPOINT_VERSION = 1


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def torch_save_atomic(obj, path):
    buf = io.BytesIO()
    torch.save(obj, buf)
    atomic_write_bytes(path, buf.getvalue())


def config_hash(cfg):
    """Short sha256 of a JSON-serializable config (key order independent)."""
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def state_hash(module_or_state):
    """sha256 over parameter/buffer bytes; detects any change to a module."""
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name]
        h.update(name.encode())
        if torch.is_tensor(t):
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(repr(t).encode())
    return h.hexdigest()


def save_model(path, model, arch, num_classes, arch_kwargs=None, config_hash=None, **extra):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "model",
        "arch": arch,
        "arch_kwargs": arch_kwargs or {},
        "num_classes": num_classes,
        "state_dict": model.state_dict(),
        "config_hash": config_hash,
        **extra,
    }
    torch_save_atomic(payload, path)


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a gacd checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def model_from_payload(payload):
    model = build_model(payload["arch"], payload["num_classes"], **payload["arch_kwargs"])
    model.load_state_dict(payload["state_dict"])
    return model


def load_model(path):
    """Returns ``(model, payload)``."""
    payload = load_checkpoint(path)
    return model_from_payload(payload), payload
