"""Binary checkpoint format.

Layout: ``b"MPRCNN1"``, 32-byte SHA-256 digest of the model config, then one
block per parameter until EOF::

    u32 name_len | name (utf-8) | u32 rank | rank x u64 extents | prod(extents) x f64

All integers and floats are little-endian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError
from .model import MaskPointRCNN, ModelConfig

MAGIC = b"MPRCNN1"


def config_digest(config):
    d = config.to_dict() if hasattr(config, "to_dict") else config
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


def save_checkpoint(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(config_digest(model.config))
        for name, p in model.state_dict().items():
            raw = name.encode()
            values = p.detach().cpu().to(torch.float64).numpy()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", values.ndim))
            fh.write(struct.pack(f"<{values.ndim}Q", *values.shape))
            fh.write(values.astype("<f8").tobytes())
    # sidecar so the architecture can be rebuilt without the training config
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(model.config.to_dict(), fh, indent=2)
    return path


def read_blocks(path):
    """Return ``(digest, {name: float64 array})``."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: bad magic")
    pos = len(MAGIC)
    digest = data[pos : pos + 32]
    pos += 32
    blocks = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode()
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            values = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            blocks[name] = values.copy()
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated block: {exc}") from exc
    return digest, blocks


def load_checkpoint(path, model=None):
    """Load parameters into ``model`` (built from the sidecar config when omitted)."""
    path = Path(path)
    if model is None:
        sidecar = path.with_suffix(".json")
        if not sidecar.exists():
            raise FormatError(f"no model config next to {path}")
        model = MaskPointRCNN(ModelConfig.from_dict(json.loads(sidecar.read_text())))
    digest, blocks = read_blocks(path)
    if digest != config_digest(model.config):
        raise FormatError(f"{path}: config digest does not match the model")
    state = model.state_dict()
    if set(blocks) != set(state):
        raise FormatError(f"{path}: parameter names differ from the model")
    model.load_state_dict({k: torch.from_numpy(v).to(state[k].dtype) for k, v in blocks.items()})
    return model
