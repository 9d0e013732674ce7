"""Versioned binary checkpoint container.

Layout::

    b"BTLMCKPT"  version:u32  header_len:u64  header(JSON, UTF-8)
    raw little-endian tensor bytes, in header order
    sha256 digest (32 bytes) of everything above

The JSON header carries the model config, the optional Bayesian config and
a ``tensors`` index of ``{name, dtype, shape, offset, nbytes}``.  Writing is
deterministic, so identical models give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerLM

MAGIC = b"BTLMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> str:
    """Write ``tensors`` with ``header`` to ``path``; returns the hex checksum."""
    index, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "tensors": index}, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)
    return digest.hex()


def read_container(path) -> tuple[dict, dict[str, np.ndarray], str]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 + 32 or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupt or truncated)")
    version, head_len = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + head_len])
    blob = body[start + head_len:]
    tensors = {}
    for entry in header.pop("tensors"):
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return header, tensors, digest.hex()


def model_tensors(model: TransformerLM) -> dict[str, np.ndarray]:
    out = {}
    for name in model.weight_names():
        if name in model.sites:
            for part, arr in model.sites[name].arrays().items():
                out[f"site:{name}:{part}"] = arr
        else:
            out[name] = model.params[name].data
    return out


def save_checkpoint(model: TransformerLM, path, extra: dict | None = None) -> str:
    """Save ``model`` (deterministic or Bayesian); returns the content checksum."""
    header = {"format": "bayesformer-checkpoint", "model_config": model.config.to_dict(),
              "dtype": model.dtype.name,
              "bayes_config": model.bayes_config.to_dict() if model.bayes_config else None,
              "extra": extra or {}}
    return write_container(path, header, model_tensors(model))


def load_checkpoint(path) -> TransformerLM:
    from .bayes import BayesConfig, VariationalSite

    header, tensors, checksum = read_container(path)
    cfg = ModelConfig(**header["model_config"])
    model = TransformerLM(cfg, seed=0, dtype=np.dtype(header["dtype"]))
    for name in model.weight_names():
        if name in tensors:
            model.params[name].data = tensors[name]
            model.params[name].grad = np.zeros_like(tensors[name])
        elif f"site:{name}:mu" in tensors:
            parts = {p: tensors[f"site:{name}:{p}"] for p in ("mu", "log_sigma", "prior_mu", "prior_sigma")}
            model.sites[name] = VariationalSite(parts["mu"], parts["log_sigma"], parts["prior_mu"],
                                                parts["prior_sigma"], name=name)
            del model.params[name]
        else:
            raise CheckpointError(f"{path}: missing tensor {name}")
    if header.get("bayes_config"):
        model.bayes_config = BayesConfig.from_dict(header["bayes_config"])
    model.checksum = checksum
    model.extra = header.get("extra", {})
    return model


def checkpoint_diff(a: TransformerLM, b: TransformerLM) -> list[str]:
    """Names of tensors (or site parts) that differ in kind, shape or value."""
    ta, tb = model_tensors(a), model_tensors(b)
    diff = sorted(set(ta) ^ set(tb))
    for name in sorted(set(ta) & set(tb)):
        if ta[name].shape != tb[name].shape or not np.array_equal(ta[name], tb[name]):
            diff.append(name)
    return diff
