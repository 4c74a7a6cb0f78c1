"""Binary checkpoints: model, optimizer, RNG state and epoch counter.

Layout: an 8-byte magic, a little-endian uint32 format version, a
uint64 header length, a canonical-JSON header (model config, named
tensor shapes, optimizer hyperparameters, RNG state, epoch), the raw
float64 row-major tensor payload in header order, and a trailing
SHA-256 over everything before it. The version is rejected before any
tensor bytes are interpreted, and the checksum before the header is
parsed, so truncation or corruption can never produce a half-loaded
model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError, UnsupportedVersionError
from .model import MeNodeModel, ModelConfig
from .training import Adam

MAGIC = b"MENODECK"
FORMAT_VERSION = 1
_SHA_LEN = 32


@dataclass
class LoadedCheckpoint:
    version: int
    model: MeNodeModel
    optimizer: Adam | None
    rng: np.random.Generator | None
    epoch: int


def _named_arrays(model: MeNodeModel, optimizer: Adam | None):
    arrays = [(name, param.values) for name, param in model.parameters()]
    if optimizer is not None:
        arrays.extend(optimizer.state_arrays())
    return arrays


def save_checkpoint(path, model: MeNodeModel, optimizer: Adam | None = None,
                    rng: np.random.Generator | None = None, epoch: int = 0):
    """Write the checkpoint; byte-identical for identical inputs."""
    arrays = _named_arrays(model, optimizer)
    header = {
        "model_config": model.to_config_dict(),
        "tensors": [[name, list(arr.shape)] for name, arr in arrays],
        "optimizer": None if optimizer is None else optimizer.hyperparams(),
        "rng_state": None if rng is None else rng.bit_generator.state,
        "epoch": int(epoch),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)
    body = MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(header_bytes))
    body += header_bytes + payload
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body + digest)


def load_checkpoint(path) -> LoadedCheckpoint:
    """Read a checkpoint back; forward passes of the loaded model are bitwise equal."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fixed = len(MAGIC) + 4 + 8
    if len(blob) < fixed + _SHA_LEN:
        raise IntegrityError("checkpoint is truncated")
    if blob[: len(MAGIC)] != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    body, digest = blob[:-_SHA_LEN], blob[-_SHA_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC) + 4)
    header_end = fixed + header_len
    if header_end > len(body):
        raise IntegrityError("checkpoint header is truncated")
    try:
        header = json.loads(body[fixed:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"checkpoint header is not valid JSON: {exc}") from None

    model = MeNodeModel(ModelConfig(**header["model_config"]), seed=0)
    expected = {name: param for name, param in model.parameters()}

    payload = body[header_end:]
    offset = 0
    opt_arrays = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise IntegrityError(f"checkpoint payload is truncated at tensor {name!r}")
        arr = np.frombuffer(payload[offset: offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
        if name in expected:
            if expected[name].values.shape != arr.shape:
                raise IntegrityError(f"tensor {name!r} has shape {arr.shape}, model expects "
                                     f"{expected[name].values.shape}")
            expected[name].values = arr
        elif name.startswith("opt.m.") or name.startswith("opt.v."):
            opt_arrays[name] = arr
        else:
            raise IntegrityError(f"checkpoint carries unknown tensor {name!r}")
    if offset != len(payload):
        raise IntegrityError("checkpoint payload has trailing bytes")

    optimizer = None
    if header["optimizer"] is not None:
        hyper = dict(header["optimizer"])
        step = int(hyper.pop("t"))
        optimizer = Adam(model.parameters(), **hyper)
        optimizer.t = step
        for i, name in enumerate(optimizer.names):
            m_key, v_key = f"opt.m.{name}", f"opt.v.{name}"
            if m_key not in opt_arrays or v_key not in opt_arrays:
                raise IntegrityError(f"checkpoint is missing optimizer state for {name!r}")
            optimizer.m[i] = opt_arrays[m_key]
            optimizer.v[i] = opt_arrays[v_key]

    rng = None
    if header["rng_state"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng_state"]

    return LoadedCheckpoint(version=version, model=model, optimizer=optimizer,
                            rng=rng, epoch=int(header["epoch"]))
