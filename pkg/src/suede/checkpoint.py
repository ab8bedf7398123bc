"""Binary checkpoints.

Layout::

    b"SUEDECKP"  magic
    <I           format version
    <Q           header length in bytes
    header       UTF-8 JSON: config echo, epoch, PRNG state, tensor table
    payload      little-endian f32 values, tensors back to back

The tensor table lists ``name``, ``kind`` (``param``, ``adam_m``, ``adam_v``),
``shape`` and element ``offset`` into the payload. Adam step counts live in
the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from .train import Adam, build_converted

MAGIC = b"SUEDECKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(path, model, config: ExperimentConfig, optimizer: Adam | None = None,
                    epoch: int = 0, prng_state: int = 0, extra: dict | None = None) -> Path:
    tensors, chunks = [], []
    offset = 0

    def add(name, kind, arr):
        nonlocal offset
        arr = np.asarray(arr, dtype="<f4")
        tensors.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.reshape(-1).tobytes())
        offset += arr.size

    for name, p in model.named_parameters():
        add(name, "param", p.data)
    steps = {}
    if optimizer is not None:
        for name, (m, v, t) in sorted(optimizer.state.items()):
            add(name, "adam_m", m)
            add(name, "adam_v", v)
            steps[name] = int(t)
    header = {
        "version": VERSION,
        "config": config.to_dict(),
        "epoch": int(epoch),
        "prng_state": int(prng_state),
        "adam": None if optimizer is None else {
            "lr": optimizer.lr, "betas": [optimizer.b1, optimizer.b2], "eps": optimizer.eps, "steps": steps,
        },
        "tensors": tensors,
        "n_values": offset,
        "extra": extra or {},
    }
    blob = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    return path


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    """Header dict and the raw f32 payload, with format checks."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than the checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {VERSION}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(raw[start : start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    payload = raw[start + hlen :]
    need = 4 * header["n_values"]
    if len(payload) < need:
        missing = [t["name"] for t in header["tensors"]
                   if 4 * (t["offset"] + int(np.prod(t["shape"], dtype=np.int64))) > len(payload)]
        raise CheckpointTruncatedError(
            f"{path}: payload has {len(payload)} of {need} bytes; first incomplete tensor {missing[0]!r}"
        )
    if len(payload) > need:
        raise CheckpointError(f"{path}: {len(payload) - need} trailing bytes after payload")
    return header, np.frombuffer(payload, dtype="<f4")


def _slice(values, entry):
    n = int(np.prod(entry["shape"], dtype=np.int64))
    return values[entry["offset"] : entry["offset"] + n].reshape(entry["shape"]).astype(np.float64)


def load_checkpoint(path, config: ExperimentConfig | None = None):
    """Rebuild ``(model, config, optimizer, header)`` from a checkpoint file.

    The architecture comes from the stored config echo unless ``config`` is
    given, in which case every stored tensor must fit that architecture.
    """
    header, values = read_checkpoint(path)
    if config is None:
        try:
            config = ExperimentConfig.from_dict(header["config"])
        except (ConfigError, TypeError) as exc:
            raise CheckpointError(f"{path}: config echo rejected: {exc}") from None
    model = build_converted(config)
    params = dict(model.named_parameters())
    stored = {t["name"]: t for t in header["tensors"] if t["kind"] == "param"}
    for name, p in params.items():
        entry = stored.get(name)
        if entry is None:
            raise CheckpointShapeError(f"{path}: tensor {name!r} missing from checkpoint")
        if tuple(entry["shape"]) != p.shape:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {tuple(entry['shape'])}, model expects {p.shape}"
            )
        p.data = _slice(values, entry)
    extra = sorted(set(stored) - set(params))
    if extra:
        raise CheckpointShapeError(f"{path}: unexpected tensor {extra[0]!r} in checkpoint")

    opt = None
    if header.get("adam") is not None:
        a = header["adam"]
        opt = Adam(a["lr"], tuple(a["betas"]), a["eps"])
        moments = {}
        for t in header["tensors"]:
            if t["kind"] in ("adam_m", "adam_v"):
                moments.setdefault(t["name"], {})[t["kind"]] = _slice(values, t)
        opt.state = {n: [mv["adam_m"], mv["adam_v"], a["steps"][n]] for n, mv in moments.items()}
    return model, config, opt, header
