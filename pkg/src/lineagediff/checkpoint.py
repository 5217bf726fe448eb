"""Self-describing binary checkpoints.

Layout::

    MAGIC (8 bytes) | version (uint32 LE) | header length (uint64 LE) | header JSON | payload

The header records every config field, the schedule, the step, and for each
named block its dtype, shape, offset and size within the payload, plus a
SHA-256 of the payload. Blocks are written in a fixed order: parameters, EMA,
Adam first moments, Adam second moments, then the generator state.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, schedule_from_dict
from .errors import CorruptCheckpoint, IoFailure, VersionMismatch
from .training import TrainConfig, TrainingState

MAGIC = b"LGDIFFCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"float64": (torch.float64, np.float64), "uint8": (torch.uint8, np.uint8)}


def _blocks(state: TrainingState):
    for n, p in state.model.named_parameters():
        yield f"param/{n}", p.detach()
    for group, store in (("ema", state.ema), ("adam_m", state.exp_avg),
                         ("adam_v", state.exp_avg_sq)):
        for n, _ in state.model.named_parameters():
            yield f"{group}/{n}", store[n]
    yield "rng", state.generator.get_state()


def dumps(state: TrainingState, sched: NoiseSchedule, train_cfg: TrainConfig) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, tensor in _blocks(state):
        arr = tensor.detach().cpu().contiguous().numpy()
        dtype = "uint8" if arr.dtype == np.uint8 else "float64"
        raw = arr.astype(np.dtype(_DTYPES[dtype][1]).newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "model": state.model.config.to_dict(),
        "schedule": sched.to_dict(),
        "train": train_cfg.to_dict(),
        "step": state.step,
        "extra": state.extra,
        "blocks": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + payload


def save_checkpoint(state: TrainingState, path, sched: NoiseSchedule, train_cfg: TrainConfig):
    data = dumps(state, sched, train_cfg)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_header(data: bytes) -> tuple[dict, bytes]:
    if len(data) < _PREFIX.size:
        raise CorruptCheckpoint(f"file too short ({len(data)} bytes) to be a checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpoint("bad magic; not a checkpoint file")
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"checkpoint format version {version} is not supported "
            f"(this build reads version {FORMAT_VERSION})")
    start = _PREFIX.size
    if len(data) < start + head_len:
        raise CorruptCheckpoint("truncated header")
    try:
        header = json.loads(data[start:start + head_len])
    except ValueError as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc
    payload = data[start + head_len:]
    if len(payload) != header.get("payload_bytes"):
        raise CorruptCheckpoint(
            f"payload is {len(payload)} bytes, header declares {header.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptCheckpoint("payload checksum mismatch")
    return header, payload


def loads(data: bytes) -> tuple[TrainingState, NoiseSchedule, TrainConfig]:
    header, payload = read_header(data)
    try:
        model_cfg = DenoiserConfig.from_dict(header["model"])
        sched = schedule_from_dict(header["schedule"])
        train_cfg = TrainConfig.from_dict(header["train"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"invalid config in header: {exc}") from exc
    blocks = {}
    for e in header["blocks"]:
        tdtype, ndtype = _DTYPES[e["dtype"]]
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(ndtype).newbyteorder("<")).astype(ndtype)
        blocks[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())

    model = Denoiser(model_cfg)
    state = TrainingState.create(model)
    try:
        with torch.no_grad():
            for n, p in model.named_parameters():
                p.copy_(blocks[f"param/{n}"])
                state.ema[n] = blocks[f"ema/{n}"]
                state.exp_avg[n] = blocks[f"adam_m/{n}"]
                state.exp_avg_sq[n] = blocks[f"adam_v/{n}"]
        state.generator.set_state(blocks["rng"])
    except (KeyError, RuntimeError) as exc:
        raise CorruptCheckpoint(f"checkpoint blocks do not match the model: {exc}") from exc
    state.step = int(header["step"])
    state.extra = header.get("extra", {})
    return state, sched, train_cfg


def load_checkpoint(path) -> tuple[TrainingState, NoiseSchedule, TrainConfig]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
