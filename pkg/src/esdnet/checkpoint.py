"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"ESDMB1\\n"
    u32 n, n bytes      JSON header: model kind, backbone spec, topology, run config
    tensor table        named parameters and buffers
    u8 flag             1 if optimizer velocities follow (as a second tensor table)
    u32 n, n bytes      JSON random-generator state (empty when absent)
    u32                 epoch counter

A tensor table is ``u32 count`` followed by entries
``u32 name_len, utf-8 name, u32 ndim, ndim x u32 dims, f32 payload``.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from esdnet.branches import InferenceModel, TopologyConfig, build_ensemble
from esdnet.errors import CheckpointError
from esdnet.nn.backbones import BackboneSpec, build_backbone
from esdnet.tensor import SgdState

MAGIC = b"ESDMB1\n"


@dataclass
class Checkpoint:
    model: object
    header: dict
    velocity: Optional[Dict[str, np.ndarray]] = None
    rng_state: Optional[dict] = None
    epoch: int = 0

    @property
    def run_config(self) -> Optional[dict]:
        return self.header.get("run_config")


def _write_table(buf, table: Dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def table(self) -> Dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32()):
            name = self.blob().decode("utf-8")
            ndim = self.u32()
            shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
            out[name] = arr.astype(np.float32)
        return out


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(
    path,
    model,
    run_config: Optional[dict] = None,
    optimizer: Optional[SgdState] = None,
    rng: Optional[np.random.Generator] = None,
    epoch: int = 0,
) -> None:
    header = dict(model.describe())
    header["run_config"] = run_config
    if optimizer is not None:
        header["optimizer"] = {
            "learning_rate": optimizer.learning_rate,
            "momentum": optimizer.momentum,
            "weight_decay": optimizer.weight_decay,
        }
    buf = io.BytesIO()
    buf.write(MAGIC)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    _write_table(buf, model.state_dict())
    if optimizer is not None:
        vel = {}
        for name, p in model.named_parameters():
            v = optimizer.velocity.get(id(p))
            if v is not None:
                vel[name] = v
        buf.write(b"\x01")
        _write_table(buf, vel)
    else:
        buf.write(b"\x00")
    rng_raw = json.dumps(rng.bit_generator.state).encode("utf-8") if rng is not None else b""
    buf.write(struct.pack("<I", len(rng_raw)))
    buf.write(rng_raw)
    buf.write(struct.pack("<I", int(epoch)))
    _atomic_write(Path(path), buf.getvalue())


def build_from_header(header: dict):
    """Instantiate an uninitialised model matching a checkpoint header."""
    spec_d = header.get("backbone")
    if spec_d is None:
        raise CheckpointError("checkpoint header lacks a backbone description")
    spec = BackboneSpec.from_dict(spec_d)
    kind = header.get("kind")
    if kind == "pruned":
        blocks, head = build_backbone(spec, None)
        return InferenceModel(blocks, head, spec)
    if kind == "ensemble":
        topo = TopologyConfig(**header["topology"])
        return build_ensemble(spec, topo, None)
    raise CheckpointError(f"unknown model kind {kind!r} in checkpoint header")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    r = _Reader(data, str(path))
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an esdnet checkpoint")
    try:
        header = json.loads(r.blob().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    state = r.table()
    velocity = r.table() if r.take(1) == b"\x01" else None
    rng_raw = r.blob()
    epoch = r.u32()
    model = build_from_header(header)
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(model, header, velocity, json.loads(rng_raw) if rng_raw else None, epoch)


def restore_optimizer(ckpt: Checkpoint) -> Optional[SgdState]:
    opt = ckpt.header.get("optimizer")
    if opt is None:
        return None
    state = SgdState(opt["learning_rate"], opt["momentum"], opt["weight_decay"])
    if ckpt.velocity:
        for name, p in ckpt.model.named_parameters():
            if name in ckpt.velocity:
                state.velocity[id(p)] = ckpt.velocity[name].copy()
    return state


def restore_rng(ckpt: Checkpoint) -> Optional[np.random.Generator]:
    if ckpt.rng_state is None:
        return None
    bitgen = getattr(np.random, ckpt.rng_state["bit_generator"])()
    bitgen.state = ckpt.rng_state
    return np.random.Generator(bitgen)
