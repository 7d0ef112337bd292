"""Binary checkpoints: network weights plus the configs that trained them.

Layout (little-endian): magic "BSNN", u32 format version, architecture
descriptor, timestep count, neuron kind, input shape, class count, the
nominal and malicious neuron configs, training provenance (seed, epochs,
poison ratio, target label), then named parameter blocks as row-major
float32. The version is checked before any parameter byte is read, and a
load followed by a save reproduces the file exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import SurrogateSpec
from .network import SpikingNetwork, build_network
from .neurons import NeuronConfig

MAGIC = b"BSNN"
VERSION = 1
_GEN_MAGIC = b"BSNG"


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointMeta:
    cfg_nominal: NeuronConfig
    cfg_malicious: NeuronConfig
    seed: int
    epochs: int
    poison_ratio: float
    y_target: int


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes):
        self.parts.append(b)

    def u32(self, v: int):
        self.raw(struct.pack("<I", v))

    def i32(self, v: int):
        self.raw(struct.pack("<i", v))

    def u64(self, v: int):
        self.raw(struct.pack("<Q", v))

    def f64(self, v: float):
        self.raw(struct.pack("<d", v))

    def text(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.raw(b)

    def bytes_out(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated at byte {self.off} (need {n} more)")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i32(self) -> int:
        return struct.unpack("<i", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def text(self) -> str:
        n = self.u32()
        if n > len(self.data):
            raise CheckpointError(f"{self.path}: corrupt string length {n} at byte {self.off - 4}")
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{self.path}: corrupt string at byte {self.off - n}") from None

    def done(self):
        if self.off != len(self.data):
            raise CheckpointError(
                f"{self.path}: {len(self.data) - self.off} trailing bytes after payload")


def _write_neuron_config(w: _Writer, cfg: NeuronConfig):
    w.f64(cfg.v_thr)
    w.f64(cfg.tau)
    w.f64(cfg.v_rest)
    w.f64(cfg.v_reset)
    w.text(cfg.surrogate.kind)
    w.f64(cfg.surrogate.slope)


def _read_neuron_config(r: _Reader) -> NeuronConfig:
    v_thr, tau, v_rest, v_reset = r.f64(), r.f64(), r.f64(), r.f64()
    kind = r.text()
    slope = r.f64()
    return NeuronConfig(v_thr, tau, v_rest, v_reset, SurrogateSpec(kind, slope, "hard"))


def _write_params(w: _Writer, params: list[tuple[str, object]]):
    w.u32(len(params))
    for name, p in params:
        w.text(name)
        w.u32(p.data.ndim)
        for d in p.data.shape:
            w.u32(d)
        w.raw(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def _read_params(r: _Reader, params: list[tuple[str, object]], what: str):
    n_blocks = r.u32()
    if n_blocks != len(params):
        raise CheckpointError(
            f"{r.path}: {what} has {len(params)} parameter blocks, file has {n_blocks}")
    for name, p in params:
        fname = r.text()
        if fname != name:
            raise CheckpointError(f"{r.path}: expected parameter block {name!r}, found {fname!r}")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        if shape != tuple(p.data.shape):
            raise CheckpointError(
                f"{r.path}: block {name!r} shape {shape} does not match architecture "
                f"{tuple(p.data.shape)}")
        count = int(np.prod(shape)) if shape else 1
        p.data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)


def save_checkpoint(path, net: SpikingNetwork, meta: CheckpointMeta):
    w = _Writer()
    w.raw(MAGIC)
    w.u32(VERSION)
    w.text(net.arch)
    w.u32(net.T)
    w.text(net.neuron_kind)
    for d in net.in_shape:
        w.u32(d)
    w.u32(net.n_classes)
    _write_neuron_config(w, meta.cfg_nominal)
    _write_neuron_config(w, meta.cfg_malicious)
    w.u64(meta.seed)
    w.u32(meta.epochs)
    w.f64(meta.poison_ratio)
    w.i32(meta.y_target)
    _write_params(w, net.parameters())
    Path(path).write_bytes(w.bytes_out())


def load_checkpoint(path) -> tuple[SpikingNetwork, CheckpointMeta]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    arch = r.text()
    T = r.u32()
    neuron_kind = r.text()
    in_shape = (r.u32(), r.u32(), r.u32())
    n_classes = r.u32()
    cfg_n = _read_neuron_config(r)
    cfg_t = _read_neuron_config(r)
    meta = CheckpointMeta(cfg_n, cfg_t, r.u64(), r.u32(), r.f64(), r.i32())
    try:
        net = build_network(arch, in_shape, n_classes, T, neuron_kind, seed=0)
    except ValueError as err:
        raise CheckpointError(f"{path}: bad architecture descriptor: {err}") from None
    _read_params(r, net.parameters(), "architecture")
    r.done()
    net.epochs_trained = meta.epochs
    return net, meta


# ---------------------------------------------------------------------------
# trigger-generator checkpoints
# ---------------------------------------------------------------------------

def save_generator(path, gen):
    w = _Writer()
    w.raw(_GEN_MAGIC)
    w.u32(VERSION)
    w.u32(gen.in_channels)
    w.u32(gen.n_classes)
    w.f64(gen.magnitude_cap)
    w.u32(gen.base_width)
    _write_params(w, gen.parameters())
    Path(path).write_bytes(w.bytes_out())


def load_generator(path):
    from .trigger import TriggerGenerator

    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != _GEN_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    gen = TriggerGenerator(r.u32(), r.u32(), r.f64(), base_width=r.u32(), seed=0)
    _read_params(r, gen.parameters(), "generator")
    r.done()
    return gen
