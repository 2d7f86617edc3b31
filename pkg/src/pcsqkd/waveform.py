"""Dual-polarization sample streams and their binary file format.

File layout (little-endian): magic ``b"CVQW"``, uint16 version, float64
sample_rate, uint64 length, int64 seed (-1 for none), uint32 JSON length,
the JSON blob, then ``length`` float64 quadruples (XI, XQ, YI, YQ).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError

MAGIC = b"CVQW"
SYMBOL_MAGIC = b"CVQS"
VERSION = 1
_HEADER = struct.Struct("<4sHdQqI")


@dataclass(eq=False)
class Waveform:
    samples: np.ndarray  # shape (2, n), complex128
    sample_rate: float
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 2 or self.samples.shape[0] != 2:
            raise ParameterError("waveform samples must have shape (2, n)")
        if not np.all(np.isfinite(self.samples)):
            raise ParameterError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[1]

    def time(self) -> np.ndarray:
        return np.arange(len(self)) / self.sample_rate

    def replace(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples, self.sample_rate, self.seed, dict(self.meta))


def _pack(magic: bytes, streams: np.ndarray, rate: float, seed, meta: dict) -> bytes:
    blob = json.dumps(meta, sort_keys=True).encode()
    n = streams.shape[1]
    header = _HEADER.pack(magic, VERSION, float(rate), n, -1 if seed is None else int(seed), len(blob))
    quad = np.empty((n, 4), dtype="<f8")
    quad[:, 0], quad[:, 1] = streams[0].real, streams[0].imag
    quad[:, 2], quad[:, 3] = streams[1].real, streams[1].imag
    return header + blob + quad.tobytes()


def _unpack(data: bytes, magic: bytes):
    head = _HEADER.unpack_from(data, 0)
    if head[0] != magic:
        raise ParameterError(f"bad magic {head[0]!r}, expected {magic!r}")
    if head[1] != VERSION:
        raise ParameterError(f"unsupported version {head[1]}")
    _, _, rate, n, seed, blob_len = head
    off = _HEADER.size
    meta = json.loads(data[off:off + blob_len].decode())
    off += blob_len
    quad = np.frombuffer(data, dtype="<f8", count=4 * n, offset=off).reshape(n, 4)
    streams = np.vstack([quad[:, 0] + 1j * quad[:, 1], quad[:, 2] + 1j * quad[:, 3]])
    return streams, rate, (None if seed == -1 else seed), meta


def write_waveform(path, w: Waveform) -> None:
    Path(path).write_bytes(_pack(MAGIC, w.samples, w.sample_rate, w.seed, w.meta))


def read_waveform(path) -> Waveform:
    streams, rate, seed, meta = _unpack(Path(path).read_bytes(), MAGIC)
    return Waveform(streams, rate, seed, meta)


def write_symbol_dump(path, streams: np.ndarray, symbol_rate: float, meta: dict | None = None) -> None:
    """Symbol-rate streams in the waveform layout, tagged ``CVQS``."""
    Path(path).write_bytes(_pack(SYMBOL_MAGIC, np.asarray(streams), symbol_rate, None, meta or {}))


def read_symbol_dump(path):
    streams, rate, _, meta = _unpack(Path(path).read_bytes(), SYMBOL_MAGIC)
    return streams, rate, meta
