"""Synthetic regression data.

Piecewise-linear sequences: the sequence is cut into ``2**m`` segments;
segment ``c`` draws keys from a Gaussian folded into the orthant cone whose
first ``m`` signs are given by :func:`sign_pattern`, and values
``v = A_c k + noise`` with ``A_c`` standard normal.

Randomness comes from numpy's Philox4x64 counter-based generator keyed by
``SeedSequence(seed, spawn_key=(sample, segment))``. Within a segment the
draws are, in order: ``A_c`` (``d*d`` normals, row-major), ``Z`` (``S*d``),
noise (``S*d``). Replaying any (seed, sample, segment) is independent of how
many other samples were generated.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"LLA1"
_HEADER = struct.Struct("<4sQQQ")


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def sign_pattern(c: int, m: int) -> np.ndarray:
    """Signs for segment ``c`` (1-based): bit ``b`` of ``c - 1`` maps 0 -> +1, 1 -> -1."""
    if m < 0:
        raise ValueError("m must be >= 0")
    if not 1 <= c <= 2 ** m:
        raise ValueError(f"segment index c={c} outside 1..{2 ** m}")
    bits = ((c - 1) >> np.arange(m)) & 1
    return 1.0 - 2.0 * bits


@dataclass(frozen=True)
class PiecewiseLinearTask:
    L: int
    S: int
    d: int
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.L < 1 or self.S < 1 or self.d < 1:
            raise ValueError("L, S and d must be positive")
        if self.L % self.S:
            raise ValueError(f"segment size {self.S} must divide L={self.L}")
        n_seg = self.L // self.S
        if n_seg & (n_seg - 1):
            raise ValueError(f"number of segments {n_seg} must be a power of two")
        if self.m > self.d:
            raise ValueError(f"log2(#segments)={self.m} exceeds d={self.d}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    @property
    def n_segments(self) -> int:
        return self.L // self.S

    @property
    def m(self) -> int:
        return self.n_segments.bit_length() - 1


@dataclass
class SequenceSample:
    keys: np.ndarray
    values: np.ndarray
    segment_ids: np.ndarray
    A: np.ndarray

    @property
    def L(self) -> int:
        return self.keys.shape[0]

    @property
    def d(self) -> int:
        return self.keys.shape[1]


def gen_sequence(task: PiecewiseLinearTask, sample: int = 0) -> SequenceSample:
    L, S, d, m = task.L, task.S, task.d, task.m
    keys = np.empty((L, d))
    values = np.empty((L, d))
    A = np.empty((task.n_segments, d, d))
    seg = np.repeat(np.arange(1, task.n_segments + 1), S)
    for c in range(1, task.n_segments + 1):
        rng = stream(task.seed, sample, c)
        A[c - 1] = rng.standard_normal((d, d))
        Z = rng.standard_normal((S, d))
        eps = rng.standard_normal((S, d)) * task.noise
        Z[:, :m] = sign_pattern(c, m) * np.abs(Z[:, :m])
        sl = slice((c - 1) * S, c * S)
        keys[sl] = Z
        values[sl] = Z @ A[c - 1].T + eps
    return SequenceSample(keys=keys, values=values, segment_ids=seg, A=A)


# --- i.i.d. regression on the unit ball -------------------------------------------------

def quadratic_disk(X, scale: float = 1.0) -> np.ndarray:
    return scale * np.sum(X * X, axis=1, keepdims=True)


def affine(X) -> np.ndarray:
    d = X.shape[1]
    return (1.0 + X @ (np.arange(1, d + 1) / d))[:, None]


TARGETS = {"quadratic-disk": quadratic_disk, "affine": affine}


def uniform_ball(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    G = rng.standard_normal((n, d))
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    return G * rng.random((n, 1)) ** (1.0 / d)


def gen_iid_regression(n: int, d: int, f_id="quadratic-disk", noise: float = 0.1, seed: int = 0,
                       rep: int = 0):
    """``X`` uniform on the unit ball, ``Y = f(X) + noise * N(0, 1)``.

    ``f_id`` names a target in :data:`TARGETS` or is a callable mapping an
    ``(n, d)`` array to ``(n, d_y)``.
    """
    if callable(f_id):
        f = f_id
    elif f_id in TARGETS:
        f = TARGETS[f_id]
    else:
        raise ValueError(f"unknown target {f_id!r}; expected one of {sorted(TARGETS)} or a callable")
    rng = stream(seed, rep, n)
    X = uniform_ball(rng, n, d)
    F = np.asarray(f(X), dtype=np.float64)
    return X, F + noise * rng.standard_normal(F.shape)


# --- persistence ------------------------------------------------------------------------

def csv_header(d: int) -> list[str]:
    return (["sample", "position", "segment"] + [f"k_{i}" for i in range(d)]
            + [f"v_{i}" for i in range(d)])


def write_csv(samples: Iterable[SequenceSample], fh) -> None:
    w = None
    for s_idx, s in enumerate(samples):
        if w is None:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(csv_header(s.d))
        for i in range(s.L):
            w.writerow([s_idx, i, int(s.segment_ids[i])]
                       + [repr(float(x)) for x in s.keys[i]]
                       + [repr(float(x)) for x in s.values[i]])


def read_csv(fh) -> list[SequenceSample]:
    rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(1 for c in header if c.startswith("k_"))
    data = np.array(body, dtype=np.float64).reshape(len(body), -1)
    out = []
    for s_idx in np.unique(data[:, 0]).astype(int):
        blk = data[data[:, 0] == s_idx]
        seg = blk[:, 2].astype(np.int64)
        out.append(SequenceSample(keys=blk[:, 3:3 + d].copy(), values=blk[:, 3 + d:3 + 2 * d].copy(),
                                  segment_ids=seg, A=np.empty((0, d, d))))
    return out


def write_binary(samples: Iterable[SequenceSample], fh: BinaryIO) -> None:
    """One frame per sample: header ``<4sQQQ`` (magic, L, d, n_segments), then
    little-endian int64 segment ids, float64 keys, values and ``A`` (row-major)."""
    for s in samples:
        fh.write(_HEADER.pack(MAGIC, s.L, s.d, s.A.shape[0]))
        fh.write(np.ascontiguousarray(s.segment_ids, dtype="<i8").tobytes())
        for arr in (s.keys, s.values, s.A):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_binary(fh: BinaryIO) -> list[SequenceSample]:
    out = []
    while True:
        head = fh.read(_HEADER.size)
        if not head:
            return out
        if len(head) < _HEADER.size:
            raise ValueError("truncated frame header")
        magic, L, d, n_seg = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")

        def take(count, dtype):
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError("truncated frame body")
            return np.frombuffer(raw, dtype=dtype)

        seg = take(L, "<i8").astype(np.int64)
        keys = take(L * d, "<f8").astype(np.float64).reshape(L, d)
        values = take(L * d, "<f8").astype(np.float64).reshape(L, d)
        A = take(n_seg * d * d, "<f8").astype(np.float64).reshape(n_seg, d, d)
        out.append(SequenceSample(keys=keys, values=values, segment_ids=seg, A=A))


def to_bytes(samples: Iterable[SequenceSample]) -> bytes:
    buf = io.BytesIO()
    write_binary(samples, buf)
    return buf.getvalue()
