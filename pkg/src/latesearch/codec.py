"""Residual bit packing and table-driven decompression.

Packing is LSB-first: within each byte, bucket index j of the byte occupies
bits ``[b*j, b*j + b)``. A byte therefore stores ``8 // b`` consecutive
dimensions, lowest dimension in the lowest bits.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numba
import numpy as np

from .core import CentroidSet, CompressedVector, LateSearchError, QuantizerSpec
from .parallel import parallel_range

SUPPORTED_BITS = (1, 2, 4)


class IndexOutOfRange(LateSearchError):
    pass


class LengthNotPackable(LateSearchError):
    pass


def _check_bits(b: int) -> None:
    if b not in SUPPORTED_BITS:
        raise ValueError(f"nbits must be one of {SUPPORTED_BITS}, got {b}")


@dataclass(frozen=True)
class DecompressionLUT:
    """Row v lists the 8/b bucket indices packed into byte value v."""

    b: int
    table: np.ndarray  # (256, 8 // b) uint8

    @property
    def per_byte(self) -> int:
        return 8 // self.b


@lru_cache(maxsize=None)
def build_lut(b: int) -> DecompressionLUT:
    _check_bits(b)
    per = 8 // b
    v = np.arange(256, dtype=np.uint16)[:, None]
    shifts = (b * np.arange(per, dtype=np.uint16))[None, :]
    table = ((v >> shifts) & ((1 << b) - 1)).astype(np.uint8)
    table.flags.writeable = False
    return DecompressionLUT(b, table)


def pack_residual(bucket_indices, b: int) -> bytes:
    idx = np.asarray(bucket_indices, dtype=np.int64)
    return pack_rows(idx.reshape(1, -1), b).tobytes()


def pack_rows(indices: np.ndarray, b: int) -> np.ndarray:
    """Pack an (n, d) array of bucket indices into (n, b*d/8) bytes."""
    _check_bits(b)
    per = 8 // b
    indices = np.asarray(indices)
    n, d = indices.shape
    if d % per:
        raise LengthNotPackable(f"{d} indices cannot be packed {per} per byte")
    if indices.size and (indices.min() < 0 or indices.max() >= (1 << b)):
        raise IndexOutOfRange(f"bucket indices must lie in [0, {1 << b})")
    grouped = indices.astype(np.uint8).reshape(n, d // per, per)
    shifts = (b * np.arange(per, dtype=np.uint8))
    return np.bitwise_or.reduce(grouped << shifts, axis=2).astype(np.uint8)


def unpack_bitshift(packed, b: int) -> np.ndarray:
    """Reference unpacking by explicit shifts and masks."""
    _check_bits(b)
    per = 8 // b
    raw = np.frombuffer(bytes(packed), dtype=np.uint8)
    out = np.empty(len(raw) * per, dtype=np.uint8)
    mask = (1 << b) - 1
    for j in range(per):
        out[j::per] = (raw >> (b * j)) & mask
    return out


def unpack_via_lut(packed, lut: DecompressionLUT) -> np.ndarray:
    """Bucket indices by table lookup; accepts bytes or a (..., nbytes) uint8 array."""
    if isinstance(packed, np.ndarray):
        raw = packed.astype(np.uint8, copy=False)
    else:
        raw = np.frombuffer(bytes(packed), dtype=np.uint8)
    return lut.table[raw].reshape(*raw.shape[:-1], raw.shape[-1] * lut.per_byte)


def weight_table(quant: QuantizerSpec, lut: DecompressionLUT) -> np.ndarray:
    """Byte value -> the 8/b reconstructed residual values it encodes."""
    return np.ascontiguousarray(quant.bucket_weights[lut.table], dtype=np.float32)


@numba.njit(nogil=True, cache=True)
def _decompress(centroids, codes, residuals, wtable, src, dst, start, stop, normalize, out):
    """Decompress token runs [src[p], src[p]+len) into out rows starting at dst[p]."""
    per = wtable.shape[1]
    nbytes = residuals.shape[1]
    d = centroids.shape[1]
    for p in range(start, stop):
        s = src[p]
        o = dst[p]
        n = dst[p + 1] - o
        for t in range(n):
            row = out[o + t]
            c = codes[s + t]
            for j in range(nbytes):
                vals = wtable[residuals[s + t, j]]
                for m in range(per):
                    row[j * per + m] = centroids[c, j * per + m] + vals[m]
            if normalize:
                sq = 0.0
                for i in range(d):
                    sq += np.float64(row[i]) * row[i]
                if sq > 0.0:
                    inv = np.float32(1.0 / np.sqrt(sq))
                    for i in range(d):
                        row[i] *= inv


def decompress_ranges(
    centroids: np.ndarray,
    codes: np.ndarray,
    residuals: np.ndarray,
    wtable: np.ndarray,
    src_starts: np.ndarray,
    lengths: np.ndarray,
    normalize: bool = True,
    threads: Optional[int] = None,
):
    """Decompress several token runs into one packed matrix, parallel over runs.

    Returns ``(embeddings, offsets)`` where ``offsets`` delimits each run's rows.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    dst = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=dst[1:])
    out = np.empty((int(dst[-1]), centroids.shape[1]), dtype=np.float32)
    src = np.ascontiguousarray(src_starts, dtype=np.int64)
    codes = np.asarray(codes)
    residuals = np.asarray(residuals)

    def run(lo, hi, _w):
        _decompress(centroids, codes, residuals, wtable, src, dst, lo, hi, normalize, out)

    parallel_range(len(lengths), run, threads, min_chunk=64)
    return out, dst


def reconstruct(
    tokens: Sequence[CompressedVector],
    centroids: CentroidSet,
    quant: QuantizerSpec,
    lut: Optional[DecompressionLUT] = None,
    normalize: bool = True,
) -> np.ndarray:
    """Approximate embeddings: centroid plus per-dimension bucket weight, L2-normalized."""
    lut = lut or build_lut(quant.nbits)
    if lut.b != quant.nbits:
        raise ValueError(f"lookup table is for {lut.b} bits, quantizer uses {quant.nbits}")
    d = centroids.dim
    if not tokens:
        return np.empty((0, d), dtype=np.float32)
    codes = np.fromiter((t.centroid_id for t in tokens), dtype=np.uint32, count=len(tokens))
    res = np.frombuffer(b"".join(t.residual for t in tokens), dtype=np.uint8).reshape(len(tokens), -1)
    if res.shape[1] * lut.per_byte != d:
        raise ValueError(f"residual of {res.shape[1]} bytes does not cover dim {d}")
    out, _ = decompress_ranges(
        centroids.data, codes, res, weight_table(quant, lut),
        np.zeros(1, np.int64), np.array([len(tokens)]), normalize=normalize, threads=1,
    )
    return out
