"""On-disk index format: a JSON manifest plus little-endian fixed-width arrays.

See FORMAT.md at the repository root for the field-by-field layout.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Union

import numpy as np

from .core import (
    CentroidSet,
    CompressedIndex,
    InvariantViolation,
    InvertedList,
    LateSearchError,
    QuantizerSpec,
)
from .indexer import build_inverted_list

FORMAT_VERSION = 1
MANIFEST = "manifest.json"

# file name -> little-endian dtype
FILES = {
    "centroids.f32": "<f4",
    "codes.u32": "<u4",
    "residuals.bin": "u1",
    "doclens.u32": "<u4",
    "ivf_offsets.u64": "<u8",
    "ivf_postings.u32": "<u4",
}


class ChecksumMismatch(LateSearchError):
    pass


class UnsupportedVersion(LateSearchError):
    pass


def _sha256(path: Path, block: int = 1 << 22) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while chunk := f.read(block):
            h.update(chunk)
    return h.hexdigest()


def _arrays(index: CompressedIndex):
    return {
        "centroids.f32": index.centroids.data,
        "codes.u32": index.codes,
        "residuals.bin": index.residuals,
        "doclens.u32": index.doclens,
        "ivf_offsets.u64": index.ivf.offsets,
        "ivf_postings.u32": index.ivf.postings,
    }


def save_index(index: CompressedIndex, path: Union[str, Path]) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        files = {}
        for name, arr in _arrays(index).items():
            target = out / name
            tmp = out / (name + ".tmp")
            written.append(tmp)
            with open(tmp, "wb") as f:
                np.ascontiguousarray(arr, dtype=FILES[name]).tofile(f)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, target)
            written[-1] = target
            files[name] = {"bytes": target.stat().st_size, "sha256": _sha256(target)}
        manifest = {
            "format_version": FORMAT_VERSION,
            "dim": index.dim,
            "nbits": index.nbits,
            "num_passages": index.num_passages,
            "num_embeddings": index.num_embeddings,
            "num_centroids": index.num_centroids,
            "rng_seed": int(index.metadata.get("rng_seed", 0)),
            "kmeans_iters": index.metadata.get("kmeans_iters"),
            "sample_fraction": index.metadata.get("sample_fraction"),
            "quantizer": {
                "bucket_cutoffs": [float(x) for x in index.quantizer.bucket_cutoffs],
                "bucket_weights": [float(x) for x in index.quantizer.bucket_weights],
            },
            "files": files,
        }
        tmp = out / (MANIFEST + ".tmp")
        written.append(tmp)
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, out / MANIFEST)
    except BaseException:
        for f in written:
            try:
                f.unlink()
            except FileNotFoundError:
                pass
        (out / MANIFEST).unlink(missing_ok=True)
        raise


def read_manifest(path: Union[str, Path]) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise LateSearchError(f"no {MANIFEST} in {path}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"index format version {version!r} is not supported")
    return manifest


def load_index(path: Union[str, Path], lazy: bool = False, verify: bool = True) -> CompressedIndex:
    """Load and fully validate an index directory.

    With ``lazy=True`` the token-level arrays (codes, residuals) are memory
    mapped instead of read into RAM.
    """
    path = Path(path)
    m = read_manifest(path)
    for name in FILES:
        entry = m["files"].get(name)
        if entry is None or not (path / name).exists():
            raise InvariantViolation(f"index is missing {name}")
        if (path / name).stat().st_size != entry["bytes"]:
            raise ChecksumMismatch(f"{name}: size {(path / name).stat().st_size} != {entry['bytes']}")
        if verify and _sha256(path / name) != entry["sha256"]:
            raise ChecksumMismatch(f"{name}: sha256 does not match manifest")

    d, b = m["dim"], m["nbits"]
    n, K, P = m["num_embeddings"], m["num_centroids"], m["num_passages"]
    if d % (8 // b):
        raise InvariantViolation(f"dim {d} not packable at {b} bits")
    row_bytes = b * d // 8
    expect = {
        "centroids.f32": K * d * 4, "codes.u32": n * 4, "residuals.bin": n * row_bytes,
        "doclens.u32": P * 4, "ivf_offsets.u64": (K + 1) * 8,
    }
    for name, size in expect.items():
        if m["files"][name]["bytes"] != size:
            raise InvariantViolation(f"{name} holds {m['files'][name]['bytes']} bytes, manifest implies {size}")

    def read(name, shape=None, mmap=False):
        dt = np.dtype(FILES[name])
        if mmap and m["files"][name]["bytes"]:
            arr = np.memmap(path / name, dtype=dt, mode="r")
        else:
            arr = np.fromfile(path / name, dtype=dt)
        arr = arr.astype(dt.newbyteorder("="), copy=False)
        return arr.reshape(shape) if shape is not None else arr

    centroids = CentroidSet(read("centroids.f32", (K, d)))
    codes = read("codes.u32", mmap=lazy)
    residuals = read("residuals.bin", (n, row_bytes), mmap=lazy)
    doclens = read("doclens.u32")
    ivf = InvertedList(read("ivf_offsets.u64"), read("ivf_postings.u32"))
    q = m["quantizer"]
    try:
        quant = QuantizerSpec(np.array(q["bucket_cutoffs"]), np.array(q["bucket_weights"]))
    except InvariantViolation as e:
        raise InvariantViolation(f"quantizer: {e}") from None
    if quant.nbits != b:
        raise InvariantViolation(f"quantizer has {quant.nbits} bits, manifest says {b}")
    metadata = {k: m.get(k) for k in ("rng_seed", "kmeans_iters", "sample_fraction")}
    index = CompressedIndex(centroids, codes, residuals, doclens, ivf, quant, metadata)
    index.check()
    rebuilt = build_inverted_list(np.asarray(index.codes), index.doclens, K)
    if not (np.array_equal(rebuilt.offsets, ivf.offsets) and np.array_equal(rebuilt.postings, ivf.postings)):
        raise InvariantViolation("inverted list does not match the per-token centroid codes")
    return index
