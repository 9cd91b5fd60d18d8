import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latesearch.codec import (
    IndexOutOfRange,
    LengthNotPackable,
    build_lut,
    pack_residual,
    pack_rows,
    reconstruct,
    unpack_bitshift,
    unpack_via_lut,
)
from latesearch.core import CentroidSet, CompressedVector, QuantizerSpec

from oracles import decompress_scalar, unpack_scalar


def test_pack_lsb_first():
    assert pack_residual([0, 1, 2, 3], 2) == bytes([0xE4])
    assert pack_residual([1, 0, 0, 0, 0, 0, 0, 0], 1) == bytes([0x01])
    assert pack_residual([0xA, 0x3], 4) == bytes([0x3A])


def test_unpack_examples():
    lut = build_lut(2)
    assert unpack_via_lut(bytes([0xE4]), lut).tolist() == [0, 1, 2, 3]
    for b in (1, 2, 4):
        assert not unpack_via_lut(bytes([0]), build_lut(b)).any()


def test_pack_errors():
    with pytest.raises(LengthNotPackable):
        pack_residual([0, 1, 2], 2)
    with pytest.raises(IndexOutOfRange):
        pack_residual([0, 4, 0, 0], 2)
    with pytest.raises(ValueError):
        pack_residual([0] * 8, 3)


@pytest.mark.parametrize("b", [1, 2, 4])
def test_lut_table_formula(b):
    lut = build_lut(b)
    per = 8 // b
    assert lut.table.shape == (256, per)
    for v in range(256):
        for j in range(per):
            assert lut.table[v, j] == (v >> (b * j)) & ((1 << b) - 1)


@pytest.mark.parametrize("b", [1, 2, 4])
def test_exhaustive_byte_roundtrip(b):
    lut = build_lut(b)
    everything = bytes(range(256))
    via_lut = unpack_via_lut(everything, lut)
    assert np.array_equal(via_lut, unpack_bitshift(everything, b))
    assert via_lut.tolist() == unpack_scalar(everything, b)
    assert pack_residual(via_lut, b) == everything


@pytest.mark.parametrize("b", [1, 2, 4])
def test_random_bytes_lut_equals_bitshift(b, rng):
    raw = rng.integers(0, 256, size=10_000, dtype=np.uint8).tobytes()
    assert np.array_equal(unpack_via_lut(raw, build_lut(b)), unpack_bitshift(raw, b))


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.data())
def test_pack_unpack_roundtrip_property(b, data):
    per = 8 // b
    nbytes = data.draw(st.integers(0, 40))
    idx = data.draw(st.lists(st.integers(0, (1 << b) - 1), min_size=nbytes * per, max_size=nbytes * per))
    packed = pack_residual(idx, b)
    assert len(packed) == len(idx) * b // 8
    assert unpack_via_lut(packed, build_lut(b)).tolist() == idx


def test_pack_rows_matches_pack_residual(rng):
    idx = rng.integers(0, 4, size=(5, 16))
    rows = pack_rows(idx, 2)
    assert rows.shape == (5, 4)
    for r in range(5):
        assert rows[r].tobytes() == pack_residual(idx[r], 2)
    assert np.array_equal(unpack_via_lut(rows, build_lut(2)), idx)


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_reconstruct_zero_weights_is_centroid(rng):
    C = CentroidSet(_unit(rng.standard_normal((3, 8))))
    quant = QuantizerSpec(np.zeros(3), np.zeros(4))
    toks = [CompressedVector(i, bytes(rng.integers(0, 256, 2, dtype=np.uint8))) for i in range(3)]
    assert np.allclose(reconstruct(toks, C, quant), C.data, atol=1e-7)


def test_reconstruct_matches_scalar_reference(rng):
    C = CentroidSet(_unit(rng.standard_normal((4, 8))))
    quant = QuantizerSpec(np.array([-0.05, 0.0, 0.05]), np.array([-0.1, -0.02, 0.02, 0.1]))
    idx = [3, 0, 1, 2, 2, 1, 0, 3]
    tok = CompressedVector(2, pack_residual(idx, 2))
    got = reconstruct([tok], C, quant)[0]
    want = decompress_scalar(C.data[2], tok.residual, quant.bucket_weights, 2)
    assert np.allclose(got, want, atol=1e-6)
    assert abs(np.linalg.norm(got) - 1) < 1e-6
    raw = reconstruct([tok], C, quant, normalize=False)[0]
    assert np.allclose(raw, C.data[2] + quant.bucket_weights[idx], atol=1e-7)


def test_reconstruct_rows_unit_norm(small_index):
    toks = [small_index.token(t) for t in range(0, small_index.num_embeddings, 7)]
    out = reconstruct(toks, small_index.centroids, small_index.quantizer)
    assert np.abs(np.linalg.norm(out, axis=1) - 1).max() < 1e-6


def test_reconstruct_beats_bare_centroid(small_collection, small_index):
    corpus = small_collection.corpus
    toks = [small_index.token(t) for t in range(corpus.num_embeddings)]
    rec = reconstruct(toks, small_index.centroids, small_index.quantizer)
    cos_rec = np.einsum("ij,ij->i", corpus.data, rec).mean()
    cos_cent = np.einsum("ij,ij->i", corpus.data, small_index.centroids.data[small_index.codes]).mean()
    assert cos_rec > cos_cent


def test_reconstruct_lut_bits_must_match(rng):
    C = CentroidSet(_unit(rng.standard_normal((1, 8))))
    quant = QuantizerSpec(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        reconstruct([CompressedVector(0, b"\0\0")], C, quant, build_lut(1))
