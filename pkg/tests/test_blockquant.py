"""Block-wise absmax quantization: worked example, packing, properties."""

import numpy as np
import pytest

from qlrt.blockquant import BlockQuantized, dequantize, pack_codes, quantize, unpack_codes
from qlrt.codebooks import get_codebook, make_nf_codebook
from qlrt.errors import CorruptDataError

NF4 = get_codebook("nf4")
INT8 = get_codebook("int8")


# ---------------------------------------------------------------------------
# worked example
# ---------------------------------------------------------------------------


class TestWorkedExample:
    """Single block [1.0, -2.0, 0.5] against the int8 grid."""

    def test_codes_and_constant(self):
        q = quantize(np.array([1.0, -2.0, 0.5]), INT8, blocksize=3)
        assert q.constants.dtype == np.float32
        assert q.constants.tolist() == [2.0]
        # normalized [0.5, -1.0, 0.25] -> grid steps j/127: 63.5 ties away
        # from zero to 64, -127 exact, 31.75 rounds to 32; code = j + 127.
        assert q.unpacked_codes().tolist() == [191, 0, 159]

    def test_round_trip_values(self):
        q = quantize(np.array([1.0, -2.0, 0.5]), INT8, blocksize=3)
        expected = (np.array([64.0, -127.0, 32.0]) / 127.0) * 2.0
        assert np.array_equal(dequantize(q), expected)
        assert dequantize(q)[1] == -2.0


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------


class TestPacking:
    def test_nibble_order(self):
        assert pack_codes(np.array([0xA, 0x3]), 4).tolist() == [0x3A]

    def test_odd_count_pads_high_nibble(self):
        assert pack_codes(np.array([5]), 4).tolist() == [0x05]
        assert pack_codes(np.array([1, 2, 3]), 4).tolist() == [0x21, 0x03]

    def test_k8_is_byte_copy(self):
        codes = np.array([0, 7, 255], dtype=np.uint8)
        assert np.array_equal(pack_codes(codes, 8), codes)

    @pytest.mark.parametrize("k", [4, 8])
    def test_round_trip_property(self, k, rng):
        codes = rng.integers(0, 2**k, size=10001)  # odd count on purpose
        packed = pack_codes(codes, k)
        if k == 4:
            assert packed.size == 5001
        assert np.array_equal(unpack_codes(packed, k, 10001), codes)

    def test_rejects_unsupported_width(self):
        with pytest.raises(ValueError):
            pack_codes(np.array([1]), 3)
        with pytest.raises(ValueError):
            unpack_codes(np.array([1], dtype=np.uint8), 5, 1)

    def test_rejects_out_of_range_codes(self):
        with pytest.raises(ValueError, match="out of range"):
            pack_codes(np.array([16]), 4)
        with pytest.raises(ValueError, match="out of range"):
            pack_codes(np.array([-1]), 8)

    def test_unpack_count_too_large(self):
        with pytest.raises(ValueError, match="shorter"):
            unpack_codes(np.array([0x21], dtype=np.uint8), 4, 3)


# ---------------------------------------------------------------------------
# round-trip properties
# ---------------------------------------------------------------------------


class TestQuantizeProperties:
    def test_error_bound(self, rng):
        # |x - deq| <= constant * max_gap / 2 per element, modulo float
        # rounding of the constant itself.
        x = rng.normal(size=100_000)
        for name in ("nf4", "fp4-e2m1", "int4", "int8"):
            cb = get_codebook(name)
            q = quantize(x, cb, blocksize=64)
            err = np.abs(x - dequantize(q))
            bound = np.repeat(q.constants.astype(np.float64), 64)[: x.size]
            bound *= cb.max_gap / 2
            assert np.all(err <= bound * (1 + 1e-9) + 1e-15), name

    def test_exact_zero_preserved(self):
        x = np.array([0.0, 0.5, -1.0, 0.0])
        out = dequantize(quantize(x, NF4, blocksize=4))
        assert out[0] == 0.0 and out[3] == 0.0

    def test_all_zero_tensor(self):
        q = quantize(np.zeros(130), NF4, blocksize=64)
        assert np.array_equal(q.constants, np.zeros(3, dtype=np.float32))
        assert np.array_equal(dequantize(q), np.zeros(130))

    def test_zero_block_in_mixed_tensor(self):
        x = np.concatenate([np.zeros(64), np.ones(64)])
        q = quantize(x, NF4, blocksize=64)
        assert np.array_equal(dequantize(q)[:64], np.zeros(64))

    def test_zero_free_codebook_still_zeroes_empty_blocks(self):
        cb = get_codebook("nf-eq4")
        assert cb.zero_code is None
        out = dequantize(quantize(np.zeros(8), cb, blocksize=4))
        assert np.array_equal(out, np.zeros(8))

    def test_idempotent_bit_exact(self, rng):
        x = rng.normal(size=4096)
        once = dequantize(quantize(x, NF4, blocksize=64))
        twice = dequantize(quantize(once, NF4, blocksize=64))
        assert np.array_equal(once, twice)

    def test_scale_equivariance_powers_of_two(self, rng):
        x = rng.normal(size=1024)
        base = quantize(x, NF4, blocksize=64)
        for alpha in (0.25, 2.0, 1024.0):
            scaled = quantize(alpha * x, NF4, blocksize=64)
            assert np.array_equal(scaled.codes, base.codes)
            assert np.array_equal(
                scaled.constants, (alpha * base.constants.astype(np.float64)).astype(np.float32)
            )

    def test_single_element(self):
        assert dequantize(quantize(np.array([0.75]), NF4)) == np.array([0.75])
        assert dequantize(quantize(np.array([-0.75]), NF4)) == np.array([-0.75])
        # constants are float32, so a non-representable input rounds
        out = dequantize(quantize(np.array([0.7]), NF4))
        assert out[0] == np.float64(np.float32(0.7))

    def test_shape_round_trip(self, rng):
        x = rng.normal(size=(5, 7, 3))
        q = quantize(x, NF4, blocksize=16)
        assert q.shape == (5, 7, 3)
        assert dequantize(q).shape == (5, 7, 3)

    def test_scalar_input(self):
        q = quantize(np.float64(0.5), INT8)
        assert q.shape == ()
        assert dequantize(q).shape == ()

    def test_tie_breaks_away_from_zero(self):
        # 63.5/127 sits exactly between grid steps 63 and 64 on both signs.
        x = np.array([63.5 / 127, -63.5 / 127, 1.0])
        q = quantize(x, INT8, blocksize=3)
        codes = q.unpacked_codes()
        assert codes[0] == 64 + 127
        assert codes[1] == -64 + 127


class TestPadding:
    def test_partial_block(self, rng):
        x = rng.normal(size=10)
        q = quantize(x, NF4, blocksize=4)
        assert q.n_blocks == 3
        assert np.allclose(dequantize(q), x, atol=np.abs(x).max() * NF4.max_gap)
        # padding codes are the exact-zero code and never leak out
        assert q.unpacked_codes()[10:].tolist() == [NF4.zero_code, NF4.zero_code]

    def test_padding_does_not_influence_constant(self):
        x = np.array([0.1, -0.2])  # blocksize 64: one mostly padded block
        q = quantize(x, NF4, blocksize=64)
        assert q.constants[0] == np.float32(0.2)

    def test_unpadded_prefix_matches_full_block(self, rng):
        # The same leading values quantize identically whether or not the
        # block is padded, since padding never changes the absmax.
        lead = rng.normal(size=3)
        full = np.concatenate([lead, np.zeros(1)])
        q_pad = quantize(lead, NF4, blocksize=4)
        q_full = quantize(full, NF4, blocksize=4)
        assert np.array_equal(q_pad.codes, q_full.codes)
        assert np.array_equal(dequantize(q_pad), dequantize(q_full)[:3])


class TestDoubleQuantPath:
    def test_codes_unaffected(self, rng):
        x = rng.normal(size=64 * 300)
        plain = quantize(x, NF4, blocksize=64, double_quant=False)
        dq = quantize(x, NF4, blocksize=64, double_quant=True)
        assert np.array_equal(plain.codes, dq.codes)
        assert dq.constants is None and dq.dq is not None

    def test_error_bound_with_constant_drift(self, rng):
        # |x - c'.v| <= c * gap/2 + |c - c'| with c the exact constant and
        # c' its double-quantized reconstruction.
        x = rng.normal(size=64 * 300)
        plain = quantize(x, NF4, blocksize=64)
        dq = quantize(x, NF4, blocksize=64, double_quant=True)
        c = plain.constants.astype(np.float64)
        c_rec = dq.block_constants().astype(np.float64)
        err = np.abs(x - dequantize(dq))
        bound = np.repeat(c * NF4.max_gap / 2 + np.abs(c - c_rec), 64)
        assert np.all(err <= bound * (1 + 1e-9) + 1e-15)


# ---------------------------------------------------------------------------
# validation and corruption
# ---------------------------------------------------------------------------


class TestErrors:
    def test_non_finite_reports_flat_index(self):
        x = np.ones(10)
        x[5] = np.inf
        with pytest.raises(ValueError, match="flat index 5"):
            quantize(x, NF4)
        x[5] = np.nan
        with pytest.raises(ValueError, match="flat index 5"):
            quantize(x, NF4)

    def test_empty_tensor(self):
        with pytest.raises(ValueError, match="empty"):
            quantize(np.array([]), NF4)

    def test_bad_blocksize(self):
        with pytest.raises(ValueError, match="blocksize"):
            quantize(np.ones(4), NF4, blocksize=0)

    def test_out_of_range_code_detected(self):
        # 3-bit codebooks store one code per byte, so a corrupt byte can
        # exceed the table.
        cb = make_nf_codebook(3)
        q = quantize(np.linspace(-1, 1, 8), cb, blocksize=8)
        q.codes[0] = 9
        with pytest.raises(CorruptDataError, match="out of range"):
            dequantize(q)

    def test_wrong_constant_count_detected(self, rng):
        q = quantize(rng.normal(size=128), NF4, blocksize=64)
        q.constants = q.constants[:1]
        with pytest.raises(CorruptDataError, match="constants"):
            dequantize(q)


# ---------------------------------------------------------------------------
# code statistics
# ---------------------------------------------------------------------------


def code_entropy_bits(q: BlockQuantized) -> float:
    counts = np.bincount(q.unpacked_codes(), minlength=16)[: q.codebook.n_emitted]
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def test_normal_data_code_entropy_ordering():
    # On Gaussian data the quantile-based grid uses its codes most evenly,
    # the 4-bit float next, the uniform grid least.  Bands frozen from a
    # one-time measurement at this seed.
    x = np.random.default_rng(7).normal(size=1 << 17)
    ent = {
        name: code_entropy_bits(quantize(x, get_codebook(name), blocksize=64))
        for name in ("nf4", "fp4-e2m1", "int4")
    }
    assert ent["nf4"] > ent["fp4-e2m1"] > ent["int4"]
    assert ent["nf4"] == pytest.approx(3.884, abs=0.05)
    assert ent["fp4-e2m1"] == pytest.approx(3.818, abs=0.05)
    assert ent["int4"] == pytest.approx(3.500, abs=0.05)
