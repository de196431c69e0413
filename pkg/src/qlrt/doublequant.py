"""Double quantization: compressing the per-block quantization constants.

One 32-bit constant per block of 64 weights costs 0.5 bits per parameter.
Compressing the constants themselves drops most of that: the constant
vector is mean-centered (constants are strictly positive, so centering
buys the symmetric 8-bit float its full range) and quantized block-wise
(second-level blocks of ``blocksize2``) onto an 8-bit float grid scaled by
a per-block float32 absmax.  Storage per parameter falls from k + 32/B to
k + 8/B + 32/(B*B2) bits: 0.5 -> ~0.127 for (B, B2) = (64, 256).

The 8-bit float is E4M3 by default: 4 exponent bits, 3 mantissa bits,
bias 7, subnormals, and no inf/NaN encodings (all 256 bit patterns decode
to finite values; the two signed zeros collapse to 255 distinct values).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Fp8Spec",
    "DQConstants",
    "encode_fp8",
    "decode_fp8",
    "dq_compress",
    "dq_decompress",
    "bits_per_param",
]


@dataclass(frozen=True)
class Fp8Spec:
    """Sign/exponent/mantissa layout of the 8-bit constant quantizer."""

    exp_bits: int = 4
    mant_bits: int = 3
    bias: int = 7

    def __post_init__(self) -> None:
        if self.exp_bits + self.mant_bits != 7:
            raise ValueError("exp_bits + mant_bits must equal 7 (one sign bit)")
        if self.exp_bits < 1 or self.bias < 0:
            raise ValueError("need at least one exponent bit and bias >= 0")

    @property
    def max_value(self) -> float:
        """Largest finite magnitude on the grid."""
        top_m = (2 ** self.mant_bits - 1) / 2 ** self.mant_bits
        return (1.0 + top_m) * 2.0 ** (2 ** self.exp_bits - 1 - self.bias)

    def grid(self) -> tuple[np.ndarray, np.ndarray]:
        """(sorted distinct values, canonical byte code per value).

        All 2**8 bit patterns decode; +0 is the canonical zero code, the
        -0 pattern is never emitted.
        """
        mant_scale = 2.0 ** self.mant_bits
        values = []
        codes = []
        for s in (0, 1):
            for e in range(2 ** self.exp_bits):
                for m in range(2 ** self.mant_bits):
                    if e == 0:
                        mag = (m / mant_scale) * 2.0 ** (1 - self.bias)
                    else:
                        mag = (1.0 + m / mant_scale) * 2.0 ** (e - self.bias)
                    values.append(mag if s == 0 else -mag)
                    codes.append((s << 7) | (e << self.mant_bits) | m)
        values = np.array(values)
        codes = np.array(codes, dtype=np.uint8)
        order = np.argsort(values, kind="stable")  # +0 byte precedes -0 byte
        sorted_vals, sorted_codes = values[order], codes[order]
        keep = np.ones(sorted_vals.size, dtype=bool)
        keep[1:] = sorted_vals[1:] != sorted_vals[:-1]
        return sorted_vals[keep], sorted_codes[keep]


_GRID_CACHE: dict[Fp8Spec, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _grid(spec: Fp8Spec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cached = _GRID_CACHE.get(spec)
    if cached is None:
        vals, codes = spec.grid()
        decode_table = np.empty(256)
        # decode every bit pattern, including the spare -0
        for byte in range(256):
            s = byte >> 7
            e = (byte >> spec.mant_bits) & (2 ** spec.exp_bits - 1)
            m = byte & (2 ** spec.mant_bits - 1)
            if e == 0:
                mag = (m / 2.0 ** spec.mant_bits) * 2.0 ** (1 - spec.bias)
            else:
                mag = (1.0 + m / 2.0 ** spec.mant_bits) * 2.0 ** (e - spec.bias)
            decode_table[byte] = -mag if s else mag
        cached = (vals, codes, decode_table)
        _GRID_CACHE[spec] = cached
    return cached


def encode_fp8(x: np.ndarray, spec: Fp8Spec | None = None) -> np.ndarray:
    """Nearest-value encoding onto the 8-bit float grid (ties away from
    zero); values beyond the largest magnitude clamp to it."""
    spec = spec or Fp8Spec()
    vals, codes, _ = _grid(spec)
    x = np.asarray(x, dtype=np.float64)
    mids = (vals[:-1] + vals[1:]) / 2.0
    hi = np.searchsorted(mids, x, side="right")
    lo = np.searchsorted(mids, x, side="left")
    idx = np.where(x >= 0, hi, lo)
    return codes[idx]


def decode_fp8(codes: np.ndarray, spec: Fp8Spec | None = None) -> np.ndarray:
    """Decode byte codes to float64 grid values; total over all 256 patterns."""
    spec = spec or Fp8Spec()
    _, _, decode_table = _grid(spec)
    codes = np.asarray(codes, dtype=np.uint8)
    return decode_table[codes]


# ---------------------------------------------------------------------------
# constants compression
# ---------------------------------------------------------------------------


@dataclass
class DQConstants:
    """Compressed first-level constants.

    Reconstruction: ``decode_fp8(codes[i]) * c1[i // blocksize2] + mu``,
    clamped at zero (constants are absolute maxima, hence nonnegative).
    """

    mu: np.float32
    blocksize2: int
    spec: Fp8Spec
    c1: np.ndarray     # float32 scale per second-level block
    codes: np.ndarray  # uint8, one per first-level constant

    @property
    def n_constants(self) -> int:
        return int(self.codes.size)


def dq_compress(
    constants: np.ndarray,
    blocksize2: int = 256,
    spec: Fp8Spec | None = None,
) -> DQConstants:
    """Mean-center the constants and quantize them block-wise to the 8-bit
    float grid with a float32 absmax scale per second-level block."""
    spec = spec or Fp8Spec()
    constants = np.asarray(constants, dtype=np.float32)
    if constants.ndim != 1 or constants.size == 0:
        raise ValueError("constants must be a non-empty 1-d array")
    if blocksize2 < 1:
        raise ValueError(f"blocksize2 must be >= 1, got {blocksize2}")
    if np.any(constants < 0) or not np.all(np.isfinite(constants)):
        raise ValueError("constants must be finite and nonnegative")

    mu = np.float32(constants.mean(dtype=np.float64))
    centered = constants.astype(np.float64) - float(mu)

    n = constants.size
    n2 = (n + blocksize2 - 1) // blocksize2
    c1 = np.zeros(n2, dtype=np.float32)
    codes = np.zeros(n, dtype=np.uint8)
    fp8_max = spec.max_value
    for b in range(n2):
        blk = centered[b * blocksize2:(b + 1) * blocksize2]
        absmax = np.abs(blk).max()
        if absmax == 0.0:
            codes[b * blocksize2:(b + 1) * blocksize2] = encode_fp8(
                np.zeros(blk.size), spec
            )
            continue
        scale = np.float32(absmax / fp8_max)
        if scale == 0.0:  # centered spread underflows float32: store as flat
            continue
        c1[b] = scale
        codes[b * blocksize2:(b + 1) * blocksize2] = encode_fp8(
            blk / np.float64(scale), spec
        )
    return DQConstants(mu=mu, blocksize2=blocksize2, spec=spec, c1=c1, codes=codes)


def dq_decompress(dq: DQConstants) -> np.ndarray:
    """Inverse of :func:`dq_compress`; float32, clamped at zero."""
    decoded = decode_fp8(dq.codes, dq.spec)
    scale = np.repeat(dq.c1.astype(np.float64), dq.blocksize2)[: dq.codes.size]
    rec = decoded * scale + np.float64(dq.mu)
    return np.maximum(rec, 0.0).astype(np.float32)


# ---------------------------------------------------------------------------
# storage accounting
# ---------------------------------------------------------------------------


def bits_per_param(
    k: int,
    blocksize: int,
    dq: tuple[int, int] | None = None,
) -> float:
    """Average storage per parameter in bits.

    Without double quantization: k + 32/blocksize.  With ``dq = (blocksize2,
    bits2)``: k + bits2/blocksize + 32/(blocksize * blocksize2).  The fixed
    per-tensor fields of the compressed form (mu, blocksize2, fp8 layout)
    are O(1) and excluded, matching the serialized constants sections for
    block-aligned tensors.
    """
    if k < 1 or blocksize < 1:
        raise ValueError("k and blocksize must be positive")
    if dq is None:
        return k + 32.0 / blocksize
    blocksize2, bits2 = dq
    if blocksize2 < 1 or bits2 < 1:
        raise ValueError("blocksize2 and bits2 must be positive")
    return k + bits2 / blocksize + 32.0 / (blocksize * blocksize2)
