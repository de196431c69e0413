"""Quantization codebooks: k-bit value grids normalized to [-1, 1].

A codebook is the value side of a k-bit data type: a decode table mapping
each of the 2**k codes to a reconstruction value.  Tables are normalized so
the largest magnitude is exactly 1.0.  Families:

* ``nf{k}``       -- information-theoretically motivated grid with one value
                     per equal-probability slice of N(0, 1), built from an
                     asymmetric two-range quantile scheme so that exact 0 is
                     always representable.
* ``nf-eq{k}``    -- midpoint-of-adjacent-quantiles variant kept for
                     comparison; has no exact zero.
* ``fp4-e2m1``    -- 4-bit float, 2 exponent bits, 1 mantissa bit, bias 1,
                     subnormals, no inf/NaN encodings.
* ``fp4-e3m0``    -- 4-bit float, 3 exponent bits, bias 3; wider dynamic
                     range, coarser steps.
* ``int{k}``      -- symmetric integer grid {-(2**(k-1)-1) .. 2**(k-1)-1}
                     scaled to [-1, 1].

Families whose sign-magnitude layout yields two zeros (fp4, int) have
2**k - 1 distinct values.  Their decode tables still carry 2**k entries:
codes ``[0, n_emitted)`` are the strictly increasing emittable values and
spare tail codes duplicate exact 0.0 so decoding stays total.  Encoders
never produce spare codes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "Codebook",
    "Fp4Variant",
    "inv_normal_cdf",
    "make_nf_codebook",
    "make_nf_midpoint_codebook",
    "make_fp4_codebook",
    "make_int_codebook",
    "get_codebook",
    "CODEBOOK_NAMES",
]


# ---------------------------------------------------------------------------
# inverse normal CDF
# ---------------------------------------------------------------------------

# Rational approximation coefficients (central region and tails), refined
# below with one Newton step against math.erfc.  Absolute error after
# refinement is far below the 1e-9 contract on [1e-7, 1 - 1e-7].
_ICDF_A = (
    -3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
    1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00,
)
_ICDF_B = (
    -5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
    6.680131188771972e+01, -1.328068155288572e+01,
)
_ICDF_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
    -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00,
)
_ICDF_D = (
    7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
    3.754408661907416e+00,
)
_ICDF_P_LOW = 0.02425

_SQRT2 = math.sqrt(2.0)
_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _icdf_tail(q: float) -> float:
    # q = sqrt(-2 ln p) for the lower tail; returns a negative estimate.
    c = _ICDF_C
    d = _ICDF_D
    num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
    den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
    return num / den


def inv_normal_cdf(p: float) -> float:
    """Inverse CDF of the standard normal distribution.

    Rational approximation with one Newton refinement step against the
    complementary error function.  Raises ``ValueError`` outside the open
    interval (0, 1).
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"inv_normal_cdf domain is the open interval (0, 1), got {p!r}")
    if p == 0.5:
        return 0.0

    if p < _ICDF_P_LOW:
        x = _icdf_tail(math.sqrt(-2.0 * math.log(p)))
    elif p > 1.0 - _ICDF_P_LOW:
        x = -_icdf_tail(math.sqrt(-2.0 * math.log(1.0 - p)))
    else:
        a = _ICDF_A
        b = _ICDF_B
        q = p - 0.5
        r = q * q
        num = ((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]
        den = ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        x = num * q / den

    # Newton step: f(x) = Phi(x) - p, Phi via erfc for tail accuracy.
    err = 0.5 * math.erfc(-x / _SQRT2) - p
    pdf = math.exp(-0.5 * x * x) / _SQRT_2PI
    if pdf > 0.0:
        x -= err / pdf
    return x


# ---------------------------------------------------------------------------
# codebook container
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Codebook:
    """Decode table of a k-bit data type.

    ``values`` is indexed by code and has exactly ``2**bits`` entries.
    Codes ``[0, n_emitted)`` hold the strictly increasing emittable values;
    any tail codes are spares that duplicate exact 0.0 and are never produced
    by encoders (decode stays total over all bit patterns).
    """

    name: str
    bits: int
    values: np.ndarray
    n_emitted: int

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if vals.shape != (2 ** self.bits,):
            raise ValueError(
                f"decode table must have {2 ** self.bits} entries, got {vals.shape}"
            )
        emitted = vals[: self.n_emitted]
        if np.any(np.diff(emitted) <= 0):
            raise ValueError("emitted values must be strictly increasing")
        if np.max(np.abs(vals)) != 1.0:
            raise ValueError("codebook must be normalized to max |value| = 1")
        if np.any(vals[self.n_emitted:] != 0.0):
            raise ValueError("spare codes must duplicate exact 0.0")

    @property
    def emitted_values(self) -> np.ndarray:
        """The strictly increasing values encoders may produce."""
        return self.values[: self.n_emitted]

    @property
    def zero_code(self) -> int | None:
        """Code of exact 0.0 within the emitted range, or None."""
        idx = np.flatnonzero(self.emitted_values == 0.0)
        return int(idx[0]) if idx.size else None

    @property
    def max_gap(self) -> float:
        """Largest spacing between adjacent emitted values."""
        return float(np.max(np.diff(self.emitted_values)))

    def midpoints(self) -> np.ndarray:
        """Decision boundaries between adjacent emitted values."""
        ev = self.emitted_values
        return (ev[:-1] + ev[1:]) / 2.0


# ---------------------------------------------------------------------------
# normal-float families
# ---------------------------------------------------------------------------


def make_nf_codebook(k: int = 4) -> Codebook:
    """k-bit normal-float codebook.

    Asymmetric two-range construction: the positive half carries
    ``2**(k-1) + 1`` evenly spaced probabilities from 0.5 up to the offset

        omega = ((1 - 1/(2 * 2**k)) + (1 - 1/(2 * (2**k - 1)))) / 2

    mapped through the inverse normal CDF; the negative half mirrors
    ``2**(k-1)`` probabilities.  The two zero quantiles merge, giving 2**k
    strictly increasing values with exact 0 included, normalized so both
    endpoints are exactly -1 and +1.
    """
    if not 2 <= k <= 8:
        raise ValueError(f"k must be in [2, 8], got {k}")
    omega = 0.5 * ((1.0 - 1.0 / (2.0 * 2 ** k)) + (1.0 - 1.0 / (2.0 * (2 ** k - 1))))
    n_pos = 2 ** (k - 1) + 1
    n_neg = 2 ** (k - 1)
    pos = [inv_normal_cdf(p) for p in np.linspace(0.5, omega, n_pos)[1:]]
    neg = [-inv_normal_cdf(p) for p in np.linspace(0.5, omega, n_neg)[1:]]
    values = np.array(sorted(neg) + [0.0] + pos, dtype=np.float64)
    values /= values[-1]  # endpoints are +-inv_normal_cdf(omega): both map to +-1 exactly
    return Codebook(name=f"nf{k}", bits=k, values=values, n_emitted=2 ** k)


def make_nf_midpoint_codebook(k: int = 4) -> Codebook:
    """Quantile-midpoint normal codebook (the ``nf-eq4`` family).

    Averages adjacent pairs of the 2**k + 1 evenly spaced interior quantiles
    of N(0, 1) (positions j/(2**k + 2), j = 1 .. 2**k + 1), then normalizes
    by the largest magnitude.  Values are exactly pair-symmetric but the set
    contains no exact zero, which is why the asymmetric construction above
    is the default.  Kept for comparison.
    """
    if not 2 <= k <= 8:
        raise ValueError(f"k must be in [2, 8], got {k}")
    positions = np.arange(1, 2 ** k + 2, dtype=np.float64) / (2 ** k + 2.0)
    quantiles = np.array([inv_normal_cdf(p) for p in positions])
    mids = 0.5 * (quantiles[:-1] + quantiles[1:])
    values = mids / np.max(np.abs(mids))
    return Codebook(name=f"nf-eq{k}", bits=k, values=values, n_emitted=2 ** k)


# ---------------------------------------------------------------------------
# 4-bit float variants
# ---------------------------------------------------------------------------


class Fp4Variant(str, Enum):
    E2M1 = "e2m1"
    E3M0 = "e3m0"


def _fp_magnitudes(exp_bits: int, mant_bits: int, bias: int) -> list[float]:
    # All nonnegative magnitudes of a sign/exponent/mantissa layout with
    # subnormals and no inf/NaN encodings.
    mags = set()
    for e in range(2 ** exp_bits):
        for m in range(2 ** mant_bits):
            if e == 0:
                mag = (m / 2.0 ** mant_bits) * 2.0 ** (1 - bias)
            else:
                mag = (1.0 + m / 2.0 ** mant_bits) * 2.0 ** (e - bias)
            mags.add(mag)
    return sorted(mags)


def make_fp4_codebook(variant: Fp4Variant | str = Fp4Variant.E2M1) -> Codebook:
    """4-bit float codebook, E2M1 (bias 1) or E3M0 (bias 3).

    All 16 sign/exponent/mantissa patterns decode to finite values; the two
    zero patterns collapse, leaving 15 distinct values.  Codes are positions
    in the ascending value table; the spare 16th code duplicates 0.0.
    E2M1 value set (before normalization by 6):
    {0, 0.5, 1, 1.5, 2, 3, 4, 6} with signs.  E3M0 (before normalization by
    16): {0, 0.25, 0.5, 1, 2, 4, 8, 16} with signs.
    """
    variant = Fp4Variant(variant)
    if variant is Fp4Variant.E2M1:
        mags = _fp_magnitudes(exp_bits=2, mant_bits=1, bias=1)
    else:
        mags = _fp_magnitudes(exp_bits=3, mant_bits=0, bias=3)
    top = mags[-1]
    distinct = sorted({s * m / top for m in mags for s in (-1.0, 1.0)})
    values = np.array(distinct + [0.0], dtype=np.float64)  # one spare zero code
    return Codebook(
        name=f"fp4-{variant.value}", bits=4, values=values, n_emitted=len(distinct)
    )


# ---------------------------------------------------------------------------
# integer grid
# ---------------------------------------------------------------------------


def make_int_codebook(k: int = 4) -> Codebook:
    """Symmetric k-bit integer grid {-(2**(k-1)-1) .. 2**(k-1)-1} / (2**(k-1)-1).

    2**k - 1 distinct values; the spare code duplicates 0.0 and is never
    emitted, keeping decode total and the grid exactly symmetric.
    """
    if not 2 <= k <= 8:
        raise ValueError(f"k must be in [2, 8], got {k}")
    m = 2 ** (k - 1) - 1
    grid = np.arange(-m, m + 1, dtype=np.float64) / m
    values = np.concatenate([grid, [0.0]])
    return Codebook(name=f"int{k}", bits=k, values=values, n_emitted=2 ** k - 1)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

CODEBOOK_NAMES = ("nf4", "fp4-e2m1", "fp4-e3m0", "int4", "nf-eq4", "int8")


def get_codebook(name: str, bits: int | None = None) -> Codebook:
    """Resolve a codebook by its type string.

    ``name`` is a family spelling like ``nf4``, ``int8``, ``fp4-e2m1``,
    ``fp4-e3m0`` or ``nf-eq4``.  ``bits`` overrides the k implied by the
    name for the nf / nf-eq / int families.
    """
    name = name.lower()
    if name.startswith("fp4-"):
        if bits not in (None, 4):
            raise ValueError("fp4 variants are 4-bit only")
        return make_fp4_codebook(name.removeprefix("fp4-"))
    for family, maker in (("nf-eq", make_nf_midpoint_codebook),
                          ("nf", make_nf_codebook),
                          ("int", make_int_codebook)):
        if name.startswith(family):
            suffix = name[len(family):]
            if suffix and not suffix.isdigit():
                break
            k = bits if bits is not None else (int(suffix) if suffix else 4)
            if suffix and bits is not None and int(suffix) != bits:
                raise ValueError(f"type {name!r} conflicts with bits={bits}")
            return maker(k)
    raise ValueError(f"unknown codebook type {name!r}")
