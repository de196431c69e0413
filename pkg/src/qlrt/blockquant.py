"""Block-wise absmax quantization against a codebook.

The tensor is flattened row-major and split into blocks of ``blocksize``
elements.  Each block is scaled by the reciprocal of its absolute maximum,
elements are mapped to the nearest codebook value (ties round away from
zero, mirroring round-to-nearest semantics of the scaled integer case), and
the per-block absmax is kept as a 32-bit float constant.  Dequantization is
the inverse: ``constant * values[code]``.

A final partial block is padded logically; padding codes are the codebook's
exact-zero code (or the code nearest zero for zero-free codebooks) and are
dropped on dequantization.  Padding never influences the block constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebooks import Codebook
from .doublequant import DQConstants, Fp8Spec, dq_compress, dq_decompress
from .errors import CorruptDataError

__all__ = [
    "BlockQuantized",
    "quantize",
    "dequantize",
    "pack_codes",
    "unpack_codes",
]


@dataclass
class BlockQuantized:
    """Quantized tensor: packed codes + per-block constants + codebook.

    ``constants`` holds the float32 absmax per block when ``dq`` is None;
    under double quantization the compressed form in ``dq`` replaces it.
    ``codes`` is packed per :func:`pack_codes` (one code per byte for
    k not in {4, 8}).
    """

    shape: tuple[int, ...]
    blocksize: int
    codebook: Codebook
    codes: np.ndarray
    constants: np.ndarray | None
    dq: DQConstants | None = None

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def n_blocks(self) -> int:
        return (self.numel + self.blocksize - 1) // self.blocksize

    def block_constants(self) -> np.ndarray:
        """Per-block constants as used for reconstruction (decompressed
        when double-quantized)."""
        if self.dq is not None:
            return dq_decompress(self.dq)
        assert self.constants is not None
        return self.constants

    def unpacked_codes(self) -> np.ndarray:
        """One uint8 code per element of the padded block grid."""
        k = self.codebook.bits
        padded = self.n_blocks * self.blocksize
        if k in (4, 8):
            return unpack_codes(self.codes, k, padded)
        return self.codes[:padded].copy()


# ---------------------------------------------------------------------------
# code packing
# ---------------------------------------------------------------------------


def pack_codes(codes: np.ndarray, k: int) -> np.ndarray:
    """Pack k-bit codes into bytes, k in {4, 8}.

    k=4 packs two codes per byte, low nibble holding the even index; an odd
    trailing code leaves the high nibble zero.  k=8 is a byte copy.
    """
    if k not in (4, 8):
        raise ValueError(f"pack_codes supports k in {{4, 8}}, got {k}")
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= 2 ** k):
        raise ValueError(f"codes out of range for k={k}")
    codes = codes.astype(np.uint8)
    if k == 8:
        return codes.copy()
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    pairs = codes.reshape(-1, 2)
    return (pairs[:, 0] | (pairs[:, 1] << 4)).astype(np.uint8)


def unpack_codes(packed: np.ndarray, k: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns exactly ``count`` codes."""
    if k not in (4, 8):
        raise ValueError(f"unpack_codes supports k in {{4, 8}}, got {k}")
    packed = np.asarray(packed, dtype=np.uint8)
    if k == 8:
        if packed.size < count:
            raise ValueError("packed buffer shorter than requested count")
        return packed[:count].copy()
    if packed.size * 2 < count:
        raise ValueError("packed buffer shorter than requested count")
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:count]


# ---------------------------------------------------------------------------
# quantize / dequantize
# ---------------------------------------------------------------------------


def _nearest_codes(normalized: np.ndarray, codebook: Codebook) -> np.ndarray:
    # Nearest emitted value; exact midpoint ties resolve away from zero
    # (zero itself resolves toward the positive side).
    mids = codebook.midpoints()
    hi = np.searchsorted(mids, normalized, side="right")
    lo = np.searchsorted(mids, normalized, side="left")
    return np.where(normalized >= 0, hi, lo).astype(np.uint8)


def quantize(
    x: np.ndarray,
    codebook: Codebook,
    blocksize: int = 64,
    double_quant: bool = False,
    blocksize2: int = 256,
    fp8_spec: Fp8Spec | None = None,
) -> BlockQuantized:
    """Quantize a tensor block-wise against ``codebook``.

    Rejects non-finite inputs (reporting the offending flat index).  Codes
    are chosen against the stored float32 constants so the round-trip error
    bound |x - deq(x)| <= constant * max_gap / 2 holds exactly as stored.
    With ``double_quant`` the first-level constants are further compressed
    (see :mod:`qlrt.doublequant`); codes are unaffected.
    """
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if blocksize < 1:
        raise ValueError(f"blocksize must be >= 1, got {blocksize}")
    flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise ValueError(f"non-finite input at flat index {int(bad[0])}")

    numel = flat.size
    n_blocks = (numel + blocksize - 1) // blocksize
    padded = np.zeros(n_blocks * blocksize, dtype=np.float64)
    padded[:numel] = flat
    blocks = padded.reshape(n_blocks, blocksize)

    # float32 constants first, then normalize against them, so stored
    # constants and codes are mutually consistent.
    constants = np.abs(blocks).max(axis=1).astype(np.float32)
    scale = constants.astype(np.float64)
    nonzero = scale > 0.0
    normalized = np.zeros_like(blocks)
    np.divide(blocks, scale[:, None], out=normalized, where=nonzero[:, None])

    codes = _nearest_codes(normalized, codebook)
    zero_code = codebook.zero_code
    pad_code = zero_code if zero_code is not None else _nearest_codes(
        np.zeros(1), codebook
    )[0]
    if numel < padded.size:
        codes.reshape(-1)[numel:] = pad_code
    codes.reshape(-1)[~np.repeat(nonzero, blocksize)] = pad_code

    k = codebook.bits
    flat_codes = codes.reshape(-1)
    packed = pack_codes(flat_codes, k) if k in (4, 8) else flat_codes.copy()

    dq = None
    if double_quant:
        dq = dq_compress(constants, blocksize2=blocksize2, spec=fp8_spec or Fp8Spec())
    return BlockQuantized(
        shape=tuple(x.shape),
        blocksize=blocksize,
        codebook=codebook,
        codes=packed,
        constants=None if double_quant else constants,
        dq=dq,
    )


def dequantize(q: BlockQuantized) -> np.ndarray:
    """Reconstruct ``constant * values[code]`` per element, float64,
    original shape.  Raises :class:`CorruptDataError` on out-of-range codes."""
    codes = q.unpacked_codes()
    if codes.size and codes.max() >= q.codebook.values.size:
        raise CorruptDataError(
            f"code {int(codes.max())} out of range for k={q.codebook.bits}"
        )
    constants = q.block_constants().astype(np.float64)
    if constants.shape != (q.n_blocks,):
        raise CorruptDataError(
            f"expected {q.n_blocks} block constants, got {constants.shape}"
        )
    vals = q.codebook.values[codes].reshape(q.n_blocks, q.blocksize)
    out = vals * constants[:, None]
    return out.reshape(-1)[: q.numel].reshape(q.shape)
