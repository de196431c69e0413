"""Fixed little-endian container for quantized tensors.

Layout (all integers little-endian):

    magic      4 bytes   b"QLRT"
    version    u32       currently 1
    codebook   u16       family id (see _FAMILY_IDS)
    k          u8        bits per code
    flags      u8        bit0 = double-quantized constants
    ndim       u32
    dims       u64 * ndim
    blocksize  u32
    constants  section   raw float32 absmax per block, or the compressed
                         form: mu f32, blocksize2 u32, fp8 layout
                         (exp_bits u8, mant_bits u8, bias u8, pad u8),
                         c1 f32 * ceil(n_blocks / blocksize2),
                         codes u8 * n_blocks
    codes      packed code bytes (two per byte for k=4, one per byte
               otherwise)
    crc32      u32       zlib.crc32 of every preceding byte

Codebook values are not serialized; they are regenerated deterministically
from (family id, k) on load.  Section lengths derive from the header, so a
file has exactly one valid length; anything shorter raises
``TruncatedFileError`` and trailing garbage is reported the same way.
"""

from __future__ import annotations

import struct
import zlib
from typing import Any, BinaryIO

import numpy as np

from .blockquant import BlockQuantized
from .codebooks import Codebook, get_codebook
from .doublequant import DQConstants, Fp8Spec
from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    ContainerError,
    TruncatedFileError,
    UnsupportedVersionError,
)

__all__ = ["save", "load", "inspect_header", "MAGIC", "VERSION"]

MAGIC = b"QLRT"
VERSION = 1

_FAMILY_IDS = {"nf": 1, "fp4-e2m1": 2, "fp4-e3m0": 3, "int": 4, "nf-eq": 5}
_ID_FAMILIES = {v: k for k, v in _FAMILY_IDS.items()}

_HEADER = struct.Struct("<4sIHBBI")
_U32 = struct.Struct("<I")
_FLAG_DQ = 0x01


def _family_of(codebook: Codebook) -> str:
    name = codebook.name
    if name.startswith("fp4-"):
        return name
    for family in ("nf-eq", "nf", "int"):
        if name.startswith(family) and name[len(family):].isdigit():
            return family
    raise ValueError(f"codebook {name!r} has no container family id")


def save(q: BlockQuantized, path: str) -> int:
    """Write ``q`` to ``path``; returns the number of bytes written."""
    family = _family_of(q.codebook)
    flags = _FLAG_DQ if q.dq is not None else 0
    out = bytearray()
    out += _HEADER.pack(
        MAGIC, VERSION, _FAMILY_IDS[family], q.codebook.bits, flags, len(q.shape)
    )
    out += struct.pack(f"<{len(q.shape)}Q", *q.shape) if q.shape else b""
    out += _U32.pack(q.blocksize)

    if q.dq is not None:
        dq = q.dq
        out += struct.pack("<f", float(dq.mu))
        out += _U32.pack(dq.blocksize2)
        out += struct.pack(
            "<BBBB", dq.spec.exp_bits, dq.spec.mant_bits, dq.spec.bias, 0
        )
        out += dq.c1.astype("<f4").tobytes()
        out += dq.codes.astype(np.uint8).tobytes()
    else:
        assert q.constants is not None
        out += q.constants.astype("<f4").tobytes()

    out += q.codes.astype(np.uint8).tobytes()
    out += _U32.pack(zlib.crc32(bytes(out)))
    with open(path, "wb") as fh:
        fh.write(bytes(out))
    return len(out)


class _Reader:
    """Bounded reader that turns short reads into TruncatedFileError."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"file ends inside {what}: need {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def _parse(data: bytes, with_payload: bool) -> dict[str, Any]:
    r = _Reader(data)
    head = r.take(_HEADER.size, "header")
    magic, version, family_id, k, flags, ndim = _HEADER.unpack(head)
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    family = _ID_FAMILIES.get(family_id)
    if family is None:
        raise ContainerError(f"unknown codebook family id {family_id}")

    dims = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, "dims")) if ndim else ()
    blocksize = _U32.unpack(r.take(4, "blocksize"))[0]
    if blocksize < 1:
        raise ContainerError("blocksize field must be >= 1")
    numel = 1
    for d in dims:
        numel *= d
    n_blocks = (numel + blocksize - 1) // blocksize

    info: dict[str, Any] = {
        "version": version,
        "family": family,
        "k": k,
        "flags": flags,
        "double_quant": bool(flags & _FLAG_DQ),
        "shape": tuple(int(d) for d in dims),
        "blocksize": int(blocksize),
        "numel": int(numel),
        "n_blocks": int(n_blocks),
    }

    dq = None
    constants = None
    if flags & _FLAG_DQ:
        mu = struct.unpack("<f", r.take(4, "dq mu"))[0]
        blocksize2 = _U32.unpack(r.take(4, "dq blocksize2"))[0]
        if blocksize2 < 1:
            raise ContainerError("dq blocksize2 field must be >= 1")
        exp_bits, mant_bits, bias, _pad = struct.unpack(
            "<BBBB", r.take(4, "fp8 layout")
        )
        n2 = (n_blocks + blocksize2 - 1) // blocksize2
        c1 = np.frombuffer(r.take(4 * n2, "dq c1"), dtype="<f4").copy()
        codes2 = np.frombuffer(r.take(n_blocks, "dq codes"), dtype=np.uint8).copy()
        info["blocksize2"] = int(blocksize2)
        info["fp8"] = f"e{exp_bits}m{mant_bits}b{bias}"
        if with_payload:
            dq = DQConstants(
                mu=np.float32(mu),
                blocksize2=int(blocksize2),
                spec=Fp8Spec(exp_bits=exp_bits, mant_bits=mant_bits, bias=bias),
                c1=c1,
                codes=codes2,
            )
    else:
        raw = r.take(4 * n_blocks, "constants")
        if with_payload:
            constants = np.frombuffer(raw, dtype="<f4").copy()

    padded = n_blocks * blocksize
    code_bytes = (padded + 1) // 2 if k == 4 else padded
    codes_raw = r.take(code_bytes, "codes")

    crc_stored = _U32.unpack(r.take(4, "crc32"))[0]
    if r.pos != len(data):
        raise TruncatedFileError(
            f"{len(data) - r.pos} unexpected trailing bytes after crc32"
        )
    crc_actual = zlib.crc32(data[: len(data) - 4])
    info["crc_ok"] = crc_stored == crc_actual
    if with_payload and not info["crc_ok"]:
        raise ChecksumMismatchError(
            f"crc32 mismatch: stored {crc_stored:#010x}, computed {crc_actual:#010x}"
        )

    if with_payload:
        name = family if family.startswith("fp4-") else f"{family}{k}"
        codebook = get_codebook(name, bits=None if family.startswith("fp4-") else k)
        info["quantized"] = BlockQuantized(
            shape=tuple(int(d) for d in dims),
            blocksize=int(blocksize),
            codebook=codebook,
            codes=np.frombuffer(codes_raw, dtype=np.uint8).copy(),
            constants=constants,
            dq=dq,
        )
    info["codebook"] = family if family.startswith("fp4-") else f"{family}{k}"
    return info


def load(path: str) -> BlockQuantized:
    """Read a container; raises the distinct error classes on bad magic,
    version mismatch, truncation, and checksum failure."""
    with open(path, "rb") as fh:
        data = fh.read()
    return _parse(data, with_payload=True)["quantized"]


def inspect_header(path: str) -> dict[str, Any]:
    """Header fields plus a crc_ok flag, without materializing the tensor."""
    with open(path, "rb") as fh:
        data = fh.read()
    info = _parse(data, with_payload=False)
    info["file_bytes"] = len(data)
    return info
