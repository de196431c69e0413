"""Serialized container: layout stability, round trips, error taxonomy."""

import struct

import numpy as np
import pytest

from qlrt.blockquant import dequantize, quantize
from qlrt.codebooks import get_codebook
from qlrt.container import MAGIC, VERSION, inspect_header, load, save
from qlrt.doublequant import bits_per_param
from qlrt.errors import (
    BadMagicError,
    ChecksumMismatchError,
    ContainerError,
    TruncatedFileError,
    UnsupportedVersionError,
)

HEADER_BYTES = 16  # magic + version + family + k + flags + ndim
FIXED_DQ_SUBHEADER = 12  # mu + blocksize2 + fp8 layout
CRC_BYTES = 4


def golden_tensor():
    return np.random.default_rng(42).normal(size=(8, 16))


def save_golden(path):
    q = quantize(golden_tensor(), get_codebook("nf4"), blocksize=64, double_quant=True)
    return save(q, str(path))


# ---------------------------------------------------------------------------
# round trips
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("name,dq", [
    ("nf4", False),
    ("nf4", True),
    ("int8", False),
    ("fp4-e3m0", True),
    ("nf-eq4", False),
])
def test_round_trip(tmp_path, rng, name, dq):
    x = rng.normal(size=(6, 50))
    cb = get_codebook(name)
    q = quantize(x, cb, blocksize=64, double_quant=dq)
    path = tmp_path / "t.qlrt"
    n = save(q, str(path))
    assert n == path.stat().st_size

    loaded = load(str(path))
    assert loaded.shape == (6, 50)
    assert loaded.blocksize == 64
    assert loaded.codebook.name == name
    assert loaded.codebook.bits == cb.bits
    assert np.array_equal(loaded.codes, q.codes)
    if dq:
        assert loaded.constants is None
        assert loaded.dq.mu == q.dq.mu
        assert loaded.dq.blocksize2 == q.dq.blocksize2
        assert loaded.dq.spec == q.dq.spec
        assert np.array_equal(loaded.dq.c1, q.dq.c1)
        assert np.array_equal(loaded.dq.codes, q.dq.codes)
    else:
        assert np.array_equal(loaded.constants, q.constants)
    assert np.array_equal(dequantize(loaded), dequantize(q))


def test_save_load_save_is_byte_stable(tmp_path, rng):
    x = rng.normal(size=333)
    q = quantize(x, get_codebook("nf4"), blocksize=64, double_quant=True)
    p1, p2 = tmp_path / "a.qlrt", tmp_path / "b.qlrt"
    save(q, str(p1))
    save(load(str(p1)), str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_scalar_shape(tmp_path):
    q = quantize(np.float64(0.5), get_codebook("nf4"))
    save(q, str(tmp_path / "s.qlrt"))
    loaded = load(str(tmp_path / "s.qlrt"))
    assert loaded.shape == ()
    assert dequantize(loaded).shape == ()


def test_golden_file_byte_identical(tmp_path, data_dir):
    # A fixed recipe must keep producing the committed bytes: this pins the
    # little-endian layout, field order, packing, and crc across changes.
    fresh = tmp_path / "fresh.qlrt"
    save_golden(fresh)
    assert fresh.read_bytes() == (data_dir / "golden.qlrt").read_bytes()


def test_golden_file_loads(data_dir):
    q = load(str(data_dir / "golden.qlrt"))
    assert q.shape == (8, 16)
    assert q.codebook.name == "nf4"
    assert q.dq is not None
    err = np.abs(dequantize(q) - golden_tensor())
    assert float(err.max()) < 0.5


# ---------------------------------------------------------------------------
# header inspection and accounting
# ---------------------------------------------------------------------------


def test_inspect_header_fields(tmp_path, rng):
    x = rng.normal(size=(128, 128))
    q = quantize(x, get_codebook("nf4"), blocksize=64, double_quant=True)
    path = tmp_path / "t.qlrt"
    n = save(q, str(path))
    info = inspect_header(str(path))
    assert info["version"] == VERSION
    assert info["codebook"] == "nf4"
    assert info["k"] == 4
    assert info["double_quant"] is True
    assert info["shape"] == (128, 128)
    assert info["blocksize"] == 64
    assert info["numel"] == 128 * 128
    assert info["n_blocks"] == 256
    assert info["blocksize2"] == 256
    assert info["fp8"] == "e4m3b7"
    assert info["crc_ok"] is True
    assert info["file_bytes"] == n


def test_payload_bytes_match_bits_accounting(tmp_path, rng):
    # For block-aligned 1-d tensors the variable payload equals
    # numel * bits_per_param / 8 exactly; only the fixed header, the 12-byte
    # compressed-constants subheader, and the crc sit outside it.
    numel = 64 * 256
    x = rng.normal(size=numel)

    q = quantize(x, get_codebook("nf4"), blocksize=64, double_quant=True)
    path = tmp_path / "dq.qlrt"
    n = save(q, str(path))
    fixed = HEADER_BYTES + 8 + 4 + FIXED_DQ_SUBHEADER + CRC_BYTES
    assert n - fixed == numel * bits_per_param(4, 64, dq=(256, 8)) / 8

    q = quantize(x, get_codebook("nf4"), blocksize=64)
    n = save(q, str(tmp_path / "plain.qlrt"))
    fixed = HEADER_BYTES + 8 + 4 + CRC_BYTES
    assert n - fixed == numel * bits_per_param(4, 64) / 8


# ---------------------------------------------------------------------------
# error taxonomy
# ---------------------------------------------------------------------------


@pytest.fixture
def saved(tmp_path, rng):
    q = quantize(rng.normal(size=200), get_codebook("nf4"), blocksize=64)
    path = tmp_path / "t.qlrt"
    save(q, str(path))
    return path


def rewrite(path, data):
    path.write_bytes(data)
    return str(path)


def test_bad_magic(saved):
    data = bytearray(saved.read_bytes())
    data[0] ^= 0xFF
    with pytest.raises(BadMagicError):
        load(rewrite(saved, bytes(data)))
    with pytest.raises(BadMagicError):
        inspect_header(str(saved))


def test_unsupported_version(saved):
    data = bytearray(saved.read_bytes())
    data[4:8] = struct.pack("<I", VERSION + 1)
    with pytest.raises(UnsupportedVersionError):
        load(rewrite(saved, bytes(data)))


def test_unknown_family_id(saved):
    data = bytearray(saved.read_bytes())
    data[8:10] = struct.pack("<H", 999)
    with pytest.raises(ContainerError, match="family"):
        load(rewrite(saved, bytes(data)))


def test_zero_blocksize_rejected(saved):
    data = bytearray(saved.read_bytes())
    offset = HEADER_BYTES + 8  # 1-d tensor: one u64 dim
    data[offset:offset + 4] = struct.pack("<I", 0)
    with pytest.raises(ContainerError, match="blocksize"):
        load(rewrite(saved, bytes(data)))


@pytest.mark.parametrize("keep", [3, 10, 40, -1])
def test_truncation(saved, keep):
    data = saved.read_bytes()
    with pytest.raises(TruncatedFileError, match="ends inside"):
        load(rewrite(saved, data[:keep]))


def test_trailing_garbage(saved):
    data = saved.read_bytes() + b"\x00\x01"
    with pytest.raises(TruncatedFileError, match="trailing"):
        load(rewrite(saved, data))


def test_checksum_mismatch(saved):
    data = bytearray(saved.read_bytes())
    data[-10] ^= 0x01  # flip a bit inside the code section
    rewrite(saved, bytes(data))
    with pytest.raises(ChecksumMismatchError, match="crc32"):
        load(str(saved))
    # header inspection reports rather than raises
    assert inspect_header(str(saved))["crc_ok"] is False


def test_empty_file(tmp_path):
    path = tmp_path / "empty.qlrt"
    path.write_bytes(b"")
    with pytest.raises(TruncatedFileError):
        load(str(path))


def test_error_hierarchy():
    for exc in (BadMagicError, UnsupportedVersionError, TruncatedFileError,
                ChecksumMismatchError):
        assert issubclass(exc, ContainerError)


def test_magic_constant():
    assert MAGIC == b"QLRT"
