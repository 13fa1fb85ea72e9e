"""Block-wise absmax quantization for 4..8 bit activations and gradients.

Three value grids are supported:

* ``SYMMETRIC_LINEAR``: ``2**b - 1`` evenly spaced levels ``k * scale / L`` with
  ``L = 2**(b-1) - 1`` and ``k`` in ``[-L, L]``.  Works for every width 4..8.
* ``FP4_E2M1``: the 1-2-1 minifloat grid ``{0, .5, 1, 1.5, 2, 3, 4, 6}`` x sign.
* ``FP8_E4M3``: the 1-4-3 minifloat grid (max finite 448, no infinities).

Every block of ``block_size`` consecutive elements (the last block may be
partial) carries one scale, the block absmax rounded up to float32.  The grid
maximum lands exactly on the scale, so the absmax element always survives the
roundtrip.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

__all__ = [
    "CodecKind",
    "Fp8Value",
    "NonFiniteError",
    "QuantizedTensor",
    "FP8_MAX",
    "FP4_MAX",
    "fp8_encode",
    "fp8_decode",
    "fp8_encode_array",
    "fp8_decode_array",
    "quantize_blockwise",
    "dequantize_blockwise",
    "encode_with_scales",
    "relative_perturbation",
    "quantization_step",
    "roundtrip",
    "pack_codes",
    "unpack_codes",
    "dump",
    "load",
]

DEFAULT_BLOCK_SIZE = 128


class CodecKind(enum.IntEnum):
    SYMMETRIC_LINEAR = 0
    FP4_E2M1 = 1
    FP8_E4M3 = 2

    @classmethod
    def parse(cls, value: Union[str, int, "CodecKind"]) -> "CodecKind":
        if isinstance(value, CodecKind):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).strip().upper().replace("-", "_")
        aliases = {"LINEAR": "SYMMETRIC_LINEAR", "FP4": "FP4_E2M1", "E2M1": "FP4_E2M1",
                   "FP8": "FP8_E4M3", "E4M3": "FP8_E4M3"}
        return cls[aliases.get(key, key)]


class NonFiniteError(ValueError):
    """Raised when a tensor handed to the codec holds NaN or inf."""

    def __init__(self, block_index: int, element_index: int):
        self.block_index = block_index
        self.element_index = element_index
        super().__init__(
            f"non-finite value at element {element_index} (block {block_index})")


# ---------------------------------------------------------------------------
# minifloat grids
# ---------------------------------------------------------------------------

def _minifloat_magnitudes(exp_bits: int, man_bits: int, bias: int, nan_at_top: bool) -> np.ndarray:
    """Non-negative values of a sign-magnitude minifloat, indexed by code & ~sign."""
    out = []
    for e in range(2 ** exp_bits):
        for m in range(2 ** man_bits):
            if e == 0:
                out.append((m / 2 ** man_bits) * 2.0 ** (1 - bias))
            else:
                out.append((1 + m / 2 ** man_bits) * 2.0 ** (e - bias))
    if nan_at_top:
        out = out[:-1]  # S.1111.111 is NaN in E4M3
    return np.array(out, dtype=np.float64)


_FP8_MAGNITUDES = _minifloat_magnitudes(4, 3, 7, nan_at_top=True)
_FP4_MAGNITUDES = _minifloat_magnitudes(2, 1, 1, nan_at_top=False)
FP8_MAX = float(_FP8_MAGNITUDES[-1])  # 448
FP4_MAX = float(_FP4_MAGNITUDES[-1])  # 6
_FP8_NAN = 0x7F

_FP8_DECODE = np.empty(256, dtype=np.float64)
_FP8_DECODE[:127] = _FP8_MAGNITUDES
_FP8_DECODE[128:255] = -_FP8_MAGNITUDES
_FP8_DECODE[0x7F] = np.nan
_FP8_DECODE[0xFF] = np.nan
_FP8_DECODE[0x80] = -0.0


def _round_to_grid(mag: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Index of the nearest grid value, ties to the even index.

    Magnitudes above the grid saturate to the last index.
    """
    idx = np.searchsorted(grid, mag, side="left")
    idx = np.clip(idx, 1, len(grid) - 1)
    lo = grid[idx - 1]
    hi = grid[idx]
    d_lo = mag - lo
    d_hi = hi - mag
    take_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (idx % 2 == 0))
    return np.where(take_hi, idx, idx - 1).astype(np.int64)


@dataclass(frozen=True)
class Fp8Value:
    """One E4M3 byte plus the overflow flag raised while producing it."""

    byte: int
    overflow: bool = False

    def __post_init__(self):
        if not 0 <= self.byte <= 0xFF:
            raise ValueError(f"E4M3 byte out of range: {self.byte}")

    @property
    def is_nan(self) -> bool:
        return (self.byte & 0x7F) == _FP8_NAN

    def __float__(self) -> float:
        return fp8_decode(self)


def fp8_encode_array(x) -> tuple[np.ndarray, np.ndarray]:
    """Encode reals to E4M3 bytes (nearest, ties to even, saturating).

    Returns ``(codes, overflow)`` where ``overflow`` marks elements whose
    magnitude exceeded 448 and were pinned to the max finite value.
    """
    x = np.asarray(x, dtype=np.float64)
    nan = np.isnan(x)
    mag = np.where(nan, 0.0, np.abs(x))
    overflow = mag > FP8_MAX
    idx = _round_to_grid(mag, _FP8_MAGNITUDES)
    codes = (idx | (np.signbit(x).astype(np.int64) << 7)).astype(np.uint8)
    codes[nan] = _FP8_NAN
    return codes, overflow


def fp8_decode_array(codes) -> np.ndarray:
    return _FP8_DECODE[np.asarray(codes, dtype=np.uint8)]


def fp8_encode(v: float) -> Fp8Value:
    codes, overflow = fp8_encode_array(np.array([v], dtype=np.float64))
    return Fp8Value(int(codes[0]), bool(overflow[0]))


def fp8_decode(b: Union[Fp8Value, int]) -> float:
    byte = b.byte if isinstance(b, Fp8Value) else int(b)
    return float(_FP8_DECODE[byte])


# ---------------------------------------------------------------------------
# quantized tensor
# ---------------------------------------------------------------------------

def _check_kind(bit_width: int, codec_kind: CodecKind) -> None:
    if not 4 <= bit_width <= 8:
        raise ValueError(f"bit_width must be in [4, 8], got {bit_width}")
    if codec_kind == CodecKind.FP8_E4M3 and bit_width != 8:
        raise ValueError("FP8_E4M3 requires bit_width = 8")
    if codec_kind == CodecKind.FP4_E2M1 and bit_width != 4:
        raise ValueError("FP4_E2M1 requires bit_width = 4")


def _grid_max(bit_width: int, codec_kind: CodecKind) -> float:
    if codec_kind == CodecKind.FP8_E4M3:
        return FP8_MAX
    if codec_kind == CodecKind.FP4_E2M1:
        return FP4_MAX
    return float(2 ** (bit_width - 1) - 1)


@dataclass(eq=False)
class QuantizedTensor:
    """Block-wise quantized payload: one code per element, one scale per block."""

    codes: np.ndarray
    scales: np.ndarray
    bit_width: int
    block_size: int
    shape: tuple
    codec_kind: CodecKind = CodecKind.SYMMETRIC_LINEAR
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.codec_kind = CodecKind.parse(self.codec_kind)
        _check_kind(self.bit_width, self.codec_kind)
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.shape = tuple(int(s) for s in self.shape)
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8).reshape(-1)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32).reshape(-1)
        if self.codes.size != self.num_elements:
            raise ValueError(
                f"{self.codes.size} codes for shape {self.shape} ({self.num_elements} elements)")
        if self.scales.size != self.num_blocks:
            raise ValueError(f"expected {self.num_blocks} scales, got {self.scales.size}")

    @property
    def num_elements(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def num_blocks(self) -> int:
        return -(-self.num_elements // self.block_size)

    @property
    def code_bytes(self) -> int:
        return -(-self.num_elements * self.bit_width // 8)

    @property
    def scale_bytes(self) -> int:
        return 4 * self.num_blocks

    @property
    def nbytes(self) -> int:
        return self.code_bytes + self.scale_bytes

    def dequantize(self) -> np.ndarray:
        return dequantize_blockwise(self)

    def block_slice(self, start: int, stop: int) -> "QuantizedTensor":
        """Flat sub-range ``[start, stop)``; ``start`` must sit on a block boundary."""
        if start % self.block_size and start != self.num_elements:
            raise ValueError("slice start must be block aligned")
        stop = min(stop, self.num_elements)
        b0 = start // self.block_size
        b1 = -(-stop // self.block_size)
        return QuantizedTensor(self.codes[start:stop].copy(), self.scales[b0:b1].copy(),
                               self.bit_width, self.block_size, (stop - start,), self.codec_kind)

    def validate(self) -> None:
        """Check the full invariant set (codes in range, zero scales <=> zero blocks)."""
        if self.codes.size and int(self.codes.max()) >= 2 ** self.bit_width:
            raise ValueError("code exceeds 2**bit_width")
        if np.any(self.scales < 0) or not np.all(np.isfinite(self.scales)):
            raise ValueError("scales must be finite and non-negative")
        values = self.dequantize().reshape(-1)
        pad = self.num_blocks * self.block_size - values.size
        blocks = np.pad(np.abs(values), (0, pad)).reshape(self.num_blocks, self.block_size)
        zero_block = ~np.any(blocks > 0, axis=1)
        if np.any(zero_block != (self.scales == 0)):
            raise ValueError("scale is zero for a non-zero block or vice versa")

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (self.bit_width == other.bit_width and self.block_size == other.block_size
                and self.shape == other.shape and self.codec_kind == other.codec_kind
                and np.array_equal(self.codes, other.codes)
                and np.array_equal(self.scales.view(np.uint32), other.scales.view(np.uint32)))

    __hash__ = None

    # binary form --------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        _write(self, buf)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantizedTensor":
        return _read(io.BytesIO(data))


def _block_view(flat: np.ndarray, block_size: int) -> np.ndarray:
    n = flat.size
    nb = -(-n // block_size)
    pad = nb * block_size - n
    return np.pad(flat, (0, pad)).reshape(nb, block_size)


def _float32_ceil(values: np.ndarray) -> np.ndarray:
    s = values.astype(np.float32)
    low = s.astype(np.float64) < values
    s[low] = np.nextafter(s[low], np.float32(np.inf))
    return s


def _encode(flat: np.ndarray, scales: np.ndarray, bit_width: int, block_size: int,
            codec_kind: CodecKind) -> tuple[np.ndarray, np.ndarray]:
    """Codes for ``flat`` under fixed per-block ``scales`` plus an overflow mask."""
    n = flat.size
    per_elem = np.repeat(scales.astype(np.float64), block_size)[:n]
    top = _grid_max(bit_width, codec_kind)
    safe = np.where(per_elem > 0, per_elem, 1.0)
    u = (flat * top) / safe
    u = np.where(per_elem > 0, u, np.where(flat == 0, 0.0, np.copysign(np.inf, flat)))
    overflow = np.abs(u) > top
    if codec_kind == CodecKind.SYMMETRIC_LINEAR:
        k = np.clip(np.rint(u), -top, top).astype(np.int64)
        codes = (k + int(top)).astype(np.uint8)
    else:
        grid = _FP8_MAGNITUDES if codec_kind == CodecKind.FP8_E4M3 else _FP4_MAGNITUDES
        sign_bit = 7 if codec_kind == CodecKind.FP8_E4M3 else 3
        idx = _round_to_grid(np.minimum(np.abs(u), top), grid)
        # -0 stays +0: a zero code must mean the value zero for every block
        neg = (u < 0) & (idx > 0)
        codes = (idx | (neg.astype(np.int64) << sign_bit)).astype(np.uint8)
    return codes, overflow


def _decode(codes: np.ndarray, scales: np.ndarray, bit_width: int, block_size: int,
            codec_kind: CodecKind) -> np.ndarray:
    n = codes.size
    per_elem = np.repeat(scales.astype(np.float64), block_size)[:n]
    top = _grid_max(bit_width, codec_kind)
    if codec_kind == CodecKind.SYMMETRIC_LINEAR:
        level = codes.astype(np.float64) - top
    elif codec_kind == CodecKind.FP8_E4M3:
        level = _FP8_DECODE[codes]
    else:
        mag = _FP4_MAGNITUDES[codes & 0x7]
        level = np.where(codes & 0x8, -mag, mag)
    # level*scale is exact in float64 (few significant bits each), so the top
    # level returns the scale bit-for-bit
    return (level * per_elem) / top


def quantize_blockwise(x, bit_width: int = 4, block_size: int = DEFAULT_BLOCK_SIZE,
                       codec_kind: Union[CodecKind, str] = CodecKind.SYMMETRIC_LINEAR
                       ) -> QuantizedTensor:
    """Quantize ``x`` block by block with per-block absmax scaling.

    Raises :class:`NonFiniteError` naming the first block holding NaN/inf.
    """
    codec_kind = CodecKind.parse(codec_kind)
    _check_kind(bit_width, codec_kind)
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    bad = ~np.isfinite(flat)
    if bad.any():
        i = int(np.argmax(bad))
        raise NonFiniteError(i // block_size, i)
    if flat.size == 0:
        return QuantizedTensor(np.zeros(0, np.uint8), np.zeros(0, np.float32),
                               bit_width, block_size, x.shape, codec_kind)
    absmax = np.abs(_block_view(flat, block_size)).max(axis=1)
    # blocks whose absmax underflows float32 are flushed to zero
    absmax[absmax < np.finfo(np.float32).tiny] = 0.0
    scales = _float32_ceil(absmax)
    flat = np.where(np.repeat(scales, block_size)[:flat.size] > 0, flat, 0.0)
    codes, _ = _encode(flat, scales, bit_width, block_size, codec_kind)
    return QuantizedTensor(codes, scales, bit_width, block_size, x.shape, codec_kind)


def dequantize_blockwise(q: QuantizedTensor) -> np.ndarray:
    values = _decode(q.codes, q.scales, q.bit_width, q.block_size, q.codec_kind)
    return values.reshape(q.shape)


def encode_with_scales(x, like: QuantizedTensor, scales=None) -> tuple[QuantizedTensor, np.ndarray]:
    """Re-encode ``x`` on the grid of ``like`` keeping fixed scales (no rescaling).

    Values beyond a block's range saturate; the returned mask marks them.
    """
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    scales = like.scales if scales is None else np.asarray(scales, dtype=np.float32)
    codes, overflow = _encode(flat, scales, like.bit_width, like.block_size, like.codec_kind)
    q = QuantizedTensor(codes, scales.copy(), like.bit_width, like.block_size, like.shape,
                        like.codec_kind)
    return q, overflow


def roundtrip(x, bit_width: int = 4, block_size: int = DEFAULT_BLOCK_SIZE,
              codec_kind: Union[CodecKind, str] = CodecKind.SYMMETRIC_LINEAR) -> np.ndarray:
    return dequantize_blockwise(quantize_blockwise(x, bit_width, block_size, codec_kind))


def relative_perturbation(x, q: QuantizedTensor) -> np.ndarray:
    """Per-element ``(dequant - x) / x``; zero where ``x`` is zero."""
    x = np.asarray(x, dtype=np.float64)
    d = dequantize_blockwise(q)
    out = np.zeros_like(x)
    nz = x != 0
    out[nz] = (d[nz] - x[nz]) / x[nz]
    return out


def quantization_step(q: QuantizedTensor) -> np.ndarray:
    """Widest gap between adjacent grid values, per block, in real units."""
    top = _grid_max(q.bit_width, q.codec_kind)
    if q.codec_kind == CodecKind.SYMMETRIC_LINEAR:
        gap = 1.0
    else:
        grid = _FP8_MAGNITUDES if q.codec_kind == CodecKind.FP8_E4M3 else _FP4_MAGNITUDES
        gap = float(np.diff(grid).max())
    return q.scales.astype(np.float64) * gap / top


# ---------------------------------------------------------------------------
# serialization: "AGQT" little-endian dump
# ---------------------------------------------------------------------------

MAGIC = b"AGQT"
FORMAT_VERSION = 1


def pack_codes(codes: np.ndarray, bit_width: int) -> bytes:
    """Pack codes LSB-first at ``bit_width`` bits each, zero padded to a byte."""
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1, 1)
    bits = np.unpackbits(codes, axis=1, bitorder="little")[:, :bit_width]
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(data: bytes, bit_width: int, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    bits = bits[: count * bit_width].reshape(count, bit_width)
    full = np.zeros((count, 8), dtype=np.uint8)
    full[:, :bit_width] = bits
    return np.packbits(full, axis=1, bitorder="little").reshape(-1)


def _write(q: QuantizedTensor, fh: BinaryIO) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<HBBIB", FORMAT_VERSION, int(q.codec_kind), q.bit_width,
                         q.block_size, len(q.shape)))
    fh.write(struct.pack(f"<{len(q.shape)}Q", *q.shape))
    fh.write(q.scales.astype("<f4").tobytes())
    fh.write(pack_codes(q.codes, q.bit_width))


def _read(fh: BinaryIO) -> QuantizedTensor:
    if fh.read(4) != MAGIC:
        raise ValueError("not an AGQT dump (bad magic)")
    version, kind, bit_width, block_size, ndim = struct.unpack("<HBBIB", fh.read(9))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported AGQT version {version}")
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    n = int(np.prod(shape, dtype=np.int64))
    nb = -(-n // block_size)
    scales = np.frombuffer(fh.read(4 * nb), dtype="<f4").astype(np.float32)
    code_len = -(-n * bit_width // 8)
    raw = fh.read(code_len)
    if len(raw) != code_len or scales.size != nb:
        raise ValueError("truncated AGQT dump")
    codes = unpack_codes(raw, bit_width, n)
    return QuantizedTensor(codes, scales, bit_width, block_size, shape, CodecKind(kind))


def dump(q: QuantizedTensor, path: Union[str, Path]) -> None:
    with open(path, "wb") as fh:
        _write(q, fh)


def load(path: Union[str, Path]) -> QuantizedTensor:
    with open(path, "rb") as fh:
        return _read(fh)
