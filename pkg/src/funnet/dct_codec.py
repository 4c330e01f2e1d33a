"""RGB to stacked-DCT preprocessing.

Pipeline: full-range YCbCr conversion, 2x2 box-averaged chroma, 8x8 block DCT
(orthonormal, level shift -128, no quantization), zigzag flattening to 64
channels per plane, nearest-neighbour upsampling of the chroma coefficient
grids, per-plane truncation and concatenation (Y, Cb, Cr).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from funnet.errors import DimensionError, SpecError

BLOCK = 8
COEFFS = BLOCK * BLOCK
PLANES = ("y", "cb", "cr")


@dataclass(frozen=True)
class CompressionSpec:
    """How many of the lowest zigzag frequencies to keep per plane."""

    keep_y: int = 64
    keep_cb: int = 64
    keep_cr: int = 64

    def __post_init__(self):
        for name in ("keep_y", "keep_cb", "keep_cr"):
            k = getattr(self, name)
            if not isinstance(k, (int, np.integer)) or not 0 <= k <= COEFFS:
                raise SpecError(f"{name}={k!r} outside [0, {COEFFS}]")

    @property
    def keeps(self) -> tuple[int, int, int]:
        return (self.keep_y, self.keep_cb, self.keep_cr)

    @property
    def channels(self) -> int:
        return self.keep_y + self.keep_cb + self.keep_cr

    @property
    def is_full(self) -> bool:
        return self.keeps == (COEFFS, COEFFS, COEFFS)

    def channel_indices(self) -> np.ndarray:
        """Indices of the retained channels inside a full 192-channel tensor."""
        return np.concatenate(
            [p * COEFFS + np.arange(k) for p, k in enumerate(self.keeps)]
        ).astype(np.int64)

    def covers(self, other: "CompressionSpec") -> bool:
        """True when every channel kept by ``other`` is also kept by ``self``."""
        return all(a >= b for a, b in zip(self.keeps, other.keeps))

    @classmethod
    def parse(cls, text: str) -> "CompressionSpec":
        """Parse ``"64,12,12"`` or ``"64/12/12"``."""
        parts = text.replace("/", ",").split(",")
        if len(parts) != 3:
            raise SpecError(f"expected three keep-counts Y,CB,CR, got {text!r}")
        try:
            vals = [int(p) for p in parts]
        except ValueError:
            raise SpecError(f"keep-counts must be integers: {text!r}") from None
        return cls(*vals)

    def __str__(self) -> str:
        return f"{self.keep_y}/{self.keep_cb}/{self.keep_cr}"


FULL_SPEC = CompressionSpec(64, 64, 64)


@dataclass
class PlaneSet:
    """Y at full resolution, Cb and Cr at half resolution, values in [0, 255]."""

    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray

    def planes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.y, self.cb, self.cr)


@dataclass
class DctTensor:
    """Stacked frequency-domain input, ``data`` shaped (channels, grid_h, grid_w).

    Channels are plane-major (Y, Cb, Cr); inside a plane group channel ``k`` is
    the k-th zigzag coefficient.
    """

    data: np.ndarray
    spec: CompressionSpec = FULL_SPEC

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DimensionError(f"DctTensor data must be 3-D, got {self.data.shape}")
        if self.data.shape[0] != self.spec.channels:
            raise DimensionError(
                f"{self.data.shape[0]} channels do not match spec {self.spec}"
            )

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid_h(self) -> int:
        return self.data.shape[1]

    @property
    def grid_w(self) -> int:
        return self.data.shape[2]

    def plane(self, name: str) -> np.ndarray:
        """Channels belonging to one plane group."""
        i = PLANES.index(name)
        keeps = self.spec.keeps
        start = sum(keeps[:i])
        return self.data[start : start + keeps[i]]


# ---------------------------------------------------------------------------
# colour conversion


def _check_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    h, w, _ = img.shape
    if h == 0 or w == 0 or h % 16 or w % 16:
        raise DimensionError(f"image size {h}x{w} is not a multiple of 16")
    return img


def box_downsample2(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def rgb_to_ycbcr(img: np.ndarray) -> PlaneSet:
    """Full-range BT.601 conversion with 4:2:0 box-averaged chroma."""
    img = _check_rgb(img).astype(np.float64)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    y, cb, cr = (np.clip(p, 0.0, 255.0) for p in (y, cb, cr))
    return PlaneSet(y, box_downsample2(cb), box_downsample2(cr))


# ---------------------------------------------------------------------------
# 8x8 DCT


@lru_cache(maxsize=None)
def dct_matrix() -> np.ndarray:
    """Orthonormal DCT-II matrix ``M[u, x]`` so that coefficients are M @ B @ M.T."""
    u = np.arange(BLOCK)[:, None]
    x = np.arange(BLOCK)[None, :]
    m = np.cos((2 * x + 1) * u * np.pi / (2 * BLOCK))
    m[0] *= np.sqrt(1.0 / BLOCK)
    m[1:] *= np.sqrt(2.0 / BLOCK)
    m.setflags(write=False)
    return m


def block_dct8(block: np.ndarray) -> np.ndarray:
    block = np.asarray(block, dtype=np.float64)
    if block.shape != (BLOCK, BLOCK):
        raise DimensionError(f"block must be 8x8, got {block.shape}")
    m = dct_matrix()
    return m @ (block - 128.0) @ m.T


def block_idct8(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (BLOCK, BLOCK):
        raise DimensionError(f"coefficients must be 8x8, got {coeffs.shape}")
    m = dct_matrix()
    return m.T @ coeffs @ m + 128.0


def blockwise_dct(plane: np.ndarray) -> np.ndarray:
    """DCT of every 8x8 tile: (H, W) -> (H/8, W/8, 8, 8)."""
    h, w = plane.shape
    if h % BLOCK or w % BLOCK:
        raise DimensionError(f"plane {h}x{w} is not tileable by 8x8 blocks")
    tiles = plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)
    m = dct_matrix()
    return m @ (tiles - 128.0) @ m.T


def blockwise_idct(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`blockwise_dct`: (gh, gw, 8, 8) -> (gh*8, gw*8)."""
    gh, gw = coeffs.shape[:2]
    m = dct_matrix()
    tiles = m.T @ coeffs @ m + 128.0
    return tiles.transpose(0, 2, 1, 3).reshape(gh * BLOCK, gw * BLOCK)


# ---------------------------------------------------------------------------
# zigzag


@lru_cache(maxsize=None)
def _zigzag() -> tuple[tuple[int, int], ...]:
    order = []
    for s in range(2 * BLOCK - 1):
        lo, hi = max(0, s - BLOCK + 1), min(s, BLOCK - 1)
        rows = range(hi, lo - 1, -1) if s % 2 == 0 else range(lo, hi + 1)
        order.extend((r, s - r) for r in rows)
    return tuple(order)


def zigzag_order() -> list[tuple[int, int]]:
    """JPEG zigzag scan as (row, col) pairs; entry 0 is DC."""
    return list(_zigzag())


@lru_cache(maxsize=None)
def zigzag_flat_index() -> np.ndarray:
    """Raster index (row * 8 + col) of each zigzag position."""
    idx = np.array([r * BLOCK + c for r, c in _zigzag()], dtype=np.int64)
    idx.setflags(write=False)
    return idx


def zigzag_flatten(coeff_grid: np.ndarray) -> np.ndarray:
    """(gh, gw, 8, 8) -> (64, gh, gw) in zigzag channel order."""
    gh, gw = coeff_grid.shape[:2]
    flat = coeff_grid.reshape(gh, gw, COEFFS)[:, :, zigzag_flat_index()]
    return np.ascontiguousarray(flat.transpose(2, 0, 1))


def zigzag_unflatten(channels: np.ndarray) -> np.ndarray:
    """(64, gh, gw) -> (gh, gw, 8, 8)."""
    _, gh, gw = channels.shape
    out = np.zeros((gh, gw, COEFFS), dtype=channels.dtype)
    out[:, :, zigzag_flat_index()] = channels.transpose(1, 2, 0)
    return out.reshape(gh, gw, BLOCK, BLOCK)


def upsample_grid2(channels: np.ndarray) -> np.ndarray:
    """Nearest-neighbour duplication of each coefficient-grid cell."""
    return channels.repeat(2, axis=-2).repeat(2, axis=-1)


# ---------------------------------------------------------------------------
# full pipeline


def planes_to_dct(planes: PlaneSet, spec: CompressionSpec = FULL_SPEC) -> DctTensor:
    groups = []
    for i, (plane, keep) in enumerate(zip(planes.planes(), spec.keeps)):
        ch = zigzag_flatten(blockwise_dct(plane))
        if i > 0:
            ch = upsample_grid2(ch)
        groups.append(ch[:keep])
    data = np.concatenate(groups, axis=0)
    gh, gw = planes.y.shape[0] // BLOCK, planes.y.shape[1] // BLOCK
    return DctTensor(data.reshape(spec.channels, gh, gw), spec)


def preprocess(img: np.ndarray, spec: CompressionSpec = FULL_SPEC) -> DctTensor:
    """RGB uint8 (H, W, 3) -> DctTensor of shape (keep total, H/8, W/8)."""
    return planes_to_dct(rgb_to_ycbcr(img), spec)


def pad_to_full(x: DctTensor) -> DctTensor:
    """Place a truncated tensor into 192 channels, zeros at dropped positions."""
    full = np.zeros((3 * COEFFS, x.grid_h, x.grid_w), dtype=x.data.dtype)
    full[x.spec.channel_indices()] = x.data
    return DctTensor(full, FULL_SPEC)


def truncate(x: DctTensor, spec: CompressionSpec) -> DctTensor:
    """Keep only ``spec``'s channels of a tensor that covers it."""
    if not x.spec.covers(spec):
        raise SpecError(f"tensor with spec {x.spec} does not contain {spec}")
    src = {int(c): i for i, c in enumerate(x.spec.channel_indices())}
    rows = [src[int(c)] for c in spec.channel_indices()]
    return DctTensor(x.data[rows], spec)


def plane_energy(x: DctTensor) -> dict[str, float]:
    """Sum of squared coefficients per plane group."""
    return {p: float(np.sum(np.square(x.plane(p), dtype=np.float64))) for p in PLANES}


# ---------------------------------------------------------------------------
# FDT1 dump format

FDT_MAGIC = b"FDT1"
_FDT_HEADER = struct.Struct("<4s6I")


def encode_fdt(x: DctTensor) -> bytes:
    c, gh, gw = x.data.shape
    head = _FDT_HEADER.pack(FDT_MAGIC, gh, gw, c, *x.spec.keeps)
    return head + np.ascontiguousarray(x.data, dtype="<f4").tobytes()


def decode_fdt(buf: bytes) -> DctTensor:
    if len(buf) < _FDT_HEADER.size:
        raise ValueError("truncated FDT1 header")
    magic, gh, gw, c, ky, kb, kr = _FDT_HEADER.unpack_from(buf)
    if magic != FDT_MAGIC:
        raise ValueError(f"bad FDT1 magic {magic!r}")
    spec = CompressionSpec(ky, kb, kr)
    if spec.channels != c:
        raise ValueError(f"FDT1 channel count {c} disagrees with keeps {spec}")
    n = c * gh * gw
    body = buf[_FDT_HEADER.size :]
    if len(body) != 4 * n:
        raise ValueError(f"FDT1 payload has {len(body)} bytes, expected {4 * n}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(c, gh, gw)
    return DctTensor(data, spec)


def write_fdt(path: str | os.PathLike, x: DctTensor) -> None:
    Path(path).write_bytes(encode_fdt(x))


def read_fdt(path: str | os.PathLike) -> DctTensor:
    return decode_fdt(Path(path).read_bytes())
