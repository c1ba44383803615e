"""Dense feature maps, bilinear sampling, pyramids, and their file format.

Feature maps store (h, w, D) float32 grids; all sampling arithmetic runs in
float64. Sampling uses the convention that integer coordinates sit exactly
on grid nodes, so a query at (u, v) = (3.0, 7.0) returns the stored value
bit-for-bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

# Interpolation is defined on [1, w-2] x [1, h-2]; one pixel is kept free on
# each side so gradient lookups next to a query never leave the grid.
SAMPLE_MARGIN = 1.0

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1

PYRAMID_LEVELS = 4


class FeatureMapError(ValueError):
    """Base class for feature map failures."""


class SampleOutOfBoundsError(FeatureMapError):
    """Raised when sampling outside the interpolation margins."""


class FeatureFileError(FeatureMapError):
    """Raised for malformed feature map files."""


@dataclass(frozen=True)
class FeatureMap:
    """Immutable dense feature grid of shape (h, w, D)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values)
        if vals.ndim == 2:
            vals = vals[:, :, None]
        if vals.ndim != 3:
            raise FeatureMapError(f"feature map must be (h, w, d), got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise FeatureMapError("feature map contains non-finite values")
        vals = np.ascontiguousarray(vals, dtype=np.float32)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


class FeaturePyramid:
    """Four feature maps, coarse to fine, with 2x size steps.

    Level 4 is full resolution; level l has dimensions divided by 2**(4-l).
    """

    def __init__(self, levels: list[FeatureMap] | tuple[FeatureMap, ...]):
        levels = tuple(levels)
        if len(levels) != PYRAMID_LEVELS:
            raise FeatureMapError(f"pyramid needs {PYRAMID_LEVELS} levels, got {len(levels)}")
        fine = levels[-1]
        for i, lvl in enumerate(levels):
            scale = 2 ** (PYRAMID_LEVELS - 1 - i)
            if lvl.height * scale != fine.height or lvl.width * scale != fine.width:
                raise FeatureMapError(
                    f"level {i + 1} is {lvl.height}x{lvl.width}, expected "
                    f"{fine.height // scale}x{fine.width // scale}"
                )
            if lvl.channels != fine.channels:
                raise FeatureMapError(f"level {i + 1} channel count differs")
        self._levels = levels

    def level(self, index: int) -> FeatureMap:
        if index not in (1, 2, 3, 4):
            raise FeatureMapError(f"pyramid level must be 1..4, got {index}")
        return self._levels[index - 1]

    @property
    def levels(self) -> tuple[FeatureMap, ...]:
        return self._levels

    @property
    def channels(self) -> int:
        return self._levels[0].channels


@dataclass
class Stencil:
    """Bilinear interpolation footprint for a batch of query points.

    ``corners`` holds the four cell values per query in the order
    (u0,v0), (u1,v0), (u0,v1), (u1,v1), cast to float64.
    """

    corners: np.ndarray  # (n, 4, D)
    fu: np.ndarray  # (n,)
    fv: np.ndarray  # (n,)
    iu0: np.ndarray  # (n,) int
    iv0: np.ndarray  # (n,) int

    def values(self) -> np.ndarray:
        """Interpolated values, (n, D)."""
        w = stencil_weights(self.fu, self.fv)
        return np.einsum("nc,ncd->nd", w, self.corners)

    def gradients(self) -> np.ndarray:
        """Interpolant gradients d(value)/d(u, v), (n, D, 2)."""
        c = self.corners
        fu = self.fu[:, None]
        fv = self.fv[:, None]
        du = (1.0 - fv) * (c[:, 1] - c[:, 0]) + fv * (c[:, 3] - c[:, 2])
        dv = (1.0 - fu) * (c[:, 2] - c[:, 0]) + fu * (c[:, 3] - c[:, 1])
        return np.stack([du, dv], axis=2)


def stencil_weights(fu: np.ndarray, fv: np.ndarray) -> np.ndarray:
    """Bilinear corner weights, (n, 4), in Stencil corner order."""
    return np.stack(
        [
            (1.0 - fu) * (1.0 - fv),
            fu * (1.0 - fv),
            (1.0 - fu) * fv,
            fu * fv,
        ],
        axis=1,
    )


def gather_stencil(fmap: FeatureMap, queries: np.ndarray) -> Stencil:
    """Fetch interpolation corners for queries inside the margins."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    u, v = q[:, 0], q[:, 1]
    h, w = fmap.height, fmap.width
    bad = (
        (u < SAMPLE_MARGIN)
        | (u > w - 1 - SAMPLE_MARGIN)
        | (v < SAMPLE_MARGIN)
        | (v > h - 1 - SAMPLE_MARGIN)
    )
    if np.any(bad):
        i = int(np.argmax(bad))
        raise SampleOutOfBoundsError(
            f"query ({u[i]:.3f}, {v[i]:.3f}) outside margins of {w}x{h} map"
        )
    iu0 = np.floor(u).astype(np.intp)
    iv0 = np.floor(v).astype(np.intp)
    # Keep the +1 neighbour on-grid when a query sits exactly on the last
    # interior node.
    iu0 = np.minimum(iu0, w - 2)
    iv0 = np.minimum(iv0, h - 2)
    fu = u - iu0
    fv = v - iv0
    vals = fmap.values
    corners = np.stack(
        [
            vals[iv0, iu0],
            vals[iv0, iu0 + 1],
            vals[iv0 + 1, iu0],
            vals[iv0 + 1, iu0 + 1],
        ],
        axis=1,
    ).astype(np.float64)
    return Stencil(corners=corners, fu=fu, fv=fv, iu0=iu0, iv0=iv0)


def bilinear_sample_many(
    fmap: FeatureMap, queries: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sample values and gradients at (n, 2) query points."""
    st = gather_stencil(fmap, queries)
    return st.values(), st.gradients()


def bilinear_sample(fmap: FeatureMap, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample one point; returns ((D,) value, (D, 2) gradient)."""
    vals, grads = bilinear_sample_many(fmap, np.asarray(query, dtype=np.float64)[None, :])
    return vals[0], grads[0]


# ---------------------------------------------------------------------------
# Baseline pyramid construction.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PyramidConfig:
    """Channel recipe for image-derived pyramids.

    ``channels`` may list "intensity" and "gradmag". ``normalize`` rescales
    each channel per level to zero mean, unit standard deviation.
    """

    channels: tuple[str, ...] = ("intensity", "gradmag")
    normalize: bool = True

    def __post_init__(self) -> None:
        if not self.channels:
            raise FeatureMapError("at least one channel required")
        for name in self.channels:
            if name not in ("intensity", "gradmag"):
                raise FeatureMapError(f"unknown channel {name!r}")


def area_downsample(image: np.ndarray) -> np.ndarray:
    """Halve both dimensions by averaging 2x2 blocks."""
    h, w = image.shape
    if h % 2 or w % 2:
        raise FeatureMapError(f"cannot halve odd dimensions {h}x{w}")
    return image.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _gradient_magnitude(image: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(image)
    return np.sqrt(gx * gx + gy * gy)


def _level_channels(image: np.ndarray, config: PyramidConfig) -> np.ndarray:
    stack = []
    for name in config.channels:
        chan = image if name == "intensity" else _gradient_magnitude(image)
        if config.normalize:
            std = float(chan.std())
            chan = (chan - chan.mean()) / max(std, 1e-12)
        stack.append(chan)
    return np.stack(stack, axis=2)


def build_baseline_pyramid(
    image: np.ndarray | FeatureMap, config: PyramidConfig | None = None
) -> FeaturePyramid:
    """Four-level pyramid of intensity-derived channels.

    The image is area-downsampled 2x per level; channels are computed on
    each level's own grid and then normalized independently, so coarse
    levels are not simple averages of fine-level features. Images whose
    dimensions are not multiples of 8 are reflect-padded up.
    """
    if config is None:
        config = PyramidConfig()
    if isinstance(image, FeatureMap):
        if image.channels != 1:
            raise FeatureMapError("pyramid input must be single-channel")
        img = image.values[:, :, 0].astype(np.float64)
    else:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 3 and img.shape[2] == 1:
            img = img[:, :, 0]
        if img.ndim != 2:
            raise FeatureMapError(f"pyramid input must be 2-D, got shape {img.shape}")
    h, w = img.shape
    if h < 8 or w < 8:
        raise FeatureMapError(f"image {w}x{h} too small for a 4-level pyramid")
    pad_h = (-h) % 8
    pad_w = (-w) % 8
    if pad_h or pad_w:
        img = np.pad(img, ((0, pad_h), (0, pad_w)), mode="reflect")

    finest = img
    per_level = [finest]
    for _ in range(PYRAMID_LEVELS - 1):
        finest = area_downsample(finest)
        per_level.append(finest)
    per_level.reverse()  # coarse first
    return FeaturePyramid([FeatureMap(_level_channels(lvl, config)) for lvl in per_level])


# ---------------------------------------------------------------------------
# FMAP binary format.
#
# Layout (little-endian):
#   magic "FMAP" | u32 version | u32 level_count |
#   per level: u32 height | u32 width | u32 channels | h*w*d float32
# Data is row-major with channel fastest: (row, col, channel).
# ---------------------------------------------------------------------------


def save_feature_maps(path: str, maps: list[FeatureMap] | tuple[FeatureMap, ...]) -> None:
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<II", FMAP_VERSION, len(maps)))
        for m in maps:
            fh.write(struct.pack("<III", m.height, m.width, m.channels))
            fh.write(np.ascontiguousarray(m.values, dtype="<f4").tobytes())


def load_feature_maps(path: str) -> list[FeatureMap]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FMAP_MAGIC:
        raise FeatureFileError(f"bad magic {data[:4]!r}, expected {FMAP_MAGIC!r}")
    if len(data) < 12:
        raise FeatureFileError("truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FMAP_VERSION:
        raise FeatureFileError(f"unsupported version {version}")
    offset = 12
    maps = []
    for i in range(count):
        if offset + 12 > len(data):
            raise FeatureFileError(f"truncated level header at level {i + 1}")
        h, w, d = struct.unpack_from("<III", data, offset)
        offset += 12
        nbytes = h * w * d * 4
        if offset + nbytes > len(data):
            raise FeatureFileError(f"truncated data at level {i + 1}")
        vals = np.frombuffer(data, dtype="<f4", count=h * w * d, offset=offset)
        offset += nbytes
        maps.append(FeatureMap(vals.reshape(h, w, d).copy()))
    if offset != len(data):
        raise FeatureFileError(f"{len(data) - offset} trailing bytes after last level")
    return maps


def save_feature_pyramid(path: str, pyramid: FeaturePyramid) -> None:
    save_feature_maps(path, pyramid.levels)


def load_feature_pyramid(path: str) -> FeaturePyramid:
    maps = load_feature_maps(path)
    if len(maps) != PYRAMID_LEVELS:
        raise FeatureFileError(f"pyramid file holds {len(maps)} levels, expected {PYRAMID_LEVELS}")
    fine = maps[-1]
    for i, lvl in enumerate(maps):
        scale = 2 ** (PYRAMID_LEVELS - 1 - i)
        if lvl.height * scale != fine.height or lvl.width * scale != fine.width:
            raise FeatureFileError(
                f"level {i + 1} size {lvl.width}x{lvl.height} violates the "
                f"halving contract against level 4 ({fine.width}x{fine.height})"
            )
    return FeaturePyramid(maps)
