"""Core image/volume types, bit-exact file containers, dataset manifests,
and the projection/extraction operations shared by every pipeline stage.

Array conventions
-----------------
* images are ``[H, W]`` float32 in [0, 1] (or uint8 in {0, 1} for binary)
* volumes are ``[D, H, W]`` float32 in [0, 1], indexed ``(z, y, x)`` with
  x fastest, i.e. plain C order

File container (see ``write_volume``): ``P2V1`` magic, uint8 dtype code
(1 = float32), uint8 ndim, two reserved zero bytes, little-endian uint32
dims, then the raw little-endian float32 payload in C order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter

MAGIC = b"P2V1"
DTYPE_FLOAT32 = 1
CATEGORIES = ("upper", "middle", "lower", "full")


class ValidationError(ValueError):
    """An input violated a documented invariant or precondition."""


class ContainerError(ValueError):
    """A container file is malformed (bad magic, truncation, bad dims...)."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

def _check_unit_range(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{what}: values must be finite")
    lo, hi = float(values.min()), float(values.max())
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(f"{what}: values must lie in [0, 1], got [{lo}, {hi}]")


@dataclass(frozen=True, eq=False)
class Image2D:
    """H x W grayscale image with float32 values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        if arr.ndim != 2:
            raise ValidationError(f"Image2D: expected 2 dims, got {arr.ndim}")
        if arr.shape[0] < 8 or arr.shape[1] < 8:
            raise ValidationError(f"Image2D: H, W must be >= 8, got {arr.shape}")
        _check_unit_range(arr, "Image2D")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class BinaryImage2D:
    """H x W binary image with uint8 values in {0, 1} (1 = ridge/foreground)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise ValidationError(f"BinaryImage2D: expected 2 dims, got {arr.ndim}")
        uniq = np.unique(arr)
        if not np.all(np.isin(uniq, (0, 1))):
            raise ValidationError("BinaryImage2D: values must be exactly 0 or 1")
        object.__setattr__(self, "values", np.ascontiguousarray(arr.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def to_image(self) -> Image2D:
        """View the binary pattern as a float grayscale image."""
        return Image2D(self.values.astype(np.float32))


@dataclass(frozen=True, eq=False)
class Volume3D:
    """D x H x W intensity volume, float32 in [0, 1], indexed (z, y, x)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        if arr.ndim != 3:
            raise ValidationError(f"Volume3D: expected 3 dims, got {arr.ndim}")
        if min(arr.shape) < 1:
            raise ValidationError(f"Volume3D: empty dimension in shape {arr.shape}")
        _check_unit_range(arr, "Volume3D")
        object.__setattr__(self, "values", arr)

    @property
    def depth(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


# ---------------------------------------------------------------------------
# Container I/O
# ---------------------------------------------------------------------------

def _write_array(arr: np.ndarray, path) -> None:
    dims = arr.shape
    header = MAGIC + struct.pack("<BB2x", DTYPE_FLOAT32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *dims)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def _read_array(path, expect_ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ContainerError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    dtype_code, ndim = struct.unpack("<BB2x", raw[4:8])
    if dtype_code != DTYPE_FLOAT32:
        raise ContainerError(f"{path}: unsupported dtype code {dtype_code}")
    if ndim != expect_ndim:
        raise ContainerError(f"{path}: dimension mismatch, file has ndim={ndim}, "
                             f"expected {expect_ndim}")
    dims_end = 8 + 4 * ndim
    if len(raw) < dims_end:
        raise ContainerError(f"{path}: truncated dimension header")
    dims = struct.unpack(f"<{ndim}I", raw[8:dims_end])
    if any(d == 0 for d in dims):
        raise ContainerError(f"{path}: zero-sized dimension in {dims}")
    count = int(np.prod(dims))
    expected = dims_end + 4 * count
    if len(raw) < expected:
        raise ContainerError(f"{path}: truncated payload, need {expected} bytes, "
                             f"have {len(raw)}")
    if len(raw) > expected:
        raise ContainerError(f"{path}: trailing data after payload "
                             f"({len(raw) - expected} extra bytes)")
    arr = np.frombuffer(raw[dims_end:expected], dtype="<f4").reshape(dims)
    return arr.astype(np.float32)


def write_volume(v: Volume3D, path) -> None:
    """Write a volume to the raw float32 container; round-trips bit-exactly."""
    _write_array(v.values, path)


def read_volume(path) -> Volume3D:
    return Volume3D(_read_array(path, expect_ndim=3))


def write_image(img: Image2D, path) -> None:
    _write_array(img.values, path)


def read_image(path) -> Image2D:
    return Image2D(_read_array(path, expect_ndim=2))


def write_binary_image(img: BinaryImage2D, path) -> None:
    """Binary patterns are stored as float32 {0.0, 1.0} images."""
    _write_array(img.values.astype(np.float32), path)


def read_binary_image(path) -> BinaryImage2D:
    arr = _read_array(path, expect_ndim=2)
    if not np.all(np.isin(arr, (0.0, 1.0))):
        raise ContainerError(f"{path}: image is not binary")
    return BinaryImage2D(arr.astype(np.uint8))


def write_depth_map(depth_map: np.ndarray, path) -> None:
    """Store an integer [H, W] depth map as a float32 container."""
    _write_array(np.asarray(depth_map, dtype=np.float32), path)


def read_depth_map(path) -> np.ndarray:
    arr = _read_array(path, expect_ndim=2)
    return np.rint(arr).astype(np.int64)


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    identity_id: int
    impression_id: int
    category: str
    paths: dict = field(default_factory=dict)  # stage name -> relative path
    seed: int = 0

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValidationError(f"unknown category {self.category!r}")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ValidationError("seed must fit in uint64")


@dataclass
class DatasetManifest:
    """Index of a generated dataset; paths are relative to the manifest file."""

    entries: list
    root: Path | None = None

    def __post_init__(self):
        keys = [(e.identity_id, e.impression_id) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ValidationError("duplicate (identity_id, impression_id) pair")

    def resolve(self, entry: ManifestEntry, stage: str) -> Path:
        if self.root is None:
            raise ValidationError("manifest has no root directory")
        return Path(self.root) / entry.paths[stage]

    def identities(self) -> list:
        return sorted({e.identity_id for e in self.entries})

    def save(self, path) -> None:
        path = Path(path)
        payload = {
            "format": "octfp-manifest-v1",
            "entries": [
                {
                    "identity_id": e.identity_id,
                    "impression_id": e.impression_id,
                    "category": e.category,
                    "paths": dict(e.paths),
                    "seed": int(e.seed),
                }
                for e in self.entries
            ],
        }
        path.write_text(json.dumps(payload, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        payload = json.loads(path.read_text())
        if payload.get("format") != "octfp-manifest-v1":
            raise ValidationError(f"{path}: unknown manifest format")
        entries = [ManifestEntry(**item) for item in payload["entries"]]
        manifest = cls(entries=entries, root=path.parent)
        for e in entries:
            for stage, rel in e.paths.items():
                p = path.parent / rel
                if not p.exists():
                    raise ValidationError(
                        f"{path}: missing file for id={e.identity_id} "
                        f"imp={e.impression_id} stage={stage}: {p}")
        return manifest


# ---------------------------------------------------------------------------
# Projections / extractions
# ---------------------------------------------------------------------------

def z_mean_projection(v: Volume3D) -> Image2D:
    """Average a volume along the depth axis into an en-face image."""
    proj = v.values.mean(axis=0, dtype=np.float64)
    return Image2D(np.clip(proj, 0.0, 1.0).astype(np.float32))


def extract_enface_layer(v: Volume3D, depth_map: np.ndarray, band: int) -> Image2D:
    """Average ``band`` voxels starting at a per-column depth.

    ``out[y, x]`` is the mean of ``v[depth_map[y, x] : depth_map[y, x] + band, y, x]``
    with the window clamped to the valid z range.
    """
    depth_map = np.asarray(depth_map)
    d, h, w = v.values.shape
    if depth_map.shape != (h, w):
        raise ValidationError(f"depth_map shape {depth_map.shape} != image {(h, w)}")
    if not np.issubdtype(depth_map.dtype, np.integer):
        raise ValidationError("depth_map must be an integer array")
    if depth_map.min() < 0 or depth_map.max() >= d:
        raise ValidationError("depth_map values must lie in [0, D)")
    if band < 1:
        raise ValidationError("band must be >= 1")
    # prefix sums along z make the banded mean a two-gather operation
    csum = np.concatenate(
        [np.zeros((1, h, w)), np.cumsum(v.values, axis=0, dtype=np.float64)], axis=0)
    z0 = depth_map[None, :, :]
    z1 = np.minimum(depth_map + band, d)[None, :, :]
    total = np.take_along_axis(csum, z1, axis=0) - np.take_along_axis(csum, z0, axis=0)
    out = (total / (z1 - z0))[0]
    return Image2D(np.clip(out, 0.0, 1.0).astype(np.float32))


def detect_surface(v: Volume3D, threshold: float = 0.3, smoothing: int = 3) -> np.ndarray:
    """Per-column depth of the first median-smoothed A-line sample above threshold.

    Columns that never exceed the threshold map to ``D - 1``.
    """
    if not (0.0 < threshold < 1.0):
        raise ValidationError("threshold must lie in (0, 1)")
    if smoothing < 1:
        raise ValidationError("smoothing must be >= 1")
    vals = v.values
    if smoothing > 1:
        vals = median_filter(vals, size=(smoothing, 1, 1), mode="nearest")
    mask = vals > threshold
    hit = mask.any(axis=0)
    first = mask.argmax(axis=0)
    return np.where(hit, first, v.depth - 1).astype(np.int64)


def _otsu_threshold(values: np.ndarray) -> float:
    """Otsu's threshold over a 256-bin histogram spanning the data range."""
    vmin, vmax = float(values.min()), float(values.max())
    if vmax <= vmin:
        raise ValidationError("blank image")
    hist, edges = np.histogram(values, bins=256, range=(vmin, vmax))
    hist = hist.astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mtot = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (mtot - m0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    k = int(np.argmax(between))
    return float(edges[k + 1])


def foreground_category(img: Image2D, coverage_threshold: float = 0.85) -> str:
    """Classify an image by where its (Otsu) foreground sits: upper, middle,
    lower, or full when coverage exceeds the threshold.

    A constant image cannot be thresholded: it counts as fully covered when
    bright (level > 0.5) and raises "blank image" otherwise.
    """
    if not (0.0 < coverage_threshold < 1.0):
        raise ValidationError("coverage_threshold must lie in (0, 1)")
    if float(img.values.max()) - float(img.values.min()) < 1e-9:
        if float(img.values.max()) > 0.5:
            return "full"
        raise ValidationError("blank image")
    t = _otsu_threshold(img.values)
    fg = img.values > t
    n_fg = int(fg.sum())
    if n_fg == 0:
        raise ValidationError("blank image")
    h = img.height
    if n_fg / fg.size > coverage_threshold:
        return "full"
    centroid_row = float(np.nonzero(fg)[0].mean())
    if centroid_row < h / 3:
        return "upper"
    if centroid_row < 2 * h / 3:
        return "middle"
    return "lower"
