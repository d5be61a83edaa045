"""Binary master-print synthesis and per-impression deformation.

A master print is the canonical ridge pattern of one identity, produced
procedurally from a 512-float latent vector by iterated oriented-Gabor
filtering of seeded noise. Impressions of that identity are thin-plate-
spline warps plus crops of the master, and grayscale prints can be
binarized back with a classical orientation-field / Gabor pipeline.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve as dense_solve
from scipy.ndimage import gaussian_filter, map_coordinates
from scipy.signal import fftconvolve

from .tensorio import BinaryImage2D, Image2D, ValidationError

FREQ_MIN = 1.0 / 12.0  # ridge frequency band, cycles/pixel
FREQ_MAX = 1.0 / 6.0


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class IdentitySpec:
    """Latent identity: 512 floats plus an RNG seed."""

    z_id: np.ndarray
    seed: int = 0

    def __post_init__(self):
        arr = np.asarray(self.z_id, dtype=np.float64)
        if arr.shape != (512,):
            raise ValidationError(f"z_id must have length 512, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("z_id must be finite")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ValidationError("seed must fit in uint64")
        object.__setattr__(self, "z_id", arr)


@dataclass(frozen=True, eq=False)
class DistortionSpec:
    """Per-impression warp vector (16 floats) and crop window."""

    z_distort: np.ndarray
    crop_offset: tuple = (0, 0)   # (dy, dx) pixels
    crop_size: tuple = (0, 0)     # (h, w) pixels; (0, 0) means "full image"

    def __post_init__(self):
        arr = np.asarray(self.z_distort, dtype=np.float64)
        if arr.shape != (16,):
            raise ValidationError(f"z_distort must have length 16, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("z_distort must be finite")
        if np.abs(arr).max() > 3.0:
            raise ValidationError("z_distort components must satisfy |c| <= 3")
        dy, dx = self.crop_offset
        h, w = self.crop_size
        if dy < 0 or dx < 0 or h < 0 or w < 0:
            raise ValidationError("crop window must be non-negative")
        object.__setattr__(self, "z_distort", arr)


def random_distortion(rng: np.random.Generator, image_size: tuple,
                      min_frac: float = 0.65) -> DistortionSpec:
    """Draw a clipped-normal warp vector and a crop window covering at least
    ``min_frac`` of each image side."""
    z = np.clip(rng.standard_normal(16), -3.0, 3.0)
    hh, ww = image_size
    h = int(round(hh * rng.uniform(min_frac, 1.0)))
    w = int(round(ww * rng.uniform(max(min_frac, 0.8), 1.0)))
    dy = int(rng.integers(0, hh - h + 1))
    dx = int(rng.integers(0, ww - w + 1))
    return DistortionSpec(z, crop_offset=(dy, dx), crop_size=(h, w))


# ---------------------------------------------------------------------------
# Thin-plate-spline warps
# ---------------------------------------------------------------------------

def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log(r^2) evaluated from squared radii, with U(0) = 0."""
    out = np.zeros_like(r2)
    pos = r2 > 0
    out[pos] = r2[pos] * np.log(r2[pos])
    return out


@dataclass(frozen=True, eq=False)
class TPSWarp:
    """A fitted thin-plate-spline point map over normalized [0,1]^2 (y, x).

    ``map_points`` evaluates f(q) = A [1, y, x]^T + sum_i w_i U(|q - p_i|),
    which sends every control point to point + displacement.
    """

    control_points: np.ndarray   # (K, 2)
    displacements: np.ndarray    # (K, 2)
    affine: np.ndarray           # (2, 3), acting on [1, y, x]
    weights: np.ndarray          # (K, 2)

    def __post_init__(self):
        cp = np.asarray(self.control_points, dtype=np.float64)
        dp = np.asarray(self.displacements, dtype=np.float64)
        aff = np.asarray(self.affine, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if cp.ndim != 2 or cp.shape[1] != 2 or cp.shape != dp.shape or \
                w.shape != cp.shape or aff.shape != (2, 3):
            raise ValidationError("inconsistent TPS warp fields")
        # side conditions: kernel weights carry no affine component
        moments = np.concatenate(
            [w.sum(axis=0), (w * cp[:, :1]).sum(axis=0), (w * cp[:, 1:2]).sum(axis=0)])
        if np.abs(moments).max() > 1e-8:
            raise ValidationError(
                f"TPS side conditions violated (max moment {np.abs(moments).max():.2e})")
        for name, arr in (("control_points", cp), ("displacements", dp),
                          ("affine", aff), ("weights", w)):
            object.__setattr__(self, name, arr)

    def map_points(self, points: np.ndarray) -> np.ndarray:
        """Evaluate the warp at (N, 2) query points in normalized (y, x)."""
        q = np.asarray(points, dtype=np.float64)
        squeeze = q.ndim == 1
        q = np.atleast_2d(q)
        diff = q[:, None, :] - self.control_points[None, :, :]
        u = _tps_kernel((diff ** 2).sum(axis=2))
        out = (np.column_stack([np.ones(len(q)), q]) @ self.affine.T
               + u @ self.weights)
        return out[0] if squeeze else out


def fit_tps(control_points: np.ndarray, displacements: np.ndarray) -> TPSWarp:
    """Fit the standard TPS interpolation system so every control point maps
    exactly to point + displacement.

    Raises on fewer than 4 points, duplicates, or collinear configurations.
    """
    cp = np.asarray(control_points, dtype=np.float64)
    dp = np.asarray(displacements, dtype=np.float64)
    if cp.ndim != 2 or cp.shape[1] != 2:
        raise ValidationError("control_points must be (K, 2)")
    if dp.shape != cp.shape:
        raise ValidationError("displacements must match control_points")
    k = cp.shape[0]
    if k < 4:
        raise ValidationError("need at least 4 control points")
    diff = cp[:, None, :] - cp[None, :, :]
    dist2 = (diff ** 2).sum(axis=2)
    off_diag = dist2[~np.eye(k, dtype=bool)]
    if off_diag.min() <= 0.0:
        raise ValidationError("duplicate control points make the system singular")
    p = np.column_stack([np.ones(k), cp])
    if np.linalg.matrix_rank(p) < 3:
        raise ValidationError("collinear control points make the system singular")

    system = np.zeros((k + 3, k + 3))
    system[:k, :k] = _tps_kernel(dist2)
    system[:k, k:] = p
    system[k:, :k] = p.T
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = cp + dp
    try:
        sol = dense_solve(system, rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded above
        raise ValidationError(f"singular TPS system: {exc}") from exc
    return TPSWarp(control_points=cp, displacements=dp,
                   affine=sol[k:].T, weights=sol[:k])


def identity_warp(control_points: np.ndarray | None = None) -> TPSWarp:
    """The TPS fixing the four image corners (all displacements zero)."""
    if control_points is None:
        control_points = np.array([[0., 0.], [0., 1.], [1., 0.], [1., 1.]])
    return fit_tps(control_points, np.zeros_like(np.asarray(control_points, float)))


# eight interior control points: 3x3 grid on [0.15, 0.85]^2 minus the center
_GRID = (0.15, 0.5, 0.85)
DISTORTION_POINTS = np.array(
    [(gy, gx) for gy in _GRID for gx in _GRID if not (gy == 0.5 and gx == 0.5)])
CORNER_POINTS = np.array([[0., 0.], [0., 1.], [1., 0.], [1., 1.]])


def distortion_to_warp(spec: DistortionSpec, magnitude: float = 0.04) -> TPSWarp:
    """Turn the 16-float warp vector into a TPS: eight interior control points
    displaced by ``z_distort.reshape(8, 2) * magnitude``, corners pinned."""
    if magnitude <= 0:
        raise ValidationError("magnitude must be positive")
    disp = spec.z_distort.reshape(8, 2) * magnitude
    points = np.vstack([DISTORTION_POINTS, CORNER_POINTS])
    displacements = np.vstack([disp, np.zeros((4, 2))])
    return fit_tps(points, displacements)


def tps_warp_image(img, warp: TPSWarp):
    """Backward-warp an image: output pixel q samples the input at warp(q).

    Bilinear sampling for grayscale, nearest-neighbor for binary images;
    samples falling outside the domain fill with 0.
    """
    binary = isinstance(img, BinaryImage2D)
    values = img.values.astype(np.float64)
    h, w = values.shape
    ys, xs = np.meshgrid(np.arange(h) / (h - 1), np.arange(w) / (w - 1),
                         indexing="ij")
    q = np.stack([ys.ravel(), xs.ravel()], axis=1)
    src = warp.map_points(q)
    coords = np.stack([src[:, 0].reshape(h, w) * (h - 1),
                       src[:, 1].reshape(h, w) * (w - 1)])
    # snap numerically-integer coordinates so identity warps round-trip exactly
    snapped = np.rint(coords)
    near = np.abs(coords - snapped) < 1e-7
    coords = np.where(near, snapped, coords)
    order = 0 if binary else 1
    out = map_coordinates(values, coords, order=order, mode="constant", cval=0.0)
    if binary:
        return BinaryImage2D(out.astype(np.uint8))
    return Image2D(np.clip(out, 0.0, 1.0).astype(np.float32))


def crop_impression(img, spec: DistortionSpec, canonical: tuple | None = None):
    """Extract the spec's crop window and place it back on a zero canvas of the
    canonical resolution (the source size by default), rescaling only when the
    window does not fit."""
    values = img.values
    hh, ww = values.shape
    ch, cw = canonical if canonical is not None else (hh, ww)
    dy, dx = spec.crop_offset
    h, w = spec.crop_size
    if (h, w) == (0, 0):
        h, w = hh, ww
    if dy + h > hh or dx + w > ww:
        raise ValidationError(
            f"crop window ({dy},{dx})+({h},{w}) out of bounds for {(hh, ww)}")
    window = values[dy:dy + h, dx:dx + w]
    if (h, w) == (ch, cw):
        out = window.copy()
    elif h <= ch and w <= cw:
        out = np.zeros((ch, cw), dtype=values.dtype)
        oy, ox = min(dy, ch - h), min(dx, cw - w)
        out[oy:oy + h, ox:ox + w] = window
    else:
        yy = np.linspace(0, h - 1, ch)
        xx = np.linspace(0, w - 1, cw)
        grid = np.meshgrid(yy, xx, indexing="ij")
        order = 0 if isinstance(img, BinaryImage2D) else 1
        out = map_coordinates(window.astype(np.float64), np.stack(grid),
                              order=order, mode="nearest")
        out = out.astype(values.dtype)
    if isinstance(img, BinaryImage2D):
        return BinaryImage2D(out)
    return Image2D(out)


# ---------------------------------------------------------------------------
# Procedural master-print synthesis
# ---------------------------------------------------------------------------

def _rng_from_spec(spec: IdentitySpec) -> np.random.Generator:
    # fold the entire latent vector into the stream so every component matters
    digest = hashlib.sha256(spec.z_id.astype("<f8").tobytes()).digest()
    words = [int.from_bytes(digest[i:i + 8], "little") for i in range(0, 32, 8)]
    return np.random.default_rng(np.random.SeedSequence([int(spec.seed)] + words))


def _gabor_kernel(freq: float, theta: float) -> np.ndarray:
    """Even Gabor tuned to ridges flowing along ``theta`` at ``freq`` c/px."""
    sigma = 0.56 / freq
    half = int(np.ceil(2.5 * sigma))
    y, x = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1),
                       indexing="ij")
    # the wave runs along the normal of the ridge-flow direction theta
    normal = y * np.cos(theta) - x * np.sin(theta)
    env = np.exp(-(x ** 2 + y ** 2) / (2 * sigma ** 2))
    kern = env * np.cos(2 * np.pi * freq * normal)
    return kern - kern.mean()  # kill the (tiny) DC response


def _oriented_filter_pass(field: np.ndarray, theta: np.ndarray,
                          freq: np.ndarray, n_orient: int = 12,
                          n_freq: int = 3) -> np.ndarray:
    """One pass of orientation/frequency-binned Gabor filtering."""
    t = np.mod(theta, np.pi)
    o_bin = np.minimum((t / np.pi * n_orient).astype(int), n_orient - 1)
    f_edges = np.linspace(FREQ_MIN, FREQ_MAX, n_freq + 1)
    f_bin = np.clip(np.digitize(freq, f_edges) - 1, 0, n_freq - 1)
    out = np.zeros_like(field)
    for oi in range(n_orient):
        th = (oi + 0.5) * np.pi / n_orient
        for fi in range(n_freq):
            mask = (o_bin == oi) & (f_bin == fi)
            if not mask.any():
                continue
            fc = 0.5 * (f_edges[fi] + f_edges[fi + 1])
            resp = fftconvolve(field, _gabor_kernel(fc, th), mode="same")
            out[mask] = resp[mask]
    return out


def synth_master_print(spec: IdentitySpec, size: tuple = (64, 64)) -> BinaryImage2D:
    """Deterministically synthesize a binary ridge pattern from an identity.

    The latent vector seeds 2-4 singular points of an orientation field, a
    spatially varying ridge frequency in [1/12, 1/6] c/px, and the noise that
    is iteratively sharpened by oriented Gabor kernels, then thresholded at 0.
    """
    h, w = size
    if h < 64 or w < 64:
        raise ValidationError("master prints require H, W >= 64")
    z = spec.z_id
    rng = _rng_from_spec(spec)

    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    grid = (xx - 0.0) + 1j * (yy - 0.0)

    n_sing = 2 + int(np.floor(np.abs(z[0]) * 997.0)) % 3
    theta = np.pi * np.tanh(0.5 * z[15])
    for i in range(n_sing):
        sy = 0.5 + 0.3 * np.tanh(0.7 * z[1 + 2 * i])
        sx = 0.5 + 0.3 * np.tanh(0.7 * z[2 + 2 * i])
        polarity = 1.0 if (i == 0 or z[9 + i] >= 0) else -1.0
        theta = theta + 0.5 * polarity * np.angle(grid - (sx + 1j * sy))

    f0 = 0.5 * (FREQ_MIN + FREQ_MAX)
    ripple = (np.cos(2 * np.pi * (yy * (1 + np.abs(z[16])) + xx * z[17]) + np.pi * z[18])
              + 0.5 * np.cos(2 * np.pi * (xx * (1 + np.abs(z[19]))) + np.pi * z[20]))
    freq = np.clip(f0 * (1.0 + 0.15 * np.tanh(z[21]) * ripple), FREQ_MIN, FREQ_MAX)

    field = rng.standard_normal((h, w))
    field = gaussian_filter(field, sigma=1.0 / (2 * f0))
    for _ in range(4):
        field = _oriented_filter_pass(field, theta, freq)
        scale = field.std()
        if scale < 1e-12:
            break
        field = np.tanh(field / scale)
    return BinaryImage2D((field > 0).astype(np.uint8))


# ---------------------------------------------------------------------------
# Classical binarization (oracle path)
# ---------------------------------------------------------------------------

def _ridge_orientation(values: np.ndarray, sigma: float = 3.0) -> np.ndarray:
    """Structure-tensor ridge orientation (direction of ridge flow)."""
    gy, gx = np.gradient(values)
    jxx = gaussian_filter(gx * gx, sigma)
    jyy = gaussian_filter(gy * gy, sigma)
    jxy = gaussian_filter(gx * gy, sigma)
    # gradients are normal to ridges; add pi/2 to get the flow direction
    return 0.5 * np.arctan2(2 * jxy, jxx - jyy) + np.pi / 2


def _ridge_frequency(values: np.ndarray) -> float:
    """Dominant spatial frequency from the radially-averaged power spectrum."""
    h, w = values.shape
    win = np.outer(np.hanning(h), np.hanning(w))
    spec = np.abs(np.fft.rfft2((values - values.mean()) * win)) ** 2
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    r = np.sqrt(fy ** 2 + fx ** 2)
    bins = np.linspace(0.02, 0.35, 34)
    idx = np.digitize(r.ravel(), bins)
    power = np.bincount(idx, weights=spec.ravel(), minlength=len(bins) + 1)
    k = int(np.argmax(power[1:len(bins)])) + 1
    f = 0.5 * (bins[k - 1] + bins[k])
    return float(np.clip(f, 0.06, 0.2))


def binarize_print(img: Image2D, return_info: bool = False):
    """Classical print binarization: structure-tensor orientations, oriented
    Gabor enhancement, adaptive thresholding.

    With ``return_info=True`` also returns a dict with a ``blank`` flag (set
    for degenerate constant inputs, which yield an all-zero image) and the
    estimated ridge frequency.
    """
    values = img.values.astype(np.float64)
    if values.max() - values.min() < 1e-6:
        result = BinaryImage2D(np.zeros_like(values, dtype=np.uint8))
        return (result, {"blank": True, "frequency": 0.0}) if return_info else result
    x = values - gaussian_filter(values, sigma=8.0)
    theta = _ridge_orientation(values)
    freq = _ridge_frequency(values)
    enhanced = _oriented_filter_pass(x, theta, np.full_like(values, freq))
    enhanced = enhanced - gaussian_filter(enhanced, sigma=8.0)
    result = BinaryImage2D((enhanced > 0).astype(np.uint8))
    if return_info:
        return result, {"blank": False, "frequency": freq}
    return result
