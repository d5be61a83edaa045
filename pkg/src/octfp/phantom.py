"""Procedural fingertip OCT phantoms: layered skin volumes with known
ground-truth geometry.

Each phantom is built from a binary ridge pattern: the skin surface rides the
ridges (contact imaging, ridges closest to the plate), a stratum-corneum band
sits under the surface, a bright dermal-junction line mirrors the ridge
pattern at depth, and dermis fills the rest. Signal attenuation, multiplicative
gamma speckle, and occasional plate lift-off wedges make the result look like
a (desk-scale) OCT scan while the true surface/junction maps stay available
for every volume.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import masterprint as mp
from .tensorio import (BinaryImage2D, DatasetManifest, Image2D, ManifestEntry,
                       ValidationError, Volume3D, write_binary_image,
                       write_depth_map, write_image, write_volume,
                       z_mean_projection)


@dataclass(frozen=True)
class PhantomParams:
    """Geometry, optics, and noise knobs for one phantom volume."""

    depth: int = 8                     # D, voxels
    surface_depth: float = 2.0        # z0: mean skin surface below the plate
    ridge_amplitude: float = 2.0      # voxels of surface relief from ridges
    corneum_thickness: float = 1.5    # mean stratum-corneum band thickness
    corneum_variation: float = 0.5    # low-frequency thickness modulation
    junction_offset: float = 3.0      # dermal junction depth below the surface
    brightness_corneum: float = 0.78
    brightness_epidermis: float = 0.35
    brightness_junction: float = 0.92
    brightness_dermis: float = 0.5
    brightness_air: float = 0.02
    attenuation: float = 0.1          # per-voxel exponential decay below surface
    speckle_shape: float = 30.0       # gamma shape k; inf disables speckle
    gap_probability: float = 0.1      # chance of a plate lift-off wedge
    gap_width: float = 1.0            # max extra elevation of the wedge, voxels
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.surface_depth < self.depth):
            raise ValidationError("surface_depth must lie strictly inside [0, depth]")
        if self.corneum_thickness <= 0 or self.junction_offset <= 0:
            raise ValidationError("thickness and junction offset must be positive")
        if self.junction_offset + self.surface_depth + 1 >= self.depth:
            raise ValidationError("junction would fall outside the volume")
        for name in ("brightness_corneum", "brightness_epidermis",
                     "brightness_junction", "brightness_dermis", "brightness_air"):
            b = getattr(self, name)
            if not (0.0 <= b <= 1.0):
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.attenuation < 0:
            raise ValidationError("attenuation must be >= 0")
        if not (self.speckle_shape > 0):
            raise ValidationError("speckle_shape must be positive")
        if not (0.0 <= self.gap_probability <= 1.0):
            raise ValidationError("gap_probability must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class PhantomTruth:
    """Ground-truth layer geometry accompanying a phantom volume."""

    surface_map: np.ndarray    # int [H, W], voxel depth of the skin surface
    junction_map: np.ndarray   # int [H, W], voxel depth of the dermal junction
    clean_volume: Volume3D     # structural volume before speckle

    def __post_init__(self):
        if self.surface_map.shape != self.junction_map.shape:
            raise ValidationError("truth maps must share a shape")
        if not np.all(self.junction_map > self.surface_map):
            raise ValidationError("junction must lie strictly below the surface")


def apply_speckle(v: Volume3D, k: float, seed: int) -> Volume3D:
    """Multiplicative gamma speckle with mean 1 and variance 1/k.

    ``k = inf`` is the degenerate noise-free case and returns a copy.
    """
    if not (k > 0):
        raise ValidationError("speckle shape k must be positive")
    if np.isinf(k):
        return Volume3D(v.values.copy())
    rng = np.random.default_rng(seed)
    gain = rng.gamma(shape=k, scale=1.0 / k, size=v.values.shape)
    return Volume3D(np.clip(v.values * gain, 0.0, 1.0).astype(np.float32))


def _band_coverage(z_lo: np.ndarray, z_hi: np.ndarray, d: int) -> np.ndarray:
    """Fraction of each voxel [k, k+1) covered by the band [z_lo, z_hi)."""
    edges = np.arange(d + 1, dtype=np.float64)
    lo = np.maximum(edges[:-1, None, None], z_lo[None])
    hi = np.minimum(edges[1:, None, None], z_hi[None])
    return np.clip(hi - lo, 0.0, 1.0)


def generate_phantom(print_img: BinaryImage2D,
                     params: PhantomParams) -> tuple[Volume3D, PhantomTruth]:
    """Render a layered OCT phantom from a binary ridge pattern.

    Returns the (possibly speckled) volume and the ground truth: surface map,
    junction map, and the pre-speckle structural volume.
    """
    d = params.depth
    h, w = print_img.height, print_img.width
    rng = np.random.default_rng(params.seed)

    ridges = gaussian_filter(print_img.values.astype(np.float64), sigma=1.2)
    if ridges.max() > ridges.min():
        ridges = (ridges - ridges.min()) / (ridges.max() - ridges.min())

    # occasional plate lift-off: a linear wedge raises one side of the skin
    lift = np.zeros((h, w))
    if rng.random() < params.gap_probability:
        side = rng.integers(0, 4)
        extent = rng.uniform(0.3, 0.6)
        ramp_len = max(int((h if side < 2 else w) * extent), 2)
        ramp = np.linspace(1.0, 0.0, ramp_len) * params.gap_width * rng.uniform(0.5, 1.0)
        if side == 0:
            lift[:ramp_len, :] += ramp[:, None]
        elif side == 1:
            lift[-ramp_len:, :] += ramp[::-1, None]
        elif side == 2:
            lift[:, :ramp_len] += ramp[None, :]
        else:
            lift[:, -ramp_len:] += ramp[None, ::-1]

    surface = params.surface_depth - params.ridge_amplitude * ridges + lift
    surface = np.clip(surface, 0.2, d - params.junction_offset - 1.5)

    thickness = params.corneum_thickness + params.corneum_variation * np.tanh(
        gaussian_filter(rng.standard_normal((h, w)), sigma=6.0) * 3.0)
    thickness = np.clip(thickness, 0.6, params.junction_offset - 0.4)
    junction = surface + params.junction_offset

    corneum = _band_coverage(surface, surface + thickness, d)
    epidermis = _band_coverage(surface + thickness, junction, d)
    junction_line = _band_coverage(junction, junction + 1.0, d)
    dermis = _band_coverage(junction + 1.0, np.full((h, w), float(d)), d)
    air = _band_coverage(np.zeros((h, w)), surface, d)

    zc = np.arange(d, dtype=np.float64)[:, None, None] + 0.5
    depth_below = np.maximum(zc - surface[None], 0.0)
    dermis_tex = 0.75 + 0.25 * np.tanh(
        gaussian_filter(rng.standard_normal((d, h, w)), sigma=(0.8, 2.0, 2.0)) * 4.0)
    junction_gain = 0.55 + 0.45 * ridges

    vol = (params.brightness_air * air
           + params.brightness_corneum * corneum
           + params.brightness_epidermis * epidermis
           + params.brightness_junction * junction_gain[None] * junction_line
           + params.brightness_dermis * dermis_tex
             * np.exp(-np.maximum(zc - junction[None] - 1.0, 0.0) / 4.0) * dermis)
    vol = vol * np.where(zc > surface[None],
                         np.exp(-params.attenuation * depth_below), 1.0)
    clean = Volume3D(np.clip(vol, 0.0, 1.0).astype(np.float32))

    noisy = apply_speckle(clean, params.speckle_shape,
                          seed=int(rng.integers(0, 2 ** 63)))

    surface_map = np.clip(np.rint(surface), 0, d - 1).astype(np.int64)
    junction_map = np.clip(np.rint(junction), 0, d - 1).astype(np.int64)
    junction_map = np.maximum(junction_map, surface_map + 1)
    truth = PhantomTruth(surface_map=surface_map, junction_map=junction_map,
                         clean_volume=clean)
    return noisy, truth


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------

def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def print_category(print_img: BinaryImage2D, sigma: float = 3.0) -> str:
    """Foreground category of a binary print, judged on its smoothed coverage
    (raw ridges would register ~50% foreground even for a full print)."""
    from .tensorio import foreground_category
    smooth = gaussian_filter(print_img.values.astype(np.float64), sigma=sigma)
    return foreground_category(Image2D(np.clip(smooth, 0, 1).astype(np.float32)))


def build_identity_print(master_seed: int, identity_id: int,
                         size: tuple) -> BinaryImage2D:
    """Deterministic master print for (master_seed, identity)."""
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, identity_id]))
    z_id = rng.standard_normal(512)
    spec = mp.IdentitySpec(z_id, seed=derive_seed(master_seed, identity_id, 1))
    return mp.synth_master_print(spec, size)


def build_impression_print(master: BinaryImage2D, master_seed: int,
                           identity_id: int, impression_id: int,
                           warp_magnitude: float = 0.015,
                           min_crop_frac: float = 0.85) -> BinaryImage2D:
    """Warp + crop one impression of a master print, deterministically.

    The dataset defaults keep impressions of one identity recognizably
    aligned (warps well under the ridge period, generous crops) so that
    intra-identity projections stay more similar than cross-identity ones.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence([master_seed, identity_id, impression_id]))
    spec = mp.random_distortion(rng, (master.height, master.width),
                                min_frac=min_crop_frac)
    warped = mp.tps_warp_image(master, mp.distortion_to_warp(spec, warp_magnitude))
    return mp.crop_impression(warped, spec)


def build_phantom_dataset(n_identities: int, impressions_per_id: int,
                          params: PhantomParams, master_seed: int,
                          out_dir, size: tuple = (64, 64),
                          workers: int = 1) -> DatasetManifest:
    """Generate a full phantom dataset on disk and return its manifest.

    Layout: ``<out_dir>/id_<k>/imp_<j>/{volume,zmean,surface,junction,print}.p2v``
    plus ``manifest.json``. Every array is reproducible from ``master_seed``.
    """
    if n_identities < 1 or impressions_per_id < 1:
        raise ValidationError("need at least one identity and impression")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    ids = list(range(n_identities))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            groups = list(pool.map(
                _build_identity_group,
                [(identity, impressions_per_id, params, master_seed, out_dir, size)
                 for identity in ids]))
    else:
        groups = [_build_identity_group(
            (identity, impressions_per_id, params, master_seed, out_dir, size))
            for identity in ids]

    entries = [entry for group in groups for entry in group]
    manifest = DatasetManifest(entries=entries, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def _build_identity_group(args) -> list:
    identity, impressions_per_id, params, master_seed, out_dir, size = args
    master = build_identity_print(master_seed, identity, size)
    entries = []
    for imp in range(impressions_per_id):
        imp_print = build_impression_print(master, master_seed, identity, imp)
        sample_seed = derive_seed(master_seed, identity, imp, 2)
        vol, truth = generate_phantom(
            imp_print, dataclasses.replace(params, seed=sample_seed))
        rel = Path(f"id_{identity:04d}") / f"imp_{imp:02d}"
        (out_dir / rel).mkdir(parents=True, exist_ok=True)
        write_volume(vol, out_dir / rel / "volume.p2v")
        write_image(z_mean_projection(vol), out_dir / rel / "zmean.p2v")
        write_depth_map(truth.surface_map, out_dir / rel / "surface.p2v")
        write_depth_map(truth.junction_map, out_dir / rel / "junction.p2v")
        write_binary_image(imp_print, out_dir / rel / "print.p2v")
        entries.append(ManifestEntry(
            identity_id=identity, impression_id=imp,
            category=print_category(imp_print),
            paths={stage: str(rel / f"{stage}.p2v")
                   for stage in ("volume", "zmean", "surface", "junction", "print")},
            seed=sample_seed))
    return entries
