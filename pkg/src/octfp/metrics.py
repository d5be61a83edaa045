"""Verification mathematics: SSIM (2D/3D, differentiable), Fréchet distance
with pluggable embedders, and biometric ROC/EER/TAR computation.

SSIM is implemented in torch so it can double as a training loss; every other
metric is plain numpy/scipy. The default FID/FVD embedder is a fixed-seed
random strided-convolution network, which keeps the harness self-contained
and deterministic; externally computed features can be loaded from the simple
``P2F1`` feature-file format instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensorio import DatasetManifest, Image2D, ValidationError, Volume3D, read_volume

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    xs = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()

def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, (Image2D, Volume3D)):
        return torch.from_numpy(x.values.copy())
    return torch.as_tensor(np.asarray(x))


def _separable_blur(x: torch.Tensor, windows: list) -> torch.Tensor:
    """Valid-mode separable convolution; ``x`` is [1, 1, *spatial]."""
    nd = x.dim() - 2
    conv = F.conv2d if nd == 2 else F.conv3d
    for axis, win in enumerate(windows):
        if win.numel() == 1:
            continue
        shape = [1, 1] + [1] * nd
        shape[2 + axis] = win.numel()
        x = conv(x, win.reshape(shape))
    return x


def ssim(a, b, window: int | None = None, sigma: float = 1.5,
         c1: float = SSIM_C1, c2: float = SSIM_C2):
    """Mean structural similarity with a Gaussian window.

    Accepts 2D images or 3D volumes (arrays, torch tensors, or the Image2D /
    Volume3D wrappers). Defaults to an 11-tap window for 2D and 7 for 3D; on
    inputs smaller than the window the per-axis window shrinks to the largest
    odd length that fits. Returns a float for array inputs; torch tensors
    stay tensors so the result can be differentiated.
    """
    ta, tb = _as_tensor(a), _as_tensor(b)
    return_tensor = isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor)
    if ta.shape != tb.shape:
        raise ValidationError(f"ssim: shape mismatch {tuple(ta.shape)} vs {tuple(tb.shape)}")
    nd = ta.dim()
    if nd not in (2, 3):
        raise ValidationError("ssim expects 2D images or 3D volumes")
    if window is None:
        window = 11 if nd == 2 else 7
    if window < 3 or window % 2 == 0:
        raise ValidationError("window must be odd and >= 3")
    if not ta.is_floating_point():
        ta = ta.double()
    if not tb.is_floating_point():
        tb = tb.double()
    dtype = torch.promote_types(ta.dtype, tb.dtype)
    ta, tb = ta.to(dtype), tb.to(dtype)

    windows = []
    for size in ta.shape:
        eff = min(window, int(size))
        if eff % 2 == 0:
            eff -= 1
        windows.append(_gaussian_window(max(eff, 1), sigma, dtype, ta.device))

    x = ta[None, None]
    y = tb[None, None]
    mu_x = _separable_blur(x, windows)
    mu_y = _separable_blur(y, windows)
    xx = _separable_blur(x * x, windows)
    yy = _separable_blur(y * y, windows)
    xy = _separable_blur(x * y, windows)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / \
               ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
    out = ssim_map.mean()
    return out if return_tensor else float(out.item())


def ssim3d(a, b, window: int = 7, sigma: float = 1.5,
           c1: float = SSIM_C1, c2: float = SSIM_C2):
    """3D SSIM with the volumetric default window (7 taps, sigma 1.5)."""
    return ssim(a, b, window=window, sigma=sigma, c1=c1, c2=c2)


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianStats:
    """First two moments of an embedded sample set."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValidationError("inconsistent GaussianStats dimensions")
        asym = np.abs(cov - cov.T).max() if cov.size else 0.0
        if asym > 1e-8:
            raise ValidationError(f"covariance asymmetry {asym:.2e} exceeds 1e-8")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased covariance of a list/array of feature vectors."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        feats = np.stack([np.asarray(f, dtype=np.float64).ravel() for f in features])
    if feats.shape[0] < 2:
        raise ValidationError("gaussian_stats needs at least 2 samples")
    mean = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    cov = np.atleast_2d(cov)
    return GaussianStats(mean=mean, covariance=cov)


def _psd_clip(cov: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -1e-6:
        raise ValidationError(f"{what}: covariance has eigenvalue {vals.min():.2e}")
    return np.clip(vals, 0.0, None), vecs


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> float:
    """Frechet (Wasserstein-2) distance between two Gaussians:
    |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The cross term is evaluated through the symmetric eigendecomposition of
    S1^{1/2} S2 S1^{1/2}, which shares its spectrum with S1 S2.
    """
    if s1.dim != s2.dim:
        raise ValidationError(f"dimension mismatch: {s1.dim} vs {s2.dim}")
    v1, q1 = _psd_clip(s1.covariance, "frechet_distance")
    sqrt1 = (q1 * np.sqrt(v1)) @ q1.T
    inner = sqrt1 @ s2.covariance @ sqrt1
    inner = 0.5 * (inner + inner.T)
    vals = np.linalg.eigvalsh(inner)
    if vals.min() < -1e-6:
        raise ValidationError("frechet_distance: cross term is not PSD")
    cross = 2.0 * np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = s1.mean - s2.mean
    dist = float(diff @ diff + np.trace(s1.covariance) + np.trace(s2.covariance) - cross)
    if dist < -1e-6:
        raise ValidationError(f"frechet_distance: negative result {dist:.2e}")
    return max(dist, 0.0)


# ---------------------------------------------------------------------------
# Embedders
# ---------------------------------------------------------------------------

class RandomConvEmbedder:
    """Fixed-seed random strided-convolution embedder for images and volumes.

    Not a perceptual model: it is a deterministic projection that makes the
    FID/FVD harness self-contained. Pretrained features can be substituted
    through the feature-file interface instead.
    """

    def __init__(self, seed: int = 0, dim: int = 64):
        self.seed = int(seed)
        self.dim = int(dim)
        self.identifier = f"random-conv-{self.seed}-{self.dim}"
        self.deterministic = True
        gen = torch.Generator().manual_seed(self.seed)

        def conv_stack(conv, chans):
            layers = []
            prev = 1
            for ch in chans:
                c = conv(prev, ch, kernel_size=3, stride=2, padding=1)
                with torch.no_grad():
                    c.weight.copy_(torch.randn(c.weight.shape, generator=gen) /
                                   np.sqrt(np.prod(c.weight.shape[1:])))
                    c.bias.zero_()
                layers += [c, nn.LeakyReLU(0.2)]
                prev = ch
            return nn.Sequential(*layers)

        self._net2d = conv_stack(nn.Conv2d, (8, 16, 32))
        self._net3d = conv_stack(nn.Conv3d, (8, 16, 32))
        proj = torch.randn((self.dim, 32), generator=gen) / np.sqrt(32.0)
        self._proj = proj
        for net in (self._net2d, self._net3d):
            net.eval()

    def __call__(self, item) -> np.ndarray:
        arr = item.values if isinstance(item, (Image2D, Volume3D)) else np.asarray(item)
        t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None, None]
        with torch.no_grad():
            if t.dim() == 4:
                h = self._net2d(t)
                pooled = F.adaptive_avg_pool2d(h, 1).flatten(1)
            elif t.dim() == 5:
                h = self._net3d(t)
                pooled = F.adaptive_avg_pool3d(h, 1).flatten(1)
            else:
                raise ValidationError("embedder expects a 2D image or 3D volume")
            out = pooled @ self._proj.T
        return out[0].numpy().astype(np.float64)


def embed_set(items, embedder) -> np.ndarray:
    return np.stack([embedder(item) for item in items])


def fid_score(set_a, set_b, embedder=None) -> float:
    """Frechet distance between embedded image sets (>= 2 images per set)."""
    embedder = embedder or RandomConvEmbedder()
    return frechet_distance(gaussian_stats(embed_set(set_a, embedder)),
                            gaussian_stats(embed_set(set_b, embedder)))


def fvd_score(set_a, set_b, embedder=None) -> float:
    """Frechet distance between embedded volume sets (>= 2 volumes per set)."""
    embedder = embedder or RandomConvEmbedder()
    return frechet_distance(gaussian_stats(embed_set(set_a, embedder)),
                            gaussian_stats(embed_set(set_b, embedder)))


def bscan_slices(v: Volume3D, step: int = 4) -> list:
    """Every ``step``-th B-scan (x-z cross section) of a volume, as images."""
    if step < 1:
        raise ValidationError("step must be >= 1")
    return [Image2D(np.ascontiguousarray(v.values[:, y, :]))
            for y in range(0, v.height, step)]


# feature files: "P2F1" magic | uint32 count | uint32 dim | float32 rows
FEATURE_MAGIC = b"P2F1"


def write_feature_file(features: np.ndarray, path) -> None:
    feats = np.ascontiguousarray(np.asarray(features, dtype="<f4"))
    if feats.ndim != 2:
        raise ValidationError("features must be a 2D [count, dim] array")
    header = FEATURE_MAGIC + struct.pack("<II", feats.shape[0], feats.shape[1])
    Path(path).write_bytes(header + feats.tobytes())


def read_feature_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FEATURE_MAGIC:
        raise ValidationError(f"{path}: not a feature file")
    count, dim = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * count * dim
    if len(raw) != expected:
        raise ValidationError(f"{path}: feature payload size mismatch")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(count, dim).astype(np.float64)


def frechet_from_features(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """FID/FVD from externally computed feature matrices."""
    return frechet_distance(gaussian_stats(features_a), gaussian_stats(features_b))


# ---------------------------------------------------------------------------
# ROC / EER / TAR
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScoreSet:
    """Genuine and impostor similarity scores (higher = more similar)."""

    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        gen = np.asarray(self.genuine, dtype=np.float64).ravel()
        imp = np.asarray(self.impostor, dtype=np.float64).ravel()
        if gen.size == 0 or imp.size == 0:
            raise ValidationError("ScoreSet requires non-empty genuine and impostor lists")
        if not (np.all(np.isfinite(gen)) and np.all(np.isfinite(imp))):
            raise ValidationError("scores must be finite")
        object.__setattr__(self, "genuine", gen)
        object.__setattr__(self, "impostor", imp)


def write_score_file(s: ScoreSet, path) -> None:
    lines = [f"genuine {x:.17g}" for x in s.genuine]
    lines += [f"impostor {x:.17g}" for x in s.impostor]
    Path(path).write_text("\n".join(lines) + "\n")


def read_score_file(path) -> ScoreSet:
    genuine, impostor = [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in ("genuine", "impostor"):
            raise ValidationError(f"{path}:{ln}: expected 'genuine|impostor <score>'")
        (genuine if parts[0] == "genuine" else impostor).append(float(parts[1]))
    return ScoreSet(np.array(genuine), np.array(impostor))


def roc_points(s: ScoreSet) -> list:
    """(FAR, FRR, threshold) triples swept over all distinct scores and +-inf.

    FAR(t) is the impostor fraction with score >= t; FRR(t) the genuine
    fraction below t. Points come back sorted by ascending threshold, so FAR
    is non-increasing and FRR non-decreasing along the list.
    """
    thresholds = np.concatenate([
        [-np.inf], np.unique(np.concatenate([s.genuine, s.impostor])), [np.inf]])
    gen = np.sort(s.genuine)
    imp = np.sort(s.impostor)
    # count(imp >= t) via searchsorted on the sorted array
    far = (imp.size - np.searchsorted(imp, thresholds, side="left")) / imp.size
    frr = np.searchsorted(gen, thresholds, side="left") / gen.size
    return [(float(f), float(r), float(t)) for f, r, t in zip(far, frr, thresholds)]


def _crossing(points: list) -> float:
    for i in range(1, len(points)):
        f0, r0, _ = points[i - 1]
        f1, r1, _ = points[i]
        d0, d1 = f0 - r0, f1 - r1
        if d1 <= 0.0:
            if d0 == d1:
                return 0.5 * (f1 + r1)
            alpha = d0 / (d0 - d1)
            return f0 + alpha * (f1 - f0)
    return float(points[-1][0])  # pragma: no cover - d always reaches -1


def eer(s: ScoreSet) -> float:
    """Equal error rate: the FAR=FRR point, linearly interpolated between the
    bracketing ROC points."""
    return float(_crossing(roc_points(s)))


def tar_at_far(s: ScoreSet, far_target: float) -> float:
    """True-accept rate at a FAR budget: 1 - FRR at the most permissive
    threshold whose FAR does not exceed the target, linearly interpolated."""
    if not (0.0 < far_target < 1.0):
        raise ValidationError("far_target must lie in (0, 1)")
    points = roc_points(s)
    for i in range(1, len(points)):
        f0, r0, _ = points[i - 1]
        f1, r1, _ = points[i]
        if f1 <= far_target:
            if f0 == f1:
                return 1.0 - r1
            alpha = (f0 - far_target) / (f0 - f1)
            return 1.0 - (r0 + alpha * (r1 - r0))
    return 1.0 - points[-1][1]  # pragma: no cover - FAR always reaches 0


def all_pairs_scores(labels, features, similarity="cosine") -> ScoreSet:
    """Build a ScoreSet from labeled feature vectors with all-pairs comparison."""
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if similarity != "cosine":
        raise ValidationError("only cosine similarity is supported")
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    unit = feats / np.maximum(norms, 1e-12)
    sims = unit @ unit.T
    genuine, impostor = [], []
    n = len(labels)
    for i in range(n):
        for j in range(i + 1, n):
            (genuine if labels[i] == labels[j] else impostor).append(sims[i, j])
    return ScoreSet(np.array(genuine), np.array(impostor))


# ---------------------------------------------------------------------------
# Tiny recognition embedder (smoke-test scale)
# ---------------------------------------------------------------------------

@dataclass
class TinyEmbedderConfig:
    epochs: int = 8
    lr: float = 1e-3
    batch_size: int = 8
    base_channels: int = 8
    feature_dim: int = 64
    seed: int = 0


class _TinyVolumeNet(nn.Module):
    def __init__(self, n_classes: int, base: int, feature_dim: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv3d(1, base, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv3d(base, base * 2, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv3d(base * 2, base * 4, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        self.embed = nn.Linear(base * 4, feature_dim)
        self.classify = nn.Linear(feature_dim, n_classes)

    def forward(self, x):
        h = self.features(x)
        h = F.adaptive_avg_pool3d(h, 1).flatten(1)
        z = self.embed(h)
        return self.classify(F.relu(z)), z


class TrainedVolumeEmbedder:
    """Identity-classifier embedder; the 64-dim penultimate layer is the
    representation and cosine similarity is the comparison score."""

    def __init__(self, net: _TinyVolumeNet, cfg: TinyEmbedderConfig):
        self._net = net.eval()
        self.cfg = cfg
        self.dim = cfg.feature_dim
        self.identifier = f"tiny3d-{cfg.seed}-{cfg.feature_dim}"
        self.deterministic = True

    def __call__(self, item) -> np.ndarray:
        arr = item.values if isinstance(item, Volume3D) else np.asarray(item)
        t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None, None]
        with torch.no_grad():
            _, z = self._net(t)
        return z[0].numpy().astype(np.float64)


def tiny_embedder_train(dataset, cfg: TinyEmbedderConfig | None = None,
                        stage: str = "volume") -> TrainedVolumeEmbedder:
    """Train the smoke-test recognition embedder on a dataset manifest."""
    cfg = cfg or TinyEmbedderConfig()
    if isinstance(dataset, DatasetManifest):
        pairs = [(e.identity_id, read_volume(dataset.resolve(e, stage)).values)
                 for e in dataset.entries]
    else:
        pairs = [(int(label), np.asarray(vol, dtype=np.float32))
                 for label, vol in dataset]
    labels = sorted({label for label, _ in pairs})
    if len(labels) < 2:
        raise ValidationError("tiny embedder needs at least 2 identities")
    counts = {label: sum(1 for l, _ in pairs if l == label) for label in labels}
    if min(counts.values()) < 2:
        raise ValidationError("tiny embedder needs >= 2 impressions per identity")
    label_index = {label: i for i, label in enumerate(labels)}

    torch.manual_seed(cfg.seed)
    net = _TinyVolumeNet(len(labels), cfg.base_channels, cfg.feature_dim)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    xs = torch.from_numpy(np.stack([v for _, v in pairs])[:, None].astype(np.float32))
    ys = torch.tensor([label_index[label] for label, _ in pairs])
    rng = np.random.default_rng(cfg.seed)
    net.train()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size].copy())
            logits, _ = net(xs[idx])
            loss = F.cross_entropy(logits, ys[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return TrainedVolumeEmbedder(net, cfg)
