"""Exemplar style transfer: turn warped binary prints into grayscale images
that look like depth-averaged OCT projections.

The generator is a compact encoder-decoder whose decoder blocks are driven by
Adaptive Instance Normalization; the per-block style statistics come from
learned affine heads on a global style code extracted from the exemplar.
Training combines an adversarial term (2D patch discriminator), a contrastive
style loss over the exemplar pool, and discriminator feature matching.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .refiner import CHECKPOINT_FORMAT, adversarial_loss_d, adversarial_loss_g
from .tensorio import (CATEGORIES, BinaryImage2D, Image2D, ValidationError,
                       foreground_category)

STYLE_CODE_DIM = 128


# ---------------------------------------------------------------------------
# AdaIN and the contrastive style loss
# ---------------------------------------------------------------------------

def adain(content_features: torch.Tensor, style_mean: torch.Tensor,
          style_std: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Replace per-channel spatial statistics of the content features with the
    style targets: ``std * (x - mean(x)) / sqrt(var(x) + eps) + mean``.

    Accepts [C, H, W] or [B, C, H, W] content with [C] / [B, C] style stats.
    Variance is the population variance over the spatial positions.
    """
    if eps <= 0:
        raise ValidationError("eps must be positive")
    x = content_features
    unbatched = x.dim() == 3
    if unbatched:
        x = x[None]
    if x.dim() != 4:
        raise ValidationError("content features must be [C,H,W] or [B,C,H,W]")
    mean = torch.as_tensor(style_mean, dtype=x.dtype)
    std = torch.as_tensor(style_std, dtype=x.dtype)
    if torch.any(std < 0):
        raise ValidationError("style_std must be non-negative")
    mean = mean.reshape(-1, x.shape[1])[..., None, None]
    std = std.reshape(-1, x.shape[1])[..., None, None]
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    out = std * (x - mu) / torch.sqrt(var + eps) + mean
    return out[0] if unbatched else out


def csl_loss(anchor: torch.Tensor, positive: torch.Tensor, negatives,
             temperature: float = 0.07) -> torch.Tensor:
    """Contrastive style loss: softmax-contrast the anchor-positive similarity
    against the anchor-negative similarities at the given temperature.

    Codes are L2-normalized before the dot products. Computed with a
    logsumexp so extreme similarity gaps stay finite.
    """
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    negs = list(negatives) if not isinstance(negatives, torch.Tensor) else negatives
    if isinstance(negs, list):
        if len(negs) == 0:
            raise ValidationError("csl_loss requires at least one negative")
        negs = torch.stack([torch.as_tensor(n) for n in negs])
    elif negs.dim() == 1:
        negs = negs[None]
    if negs.numel() == 0:
        raise ValidationError("csl_loss requires at least one negative")
    a = F.normalize(torch.as_tensor(anchor), dim=-1, eps=1e-12)
    p = F.normalize(torch.as_tensor(positive), dim=-1, eps=1e-12)
    n = F.normalize(negs.to(a.dtype), dim=-1, eps=1e-12)
    sim_pos = (a * p).sum(-1) / temperature
    sim_neg = (n @ a) / temperature
    logits = torch.cat([sim_pos[None], sim_neg])
    return torch.logsumexp(logits, dim=0) - sim_pos


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class StyleEncoder(nn.Module):
    """Strided conv encoder + global average pooling -> global style code."""

    def __init__(self, code_dim: int = STYLE_CODE_DIM, base: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, base, 3, stride=2, padding=1),
            nn.InstanceNorm2d(base), nn.ReLU(inplace=True),
            nn.Conv2d(base, base * 2, 3, stride=2, padding=1),
            nn.InstanceNorm2d(base * 2), nn.ReLU(inplace=True),
            nn.Conv2d(base * 2, base * 4, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(base * 4, code_dim, 3, stride=1, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.adaptive_avg_pool2d(self.net(x), 1).flatten(1)


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1), nn.InstanceNorm2d(ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, padding=1), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


class _AdaINBlock(nn.Module):
    """Upsampling decoder block: transposed conv, then AdaIN driven by an
    affine head on the style code, then ReLU."""

    def __init__(self, in_ch: int, out_ch: int, code_dim: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1)
        self.head = nn.Linear(code_dim, 2 * out_ch)

    def forward(self, x, code):
        h = self.up(x)
        stats = self.head(code)
        mean, raw_std = stats.chunk(2, dim=-1)
        return F.relu(adain(h, mean, F.softplus(raw_std)))


class StyleTransferGenerator(nn.Module):
    """Content encoder (3 strided IN conv blocks), residual bottleneck, and an
    AdaIN decoder conditioned on the exemplar's style code."""

    def __init__(self, code_dim: int = STYLE_CODE_DIM, base: int = 24,
                 n_res: int = 2):
        super().__init__()
        self.code_dim = code_dim
        self.style_encoder = StyleEncoder(code_dim)
        c1, c2, c3 = base, base * 2, base * 4
        self.encode = nn.Sequential(
            nn.Conv2d(1, c1, 3, stride=2, padding=1),
            nn.InstanceNorm2d(c1), nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.InstanceNorm2d(c2), nn.ReLU(inplace=True),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1),
            nn.InstanceNorm2d(c3), nn.ReLU(inplace=True),
        )
        self.res = nn.Sequential(*[_ResBlock(c3) for _ in range(n_res)])
        self.dec1 = _AdaINBlock(c3, c2, code_dim)
        self.dec2 = _AdaINBlock(c2, c1, code_dim)
        self.dec3 = _AdaINBlock(c1, c1, code_dim)
        self.out = nn.Conv2d(c1, 1, 3, padding=1)

    def forward(self, content: torch.Tensor, exemplar: torch.Tensor) -> torch.Tensor:
        if content.shape[-2:] != exemplar.shape[-2:]:
            raise ValidationError("content/exemplar resolution mismatch")
        code = self.style_encoder(exemplar)
        h = self.res(self.encode(content))
        h = self.dec1(h, code)
        h = self.dec2(h, code)
        h = self.dec3(h, code)
        return torch.sigmoid(self.out(h))


class PatchDiscriminator2D(nn.Module):
    """2D patch discriminator; exposes intermediate features for the
    feature-matching loss."""

    def __init__(self, base: int = 32, layers: int = 3):
        super().__init__()
        blocks = []
        prev = 1
        for i in range(layers):
            ch = base * (2 ** i)
            conv = nn.Conv2d(prev, ch, 4, stride=2, padding=1)
            post = [nn.LeakyReLU(0.2, inplace=True)]
            if i > 0:
                post.insert(0, nn.InstanceNorm2d(ch))
            blocks.append(nn.Sequential(conv, *post))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.project = nn.Conv2d(prev, 1, 3, stride=1, padding=1)

    def forward(self, x, return_features: bool = False):
        feats = []
        h = x
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        logits = self.project(h)
        return (logits, feats) if return_features else logits


# ---------------------------------------------------------------------------
# Exemplar pool
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ExemplarPool:
    """Per-category pools of style exemplars at the canonical resolution."""

    categories: dict   # category name -> list[Image2D]

    def __post_init__(self):
        if set(self.categories) != set(CATEGORIES):
            raise ValidationError(f"pool must cover {CATEGORIES}")
        shapes = set()
        for cat, images in self.categories.items():
            if not images:
                raise ValidationError(f"category {cat!r} has no exemplars")
            shapes.update((im.height, im.width) for im in images)
        if len(shapes) != 1:
            raise ValidationError(f"exemplars disagree on resolution: {shapes}")

    def all_images(self) -> list:
        return [im for cat in CATEGORIES for im in self.categories[cat]]

    def arrays(self) -> dict:
        return {cat: np.stack([im.values for im in images])
                for cat, images in self.categories.items()}


def _band_masked(img: Image2D, band: str) -> Image2D:
    h = img.height
    out = np.zeros_like(img.values)
    spans = {"upper": (0, int(h * 0.45)),
             "middle": (int(h * 0.3), int(h * 0.7)),
             "lower": (h - int(h * 0.45), h)}
    lo, hi = spans[band]
    out[lo:hi] = img.values[lo:hi]
    return Image2D(out)


def build_exemplar_pool(images, min_per_category: int = 8,
                        seed: int = 0) -> ExemplarPool:
    """Bucket images by foreground category; short categories are filled by
    band-masking randomly drawn donors so every category is populated."""
    if not images:
        raise ValidationError("no exemplar candidates")
    buckets = {cat: [] for cat in CATEGORIES}
    for img in images:
        try:
            buckets[foreground_category(img)].append(img)
        except ValidationError:
            continue  # blank candidates are simply skipped
    rng = np.random.default_rng(seed)
    donors = list(images)
    for cat in ("upper", "middle", "lower"):
        while len(buckets[cat]) < min_per_category:
            donor = donors[int(rng.integers(len(donors)))]
            buckets[cat].append(_band_masked(donor, cat))
    while len(buckets["full"]) < min_per_category:
        # compress the donor's texture into a bright range and add a thin dark
        # border: Otsu then separates border from content, coverage > 0.9
        donor = donors[int(rng.integers(len(donors)))]
        v = donor.values
        span = max(float(v.max() - v.min()), 1e-6)
        interior = 0.55 + 0.4 * (v - v.min()) / span
        framed = np.full_like(v, 0.05)
        framed[1:-1, 1:-1] = interior[1:-1, 1:-1]
        buckets["full"].append(Image2D(framed.astype(np.float32)))
    return ExemplarPool(categories=buckets)


def print_content_category(print_img: BinaryImage2D, sigma: float = 3.0) -> str:
    """Category of a binary print judged on smoothed ridge coverage."""
    smooth = gaussian_filter(print_img.values.astype(np.float64), sigma=sigma)
    return foreground_category(Image2D(np.clip(smooth, 0, 1).astype(np.float32)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class StyleStageConfig:
    temperature: float = 0.07
    num_negatives: int = 15
    w_adv: float = 1.0
    w_csl: float = 1.0
    w_fm: float = 10.0
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    epochs: int = 5
    batch_size: int = 8
    code_dim: int = STYLE_CODE_DIM
    base_channels: int = 24
    disc_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if min(self.w_adv, self.w_csl, self.w_fm) < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.num_negatives < 1:
            raise ValidationError("need at least one negative")


@dataclass
class StyleCheckpoint:
    config: StyleStageConfig
    generator_state: dict
    discriminator_state: dict
    resolution: tuple
    pool_arrays: dict          # category -> float32 [N, H, W] exemplar stack
    history: list = field(default_factory=list)

    def build_generator(self) -> StyleTransferGenerator:
        gen = StyleTransferGenerator(self.config.code_dim, self.config.base_channels)
        gen.load_state_dict(self.generator_state)
        return gen.eval()

    def pool(self) -> ExemplarPool:
        return ExemplarPool(categories={
            cat: [Image2D(a) for a in stack] for cat, stack in self.pool_arrays.items()})

    def save(self, path) -> None:
        torch.save({"format": CHECKPOINT_FORMAT, "stage": "style",
                    "config": dataclasses.asdict(self.config),
                    "generator": self.generator_state,
                    "discriminator": self.discriminator_state,
                    "resolution": tuple(self.resolution),
                    "pool": self.pool_arrays,
                    "history": self.history}, path)

    @classmethod
    def load(cls, path) -> "StyleCheckpoint":
        payload = torch.load(path, weights_only=False)
        if payload.get("format") != CHECKPOINT_FORMAT or payload.get("stage") != "style":
            raise ValidationError(f"{path}: not a style checkpoint")
        cfg_dict = dict(payload["config"])
        cfg_dict["betas"] = tuple(cfg_dict["betas"])
        return cls(config=StyleStageConfig(**cfg_dict),
                   generator_state=payload["generator"],
                   discriminator_state=payload["discriminator"],
                   resolution=tuple(payload["resolution"]),
                   pool_arrays=payload["pool"],
                   history=payload["history"])


def style_encode(model, img) -> np.ndarray:
    """Global style code of an image under a generator's trained encoder."""
    encoder = model.style_encoder if isinstance(model, StyleTransferGenerator) else model
    arr = img.values if isinstance(img, (Image2D, BinaryImage2D)) else np.asarray(img)
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None, None]
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        code = encoder(t)[0].numpy().astype(np.float64)
    if was_training:
        encoder.train()
    return code


def train_style_stage(pairs, pool: ExemplarPool,
                      cfg: StyleStageConfig) -> StyleCheckpoint:
    """Train the style generator on (binary print, target projection) pairs.

    Per sample the exemplar is drawn from the pool bucket matching the print's
    foreground category; the contrastive loss uses the generated image as the
    anchor, the exemplar as the positive, and other pool images as negatives.
    """
    if not pairs:
        raise ValidationError("empty style training set")
    torch.manual_seed(cfg.seed)

    prints = np.stack([p[0].values.astype(np.float32) for p in pairs])[:, None]
    targets = np.stack([p[1].values for p in pairs])[:, None]
    resolution = prints.shape[2:]
    categories = [print_content_category(p[0]) for p in pairs]
    pool_arrays = pool.arrays()
    pool_all = np.stack([im.values for im in pool.all_images()])[:, None]

    xs = torch.from_numpy(prints)
    ys = torch.from_numpy(targets)
    pool_t = torch.from_numpy(pool_all)

    gen = StyleTransferGenerator(cfg.code_dim, cfg.base_channels)
    disc = PatchDiscriminator2D(cfg.disc_channels)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=cfg.betas)

    # index pool images by category for exemplar sampling
    cat_slices = {}
    offset = 0
    for cat in CATEGORIES:
        n = len(pool_arrays[cat])
        cat_slices[cat] = (offset, offset + n)
        offset += n

    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        sums = {"loss_g": 0.0, "loss_d": 0.0, "adv": 0.0, "csl": 0.0, "fm": 0.0}
        n_batches = 0
        for start in range(0, len(pairs), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ex_idx = np.array([rng.integers(*cat_slices[categories[i]]) for i in idx])
            m = min(cfg.num_negatives, len(pool_t) - 1)
            neg_idx = np.array([j for j in rng.permutation(len(pool_t))
                                if j not in set(ex_idx)][:m])
            tidx = torch.from_numpy(idx.copy())
            content, target = xs[tidx], ys[tidx]
            exemplar = pool_t[torch.from_numpy(ex_idx)]

            fake = gen(content, exemplar)
            d_loss = adversarial_loss_d(disc(target), disc(fake.detach()))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            logits_fake, feats_fake = disc(fake, return_features=True)
            with torch.no_grad():
                _, feats_real = disc(target, return_features=True)
            adv = adversarial_loss_g(logits_fake)
            fm = torch.stack([F.l1_loss(a, b)
                              for a, b in zip(feats_fake, feats_real)]).mean()
            anchor_codes = gen.style_encoder(fake)
            pos_codes = gen.style_encoder(exemplar)
            neg_codes = gen.style_encoder(pool_t[torch.from_numpy(neg_idx)])
            csl = torch.stack([
                csl_loss(anchor_codes[i], pos_codes[i], neg_codes, cfg.temperature)
                for i in range(len(tidx))]).mean()
            g_loss = cfg.w_adv * adv + cfg.w_csl * csl + cfg.w_fm * fm
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            sums["loss_g"] += float(g_loss.item())
            sums["loss_d"] += float(d_loss.item())
            sums["adv"] += float(adv.item())
            sums["csl"] += float(csl.item())
            sums["fm"] += float(fm.item())
            n_batches += 1
        history.append({k: v / n_batches for k, v in sums.items()})

    return StyleCheckpoint(config=cfg, generator_state=gen.state_dict(),
                           discriminator_state=disc.state_dict(),
                           resolution=resolution,
                           pool_arrays={c: a.copy() for c, a in pool_arrays.items()},
                           history=history)


def style_generator_forward(ckpt: StyleCheckpoint, i_m: BinaryImage2D,
                            exemplar: Image2D) -> Image2D:
    """Stylize one print with a trained generator (eval mode)."""
    if (i_m.height, i_m.width) != tuple(ckpt.resolution) or \
            (exemplar.height, exemplar.width) != tuple(ckpt.resolution):
        raise ValidationError("resolution mismatch with the style checkpoint")
    gen = ckpt.build_generator()
    content = torch.from_numpy(i_m.values.astype(np.float32)[None, None].copy())
    style = torch.from_numpy(exemplar.values[None, None].copy())
    with torch.no_grad():
        out = gen(content, style)
    return Image2D(np.clip(out[0, 0].numpy(), 0.0, 1.0))
