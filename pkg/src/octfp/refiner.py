"""OCT realism refinement: a 3D U-Net generator that renders structural
volumes with scan-like texture, a 3D PatchGAN discriminator, and the
adversarial loss primitives shared by every GAN stage in the package.

The adversarial losses are binary cross-entropy on sigmoid(logits) with the
non-saturating generator form; its fixed points coincide with the classical
log(1 - D) objective while keeping gradients alive early in training.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensorio import ValidationError, Volume3D

CHECKPOINT_FORMAT = "octfp-checkpoint-v1"

# PatchScores are plain torch tensors [d_p, h_p, w_p] (or batched with two
# leading dims) of per-patch realness logits.


# ---------------------------------------------------------------------------
# Loss primitives (shared by the 2D and 3D GAN stages)
# ---------------------------------------------------------------------------

def adversarial_loss_g(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: push fake patch logits toward 'real'."""
    return F.binary_cross_entropy_with_logits(d_fake, torch.ones_like(d_fake))


def adversarial_loss_d(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Discriminator loss: real patches toward 1, fake patches toward 0."""
    loss_real = F.binary_cross_entropy_with_logits(d_real, torch.ones_like(d_real))
    loss_fake = F.binary_cross_entropy_with_logits(d_fake, torch.zeros_like(d_fake))
    return loss_real + loss_fake


def _pair_tensors(a, b) -> tuple[torch.Tensor, torch.Tensor]:
    ta = a.values if isinstance(a, Volume3D) else a
    tb = b.values if isinstance(b, Volume3D) else b
    ta = torch.as_tensor(np.asarray(ta)) if not isinstance(ta, torch.Tensor) else ta
    tb = torch.as_tensor(np.asarray(tb)) if not isinstance(tb, torch.Tensor) else tb
    if ta.shape != tb.shape:
        raise ValidationError(f"shape mismatch {tuple(ta.shape)} vs {tuple(tb.shape)}")
    return ta, tb


def l1_fidelity(v_real, v_r) -> torch.Tensor:
    """Mean absolute voxel difference."""
    ta, tb = _pair_tensors(v_real, v_r)
    if not ta.is_floating_point():
        ta = ta.double()
    if not tb.is_floating_point():
        tb = tb.double()
    dtype = torch.promote_types(ta.dtype, tb.dtype)
    return (ta.to(dtype) - tb.to(dtype)).abs().mean()


def refiner_objective(d_fake: torch.Tensor, v_real, v_r,
                      alpha: float = 10.0) -> torch.Tensor:
    """Generator objective: adversarial term plus alpha-weighted L1 fidelity."""
    if alpha < 0:
        raise ValidationError("alpha must be >= 0")
    return adversarial_loss_g(d_fake) + alpha * l1_fidelity(v_real, v_r)


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class ConvBlock3D(nn.Module):
    """3DConv -> BatchNorm3d -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1),
            nn.BatchNorm3d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class RefinerGenerator(nn.Module):
    """Full 3D U-Net: three ConvBlock3D encoder stages with max-pooling, a
    bottleneck, and a transposed-convolution decoder with skip concatenation.
    Sigmoid output keeps volumes in [0, 1]."""

    def __init__(self, base_channels: int = 64, in_channels: int = 1):
        super().__init__()
        c = base_channels
        self.enc = nn.ModuleList([
            ConvBlock3D(in_channels, c),
            ConvBlock3D(c, c * 2),
            ConvBlock3D(c * 2, c * 4),
        ])
        self.pool = nn.MaxPool3d(2)
        self.bottleneck = ConvBlock3D(c * 4, c * 4)
        self.up = nn.ModuleList([
            nn.ConvTranspose3d(c * 4, c * 4, kernel_size=2, stride=2),
            nn.ConvTranspose3d(c * 4, c * 2, kernel_size=2, stride=2),
            nn.ConvTranspose3d(c * 2, c, kernel_size=2, stride=2),
        ])
        self.dec = nn.ModuleList([
            ConvBlock3D(c * 8, c * 4),
            ConvBlock3D(c * 4, c * 2),
            ConvBlock3D(c * 2, c),
        ])
        self.out = nn.Conv3d(c, 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        h = x
        for enc in self.enc:
            h = enc(h)
            skips.append(h)
            h = self.pool(h)
        h = self.bottleneck(h)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            h = up(h)
            if h.shape[2:] != skip.shape[2:]:
                h = F.interpolate(h, size=skip.shape[2:], mode="trilinear",
                                  align_corners=False)
            h = dec(torch.cat([h, skip], dim=1))
        return torch.sigmoid(self.out(h))


def patch_grid_shape(input_shape, layers: int = 4) -> tuple:
    """Closed-form PatchGAN grid: per axis, four k4/s2/p1 convolutions with the
    kernel clamped to the padded extent whenever the axis is too small."""
    dims = list(input_shape)
    for _ in range(layers):
        dims = [((n + 2 - min(4, n + 2)) // 2) + 1 for n in dims]
    return tuple(dims)


class PatchDiscriminator3D(nn.Module):
    """3D PatchGAN: four strided 3D convolutions with LeakyReLU (no norm on
    the first layer) and a 1-channel projection producing per-patch logits.

    Kernel extents are fixed at construction from a nominal input shape so
    that axes shrinking below the kernel stay valid (matching the clamped
    stride arithmetic of ``patch_grid_shape``).
    """

    def __init__(self, nominal_shape, base_channels: int = 64,
                 in_channels: int = 1, layers: int = 4):
        super().__init__()
        self.nominal_shape = tuple(nominal_shape)
        dims = list(self.nominal_shape)
        blocks = []
        prev = in_channels
        for i in range(layers):
            kernel = tuple(min(4, n + 2) for n in dims)
            conv = nn.Conv3d(prev, base_channels * (2 ** i), kernel_size=kernel,
                             stride=2, padding=1)
            post = [nn.LeakyReLU(0.2, inplace=True)]
            if i > 0:
                post.insert(0, nn.BatchNorm3d(base_channels * (2 ** i)))
            blocks.append(nn.Sequential(conv, *post))
            dims = [((n + 2 - k) // 2) + 1 for n, k in zip(dims, kernel)]
            prev = base_channels * (2 ** i)
        self.blocks = nn.ModuleList(blocks)
        self.min_sizes = self._minimum_input()
        self.project = nn.Conv3d(prev, 1, kernel_size=3, stride=1, padding=1)

    def _minimum_input(self) -> tuple:
        # smallest input for which every conv keeps a positive extent
        mins = []
        for axis in range(3):
            n = 1
            for block in reversed(self.blocks):
                k = block[0].kernel_size[axis]
                n = max((n - 1) * 2 + k - 2, 1)
            mins.append(n)
        return tuple(mins)

    def forward(self, x: torch.Tensor, return_features: bool = False):
        if any(s < m for s, m in zip(x.shape[2:], self.min_sizes)):
            raise ValidationError(
                f"input {tuple(x.shape[2:])} below minimum size {self.min_sizes}")
        feats = []
        h = x
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        logits = self.project(h)
        return (logits, feats) if return_features else logits


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class RefinerConfig:
    base_channels: int = 64
    disc_channels: int = 64
    alpha: float = 10.0
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    epochs: int = 60
    batch_size: int = 4
    conditional: bool = False   # concatenate the structural input into D
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")


@dataclass
class RefinerCheckpoint:
    config: RefinerConfig
    generator_state: dict
    discriminator_state: dict
    volume_shape: tuple
    history: list = field(default_factory=list)   # per-epoch loss dicts

    def build_generator(self) -> RefinerGenerator:
        gen = RefinerGenerator(self.config.base_channels)
        gen.load_state_dict(self.generator_state)
        return gen.eval()

    def save(self, path) -> None:
        torch.save({"format": CHECKPOINT_FORMAT, "stage": "refiner",
                    "config": dataclasses.asdict(self.config),
                    "generator": self.generator_state,
                    "discriminator": self.discriminator_state,
                    "volume_shape": tuple(self.volume_shape),
                    "history": self.history}, path)

    @classmethod
    def load(cls, path) -> "RefinerCheckpoint":
        payload = torch.load(path, weights_only=False)
        if payload.get("format") != CHECKPOINT_FORMAT or payload.get("stage") != "refiner":
            raise ValidationError(f"{path}: not a refiner checkpoint")
        cfg = RefinerConfig(**payload["config"])
        return cls(config=cfg, generator_state=payload["generator"],
                   discriminator_state=payload["discriminator"],
                   volume_shape=tuple(payload["volume_shape"]),
                   history=payload["history"])


def _volume_batch(volumes) -> torch.Tensor:
    arrs = [v.values if isinstance(v, Volume3D) else np.asarray(v, np.float32)
            for v in volumes]
    return torch.from_numpy(np.stack(arrs)[:, None].astype(np.float32))


def train_refiner(pairs, cfg: RefinerConfig) -> RefinerCheckpoint:
    """Adversarially train the refiner on (structural volume, real volume)
    pairs produced with a frozen expansion model upstream."""
    if not pairs:
        raise ValidationError("empty refiner training set")
    torch.manual_seed(cfg.seed)
    torch.set_num_threads(max(torch.get_num_threads(), 1))

    v_e = _volume_batch([p[0] for p in pairs])
    v_real = _volume_batch([p[1] for p in pairs])
    if v_e.shape != v_real.shape:
        raise ValidationError("structural/real volume shapes disagree")
    shape = tuple(v_e.shape[2:])

    gen = RefinerGenerator(cfg.base_channels)
    disc_in = 2 if cfg.conditional else 1
    disc = PatchDiscriminator3D(shape, cfg.disc_channels, in_channels=disc_in)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=cfg.betas)

    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        sums = {"loss_g": 0.0, "loss_d": 0.0, "l1": 0.0, "adv_g": 0.0}
        n_batches = 0
        for start in range(0, len(pairs), cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size].copy())
            xe, xr = v_e[idx], v_real[idx]

            def disc_input(vol):
                return torch.cat([vol, xe], dim=1) if cfg.conditional else vol

            fake = gen(xe)
            d_loss = adversarial_loss_d(disc(disc_input(xr)),
                                        disc(disc_input(fake.detach())))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            adv = adversarial_loss_g(disc(disc_input(fake)))
            l1 = l1_fidelity(xr, fake)
            g_loss = adv + cfg.alpha * l1
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            sums["loss_g"] += float(g_loss.item())
            sums["loss_d"] += float(d_loss.item())
            sums["l1"] += float(l1.item())
            sums["adv_g"] += float(adv.item())
            n_batches += 1
        history.append({k: v / n_batches for k, v in sums.items()})

    return RefinerCheckpoint(config=cfg, generator_state=gen.state_dict(),
                             discriminator_state=disc.state_dict(),
                             volume_shape=shape, history=history)


def refiner_forward(ckpt: RefinerCheckpoint, v_e: Volume3D) -> Volume3D:
    """Render one structural volume with the trained refiner (eval mode)."""
    if tuple(v_e.values.shape) != tuple(ckpt.volume_shape):
        raise ValidationError(
            f"volume shape {v_e.values.shape} does not match checkpoint "
            f"{ckpt.volume_shape}")
    gen = ckpt.build_generator()
    with torch.no_grad():
        out = gen(torch.from_numpy(v_e.values[None, None].copy()))
    return Volume3D(np.clip(out[0, 0].numpy(), 0.0, 1.0))
