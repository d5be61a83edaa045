"""2D-to-3D structure expansion: a four-level U-Net with a 2D encoder, a
seeded depth lift at the bottleneck, and a 3D transposed-convolution decoder
that grows the depth axis, trained with voxel BCE plus a 3D-SSIM term.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import ssim3d
from .refiner import CHECKPOINT_FORMAT
from .tensorio import Image2D, ValidationError, Volume3D

BCE_EPS = 1e-7


@dataclass
class ExpansionConfig:
    levels: int = 4                       # fixed by the architecture
    base_channels: int = 64
    channel_multipliers: tuple = (1, 2, 4, 8)
    bottleneck_multiplier: int = 16
    depth: int = 32                       # target D
    height: int = 256                     # target H'
    width: int = 256                      # target W'
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    epochs: int = 40
    batch_size: int = 4
    ssim_window: int = 7
    ssim_sigma: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.levels != 4:
            raise ValidationError("the expansion U-Net is four-level by design")
        if len(self.channel_multipliers) != 4:
            raise ValidationError("need one channel multiplier per level")
        if self.depth < 8 or self.height < 8 or self.width < 8:
            raise ValidationError("target dims must be >= 8")
        if self.height % 16 or self.width % 16:
            raise ValidationError("H', W' must be divisible by 16 (four 2x pools)")

    @classmethod
    def desk(cls, depth: int = 8, height: int = 64, width: int = 64,
             **overrides) -> "ExpansionConfig":
        """Small-footprint profile for CPU smoke runs."""
        kwargs = dict(base_channels=8, depth=depth, height=height, width=width,
                      epochs=5)
        kwargs.update(overrides)
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

class ConvBlock2D(nn.Module):
    """Conv -> InstanceNorm2d -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
            nn.InstanceNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class Lift2Dto3D(nn.Module):
    """Unsqueeze a unit depth axis, then 3x3x3 conv + InstanceNorm3d + ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1),
            nn.InstanceNorm3d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x.unsqueeze(2))


def lift_2d_to_3d(features: torch.Tensor, module: Lift2Dto3D | None = None) -> torch.Tensor:
    """Seeded 2D-to-3D lift; output has a depth axis of exactly 1."""
    t = features
    unbatched = t.dim() == 3
    if unbatched:
        t = t[None]
    if module is None:
        module = Lift2Dto3D(t.shape[1], t.shape[1])
    out = module(t)
    return out[0] if unbatched else out


def broadcast_skip(enc_features: torch.Tensor, target: tuple) -> torch.Tensor:
    """Align a 2D skip to a 3D decoder scale: resize (h, w) -> (h', w') with
    bilinear interpolation, then replicate along a new depth axis, so every
    depth slice is identical."""
    d, h, w = target
    if d < 1 or h < 1 or w < 1:
        raise ValidationError("target dims must be positive")
    t = enc_features
    unbatched = t.dim() == 3
    if unbatched:
        t = t[None]
    if t.shape[2:] != (h, w):
        t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    out = t.unsqueeze(2).expand(-1, -1, d, -1, -1)
    return out[0] if unbatched else out


class ExpansionNet(nn.Module):
    """Four 2D encoder levels (ConvBlock2D x2 + max-pool) down to H/16 x W/16,
    a 2D bottleneck, the depth lift, then four ConvTranspose3d stages with
    depth-broadcast skips; a final trilinear resize pins the exact output
    shape before the 1x1x1 conv + sigmoid."""

    def __init__(self, cfg: ExpansionConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * m for m in cfg.channel_multipliers]
        bneck = cfg.base_channels * cfg.bottleneck_multiplier

        self.enc = nn.ModuleList()
        prev = 1
        for ch in chans:
            self.enc.append(nn.Sequential(ConvBlock2D(prev, ch), ConvBlock2D(ch, ch)))
            prev = ch
        self.pool = nn.MaxPool2d(2)
        self.bottleneck2d = nn.Sequential(ConvBlock2D(prev, bneck),
                                          ConvBlock2D(bneck, bneck))
        self.lift = Lift2Dto3D(bneck, chans[3])

        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        dec_out = [chans[3], chans[2], chans[1], chans[0]]
        prev3d = chans[3]
        for i, out_ch in enumerate(dec_out):
            self.up.append(nn.ConvTranspose3d(prev3d, out_ch, kernel_size=2, stride=2))
            skip_ch = chans[3 - i]
            self.dec.append(nn.Sequential(
                nn.Conv3d(out_ch + skip_ch, out_ch, kernel_size=3, padding=1),
                nn.InstanceNorm3d(out_ch),
                nn.ReLU(inplace=True),
            ))
            prev3d = out_ch
        self.head = nn.Conv3d(dec_out[-1], 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValidationError("expected input of shape [B, 1, H, W]")
        h_in, w_in = x.shape[2], x.shape[3]
        if h_in % 16 or w_in % 16:
            raise ValidationError(f"input {h_in}x{w_in} not divisible by 16")
        skips = []
        h = x
        for enc in self.enc:
            h = enc(h)
            skips.append(h)
            h = self.pool(h)
        h = self.bottleneck2d(h)
        v = self.lift(h)
        for i, (up, dec) in enumerate(zip(self.up, self.dec)):
            v = up(v)
            skip = broadcast_skip(skips[3 - i], tuple(v.shape[2:]))
            v = dec(torch.cat([v, skip], dim=1))
        target = (self.cfg.depth, h_in, w_in)
        if tuple(v.shape[2:]) != target:
            v = F.interpolate(v, size=target, mode="trilinear", align_corners=False)
        return torch.sigmoid(self.head(v))


# ---------------------------------------------------------------------------
# Loss and training
# ---------------------------------------------------------------------------

def expansion_loss(v_pred, v_real, *, bce_eps: float = BCE_EPS,
                   ssim_window: int = 7, ssim_sigma: float = 1.5) -> torch.Tensor:
    """Voxelwise binary cross-entropy plus (1 - 3D-SSIM).

    The SSIM similarity enters with a flipped sign so that the optimum is
    v_pred == v_real; predictions are clamped away from {0, 1} before the logs.
    """
    pred = v_pred.values if isinstance(v_pred, Volume3D) else v_pred
    real = v_real.values if isinstance(v_real, Volume3D) else v_real
    pred = torch.as_tensor(np.asarray(pred)) if not isinstance(pred, torch.Tensor) else pred
    real = torch.as_tensor(np.asarray(real)) if not isinstance(real, torch.Tensor) else real
    if pred.shape != real.shape:
        raise ValidationError(
            f"shape mismatch {tuple(pred.shape)} vs {tuple(real.shape)}")
    dtype = torch.promote_types(pred.dtype, real.dtype)
    if not dtype.is_floating_point:
        dtype = torch.float64
    pred, real = pred.to(dtype), real.to(dtype)
    clamped = pred.clamp(bce_eps, 1.0 - bce_eps)
    bce = -(real * clamped.log() + (1.0 - real) * (1.0 - clamped).log()).mean()

    # ssim operates on unbatched volumes; average it over any leading dims
    flat_p = pred.reshape(-1, *pred.shape[-3:])
    flat_r = real.reshape(-1, *real.shape[-3:])
    sims = torch.stack([ssim3d(p, r, window=ssim_window, sigma=ssim_sigma)
                        for p, r in zip(flat_p, flat_r)])
    return bce + (1.0 - sims.mean())


@dataclass
class ExpansionCheckpoint:
    config: ExpansionConfig
    state: dict
    history: list = field(default_factory=list)

    def build(self) -> ExpansionNet:
        net = ExpansionNet(self.config)
        net.load_state_dict(self.state)
        return net.eval()

    def save(self, path) -> None:
        torch.save({"format": CHECKPOINT_FORMAT, "stage": "expansion",
                    "config": dataclasses.asdict(self.config),
                    "state": self.state, "history": self.history}, path)

    @classmethod
    def load(cls, path) -> "ExpansionCheckpoint":
        payload = torch.load(path, weights_only=False)
        if payload.get("format") != CHECKPOINT_FORMAT or payload.get("stage") != "expansion":
            raise ValidationError(f"{path}: not an expansion checkpoint")
        cfg_dict = dict(payload["config"])
        cfg_dict["channel_multipliers"] = tuple(cfg_dict["channel_multipliers"])
        cfg_dict["betas"] = tuple(cfg_dict["betas"])
        return cls(config=ExpansionConfig(**cfg_dict), state=payload["state"],
                   history=payload["history"])


def train_expansion(pairs, cfg: ExpansionConfig) -> ExpansionCheckpoint:
    """Train on (projection image, real volume) pairs with Adam."""
    if not pairs:
        raise ValidationError("empty expansion training set")
    torch.manual_seed(cfg.seed)

    imgs = np.stack([p[0].values if isinstance(p[0], Image2D) else np.asarray(p[0])
                     for p in pairs])[:, None].astype(np.float32)
    vols = np.stack([p[1].values if isinstance(p[1], Volume3D) else np.asarray(p[1])
                     for p in pairs])[:, None].astype(np.float32)
    xs = torch.from_numpy(imgs)
    ys = torch.from_numpy(vols)
    if xs.shape[2] != cfg.height or xs.shape[3] != cfg.width:
        raise ValidationError("training images do not match the configured size")
    if ys.shape[2] != cfg.depth:
        raise ValidationError("training volumes do not match the configured depth")

    net = ExpansionNet(cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        sums = {"loss": 0.0, "bce": 0.0, "ssim_term": 0.0}
        n_batches = 0
        for start in range(0, len(pairs), cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size].copy())
            pred = net(xs[idx])
            target = ys[idx]
            clamped = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
            bce = -(target * clamped.log()
                    + (1.0 - target) * (1.0 - clamped).log()).mean()
            sims = torch.stack([
                ssim3d(p[0], t[0], window=cfg.ssim_window, sigma=cfg.ssim_sigma)
                for p, t in zip(pred, target)])
            loss = bce + (1.0 - sims.mean())
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["loss"] += float(loss.item())
            sums["bce"] += float(bce.item())
            sums["ssim_term"] += float(1.0 - sims.mean().item())
            n_batches += 1
        history.append({k: v / n_batches for k, v in sums.items()})

    return ExpansionCheckpoint(config=cfg, state=net.state_dict(), history=history)


def expansion_forward(ckpt: ExpansionCheckpoint, img: Image2D) -> Volume3D:
    """Lift one projection image into a structural volume (eval mode)."""
    cfg = ckpt.config
    if img.height != cfg.height or img.width != cfg.width:
        raise ValidationError(
            f"input {img.height}x{img.width} does not match configured "
            f"{cfg.height}x{cfg.width}")
    net = ckpt.build()
    with torch.no_grad():
        out = net(torch.from_numpy(img.values[None, None].copy()))
    return Volume3D(np.clip(out[0, 0].numpy(), 0.0, 1.0))
