"""End-to-end orchestration: run configuration, stage training with loss
logging, full dataset synthesis, evaluation reports, and view export.

A run is described by one JSON config (see ``PipelineConfig``); every command
re-derives its randomness from the single global seed, so the whole
make-phantoms -> train -> synthesize -> evaluate chain is reproducible
byte-for-byte on one machine.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import expansion as xp
from . import masterprint as mp
from . import metrics as mx
from . import phantom as ph
from . import refiner as rf
from . import styletransfer as st
from .tensorio import (DatasetManifest, Image2D, ValidationError, Volume3D,
                       detect_surface, extract_enface_layer, read_binary_image,
                       read_image, read_volume, write_binary_image, write_image,
                       write_volume, z_mean_projection)

CONFIG_FORMAT = "octfp-config-v1"
STAGES = ("style", "expansion", "refiner")


class MissingPrerequisiteError(RuntimeError):
    """A stage was invoked before its upstream artifact exists."""


@dataclass
class PipelineConfig:
    """One experiment: resolutions, dataset sizes, phantom physics, and the
    three stage configs. Resolutions must agree across stages."""

    seed: int = 0
    height: int = 64
    width: int = 64
    depth: int = 8
    identities: int = 64
    impressions: int = 4
    synth_impressions: int = 15
    out_root: str = "runs/default"
    fid_slice_step: int = 4
    embedder_seed: int = 0
    phantom: ph.PhantomParams = field(default_factory=ph.PhantomParams)
    style: st.StyleStageConfig = field(default_factory=st.StyleStageConfig)
    expansion: xp.ExpansionConfig = field(default_factory=xp.ExpansionConfig.desk)
    refiner: rf.RefinerConfig = field(
        default_factory=lambda: rf.RefinerConfig(base_channels=8, disc_channels=8,
                                                 epochs=5))

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.identities < 1 or self.impressions < 1:
            raise ValidationError("dataset sizes must be positive")
        if self.phantom.depth != self.depth:
            raise ValidationError("phantom depth disagrees with the pipeline depth")
        if (self.expansion.height, self.expansion.width) != (self.height, self.width):
            raise ValidationError("expansion resolution disagrees with the pipeline")
        if self.expansion.depth != self.depth:
            raise ValidationError("expansion depth disagrees with the pipeline")

    def to_json(self) -> str:
        payload = {"format": CONFIG_FORMAT}
        payload.update(dataclasses.asdict(self))
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        payload = json.loads(text)
        if payload.pop("format", None) != CONFIG_FORMAT:
            raise ValidationError("unknown config format")
        payload["phantom"] = ph.PhantomParams(**payload.get("phantom", {}))
        style = payload.get("style", {})
        style["betas"] = tuple(style.get("betas", (0.5, 0.999)))
        payload["style"] = st.StyleStageConfig(**style)
        exp = payload.get("expansion", {})
        exp["betas"] = tuple(exp.get("betas", (0.9, 0.999)))
        exp["channel_multipliers"] = tuple(exp.get("channel_multipliers", (1, 2, 4, 8)))
        payload["expansion"] = xp.ExpansionConfig(**exp)
        refiner = payload.get("refiner", {})
        refiner["betas"] = tuple(refiner.get("betas", (0.5, 0.999)))
        payload["refiner"] = rf.RefinerConfig(**refiner)
        return cls(**payload)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def desk(cls, **overrides) -> "PipelineConfig":
        return cls(**overrides)

    def with_overrides(self, seed=None, out=None) -> "PipelineConfig":
        cfg = dataclasses.replace(self)
        if seed is not None:
            cfg.seed = int(seed)
            cfg.style = dataclasses.replace(cfg.style, seed=int(seed))
            cfg.expansion = dataclasses.replace(cfg.expansion, seed=int(seed))
            cfg.refiner = dataclasses.replace(cfg.refiner, seed=int(seed))
        if out is not None:
            cfg.out_root = str(out)
        return cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def make_phantoms(cfg: PipelineConfig, workers: int = 1) -> DatasetManifest:
    """Generate the phantom training corpus under ``<out_root>/phantoms``."""
    cfg.validate()
    out = Path(cfg.out_root) / "phantoms"
    manifest = ph.build_phantom_dataset(
        cfg.identities, cfg.impressions, cfg.phantom, cfg.seed, out,
        size=(cfg.height, cfg.width), workers=workers)
    return manifest


def _checkpoint_path(cfg: PipelineConfig, stage: str) -> Path:
    return Path(cfg.out_root) / "checkpoints" / f"{stage}.pt"


def _write_loss_csv(history: list, path: Path) -> None:
    if not history:
        return
    total_key = "loss" if "loss" in history[0] else "loss_g"
    rest_keys = [k for k in history[0] if k != total_key]
    names = [k if k.startswith("loss") else f"loss_{k}" for k in rest_keys]
    lines = ["epoch,loss_total," + ",".join(names)]
    for epoch, row in enumerate(history):
        rest = [f"{row[k]:.9g}" for k in rest_keys]
        lines.append(f"{epoch},{row[total_key]:.9g}," + ",".join(rest))
    path.write_text("\n".join(lines) + "\n")


def _load_style_pairs(manifest: DatasetManifest) -> list:
    return [(read_binary_image(manifest.resolve(e, "print")),
             read_image(manifest.resolve(e, "zmean"))) for e in manifest.entries]


def train_stage(stage: str, cfg: PipelineConfig,
                manifest: DatasetManifest) -> Path:
    """Train one stage from the phantom manifest; writes a checkpoint and a
    per-epoch loss CSV. The refiner refuses to start without an expansion
    checkpoint (its inputs are frozen expansion outputs)."""
    if stage not in STAGES:
        raise ValidationError(f"unknown stage {stage!r}, expected one of {STAGES}")
    cfg.validate()
    ckpt_path = _checkpoint_path(cfg, stage)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)

    if stage == "style":
        pairs = _load_style_pairs(manifest)
        pool = st.build_exemplar_pool(
            [read_image(manifest.resolve(e, "zmean")) for e in manifest.entries],
            seed=cfg.seed)
        ckpt = st.train_style_stage(pairs, pool, cfg.style)
        history = ckpt.history
        ckpt.save(ckpt_path)
    elif stage == "expansion":
        pairs = [(read_image(manifest.resolve(e, "zmean")),
                  read_volume(manifest.resolve(e, "volume")))
                 for e in manifest.entries]
        ckpt = xp.train_expansion(pairs, cfg.expansion)
        history = ckpt.history
        ckpt.save(ckpt_path)
    else:
        expansion_path = _checkpoint_path(cfg, "expansion")
        if not expansion_path.exists():
            raise MissingPrerequisiteError(
                "refiner training requires the expansion stage checkpoint "
                f"(missing: {expansion_path})")
        exp_ckpt = xp.ExpansionCheckpoint.load(expansion_path)
        pairs = []
        for e in manifest.entries:
            zmean = read_image(manifest.resolve(e, "zmean"))
            v_e = xp.expansion_forward(exp_ckpt, zmean)
            pairs.append((v_e, read_volume(manifest.resolve(e, "volume"))))
        ckpt = rf.train_refiner(pairs, cfg.refiner)
        history = ckpt.history
        ckpt.save(ckpt_path)

    _write_loss_csv(history, ckpt_path.with_name(f"{stage}_losses.csv"))
    return ckpt_path


@dataclass
class SynthesisRecord:
    identity_id: int
    impression_id: int
    seed: int
    paths: dict          # stage -> relative path (i_id, i_m, i_s, v_e, v_r)
    elapsed_s: float


def _synthesize_identity(args) -> list:
    (identity, cfg, out_dir, style_ckpt, exp_ckpt, ref_ckpt, pool) = args
    master = ph.build_identity_print(cfg.seed + 0x5EED, identity,
                                     (cfg.height, cfg.width))
    records = []
    for imp in range(cfg.synth_impressions):
        t0 = time.perf_counter()
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed + 0x5EED, identity, imp]))
        spec = mp.random_distortion(rng, (cfg.height, cfg.width))
        warped = mp.tps_warp_image(master, mp.distortion_to_warp(spec))
        i_m = mp.crop_impression(warped, spec)
        category = st.print_content_category(i_m)
        bucket = pool.categories[category]
        exemplar = bucket[int(rng.integers(len(bucket)))]
        i_s = st.style_generator_forward(style_ckpt, i_m, exemplar)
        v_e = xp.expansion_forward(exp_ckpt, i_s)
        v_r = rf.refiner_forward(ref_ckpt, v_e)

        rel = Path(f"id_{identity:04d}") / f"imp_{imp:02d}"
        (out_dir / rel).mkdir(parents=True, exist_ok=True)
        write_binary_image(master, out_dir / rel / "i_id.p2v")
        write_binary_image(i_m, out_dir / rel / "i_m.p2v")
        write_image(i_s, out_dir / rel / "i_s.p2v")
        write_volume(v_e, out_dir / rel / "v_e.p2v")
        write_volume(v_r, out_dir / rel / "v_r.p2v")
        records.append(SynthesisRecord(
            identity_id=identity, impression_id=imp,
            seed=ph.derive_seed(cfg.seed + 0x5EED, identity, imp),
            paths={k: str(rel / f"{k}.p2v")
                   for k in ("i_id", "i_m", "i_s", "v_e", "v_r")},
            elapsed_s=round(time.perf_counter() - t0, 4)))
    return records


def synthesize(cfg: PipelineConfig, n_identities: int,
               impressions: int | None = None, workers: int = 1) -> Path:
    """Run the full three-stage chain for new identities and persist every
    intermediate artifact. Requires all three stage checkpoints."""
    cfg.validate()
    for stage in STAGES:
        if not _checkpoint_path(cfg, stage).exists():
            raise MissingPrerequisiteError(
                f"synthesis requires the {stage} checkpoint "
                f"(missing: {_checkpoint_path(cfg, stage)})")
    if impressions is not None:
        cfg = dataclasses.replace(cfg, synth_impressions=int(impressions))
    style_ckpt = st.StyleCheckpoint.load(_checkpoint_path(cfg, "style"))
    exp_ckpt = xp.ExpansionCheckpoint.load(_checkpoint_path(cfg, "expansion"))
    ref_ckpt = rf.RefinerCheckpoint.load(_checkpoint_path(cfg, "refiner"))
    pool = style_ckpt.pool()

    out_dir = Path(cfg.out_root) / "synthetic"
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(identity, cfg, out_dir, style_ckpt, exp_ckpt, ref_ckpt, pool)
             for identity in range(n_identities)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool_exec:
            groups = list(pool_exec.map(_synthesize_identity, tasks))
    else:
        groups = [_synthesize_identity(t) for t in tasks]

    records = [r for group in groups for r in group]
    manifest_path = out_dir / "synthesis.json"
    manifest_path.write_text(json.dumps({
        "format": "octfp-synthesis-v1",
        "records": [dataclasses.asdict(r) for r in records],
    }, indent=1, sort_keys=True))
    return manifest_path


def load_synthesis_records(path) -> list:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "octfp-synthesis-v1":
        raise ValidationError(f"{path}: not a synthesis manifest")
    return [SynthesisRecord(**r) for r in payload["records"]]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _load_volume_sets(path) -> dict:
    """Volumes grouped by role from either manifest kind.

    Phantom manifests expose their volumes as every role; synthesis manifests
    map v_e -> structural and v_r -> refined/real.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not a JSON manifest") from exc
    root = path.parent
    if payload.get("format") == "octfp-manifest-v1":
        manifest = DatasetManifest.load(path)
        vols = [read_volume(manifest.resolve(e, "volume")) for e in manifest.entries]
        return {"real": vols, "structural": vols, "refined": vols}
    if payload.get("format") == "octfp-synthesis-v1":
        records = load_synthesis_records(path)
        v_e = [read_volume(root / r.paths["v_e"]) for r in records]
        v_r = [read_volume(root / r.paths["v_r"]) for r in records]
        return {"real": v_r, "structural": v_e, "refined": v_r}
    raise ValidationError(f"{path}: unrecognized manifest format")


def evaluate(cfg: PipelineConfig, manifest_real, manifest_fake,
             recognition: bool = False) -> dict:
    """FVD over volumes and slice-level FID for the structural and refined
    sets against the real set, using the configured deterministic embedder.
    Optionally trains the tiny recognition embedder on the fake volumes and
    reports EER / TAR against the real manifest."""
    cfg.validate()
    real = _load_volume_sets(manifest_real)["real"]
    fake = _load_volume_sets(manifest_fake)
    if len(real) < 2 or len(fake["structural"]) < 2:
        raise ValidationError("need at least 2 volumes per set")

    embedder = mx.RandomConvEmbedder(seed=cfg.embedder_seed)

    def slices(vols):
        out = []
        for v in vols:
            out.extend(mx.bscan_slices(v, step=cfg.fid_slice_step))
        return out

    report = {
        "embedder": embedder.identifier,
        "n_real": len(real),
        "n_fake": len(fake["structural"]),
        "fvd_structural": mx.fvd_score(fake["structural"], real, embedder),
        "fvd_refined": mx.fvd_score(fake["refined"], real, embedder),
        "fid_structural": mx.fid_score(slices(fake["structural"]), slices(real),
                                       embedder),
        "fid_refined": mx.fid_score(slices(fake["refined"]), slices(real), embedder),
    }

    if recognition:
        fake_manifest = Path(manifest_fake)
        payload = json.loads(fake_manifest.read_text())
        if payload.get("format") == "octfp-synthesis-v1":
            records = load_synthesis_records(fake_manifest)
            train_pairs = [(r.identity_id,
                            read_volume(fake_manifest.parent / r.paths["v_r"]).values)
                           for r in records]
        else:
            train_manifest = DatasetManifest.load(fake_manifest)
            train_pairs = [(e.identity_id,
                            read_volume(train_manifest.resolve(e, "volume")).values)
                           for e in train_manifest.entries]
        emb = mx.tiny_embedder_train(train_pairs,
                                     mx.TinyEmbedderConfig(seed=cfg.seed))
        real_manifest = DatasetManifest.load(manifest_real)
        labels = [e.identity_id for e in real_manifest.entries]
        feats = [emb(read_volume(real_manifest.resolve(e, "volume")))
                 for e in real_manifest.entries]
        scores = mx.all_pairs_scores(labels, feats)
        report["eer"] = mx.eer(scores)
        report["tar_at_far_0.001"] = mx.tar_at_far(scores, 0.001)

    return report


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# View export
# ---------------------------------------------------------------------------

def _save_gray_png(values: np.ndarray, path) -> None:
    quantized = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(quantized, mode="L").save(path)


def export_views(volume_path, out_dir, surface_threshold: float = 0.3,
                 junction_offset: int | None = None, band: int = 2) -> list:
    """Export inspection images for a stored volume: three B-scans, the
    depth-mean projection, and surface/junction en-face extractions."""
    v = read_volume(volume_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    for frac in (0.25, 0.5, 0.75):
        y = min(int(v.height * frac), v.height - 1)
        path = out_dir / f"bscan_y{y:04d}.png"
        _save_gray_png(v.values[:, y, :], path)
        written.append(path)

    zmean = z_mean_projection(v)
    path = out_dir / "zmean.png"
    _save_gray_png(zmean.values, path)
    written.append(path)

    surface = detect_surface(v, threshold=surface_threshold)
    offset = junction_offset if junction_offset is not None else max(v.depth // 3, 1)
    junction = np.clip(surface + offset, 0, v.depth - 1)
    for name, depth_map in (("enface_surface", surface), ("enface_junction", junction)):
        path = out_dir / f"{name}.png"
        _save_gray_png(extract_enface_layer(v, depth_map, band).values, path)
        written.append(path)
    return written
