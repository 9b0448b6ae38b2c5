"""Experiment orchestration: the six training settings, optimizer schedules,
alternating adversarial updates, cross-validation, and fold-ensemble inference.

Settings: BASELINE (plain cross-entropy), MIXUP / MIXUP_NO_WD (interpolated
loss, with or without weight decay), UDA1 (output-space adversarial
adaptation), UDA2 (adds an auxiliary dilated-pyramid head with its own
discriminator), MIXUP_UDA1 (mixup on the segmentation term only; an extra
no-grad pass with unmixed images feeds the discriminator).

One master seed fans out into isolated named streams (init, shuffles, mixup,
augmentation), so enabling one component never perturbs another's draws.
"""

from __future__ import annotations

import enum
import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from .data_model import Manifest, DomainRole, ScanRecord, Volume, load_scan, make_cv_splits, subject_wise_partition
from .errors import ConfigError, DataError, DivergenceError, ParseError, ShapeError
from .evaluation import volumetric_dsc
from .losses import UdaLossWeights, adv_loss, discr_loss, make_mixup, mce_loss, mixup_loss, segmenter_criterion
from .networks import (
    AsppConfig,
    DiscriminatorConfig,
    SegNetConfig,
    SegmentationNetwork,
    build_discriminator,
    build_segmenter,
    load_checkpoint,
    save_checkpoint,
)
from .preprocess import AugmentConfig, PreprocessConfig, augment, preprocess_slice
from .seeding import derive_rng, derive_seed


class Setting(enum.Enum):
    BASELINE = "BASELINE"
    MIXUP = "MIXUP"
    MIXUP_NO_WD = "MIXUP_NO_WD"
    UDA1 = "UDA1"
    UDA2 = "UDA2"
    MIXUP_UDA1 = "MIXUP_UDA1"


UDA_SETTINGS = {Setting.UDA1, Setting.UDA2, Setting.MIXUP_UDA1}
MIXUP_SETTINGS = {Setting.MIXUP, Setting.MIXUP_NO_WD, Setting.MIXUP_UDA1}

WEIGHT_DECAY_DEFAULT = 5e-5


@dataclass(frozen=True)
class ExperimentConfig:
    setting: Setting = Setting.BASELINE
    epochs: int = 50
    lr_segmenter: float = 1e-3
    lr_discriminator: float = 4e-5
    lr_drop_epoch: int = 30
    lr_drop_factor: float = 10.0
    weight_decay: float = WEIGHT_DECAY_DEFAULT
    mixup_alpha: float = 0.7
    uda_weights: UdaLossWeights = UdaLossWeights()
    batch_size: int = 16
    seed: int = 0
    fold_count: int = 5
    net: SegNetConfig = SegNetConfig()
    discriminator: DiscriminatorConfig = DiscriminatorConfig()
    aspp: AsppConfig = AsppConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    augment: AugmentConfig = AugmentConfig()
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    validate_each_epoch: bool = True
    # test hook: pins the mixup lambda without touching the draw stream
    mixup_lambda_override: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr_segmenter <= 0 or self.lr_discriminator <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.lr_drop_epoch <= self.epochs:
            raise ConfigError("lr_drop_epoch must lie within the epoch budget")
        if self.weight_decay < 0 or self.mixup_alpha <= 0:
            raise ConfigError("weight_decay must be >= 0 and mixup_alpha > 0")
        if self.batch_size < 1 or self.fold_count < 2:
            raise ConfigError("batch_size >= 1 and fold_count >= 2 required")


def default_config(setting: Setting, **overrides) -> ExperimentConfig:
    """Published hyperparameter schedule for each setting."""
    if setting in UDA_SETTINGS:
        base = dict(
            setting=setting,
            epochs=30,
            lr_segmenter=1e-4,
            lr_discriminator=4e-5,
            lr_drop_epoch=25,
            lr_drop_factor=10.0,
            weight_decay=0.0 if setting == Setting.MIXUP_UDA1 else WEIGHT_DECAY_DEFAULT,
        )
    else:
        base = dict(
            setting=setting,
            epochs=50,
            lr_segmenter=1e-3,
            lr_discriminator=4e-5,
            lr_drop_epoch=30,
            lr_drop_factor=10.0,
            weight_decay=0.0 if setting == Setting.MIXUP_NO_WD else WEIGHT_DECAY_DEFAULT,
        )
    base.update(overrides)
    return ExperimentConfig(**base)


def tiny_overrides() -> dict:
    """Reduced-scale knobs for CPU-sized runs."""
    return dict(
        net=SegNetConfig(base_filters=8, depth=4),
        preprocess=PreprocessConfig(crop_size=(96, 96)),
        batch_size=8,
    )


def lr_at_epoch(cfg: ExperimentConfig, epoch: int, which: str = "SEG") -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if which not in ("SEG", "DISC"):
        raise ConfigError(f"unknown network selector {which!r}")
    initial = cfg.lr_segmenter if which == "SEG" else cfg.lr_discriminator
    return initial if epoch < cfg.lr_drop_epoch else initial / cfg.lr_drop_factor


@dataclass
class TrainedFold:
    fold_index: int
    segmenter_checkpoint: Path
    discriminator_checkpoint: Optional[Path]
    training_curves: dict[str, list[float]]


# ---------------------------------------------------------------------------
# Data assembly
# ---------------------------------------------------------------------------


@dataclass
class SlicePool:
    """Preprocessed 2D slices of a record list, held in memory."""

    images: list[np.ndarray]
    labels: Optional[list[np.ndarray]]

    def __len__(self) -> int:
        return len(self.images)


def load_preprocessed_scan(
    record: ScanRecord, manifest: Manifest, pp_cfg: PreprocessConfig, with_mask: bool
):
    volume, mask = load_scan(manifest.resolve(record.volume_uri))
    if with_mask and mask is None:
        raise DataError(f"scan {record.scan_id!r} has no mask")
    bounds = None
    if pp_cfg.per_volume_percentiles:
        bounds = tuple(np.percentile(volume.voxels, [pp_cfg.pct_low, pp_cfg.pct_high]))
    imgs, labels = [], []
    for z in range(volume.slice_count):
        if with_mask:
            img, lab = preprocess_slice(
                volume.voxels[z], volume.pixel_spacing, pp_cfg, mask=mask.labels[z], bounds=bounds
            )
            labels.append(lab)
        else:
            img = preprocess_slice(volume.voxels[z], volume.pixel_spacing, pp_cfg, bounds=bounds)
        imgs.append(img)
    return np.stack(imgs), (np.stack(labels) if with_mask else None)


def build_slice_pool(
    records, manifest: Manifest, pp_cfg: PreprocessConfig, with_masks: bool
) -> SlicePool:
    images: list[np.ndarray] = []
    labels: list[np.ndarray] = [] if with_masks else None
    for record in records:
        imgs, labs = load_preprocessed_scan(record, manifest, pp_cfg, with_mask=with_masks)
        images.extend(imgs)
        if with_masks:
            labels.extend(labs)
    if not images:
        raise DataError("record list yielded no slices")
    return SlicePool(images=images, labels=labels)


def _cycled_shuffled(n: int, rng: np.random.Generator):
    while True:
        for idx in rng.permutation(n):
            yield int(idx)


def _assemble_batch(pool: SlicePool, indices, aug_cfg: AugmentConfig, rng: np.random.Generator, device):
    imgs, labs = [], []
    for i in indices:
        mask = pool.labels[i] if pool.labels is not None else None
        img, mask = augment(pool.images[i], mask, aug_cfg, rng)
        imgs.append(img)
        if mask is not None:
            labs.append(mask)
    x = torch.from_numpy(np.stack(imgs)).unsqueeze(1).to(device)
    y = torch.from_numpy(np.stack(labs).astype(np.int64)).to(device) if labs else None
    return x, y


def parameter_digest(net: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Fold training
# ---------------------------------------------------------------------------


def train_fold(
    cfg: ExperimentConfig,
    train_source: list[ScanRecord],
    train_target: Optional[list[ScanRecord]],
    validation: list[ScanRecord],
    manifest: Manifest,
    out_dir,
    fold_index: int = 0,
    device: str = "cpu",
) -> TrainedFold:
    """Train one cross-validation fold; fully deterministic given cfg.seed."""
    setting = cfg.setting
    uda = setting in UDA_SETTINGS
    use_mixup = setting in MIXUP_SETTINGS
    use_aux = setting == Setting.UDA2
    if not train_source:
        raise DataError("empty source training set")
    if uda and not train_target:
        raise ConfigError(f"{setting.value} requires unlabeled target records")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    src_pool = build_slice_pool(train_source, manifest, cfg.preprocess, with_masks=True)
    tgt_pool = build_slice_pool(train_target, manifest, cfg.preprocess, with_masks=False) if uda else None

    seg = build_segmenter(
        cfg.net, seed=derive_seed(cfg.seed, "init", fold_index), aspp=cfg.aspp if use_aux else None
    ).to(device)
    opt_seg = torch.optim.AdamW(
        seg.parameters(),
        lr=cfg.lr_segmenter,
        betas=cfg.adam_betas,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    disc = disc_aux = opt_disc = opt_disc_aux = None
    if uda:
        disc = build_discriminator(
            cfg.discriminator, cfg.net.class_count, seed=derive_seed(cfg.seed, "disc_init", fold_index)
        ).to(device)
        opt_disc = torch.optim.AdamW(
            disc.parameters(), lr=cfg.lr_discriminator, betas=cfg.adam_betas, eps=cfg.adam_eps, weight_decay=0.0
        )
        if use_aux:
            disc_aux = build_discriminator(
                cfg.discriminator, cfg.aspp.output_channels, seed=derive_seed(cfg.seed, "disc_aux_init", fold_index)
            ).to(device)
            opt_disc_aux = torch.optim.AdamW(
                disc_aux.parameters(), lr=cfg.lr_discriminator, betas=cfg.adam_betas, eps=cfg.adam_eps, weight_decay=0.0
            )

    shuffle_rng = derive_rng(cfg.seed, "shuffle", fold_index)
    tgt_rng = derive_rng(cfg.seed, "target_shuffle", fold_index)
    mix_rng = derive_rng(cfg.seed, "mixup", fold_index)
    aug_rng = derive_rng(cfg.seed, "augment", fold_index)
    aug_tgt_rng = derive_rng(cfg.seed, "augment_target", fold_index)
    tgt_stream = _cycled_shuffled(len(tgt_pool), tgt_rng) if uda else None
    aug_no_mask = replace(cfg.augment)  # image-only pool ignores the mask path

    curves: dict[str, list[float]] = defaultdict(list)
    weights = cfg.uda_weights

    for epoch in range(cfg.epochs):
        for group in opt_seg.param_groups:
            group["lr"] = lr_at_epoch(cfg, epoch, "SEG")
        for opt in (opt_disc, opt_disc_aux):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr_at_epoch(cfg, epoch, "DISC")

        sums: dict[str, float] = defaultdict(float)
        step_count = 0
        order = shuffle_rng.permutation(len(src_pool))
        seg.train()
        if disc is not None:
            disc.train()
        if disc_aux is not None:
            disc_aux.train()
        for start in range(0, len(order), cfg.batch_size):
            indices = order[start : start + cfg.batch_size]
            x, y = _assemble_batch(src_pool, indices, cfg.augment, aug_rng, device)

            # -- segmenter update --
            if use_mixup:
                mixed, draw = make_mixup(x, cfg.mixup_alpha, mix_rng, lam_override=cfg.mixup_lambda_override)
                seg_in = mixed
            else:
                draw = None
                seg_in = x
            if use_aux:
                logits, aux_logits = seg(seg_in, with_aux=True)
                aux_probs_src = torch.softmax(aux_logits, dim=1)
            else:
                logits = seg(seg_in)
                aux_probs_src = None
            probs_src = torch.softmax(logits, dim=1)
            l_segm = mixup_loss(probs_src, y, draw) if draw is not None else mce_loss(probs_src, y)
            l_adv = aux_l_segm = aux_l_adv = None
            probs_tgt = aux_probs_tgt = None
            if uda:
                t_idx = [next(tgt_stream) for _ in range(len(indices))]
                xt, _ = _assemble_batch(tgt_pool, t_idx, aug_no_mask, aug_tgt_rng, device)
                if use_aux:
                    t_logits, t_aux_logits = seg(xt, with_aux=True)
                    aux_probs_tgt = torch.softmax(t_aux_logits, dim=1)
                else:
                    t_logits = seg(xt)
                probs_tgt = torch.softmax(t_logits, dim=1)
                if weights.gamma_adv > 0:
                    l_adv = adv_loss(disc, probs_tgt)
                if use_aux:
                    aux_l_segm = mce_loss(aux_probs_src, y)
                    aux_l_adv = (
                        adv_loss(disc_aux, aux_probs_tgt)
                        if weights.aux_gamma_adv > 0
                        else torch.zeros((), device=x.device)
                    )
                loss = segmenter_criterion(l_segm, l_adv, weights, aux_l_segm, aux_l_adv)
            else:
                loss = l_segm
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite segmenter loss at epoch {epoch}")
            opt_seg.zero_grad(set_to_none=True)
            loss.backward()
            opt_seg.step()

            # -- discriminator update (segmenter outputs detached) --
            if uda:
                if setting == Setting.MIXUP_UDA1:
                    with torch.no_grad():
                        disc_src_in = torch.softmax(seg(x), dim=1)
                else:
                    disc_src_in = probs_src.detach()
                d_loss = discr_loss(disc, disc_src_in, probs_tgt.detach())
                if not torch.isfinite(d_loss):
                    raise DivergenceError(f"non-finite discriminator loss at epoch {epoch}")
                opt_disc.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_disc.step()
                sums["l_discr"] += float(d_loss.detach())
                if use_aux:
                    d2_loss = discr_loss(disc_aux, aux_probs_src.detach(), aux_probs_tgt.detach())
                    opt_disc_aux.zero_grad(set_to_none=True)
                    d2_loss.backward()
                    opt_disc_aux.step()
                    sums["l_discr_aux"] += float(d2_loss.detach())

            sums["l_segm"] += float(l_segm.detach())
            sums["l_total"] += float(loss.detach())
            if l_adv is not None:
                sums["l_adv"] += float(l_adv.detach())
            if aux_l_segm is not None:
                sums["l_segm_aux"] += float(aux_l_segm.detach())
                sums["l_adv_aux"] += float(aux_l_adv.detach())
            step_count += 1

        for key, total in sums.items():
            curves[key].append(total / max(1, step_count))
        if cfg.validate_each_epoch and validation:
            curves["val_dsc"].append(
                _validation_dsc(seg, validation, manifest, cfg.preprocess, device=device)
            )

    seg_dir = out_dir / "segmenter"
    meta = {
        "setting": setting.value,
        "fold_index": fold_index,
        "epoch": cfg.epochs,
        "seed": cfg.seed,
        "net": _dataclass_to_plain(cfg.net),
    }
    save_checkpoint(seg_dir, seg, meta)
    disc_dir = None
    if disc is not None:
        disc_dir = out_dir / "discriminator"
        save_checkpoint(disc_dir, disc, {**meta, "network": "discriminator"})
    _write_curves(curves, out_dir / "curves.csv")
    return TrainedFold(
        fold_index=fold_index,
        segmenter_checkpoint=seg_dir,
        discriminator_checkpoint=disc_dir,
        training_curves=dict(curves),
    )


def _write_curves(curves: dict[str, list[float]], path: Path) -> None:
    keys = sorted(curves)
    epochs = max((len(v) for v in curves.values()), default=0)
    lines = [",".join(["epoch"] + keys)]
    for e in range(epochs):
        row = [str(e)]
        for k in keys:
            row.append(f"{curves[k][e]:.8f}" if e < len(curves[k]) else "")
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _validation_dsc(
    seg: SegmentationNetwork,
    records,
    manifest: Manifest,
    pp_cfg: PreprocessConfig,
    device: str = "cpu",
    class_ids=(1, 2, 3, 4),
) -> float:
    """Mean (over scans and present classes) volumetric Dice."""
    seg.eval()
    scores = []
    with torch.no_grad():
        for record in records:
            imgs, labels = load_preprocessed_scan(record, manifest, pp_cfg, with_mask=True)
            probs = _predict_slices(seg, imgs, device=device)
            pred = probs.argmax(axis=1)
            present = [c for c in class_ids if (labels == c).any()]
            if present:
                scores.append(np.mean([volumetric_dsc(pred, labels, c) for c in present]))
    seg.train()
    return float(np.mean(scores)) if scores else float("nan")


def _predict_slices(seg: SegmentationNetwork, imgs: np.ndarray, device="cpu", batch_size: int = 8) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, len(imgs), batch_size):
            x = torch.from_numpy(imgs[start : start + batch_size]).unsqueeze(1).to(device)
            out.append(torch.softmax(seg(x), dim=1).cpu().numpy())
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Experiment driver and ensembling
# ---------------------------------------------------------------------------


def fold_plan(cfg: ExperimentConfig, manifest: Manifest):
    """Per-fold (index, train_source, train_target, validation) record lists.

    Source and target folds are paired by a seeded random permutation."""
    uda = cfg.setting in UDA_SETTINGS
    source_records = manifest.records_for_role(DomainRole.LABELED_SOURCE)
    if not source_records:
        raise ConfigError("manifest has no labeled source domain")
    target_records = manifest.records_for_role(DomainRole.UNLABELED_TARGET)
    if uda and not target_records:
        raise ConfigError(f"{cfg.setting.value} requires an unlabeled target domain")

    src_split = make_cv_splits(manifest, cfg.fold_count, derive_seed(cfg.seed, "splits", "source"))
    tgt_split = pairing = None
    if uda:
        tgt_split = make_cv_splits(
            manifest, cfg.fold_count, derive_seed(cfg.seed, "splits", "target"), role=DomainRole.UNLABELED_TARGET
        )
        pairing = derive_rng(cfg.seed, "fold_pairing").permutation(cfg.fold_count)

    plan = []
    for f in range(cfg.fold_count):
        train_src, val = subject_wise_partition(manifest, src_split, f)
        train_tgt = None
        if uda:
            train_tgt, _ = subject_wise_partition(manifest, tgt_split, int(pairing[f]))
        plan.append((f, train_src, train_tgt, val))
    return plan


def run_experiment(cfg: ExperimentConfig, manifest: Manifest, out_dir, device: str = "cpu") -> list[TrainedFold]:
    """Train all folds of one setting."""
    out_dir = Path(out_dir)
    folds = []
    for f, train_src, train_tgt, val in fold_plan(cfg, manifest):
        folds.append(
            train_fold(
                cfg,
                train_src,
                train_tgt,
                val,
                manifest,
                out_dir / f"fold_{f}",
                fold_index=f,
                device=device,
            )
        )
    return folds


def load_fold_segmenter(fold: TrainedFold) -> SegmentationNetwork:
    meta = yaml.safe_load((Path(fold.segmenter_checkpoint) / "meta.txt").read_text(encoding="utf-8"))
    net_cfg = SegNetConfig(**meta["net"])
    net = build_segmenter(net_cfg)
    load_checkpoint(fold.segmenter_checkpoint, net)
    net.eval()
    return net


def ensemble_predict(
    folds: list[TrainedFold],
    volume: Volume,
    preprocess_cfg: PreprocessConfig,
    device: str = "cpu",
    _nets: Optional[list[SegmentationNetwork]] = None,
) -> np.ndarray:
    """Average the per-slice softmax maps of all fold models; returns
    probabilities of shape (slices, classes, rows, cols)."""
    if not folds and not _nets:
        raise ShapeError("ensemble needs at least one fold")
    nets = _nets if _nets is not None else [load_fold_segmenter(f) for f in folds]
    imgs = np.stack(
        [preprocess_slice(volume.voxels[z], volume.pixel_spacing, preprocess_cfg) for z in range(volume.slice_count)]
    )
    acc = None
    for net in nets:
        probs = _predict_slices(net, imgs, device=device)
        acc = probs if acc is None else acc + probs
    return acc / len(nets)


def discover_folds(run_dir) -> list[TrainedFold]:
    """Rebuild TrainedFold handles from a run output directory."""
    run_dir = Path(run_dir)
    folds = []
    for fold_dir in sorted(run_dir.glob("fold_*")):
        idx = int(fold_dir.name.split("_")[1])
        disc_dir = fold_dir / "discriminator"
        folds.append(
            TrainedFold(
                fold_index=idx,
                segmenter_checkpoint=fold_dir / "segmenter",
                discriminator_checkpoint=disc_dir if disc_dir.exists() else None,
                training_curves={},
            )
        )
    if not folds:
        raise DataError(f"no fold checkpoints under {run_dir}")
    return folds


# ---------------------------------------------------------------------------
# Config file round-trip (hierarchical yaml; unknown keys are errors)
# ---------------------------------------------------------------------------

_SECTION_TYPES = {
    "uda_weights": UdaLossWeights,
    "net": SegNetConfig,
    "discriminator": DiscriminatorConfig,
    "aspp": AsppConfig,
    "preprocess": PreprocessConfig,
    "augment": AugmentConfig,
}


def _dataclass_to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _dataclass_to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, tuple):
        return [_dataclass_to_plain(v) for v in obj]
    return obj


def _plain_to_dataclass(cls, data: dict):
    allowed = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in _SECTION_TYPES and isinstance(value, dict):
            kwargs[name] = _plain_to_dataclass(_SECTION_TYPES[name], value)
        elif name == "setting":
            kwargs[name] = Setting(value)
        elif isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _dataclass_to_plain(cfg)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("experiment config must be a mapping")
    return _plain_to_dataclass(ExperimentConfig, data)


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ParseError(f"malformed config {path}: {e}") from e
    return config_from_dict(data)


def save_experiment_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True), encoding="utf-8")


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Memorization smoke harness
# ---------------------------------------------------------------------------


def overfit_smoke(
    images: np.ndarray,
    labels: np.ndarray,
    steps: int = 200,
    lr: float = 1e-2,
    net_cfg: Optional[SegNetConfig] = None,
    seed: int = 0,
    device: str = "cpu",
) -> tuple[float, float]:
    """Train on a fixed handful of slices; returns (final MCE, Dice over the
    foreground classes on those same slices)."""
    net_cfg = net_cfg or SegNetConfig(base_filters=8, depth=3)
    net = build_segmenter(net_cfg, seed=derive_seed(seed, "overfit")).to(device)
    opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=0.0)
    x = torch.from_numpy(images.astype(np.float32)).unsqueeze(1).to(device)
    y = torch.from_numpy(labels.astype(np.int64)).to(device)
    net.train()
    loss_val = float("inf")
    for _ in range(steps):
        probs = torch.softmax(net(x), dim=1)
        loss = mce_loss(probs, y)
        if not torch.isfinite(loss):
            raise DivergenceError("overfit harness diverged")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        loss_val = float(loss.detach())
    net.eval()
    with torch.no_grad():
        pred = torch.softmax(net(x), dim=1).argmax(dim=1).cpu().numpy()
    present = [c for c in range(1, net_cfg.class_count) if (labels == c).any()]
    dice = float(np.mean([volumetric_dsc(pred, labels, c) for c in present])) if present else 1.0
    return loss_val, dice
