"""Mean-teacher training with dynamic pseudo-label filtering and low-contrast contrast.

One step:

1. weak-perturb labeled and unlabeled images;
2. teacher forward (eval mode) on the weak unlabeled views;
3. update the dynamic thresholds and filter the teacher's pseudo-labels
   (or apply the fixed 0.95 threshold when the dynamic filter is off);
4. strong-perturb the unlabeled views, CutMix-mixing the pseudo-labels;
5. student forward on labeled + strong unlabeled images;
6. project features, build class embeddings from labeled pixels, mine
   low-contrast pixels and compute the contrastive loss;
7. SGD step on the student (and projector) only;
8. EMA update of the teacher.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .augment import AugmentConfig, strong_perturb, weak_perturb
from .datasets import SplitSpec, split_indices
from .lcc import (ClassEmbeddings, LccConfig, Projector, Selection, boundary_mask,
                  boundary_similarity, class_embeddings, class_similarity, gather_set,
                  interclass_similarity, lcc_loss, merge_selections, project,
                  save_similarity_heatmap, select_bce, select_ice)
from .metrics import evaluate
from .net import (ArchSpec, build_model, checksum, ema_update, frozen_norm_stats,
                  load_checkpoint, save_checkpoint, snapshot)
from .pseudo import (CdfConfig, ThresholdState, UtilizationCounter, class_confidence,
                     effective_threshold, filter_pseudo_labels, fixed_threshold,
                     update_thresholds, write_threshold_rows)
from .types import IGNORE, LocoError, NumericFault

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.1


@dataclass
class TrainConfig:
    name: str = "run"
    seed: int = 0
    epochs: int = 100
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    num_classes: int = 3
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_power: float = 0.9
    teacher_alpha: float = 0.999
    ema_warmup: bool = True
    lambda1: float = 0.5
    lambda2: float = 0.1
    use_unsup: bool = True
    use_cdf: bool = True
    use_ice: bool = True
    use_bce: bool = True
    lcc_labeled: bool = True
    lcc_unlabeled: bool = True
    fixed_threshold: float = 0.95
    cdf_ema_lambda: float = 0.999
    gamma: float = 0.25
    t_init_global: float = 0.85
    k_percent: float = 30.0
    neighborhood_h: int = 64
    tau: float = 0.1
    embedding_dim: int = 64
    detach_class_embeddings: bool = False
    arch: str = "segnet"
    channels: tuple = (16, 32, 64, 128)
    feature_dim: int = 64
    crop_size: int = 64
    scale_min: float = 0.5
    scale_max: float = 2.0
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.5
    contrast: float = 0.5
    saturation: float = 0.5
    hue: float = 0.25
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    cutmix_prob: float = 0.5
    cutmix_area_min: float = 0.25
    cutmix_area_max: float = 0.5
    labeled_fraction: float = 0.1
    split_seed: int = 0
    split_ordering: str = "random"
    nsd_tolerance: float = 2.0
    include_background: bool = False
    heatmaps: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    def cdf_config(self) -> CdfConfig:
        return CdfConfig(self.num_classes, self.cdf_ema_lambda, self.gamma, self.t_init_global)

    def lcc_config(self) -> LccConfig:
        return LccConfig(self.k_percent, self.neighborhood_h, self.tau, self.embedding_dim,
                         self.detach_class_embeddings)

    def augment_config(self) -> AugmentConfig:
        names = {f.name for f in fields(AugmentConfig)}
        return AugmentConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def arch_spec(self, in_channels: int = 3) -> ArchSpec:
        return ArchSpec(self.arch, in_channels, self.num_classes, self.channels, self.feature_dim)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.labeled_fraction, self.split_seed, self.split_ordering)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


VARIANTS = {
    "m1": dict(use_unsup=False, use_cdf=False, use_bce=False, use_ice=False),
    "m2": dict(use_unsup=True, use_cdf=False, use_bce=False, use_ice=False),
    "m3": dict(use_unsup=True, use_cdf=True, use_bce=False, use_ice=False),
    "m4": dict(use_unsup=True, use_cdf=False, use_bce=True, use_ice=False),
    "m5": dict(use_unsup=True, use_cdf=False, use_bce=False, use_ice=True),
    "m6": dict(use_unsup=True, use_cdf=False, use_bce=True, use_ice=True),
    "m7": dict(use_unsup=True, use_cdf=True, use_bce=True, use_ice=True),
}


def apply_variant(config: TrainConfig, variant: str) -> TrainConfig:
    try:
        return replace(config, **VARIANTS[variant.lower()])
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}") from None


# ---------------------------------------------------------------- losses

def supervised_loss(log_probs: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Mean over images of the per-image mean cross-entropy on non-IGNORE pixels."""
    nll = F.nll_loss(log_probs, masks, ignore_index=IGNORE, reduction="none")   # [B, H, W]
    valid = (masks != IGNORE).flatten(1)
    counts = valid.sum(1)
    per_image = nll.flatten(1).sum(1) / counts.clamp(min=1)
    used = counts > 0
    if not used.any():
        return log_probs.sum() * 0.0
    return per_image[used].mean()


def unsupervised_loss(log_probs: torch.Tensor, pseudo: torch.Tensor) -> torch.Tensor:
    """Cross-entropy on kept pseudo-labels, divided by the full H*W of every image."""
    nll = F.nll_loss(log_probs, pseudo, ignore_index=IGNORE, reduction="none")
    hw = pseudo.shape[-1] * pseudo.shape[-2]
    return (nll.flatten(1).sum(1) / hw).mean()


def total_loss(l_sup, l_u, l_lcc, weights: LossWeights = LossWeights()) -> torch.Tensor:
    for name, value in (("l_sup", l_sup), ("l_u", l_u), ("l_lcc", l_lcc)):
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NumericFault(f"non-finite loss component {name}")
    return l_sup + weights.lambda1 * l_u + weights.lambda2 * l_lcc


@dataclass
class LccSelection:
    """Selected pixels (flat indices over the joint labeled+unlabeled batch)."""

    ice: Selection
    bce: Selection
    merged: Selection


def low_contrast_selection(z: torch.Tensor, pool_labels: torch.Tensor, cemb: ClassEmbeddings,
                           config: TrainConfig, boundary_labels: torch.Tensor | None = None
                           ) -> LccSelection:
    lcfg = config.lcc_config()
    empty = Selection.empty()
    ice = bce = empty
    with torch.no_grad():
        zd = z.detach()
        if config.use_ice:
            ice = select_ice(class_similarity(zd, pool_labels, cemb), pool_labels, lcfg)
        if config.use_bce:
            bl = pool_labels if boundary_labels is None else boundary_labels
            bnd = boundary_mask(bl, lcfg) & (pool_labels != IGNORE)
            bce = select_bce(boundary_similarity(zd, bnd, lcfg), pool_labels, lcfg)
    merged = merge_selections(ice, bce)
    if len(merged):
        # anchors need a class embedding to be contrasted against
        ok = cemb.present[merged.label]
        merged = Selection(merged.index[ok], merged.label[ok])
    return LccSelection(ice, bce, merged)


def student_losses(student, projector, lab_images, lab_masks, unl_images, pseudo,
                   config: TrainConfig, selection: LccSelection | None = None) -> dict:
    """Forward the student on labeled (+ unlabeled) images and compute every loss term.

    ``unl_images``/``pseudo`` may be None when the unsupervised branch is off.
    Passing ``selection`` freezes the low-contrast pixel set.
    """
    nl = lab_images.shape[0]
    images = lab_images if unl_images is None else torch.cat([lab_images, unl_images])
    student.train()
    logits, feats = student(lab_images)
    if unl_images is not None:
        # strong views must not shift the running statistics used at inference
        with frozen_norm_stats(student):
            logits_u, feats_u = student(unl_images)
        logits, feats = torch.cat([logits, logits_u]), torch.cat([feats, feats_u])
    log_probs = F.log_softmax(logits, dim=1)
    zero = logits.sum() * 0.0
    l_sup = supervised_loss(log_probs[:nl], lab_masks)
    l_u = zero
    if config.use_unsup and unl_images is not None:
        l_u = unsupervised_loss(log_probs[nl:], pseudo)
    l_lcc = zero
    sel = None
    if config.use_ice or config.use_bce:
        z = project(feats, tuple(images.shape[-2:]), projector)
        cemb = class_embeddings(z[:nl], lab_masks, config.num_classes)
        lab_pool = lab_masks if config.lcc_labeled else torch.full_like(lab_masks, IGNORE)
        pool = [lab_pool]
        if unl_images is not None:
            if config.lcc_unlabeled and pseudo is not None:
                pool.append(pseudo)
            else:
                pool.append(torch.full(unl_images.shape[:1] + unl_images.shape[2:], IGNORE,
                                       dtype=torch.long))
        pool_labels = torch.cat(pool)
        sel = selection or low_contrast_selection(z, pool_labels, cemb, config)
        entries = gather_set(z, sel.merged, labeled_pixels=nl * z.shape[-1] * z.shape[-2])
        l_lcc = lcc_loss(entries, cemb, config.lcc_config()) if len(entries) else zero
    loss = total_loss(l_sup, l_u, l_lcc, config.loss_weights())
    return {"loss": loss, "l_sup": l_sup, "l_u": l_u, "l_lcc": l_lcc, "selection": sel}


# ---------------------------------------------------------------- one step

@dataclass
class StepReport:
    step: int
    lr: float
    loss_sup: float
    loss_u: float
    loss_lcc: float
    loss_total: float
    t_global: float | None = None
    t_local: list | None = None
    thresholds: list | None = None
    kept: list | None = None
    kept_fixed: list | None = None
    predicted: list | None = None
    n_ice: int = 0
    n_bce: int = 0
    n_lcc: int = 0


def _to_chw(arrays) -> torch.Tensor:
    return torch.from_numpy(np.stack([a.transpose(2, 0, 1) for a in arrays]))


def sample_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def poly_lr(base: float, it: int, total: int, power: float) -> float:
    if total <= 0:
        return base
    return base * (1 - min(it, total) / (total + 1)) ** power


class LocoTrainer:
    """Owns the student, projector, teacher, optimizer and threshold state."""

    def __init__(self, config: TrainConfig, in_channels: int = 3, student=None):
        self.config = config
        torch.manual_seed(config.seed)
        self.student = student if student is not None else build_model(config.arch_spec(in_channels))
        self.projector = Projector(config.feature_dim, config.embedding_dim)
        self.teacher = snapshot(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        params = list(self.student.parameters()) + list(self.projector.parameters())
        self.optimizer = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum,
                                         weight_decay=config.weight_decay)
        self.state = ThresholdState.initial(config.cdf_config())
        self.step = 0
        self.total_steps = 0

    def teacher_alpha(self) -> float:
        a = self.config.teacher_alpha
        if self.config.ema_warmup:
            a = min(a, 1.0 - 1.0 / (self.step + 1))
        return a

    def set_lr(self) -> float:
        lr = poly_lr(self.config.lr, self.step, self.total_steps, self.config.lr_power)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        return lr

    @torch.no_grad()
    def pseudo_labels(self, weak_unl: torch.Tensor):
        """Teacher prediction, threshold update and filtering on weak unlabeled views."""
        cfg = self.config
        self.teacher.eval()
        logits, _ = self.teacher(weak_unl)
        probs = logits.softmax(dim=1)
        if cfg.use_cdf:
            self.state = update_thresholds(self.state, class_confidence(probs), cfg.cdf_config())
            thr = effective_threshold(self.state, cfg.cdf_config())
        else:
            thr = fixed_threshold(cfg.num_classes, cfg.fixed_threshold)
        pseudo = filter_pseudo_labels(probs, thr)
        fixed = filter_pseudo_labels(probs, fixed_threshold(cfg.num_classes, cfg.fixed_threshold))
        return probs, pseudo, fixed, thr

    def train_step(self, labeled: list, unlabeled: list, seed: int) -> StepReport:
        """One optimization step on ``labeled`` (image, mask) pairs and ``unlabeled`` images."""
        cfg = self.config
        aug = cfg.augment_config()
        k = cfg.num_classes
        lr = self.set_lr()

        weak_l = [weak_perturb(im, m, sample_seed(seed, 0, i), aug) for i, (im, m) in enumerate(labeled)]
        lab_images = _to_chw([v.image for v in weak_l])
        lab_masks = torch.from_numpy(np.stack([v.mask for v in weak_l])).long()

        report = StepReport(self.step, lr, 0.0, 0.0, 0.0, 0.0)
        unl_images = pseudo_mixed = None
        if cfg.use_unsup and unlabeled:
            weak_u = [weak_perturb(im, None, sample_seed(seed, 1, i), aug) for i, im in enumerate(unlabeled)]
            probs, pseudo, fixed, thr = self.pseudo_labels(_to_chw([v.image for v in weak_u]))
            ref = probs.argmax(dim=1)
            counter, counter_fixed = UtilizationCounter(k), UtilizationCounter(k)
            counter.add(pseudo, ref)
            counter_fixed.add(fixed, ref)
            report.t_global = self.state.t_global
            report.t_local = self.state.t_local.tolist()
            report.thresholds = [float(t) for t in thr]
            report.kept, report.predicted = counter.kept.tolist(), counter.total.tolist()
            report.kept_fixed = counter_fixed.kept.tolist()

            pl = pseudo.numpy()
            n = len(weak_u)
            strong, mixed = [], []
            for i, view in enumerate(weak_u):
                j = (i + 1) % n
                sv, mp = strong_perturb(view, sample_seed(seed, 2, i), aug, pseudo=pl[i],
                                        partner=weak_u[j], partner_pseudo=pl[j], partner_index=j)
                strong.append(sv.image)
                mixed.append(mp)
            unl_images = _to_chw(strong)
            pseudo_mixed = torch.from_numpy(np.stack(mixed)).long()

        out = student_losses(self.student, self.projector, lab_images, lab_masks,
                             unl_images, pseudo_mixed, cfg)
        self.optimizer.zero_grad(set_to_none=True)
        out["loss"].backward()
        self.optimizer.step()
        ema_update(self.teacher, self.student, self.teacher_alpha())
        self.step += 1

        report.loss_sup = out["l_sup"].item()
        report.loss_u = out["l_u"].item()
        report.loss_lcc = out["l_lcc"].item()
        report.loss_total = out["loss"].item()
        sel = out["selection"]
        if sel is not None:
            report.n_ice, report.n_bce, report.n_lcc = len(sel.ice), len(sel.bce), len(sel.merged)
        return report


# ---------------------------------------------------------------- diagnostics

@torch.no_grad()
def embedding_diagnostics(student, projector, dataset, num_classes: int, batch_size: int = 16):
    """Inter-class similarity of class embeddings pooled over a labeled dataset."""
    student.eval()
    sums = None
    counts = torch.zeros(num_classes, dtype=torch.float64)
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        images = _to_chw([im for im, _ in chunk])
        masks = torch.from_numpy(np.stack([m for _, m in chunk])).long()
        _, feats = student(images)
        z = project(feats, tuple(images.shape[-2:]), projector).double()
        d = z.shape[1]
        if sums is None:
            sums = torch.zeros(num_classes, d, dtype=torch.float64)
        flat = z.permute(0, 2, 3, 1).reshape(-1, d)
        y = masks.reshape(-1)
        ok = y != IGNORE
        sums.index_add_(0, y[ok], flat[ok])
        counts += torch.bincount(y[ok], minlength=num_classes)[:num_classes].double()
    means = sums / counts.clamp(min=1).unsqueeze(1)
    norms = means.norm(dim=1)
    present = (counts > 0) & (norms > 1e-8)
    cemb = ClassEmbeddings(means / norms.clamp(min=1e-8).unsqueeze(1), present)
    return interclass_similarity(cemb)


@torch.no_grad()
def dump_heatmaps(student, projector, dataset, config: TrainConfig, out_dir: Path, epoch: int):
    student.eval()
    lcfg = config.lcc_config()
    for n, (image, mask) in enumerate(dataset[:config.heatmaps]):
        images = _to_chw([image])
        _, feats = student(images)
        z = project(feats, tuple(images.shape[-2:]), projector)
        labels = torch.from_numpy(mask[None]).long()
        sb = boundary_similarity(z, boundary_mask(labels, lcfg), lcfg)
        save_similarity_heatmap(sb[0], out_dir / f"boundary_sim_e{epoch:03d}_{n:03d}.png")


@torch.no_grad()
def export_embeddings(student, projector, dataset, path: str | Path, max_per_class: int = 500,
                      seed: int = 0) -> Path:
    """Save per-pixel embeddings (subsampled per class) with labels to an ``.npz`` file."""
    student.eval()
    rng = np.random.default_rng(seed)
    zs, ys = [], []
    for image, mask in dataset:
        images = _to_chw([image])
        _, feats = student(images)
        z = project(feats, tuple(images.shape[-2:]), projector)[0]
        zs.append(z.permute(1, 2, 0).reshape(-1, z.shape[0]).numpy())
        ys.append(mask.reshape(-1))
    z, y = np.concatenate(zs), np.concatenate(ys)
    keep = []
    for c in np.unique(y[y != IGNORE]):
        idx = np.nonzero(y == c)[0]
        keep.append(rng.choice(idx, size=min(max_per_class, idx.size), replace=False))
    keep = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    np.savez_compressed(path, embeddings=z[keep], labels=y[keep])
    return Path(path)


# ---------------------------------------------------------------- full runs

LOSS_COLUMNS = ["epoch", "lr", "loss_sup", "loss_u", "loss_lcc", "loss_total", "n_ice", "n_bce"]


def metric_columns(num_classes: int) -> list[str]:
    return (["epoch", "miou", "dsc", "nsd"] + [f"iou_{c}" for c in range(num_classes)]
            + ["interclass_sim"])


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    return "" if math.isnan(value) else repr(value)


def write_rows(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow({c: fmt(row.get(c)) for c in columns})


@dataclass
class RunArtifacts:
    run_dir: Path
    loss_rows: list = field(default_factory=list)
    metric_rows: list = field(default_factory=list)
    threshold_rows: list = field(default_factory=list)
    best_epoch: int = 0
    best_miou: float = float("-inf")
    final_report: object = None

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"


def _epoch_batches(n_lab: int, n_unl: int, config: TrainConfig, epoch: int):
    rng = np.random.default_rng([config.seed, 7919, epoch])
    bl, bu = config.batch_labeled, config.batch_unlabeled
    steps = math.ceil(n_unl / bu) if n_unl > 0 else math.ceil(n_lab / bl)
    unl_order = rng.permutation(n_unl) if n_unl else np.zeros(0, dtype=int)
    reps = math.ceil(steps * bl / n_lab)
    lab_stream = np.concatenate([rng.permutation(n_lab) for _ in range(reps)])
    for s in range(steps):
        yield (lab_stream[s * bl:(s + 1) * bl].tolist(),
               unl_order[s * bu:(s + 1) * bu].tolist())


def steps_per_epoch(n_lab: int, n_unl: int, config: TrainConfig) -> int:
    return math.ceil(n_unl / config.batch_unlabeled) if n_unl > 0 else math.ceil(n_lab / config.batch_labeled)


def run(config: TrainConfig, train_pairs: list, val_pairs: list, run_dir: str | Path,
        resume: bool = False, split: tuple[list[int], list[int]] | None = None,
        extra_manifest: dict | None = None) -> RunArtifacts:
    """Train for ``config.epochs`` epochs, evaluating on ``val_pairs`` after every epoch.

    Writes ``losses.csv``, ``metrics.csv``, ``thresholds.csv`` (when pseudo-labels
    are used), ``epoch_<n>.ckpt``, ``best.ckpt``, ``report.csv``/``report.txt`` and
    ``manifest.json`` to ``run_dir``.
    """
    if not train_pairs:
        raise LocoError("training set is empty")
    if not val_pairs:
        raise LocoError("validation set is empty")
    torch.use_deterministic_algorithms(True)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    k = config.num_classes
    lab_idx, unl_idx = split if split is not None else split_indices(len(train_pairs), config.split_spec())
    labeled = [train_pairs[i] for i in lab_idx]
    unlabeled = [train_pairs[i][0] for i in unl_idx] if config.use_unsup else []
    n_unl_sched = len(unl_idx)
    in_channels = train_pairs[0][0].shape[2]

    trainer = LocoTrainer(config, in_channels)
    trainer.total_steps = config.epochs * steps_per_epoch(len(labeled), n_unl_sched, config)
    arts = RunArtifacts(run_dir)
    start_epoch = 1

    latest = _latest_checkpoint(run_dir) if resume else None
    if latest is not None:
        ck = load_checkpoint(latest)
        trainer.student.load_state_dict(ck["student"])
        trainer.projector.load_state_dict(ck["projector"])
        trainer.teacher.load_state_dict(ck["teacher"])
        trainer.optimizer.load_state_dict(ck["optimizer"])
        trainer.state = ThresholdState(ck["thresholds"]["t_global"],
                                       np.asarray(ck["thresholds"]["t_local"]),
                                       ck["thresholds"]["step"])
        trainer.step = ck["step"]
        torch.set_rng_state(ck["torch_rng"])
        h = ck["history"]
        arts.loss_rows, arts.metric_rows, arts.threshold_rows = h["loss"], h["metric"], h["threshold"]
        arts.best_epoch, arts.best_miou = h["best_epoch"], h["best_miou"]
        start_epoch = ck["epoch"] + 1
        log.info("resumed %s from epoch %d", run_dir, ck["epoch"])
    else:
        _evaluate_epoch(trainer, val_pairs, config, arts, 0, run_dir)

    for epoch in range(start_epoch, config.epochs + 1):
        sums = dict.fromkeys(["loss_sup", "loss_u", "loss_lcc", "loss_total", "n_ice", "n_bce"], 0.0)
        n_steps = 0
        kept = np.zeros(k, dtype=np.int64)
        kept_fixed = np.zeros(k, dtype=np.int64)
        predicted = np.zeros(k, dtype=np.int64)
        last = None
        lr0 = None
        for s, (li, ui) in enumerate(_epoch_batches(len(labeled), n_unl_sched, config, epoch)):
            try:
                rep = trainer.train_step([labeled[i] for i in li],
                                         [unlabeled[i] for i in ui] if unlabeled else [],
                                         sample_seed(config.seed, epoch, s))
            except LocoError as exc:
                raise type(exc)(f"step {trainer.step}: {exc}") from exc
            lr0 = rep.lr if lr0 is None else lr0
            for key in sums:
                sums[key] += getattr(rep, key)
            n_steps += 1
            if rep.kept is not None:
                kept += rep.kept
                kept_fixed += rep.kept_fixed
                predicted += rep.predicted
                last = rep
        row = {"epoch": epoch, "lr": lr0}
        row.update({key: v / max(n_steps, 1) for key, v in sums.items()})
        arts.loss_rows.append(row)
        if last is not None:
            trow = {"epoch": epoch, "t_global": last.t_global if config.use_cdf else None}
            with np.errstate(invalid="ignore", divide="ignore"):
                util = np.where(predicted > 0, kept / np.maximum(predicted, 1), np.nan)
                util_f = np.where(predicted > 0, kept_fixed / np.maximum(predicted, 1), np.nan)
            for c in range(k):
                trow[f"t_local_{c}"] = last.t_local[c] if config.use_cdf else None
                trow[f"T_{c}"] = last.thresholds[c]
                trow[f"util_{c}"] = util[c]
                trow[f"util_fixed_{c}"] = util_f[c]
            arts.threshold_rows.append(trow)
        _evaluate_epoch(trainer, val_pairs, config, arts, epoch, run_dir)
        log.info("epoch %d/%d loss %.4f val mIoU %.4f", epoch, config.epochs,
                 row["loss_total"], arts.metric_rows[-1]["miou"])
        _write_tables(arts, config)
        _save(trainer, run_dir / f"epoch_{epoch}.ckpt", config, epoch, arts)
        if arts.best_epoch == epoch:
            shutil.copyfile(run_dir / f"epoch_{epoch}.ckpt", run_dir / "best.ckpt")

    _write_tables(arts, config)
    if not (run_dir / "best.ckpt").exists():
        _save(trainer, run_dir / "best.ckpt", config, 0, arts)
    best = load_checkpoint(run_dir / "best.ckpt")
    model = build_model(best["arch"])
    model.load_state_dict(best["student"])
    report = evaluate(model, val_pairs, k, config.nsd_tolerance, config.include_background)
    report.write_csv(run_dir / "report.csv")
    (run_dir / "report.txt").write_text(
        f"run {config.name}  best epoch {arts.best_epoch}\n{report.to_text()}\n")
    arts.final_report = report
    _write_manifest(run_dir, config, arts, lab_idx, unl_idx, extra_manifest)
    return arts


def _evaluate_epoch(trainer: LocoTrainer, val_pairs, config: TrainConfig, arts: RunArtifacts,
                    epoch: int, run_dir: Path) -> None:
    rep = evaluate(trainer.student, val_pairs, config.num_classes, config.nsd_tolerance,
                   config.include_background)
    sim = embedding_diagnostics(trainer.student, trainer.projector, val_pairs, config.num_classes)
    row = {"epoch": epoch, "miou": rep.miou, "dsc": rep.dsc, "nsd": rep.nsd, "interclass_sim": sim}
    for c in range(config.num_classes):
        row[f"iou_{c}"] = rep.iou_per_class[c]
    arts.metric_rows.append(row)
    if epoch > 0 and rep.miou > arts.best_miou:
        arts.best_miou, arts.best_epoch = rep.miou, epoch
    if config.heatmaps > 0:
        hm = run_dir / "heatmaps"
        hm.mkdir(exist_ok=True)
        dump_heatmaps(trainer.student, trainer.projector, val_pairs, config, hm, epoch)


def _write_tables(arts: RunArtifacts, config: TrainConfig) -> None:
    write_rows(arts.run_dir / "losses.csv", LOSS_COLUMNS, arts.loss_rows)
    write_rows(arts.run_dir / "metrics.csv", metric_columns(config.num_classes), arts.metric_rows)
    if config.use_unsup:
        write_threshold_rows(arts.run_dir / "thresholds.csv", arts.threshold_rows, config.num_classes)


def _save(trainer: LocoTrainer, path: Path, config: TrainConfig, epoch: int, arts: RunArtifacts):
    st = trainer.state
    save_checkpoint(path, config.arch_spec(trainer.student.spec.in_channels),
                    student=trainer.student, projector=trainer.projector, teacher=trainer.teacher,
                    optimizer=trainer.optimizer, epoch=epoch, step=trainer.step,
                    thresholds={"t_global": st.t_global, "t_local": st.t_local.tolist(),
                                "step": st.step},
                    torch_rng=torch.get_rng_state(), config=config.to_dict(),
                    history={"loss": arts.loss_rows, "metric": arts.metric_rows,
                             "threshold": arts.threshold_rows, "best_epoch": arts.best_epoch,
                             "best_miou": arts.best_miou})


def _latest_checkpoint(run_dir: Path) -> Path | None:
    found = []
    for p in run_dir.glob("epoch_*.ckpt"):
        try:
            found.append((int(p.stem.split("_")[1]), p))
        except ValueError:
            continue
    return max(found)[1] if found else None


def _write_manifest(run_dir: Path, config: TrainConfig, arts: RunArtifacts,
                    lab_idx, unl_idx, extra: dict | None) -> None:
    outputs = sorted(p.name for p in run_dir.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "version": __version__,
        "name": config.name,
        "seed": config.seed,
        "config": config.to_dict(),
        "labeled_indices": list(map(int, lab_idx)),
        "unlabeled_indices": list(map(int, unl_idx)),
        "best_epoch": arts.best_epoch,
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def teacher_checksum(trainer: LocoTrainer) -> str:
    return checksum(trainer.teacher)
