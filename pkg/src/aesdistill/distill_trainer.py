"""Phase II: supervised teacher fine-tuning, then semi-supervised student training.

The teacher (an aligned backbone plus prediction head) is fine-tuned with the
mean binned-EMD loss over labeled batches. The student then trains on mixed
batches: a supervision term over the labeled segment against ground truth and
a pseudo-label term over the FULL batch against the frozen teacher's outputs,
combined as ``L_s + beta * L_kd``. Pseudo labels are recomputed every step on
the same augmented view the student sees.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .data import (BatchPlan, Manifest, Normalization, PreprocessSpec,
                   SkipLog, batch_views, compose_batches, derive_seed)
from .distributions import ScoreDistribution, mos, scalar_to_distribution
from .errors import ConfigError, DegenerateInputError, DivergenceError
from .losses import emd
from .metrics import EvalPair, MetricsReport, compute_metrics
from .models import PredictionHead, params_digest, save_checkpoint, to_tensor
from .align_trainer import AlignTrainConfig, lr_at
from .runio import JsonlWriter, ids_digest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillTrainConfig:
    """Optimizer, schedule and loss weights for phase II.

    The schedule fields mirror the alignment phase. ``mu`` fixes both the
    batch composition and the pseudo-label averaging width, so the batch plan
    and the loss stay consistent by construction. ``total_epochs`` may be 0,
    in which case the checkpoint equals the initialization.
    """

    lr: float = 1e-4
    decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (5,)
    total_epochs: int = 16
    b_s: int = 4
    mu: int = 15
    beta: float = 15.0
    r: float = 2.0
    eval_batch_size: int = 64
    scalar_label_mode: str = "linear-split"
    pseudo_cache: bool = False
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError("decay_factor must be in (0, 1]")
        if self.total_epochs < 0:
            raise ConfigError("total_epochs must be >= 0")
        if self.b_s < 1:
            raise ConfigError("b_s must be >= 1")
        if self.mu < 0:
            raise ConfigError("mu must be non-negative")
        if self.beta < 0.0:
            raise ConfigError("beta must be non-negative")
        if self.r < 1.0:
            raise ConfigError("EMD exponent r must be >= 1")
        object.__setattr__(self, "decay_epochs", tuple(self.decay_epochs))

    @property
    def plan(self) -> BatchPlan:
        return BatchPlan(b_s=self.b_s, mu=self.mu)

    def schedule(self) -> AlignTrainConfig:
        return AlignTrainConfig(lr=self.lr, decay_factor=self.decay_factor,
                                decay_epochs=self.decay_epochs,
                                total_epochs=max(self.total_epochs, 1),
                                batch_size=self.b_s)


def target_probs(manifest: Manifest, bin_values: tuple[float, ...],
                 mode: str = "linear-split") -> dict[str, np.ndarray]:
    """Ground-truth probability vectors per labeled record id.

    Distribution labels must share the requested binning; scalar labels are
    discretized onto it.
    """
    targets: dict[str, np.ndarray] = {}
    for rec in manifest.records:
        if isinstance(rec.label, ScoreDistribution):
            if rec.label.bin_values != tuple(bin_values):
                raise ConfigError(
                    f"label bins of record {rec.id!r} do not match the model head"
                )
            targets[rec.id] = np.asarray(rec.label.probs, dtype=np.float64)
        elif rec.label is not None:
            dist = scalar_to_distribution(float(rec.label), bin_values, mode)
            targets[rec.id] = np.asarray(dist.probs, dtype=np.float64)
        else:
            raise ConfigError(f"record {rec.id!r} has no label")
    return targets


def truth_mos(rec_label, bin_values: tuple[float, ...]) -> float:
    if isinstance(rec_label, ScoreDistribution):
        return mos(rec_label)
    return float(rec_label)


def generate_pseudo_labels(backbone: nn.Module, head: PredictionHead,
                           images: Tensor) -> Tensor:
    """Frozen-teacher score distributions for a batch, gradient-free.

    The modules are evaluated in eval mode and restored afterwards; outputs
    are float64 probability rows.
    """
    was_training = (backbone.training, head.training)
    backbone.eval()
    head.eval()
    try:
        with torch.no_grad():
            probs = head.probs(backbone(images)).double()
    finally:
        if was_training[0]:
            backbone.train()
        if was_training[1]:
            head.train()
    return probs


def predict_pairs(backbone: nn.Module, head: PredictionHead, manifest: Manifest,
                  bin_values: tuple[float, ...], preprocess: PreprocessSpec,
                  norm: Normalization, batch_size: int = 64) -> list[EvalPair]:
    """(predicted MOS, true MOS) pairs over a labeled manifest, eval preprocessing."""
    if len(manifest) == 0:
        raise ValueError("evaluation manifest is empty")
    if not manifest.labeled:
        raise ValueError("evaluation needs a labeled manifest")
    eval_spec = preprocess.eval_variant()
    records = manifest.by_id()
    ids = manifest.ids
    bins_t = torch.tensor(bin_values, dtype=torch.float64)
    was_training = (backbone.training, head.training)
    backbone.eval()
    head.eval()
    pairs: list[EvalPair] = []
    try:
        with torch.no_grad():
            for start in range(0, len(ids), batch_size):
                chunk = ids[start:start + batch_size]
                views, kept = batch_views(records, chunk, eval_spec, epoch=0)
                probs = head.probs(backbone(to_tensor(views, norm))).double()
                pred_mos = (probs * bins_t).sum(dim=-1)
                for i, sample_id in enumerate(kept):
                    pairs.append(EvalPair(
                        pred=float(pred_mos[i]),
                        truth=truth_mos(records[sample_id].label, bin_values),
                    ))
    finally:
        if was_training[0]:
            backbone.train()
        if was_training[1]:
            head.train()
    return pairs


def _safe_metrics(pairs: list[EvalPair]) -> MetricsReport | None:
    try:
        return compute_metrics(pairs)
    except DegenerateInputError as exc:
        logger.warning("evaluation degenerate, no correlation report: %s", exc)
        return None


@dataclass
class TeacherResult:
    checkpoint_path: Path
    log_path: Path
    report: MetricsReport | None


def finetune_teacher(backbone: nn.Module, head: PredictionHead, labeled: Manifest,
                     eval_manifest: Manifest, bin_values: tuple[float, ...],
                     cfg: DistillTrainConfig, preprocess: PreprocessSpec,
                     norm: Normalization, run_dir: str | Path, seed: int = 0,
                     resume_state: dict | None = None) -> TeacherResult:
    """Supervised fine-tune with the mean EMD loss over labeled batches."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if head.n_bins != len(bin_values):
        raise ConfigError(f"head has {head.n_bins} bins, config has {len(bin_values)}")
    targets = target_probs(labeled, bin_values, cfg.scalar_label_mode)
    records = labeled.by_id()
    plan = BatchPlan(b_s=cfg.b_s, mu=0)

    params = list(backbone.parameters()) + list(head.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    start_epoch = 0
    step = 0
    if resume_state is not None:
        backbone.load_state_dict(resume_state["backbone"])
        head.load_state_dict(resume_state["head"])
        optimizer.load_state_dict(resume_state["optimizer"])
        start_epoch = resume_state["epoch"] + 1
        step = resume_state["step"]

    schedule = cfg.schedule()
    skip_log = SkipLog()
    log = JsonlWriter(run_dir / "train_log.jsonl", append=resume_state is not None)
    backbone.train()
    head.train()
    ckpt_path = run_dir / "teacher.pt"

    try:
        for epoch in range(start_epoch, cfg.total_epochs):
            lr = lr_at(epoch, schedule)
            for group in optimizer.param_groups:
                group["lr"] = lr
            epoch_seed = derive_seed(seed, "batches", epoch)
            for batch in compose_batches(labeled, None, plan, epoch_seed):
                views, kept = batch_views(records, batch.labeled_ids, preprocess,
                                          epoch, skip_log)
                preds = head.probs(backbone(to_tensor(views, norm))).double()
                truth = torch.from_numpy(np.stack([targets[i] for i in kept]))
                loss = emd(preds, truth, cfg.r).mean()
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise DivergenceError(
                        f"non-finite supervision loss at step {step}",
                        step=step, lr=lr, batch_ids=tuple(kept),
                    )
                optimizer.zero_grad()
                loss.backward()
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                optimizer.step()
                log.write({"step": step, "epoch": epoch, "lr": lr, "loss": value,
                           "batch": ids_digest(kept)})
                step += 1
            save_checkpoint(run_dir / "resume.pt", {
                "encoder_spec": _spec_dict(backbone),
                "backbone": backbone.state_dict(),
                "head": head.state_dict(),
                "optimizer": optimizer.state_dict(),
                "epoch": epoch, "step": step, "phase": "teacher",
            })
    finally:
        log.close()
        if skip_log.skipped:
            skip_log.write(run_dir / "skip_report.jsonl")

    pairs = predict_pairs(backbone, head, eval_manifest, bin_values, preprocess,
                          norm, cfg.eval_batch_size)
    report = _safe_metrics(pairs)
    save_checkpoint(ckpt_path, {
        "encoder_spec": _spec_dict(backbone),
        "backbone": backbone.state_dict(),
        "head": head.state_dict(),
        "bin_values": list(bin_values),
        "epoch": cfg.total_epochs - 1, "step": step, "phase": "teacher",
        "eval_report": report.to_dict() if report else None,
    })
    return TeacherResult(checkpoint_path=ckpt_path,
                         log_path=run_dir / "train_log.jsonl", report=report)


@dataclass
class SkdResult:
    best_checkpoint_path: Path
    last_checkpoint_path: Path
    log_path: Path
    best_srcc: float | None
    report: MetricsReport | None


def run_skd(student_backbone: nn.Module, student_head: PredictionHead,
            teacher_backbone: nn.Module, teacher_head: PredictionHead,
            labeled: Manifest, unlabeled: Manifest | None, eval_manifest: Manifest,
            bin_values: tuple[float, ...], cfg: DistillTrainConfig,
            preprocess: PreprocessSpec, teacher_norm: Normalization,
            student_norm: Normalization, run_dir: str | Path, seed: int = 0,
            resume_state: dict | None = None) -> SkdResult:
    """Semi-supervised student training against a frozen teacher.

    Per step: compose a mixed batch, build ONE augmented view per sample
    shared by both branches, compute the supervision loss over the labeled
    segment and the pseudo-label loss over the full batch, update with
    ``L_s + beta * L_kd``. Losses are evaluated in float64 so the logged
    decomposition is exact. With beta == 0 the pseudo-label term is logged
    but kept out of the autograd graph, making the reduction to plain
    supervised training bit-exact.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if teacher_head.n_bins != student_head.n_bins:
        raise ConfigError(
            f"teacher head has {teacher_head.n_bins} bins, "
            f"student head has {student_head.n_bins}"
        )
    if student_head.n_bins != len(bin_values):
        raise ConfigError("head bin count does not match configured bin values")
    for p in (*teacher_backbone.parameters(), *teacher_head.parameters()):
        if p.requires_grad:
            raise ConfigError("the teacher must be frozen during student training")
    teacher_digest = params_digest(teacher_backbone)

    targets = target_probs(labeled, bin_values, cfg.scalar_label_mode)
    records = labeled.by_id()
    if unlabeled is not None:
        records.update(unlabeled.by_id())

    params = list(student_backbone.parameters()) + list(student_head.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    start_epoch = 0
    step = 0
    best_srcc: float | None = None
    if resume_state is not None:
        student_backbone.load_state_dict(resume_state["backbone"])
        student_head.load_state_dict(resume_state["head"])
        optimizer.load_state_dict(resume_state["optimizer"])
        start_epoch = resume_state["epoch"] + 1
        step = resume_state["step"]
        best_srcc = resume_state.get("best_srcc")

    schedule = cfg.schedule()
    labeled_id_set = set(labeled.ids)
    skip_log = SkipLog()
    log = JsonlWriter(run_dir / "train_log.jsonl", append=resume_state is not None)
    student_backbone.train()
    student_head.train()
    teacher_backbone.eval()
    teacher_head.eval()
    best_path = run_dir / "student_best.pt"
    last_path = run_dir / "student_last.pt"

    pseudo_store: dict[str, np.ndarray] = {}

    def pseudo_for(views: np.ndarray, kept: list[str]) -> Tensor:
        if not cfg.pseudo_cache:
            x = to_tensor(views, teacher_norm)
            return generate_pseudo_labels(teacher_backbone, teacher_head, x)
        missing = [i for i, s in enumerate(kept) if s not in pseudo_store]
        if missing:
            x = to_tensor(views[missing], teacher_norm)
            fresh = generate_pseudo_labels(teacher_backbone, teacher_head, x)
            for row, i in enumerate(missing):
                pseudo_store[kept[i]] = fresh[row].numpy()
        return torch.from_numpy(np.stack([pseudo_store[s] for s in kept]))

    def save_student(path: Path, epoch: int, report: MetricsReport | None) -> None:
        save_checkpoint(path, {
            "encoder_spec": _spec_dict(student_backbone),
            "backbone": student_backbone.state_dict(),
            "head": student_head.state_dict(),
            "bin_values": list(bin_values),
            "epoch": epoch, "step": step, "phase": "student",
            "eval_report": report.to_dict() if report else None,
        })

    final_report: MetricsReport | None = None
    try:
        for epoch in range(start_epoch, cfg.total_epochs):
            lr = lr_at(epoch, schedule)
            for group in optimizer.param_groups:
                group["lr"] = lr
            epoch_seed = derive_seed(seed, "batches", epoch)
            for batch in compose_batches(labeled, unlabeled, cfg.plan, epoch_seed):
                views, kept = batch_views(records, list(batch.ids), preprocess,
                                          epoch, skip_log)
                kept_labeled = [s for s in kept if s in labeled_id_set]
                pseudo = pseudo_for(views, kept)
                preds = student_head.probs(
                    student_backbone(to_tensor(views, student_norm))
                ).double()
                truth = torch.from_numpy(np.stack([targets[s] for s in kept_labeled]))
                loss_s = emd(preds[:len(kept_labeled)], truth, cfg.r).mean()
                loss_kd = emd(preds, pseudo, cfg.r).mean()
                if cfg.beta != 0.0:
                    total = loss_s + cfg.beta * loss_kd
                else:
                    total = loss_s
                value = float(total.detach())
                if not math.isfinite(value):
                    raise DivergenceError(
                        f"non-finite student loss at step {step}",
                        step=step, lr=lr, batch_ids=tuple(kept),
                    )
                optimizer.zero_grad()
                total.backward()
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                optimizer.step()
                log.write({
                    "step": step, "epoch": epoch, "lr": lr,
                    "loss_s": float(loss_s.detach()),
                    "loss_kd": float(loss_kd.detach()),
                    "loss_total": value,
                    "n_labeled": len(kept_labeled),
                    "n_unlabeled": len(kept) - len(kept_labeled),
                    "kd_terms": len(kept),
                    "batch": ids_digest(kept),
                })
                step += 1

            pairs = predict_pairs(student_backbone, student_head, eval_manifest,
                                  bin_values, preprocess, student_norm,
                                  cfg.eval_batch_size)
            report = _safe_metrics(pairs)
            final_report = report
            if report is not None and (best_srcc is None or report.srcc > best_srcc):
                best_srcc = report.srcc
                save_student(best_path, epoch, report)
            save_student(last_path, epoch, report)
            save_checkpoint(run_dir / "resume.pt", {
                "encoder_spec": _spec_dict(student_backbone),
                "backbone": student_backbone.state_dict(),
                "head": student_head.state_dict(),
                "optimizer": optimizer.state_dict(),
                "epoch": epoch, "step": step, "phase": "student",
                "best_srcc": best_srcc,
            })
    finally:
        log.close()
        if skip_log.skipped:
            skip_log.write(run_dir / "skip_report.jsonl")

    if params_digest(teacher_backbone) != teacher_digest:
        raise RuntimeError("teacher parameters changed during student training")
    if cfg.total_epochs == 0 or not best_path.exists():
        save_student(best_path, max(cfg.total_epochs - 1, 0), final_report)
    if cfg.total_epochs == 0:
        save_student(last_path, 0, None)
    return SkdResult(best_checkpoint_path=best_path, last_checkpoint_path=last_path,
                     log_path=run_dir / "train_log.jsonl", best_srcc=best_srcc,
                     report=final_report)


def _spec_dict(module: nn.Module) -> dict | None:
    from dataclasses import asdict
    spec = getattr(module, "spec", None)
    return asdict(spec) if spec is not None else None
