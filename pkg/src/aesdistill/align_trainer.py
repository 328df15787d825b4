"""Phase I: align a student backbone plus projector to frozen teacher features.

The teacher is consumed either live (a frozen encoder module) or through a
:class:`~aesdistill.models.FeatureCache`; cache mode is preferred for speed
and determinism, live mode exists for end-to-end parity checks. The backbone
and projector share one optimizer parameter group.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import (Manifest, Normalization, PreprocessSpec, SkipLog,
                   batch_views, derive_rng)
from .errors import ConfigError, DivergenceError
from .losses import cosine_alignment
from .models import (FeatureCache, encode, is_frozen, params_digest,
                     preprocess_fingerprint, save_checkpoint, to_tensor)
from .runio import JsonlWriter, ids_digest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignTrainConfig:
    """Optimizer and schedule for the alignment phase.

    The learning rate is piecewise constant: it starts at ``lr`` and is
    multiplied by ``decay_factor`` at every epoch listed in ``decay_epochs``.
    """

    lr: float = 1e-4
    decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (5,)
    total_epochs: int = 16
    batch_size: int = 32
    epsilon: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError("decay_factor must be in (0, 1]")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        object.__setattr__(self, "decay_epochs", tuple(self.decay_epochs))


def lr_at(epoch: int, cfg: AlignTrainConfig) -> float:
    """Learning rate for an epoch: lr * decay_factor ** (boundaries passed)."""
    passed = sum(1 for boundary in cfg.decay_epochs if epoch >= boundary)
    return cfg.lr * cfg.decay_factor ** passed


@dataclass
class AlignResult:
    checkpoint_path: Path
    projector_path: Path
    log_path: Path
    epoch_losses: list[float]
    teacher_digest: str | None


def _teacher_features(teacher, ids, views, teacher_norm):
    if isinstance(teacher, FeatureCache):
        return teacher.lookup(ids)
    return encode(teacher, to_tensor(views, teacher_norm))


def run_alignment(backbone: nn.Module, projector: nn.Module, teacher,
                  manifest: Manifest, preprocess: PreprocessSpec,
                  teacher_norm: Normalization, student_norm: Normalization,
                  cfg: AlignTrainConfig, run_dir: str | Path, seed: int = 0,
                  resume_state: dict | None = None) -> AlignResult:
    """Train backbone+projector against frozen teacher features.

    Writes a per-step JSONL log, an epoch checkpoint after every epoch
    (backbone checkpoint and projector saved separately) and returns the mean
    alignment loss per epoch. Raises ``DivergenceError`` with step
    diagnostics the moment a non-finite loss appears.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    if isinstance(teacher, FeatureCache):
        teacher_dim = teacher.feature_dim
        teacher.verify(teacher.teacher_id,
                       preprocess_fingerprint(preprocess, teacher_norm))
        teacher_digest = None
    else:
        if not is_frozen(teacher):
            raise ConfigError("the alignment teacher must be frozen")
        teacher_dim = teacher.feature_dim
        teacher_digest = params_digest(teacher)
    projector_dim = getattr(projector, "out_dim", None)
    if projector_dim is not None and projector_dim != teacher_dim:
        raise ConfigError(
            f"projector output dim {projector_dim} != teacher feature dim {teacher_dim}"
        )

    params = list(backbone.parameters()) + list(projector.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    start_epoch = 0
    step = 0
    if resume_state is not None:
        backbone.load_state_dict(resume_state["backbone"])
        projector.load_state_dict(resume_state["projector"])
        optimizer.load_state_dict(resume_state["optimizer"])
        start_epoch = resume_state["epoch"] + 1
        step = resume_state["step"]

    records = manifest.by_id()
    ids = manifest.ids
    skip_log = SkipLog()
    log = JsonlWriter(run_dir / "train_log.jsonl", append=resume_state is not None)
    epoch_losses: list[float] = []
    backbone.train()
    projector.train()

    ckpt_path = run_dir / "align_backbone.pt"
    projector_path = run_dir / "align_projector.pt"

    try:
        for epoch in range(start_epoch, cfg.total_epochs):
            lr = lr_at(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = derive_rng(seed, "align-order", epoch).permutation(len(ids))
            losses = []
            for start in range(0, len(ids), cfg.batch_size):
                batch_ids = [ids[i] for i in order[start:start + cfg.batch_size]]
                views, kept = batch_views(records, batch_ids, preprocess, epoch,
                                          skip_log)
                with torch.no_grad():
                    target = _teacher_features(teacher, kept, views, teacher_norm)
                student = projector(backbone(to_tensor(views, student_norm)))
                # float64 loss entry keeps the self-alignment fixed point inert:
                # the float32 cosine residual (~1e-7) would otherwise exceed
                # Adam's eps and get amplified into full-size steps
                loss = cosine_alignment(target.double(), student.double(),
                                        cfg.epsilon).mean()
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise DivergenceError(
                        f"non-finite alignment loss at step {step}",
                        step=step, lr=lr, batch_ids=tuple(kept),
                    )
                optimizer.zero_grad()
                loss.backward()
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                optimizer.step()
                log.write({"step": step, "epoch": epoch, "lr": lr, "loss": value,
                           "batch": ids_digest(kept)})
                losses.append(value)
                step += 1
            epoch_loss = float(np.mean(losses))
            epoch_losses.append(epoch_loss)
            logger.info("alignment epoch %d: mean loss %.6f (lr %.2e)",
                        epoch, epoch_loss, lr)
            state = {
                "encoder_spec": _spec_dict(backbone),
                "backbone": backbone.state_dict(),
                "projector": projector.state_dict(),
                "optimizer": optimizer.state_dict(),
                "epoch": epoch,
                "step": step,
                "phase": "align",
            }
            save_checkpoint(ckpt_path, {k: v for k, v in state.items()
                                        if k != "projector"})
            save_checkpoint(projector_path, {"projector": state["projector"],
                                             "encoder_spec": state["encoder_spec"],
                                             "epoch": epoch, "step": step,
                                             "phase": "align"})
            save_checkpoint(run_dir / "resume.pt", state)
    finally:
        log.close()
        if skip_log.skipped:
            skip_log.write(run_dir / "skip_report.jsonl")

    if teacher_digest is not None and params_digest(teacher) != teacher_digest:
        raise RuntimeError("teacher parameters changed during alignment")
    return AlignResult(checkpoint_path=ckpt_path, projector_path=projector_path,
                       log_path=run_dir / "train_log.jsonl",
                       epoch_losses=epoch_losses, teacher_digest=teacher_digest)


def _spec_dict(module: nn.Module) -> dict | None:
    from dataclasses import asdict
    spec = getattr(module, "spec", None)
    return asdict(spec) if spec is not None else None
