"""Evaluation metrics on mean opinion scores: MSE, SRCC, PLCC and interval error rate.

Correlations raise ``DegenerateInputError`` on zero-variance series instead of
returning NaN so evaluation harnesses fail loudly. The interval error rate
partitions the score range into equal-width intervals by TRUTH score and
reports, per interval, the fraction of samples whose absolute prediction
error exceeds a tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateInputError, ValidationError


class EvalPair(NamedTuple):
    """One evaluated sample: predicted and ground-truth mean opinion score."""

    pred: float
    truth: float


def _split(pairs: Sequence[EvalPair]) -> tuple[np.ndarray, np.ndarray]:
    if len(pairs) == 0:
        raise ValueError("metrics need at least one pair")
    pred = np.asarray([p[0] for p in pairs], dtype=np.float64)
    truth = np.asarray([p[1] for p in pairs], dtype=np.float64)
    if not (np.isfinite(pred).all() and np.isfinite(truth).all()):
        raise ValidationError("scores must be finite")
    return pred, truth


def mse(pairs: Sequence[EvalPair]) -> float:
    """Mean squared error between predicted and true scores."""
    pred, truth = _split(pairs)
    return float(np.mean((pred - truth) ** 2))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if len(x) < 2:
        raise ValueError("correlation needs at least two pairs")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError("correlation undefined: a series has zero variance")
    return float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))


def plcc(pairs: Sequence[EvalPair]) -> float:
    """Pearson linear correlation between predicted and true scores."""
    pred, truth = _split(pairs)
    return _pearson(pred, truth)


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their rank positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        # positions i..j (0-based) share the mean rank
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def srcc(pairs: Sequence[EvalPair]) -> float:
    """Spearman rank correlation: Pearson correlation of average-ranked series."""
    pred, truth = _split(pairs)
    return _pearson(average_ranks(pred), average_ranks(truth))


@dataclass(frozen=True)
class IerConfig:
    """Equal-width interval partition of ``[lo, hi]`` with error tolerance ``t``."""

    k: int = 10
    t: float = 0.5
    lo: float = 1.0
    hi: float = 10.0

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("interval count k must be >= 1")
        if self.t <= 0.0:
            raise ValidationError("error tolerance t must be positive")
        if not self.lo < self.hi:
            raise ValidationError("interval range needs lo < hi")


@dataclass(frozen=True)
class IntervalStat:
    """One interval of the IER report; ``ier`` is None when the interval is empty."""

    lo: float
    hi: float
    n: int
    ier: float | None

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "n": self.n, "ier": self.ier}


@dataclass(frozen=True)
class IerReport:
    intervals: tuple[IntervalStat, ...]
    t: float
    n_total: int

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "n_total": self.n_total,
            "intervals": [s.to_dict() for s in self.intervals],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IerReport":
        intervals = tuple(
            IntervalStat(lo=s["lo"], hi=s["hi"], n=s["n"], ier=s["ier"])
            for s in data["intervals"]
        )
        return cls(intervals=intervals, t=data["t"], n_total=data["n_total"])


def interval_error_rate(pairs: Sequence[EvalPair], cfg: IerConfig) -> IerReport:
    """Per-interval fraction of samples with ``|pred - truth| > t``.

    Samples are assigned by truth score to half-open intervals
    ``[lo_k, hi_k)``, the top interval closed at ``hi``. Truth scores outside
    the configured range are clamped into the edge intervals so every sample
    is counted. Empty intervals are reported with ``ier=None``.
    """
    pred, truth = _split(pairs)
    width = (cfg.hi - cfg.lo) / cfg.k
    idx = np.floor((truth - cfg.lo) / width).astype(int)
    idx = np.clip(idx, 0, cfg.k - 1)
    errors = np.abs(pred - truth) > cfg.t
    stats = []
    for k in range(cfg.k):
        mask = idx == k
        n_k = int(mask.sum())
        rate = float(errors[mask].mean()) if n_k else None
        stats.append(IntervalStat(lo=cfg.lo + k * width, hi=cfg.lo + (k + 1) * width,
                                  n=n_k, ier=rate))
    return IerReport(intervals=tuple(stats), t=cfg.t, n_total=len(pairs))


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    srcc: float
    plcc: float
    n: int

    def to_dict(self) -> dict:
        return {"mse": self.mse, "srcc": self.srcc, "plcc": self.plcc, "n": self.n}

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(mse=data["mse"], srcc=data["srcc"], plcc=data["plcc"], n=data["n"])


def compute_metrics(pairs: Sequence[EvalPair]) -> MetricsReport:
    """MSE, SRCC and PLCC bundled into one report."""
    return MetricsReport(mse=mse(pairs), srcc=srcc(pairs), plcc=plcc(pairs), n=len(pairs))
