"""Binned aesthetic score distributions and their scalar summaries.

The unit of prediction, ground truth and pseudo label throughout the toolkit
is a probability vector over a fixed set of score bins. The default binning
is the ten-point 1..10 convention used by the large aesthetics benchmarks;
both the bin count and the score each bin represents are configurable
because other datasets use different scales.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

DEFAULT_BIN_VALUES: tuple[float, ...] = tuple(float(v) for v in range(1, 11))

#: tolerance on |sum(probs) - 1| for a vector to count as normalized
NORMALIZATION_TOL = 1e-6
#: vectors read from files are renormalized if within this, rejected otherwise
STORED_RENORMALIZATION_TOL = 1e-3


def _as_float_tuple(values: Iterable[float]) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class ScoreDistribution:
    """A probability vector over strictly increasing score bins.

    Invariants enforced at construction: all probabilities non-negative and
    summing to 1 within ``NORMALIZATION_TOL``; at least two bins; bin values
    strictly increasing; one probability per bin.
    """

    probs: tuple[float, ...]
    bin_values: tuple[float, ...] = DEFAULT_BIN_VALUES

    def __post_init__(self):
        probs = _as_float_tuple(self.probs)
        bins = _as_float_tuple(self.bin_values)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "bin_values", bins)
        if len(probs) != len(bins):
            raise ValidationError(
                f"probs has {len(probs)} entries but bin_values has {len(bins)}"
            )
        if len(probs) < 2:
            raise ValidationError("a score distribution needs at least 2 bins")
        if any(p < 0.0 for p in probs):
            raise ValidationError("probabilities must be non-negative")
        total = sum(probs)
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise ValidationError(
                f"probabilities sum to {total!r}, expected 1 within {NORMALIZATION_TOL}"
            )
        if any(b2 <= b1 for b1, b2 in zip(bins, bins[1:])):
            raise ValidationError("bin_values must be strictly increasing")

    @property
    def d(self) -> int:
        return len(self.probs)

    @classmethod
    def from_weights(cls, weights: Sequence[float],
                     bin_values: Sequence[float] = DEFAULT_BIN_VALUES) -> "ScoreDistribution":
        """Normalize an arbitrary non-negative, non-zero weight vector."""
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1:
            raise ValidationError("weights must be a 1-D vector")
        if np.any(w < 0.0):
            raise ValidationError("weights must be non-negative")
        total = float(w.sum())
        if total <= 0.0:
            raise ValidationError("weights must have positive total mass")
        return cls(tuple(w / total), _as_float_tuple(bin_values))

    @classmethod
    def from_stored(cls, probs: Sequence[float],
                    bin_values: Sequence[float] = DEFAULT_BIN_VALUES) -> "ScoreDistribution":
        """Construct from serialized probabilities, renormalizing small drift.

        Stored vectors whose sum is within ``STORED_RENORMALIZATION_TOL`` of 1
        are renormalized; anything further off is rejected as corrupt.
        """
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0.0):
            raise ValidationError("stored probabilities must be a non-negative vector")
        total = float(p.sum())
        if abs(total - 1.0) > STORED_RENORMALIZATION_TOL:
            raise ValidationError(
                f"stored probabilities sum to {total!r}; "
                f"outside the {STORED_RENORMALIZATION_TOL} renormalization window"
            )
        if abs(total - 1.0) > NORMALIZATION_TOL:
            p = p / total  # drifted but within the window: repair it
        return cls(tuple(p), _as_float_tuple(bin_values))


def cdf(dist: ScoreDistribution) -> np.ndarray:
    """Cumulative sums of the distribution, ``out[i] = sum(probs[:i+1])``."""
    return np.cumsum(np.asarray(dist.probs, dtype=np.float64))


def mos(dist: ScoreDistribution) -> float:
    """Mean opinion score: the expectation of the bin values under the distribution."""
    return float(np.dot(dist.probs, dist.bin_values))


def scalar_to_distribution(score: float,
                           bin_values: Sequence[float] = DEFAULT_BIN_VALUES,
                           mode: str = "linear-split") -> ScoreDistribution:
    """Discretize a scalar score onto the bin grid.

    ``linear-split`` divides the mass between the two bracketing bins so the
    MOS of the result reproduces ``score`` exactly; ``nearest-bin`` returns a
    one-hot at the closest bin (ties resolve to the lower bin).
    """
    bins = _as_float_tuple(bin_values)
    if not bins[0] <= score <= bins[-1]:
        raise ValidationError(
            f"score {score} outside bin range [{bins[0]}, {bins[-1]}]"
        )
    probs = np.zeros(len(bins), dtype=np.float64)
    if mode == "nearest-bin":
        idx = int(np.argmin([abs(b - score) for b in bins]))
        probs[idx] = 1.0
    elif mode == "linear-split":
        hi = int(np.searchsorted(bins, score))
        if bins[hi] == score:
            probs[hi] = 1.0
        else:
            lo = hi - 1
            frac = (score - bins[lo]) / (bins[hi] - bins[lo])
            probs[lo] = 1.0 - frac
            probs[hi] = frac
    else:
        raise ValidationError(f"unknown discretization mode {mode!r}")
    return ScoreDistribution(tuple(probs), bins)
