"""Layer-wise attention diagnostics: mean attention distance and entropy.

Distances are measured in patch-grid units (adjacent patches are distance 1)
so the statistic is resolution independent. A CLS token, when present, sits
at token index 0: it is excluded from the distance statistic (its row is
dropped, its column mass renormalized away) but included in the entropy,
which measures concentration over the full attention row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeMismatchError, ValidationError

ROW_SUM_TOL = 1e-5
#: minimum spatial mass a row must retain after the CLS column is removed
MIN_SPATIAL_MASS = 1e-12


@dataclass(frozen=True)
class AttentionMap:
    """Row-stochastic attention weights of one layer for one image.

    ``weights`` has shape (heads, tokens, tokens); token 0 is the CLS token
    when ``cls_present`` is set, followed by the H*W patch tokens in row-major
    grid order.
    """

    weights: np.ndarray
    grid: tuple[int, int]
    cls_present: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 2:
            w = w[None, :, :]
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise ValidationError("weights must have shape (heads, tokens, tokens)")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "grid", (int(self.grid[0]), int(self.grid[1])))
        h, wd = self.grid
        if h < 1 or wd < 1:
            raise ValidationError("grid dimensions must be positive")
        expected = h * wd + (1 if self.cls_present else 0)
        if w.shape[1] != expected:
            raise ValidationError(
                f"token count {w.shape[1]} does not match grid {self.grid} "
                f"with cls_present={self.cls_present}"
            )
        if np.any(w < 0.0):
            raise ValidationError("attention weights must be non-negative")
        row_sums = w.sum(axis=-1)
        if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOL):
            raise ValidationError("attention rows must sum to 1")

    @property
    def n_tokens(self) -> int:
        return self.weights.shape[1]

    @property
    def n_heads(self) -> int:
        return self.weights.shape[0]


def spatial_positions(grid: tuple[int, int]) -> np.ndarray:
    """(H*W, 2) row/column coordinates of the patch tokens in row-major order."""
    h, w = grid
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)


def attention_distances(amap: AttentionMap) -> np.ndarray:
    """Attention-weighted spatial distance per (head, spatial query).

    CLS rows and columns are removed and the remaining spatial rows are
    renormalized so each query's weights again sum to 1.
    """
    w = amap.weights
    if amap.cls_present:
        w = w[:, 1:, 1:]
    if w.shape[1] == 0:
        raise ValueError("attention map has no spatial tokens")
    spatial_mass = w.sum(axis=-1)
    if np.any(spatial_mass < MIN_SPATIAL_MASS):
        raise ValidationError(
            "a spatial row carries no mass outside the CLS column; "
            "cannot renormalize for the distance statistic"
        )
    w = w / spatial_mass[..., None]
    pos = spatial_positions(amap.grid)
    pairwise = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    return (w * pairwise[None, :, :]).sum(axis=-1)


def row_entropies(amap: AttentionMap) -> np.ndarray:
    """Shannon entropy (nats) of every full attention row, per head; 0*ln(0) := 0."""
    w = amap.weights
    logw = np.where(w > 0.0, np.log(np.where(w > 0.0, w, 1.0)), 0.0)
    return -(w * logw).sum(axis=-1)


def mean_attention_distance(amap: AttentionMap) -> tuple[float, float]:
    """Mean and population std of the per-(head, query) attention distances."""
    d = attention_distances(amap)
    return float(d.mean()), float(d.std())


def mean_attention_entropy(amap: AttentionMap) -> float:
    """Mean row entropy over all heads and queries, CLS included."""
    return float(row_entropies(amap).mean())


@dataclass(frozen=True)
class LayerStats:
    mean_distance: float
    distance_std: float
    mean_entropy: float

    def to_dict(self) -> dict:
        return {
            "mean_distance": self.mean_distance,
            "distance_std": self.distance_std,
            "mean_entropy": self.mean_entropy,
        }


@dataclass(frozen=True)
class AttentionStats:
    """Per-layer distance/entropy statistics, pooled over a probe set of images."""

    per_layer: tuple[LayerStats, ...]

    @property
    def depth(self) -> int:
        return len(self.per_layer)

    def to_dict(self) -> dict:
        return {"per_layer": [s.to_dict() for s in self.per_layer]}


def collect_stats(layer_maps: Sequence[Sequence[AttentionMap]]) -> AttentionStats:
    """Pool raw per-(image, head, query) values per layer into AttentionStats.

    ``layer_maps[layer]`` holds the maps of that layer across the probe
    images. Distances and entropies are pooled across images before the mean
    and std are taken, so every (image, head, query) triple weighs equally.
    """
    stats = []
    for maps in layer_maps:
        if not maps:
            raise ValueError("each layer needs at least one attention map")
        dists = np.concatenate([attention_distances(m).ravel() for m in maps])
        ents = np.concatenate([row_entropies(m).ravel() for m in maps])
        stats.append(LayerStats(mean_distance=float(dists.mean()),
                                distance_std=float(dists.std()),
                                mean_entropy=float(ents.mean())))
    return AttentionStats(per_layer=tuple(stats))


@dataclass(frozen=True)
class LayerComparison:
    layer: int
    before: LayerStats
    after: LayerStats

    @property
    def delta(self) -> LayerStats:
        return LayerStats(
            mean_distance=self.after.mean_distance - self.before.mean_distance,
            distance_std=self.after.distance_std - self.before.distance_std,
            mean_entropy=self.after.mean_entropy - self.before.mean_entropy,
        )

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "before": self.before.to_dict(),
            "after": self.after.to_dict(),
            "delta": self.delta.to_dict(),
        }


def compare_stats(before: AttentionStats, after: AttentionStats) -> list[LayerComparison]:
    """Per-layer before/after/delta table for two stat sets of equal depth."""
    if before.depth != after.depth:
        raise ShapeMismatchError(
            f"layer counts differ: {before.depth} vs {after.depth}"
        )
    return [
        LayerComparison(layer=i, before=b, after=a)
        for i, (b, a) in enumerate(zip(before.per_layer, after.per_layer))
    ]
