"""Deterministic synthetic dataset whose labels derive from image statistics.

Each image is an oriented linear gradient of a drawn amplitude, riding on a
random brightness level, plus pixel noise. The ground-truth score is a
closed-form function of the SAVED pixels: the standard deviation (contrast)
of the stored uint8 image, mapped affinely onto the score range. Brightness
is a nuisance factor deliberately uncorrelated with the score, so a model
must isolate contrast rather than latch onto the mean, which keeps the task
learnable but not free. The label distribution is a discretized Gaussian
bump around the score, optionally perturbed by seeded per-bin noise. Because
the rule reads the stored pixels and all randomness is derived from
(seed, purpose, index), labels can be recomputed from the files bit-for-bit.

Gradient amplitudes are drawn from a clipped normal centered mid-range, so
the marginal score distribution is Gaussian-like imbalanced and the outer
score intervals stay sparse or empty.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import Manifest, SampleRecord, derive_rng
from .distributions import ScoreDistribution
from .errors import ValidationError


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 64
    unlabeled_n: int | None = None
    image_size: int = 64
    seed: int = 0
    noise_level: float = 0.0
    bin_values: tuple[float, ...] = tuple(float(v) for v in range(1, 11))
    label_sigma: float = 0.75

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("n must be >= 1")
        if self.image_size < 8:
            raise ValidationError("image_size must be >= 8")
        if self.noise_level < 0.0:
            raise ValidationError("noise_level must be non-negative")
        if self.label_sigma <= 0.0:
            raise ValidationError("label_sigma must be positive")
        object.__setattr__(self, "bin_values", tuple(float(v) for v in self.bin_values))

    @property
    def twin_n(self) -> int:
        return self.unlabeled_n if self.unlabeled_n is not None else self.n


# contrast-to-score mapping constants of the closed-form labeling rule
CONTRAST_FLOOR = 0.01
CONTRAST_SPAN = 0.13
PIXEL_NOISE = 0.01


def render_image(spec: SyntheticSpec, index: int) -> np.ndarray:
    """One (S, S, 3) uint8 image, fully determined by (spec.seed, index)."""
    rng = derive_rng(spec.seed, "image", index)
    brightness = float(np.clip(rng.normal(0.5, 0.12), 0.15, 0.85))
    amplitude = float(np.clip(rng.normal(0.10, 0.05), 0.01, 0.22))
    angle = float(rng.uniform(0.0, 2.0 * np.pi))
    s = spec.image_size
    coords = (np.arange(s) - (s - 1) / 2.0) / s
    ramp = np.cos(angle) * coords[None, :] + np.sin(angle) * coords[:, None]
    base = brightness + 2.0 * amplitude * ramp
    img = base[:, :, None] + rng.normal(0.0, PIXEL_NOISE, size=(s, s, 3))
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def score_from_pixels(pixels: np.ndarray, bin_values: tuple[float, ...]) -> float:
    """Closed-form latent score: pixel contrast mapped affinely onto the bin range.

    Contrast is the standard deviation of the stored uint8 intensities scaled
    to [0, 1], shifted by ``CONTRAST_FLOOR`` and scaled by ``CONTRAST_SPAN``
    so typical gradient amplitudes cover the score range.
    """
    lo, hi = bin_values[0], bin_values[-1]
    contrast = float(pixels.astype(np.float64).std()) / 255.0
    frac = min(max((contrast - CONTRAST_FLOOR) / CONTRAST_SPAN, 0.0), 1.0)
    return lo + (hi - lo) * frac


def label_for(spec: SyntheticSpec, index: int, pixels: np.ndarray) -> ScoreDistribution:
    """Discretized Gaussian bump around the pixel-derived score.

    With ``noise_level > 0`` every bin weight is perturbed by a lognormal
    factor drawn from the per-sample label stream, then renormalized, so
    labels stay valid distributions yet the recomputation rule remains exact.
    """
    score = score_from_pixels(pixels, spec.bin_values)
    bins = np.asarray(spec.bin_values, dtype=np.float64)
    weights = np.exp(-((bins - score) ** 2) / (2.0 * spec.label_sigma ** 2))
    if spec.noise_level > 0.0:
        rng = derive_rng(spec.seed, "label", index)
        weights = weights * np.exp(spec.noise_level * rng.normal(size=len(bins)))
    return ScoreDistribution.from_weights(weights, spec.bin_values)


def generate(spec: SyntheticSpec, out_dir: str | Path) -> tuple[Manifest, Manifest]:
    """Write PNGs plus labeled and unlabeled-twin manifests; returns both manifests.

    The unlabeled twin is a disjoint draw (indices offset past the labeled
    set) with labels omitted. Identical specs produce byte-identical files.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    def emit(index: int, labeled: bool) -> SampleRecord:
        pixels = render_image(spec, index)
        name = f"synth_{index:06d}.png"
        Image.fromarray(pixels).save(images_dir / name)
        label = label_for(spec, index, pixels) if labeled else None
        return SampleRecord(id=f"synth_{index:06d}", uri=str(images_dir / name),
                            source="synthetic", label=label)

    labeled_records = [emit(i, True) for i in range(spec.n)]
    twin_records = [emit(spec.n + i, False) for i in range(spec.twin_n)]
    labeled = Manifest(records=tuple(labeled_records), labeled=True,
                       bin_values=spec.bin_values)
    unlabeled = Manifest(records=tuple(twin_records), labeled=False)
    labeled.save(out_dir / "labeled.jsonl")
    unlabeled.save(out_dir / "unlabeled.jsonl")
    # reload so returned records carry resolved uris, exactly as consumers see them
    return (Manifest.load(out_dir / "labeled.jsonl"),
            Manifest.load(out_dir / "unlabeled.jsonl"))
