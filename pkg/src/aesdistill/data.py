"""Dataset manifests, deterministic preprocessing and mixed-batch composition.

Manifests are line-delimited JSON: one header object followed by one record
per line, which keeps multi-million-row listings streamable and diffable.
Augmentation draws are derived statelessly from (seed, epoch, sample id), so
any batch can be reproduced without replaying RNG history.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .distributions import ScoreDistribution
from .errors import CompositionError, ValidationError

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "aesdistill/manifest/v1"


def derive_seed(*keys) -> int:
    """Stable 63-bit seed from an arbitrary key tuple."""
    blob = json.dumps([repr(k) for k in keys]).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big") >> 1


def derive_rng(*keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*keys))


@dataclass(frozen=True)
class SampleRecord:
    """One image reference with an optional label.

    ``label`` is a ScoreDistribution, a scalar mean opinion score, or None
    for unlabeled records.
    """

    id: str
    uri: str
    source: str = "unknown"
    label: ScoreDistribution | float | None = None

    def __post_init__(self):
        if not self.uri:
            raise ValidationError(f"record {self.id!r} has an empty uri")
        if not self.id:
            raise ValidationError("record ids must be non-empty")


@dataclass(frozen=True)
class Manifest:
    """A typed list of sample records from one or more sources.

    Labeling is all-or-none: a labeled manifest carries a label on every
    record, an unlabeled one on none. Labeled manifests declare either the
    shared bin values (distribution labels) or the score range (scalar
    labels).
    """

    records: tuple[SampleRecord, ...]
    labeled: bool
    bin_values: tuple[float, ...] | None = None
    score_range: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise ValidationError(f"duplicate record id {rec.id!r} in manifest")
            seen.add(rec.id)
            has_label = rec.label is not None
            if has_label != self.labeled:
                raise ValidationError(
                    f"record {rec.id!r} breaks the all-or-none labeling rule"
                )
            if isinstance(rec.label, float) and self.score_range is not None:
                lo, hi = self.score_range
                if not lo <= rec.label <= hi:
                    raise ValidationError(
                        f"scalar label {rec.label} of {rec.id!r} outside "
                        f"declared range [{lo}, {hi}]"
                    )
        if self.labeled and self.bin_values is None and self.score_range is None:
            raise ValidationError("labeled manifests must declare bin_values or score_range")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self) -> dict[str, SampleRecord]:
        return {r.id: r for r in self.records}

    def save(self, path: str | Path) -> None:
        """Write the manifest; image uris under the manifest directory are stored
        relative to it, which keeps regenerated datasets byte-identical and the
        directory relocatable."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        header = {
            "schema": MANIFEST_SCHEMA,
            "labeled": self.labeled,
            "bin_values": list(self.bin_values) if self.bin_values else None,
            "score_range": list(self.score_range) if self.score_range else None,
            "count": len(self.records),
        }
        with open(path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.records:
                if isinstance(rec.label, ScoreDistribution):
                    label = {"probs": list(rec.label.probs)}
                else:
                    label = rec.label
                uri = rec.uri
                try:
                    uri = str(Path(uri).resolve().relative_to(base))
                except ValueError:
                    pass  # outside the manifest directory: keep as given
                fh.write(json.dumps(
                    {"id": rec.id, "uri": uri, "source": rec.source, "label": label}
                ) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("schema") != MANIFEST_SCHEMA:
                raise ValidationError(f"{path} is not a manifest file")
            bin_values = tuple(header["bin_values"]) if header.get("bin_values") else None
            records = []
            for line in fh:
                if not line.strip():
                    continue
                raw = json.loads(line)
                label = raw.get("label")
                if isinstance(label, dict):
                    if bin_values is None:
                        raise ValidationError(
                            f"{path}: distribution labels need bin_values in the header"
                        )
                    label = ScoreDistribution.from_stored(label["probs"], bin_values)
                elif label is not None:
                    label = float(label)
                uri = raw["uri"]
                if not Path(uri).is_absolute():
                    uri = str(path.parent.resolve() / uri)
                records.append(SampleRecord(id=raw["id"], uri=uri,
                                            source=raw.get("source", "unknown"),
                                            label=label))
        score_range = tuple(header["score_range"]) if header.get("score_range") else None
        return cls(records=tuple(records), labeled=bool(header["labeled"]),
                   bin_values=bin_values, score_range=score_range)


@dataclass(frozen=True)
class MergeResult:
    manifest: Manifest
    duplicates_dropped: int
    per_source: dict[str, int]


def merge_manifests(sources: Sequence[Manifest]) -> MergeResult:
    """Concatenate manifests, deduplicate by id, sort by id.

    All inputs must be uniformly unlabeled, or uniformly labeled with an
    identical bin spec. Duplicate ids keep the first occurrence; the count of
    dropped duplicates is reported.
    """
    if not sources:
        raise CompositionError("merge needs at least one manifest")
    labeled = sources[0].labeled
    bin_values = sources[0].bin_values
    score_range = sources[0].score_range
    for m in sources[1:]:
        if m.labeled != labeled:
            raise CompositionError("cannot merge labeled and unlabeled manifests")
        if labeled and (m.bin_values != bin_values or m.score_range != score_range):
            raise CompositionError("labeled manifests must share an identical bin spec")
    seen: dict[str, SampleRecord] = {}
    dropped = 0
    for m in sources:
        for rec in m.records:
            if rec.id in seen:
                dropped += 1
            else:
                seen[rec.id] = rec
    if dropped:
        logger.warning("merge dropped %d duplicate record ids", dropped)
    records = tuple(seen[i] for i in sorted(seen))
    per_source: dict[str, int] = {}
    for rec in records:
        per_source[rec.source] = per_source.get(rec.source, 0) + 1
    merged = Manifest(records=records, labeled=labeled,
                      bin_values=bin_values, score_range=score_range)
    return MergeResult(manifest=merged, duplicates_dropped=dropped, per_source=per_source)


@dataclass(frozen=True)
class PreprocessSpec:
    """Resize / crop / flip policy plus the augmentation seed.

    Train mode resizes to a square, takes a random crop and flips with
    ``hflip_prob``; eval mode center-crops with no flip. Draws come from the
    generator passed to ``preprocess``, conventionally derived from
    (seed, epoch, sample id).
    """

    resize: int = 256
    crop: int = 224
    hflip_prob: float = 0.5
    mode: str = "train"
    seed: int = 0

    def __post_init__(self):
        if self.crop > self.resize:
            raise ValidationError("crop size cannot exceed resize size")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValidationError("hflip_prob must be in [0, 1]")
        if self.mode not in ("train", "eval"):
            raise ValidationError(f"unknown preprocess mode {self.mode!r}")

    def eval_variant(self) -> "PreprocessSpec":
        return replace(self, mode="eval")

    def fingerprint_fields(self) -> dict:
        return {"resize": self.resize, "crop": self.crop,
                "hflip_prob": self.hflip_prob, "seed": self.seed}


class DecodeError(Exception):
    """Image bytes could not be decoded."""


def load_image(uri: str | Path) -> np.ndarray:
    """Decode an image file to an RGB uint8 array (H, W, 3)."""
    try:
        with Image.open(uri) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"cannot decode {uri}: {exc}") from exc


def preprocess(image: np.ndarray, spec: PreprocessSpec,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Resize, crop and (in train mode) flip one decoded image.

    Output is always (crop, crop, C) uint8. Train mode consumes exactly three
    draws from ``rng`` in a fixed order (crop row, crop col, flip), so
    identical generators give identical outputs.
    """
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValidationError("image must be at least 1x1")
    resized = np.asarray(
        Image.fromarray(image[:, :, 0] if image.shape[2] == 1 else image)
        .resize((spec.resize, spec.resize), Image.BILINEAR),
        dtype=np.uint8,
    )
    if resized.ndim == 2:
        resized = resized[:, :, None]
    margin = spec.resize - spec.crop
    if spec.mode == "train":
        if rng is None:
            raise ValueError("train-mode preprocessing needs a random generator")
        top = int(rng.integers(0, margin + 1))
        left = int(rng.integers(0, margin + 1))
        flip = bool(rng.random() < spec.hflip_prob)
    else:
        top = left = margin // 2
        flip = False
    out = resized[top:top + spec.crop, left:left + spec.crop]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


class SkipLog:
    """Collects ids of records skipped because their image failed to decode."""

    def __init__(self):
        self.skipped: list[tuple[str, str]] = []

    def record(self, sample_id: str, reason: str) -> None:
        logger.warning("skipping sample %s: %s", sample_id, reason)
        self.skipped.append((sample_id, reason))

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for sample_id, reason in self.skipped:
                fh.write(json.dumps({"id": sample_id, "reason": reason}) + "\n")


def batch_views(records: dict[str, SampleRecord], ids: Sequence[str],
                spec: PreprocessSpec, epoch: int,
                skip_log: SkipLog | None = None) -> tuple[np.ndarray, list[str]]:
    """Decode and preprocess one batch to a (B, crop, crop, 3) uint8 stack.

    Undecodable images are skipped (logged, dropped from the batch); the
    second return value lists the ids actually kept, in order. The
    augmentation draw for each sample is derived from
    (spec.seed, epoch, sample id) so views are reproducible without shared
    RNG state.
    """
    views = []
    kept = []
    for sample_id in ids:
        rec = records[sample_id]
        try:
            img = load_image(rec.uri)
        except DecodeError as exc:
            if skip_log is not None:
                skip_log.record(sample_id, str(exc))
            else:
                logger.warning("skipping sample %s: %s", sample_id, exc)
            continue
        rng = derive_rng(spec.seed, "view", epoch, sample_id)
        views.append(preprocess(img, spec, rng))
        kept.append(sample_id)
    if not views:
        raise ValueError("every image in the batch failed to decode")
    return np.stack(views), kept


@dataclass(frozen=True)
class Normalization:
    """Per-channel pixel normalization applied after scaling to [0, 1]."""

    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def fingerprint_fields(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


@dataclass(frozen=True)
class BatchPlan:
    """Mixed-batch composition: ``b_s`` labeled plus ``mu * b_s`` unlabeled samples."""

    b_s: int
    mu: int = 0

    def __post_init__(self):
        if self.b_s < 1:
            raise ValidationError("b_s must be >= 1")
        if self.mu < 0:
            raise ValidationError("mu must be non-negative")

    @property
    def total(self) -> int:
        return self.b_s * (1 + self.mu)


@dataclass(frozen=True)
class MixedBatch:
    labeled_ids: tuple[str, ...]
    unlabeled_ids: tuple[str, ...]

    @property
    def ids(self) -> tuple[str, ...]:
        return self.labeled_ids + self.unlabeled_ids


def compose_batches(labeled: Manifest, unlabeled: Manifest | None,
                    plan: BatchPlan, epoch_seed: int,
                    drop_remainder: bool = False) -> Iterator[MixedBatch]:
    """One epoch of mixed batches with exact segment sizes.

    Every batch holds exactly ``plan.b_s`` labeled and ``plan.mu * plan.b_s``
    unlabeled ids. The labeled pool is shuffled once per epoch and consumed
    exactly once; the unlabeled pool is shuffled and cycled (reshuffling on
    exhaustion) for as many draws as the epoch needs. With
    ``drop_remainder=False`` the labeled size must be divisible by ``b_s``,
    otherwise the trailing partial batch is silently dropped.
    """
    n = len(labeled)
    if n == 0:
        raise ValueError("labeled manifest is empty")
    if n < plan.b_s:
        raise ValueError(f"labeled manifest has {n} records, need at least b_s={plan.b_s}")
    if n % plan.b_s != 0 and not drop_remainder:
        raise CompositionError(
            f"labeled size {n} is not divisible by b_s={plan.b_s}; an epoch cannot "
            f"cover every labeled sample exactly once (pass drop_remainder=True to "
            f"drop the trailing partial batch)"
        )
    if plan.mu > 0 and (unlabeled is None or len(unlabeled) == 0):
        raise CompositionError("mu > 0 requires a non-empty unlabeled manifest")

    labeled_ids = list(labeled.ids)
    rng_l = derive_rng(epoch_seed, "labeled")
    order = rng_l.permutation(len(labeled_ids))
    n_batches = n // plan.b_s

    def unlabeled_stream() -> Iterator[str]:
        ids = list(unlabeled.ids)
        cycle = 0
        while True:
            rng_u = derive_rng(epoch_seed, "unlabeled", cycle)
            for j in rng_u.permutation(len(ids)):
                yield ids[j]
            cycle += 1

    stream = unlabeled_stream() if plan.mu > 0 else None
    for b in range(n_batches):
        chunk = order[b * plan.b_s:(b + 1) * plan.b_s]
        lab = tuple(labeled_ids[i] for i in chunk)
        unl = tuple(next(stream) for _ in range(plan.mu * plan.b_s)) if stream else ()
        yield MixedBatch(labeled_ids=lab, unlabeled_ids=unl)
