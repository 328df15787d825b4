"""Model abstractions: tiny encoders, projector, prediction head, feature cache.

The frozen reference encoder (a CLIP image tower in production) is any module
exposing a pooled feature vector behind ``encode``; desk-scale tests use a
frozen randomly initialized tiny transformer, and real deployments can load
pretrained weights through checkpoints or ship features via ``FeatureCache``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .attention import AttentionMap
from .data import (DecodeError, Manifest, Normalization, PreprocessSpec,
                   SkipLog, batch_views)
from .errors import (CacheIntegrityError, ConfigError, ShapeMismatchError,
                     UnsupportedCapabilityError, ValidationError)

CHECKPOINT_FORMAT = "aesdistill/ckpt/v1"
CACHE_MAGIC = "aesdistill/feature-cache/v1"


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture of a tiny encoder.

    ``tiny_vit`` is a pre-norm transformer with a CLS token whose feature is
    the CLS output (feature_dim must equal width); ``tiny_conv`` is a small
    strided convnet with global average pooling and a linear feature layer.
    """

    family: str = "tiny_vit"
    image_size: int = 32
    patch_size: int = 8
    depth: int = 2
    width: int = 64
    heads: int = 4
    feature_dim: int = 64

    def __post_init__(self):
        if self.family not in ("tiny_vit", "tiny_conv"):
            raise ValidationError(f"unknown encoder family {self.family!r}")
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be >= 1")
        if self.family == "tiny_vit":
            if self.image_size % self.patch_size != 0:
                raise ValidationError("image_size must be divisible by patch_size")
            if self.width % self.heads != 0:
                raise ValidationError("width must be divisible by heads")
            if self.feature_dim != self.width:
                raise ValidationError("tiny_vit feature_dim must equal width")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)


class _SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.capture = False
        self.last_weights: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        if self.capture:
            self.last_weights = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, t, c)
        return self.proj(out)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim)
        )

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TinyVit(nn.Module):
    """Minimal vision transformer; the feature is the CLS token after the final norm."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        assert spec.family == "tiny_vit"
        self.spec = spec
        n_patches = spec.grid[0] * spec.grid[1]
        self.patch_embed = nn.Conv2d(3, spec.width, kernel_size=spec.patch_size,
                                     stride=spec.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, spec.width))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches + 1, spec.width))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(_Block(spec.width, spec.heads)
                                    for _ in range(spec.depth))
        self.norm = nn.LayerNorm(spec.width)

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def set_capture(self, enabled: bool) -> None:
        for block in self.blocks:
            block.attn.capture = enabled
            if not enabled:
                block.attn.last_weights = None

    def captured_weights(self) -> list[Tensor]:
        """Per-layer (B, heads, T, T) attention of the most recent forward."""
        weights = [block.attn.last_weights for block in self.blocks]
        if any(w is None for w in weights):
            raise RuntimeError("no attention captured; call set_capture(True) and run a forward")
        return weights  # type: ignore[return-value]

    def forward(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        tokens = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1)
        tokens = tokens + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)[:, 0]


class TinyConv(nn.Module):
    """Three strided conv stages, global average pooling, linear feature layer."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        assert spec.family == "tiny_conv"
        self.spec = spec
        w = spec.width
        self.features = nn.Sequential(
            nn.Conv2d(3, w // 2, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(w // 2, w, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.GELU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(w, spec.feature_dim)

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(self.features(x).flatten(1))


def build_encoder(spec: EncoderSpec, seed: int = 0) -> nn.Module:
    """Construct an encoder with deterministic, seed-controlled initialization."""
    torch.manual_seed(derive_model_seed(spec, seed))
    if spec.family == "tiny_vit":
        return TinyVit(spec)
    return TinyConv(spec)


def derive_model_seed(spec: EncoderSpec, seed: int) -> int:
    blob = json.dumps([asdict(spec), seed], sort_keys=True).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big") >> 1


class Projector(nn.Module):
    """Two-layer MLP mapping the student feature into the teacher feature space."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or out_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim)
        )
        self.out_dim = out_dim

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class PredictionHead(nn.Module):
    """MLP from feature to score-bin logits; ``probs`` applies the softmax."""

    def __init__(self, in_dim: int, n_bins: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or in_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, n_bins)
        )
        self.n_bins = n_bins

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)

    def probs(self, x: Tensor) -> Tensor:
        return torch.softmax(self.net(x), dim=-1)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def is_frozen(module: nn.Module) -> bool:
    return not any(p.requires_grad for p in module.parameters())


def params_digest(module: nn.Module) -> str:
    """SHA-256 over the name-sorted parameter and buffer bytes."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def encode(encoder: nn.Module, images: Tensor) -> Tensor:
    """One feature vector per image; frozen encoders yield gradient-free outputs."""
    if images.ndim != 4:
        raise ShapeMismatchError("expected an image batch of shape (B, C, H, W)")
    if is_frozen(encoder):
        with torch.no_grad():
            return encoder(images)
    return encoder(images)


def predict_distribution(backbone: nn.Module, head: PredictionHead,
                         images: Tensor) -> Tensor:
    """(B, d) score-bin probabilities; rows are valid distributions by construction."""
    return head.probs(encode(backbone, images))


def capture_attention(encoder: nn.Module, images: Tensor) -> list[list[AttentionMap]]:
    """Attention maps for every image and layer: result[image][layer].

    Only transformer-family encoders expose attention; anything else raises
    ``UnsupportedCapabilityError``.
    """
    if not isinstance(encoder, TinyVit):
        raise UnsupportedCapabilityError(
            f"{type(encoder).__name__} does not expose attention maps"
        )
    encoder.set_capture(True)
    try:
        with torch.no_grad():
            encoder(images)
        per_layer = [w.cpu().numpy() for w in encoder.captured_weights()]
    finally:
        encoder.set_capture(False)
    grid = encoder.spec.grid
    n_images = images.shape[0]
    return [
        [AttentionMap(weights=layer[i], grid=grid, cls_present=True)
         for layer in per_layer]
        for i in range(n_images)
    ]


def to_tensor(views_u8: np.ndarray, norm: Normalization) -> Tensor:
    """(B, H, W, 3) uint8 views to normalized float32 (B, 3, H, W)."""
    x = torch.from_numpy(views_u8.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
    mean = torch.tensor(norm.mean, dtype=torch.float32).view(1, 3, 1, 1)
    std = torch.tensor(norm.std, dtype=torch.float32).view(1, 3, 1, 1)
    return (x - mean) / std


def preprocess_fingerprint(spec: PreprocessSpec, norm: Normalization) -> str:
    blob = json.dumps({"preprocess": spec.fingerprint_fields(),
                       "norm": norm.fingerprint_fields()}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class FeatureCache:
    """Disk-backed map from sample id to a frozen encoder's feature vector.

    The file records the encoder identity and preprocessing fingerprint; a
    cache is only usable with the exact pairing it was built from.
    """

    def __init__(self, teacher_id: str, preprocess_fp: str, feature_dim: int,
                 vectors: dict[str, np.ndarray]):
        self.teacher_id = teacher_id
        self.preprocess_fp = preprocess_fp
        self.feature_dim = feature_dim
        self.vectors = vectors
        for sample_id, vec in vectors.items():
            if vec.shape != (feature_dim,):
                raise CacheIntegrityError(
                    f"cached vector for {sample_id!r} has shape {vec.shape}, "
                    f"expected ({feature_dim},)"
                )

    def __len__(self) -> int:
        return len(self.vectors)

    def get(self, sample_id: str) -> np.ndarray:
        return self.vectors[sample_id]

    def lookup(self, ids: Sequence[str]) -> Tensor:
        return torch.from_numpy(np.stack([self.vectors[i] for i in ids]))

    def verify(self, teacher_id: str, preprocess_fp: str) -> None:
        if teacher_id != self.teacher_id or preprocess_fp != self.preprocess_fp:
            raise CacheIntegrityError(
                "feature cache fingerprint mismatch: cache was built for "
                f"teacher={self.teacher_id}/prep={self.preprocess_fp}, "
                f"requested teacher={teacher_id}/prep={preprocess_fp}"
            )

    def save(self, path: str | Path) -> None:
        """Deterministic layout: one JSON header line, then id-sorted float32 bytes."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ids = sorted(self.vectors)
        header = json.dumps({
            "magic": CACHE_MAGIC,
            "teacher_id": self.teacher_id,
            "preprocess_fp": self.preprocess_fp,
            "feature_dim": self.feature_dim,
            "count": len(ids),
            "ids": ids,
        }, sort_keys=True).encode()
        body = b"".join(
            np.ascontiguousarray(self.vectors[i], dtype=np.float32).tobytes()
            for i in ids
        )
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(header + b"\n" + body)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureCache":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            if header.get("magic") != CACHE_MAGIC:
                raise CacheIntegrityError(f"{path} is not a feature cache file")
            dim = int(header["feature_dim"])
            ids = header["ids"]
            body = fh.read()
        expected = len(ids) * dim * 4
        if len(body) != expected:
            raise CacheIntegrityError(
                f"{path}: body has {len(body)} bytes, expected {expected}"
            )
        flat = np.frombuffer(body, dtype=np.float32).reshape(len(ids), dim)
        vectors = {sample_id: flat[i].copy() for i, sample_id in enumerate(ids)}
        return cls(header["teacher_id"], header["preprocess_fp"], dim, vectors)


def cache_features(encoder: nn.Module, manifest: Manifest, spec: PreprocessSpec,
                   norm: Normalization, batch_size: int = 64,
                   skip_log: SkipLog | None = None) -> FeatureCache:
    """Encode every decodable manifest record with eval-mode preprocessing.

    The encoder must be frozen; the cache records its parameter digest and the
    preprocessing fingerprint so later lookups can verify provenance.
    """
    if not is_frozen(encoder):
        raise ConfigError("feature caching requires a frozen encoder")
    eval_spec = spec.eval_variant()
    records = manifest.by_id()
    ids = manifest.ids
    vectors: dict[str, np.ndarray] = {}
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        try:
            views, kept = batch_views(records, chunk, eval_spec, epoch=0,
                                      skip_log=skip_log)
        except ValueError:
            continue  # whole chunk undecodable
        feats = encode(encoder, to_tensor(views, norm))
        for i, sample_id in enumerate(kept):
            vectors[sample_id] = feats[i].cpu().numpy().astype(np.float32)
    teacher_id = params_digest(encoder)
    fp = preprocess_fingerprint(spec, norm)
    dim = next(iter(vectors.values())).shape[0] if vectors else 0
    return FeatureCache(teacher_id, fp, dim, vectors)


def save_checkpoint(path: str | Path, payload: dict) -> None:
    """Atomic checkpoint write (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": CHECKPOINT_FORMAT, **payload}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a toolkit checkpoint")
    return payload


def encoder_from_checkpoint(payload: dict, key: str = "backbone") -> nn.Module:
    """Rebuild an encoder module from a checkpoint payload."""
    spec = EncoderSpec(**payload["encoder_spec"])
    encoder = build_encoder(spec, seed=0)
    encoder.load_state_dict(payload[key])
    return encoder
