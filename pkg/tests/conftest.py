import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from aesdistill.data import Normalization, PreprocessSpec
from aesdistill.models import EncoderSpec
from aesdistill.synthetic import SyntheticSpec, generate

DESK_BINS = tuple(float(v) for v in range(1, 11))

VIT_SPEC = EncoderSpec(family="tiny_vit", image_size=32, patch_size=4,
                       depth=2, width=64, heads=4, feature_dim=64)
SMALL_VIT_SPEC = EncoderSpec(family="tiny_vit", image_size=32, patch_size=4,
                             depth=1, width=32, heads=2, feature_dim=32)
CONV_SPEC = EncoderSpec(family="tiny_conv", image_size=32, width=32,
                        feature_dim=32)
DESK_PREPROCESS = PreprocessSpec(resize=36, crop=32, hflip_prob=0.5,
                                 mode="train", seed=0)
DESK_NORM = Normalization(mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """Small shared synthetic dataset: 64 labeled + 64 unlabeled twins."""
    out = tmp_path_factory.mktemp("synth")
    spec = SyntheticSpec(n=64, image_size=48, seed=7, noise_level=0.05)
    labeled, unlabeled = generate(spec, out)
    return {"dir": out, "spec": spec, "labeled": labeled, "unlabeled": unlabeled}


def random_probs(rng: np.random.Generator, d: int) -> np.ndarray:
    w = rng.random(d) + 1e-3
    return w / w.sum()
