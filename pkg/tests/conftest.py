"""Shared fixtures: synthetic image datasets and small model factories."""

import numpy as np
import pytest
from PIL import Image

from dvit import nn
from dvit.data import ManifestEntry
from dvit.model import DViT, ModelConfig
from dvit.tensor import Tensor


def class_texture(class_id: int, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """An oriented sinusoid with a per-class tint; phase varies per sample."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    theta = class_id * np.pi / 8.0
    freq = (1.0 + class_id) * 2.0 * np.pi / size
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    tint = np.array([class_id % 2, (class_id >> 1) % 2, (class_id >> 2) % 2], dtype=np.float64)
    tint = 0.3 + 0.55 * tint
    img = 0.5 + 0.4 * wave[..., None] * tint
    img = img + rng.normal(0.0, 0.02, size=(size, size, 3))
    return np.clip(img * 255.0, 0, 255).astype(np.uint8)


def build_texture_dataset(root, classes: int = 8, per_class: int = 8,
                          size: int = 64, seed: int = 7,
                          split: str = "train") -> list:
    """Write PNG textures under root and return manifest entries."""
    rng = np.random.default_rng(seed)
    entries = []
    for c in range(classes):
        for i in range(per_class):
            path = str(root / f"class{c}_{i}.png")
            Image.fromarray(class_texture(c, rng, size)).save(path)
            entries.append(ManifestEntry(path=path, label=f"class{c}", split=split))
    return entries


@pytest.fixture(scope="session")
def texture_dataset(tmp_path_factory):
    """64 images, 8 classes, all assigned to the train split."""
    root = tmp_path_factory.mktemp("textures")
    return build_texture_dataset(root)


def tiny_model(num_classes: int = 4, seed: int = 0, input_size: int = 64,
               dtype=np.float64, **overrides) -> DViT:
    cfg = ModelConfig.tiny(num_classes=num_classes, input_size=input_size, **overrides)
    return DViT(cfg, rng=np.random.default_rng(seed), dtype=dtype)


class QuadrantModel(nn.Module):
    """Four feature channels, each alive in one quadrant of the map.

    Class c's logit reads channel c, so the class-c evidence lives entirely
    inside quadrant c.  sign=-1 flips the gradient to exercise the ReLU.
    """

    def __init__(self, size=8, sign=1.0):
        self.proj = Tensor(np.ones((4,)), requires_grad=True)
        self.sign = sign
        self.size = size
        self.captured = {}
        h = size // 2
        masks = np.zeros((4, size, size))
        masks[0, :h, :h] = 1.0
        masks[1, :h, h:] = 1.0
        masks[2, h:, :h] = 1.0
        masks[3, h:, h:] = 1.0
        self._masks = masks

    def __call__(self, x, training=False, rng=None):
        # stride-2 subsample stands in for a backbone: capture at half size
        base = Tensor(np.abs(x.data[:, :1, ::2, ::2]) + 0.5)  # positive
        act = base * Tensor(self._masks[None]) * self.proj.reshape(1, 4, 1, 1)
        self.captured = {"quad": act}
        logits = act.sum(axis=(2, 3)) * self.sign
        return logits


def randomize_offsets(module, rng: np.random.Generator) -> None:
    """Move predicted sample points off the integer grid.

    With zero offsets every sample lands on a lattice point, where bilinear
    interpolation is not differentiable; finite differences straddle the kink
    and disagree with the analytic gradient.  Random offset weights plus a
    fractional bias shift keep probes on smooth ground.
    """
    for name, p in module.named_parameters():
        if name.endswith("offmod_proj.weight"):
            p.data[:] = rng.normal(0.0, 0.2, size=p.shape)
        elif name.endswith("offmod_proj.bias"):
            p.data += 0.37
