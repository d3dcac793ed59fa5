"""The DViT classifier.

Pipeline: convolutional stem (two stride-2 3x3 convs, BatchNorm + GELU)
to 1/4 resolution, four deformable-aggregation stages at 1/4, 1/8, 1/16,
1/32 (stage 1 reuses the stem output; later stages begin with a stride-2
3x3 downsampling conv), per-location linear patch embedding of the final
map, a CLS token plus learnable positional embeddings, a pre-norm
transformer encoder, and a LayerNorm + linear head over the CLS output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .dcnv4 import Dcnv4Block, Dcnv4Config
from .tensor import ShapeError, Tensor, concat, dump_tensors, load_tensors

__all__ = ["ModelConfig", "DViT", "Checkpoint", "CheckpointError",
           "save_checkpoint", "load_checkpoint"]


class CheckpointError(RuntimeError):
    """Raised on checkpoint/config mismatches and missing tensors."""


@dataclass
class ModelConfig:
    num_classes: int
    in_channels: int = 3
    input_size: int = 512
    stage_channels: tuple = (80, 160, 320, 640)
    stage_depths: tuple = (3, 4, 16, 6)
    offset_scale: float = 1.0
    layer_scale_init: float = 1e-5
    backbone_droppath_max: float = 0.20
    embed_dim: int = 384
    encoder_depth: int = 7
    heads: int = 8
    head_dim: int = 48
    mlp_dim: int = 1536
    attn_dropout: float = 0.1
    embed_dropout: float = 0.1
    encoder_droppath_max: float = 0.15

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.stage_depths = tuple(self.stage_depths)
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ValueError("exactly four stages are required")
        if self.heads * self.head_dim != self.embed_dim:
            raise ValueError(f"heads * head_dim must equal embed_dim: "
                             f"{self.heads} * {self.head_dim} != {self.embed_dim}")
        if self.input_size % 32 != 0:
            raise ValueError(f"input_size must be divisible by 32, got {self.input_size}")

    @property
    def grid_size(self) -> int:
        return self.input_size // 32

    @property
    def num_tokens(self) -> int:
        return self.grid_size * self.grid_size + 1

    @classmethod
    def tiny(cls, num_classes: int, input_size: int = 64, **overrides) -> "ModelConfig":
        """A reduced configuration for desk-scale runs; same shape invariants."""
        base = dict(stage_channels=(16, 32, 64, 128), stage_depths=(1, 1, 2, 1),
                    embed_dim=64, encoder_depth=2, heads=2, head_dim=32, mlp_dim=256)
        base.update(overrides)
        return cls(num_classes=num_classes, input_size=input_size, **base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["stage_depths"] = list(self.stage_depths)
        return d


class Stage(nn.Module):
    """One backbone stage: optional stride-2 downsample then residual blocks.

    Blocks run channels-last; the stage converts from and back to NCHW.
    """

    def __init__(self, in_channels: int, out_channels: int, depth: int,
                 droppath_rates, offset_scale: float, layer_scale_init: float,
                 downsample: bool, rng: np.random.Generator, dtype=np.float64):
        if downsample:
            self.down = nn.Conv2d(in_channels, out_channels, 3, rng, stride=2, padding=1, dtype=dtype)
            self.down_bn = nn.BatchNorm2d(out_channels, dtype=dtype)
        else:
            self.down = None
            self.down_bn = None
        self.blocks = [
            Dcnv4Block(Dcnv4Config(channels=out_channels, offset_scale=offset_scale,
                                   layer_scale_init=layer_scale_init,
                                   droppath_rate=float(rate)), rng, dtype=dtype)
            for rate in droppath_rates
        ]

    def __call__(self, x: Tensor, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        if self.down is not None:
            x = self.down_bn(self.down(x), training=training)
        x = x.transpose(0, 2, 3, 1)
        for block in self.blocks:
            x = block(x, training=training, rng=rng)
        return x.transpose(0, 3, 1, 2)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block: attention then MLP, both residual."""

    def __init__(self, dim: int, heads: int, head_dim: int, mlp_dim: int,
                 attn_dropout: float, droppath_rate: float,
                 rng: np.random.Generator, dtype=np.float64):
        self.droppath_rate = droppath_rate
        self.norm1 = nn.LayerNorm(dim, dtype=dtype)
        self.attn = nn.MultiheadAttention(dim, heads, head_dim, rng,
                                          attn_dropout=attn_dropout, dtype=dtype)
        self.norm2 = nn.LayerNorm(dim, dtype=dtype)
        self.mlp = nn.Mlp(dim, mlp_dim, rng, dtype=dtype)

    def __call__(self, x: Tensor, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        r = self.droppath_rate
        x = x + nn.droppath(self.attn(self.norm1(x), training, rng), r, training, rng)
        x = x + nn.droppath(self.mlp(self.norm2(x), training, rng), r, training, rng)
        return x


def _rates(maximum: float, count: int) -> list[float]:
    if count <= 1:
        return [0.0] * count
    return [float(r) for r in np.linspace(0.0, maximum, count)]


class DViT(nn.Module):
    """Backbone + encoder classifier; see module docstring for the pipeline.

    After every forward pass ``captured`` maps the activation names
    "stem", "stage1".."stage4" to their NCHW tensors, which stay attached
    to the autodiff graph and therefore receive gradients on backward.
    """

    CAPTURE_NAMES = ("stem", "stage1", "stage2", "stage3", "stage4")

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64):
        if rng is None:
            rng = np.random.default_rng(0)
        self.cfg = cfg
        self.dtype = dtype
        chans = cfg.stage_channels
        mid = max(1, chans[0] // 2)
        self.stem_conv1 = nn.Conv2d(cfg.in_channels, mid, 3, rng, stride=2, padding=1, dtype=dtype)
        self.stem_bn1 = nn.BatchNorm2d(mid, dtype=dtype)
        self.stem_conv2 = nn.Conv2d(mid, chans[0], 3, rng, stride=2, padding=1, dtype=dtype)
        self.stem_bn2 = nn.BatchNorm2d(chans[0], dtype=dtype)

        backbone_rates = _rates(cfg.backbone_droppath_max, sum(cfg.stage_depths))
        self.stages = []
        taken = 0
        prev = chans[0]
        for i, (ch, depth) in enumerate(zip(chans, cfg.stage_depths)):
            rates = backbone_rates[taken:taken + depth]
            taken += depth
            self.stages.append(Stage(prev, ch, depth, rates, cfg.offset_scale,
                                     cfg.layer_scale_init, downsample=(i > 0),
                                     rng=rng, dtype=dtype))
            prev = ch

        self.patch_embed = nn.Linear(chans[-1], cfg.embed_dim, rng, dtype=dtype)
        self.cls_token = Tensor(nn.trunc_normal(rng, (1, 1, cfg.embed_dim), dtype=dtype),
                                requires_grad=True)
        self.cls_token.no_decay = True
        self.pos_embed = Tensor(np.zeros((cfg.num_tokens, cfg.embed_dim), dtype=dtype),
                                requires_grad=True)
        self.pos_embed.no_decay = True

        encoder_rates = _rates(cfg.encoder_droppath_max, cfg.encoder_depth)
        self.encoder = [
            EncoderBlock(cfg.embed_dim, cfg.heads, cfg.head_dim, cfg.mlp_dim,
                         cfg.attn_dropout, rate, rng, dtype=dtype)
            for rate in encoder_rates
        ]
        self.norm = nn.LayerNorm(cfg.embed_dim, dtype=dtype)
        self.head = nn.Linear(cfg.embed_dim, cfg.num_classes, rng, dtype=dtype)
        self.captured: dict[str, Tensor] = {}

    def forward_backbone(self, x: Tensor, training: bool = False,
                         rng: Optional[np.random.Generator] = None) -> Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected N x {cfg.in_channels} x H x W input, got {x.shape}")
        if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
            raise ShapeError(f"expected {cfg.input_size} x {cfg.input_size} input, "
                             f"got {x.shape[2]} x {x.shape[3]}")
        self.captured = {}
        h = nn.gelu(self.stem_bn1(self.stem_conv1(x), training=training))
        h = nn.gelu(self.stem_bn2(self.stem_conv2(h), training=training))
        self.captured["stem"] = h
        for i, stage in enumerate(self.stages, start=1):
            h = stage(h, training=training, rng=rng)
            self.captured[f"stage{i}"] = h
        return h

    def patch_tokens(self, fmap: Tensor, training: bool = False,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
        cfg = self.cfg
        N, C, H, W = fmap.shape
        if H * W + 1 != cfg.num_tokens:
            raise ShapeError(f"feature map {H}x{W} incompatible with "
                             f"{cfg.num_tokens}-token embedding")
        tokens = self.patch_embed(fmap.transpose(0, 2, 3, 1).reshape(N, H * W, C))
        cls = self.cls_token * Tensor(np.ones((N, 1, 1), dtype=self.dtype))
        tokens = concat([cls, tokens], axis=1) + self.pos_embed
        return nn.dropout(tokens, cfg.embed_dropout, training, rng)

    def __call__(self, x: Tensor, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        tokens = self.patch_tokens(self.forward_backbone(x, training, rng), training, rng)
        for block in self.encoder:
            tokens = block(tokens, training=training, rng=rng)
        return self.head(self.norm(tokens[:, 0]))


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    model: DViT
    config: ModelConfig
    epoch: int
    seed: int
    opt_state: Optional[dict] = None       # tensors keyed opt.exp_avg[_sq].<name>
    opt_step: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model: DViT, epoch: int = 0, seed: int = 0,
                    optimizer: Optional[nn.AdamW] = None,
                    extra_meta: Optional[dict] = None) -> None:
    tensors = {name: t.data for name, t in model.named_state().items()}
    meta = {"kind": "dvit-checkpoint", "config": model.cfg.to_dict(),
            "epoch": int(epoch), "seed": int(seed)}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
        meta["opt_step"] = optimizer.step_count
    if extra_meta:
        meta.update(extra_meta)
    dump_tensors(path, tensors, meta)


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    tensors, meta = load_tensors(path)
    if not meta or meta.get("kind") != "dvit-checkpoint" or "config" not in meta:
        raise CheckpointError(f"{path}: not a model checkpoint")
    cfg = ModelConfig(**meta["config"])
    if expected_config is not None and expected_config.to_dict() != cfg.to_dict():
        raise CheckpointError(f"{path}: config mismatch with the expected configuration")
    first = next(iter(tensors.values()), None)
    dtype = first.dtype if first is not None else np.float64
    model = DViT(cfg, rng=np.random.default_rng(0), dtype=dtype)
    for name, param in model.named_state().items():
        if name not in tensors:
            raise CheckpointError(f"{path}: checkpoint missing tensor {name!r}")
        arr = tensors[name]
        if arr.shape != param.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {arr.shape}, "
                                  f"expected {param.shape}")
        param.data = arr
    opt_state = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    return Checkpoint(model=model, config=cfg, epoch=int(meta.get("epoch", 0)),
                      seed=int(meta.get("seed", 0)),
                      opt_state=opt_state or None,
                      opt_step=int(meta.get("opt_step", 0)), meta=meta)
