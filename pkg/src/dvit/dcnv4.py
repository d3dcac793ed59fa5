"""Deformable aggregation operator and its residual block.

Each output location aggregates K bilinearly sampled values per channel
group, at positions given by a fixed centered reference grid plus learned
offsets, weighted by learned modulation scalars that are NOT normalized
(no softmax), so the operator is exactly linear in the modulation weights.

The block wraps the operator the usual way: LayerNorm, operator, layer
scale, DropPath, residual; then the same around an MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, apply_op
from . import nn

__all__ = ["Dcnv4Config", "reference_grid", "deform_aggregate", "Dcnv4", "Dcnv4Block"]


def default_groups(channels: int) -> int:
    return max(1, channels // 16)


@dataclass
class Dcnv4Config:
    channels: int
    groups: Optional[int] = None
    kernel_points: int = 9
    offset_scale: float = 1.0
    layer_scale_init: float = 1e-5
    droppath_rate: float = 0.0
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.groups is None:
            self.groups = default_groups(self.channels)
        if self.channels % self.groups != 0:
            raise ValueError(f"channels {self.channels} not divisible by groups {self.groups}")
        if self.kernel_points < 1:
            raise ValueError("kernel_points must be >= 1")
        side = math.isqrt(self.kernel_points)
        if side * side != self.kernel_points or side % 2 == 0:
            raise ValueError(f"kernel_points must be an odd perfect square, got {self.kernel_points}")
        if self.offset_scale <= 0:
            raise ValueError("offset_scale must be positive")


def reference_grid(kernel_points: int) -> np.ndarray:
    """Centered square grid of (dy, dx) reference points, row-major.

    K=9 gives the 3x3 neighbourhood {-1,0,1} x {-1,0,1}; K=1 gives (0,0).
    """
    side = math.isqrt(kernel_points)
    if side * side != kernel_points or side % 2 == 0:
        raise ValueError(f"kernel_points must be an odd perfect square, got {kernel_points}")
    half = side // 2
    pts = [(dy, dx) for dy in range(-half, half + 1) for dx in range(-half, half + 1)]
    return np.asarray(pts, dtype=np.float64)


def deform_aggregate(value: Tensor, offsets: Tensor, modulation: Tensor, groups: int) -> Tensor:
    """Grouped deformable aggregation over a channels-last feature grid.

    value       N x H x W x C
    offsets     N x H x W x G x K x 2   total (dy, dx) displacement from the
                output location, reference grid included
    modulation  N x H x W x G x K       raw weights, applied as-is
    returns     N x H x W x C  where out[n,i,j,g*Cg:...] =
                sum_k modulation[n,i,j,g,k] * value_g sampled at
                (i,j) + offsets[n,i,j,g,k], bilinear with zero padding.
    """
    if value.ndim != 4:
        raise ShapeError(f"value must be N x H x W x C, got {value.shape}")
    N, H, W, C = value.shape
    G = groups
    if C % G != 0:
        raise ShapeError(f"channels {C} not divisible by groups {G}")
    Cg = C // G
    if offsets.ndim != 6 or offsets.shape[:4] != (N, H, W, G) or offsets.shape[5] != 2:
        raise ShapeError(f"offsets must be ({N},{H},{W},{G},K,2), got {offsets.shape}")
    K = offsets.shape[4]
    if modulation.shape != (N, H, W, G, K):
        raise ShapeError(f"modulation must be ({N},{H},{W},{G},{K}), got {modulation.shape}")

    off = offsets.data
    mod = modulation.data
    vals = value.data.reshape(N, H * W, G, Cg)

    iy = np.arange(H, dtype=off.dtype).reshape(1, H, 1, 1, 1)
    ix = np.arange(W, dtype=off.dtype).reshape(1, 1, W, 1, 1)
    py = iy + off[..., 0]
    px = ix + off[..., 1]
    y0f = np.floor(py)
    x0f = np.floor(px)
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    fy = py - y0f   # int64 operands would silently promote f32 to f64
    fx = px - x0f

    n_idx = np.arange(N).reshape(N, 1, 1, 1, 1)
    g_idx = np.arange(G).reshape(1, 1, 1, G, 1)

    def corner(yi, xi):
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        flat = np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)
        v = vals[n_idx, flat, g_idx] * valid[..., None]     # N,H,W,G,K,Cg
        return v, valid, flat

    v00, m00, i00 = corner(y0, x0)
    v01, m01, i01 = corner(y0, x0 + 1)
    v10, m10, i10 = corner(y0 + 1, x0)
    v11, m11, i11 = corner(y0 + 1, x0 + 1)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx

    sampled = (v00 * w00[..., None] + v01 * w01[..., None]
               + v10 * w10[..., None] + v11 * w11[..., None])   # N,H,W,G,K,Cg
    out = (sampled * mod[..., None]).sum(axis=4)                # N,H,W,G,Cg
    out = out.reshape(N, H, W, C)

    def backward(g):
        gr = g.reshape(N, H, W, G, 1, Cg)
        gvals = np.zeros_like(vals)
        for valid, flat, w in ((m00, i00, w00), (m01, i01, w01),
                               (m10, i10, w10), (m11, i11, w11)):
            coeff = mod * w * valid                             # N,H,W,G,K
            contrib = coeff[..., None] * gr                     # N,H,W,G,K,Cg
            np.add.at(gvals, (np.broadcast_to(n_idx, flat.shape), flat,
                              np.broadcast_to(g_idx, flat.shape)), contrib)
        gmod = (gr * sampled).sum(axis=5)
        dvy = (v10 - v00) * (1 - fx)[..., None] + (v11 - v01) * fx[..., None]
        dvx = (v01 - v00) * (1 - fy)[..., None] + (v11 - v10) * fy[..., None]
        gy = (gr * dvy).sum(axis=5) * mod
        gx = (gr * dvx).sum(axis=5) * mod
        goff = np.stack([gy, gx], axis=-1)
        return gvals.reshape(value.shape), goff, gmod

    return apply_op(out, (value, offsets, modulation), backward)


class Dcnv4(nn.Module):
    """The deformable aggregation layer on channels-last N x H x W x C grids.

    A value projection feeds the aggregation; a single linear head predicts,
    per location and group, K (dy, dx) offsets and K modulation scalars
    (output width G*K*3).  Offset/modulation weights start at zero so the
    layer begins as a uniform fixed-grid average: offset bias 0, modulation
    bias 1/K.  An output projection mixes the concatenated groups.
    """

    def __init__(self, cfg: Dcnv4Config, rng: np.random.Generator, dtype=np.float64):
        C, G, K = cfg.channels, cfg.groups, cfg.kernel_points
        self.cfg = cfg
        self.value_proj = nn.Linear(C, C, rng, dtype=dtype)
        self.offmod_proj = nn.Linear(C, G * K * 3, rng, dtype=dtype)
        self.offmod_proj.weight.data[:] = 0.0
        bias = np.zeros((G, K, 3), dtype=dtype)
        bias[:, :, 2] = 1.0 / K
        self.offmod_proj.bias.data = bias.reshape(-1)
        self.out_proj = nn.Linear(C, C, rng, dtype=dtype)
        self._ref = reference_grid(K).astype(dtype)

    def aggregate(self, x: Tensor) -> Tensor:
        """Value projection + deformable aggregation, before output mixing."""
        N, H, W, C = x.shape
        cfg = self.cfg
        G, K = cfg.groups, cfg.kernel_points
        v = self.value_proj(x)
        om = self.offmod_proj(x).reshape(N, H, W, G, K, 3)
        off = om[..., 0:2] * cfg.offset_scale + Tensor(self._ref)
        mod = om[..., 2]
        return deform_aggregate(v, off, mod, G)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[3] != self.cfg.channels:
            raise ShapeError(f"expected N x H x W x {self.cfg.channels} input, got {x.shape}")
        return self.out_proj(self.aggregate(x))


class Dcnv4Block(nn.Module):
    """Residual block: x + DropPath(ls1 * Dcnv4(LN(x))), then the MLP twin."""

    def __init__(self, cfg: Dcnv4Config, rng: np.random.Generator, dtype=np.float64):
        C = cfg.channels
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(C, dtype=dtype)
        self.attn = Dcnv4(cfg, rng, dtype=dtype)
        self.ls1 = Tensor(np.full(C, cfg.layer_scale_init, dtype=dtype), requires_grad=True)
        self.ls1.no_decay = True
        self.norm2 = nn.LayerNorm(C, dtype=dtype)
        self.mlp = nn.Mlp(C, int(C * cfg.mlp_ratio), rng, dtype=dtype)
        self.ls2 = Tensor(np.full(C, cfg.layer_scale_init, dtype=dtype), requires_grad=True)
        self.ls2.no_decay = True

    def __call__(self, x: Tensor, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        rate = self.cfg.droppath_rate
        x = x + nn.droppath(self.ls1 * self.attn(self.norm1(x)), rate, training, rng)
        x = x + nn.droppath(self.ls2 * self.mlp(self.norm2(x), training, rng), rate, training, rng)
        return x
