"""Neural building blocks: convolution, normalization, attention, MLP,
stochastic regularizers, bilinear sampling, the classification loss, and
the AdamW optimizer.

Layers are :class:`Module` subclasses holding named parameter tensors;
parameter and buffer names are stable across builds so checkpoints can be
validated field by field.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .tensor import ShapeError, Tensor, apply_op

__all__ = [
    "Module",
    "Linear",
    "Conv2d",
    "BatchNorm2d",
    "LayerNorm",
    "Mlp",
    "MultiheadAttention",
    "AdamW",
    "gelu",
    "softmax",
    "log_softmax",
    "dropout",
    "droppath",
    "bilinear_sample",
    "cross_entropy",
    "trunc_normal",
]


class Module:
    """Minimal layer container.

    Tensor attributes with ``requires_grad`` are registered as parameters,
    other Tensor attributes as buffers (e.g. running statistics); Module
    attributes and lists of Modules become children.  Registration order is
    attribute assignment order, which keeps parameter naming deterministic.
    """

    def __setattr__(self, name, value):
        object.__setattr__(self, name, value)

    def _entries(self):
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, sub in enumerate(value):
                    yield f"{name}.{i}", sub

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._entries():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value.named_parameters(prefix=full + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._entries():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if not value.requires_grad:
                    yield full, value
            else:
                yield from value.named_buffers(prefix=full + ".")

    def named_state(self) -> dict[str, Tensor]:
        state = dict(self.named_parameters())
        state.update(self.named_buffers())
        return state

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) clipped to two standard deviations."""
    return np.clip(rng.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std).astype(dtype)


def _param(data, no_decay: bool = False) -> Tensor:
    t = Tensor(data, requires_grad=True)
    t.no_decay = no_decay
    return t


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.weight = _param(trunc_normal(rng, (out_features, in_features), dtype=dtype))
        self.bias = _param(np.zeros(out_features, dtype=dtype), no_decay=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"linear expects trailing dim {self.weight.shape[1]}, got {x.shape}")
        if x.ndim == 2:
            return x @ self.weight.transpose() + self.bias
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1]) @ self.weight.transpose() + self.bias
        return flat.reshape(*lead, self.weight.shape[0])


class Conv2d(Module):
    """2-D convolution on NCHW tensors, square kernel, zero padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dtype=np.float64):
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = _param(trunc_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), dtype=dtype))
        self.bias = _param(np.zeros(out_channels, dtype=dtype), no_decay=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1,
           padding: int = 0) -> Tensor:
    """im2col convolution with registered gradients for input, weight, bias."""
    N, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("conv2d requires a square kernel")
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, kernel expects {Cw}")
    OH = (H + 2 * padding - k) // stride + 1
    OW = (W + 2 * padding - k) // stride + 1
    if OH <= 0 or OW <= 0:
        raise ShapeError(f"conv2d output dims non-positive for input {H}x{W}, "
                         f"kernel {k}, stride {stride}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = windows[:, :, ::stride, ::stride, :, :]          # N,C,OH,OW,k,k
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(N, OH * OW, C * k * k)
    wmat = weight.data.reshape(O, C * k * k)
    out = cols @ wmat.T                                     # N,OH*OW,O
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 2, 1).reshape(N, O, OH, OW)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(N, OH * OW, O)
        gw = np.einsum("npo,npc->oc", g2, cols).reshape(weight.shape)
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        gcols = (g2 @ wmat).reshape(N, OH, OW, C, k, k).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki:ki + stride * OH:stride, kj:kj + stride * OW:stride] += gcols[:, :, :, :, ki, kj]
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return apply_op(out, parents, backward)


class BatchNorm2d(Module):
    """Per-channel batch normalization for NCHW tensors.

    Training mode normalizes with batch statistics (biased variance) and
    updates running statistics with the given momentum; eval mode uses the
    running statistics.  Training on a single-sample batch is rejected.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float64):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = eps
        self.momentum = momentum
        self.weight = _param(np.ones(channels, dtype=dtype), no_decay=True)
        self.bias = _param(np.zeros(channels, dtype=dtype), no_decay=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"batchnorm2d expects NCHW input, got shape {x.shape}")
        C = x.shape[1]
        if training:
            if x.shape[0] < 2:
                raise ShapeError("batchnorm2d training requires batch size >= 2")
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean.data = (1 - m) * self.running_mean.data + m * mu.data.reshape(C)
            self.running_var.data = (1 - m) * self.running_var.data + m * var.data.reshape(C)
        else:
            mu = Tensor(self.running_mean.data.reshape(1, C, 1, 1))
            var = Tensor(self.running_var.data.reshape(1, C, 1, 1))
        xhat = (x - mu) / ((var + self.eps) ** 0.5)
        return xhat * self.weight.reshape(1, C, 1, 1) + self.bias.reshape(1, C, 1, 1)


class LayerNorm(Module):
    """Normalization over the trailing feature dimension."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = eps
        self.weight = _param(np.ones(dim, dtype=dtype), no_decay=True)
        self.bias = _param(np.zeros(dim, dtype=dtype), no_decay=True)

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        xhat = (x - mu) / ((var + self.eps) ** 0.5)
        return xhat * self.weight + self.bias


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation (inner cubic coefficient 0.044715)."""
    c = math.sqrt(2.0 / math.pi)
    return x * 0.5 * ((c * (x + 0.044715 * x ** 3)).tanh() + 1.0)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; rows along ``axis`` sum to one."""
    shift = np.max(x.data, axis=axis, keepdims=True)
    z = (x - Tensor(shift)).exp()
    return z / z.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(x.data, axis=axis, keepdims=True)
    z = x - Tensor(shift)
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity (same object) when disabled."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * Tensor(mask)


def droppath(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Per-sample stochastic depth, expectation-preserving.

    Samples a Bernoulli keep decision per leading-axis element and rescales
    kept samples by 1/(1-rate).  Identity in eval mode or at rate zero.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"droppath rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape[0]) >= rate).astype(x.data.dtype) / (1.0 - rate)
    mask = keep.reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    return x * Tensor(mask)


class Mlp(Module):
    """Two-layer feedforward block with GELU and optional internal dropout."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 drop: float = 0.0, dtype=np.float64):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)
        self.drop = drop

    def __call__(self, x: Tensor, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        h = gelu(self.fc1(x))
        h = dropout(h, self.drop, training, rng)
        h = self.fc2(h)
        return dropout(h, self.drop, training, rng)


class MultiheadAttention(Module):
    """Scaled dot-product self-attention over B x T x D token sequences."""

    def __init__(self, dim: int, heads: int, head_dim: int, rng: np.random.Generator,
                 attn_dropout: float = 0.0, dtype=np.float64):
        self.dim = dim
        self.heads = heads
        self.head_dim = head_dim
        self.attn_dropout = attn_dropout
        inner = heads * head_dim
        self.q = Linear(dim, inner, rng, dtype=dtype)
        self.k = Linear(dim, inner, rng, dtype=dtype)
        self.v = Linear(dim, inner, rng, dtype=dtype)
        self.out = Linear(inner, dim, rng, dtype=dtype)

    def __call__(self, x: Tensor, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        B, T, D = x.shape
        if D != self.dim:
            raise ShapeError(f"attention expects width {self.dim}, got {D}")
        h, hd = self.heads, self.head_dim

        def split_heads(t: Tensor) -> Tensor:
            return t.reshape(B, T, h, hd).transpose(0, 2, 1, 3).reshape(B * h, T, hd)

        q = split_heads(self.q(x))
        k = split_heads(self.k(x))
        v = split_heads(self.v(x))
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(hd))
        attn = softmax(scores, axis=-1)
        attn = dropout(attn, self.attn_dropout, training, rng)
        mixed = attn @ v                                     # B*h, T, hd
        mixed = mixed.reshape(B, h, T, hd).transpose(0, 2, 1, 3).reshape(B, T, h * hd)
        return self.out(mixed)


def bilinear_sample(feature: Tensor, points: Tensor) -> Tensor:
    """Sample a C x H x W feature map at K fractional (y, x) points.

    Uses the four integer neighbours with zero padding outside the map;
    points fully outside [-1, H] x [-1, W] contribute nothing.  The result
    is C x K and is differentiable in both the feature values and the
    point coordinates.
    """
    C, H, W = feature.shape
    if not isinstance(points, Tensor):
        points = Tensor(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    if points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"points must have shape (K, 2), got {points.shape}")
    K = points.shape[0]
    py = points.data[:, 0]
    px = points.data[:, 1]
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    fy = py - y0
    fx = px - x0

    fmap = feature.data.reshape(C, H * W)

    def corner(yi, xi):
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        idx = np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)
        return fmap[:, idx] * valid, valid, idx

    v00, m00, i00 = corner(y0, x0)
    v01, m01, i01 = corner(y0, x0 + 1)
    v10, m10, i10 = corner(y0 + 1, x0)
    v11, m11, i11 = corner(y0 + 1, x0 + 1)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    def backward(g):
        gf = np.zeros_like(fmap)
        for val, mask, idx, w in ((v00, m00, i00, w00), (v01, m01, i01, w01),
                                  (v10, m10, i10, w10), (v11, m11, i11, w11)):
            np.add.at(gf.T, idx[mask], (g[:, mask] * w[mask]).T)
        dy = (v10 - v00) * (1 - fx) + (v11 - v01) * fx
        dx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy
        gp = np.stack([(g * dy).sum(axis=0), (g * dx).sum(axis=0)], axis=1)
        return gf.reshape(feature.shape), gp

    return apply_op(out, (feature, points), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels.

    Computed through log-sum-exp; equivalent to the one-hot weighted
    cross entropy -1/N sum_i sum_c y_ic log softmax(logits)_ic.
    """
    labels = np.asarray(labels)
    N, C = logits.shape
    if labels.shape != (N,):
        raise ShapeError(f"labels must have shape ({N},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= C:
        bad = labels[(labels < 0) | (labels >= C)][0]
        raise ValueError(f"label {bad} outside [0, {C})")
    onehot = np.zeros((N, C), dtype=logits.data.dtype)
    onehot[np.arange(N), labels] = 1.0
    logp = log_softmax(logits, axis=1)
    return -(logp * Tensor(onehot)).sum() * (1.0 / N)


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied multiplicatively before the moment update, only to
    parameters not flagged ``no_decay``.  Bias correction follows the
    standard first/second moment scheme.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.exp_avg_sq = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if self.weight_decay and not p.no_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m = self.exp_avg[name]
            v = self.exp_avg_sq[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        state = {f"opt.exp_avg.{n}": a for n, a in self.exp_avg.items()}
        state.update({f"opt.exp_avg_sq.{n}": a for n, a in self.exp_avg_sq.items()})
        return state

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            for prefix, store in (("opt.exp_avg.", self.exp_avg), ("opt.exp_avg_sq.", self.exp_avg_sq)):
                key = prefix + name
                if key not in tensors:
                    raise KeyError(f"optimizer state missing tensor {key!r}")
                arr = tensors[key]
                if arr.shape != store[name].shape:
                    raise ValueError(f"optimizer state {key!r} has shape {arr.shape}, "
                                     f"expected {store[name].shape}")
                store[name] = arr.astype(store[name].dtype)
        self.step_count = step_count
