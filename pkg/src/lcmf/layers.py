"""Building blocks shared by the encoders and fusion head.

Every layer carries a ``flops`` method returning the analytic operation
count of one forward pass.  Conventions: a multiply or add is one FLOP, a
length-``k`` dot product costs ``2k``, ``exp``/``log``/``sqrt``/divide are one
FLOP each.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    _ACTIVE_TAPE,
    Module,
    Tensor,
    activation,
    constant_parameter,
    conv1d,
    layer_norm,
    matmul,
    softmax_last,
    uniform_parameter,
    Parameter,
)

LN_EPS = 1e-5

# per-element cost of the activations
ACT_FLOPS = {"sigmoid": 3, "silu": 4, "softplus": 3, "exp": 1}


def flops_linear(T: int, d_in: int, d_out: int, bias: bool = True) -> int:
    return 2 * T * d_in * d_out + (T * d_out if bias else 0)


def flops_layer_norm(T: int, d: int) -> int:
    # mean d, centre d, variance 2d, rstd 3, scale d, affine 2d
    return T * (7 * d + 3)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        if zero:
            self.weight = constant_parameter(0.0, (d_in, d_out))
        else:
            self.weight = uniform_parameter(rng, d_in, (d_in, d_out))
        self.bias = constant_parameter(0.0, (d_out,)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def flops(self, T: int) -> int:
        return flops_linear(T, self.d_in, self.d_out, self.bias is not None)

    def zero_(self) -> None:
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = LN_EPS):
        self.gain = constant_parameter(1.0, (d,))
        self.bias = constant_parameter(0.0, (d,))
        self.eps = eps
        self.d = d

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)

    def flops(self, T: int) -> int:
        return flops_layer_norm(T, self.d)


class DepthwiseConv1d(Module):
    def __init__(self, channels: int, width: int, rng: np.random.Generator, causal: bool = True):
        self.kernel = uniform_parameter(rng, width, (width, channels))
        self.bias = constant_parameter(0.0, (channels,))
        self.width, self.channels, self.causal = width, channels, causal

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.kernel, self.bias, causal=self.causal)

    def flops(self, T: int) -> int:
        return 2 * T * self.channels * self.width


class Attention(Module):
    """Multi-head scaled dot-product attention, non-causal.

    ``out_proj=False`` returns the concatenated heads directly, which is the
    form used for the cross-attention steps of the diffusion stages and the
    fusion head.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, out_proj: bool = True):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng) if out_proj else None
        self.heads = heads
        self.d_model = d_model
        self.head_dim = d_model // heads

    def _split(self, t: Tensor) -> Tensor:
        return t.reshape(t.shape[0], self.heads, self.head_dim).transpose(1, 0, 2)

    def __call__(self, x_q: Tensor, x_kv: Tensor | None = None, return_weights: bool = False):
        x_kv = x_q if x_kv is None else x_kv
        Tq = x_q.shape[0]
        q = self._split(self.query(x_q))
        k = self._split(self.key(x_kv))
        v = self._split(self.value(x_kv))
        scale = 1.0 / math.sqrt(self.head_dim)
        if _ACTIVE_TAPE.get() is None and not return_weights:
            ctx = Tensor(_chunked_attention(q.data, k.data, v.data, scale))
            weights = None
        else:
            weights = softmax_last(matmul(q, k.transpose(0, 2, 1)) * scale)
            ctx = matmul(weights, v)
        y = ctx.transpose(1, 0, 2).reshape(Tq, self.d_model)
        if self.out is not None:
            y = self.out(y)
        return (y, weights) if return_weights else y

    def flops(self, Tq: int, Tk: int | None = None) -> int:
        Tk = Tq if Tk is None else Tk
        D, H = self.d_model, self.heads
        n = self.query.flops(Tq) + self.key.flops(Tk) + self.value.flops(Tk)
        n += 2 * Tq * Tk * D  # scores
        n += Tq * Tk * H  # scaling
        n += 5 * Tq * Tk * H  # softmax: max, subtract, exp, sum, divide
        n += 2 * Tq * Tk * D  # weighted values
        if self.out is not None:
            n += self.out.flops(Tq)
        return n


def _chunked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float, rows: int = 512) -> np.ndarray:
    out = np.empty(q.shape[:2] + (v.shape[2],))
    kt = k.transpose(0, 2, 1)
    for lo in range(0, q.shape[1], rows):
        s = (q[:, lo : lo + rows] @ kt) * scale
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        out[:, lo : lo + rows] = s @ v
    return out


class AttentionSublayer(Module):
    """``LayerNorm(x + Attention(x))`` (post-norm residual)."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        self.attn = Attention(d_model, heads, rng)
        self.norm = LayerNorm(d_model)

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        return self.norm(x + self.attn(x, context))

    def flops(self, T: int, Tk: int | None = None) -> int:
        return self.attn.flops(T, Tk) + T * self.attn.d_model + self.norm.flops(T)


class MLP(Module):
    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, hidden, rng)
        self.fc2 = Linear(hidden, d_model, rng)
        self.hidden = hidden

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(activation(self.fc1(x), "silu"))

    def flops(self, T: int) -> int:
        return self.fc1.flops(T) + ACT_FLOPS["silu"] * T * self.hidden + self.fc2.flops(T)


class TransformerBlock(Module):
    """Self-attention and feed-forward sublayers, each post-norm residual."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.attention = AttentionSublayer(d_model, heads, rng)
        self.mlp = MLP(d_model, mlp_ratio * d_model, rng)
        self.norm = LayerNorm(d_model)
        self.d_model = d_model

    def __call__(self, x: Tensor) -> Tensor:
        h = self.attention(x)
        return self.norm(h + self.mlp(h))

    def flops(self, T: int) -> int:
        return self.attention.flops(T) + self.mlp.flops(T) + T * self.d_model + self.norm.flops(T)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the sequence axis, kept as a ``1 x d`` row."""
    return x.mean(axis=0, keepdims=True)


def learned(shape: tuple[int, ...], rng: np.random.Generator, scale: float = 0.02) -> Parameter:
    return Parameter(rng.normal(0.0, scale, size=shape), f"normal(0,{scale})")
