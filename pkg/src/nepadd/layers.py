"""Neural building blocks on top of :mod:`nepadd.tensor`.

Sequences are frame-major (T, D) except inside :class:`Conv1d` and
:class:`ResidualBlock`, which take channel-major (C, T) input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from nepadd import tensor as nt
from nepadd.errors import ConfigError, ShapeError
from nepadd.tensor import Parameter, Tensor


class Module:
    """Container that discovers parameters from its attributes."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def freeze(self):
        for p in self.parameters().values():
            p.frozen = True
        return self

    def unfreeze(self):
        for p in self.parameters().values():
            p.frozen = False
        return self

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"state is missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: expected shape {p.shape}, got {arr.shape}")
            p.data[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- specs


@dataclass(frozen=True)
class Conv1dSpec:
    """C(kernel, padding, stride) plus channel counts."""

    kernel: int
    padding: int
    stride: int
    in_channels: int
    out_channels: int
    bias: bool = True

    def output_length(self, T: int) -> int:
        return (T + 2 * self.padding - self.kernel) // self.stride + 1


@dataclass(frozen=True)
class SelfAttentionSpec:
    model_dim: int
    head_count: int = 1

    def __post_init__(self):
        if self.model_dim <= 0 or self.head_count <= 0 or self.model_dim % self.head_count:
            raise ConfigError(
                f"model_dim {self.model_dim} must be positive and divisible by "
                f"head_count {self.head_count}"
            )


@dataclass(frozen=True)
class TransformerEncoderSpec:
    """E(layers, heads, ff_dim)."""

    layers: int
    heads: int
    ff_dim: int


@dataclass(frozen=True)
class BiLstmSpec:
    input_dim: int
    hidden_dim: int
    layer_count: int = 1


# ---------------------------------------------------------------- layers


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        bound = 1.0 / math.sqrt(in_dim)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(_uniform(rng, bound, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear expects last dim {self.in_dim}, got shape {x.shape}")
        y = nt.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv1d(Module):
    def __init__(self, spec: Conv1dSpec, rng):
        self.spec = spec
        bound = 1.0 / math.sqrt(spec.in_channels * spec.kernel)
        self.weight = Parameter(
            _uniform(rng, bound, (spec.out_channels, spec.in_channels, spec.kernel))
        )
        self.bias = Parameter(np.zeros((spec.out_channels, 1))) if spec.bias else None

    def forward(self, x):
        s = self.spec
        if x.ndim != 2 or x.shape[0] != s.in_channels:
            raise ShapeError(f"Conv1d expects ({s.in_channels}, T) input, got {x.shape}")
        y = nt.conv1d(x, self.weight, padding=s.padding, stride=s.stride)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    """Layer norm with learnable affine, normalizing along ``axis`` (0 or -1)."""

    def __init__(self, dim, axis=-1, eps=1e-5):
        self.axis, self.eps = axis, eps
        shape = (dim,) if axis in (-1, 1) else (dim, 1)
        self.gamma = Parameter(np.ones(shape))
        self.beta = Parameter(np.zeros(shape))

    def forward(self, x):
        return nt.layer_norm(x, axis=self.axis, eps=self.eps) * self.gamma + self.beta


class ResidualBlock(Module):
    """x + relu(norm(conv_1x1(x))) on channel-major input."""

    def __init__(self, channels, rng):
        self.conv = Conv1d(Conv1dSpec(1, 0, 1, channels, channels, bias=False), rng)
        self.norm = LayerNorm(channels, axis=0)

    def forward(self, x):
        return x + nt.relu(self.norm(self.conv(x)))


class SelfAttention(Module):
    """Scaled dot-product self-attention.

    Returns ``(attended, attn)`` where ``attn`` is the T x T row-stochastic map,
    averaged over heads when ``head_count > 1``.
    """

    def __init__(self, spec: SelfAttentionSpec, rng, bias=False, out_proj=False):
        D = spec.model_dim
        self.spec = spec
        bound = math.sqrt(6.0 / (2 * D))
        self.w_q = Parameter(_uniform(rng, bound, (D, D)))
        self.w_k = Parameter(_uniform(rng, bound, (D, D)))
        self.w_v = Parameter(_uniform(rng, bound, (D, D)))
        if bias:
            self.b_q = Parameter(np.zeros(D))
            self.b_k = Parameter(np.zeros(D))
            self.b_v = Parameter(np.zeros(D))
        self.bias = bias
        self.out = Linear(D, D, rng) if out_proj else None

    def forward(self, x):
        D, h = self.spec.model_dim, self.spec.head_count
        if x.ndim != 2 or x.shape[1] != D:
            raise ShapeError(f"SelfAttention expects (T, {D}) input, got {x.shape}")
        q, k, v = x @ self.w_q, x @ self.w_k, x @ self.w_v
        if self.bias:
            q, k, v = q + self.b_q, k + self.b_k, v + self.b_v
        dh = D // h
        scale = 1.0 / math.sqrt(dh)
        if h == 1:
            attn = nt.softmax_rows((q @ k.T) * scale)
            attended = attn @ v
        else:
            maps, outs = [], []
            for i in range(h):
                sl = (slice(None), slice(i * dh, (i + 1) * dh))
                a = nt.softmax_rows((q[sl] @ k[sl].T) * scale)
                maps.append(a)
                outs.append(a @ v[sl])
            attended = nt.concat(outs, axis=-1)
            attn = maps[0]
            for a in maps[1:]:
                attn = attn + a
            attn = attn * (1.0 / h)
        if self.out is not None:
            attended = self.out(attended)
        return attended, attn


class BiLSTM(Module):
    """Stacked bidirectional LSTM; output (T, 2H) = [forward, backward]."""

    def __init__(self, spec: BiLstmSpec, rng):
        self.spec = spec
        H = spec.hidden_dim
        bound = 1.0 / math.sqrt(H)
        self.layers = []
        in_dim = spec.input_dim
        for _ in range(spec.layer_count):
            self.layers.append(_BiLstmLayer(in_dim, H, bound, rng))
            in_dim = 2 * H

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeError(f"BiLSTM expects (T, {self.spec.input_dim}) input, got {x.shape}")
        for layer in self.layers:
            x = layer(x)
        return x


class _BiLstmLayer(Module):
    def __init__(self, in_dim, H, bound, rng):
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0  # forget-gate bias
        self.w_ih_f = Parameter(_uniform(rng, bound, (in_dim, 4 * H)))
        self.w_hh_f = Parameter(_uniform(rng, bound, (H, 4 * H)))
        self.b_f = Parameter(b.copy())
        self.w_ih_b = Parameter(_uniform(rng, bound, (in_dim, 4 * H)))
        self.w_hh_b = Parameter(_uniform(rng, bound, (H, 4 * H)))
        self.b_b = Parameter(b.copy())

    def forward(self, x):
        fwd = nt.lstm(x, self.w_ih_f, self.w_hh_f, self.b_f)
        bwd = nt.lstm(x, self.w_ih_b, self.w_hh_b, self.b_b, reverse=True)
        return nt.concat([fwd, bwd], axis=-1)


def sinusoidal_positions(T, D):
    pos = np.arange(T)[:, None]
    i = np.arange(D)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / D)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TransformerEncoderLayer(Module):
    """Post-norm layer: x = LN(x + MHA(x)); x = LN(x + FF(x))."""

    def __init__(self, dim, heads, ff_dim, rng):
        self.attn = SelfAttention(SelfAttentionSpec(dim, heads), rng, bias=True, out_proj=True)
        self.norm1 = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_dim, rng)
        self.ff2 = Linear(ff_dim, dim, rng)
        self.norm2 = LayerNorm(dim)

    def forward(self, x):
        a, _ = self.attn(x)
        x = self.norm1(x + a)
        return self.norm2(x + self.ff2(nt.relu(self.ff1(x))))


class TransformerEncoder(Module):
    def __init__(self, spec: TransformerEncoderSpec, dim, rng, positional=True):
        if spec.heads <= 0 or dim % spec.heads:
            raise ConfigError(f"model dim {dim} is not divisible by {spec.heads} heads")
        self.spec, self.dim, self.positional = spec, dim, positional
        self.layers = [TransformerEncoderLayer(dim, spec.heads, spec.ff_dim, rng)
                       for _ in range(spec.layers)]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"TransformerEncoder expects (T, {self.dim}) input, got {x.shape}")
        if self.positional:
            x = x + Tensor(sinusoidal_positions(x.shape[0], self.dim))
        for layer in self.layers:
            x = layer(x)
        return x
