"""The generic neural network module (GNNM).

A GNNM maps a feature sequence ``x`` of shape ``(d, n)`` and a context vector
``c`` of length ``d`` to either a sequence of the same shape or, when
aggregating, a single length-``d`` vector.  Internally it chains three
functions, each preceded by ``LayerNorm -> activation`` plus a residual path:

1. chronological convolution masking (:func:`f_conv`),
2. self-attention over the per-component time series (:func:`f_atten`),
3. context-conditioned hybrid attention (:func:`f_hybrid_atten`).

Every function accepts extra leading batch axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

VARIANTS = ("component", "temporal")


@dataclass(frozen=True)
class GnnmConfig:
    d: int
    n: int
    attention_variant: str = "component"
    aggregate_output: bool = False
    activation: str = "elu"
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.d < 1 or self.n < 1:
            raise ConfigError(f"d and n must be >= 1 (got d={self.d}, n={self.n})")
        if self.attention_variant not in VARIANTS:
            raise ConfigError(f"attention_variant must be one of {VARIANTS}, got {self.attention_variant!r}")
        if self.attention_variant == "component" and self.n % 2:
            raise ConfigError(f"component attention halves the time axis; n={self.n} must be even")
        if self.attention_variant == "temporal" and self.d % 2:
            raise ConfigError(f"temporal attention halves the feature axis; d={self.d} must be even")
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ad.ACTIVATIONS)}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")

    @property
    def reduced_axis(self) -> int:
        """Length of the axis the self-attention projects from."""
        return self.n if self.attention_variant == "component" else self.d

    def shape_key(self) -> tuple:
        """Everything that determines parameter shapes."""
        return (self.d, self.n, self.attention_variant)


PARAM_NAMES = (
    "conv_kernel",
    "attn_q", "attn_k", "attn_v", "attn_out",
    "hyb_q", "hyb_k", "hyb_v",
    "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta", "ln3_gamma", "ln3_beta",
)


@dataclass
class GnnmParameters:
    """Trainable tensors of one module; no bias terms anywhere."""

    conv_kernel: Tensor
    attn_q: Tensor
    attn_k: Tensor
    attn_v: Tensor
    attn_out: Tensor
    hyb_q: Tensor
    hyb_k: Tensor
    hyb_v: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ln3_gamma: Tensor
    ln3_beta: Tensor

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for name in PARAM_NAMES:
            yield name, getattr(self, name)

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def num_scalars(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    def copy(self) -> "GnnmParameters":
        return GnnmParameters(**{
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)
            for name, t in self.named()
        })

    def astype(self, dtype) -> "GnnmParameters":
        return GnnmParameters(**{
            name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=t.name)
            for name, t in self.named()
        })


def parameter_shapes(config: GnnmConfig) -> dict[str, tuple[int, ...]]:
    d, r = config.d, config.reduced_axis
    half = r // 2
    return {
        "conv_kernel": (3,),
        "attn_q": (half, r), "attn_k": (half, r), "attn_v": (half, r),
        "attn_out": (r, half),
        "hyb_q": (d, 2 * d), "hyb_k": (d, d), "hyb_v": (d, 2 * d),
        "ln1_gamma": (d,), "ln1_beta": (d,),
        "ln2_gamma": (d,), "ln2_beta": (d,),
        "ln3_gamma": (d,), "ln3_beta": (d,),
    }


def init_parameters(config: GnnmConfig, rng: np.random.Generator | int | None = None,
                    dtype="double") -> GnnmParameters:
    """Uniform(+-1/sqrt(fan_in)) weights, identity conv kernel, unit LayerNorm."""
    rng = np.random.default_rng(rng)
    dtype = ad.as_dtype(dtype)
    values = {}
    for name, shape in parameter_shapes(config).items():
        if name == "conv_kernel":
            arr = np.array([0.0, 1.0, 0.0])
        elif name.endswith("_gamma"):
            arr = np.ones(shape)
        elif name.endswith("_beta"):
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[1])
            arr = rng.uniform(-bound, bound, size=shape)
        values[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return GnnmParameters(**values)


@dataclass
class GnnmOutput:
    """Result of a module forward.

    Exactly one of ``sequence`` / ``vector`` is set.  ``attention`` is the
    post-softmax hybrid map of shape ``(..., n, n)``; ``values`` and
    ``weights`` are the value matrix and (when aggregating) the mixing
    weights over time positions, kept for inspection.
    """

    sequence: Tensor | None
    vector: Tensor | None
    attention: Tensor
    values: Tensor
    weights: Tensor | None = None
    extras: dict = field(default_factory=dict)

    @property
    def value(self) -> Tensor:
        return self.vector if self.vector is not None else self.sequence


def _check_seq(x: Tensor, d: int, n: int | None = None, what: str = "x") -> None:
    if x.ndim < 2 or x.shape[-2] != d or (n is not None and x.shape[-1] != n):
        want = f"(..., {d}, {n if n is not None else 'n'})"
        raise ShapeError(f"{what} has shape {x.shape}, expected {want}")


def f_conv(x: Tensor, kernel: Tensor, return_mask: bool = False):
    """Chronological convolution mask: ``softmax_time(conv(x)) * x``.

    Row ``j`` of the output depends only on row ``j`` of ``x``.
    """
    mask = ad.softmax(ad.conv1d_time(x, kernel), axis=-1)
    out = mask * x
    return (out, mask) if return_mask else out


def f_atten(y1: Tensor, params: GnnmParameters, variant: str = "component") -> Tensor:
    """Reduced self-attention producing a sequence of the input's shape.

    ``component`` treats the ``d`` per-feature time series as tokens
    (projections act on the time axis, ``n -> n/2``, ``d x d`` map);
    ``temporal`` treats the ``n`` time steps as tokens (``d -> d/2``,
    ``n x n`` map).  Maps are softmaxed per column and scaled by ``1/sqrt(d)``.
    """
    d = y1.shape[-2]
    scale = 1.0 / math.sqrt(d)
    if variant == "component":
        n = y1.shape[-1]
        if n % 2:
            raise ConfigError(f"component attention needs even n, got {n}")
        if params.attn_q.shape[-1] != n:
            raise ShapeError(f"attn_q {params.attn_q.shape} does not match sequence length {n}")
        z = ad.swap_last(y1)  # (n, d)
        q = params.attn_q @ z
        k = params.attn_k @ z
        v = params.attn_v @ z
        attn = ad.softmax((ad.swap_last(k) @ q) * scale, axis=-2)  # (d, d)
        h = v @ attn  # (n/2, d)
        return ad.swap_last(params.attn_out @ h)
    if variant == "temporal":
        if d % 2:
            raise ConfigError(f"temporal attention needs even d, got {d}")
        if params.attn_q.shape[-1] != d:
            raise ShapeError(f"attn_q {params.attn_q.shape} does not match feature size {d}")
        q = params.attn_q @ y1
        k = params.attn_k @ y1
        v = params.attn_v @ y1
        attn = ad.softmax((ad.swap_last(k) @ q) * scale, axis=-2)  # (n, n)
        return params.attn_out @ (v @ attn)
    raise ConfigError(f"unknown attention variant {variant!r}")


def f_hybrid_atten(y2: Tensor, c: Tensor, params: GnnmParameters, aggregate: bool) -> GnnmOutput:
    """Context-conditioned attention, optionally pooling the sequence.

    Queries and values see every time step concatenated with ``c``; keys see
    the time steps alone.  When aggregating, each position's weight is the
    softmax of the total attention it receives across all queries.
    """
    d, n = y2.shape[-2], y2.shape[-1]
    if c.shape[-1] != d:
        raise ShapeError(f"context has length {c.shape[-1]}, expected {d}")
    c_cols = ad.broadcast_to(ad.reshape(c, c.shape + (1,)), c.shape[:-1] + (d, n))
    if y2.ndim > c_cols.ndim:
        c_cols = ad.broadcast_to(c_cols, y2.shape)
    elif c_cols.ndim > y2.ndim:
        y2 = ad.broadcast_to(y2, c_cols.shape)
    joined = ad.concat([y2, c_cols], axis=-2)  # (2d, n)
    q = params.hyb_q @ joined
    k = params.hyb_k @ y2
    v = params.hyb_v @ joined
    attn = ad.softmax((ad.swap_last(k) @ q) * (1.0 / math.sqrt(d)), axis=-2)  # (n, n)
    if not aggregate:
        return GnnmOutput(sequence=v @ attn, vector=None, attention=attn, values=v)
    received = ad.sum(attn, axis=-1)  # (n,): total weight each key position receives
    weights = ad.softmax(received, axis=-1)
    pooled = ad.index(v @ ad.reshape(weights, weights.shape + (1,)), (..., 0))
    return GnnmOutput(sequence=None, vector=pooled, attention=attn, values=v, weights=weights)


def _phi(x: Tensor, gamma: Tensor, beta: Tensor, config: GnnmConfig) -> Tensor:
    act = ad.ACTIVATIONS[config.activation]
    return act(ad.layer_norm(x, gamma, beta, axis=-2, eps=config.epsilon))


def gnnm_forward(x, c, params: GnnmParameters, config: GnnmConfig) -> GnnmOutput:
    """Full module: three pre-normalised residual stages."""
    x = x if isinstance(x, Tensor) else Tensor(x, dtype=params.hyb_k.dtype)
    c = c if isinstance(c, Tensor) else Tensor(c, dtype=params.hyb_k.dtype)
    _check_seq(x, config.d, config.n)
    if c.ndim < 1 or c.shape[-1] != config.d:
        raise ShapeError(f"context has shape {c.shape}, expected (..., {config.d})")
    y1 = f_conv(_phi(x, params.ln1_gamma, params.ln1_beta, config) + x, params.conv_kernel)
    y2 = f_atten(_phi(y1, params.ln2_gamma, params.ln2_beta, config) + y1, params,
                 config.attention_variant)
    y3 = _phi(y2, params.ln3_gamma, params.ln3_beta, config) + y2
    return f_hybrid_atten(y3, c, params, config.aggregate_output)


class GNNM:
    """Convenience wrapper bundling a config with its parameters."""

    def __init__(self, config: GnnmConfig, params: GnnmParameters | None = None,
                 seed: int | None = 0, dtype="double"):
        self.config = config
        self.params = params if params is not None else init_parameters(config, seed, dtype)

    def __call__(self, x, c) -> GnnmOutput:
        return gnnm_forward(x, c, self.params, self.config)

    def parameters(self) -> list[Tensor]:
        return self.params.tensors()

    def num_scalars(self) -> int:
        return self.params.num_scalars()
