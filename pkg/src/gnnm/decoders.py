"""Answer decoders and their losses.

Each task has a regular decoder that reads the question embedding and a
warm-up decoder that never touches it.  Hidden widths are ``d`` throughout
and the activation between layers is ELU.  All functions take vectors with
an optional leading batch axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, UsageError
from .sample import TASKS

LOSS_KINDS = {"open_ended": "cross_entropy", "count": "mse", "multi_choice": "hinge"}


def _shapes(task: str, d: int, num_answers: int) -> dict[str, tuple[int, ...]]:
    out_dim = num_answers if task == "open_ended" else 1
    if task in ("open_ended", "count"):
        return {
            "W_Y": (d, 2 * d), "b_Y": (d,),
            "W_q": (d, d), "b_q": (d,),
            "W_y": (d, d), "b_y": (d,),
            "W_out": (out_dim, d), "b_out": (out_dim,),
            "warm.W_Y": (d, d), "warm.b_Y": (d,),
            "warm.W_out": (out_dim, d), "warm.b_out": (out_dim,),
        }
    return {
        "W_Y": (d, d), "b_Y": (d,),
        "W_q": (d, d), "b_q": (d,),
        "W_a": (d, d), "b_a": (d,),
        "W_y": (d, 3 * d), "b_y": (d,),
        "W_out": (1, d), "b_out": (1,),
        "warm.W_Y": (d, d), "warm.b_Y": (d,),
        "warm.W_a": (d, d), "warm.b_a": (d,),
        "warm.W_y": (d, 2 * d), "warm.b_y": (d,),
        "warm.W_out": (1, d), "warm.b_out": (1,),
    }


@dataclass
class DecoderParameters:
    task: str
    d: int
    num_answers: int
    weights: dict[str, Tensor]

    def __getitem__(self, key: str) -> Tensor:
        return self.weights[key]

    def named(self) -> list[tuple[str, Tensor]]:
        return list(self.weights.items())

    def tensors(self) -> list[Tensor]:
        return list(self.weights.values())

    def num_scalars(self) -> int:
        return int(sum(t.size for t in self.tensors()))


def init_decoder(task: str, d: int, num_answers: int = 2, rng=None, dtype="double") -> DecoderParameters:
    if task not in TASKS:
        raise UsageError(f"unknown task {task!r}")
    if task == "open_ended" and num_answers < 2:
        raise UsageError(f"open-ended decoding needs at least 2 answers, got {num_answers}")
    rng = np.random.default_rng(rng)
    dtype = ad.as_dtype(dtype)
    weights = {}
    for name, shape in _shapes(task, d, num_answers).items():
        if len(shape) == 1:
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[1])
            arr = rng.uniform(-bound, bound, size=shape)
        weights[name] = Tensor(arr.astype(dtype), requires_grad=True, name=f"decoder.{name}")
    return DecoderParameters(task, d, num_answers if task == "open_ended" else 1, weights)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"decoder input has width {x.shape[-1]}, weight expects {w.shape[1]}")
    if x.ndim == 1:
        return ad.index(ad.matmul(ad.reshape(x, (1, x.shape[0])), ad.swap_last(w)) + b, 0)
    return ad.matmul(x, ad.swap_last(w)) + b


def _lift(x, params: DecoderParameters) -> Tensor:
    dtype = params.weights["b_Y"].dtype
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _hidden(Y: Tensor, q, params: DecoderParameters, warm_up: bool) -> Tensor:
    """Shared trunk of the open-ended and count decoders (``y'`` or ``y~``)."""
    act = ad.elu
    if warm_up:
        return act(_linear(Y, params["warm.W_Y"], params["warm.b_Y"]))
    q = _lift(q, params)
    qe = _linear(q, params["W_q"], params["b_q"])
    y = act(_linear(ad.concat([Y, qe], axis=-1), params["W_Y"], params["b_Y"]))
    return act(_linear(y, params["W_y"], params["b_y"]))


def open_ended_logits(Y, q, params: DecoderParameters, warm_up: bool = False) -> Tensor:
    Y = _lift(Y, params)
    h = _hidden(Y, q, params, warm_up)
    if warm_up:
        return _linear(h, params["warm.W_out"], params["warm.b_out"])
    return _linear(h, params["W_out"], params["b_out"])


def decode_open_ended(Y, q, params: DecoderParameters, warm_up: bool = False) -> Tensor:
    """Answer probabilities over the answer vocabulary."""
    return ad.softmax(open_ended_logits(Y, q, params, warm_up), axis=-1)


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def count_head(hidden: Tensor, params: DecoderParameters, warm_up: bool = False) -> Tensor:
    """Affine readout of ``y'`` (regular) or ``y~`` (warm-up); shape ``(..., )``."""
    w, b = ("warm.W_out", "warm.b_out") if warm_up else ("W_out", "b_out")
    return ad.index(_linear(hidden, params[w], params[b]), (..., 0))


def decode_count(Y, q, params: DecoderParameters, warm_up: bool = False) -> tuple[Tensor, np.ndarray]:
    """Raw regression output and its evaluation-time rounding.

    Rounding is half away from zero and clamped at 0 since counts are
    nonnegative; training uses ``raw``.
    """
    Y = _lift(Y, params)
    raw = count_head(_hidden(Y, q, params, warm_up), params, warm_up)
    return raw, np.maximum(round_half_away(raw.data), 0)


def decode_multi_choice(Y, q, a, params: DecoderParameters, warm_up: bool = False) -> Tensor:
    """Score of each candidate given the embedding computed under it.

    ``Y`` and ``a`` share their leading axes (e.g. ``(B, K, d)``); the result
    drops the last axis.
    """
    Y = _lift(Y, params)
    a = _lift(a, params)
    act = ad.elu
    if warm_up:
        parts = [
            _linear(Y, params["warm.W_Y"], params["warm.b_Y"]),
            _linear(a, params["warm.W_a"], params["warm.b_a"]),
        ]
        h = act(_linear(ad.concat(parts, axis=-1), params["warm.W_y"], params["warm.b_y"]))
        return ad.index(_linear(h, params["warm.W_out"], params["warm.b_out"]), (..., 0))
    q = _lift(q, params)
    qe = _linear(q, params["W_q"], params["b_q"])
    if qe.ndim < Y.ndim:
        # one question per sample, broadcast over its candidates
        qe = ad.broadcast_to(ad.reshape(qe, qe.shape[:-1] + (1, qe.shape[-1])), Y.shape)
    parts = [_linear(Y, params["W_Y"], params["b_Y"]), qe, _linear(a, params["W_a"], params["b_a"])]
    h = act(_linear(ad.concat(parts, axis=-1), params["W_y"], params["b_y"]))
    return ad.index(_linear(h, params["W_out"], params["b_out"]), (..., 0))


# -------------------------------------------------------------------- losses


def _labels(labels, limit: int | None = None) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if limit is not None and (labels.min() < 0 or labels.max() >= limit):
        raise UsageError(f"label out of range [0, {limit}): {labels.tolist()}")
    return labels


def _onehot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    out = np.zeros((labels.size, k), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def cross_entropy(probs, labels) -> Tensor:
    """Mean of ``-log p[label]`` over the batch."""
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    p2 = ad.reshape(probs, (-1, probs.shape[-1])) if probs.ndim == 1 else probs
    labels = _labels(labels, p2.shape[-1])
    picked = ad.sum(p2 * _onehot(labels, p2.shape[-1], p2.dtype), axis=-1)
    return -ad.mean(ad.log(picked))


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Same as :func:`cross_entropy` on ``softmax(logits)``, computed stably."""
    l2 = ad.reshape(logits, (1, logits.shape[-1])) if logits.ndim == 1 else logits
    labels = _labels(labels, l2.shape[-1])
    picked = ad.sum(ad.log_softmax(l2, axis=-1) * _onehot(labels, l2.shape[-1], l2.dtype), axis=-1)
    return -ad.mean(picked)


def mse(raw, labels) -> Tensor:
    raw = raw if isinstance(raw, Tensor) else Tensor(raw)
    labels = np.asarray(labels, dtype=raw.dtype).reshape(raw.shape)
    if (labels < 0).any():
        raise UsageError(f"count labels must be nonnegative: {labels.tolist()}")
    return ad.mean(ad.square(raw - labels))


def hinge(scores, labels) -> Tensor:
    """Mean over the batch of ``sum_{k != GT} max(0, 1 + s_k - s_GT)``."""
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    s2 = ad.reshape(scores, (1, scores.shape[-1])) if scores.ndim == 1 else scores
    k = s2.shape[-1]
    labels = _labels(labels, k)
    onehot = _onehot(labels, k, s2.dtype)
    gt = ad.sum(s2 * onehot, axis=-1, keepdims=True)
    margins = ad.relu(1.0 + s2 - gt) * (1.0 - onehot)
    return ad.mean(ad.sum(margins, axis=-1))


def loss(prediction, label, kind: str) -> Tensor:
    """Scalar loss; ``prediction`` is probabilities, a raw count or scores."""
    if kind == "cross_entropy":
        return cross_entropy(prediction, label)
    if kind == "mse":
        return mse(prediction, label)
    if kind == "hinge":
        return hinge(prediction, label)
    raise UsageError(f"unknown loss kind {kind!r}")
