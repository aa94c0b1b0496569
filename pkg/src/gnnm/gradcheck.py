"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .module import GnnmConfig, gnnm_forward, init_parameters

EXEMPT_BELOW = 1e-8


def numerical_gradient(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d target by central differences, perturbing ``target.data`` in place."""
    out = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn().item()
        flat[i] = orig - h
        minus = fn().item()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max over elements of ``|a - n| / max(|a|, |n|)``, tiny pairs exempt."""
    a, n = np.abs(analytic), np.abs(numeric)
    keep = (a + n) >= EXEMPT_BELOW
    if not keep.any():
        return 0.0
    err = np.abs(analytic - numeric)[keep] / np.maximum(a, n)[keep]
    return float(err.max())


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self) -> str | None:
        return max(self.errors, key=self.errors.get) if self.errors else None

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failing(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tolerance]


def check_gradients(fn: Callable[[], Tensor], named: Sequence[tuple[str, Tensor]],
                    h: float = 1e-5, tolerance: float = 1e-4,
                    corrupt: str | None = None) -> GradCheckReport:
    """Compare :func:`autodiff.backward` against central differences.

    ``corrupt`` names a tensor whose analytic gradient is deliberately
    perturbed before comparison (negative control).
    """
    tensors = [t for _, t in named]
    analytic = ad.grad(fn(), tensors)
    report = GradCheckReport(tolerance=tolerance)
    for (name, t), g in zip(named, analytic):
        if name == corrupt:
            g = g + 1e-2 * (np.abs(g).max() + 1.0)
        report.errors[name] = relative_error(g, numerical_gradient(fn, t, h))
    return report


def check_gnnm(config: GnnmConfig, seed: int = 0, h: float = 1e-5, tolerance: float = 1e-4,
               corrupt: str | None = None) -> GradCheckReport:
    """Gradient check of a random scalar readout of one module in double precision.

    Covers every parameter plus the input sequence and the context vector.
    """
    rng = np.random.default_rng(seed)
    params = init_parameters(config, rng, "double")
    x = Tensor(rng.normal(size=(config.d, config.n)), requires_grad=True)
    c = Tensor(rng.normal(size=config.d), requires_grad=True)
    out_shape = (config.d,) if config.aggregate_output else (config.d, config.n)
    readout = rng.normal(size=out_shape)

    def fn() -> Tensor:
        return ad.sum(gnnm_forward(x, c, params, config).value * readout)

    named = list(params.named()) + [("input", x), ("context", c)]
    return check_gradients(fn, named, h=h, tolerance=tolerance, corrupt=corrupt)
