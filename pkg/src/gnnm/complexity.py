"""Closed-form parameter counts and space lower bounds, plus an audit against
instantiated networks."""
from __future__ import annotations

from dataclasses import dataclass, field

from .module import GnnmConfig

BYTES_PER_PARAM = 4  # float32 storage


def count_conv(c_in: int, s: int, c_out: int, bias: bool = False) -> int:
    """Weights of a convolution: ``c_in*s*c_out`` plus ``c_out`` biases."""
    return c_in * s * c_out + (c_out if bias else 0)


def count_linear(l_in: int, l_out: int, bias: bool = False) -> int:
    return l_in * l_out + (l_out if bias else 0)


def count_layernorm(d: int) -> int:
    return 2 * d


def count_parts(config: GnnmConfig) -> dict[str, int]:
    """Per-part scalar counts of one module (no biases anywhere)."""
    d = config.d
    r = config.reduced_axis
    return {
        "conv": count_conv(1, 3, 1),
        "f_atten": 3 * count_linear(r, r // 2) + count_linear(r // 2, r),
        "hybrid": count_linear(d, d) + 2 * count_linear(2 * d, d),
        "layernorm": 3 * count_layernorm(d),
    }


def count_gnnm_params(config: GnnmConfig) -> int:
    """Trainable scalars in one module.

    ``7d^2 + 6d + 3`` for the temporal variant, ``5d^2 + 2n^2 + 6d + 3`` for
    the component variant.
    """
    return sum(count_parts(config).values())


def temporal_formula(d: int) -> int:
    return 7 * d * d + 6 * d + 3


def component_formula(d: int, n: int) -> int:
    return 5 * d * d + 2 * n * n + 6 * d + 3


def space_lower_bound(m: int) -> tuple[int, int]:
    """Parameters, their gradients and the learning rate: ``2m + 1`` slots."""
    if m < 0:
        raise ValueError(f"parameter count must be >= 0, got {m}")
    slots = 2 * m + 1
    return slots, slots * BYTES_PER_PARAM


@dataclass
class CountReport:
    parts: dict[str, int]
    module_total: int
    logical_total: int
    physical_total: int
    num_logical: int
    num_physical: int
    space_slots: int
    space_bytes: int
    decoder_total: int = 0
    mismatches: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches and self.physical_total <= self.logical_total

    def as_dict(self) -> dict[str, object]:
        out: dict[str, object] = {f"part.{k}": v for k, v in self.parts.items()}
        out.update(
            module_total=self.module_total,
            logical_modules=self.num_logical,
            physical_modules=self.num_physical,
            logical_total=self.logical_total,
            physical_total=self.physical_total,
            decoder_total=self.decoder_total,
            space_slots=self.space_slots,
            space_bytes=self.space_bytes,
            mismatches=len(self.mismatches),
        )
        return out

    def render_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())

    def render_table(self) -> str:
        rows = list(self.as_dict().items())
        width = max(len(k) for k, _ in rows)
        vwidth = max(len(f"{v:,}" if isinstance(v, int) else str(v)) for _, v in rows)
        lines = [f"{'quantity':<{width}}  {'value':>{vwidth}}", "-" * (width + vwidth + 2)]
        for k, v in rows:
            text = f"{v:,}" if isinstance(v, int) else str(v)
            lines.append(f"{k:<{width}}  {text:>{vwidth}}")
        for m in self.mismatches:
            lines.append(f"MISMATCH {m}")
        return "\n".join(lines) + "\n"


def audit_network(network, decoder=None) -> CountReport:
    """Compare closed-form counts with the scalars actually instantiated.

    ``network`` is a :class:`gnnm.hierarchy.Network`.  The space bound covers
    the physical GNNM parameters only; ``decoder`` (optional) is reported apart.
    """
    registry = network.registry
    mismatches = []
    physical_total = 0
    for set_id, params in enumerate(registry.physical_sets):
        cfg = registry.set_configs[set_id]
        formula = count_gnnm_params(cfg)
        enumerated = params.num_scalars()
        if formula != enumerated:
            mismatches.append(f"set {set_id}: formula {formula} != enumerated {enumerated}")
        physical_total += enumerated
    logical_total = 0
    for slot in network.slots:
        logical_total += count_gnnm_params(slot.config)
    first = network.slots[0].config
    decoder_total = 0
    if decoder is not None:
        decoder_total = int(sum(t.size for t in decoder.tensors()))
    slots, nbytes = space_lower_bound(physical_total)
    return CountReport(
        parts=count_parts(first),
        module_total=count_gnnm_params(first),
        logical_total=logical_total,
        physical_total=physical_total,
        num_logical=len(network.slots),
        num_physical=len(registry.physical_sets),
        space_slots=slots,
        space_bytes=nbytes,
        decoder_total=decoder_total,
        mismatches=mismatches,
    )
