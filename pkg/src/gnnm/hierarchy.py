"""Two-level network of GNNMs with logical/physical parameter sharing.

Each level is a chain ``motion -> [candidate] -> question``; the last module
of a level aggregates its sequence into one vector.  The clip level runs on
the frames of every clip independently; the video level runs on the
sequence of clip embeddings.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .module import GnnmConfig, GnnmParameters, gnnm_forward, init_parameters
from .sample import TASKS, Batch, VideoSample, stack

LEVELS = ("clip", "video")
SHARING = ("per_module", "per_level")


@dataclass(frozen=True)
class HierarchyConfig:
    d: int = 512
    num_clips: int = 8
    frames_per_clip: int = 16
    task: str = "open_ended"
    sharing: str = "per_module"
    warm_up_mode: bool = False
    attention_variant: str = "component"
    activation: str = "elu"
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.sharing not in SHARING:
            raise ConfigError(f"sharing must be one of {SHARING}, got {self.sharing!r}")
        if self.num_clips < 1 or self.frames_per_clip < 1:
            raise ConfigError("num_clips and frames_per_clip must be >= 1")
        # surface parity problems now rather than at first forward
        for level in LEVELS:
            self.level_config(level)

    @property
    def roles(self) -> tuple[str, ...]:
        if self.task == "multi_choice":
            return ("motion", "candidate", "question")
        return ("motion", "question")

    @property
    def num_layers(self) -> int:
        return 2 * len(self.roles)

    def level_config(self, level: str, aggregate: bool = False) -> GnnmConfig:
        n = self.frames_per_clip if level == "clip" else self.num_clips
        return GnnmConfig(self.d, n, self.attention_variant, aggregate, self.activation, self.epsilon)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HierarchyConfig":
        return cls(**data)


@dataclass(frozen=True)
class Slot:
    """One logical module position in the network."""

    level: str
    role: str
    config: GnnmConfig
    set_id: int

    @property
    def name(self) -> str:
        return f"{self.level}.{self.role}"


@dataclass
class SharingRegistry:
    slots: list[Slot]
    physical_sets: list[GnnmParameters]
    set_configs: list[GnnmConfig]

    def params_for(self, slot: Slot) -> GnnmParameters:
        return self.physical_sets[slot.set_id]

    def slots_of_set(self, set_id: int) -> list[Slot]:
        return [s for s in self.slots if s.set_id == set_id]

    def tensors(self) -> list[Tensor]:
        return [t for p in self.physical_sets for t in p.tensors()]


@dataclass
class Network:
    config: HierarchyConfig
    registry: SharingRegistry
    slots: list[Slot] = field(default_factory=list)

    @property
    def dtype(self):
        return self.registry.physical_sets[0].hyb_k.dtype

    def parameters(self) -> list[Tensor]:
        return self.registry.tensors()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"set{i}.{name}", t)
                for i, p in enumerate(self.registry.physical_sets) for name, t in p.named()]

    def describe(self) -> list[str]:
        out = []
        for s in self.slots:
            tag = "aggregate" if s.config.aggregate_output else "sequence"
            out.append(f"{s.name}: n={s.config.n} context={s.role} output={tag} set={s.set_id}")
        return out

    def __call__(self, sample, warm_up: bool | None = None) -> Tensor:
        return network_forward(sample, self, warm_up=warm_up)


def build_network(config: HierarchyConfig, seed: int | np.random.Generator | None = 0,
                  dtype="double") -> Network:
    """Lay out logical slots and bind them to physical parameter sets."""
    rng = np.random.default_rng(seed)
    slots: list[Slot] = []
    sets: list[GnnmParameters] = []
    set_configs: list[GnnmConfig] = []
    for level in LEVELS:
        base = config.level_config(level)
        level_set = None
        for i, role in enumerate(config.roles):
            aggregate = i == len(config.roles) - 1
            if config.sharing == "per_level":
                if level_set is None:
                    level_set = len(sets)
                    sets.append(init_parameters(base, rng, dtype))
                    set_configs.append(base)
                set_id = level_set
            else:
                set_id = len(sets)
                sets.append(init_parameters(base, rng, dtype))
                set_configs.append(base)
            slots.append(Slot(level, role, replace(base, aggregate_output=aggregate), set_id))
    registry = SharingRegistry(slots, sets, set_configs)
    return Network(config, registry, slots)


def unshared_clone(network: Network) -> Network:
    """Same weights, one private physical set per logical slot."""
    cfg = replace(network.config, sharing="per_module")
    sets, set_configs, slots = [], [], []
    for slot in network.slots:
        sets.append(network.registry.params_for(slot).copy())
        set_configs.append(network.registry.set_configs[slot.set_id])
        slots.append(replace(slot, set_id=len(sets) - 1))
    return Network(cfg, SharingRegistry(slots, sets, set_configs), slots)


def _chain(network: Network, level: str, x: Tensor, contexts: dict[str, np.ndarray]) -> Tensor:
    for slot in (s for s in network.slots if s.level == level):
        c = Tensor(contexts[slot.role], dtype=x.dtype)
        x = gnnm_forward(x, c, network.registry.params_for(slot), slot.config).value
    return x


def network_forward(sample, network: Network, warm_up: bool | None = None) -> Tensor:
    """Final video embedding(s).

    Returns ``(B, d)``, or ``(B, K, d)`` for multiple choice (one full
    forward per candidate).  A single :class:`VideoSample` drops the batch
    axis.
    """
    single = isinstance(sample, VideoSample)
    batch = stack(sample)
    cfg = network.config
    warm = cfg.warm_up_mode if warm_up is None else warm_up
    dtype = network.dtype
    B, N, d, f = batch.clip_frames.shape
    if (N, d, f) != (cfg.num_clips, cfg.d, cfg.frames_per_clip):
        raise ShapeError(f"sample frames {(N, d, f)} do not match network "
                         f"{(cfg.num_clips, cfg.d, cfg.frames_per_clip)}")
    if batch.task != cfg.task:
        raise ShapeError(f"sample task {batch.task!r} does not match network task {cfg.task!r}")
    question = np.zeros_like(batch.question) if warm else batch.question

    frames, clip_motion, video_motion = batch.clip_frames, batch.clip_motion, batch.video_motion
    cand = None
    K = 1
    if cfg.task == "multi_choice":
        K = batch.candidates.shape[1]
        frames = np.repeat(frames, K, axis=0)
        clip_motion = np.repeat(clip_motion, K, axis=0)
        video_motion = np.repeat(video_motion, K, axis=0)
        question = np.repeat(question, K, axis=0)
        cand = batch.candidates.reshape(B * K, d)
    M = B * K

    clip_ctx = {
        "motion": clip_motion.reshape(M * N, d),
        "question": np.repeat(question, N, axis=0),
    }
    video_ctx = {"motion": video_motion, "question": question}
    if cand is not None:
        clip_ctx["candidate"] = np.repeat(cand, N, axis=0)
        video_ctx["candidate"] = cand

    x = Tensor(frames.reshape(M * N, d, f), dtype=dtype)
    clip_emb = _chain(network, "clip", x, clip_ctx)  # (M*N, d)
    seq = ad.swap_last(ad.reshape(clip_emb, (M, N, d)))  # (M, d, N)
    out = _chain(network, "video", seq, video_ctx)  # (M, d)
    if cfg.task == "multi_choice":
        out = ad.reshape(out, (B, K, d))
    if single:
        out = ad.index(out, 0)
    return out


@dataclass
class SharedGradientReport:
    max_abs_diff: float
    per_set: dict[int, float]
    call_sites: dict[int, int]
    tolerance: float = 1e-10

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tolerance


def shared_gradient_check(network: Network, sample, readout: np.ndarray | None = None,
                          seed: int = 0, tolerance: float = 1e-10) -> SharedGradientReport:
    """Gradient of each physical set vs. the sum over its call sites.

    The call-site gradients come from an unshared clone holding identical
    weights, so the comparison isolates the accumulation semantics.
    """
    clone = unshared_clone(network)
    rng = np.random.default_rng(seed)
    if readout is None:
        shape = network_forward(sample, network).shape
        readout = rng.normal(size=shape)

    def loss(net: Network) -> Tensor:
        return ad.sum(network_forward(sample, net) * readout)

    shared = ad.grad(loss(network), network.parameters())
    per_site = ad.grad(loss(clone), clone.parameters())

    n_names = len(network.registry.physical_sets[0].tensors())
    per_set, sites = {}, {}
    max_diff = 0.0
    for set_id in range(len(network.registry.physical_sets)):
        members = [i for i, s in enumerate(network.slots) if s.set_id == set_id]
        sites[set_id] = len(members)
        worst = 0.0
        for j in range(n_names):
            total = sum(per_site[i * n_names + j] for i in members)
            diff = float(np.max(np.abs(shared[set_id * n_names + j] - total)))
            worst = max(worst, diff)
        per_set[set_id] = worst
        max_diff = max(max_diff, worst)
    return SharedGradientReport(max_diff, per_set, sites, tolerance)


def network_header(network: Network) -> dict[str, str]:
    return {"network": json.dumps(network.config.to_dict(), sort_keys=True)}


def network_tensors(network: Network) -> list[tuple[str, np.ndarray]]:
    return [(name, t.data) for name, t in network.named_parameters()]


def network_from_checkpoint(header: dict[str, str], tensors: dict[str, np.ndarray],
                            dtype="single") -> Network:
    config = HierarchyConfig.from_dict(json.loads(header["network"]))
    network = build_network(config, seed=0, dtype=dtype)
    for name, t in network.named_parameters():
        if name not in tensors:
            raise ShapeError(f"checkpoint lacks tensor {name}")
        if tensors[name].shape != t.shape:
            raise ShapeError(f"checkpoint tensor {name} has shape {tensors[name].shape}, expected {t.shape}")
        t.data = tensors[name].astype(t.dtype)
    return network
