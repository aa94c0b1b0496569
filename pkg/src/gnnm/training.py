"""Training: model wrapper, optimizers, schedules, checkpoints, two-stage runs."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import decoders as dec
from .autodiff import Tensor
from .errors import ConfigError, NonFiniteLossError, UsageError
from .hierarchy import HierarchyConfig, Network, build_network, network_forward
from .sample import Batch, VideoSample, stack
from .serialization import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

DECAY_PERIODS = {"halve_every_5": 5, "halve_every_3": 3, "none": None}
STAGES = ("regular", "warm_up", "fine_tune")
DECODER_GROUP = "decoder"
VISUAL_SLOTS = ("clip.motion", "video.motion")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 25
    batch_size: int = 128
    lr_decay: str = "halve_every_5"
    stage: str = "regular"
    module_lr_multipliers: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    optimizer: str = "adam"
    grad_clip: float | None = 5.0
    max_steps: int | None = None
    restore_best: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.lr_decay not in DECAY_PERIODS:
            raise ConfigError(f"lr_decay must be one of {sorted(DECAY_PERIODS)}, got {self.lr_decay!r}")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        for key, value in self.module_lr_multipliers.items():
            if not value >= 0:
                raise ConfigError(f"lr multiplier for {key} must be >= 0, got {value}")

    @property
    def warm_up(self) -> bool:
        return self.stage == "warm_up"

    @classmethod
    def fine_tune(cls, **kwargs) -> "TrainConfig":
        """Second-stage defaults: 0.05x rate on the motion-conditioned slots,
        halving every three epochs."""
        kwargs.setdefault("stage", "fine_tune")
        kwargs.setdefault("lr_decay", "halve_every_3")
        kwargs.setdefault("module_lr_multipliers", {slot: 0.05 for slot in VISUAL_SLOTS})
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Base learning rate halved every decay period (epochs are 0-based)."""
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    period = DECAY_PERIODS[cfg.lr_decay]
    if period is None:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 ** (epoch // period)


# -------------------------------------------------------------------- model


class VideoQAModel:
    """Network plus the task decoder."""

    def __init__(self, network: Network, decoder: dec.DecoderParameters):
        if network.config.task != decoder.task:
            raise ConfigError(f"decoder task {decoder.task!r} != network task {network.config.task!r}")
        self.network = network
        self.decoder = decoder

    @property
    def task(self) -> str:
        return self.network.config.task

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return ([(f"net.{n}", t) for n, t in self.network.named_parameters()]
                + [(f"dec.{n}", t) for n, t in self.decoder.named()])

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_groups(self) -> dict[str, str]:
        """Map parameter name -> multiplier key (logical slot or ``decoder``).

        A physical set shared by several slots reports ``"a+b"``.
        """
        out = {}
        reg = self.network.registry
        for set_id, params in enumerate(reg.physical_sets):
            key = "+".join(s.name for s in reg.slots_of_set(set_id))
            for name, _ in params.named():
                out[f"net.set{set_id}.{name}"] = key
        for name, _ in self.decoder.named():
            out[f"dec.{name}"] = DECODER_GROUP
        return out

    def forward(self, batch, warm_up: bool = False) -> Tensor:
        """Logits ``(B, A)``, raw counts ``(B,)`` or candidate scores ``(B, K)``."""
        batch = stack(batch)
        emb = network_forward(batch, self.network, warm_up=warm_up)
        q = batch.question
        if self.task == "open_ended":
            return dec.open_ended_logits(emb, q, self.decoder, warm_up)
        if self.task == "count":
            raw, _ = dec.decode_count(emb, q, self.decoder, warm_up)
            return raw
        return dec.decode_multi_choice(emb, q, batch.candidates, self.decoder, warm_up)

    def loss(self, batch, warm_up: bool = False) -> Tensor:
        batch = stack(batch)
        out = self.forward(batch, warm_up)
        if self.task == "open_ended":
            return dec.cross_entropy_logits(out, batch.labels)
        if self.task == "count":
            return dec.mse(out, batch.labels)
        return dec.hinge(out, batch.labels)

    def predict(self, batch, warm_up: bool = False) -> np.ndarray:
        out = self.forward(batch, warm_up).data
        if self.task == "count":
            return np.maximum(dec.round_half_away(out), 0)
        return out.argmax(axis=-1)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, t in self.named_parameters():
            t.data = snap[n].copy()


def build_model(config: HierarchyConfig, num_answers: int = 2, seed: int = 0,
                precision: str = "single") -> VideoQAModel:
    rng = np.random.default_rng(seed)
    network = build_network(config, rng, precision)
    decoder = dec.init_decoder(config.task, config.d, num_answers, rng, precision)
    return VideoQAModel(network, decoder)


# ---------------------------------------------------------------- optimizers


class SGD:
    def __init__(self):
        self.t = 0
        self.last_updates: dict[str, np.ndarray] = {}

    def step(self, named: Sequence[tuple[str, Tensor]], grads: Sequence[np.ndarray],
             lrs: Sequence[float]) -> None:
        self.t += 1
        self.last_updates = {}
        for (name, p), g, lr in zip(named, grads, lrs):
            upd = (lr * g).astype(p.dtype)
            p.data = p.data - upd
            self.last_updates[name] = upd

    def state_tensors(self) -> list[tuple[str, np.ndarray]]:
        return []

    def load_state(self, t: int, tensors: dict[str, np.ndarray]) -> None:
        self.t = t


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.last_updates: dict[str, np.ndarray] = {}

    def step(self, named, grads, lrs) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        self.last_updates = {}
        for (name, p), g, lr in zip(named, grads, lrs):
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            self.m[name], self.v[name] = m.astype(p.dtype), v.astype(p.dtype)
            upd = (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
            p.data = p.data - upd
            self.last_updates[name] = upd

    def state_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name in self.m:
            out.append((f"adam.m.{name}", self.m[name]))
            out.append((f"adam.v.{name}", self.v[name]))
        return out

    def load_state(self, t: int, tensors: dict[str, np.ndarray]) -> None:
        self.t = t
        for key, arr in tensors.items():
            if key.startswith("adam.m."):
                self.m[key[len("adam.m."):]] = arr
            elif key.startswith("adam.v."):
                self.v[key[len("adam.v."):]] = arr


def make_optimizer(cfg: TrainConfig):
    return Adam() if cfg.optimizer == "adam" else SGD()


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    batch_in_epoch: int = 0
    best_metric: float | None = None
    best_epoch: int | None = None
    seed: int = 0
    stage: str = "regular"
    history: list[dict] = field(default_factory=list)
    optimizer: object = None
    best_snapshot: dict | None = field(default=None, repr=False)

    def scalars(self) -> dict:
        return {
            "epoch": self.epoch, "step": self.step, "batch_in_epoch": self.batch_in_epoch,
            "best_metric": self.best_metric, "best_epoch": self.best_epoch, "seed": self.seed,
            "stage": self.stage, "history": self.history,
            "optimizer_t": getattr(self.optimizer, "t", 0),
        }


def slot_multipliers(model: VideoQAModel, cfg: TrainConfig) -> dict[str, float]:
    """Per-parameter multiplier; slots sharing one physical set must agree."""
    known = {s.name for s in model.network.slots} | {DECODER_GROUP}
    unknown = set(cfg.module_lr_multipliers) - known
    if unknown:
        raise ConfigError(f"unknown lr multiplier keys {sorted(unknown)}; known: {sorted(known)}")
    out = {}
    for pname, group in model.parameter_groups().items():
        values = {cfg.module_lr_multipliers.get(key, 1.0) for key in group.split("+")}
        if len(values) > 1:
            raise ConfigError(f"slots {group} share parameters but have different lr multipliers "
                              f"{sorted(values)}; use per_module sharing")
        out[pname] = values.pop()
    return out


def clip_gradients(grads: list[np.ndarray], max_norm: float | None) -> tuple[list[np.ndarray], float]:
    total = math.sqrt(float(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm is None or total <= max_norm or total == 0:
        return grads, total
    scale = max_norm / total
    return [(g * scale).astype(g.dtype) for g in grads], total


def train_step(model: VideoQAModel, batch, state: TrainState, cfg: TrainConfig) -> tuple[float, TrainState]:
    """One optimizer update on the batch mean loss."""
    batch = stack(batch)
    if len(batch) == 0:
        raise UsageError("empty batch")
    if state.optimizer is None:
        state.optimizer = make_optimizer(cfg)
    named = model.named_parameters()
    params = [t for _, t in named]
    loss = model.loss(batch, warm_up=cfg.warm_up)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value} at step {state.step} (epoch {state.epoch}, "
                                 f"stage {cfg.stage})")
    grads = ad.grad(loss, params)
    grads, _ = clip_gradients(grads, cfg.grad_clip)
    base = lr_at(state.epoch, cfg)
    mult = slot_multipliers(model, cfg)
    lrs = [base * mult[name] for name, _ in named]
    state.optimizer.step(named, grads, lrs)
    ad.zero_grad(params)
    state.step += 1
    return value, state


# ---------------------------------------------------------------- evaluation


def evaluate(model: VideoQAModel, dataset, warm_up: bool = False, chunk: int = 256) -> dict[str, float]:
    """``accuracy`` for classification tasks, ``mse`` of rounded counts otherwise."""
    batch = stack(dataset) if not isinstance(dataset, Batch) else dataset
    if len(batch) == 0:
        raise UsageError("cannot evaluate an empty dataset")
    preds = np.concatenate([model.predict(take(batch, np.arange(i, min(i + chunk, len(batch)))), warm_up)
                            for i in range(0, len(batch), chunk)])
    labels = batch.labels
    if model.task == "count":
        return {"mse": float(np.mean((preds - labels) ** 2))}
    return {"accuracy": float(np.mean(preds == labels))}


def primary_metric(metrics: dict[str, float]) -> tuple[str, float, bool]:
    """(name, value, higher_is_better)."""
    if "accuracy" in metrics:
        return "accuracy", metrics["accuracy"], True
    return "mse", metrics["mse"], False


def take(batch: Batch, idx: np.ndarray) -> Batch:
    return Batch(
        clip_frames=batch.clip_frames[idx], clip_motion=batch.clip_motion[idx],
        video_motion=batch.video_motion[idx], question=batch.question[idx],
        labels=batch.labels[idx], task=batch.task,
        candidates=None if batch.candidates is None else batch.candidates[idx],
    )


# ------------------------------------------------------------------ the loop


def format_step(step: int, epoch: int, lr: float, loss: float) -> str:
    return f"step={step} epoch={epoch} lr={lr!r} loss={loss!r}"


def train(model: VideoQAModel, train_set, val_set, cfg: TrainConfig, state: TrainState | None = None,
          log: Callable[[str], None] | None = None, out_dir: str | os.PathLike | None = None,
          stop_after_steps: int | None = None) -> TrainState:
    """Epoch loop with per-epoch validation and best-checkpoint retention.

    ``stop_after_steps`` interrupts the run (the state then resumes exactly
    where it stopped); ``cfg.max_steps`` ends training early for good.
    """
    train_batch = stack(train_set)
    val_batch = stack(val_set) if val_set is not None and len(val_set) else None
    state = state or TrainState(seed=cfg.seed, stage=cfg.stage)
    emit = log or (lambda line: None)
    n = len(train_batch)
    nb = math.ceil(n / cfg.batch_size)
    steps_this_call = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    while state.epoch < cfg.epochs:
        perm = np.random.default_rng([cfg.seed, state.epoch]).permutation(n)
        while state.batch_in_epoch < nb:
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            if stop_after_steps is not None and steps_this_call >= stop_after_steps:
                return state
            b = state.batch_in_epoch
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss, state = train_step(model, take(train_batch, idx), state, cfg)
            emit(format_step(state.step, state.epoch, lr_at(state.epoch, cfg), loss))
            state.batch_in_epoch += 1
            steps_this_call += 1
        finished = cfg.max_steps is not None and state.step >= cfg.max_steps
        if val_batch is not None:
            metrics = evaluate(model, val_batch, warm_up=cfg.warm_up)
            name, value, higher = primary_metric(metrics)
            state.history.append({"epoch": state.epoch, "step": state.step, name: value})
            emit(f"eval epoch={state.epoch} step={state.step} {name}={value!r}")
            better = (state.best_metric is None
                      or (value > state.best_metric if higher else value < state.best_metric))
            if better:
                state.best_metric, state.best_epoch = value, state.epoch
                state.best_snapshot = model.snapshot()
                if out is not None:
                    save_training_checkpoint(out / "best.ckpt", model, state, cfg)
        state.epoch += 1
        state.batch_in_epoch = 0
        if out is not None:
            save_training_checkpoint(out / "last.ckpt", model, state, cfg)
        if finished:
            break
    if cfg.restore_best and state.best_snapshot is not None:
        model.restore(state.best_snapshot)
    return state


def run_two_stage(model: VideoQAModel, train_set, val_set, warm_cfg: TrainConfig, fine_cfg: TrainConfig,
                  log: Callable[[str], None] | None = None,
                  out_dir: str | os.PathLike | None = None) -> TrainState:
    """Warm-up without questions, then fine-tune with them from the warm-up weights.

    Returns the fine-tune state; the warm-up state is appended to its
    ``history`` under ``{"warm_up": ...}``.
    """
    if warm_cfg.stage != "warm_up":
        raise ConfigError(f"first stage must have stage='warm_up', got {warm_cfg.stage!r}")
    if fine_cfg.stage != "fine_tune":
        raise ConfigError(f"second stage must have stage='fine_tune', got {fine_cfg.stage!r}")
    slot_multipliers(model, fine_cfg)  # fail before spending time on stage 1
    emit = log or (lambda line: None)
    out = Path(out_dir) if out_dir is not None else None
    emit("stage=warm_up")
    warm_state = train(model, train_set, val_set, warm_cfg, log=emit,
                       out_dir=None if out is None else out / "warm_up")
    emit("stage=fine_tune")
    fine_state = train(model, train_set, val_set, fine_cfg, log=emit,
                       out_dir=None if out is None else out / "fine_tune")
    fine_state.history.insert(0, {"warm_up": {"best_metric": warm_state.best_metric,
                                              "best_epoch": warm_state.best_epoch}})
    return fine_state


# --------------------------------------------------------------- checkpoints


def save_training_checkpoint(path, model: VideoQAModel, state: TrainState, cfg: TrainConfig) -> None:
    header = {
        "network": json.dumps(model.network.config.to_dict(), sort_keys=True),
        "decoder": json.dumps({"task": model.decoder.task, "d": model.decoder.d,
                               "num_answers": model.decoder.num_answers}, sort_keys=True),
        "train_config": json.dumps(cfg.to_dict(), sort_keys=True),
        "state": json.dumps(state.scalars(), sort_keys=True),
        "optimizer": cfg.optimizer,
    }
    tensors = [(name, t.data) for name, t in model.named_parameters()]
    if state.optimizer is not None:
        tensors += state.optimizer.state_tensors()
    if state.best_snapshot is not None:
        tensors += [(f"best.{name}", arr) for name, arr in state.best_snapshot.items()]
    save_checkpoint(path, header, tensors)


def load_training_checkpoint(path, precision: str = "single") -> tuple[VideoQAModel, TrainState, TrainConfig]:
    header, tensors = load_checkpoint(path)
    hcfg = HierarchyConfig.from_dict(json.loads(header["network"]))
    dinfo = json.loads(header["decoder"])
    model = build_model(hcfg, dinfo["num_answers"], seed=0, precision=precision)
    for name, t in model.named_parameters():
        if name not in tensors or tensors[name].shape != t.shape:
            raise UsageError(f"{path}: missing or misshapen tensor {name}")
        t.data = tensors[name].astype(t.dtype)
    cfg = TrainConfig(**json.loads(header["train_config"]))
    scal = json.loads(header["state"])
    opt = make_optimizer(cfg)
    dtype = ad.as_dtype(precision)
    opt.load_state(scal.pop("optimizer_t"), {k: v.astype(dtype) for k, v in tensors.items()
                                             if k.startswith("adam.")})
    best = {k[len("best."):]: v.astype(dtype) for k, v in tensors.items() if k.startswith("best.")}
    state = TrainState(optimizer=opt, best_snapshot=best or None, **scal)
    return model, state, cfg


def with_stage(cfg: TrainConfig, stage: str) -> TrainConfig:
    return replace(cfg, stage=stage)
