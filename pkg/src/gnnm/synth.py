"""Procedural toy video QA data and its on-disk format.

Every event type owns a fixed unit-norm signature vector.  A frame shows one
event: its signature plus isotropic Gaussian noise whose expected norm is
``noise_std`` (i.e. noise is relative to the signature norm).  Labels are
recoverable from the features by construction, see :func:`oracle_answer`.

On disk a dataset is ``<name>.manifest`` (JSON lines: one header record,
then one record per sample) plus ``<name>.blob`` (little-endian float32).
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GnnmError, UsageError
from .sample import TASKS, VideoSample

FORMAT = "gnnm-dataset"
VERSION = 1


class DatasetError(GnnmError):
    """Base class for dataset file problems."""


class ManifestError(DatasetError):
    """The manifest is not well formed."""


class TruncatedBlobError(DatasetError):
    """A sample's bytes run past the end of the blob."""


class OffsetRangeError(DatasetError):
    """A manifest offset points outside the blob."""


@dataclass(frozen=True)
class SynthSpec:
    d: int = 32
    num_clips: int = 2
    frames_per_clip: int = 4
    num_event_types: int = 4
    task: str = "open_ended"
    num_samples: int = 200
    answer_vocab_size: int = 4
    num_candidates: int = 5
    noise_std: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        for name in ("d", "num_clips", "frames_per_clip", "num_event_types", "num_samples",
                     "answer_vocab_size"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.task not in TASKS:
            raise UsageError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "open_ended" and self.num_event_types > self.answer_vocab_size:
            raise UsageError(f"num_event_types ({self.num_event_types}) exceeds "
                             f"answer_vocab_size ({self.answer_vocab_size})")
        if self.noise_std < 0:
            raise UsageError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.task == "multi_choice":
            if self.num_candidates < 2:
                raise UsageError("multi_choice needs at least 2 candidates")
            if self.num_candidates > self.num_event_types:
                raise UsageError(f"num_candidates ({self.num_candidates}) exceeds the number of "
                                 f"distinct events ({self.num_event_types})")

    @property
    def total_frames(self) -> int:
        return self.num_clips * self.frames_per_clip


@dataclass
class World:
    """Fixed vectors shared by every sample generated from one seed."""

    signatures: np.ndarray  # (E, d), unit rows
    queries: dict[str, np.ndarray]  # task -> (d,)


def _unit(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_world(spec: SynthSpec) -> World:
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(1)[0])
    signatures = _unit(rng, (spec.num_event_types, spec.d))
    queries = {task: _unit(rng, spec.d) for task in TASKS}
    return World(signatures, queries)


def _timeline(rng, spec: SynthSpec, event: int, k: int) -> np.ndarray:
    """Event id per frame: ``event`` on exactly ``k`` frames, others elsewhere."""
    T, E = spec.total_frames, spec.num_event_types
    if E == 1:
        return np.full(T, event)
    others = np.array([e for e in range(E) if e != event])
    events = np.concatenate([np.full(k, event), rng.choice(others, size=T - k)])
    return rng.permutation(events)


def _sample(rng, spec: SynthSpec, world: World) -> VideoSample:
    T, E, N, f, d = spec.total_frames, spec.num_event_types, spec.num_clips, spec.frames_per_clip, spec.d
    candidates = None
    if spec.task == "count":
        target = int(rng.integers(E))
        label = T if E == 1 else int(rng.integers(0, T + 1))
        events = _timeline(rng, spec, target, label)
        question = world.queries["count"] + world.signatures[target]
    else:
        target = int(rng.integers(E))
        k = int(rng.integers(T // 2 + 1, T + 1))
        events = _timeline(rng, spec, target, k)
        question = world.queries[spec.task].copy()
        label = target
        if spec.task == "multi_choice":
            others = [e for e in range(E) if e != target]
            chosen = list(rng.choice(others, size=spec.num_candidates - 1, replace=False))
            label = int(rng.integers(spec.num_candidates))
            chosen.insert(label, target)
            candidates = world.signatures[chosen]
    noise = rng.normal(size=(T, d)) * (spec.noise_std / np.sqrt(d))
    frames = world.signatures[events] + noise  # (T, d)
    clip_frames = frames.reshape(N, f, d).transpose(0, 2, 1)  # (N, d, f)
    if f > 1:
        clip_motion = np.diff(clip_frames, axis=2).mean(axis=2)
    else:
        clip_motion = np.zeros((N, d))
    video_motion = clip_motion.mean(axis=0)
    f32 = lambda a: np.ascontiguousarray(a, dtype=np.float32)  # noqa: E731
    return VideoSample(
        clip_frames=f32(clip_frames),
        clip_motion=f32(clip_motion),
        video_motion=f32(video_motion),
        question=f32(question),
        label=int(label),
        task=spec.task,
        candidates=None if candidates is None else f32(candidates),
    )


def generate(spec: SynthSpec) -> list[VideoSample]:
    """Samples with per-sample derived seeds; identical for identical specs."""
    spec.validate()
    world = make_world(spec)
    children = np.random.SeedSequence(spec.seed).spawn(spec.num_samples + 1)[1:]
    return [_sample(np.random.default_rng(child), spec, world) for child in children]


def _nearest(world: World, vectors: np.ndarray) -> np.ndarray:
    dist = ((vectors[..., None, :] - world.signatures) ** 2).sum(-1)
    return dist.argmin(-1)


def oracle_answer(sample: VideoSample, world: World) -> int:
    """Non-learned answer recovered by nearest-signature decoding."""
    frames = sample.clip_frames.astype(np.float64).transpose(0, 2, 1).reshape(-1, sample.d)
    events = _nearest(world, frames)
    if sample.task == "count":
        target = int(_nearest(world, sample.question - world.queries["count"]))
        return int((events == target).sum())
    dominant = int(np.bincount(events, minlength=len(world.signatures)).argmax())
    if sample.task == "open_ended":
        return dominant
    dist = ((sample.candidates - world.signatures[dominant]) ** 2).sum(-1)
    return int(dist.argmin())


def split(samples: Sequence[VideoSample], first: int) -> tuple[list[VideoSample], list[VideoSample]]:
    return list(samples[:first]), list(samples[first:])


# -------------------------------------------------------------------- files


def _paths(path) -> tuple[Path, Path]:
    base = Path(path)
    if base.suffix in (".manifest", ".blob"):
        base = base.with_suffix("")
    return base.with_name(base.name + ".manifest"), base.with_name(base.name + ".blob")


def write_dataset(samples: Sequence[VideoSample], path, spec: SynthSpec | None = None) -> tuple[Path, Path]:
    """Write ``<path>.manifest`` and ``<path>.blob``; returns both paths."""
    if not samples:
        raise UsageError("refusing to write an empty dataset")
    manifest_path, blob_path = _paths(path)
    first = samples[0]
    N, d, f = first.clip_frames.shape
    header = {
        "format": FORMAT, "version": VERSION, "task": first.task,
        "d": d, "num_clips": N, "frames_per_clip": f, "num_samples": len(samples),
    }
    if spec is not None:
        header["spec"] = asdict(spec)
    lines = [json.dumps(header, sort_keys=True)]
    offset = 0
    os.makedirs(manifest_path.parent or ".", exist_ok=True)
    with open(blob_path, "wb") as blob:
        for i, s in enumerate(samples):
            payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in s.arrays())
            blob.write(payload)
            record = {
                "index": i, "task": s.task, "label": s.label, "offset": offset, "length": len(payload),
                "num_candidates": 0 if s.candidates is None else int(s.candidates.shape[0]),
            }
            lines.append(json.dumps(record, sort_keys=True))
            offset += len(payload)
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path, blob_path


def read_header(path) -> dict:
    """The manifest's first record (format, shapes and, if known, the generating spec)."""
    manifest_path, _ = _paths(path)
    try:
        with open(manifest_path) as fh:
            return json.loads(fh.readline())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: malformed header ({exc})") from None


def _expected_length(N: int, d: int, f: int, k: int) -> int:
    return 4 * (N * d * f + N * d + d + d + k * d)


def read_dataset(path) -> list[VideoSample]:
    manifest_path, blob_path = _paths(path)
    try:
        lines = [ln for ln in manifest_path.read_text().splitlines() if ln.strip()]
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except (IndexError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{manifest_path}: malformed manifest ({exc})") from None
    if header.get("format") != FORMAT:
        raise ManifestError(f"{manifest_path}: not a {FORMAT} manifest")
    try:
        N, d, f = header["num_clips"], header["d"], header["frames_per_clip"]
    except KeyError as exc:
        raise ManifestError(f"{manifest_path}: header lacks {exc}") from None
    if header.get("num_samples", len(records)) != len(records):
        raise ManifestError(f"{manifest_path}: header announces {header['num_samples']} samples, "
                            f"found {len(records)}")
    blob = blob_path.read_bytes()
    out = []
    for rec in records:
        try:
            idx, offset, length = rec["index"], int(rec["offset"]), int(rec["length"])
            k, task, label = int(rec["num_candidates"]), rec["task"], int(rec["label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{manifest_path}: bad record {rec!r} ({exc})") from None
        if length != _expected_length(N, d, f, k):
            raise ManifestError(f"sample {idx}: length {length} does not match its shapes")
        if offset < 0 or offset >= len(blob):
            raise OffsetRangeError(f"sample {idx}: offset {offset} outside blob of {len(blob)} bytes")
        if offset + length > len(blob):
            raise TruncatedBlobError(f"sample {idx}: needs bytes [{offset}, {offset + length}) "
                                     f"but blob has {len(blob)}")
        flat = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=offset).astype(np.float32)
        pos = 0

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            arr = flat[pos:pos + size].reshape(shape)
            pos += size
            return arr

        out.append(VideoSample(
            clip_frames=take((N, d, f)),
            clip_motion=take((N, d)),
            video_motion=take((d,)),
            question=take((d,)),
            label=label,
            task=task,
            candidates=take((k, d)) if k else None,
        ))
    return out
