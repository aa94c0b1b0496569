"""Video QA items and their batched form."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError, UsageError

TASKS = ("open_ended", "count", "multi_choice")


@dataclass
class VideoSample:
    """One QA item.

    ``clip_frames`` is ``(N, d, frames_per_clip)``; ``clip_motion`` is
    ``(N, d)``; ``video_motion`` and ``question`` are ``(d,)``;
    ``candidates`` is ``(K, d)`` for multiple choice and ``None`` otherwise.
    ``label`` is an answer index, a count, or the correct candidate index.
    """

    clip_frames: np.ndarray
    clip_motion: np.ndarray
    video_motion: np.ndarray
    question: np.ndarray
    label: int
    task: str = "open_ended"
    candidates: np.ndarray | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise UsageError(f"unknown task {self.task!r}")
        if (self.candidates is not None) != (self.task == "multi_choice"):
            raise UsageError("candidates must be given exactly for multi_choice samples")
        if self.task == "count" and self.label < 0:
            raise UsageError(f"count labels are nonnegative, got {self.label}")
        n_clips, d, _ = self.clip_frames.shape
        if self.clip_motion.shape != (n_clips, d):
            raise ShapeError(f"clip_motion {self.clip_motion.shape} != {(n_clips, d)}")
        if self.video_motion.shape != (d,) or self.question.shape != (d,):
            raise ShapeError("video_motion and question must have length d")
        if self.candidates is not None and (self.candidates.ndim != 2 or self.candidates.shape[1] != d):
            raise ShapeError(f"candidates {self.candidates.shape} must be (K, {d})")

    @property
    def d(self) -> int:
        return self.clip_frames.shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = [self.clip_frames, self.clip_motion, self.video_motion, self.question]
        if self.candidates is not None:
            out.append(self.candidates)
        return out

    def equals(self, other: "VideoSample") -> bool:
        """Bit-exact equality of every field."""
        if (self.task, self.label) != (other.task, other.label):
            return False
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(
            x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes()
            for x, y in zip(a, b)
        )


@dataclass
class Batch:
    clip_frames: np.ndarray  # (B, N, d, f)
    clip_motion: np.ndarray  # (B, N, d)
    video_motion: np.ndarray  # (B, d)
    question: np.ndarray  # (B, d)
    labels: np.ndarray  # (B,)
    task: str
    candidates: np.ndarray | None = None  # (B, K, d)

    def __len__(self) -> int:
        return self.clip_frames.shape[0]

    def with_question(self, question: np.ndarray) -> "Batch":
        return Batch(self.clip_frames, self.clip_motion, self.video_motion, question,
                     self.labels, self.task, self.candidates)


def stack(samples: Sequence[VideoSample] | VideoSample | Batch) -> Batch:
    if isinstance(samples, Batch):
        return samples
    if isinstance(samples, VideoSample):
        samples = [samples]
    if not samples:
        raise UsageError("cannot batch an empty list of samples")
    tasks = {s.task for s in samples}
    if len(tasks) != 1:
        raise UsageError(f"mixed tasks in one batch: {sorted(tasks)}")
    task = tasks.pop()
    return Batch(
        clip_frames=np.stack([s.clip_frames for s in samples]),
        clip_motion=np.stack([s.clip_motion for s in samples]),
        video_motion=np.stack([s.video_motion for s in samples]),
        question=np.stack([s.question for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        task=task,
        candidates=np.stack([s.candidates for s in samples]) if task == "multi_choice" else None,
    )
