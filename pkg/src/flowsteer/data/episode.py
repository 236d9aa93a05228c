"""Episode record types and metadata binning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Observation:
    """Multi-view frames plus flat proprio vector.

    views maps view name -> (V, V, 3) float array in [0,1]. "global" and
    "wrist" are always present; "rear" is optional.
    """
    views: dict[str, np.ndarray]
    proprio: np.ndarray

    def copy(self) -> "Observation":
        return Observation({k: v.copy() for k, v in self.views.items()},
                           self.proprio.copy())


@dataclass
class Segment:
    start: int
    end: int  # exclusive
    subtask_text: str
    is_mistake: bool = False


def bin_speed(length_steps: int, bin_width: int = 500) -> int:
    """Nearest multiple of bin_width; exact half-distances round up."""
    if length_steps <= 0:
        raise ValueError(f"length_steps must be positive, got {length_steps}")
    # floor(x/w + 1/2) rounds half-up for positive x
    return int((length_steps + bin_width // 2) // bin_width) * bin_width


@dataclass
class EpisodeMetadata:
    length_steps: int
    speed_label: int
    quality: int
    mistake: bool

    @staticmethod
    def from_episode(length_steps: int, quality: int, mistake: bool,
                     bin_width: int = 500) -> "EpisodeMetadata":
        if not 1 <= quality <= 5:
            raise ValueError(f"quality must be in 1..5, got {quality}")
        return EpisodeMetadata(length_steps, bin_speed(length_steps, bin_width),
                               quality, mistake)


@dataclass
class InstructionEvent:
    step_index: int
    subtask_text: str


@dataclass
class Episode:
    steps: list  # list of (Observation, np.ndarray action)
    segments: list  # list of Segment, tiling [0, len) without overlap
    metadata: EpisodeMetadata
    source: str  # demo | eval_rollout | coaching
    task_text: str
    embodiment_id: str
    control_mode: str  # joint | ee
    template_id: str = ""
    episode_id: str = ""
    instruction_events: list = field(default_factory=list)
    final_progress: float = 0.0

    def __len__(self) -> int:
        return len(self.steps)

    def segment_at(self, t: int) -> Segment:
        for seg in self.segments:
            if seg.start <= t < seg.end:
                return seg
        raise IndexError(f"step {t} outside episode of length {len(self)}")

    def validate(self) -> None:
        covered = 0
        for seg in self.segments:
            if seg.start != covered or seg.end <= seg.start:
                raise ValueError("segments must tile [0, len) without overlap")
            covered = seg.end
        if covered != len(self.steps):
            raise ValueError("segments must cover the full episode")
        for _, a in self.steps:
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite action in episode")
