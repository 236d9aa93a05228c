"""Prompt assembly: context bundle, training-time dropout, subgoal sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from flowsteer.tensor.rng import SplitRng

from .episode import Episode

# subgoal horizon: 4 seconds at the simulator's nominal 10 steps/second
SUBGOAL_HORIZON_STEPS = 40
SUBGOAL_VIEWS = ("global", "wrist")  # rear view never carries subgoals


@dataclass
class DropoutConfig:
    p_subgoal_present: float = 0.25
    p_subtask_drop_given_goal: float = 0.30
    p_metadata_drop_all: float = 0.15
    p_metadata_drop_each: float = 0.05
    p_history_drop: float = 0.30
    p_rear_drop: float = 0.30


@dataclass
class PromptContext:
    """The conditioning bundle: absent optional fields are None/False."""
    task_text: str
    control_mode: str
    subtask_text: str | None = None
    subgoal_frames: dict | None = None  # view name -> frame
    speed_label: int | None = None
    quality: int | None = None
    mistake: bool | None = None
    history_present: bool = True
    rear_present: bool = True

    @property
    def has_subgoal(self) -> bool:
        return self.subgoal_frames is not None

    @property
    def has_metadata(self) -> bool:
        return (self.speed_label is not None or self.quality is not None
                or self.mistake is not None)

    def without(self, fields) -> "PromptContext":
        """Copy with the named optional fields removed (CFG unconditional mode)."""
        out = PromptContext(**self.__dict__)
        for f in fields:
            if f == "metadata":
                out.speed_label = out.quality = out.mistake = None
            elif f == "subtask":
                out.subtask_text = None
            elif f == "subgoal":
                out.subgoal_frames = None
            else:
                raise ValueError(f"unknown prompt field {f!r}")
        return out


def sample_subgoal_timestep(episode: Episode, t: int, rng: SplitRng,
                            horizon: int = SUBGOAL_HORIZON_STEPS) -> int:
    """End-of-segment index w.p. 0.25, else t + U{0..horizon} clamped."""
    seg = episode.segment_at(t)
    last = len(episode) - 1
    if rng.random() < 0.25:
        return min(seg.end - 1, last)
    offset = int(rng.integers(0, horizon + 1))
    return min(t + offset, last)


def subgoal_frames_at(episode: Episode, t_goal: int) -> dict:
    obs = episode.steps[t_goal][0]
    return {v: obs.views[v] for v in SUBGOAL_VIEWS if v in obs.views}


def assemble_prompt(episode: Episode, t: int, cfg: DropoutConfig,
                    rng: SplitRng) -> PromptContext:
    """Training-time context with the stochastic dropout schedule applied.

    Task text and control mode are never dropped. All randomness comes from
    the supplied rng, in a fixed draw order.
    """
    if not 0 <= t < len(episode):
        raise IndexError(f"step {t} outside episode")
    ctx = PromptContext(task_text=episode.task_text,
                        control_mode=episode.control_mode)

    if rng.random() < cfg.p_subgoal_present:
        t_goal = sample_subgoal_timestep(episode, t, rng)
        ctx.subgoal_frames = subgoal_frames_at(episode, t_goal)
        if rng.random() >= cfg.p_subtask_drop_given_goal:
            ctx.subtask_text = episode.segment_at(t).subtask_text
    else:
        ctx.subtask_text = episode.segment_at(t).subtask_text

    m = episode.metadata
    if rng.random() >= cfg.p_metadata_drop_all:
        if rng.random() >= cfg.p_metadata_drop_each:
            ctx.speed_label = m.speed_label
        if rng.random() >= cfg.p_metadata_drop_each:
            ctx.quality = m.quality
        if rng.random() >= cfg.p_metadata_drop_each:
            ctx.mistake = m.mistake

    ctx.history_present = rng.random() >= cfg.p_history_drop
    ctx.rear_present = rng.random() >= cfg.p_rear_drop
    return ctx


def select_runtime_metadata(task_episodes: list, bin_width: int = 50):
    """Speed from the 15th length percentile; quality 5; no mistake."""
    from .episode import EpisodeMetadata, bin_speed
    if not task_episodes:
        raise ValueError("need at least one episode to select runtime metadata")
    lengths = sorted(len(e) if isinstance(e, Episode) else int(e)
                     for e in task_episodes)
    p15 = int(np.percentile(lengths, 15, method="lower"))
    return EpisodeMetadata(length_steps=p15,
                           speed_label=bin_speed(p15, bin_width),
                           quality=5, mistake=False)
