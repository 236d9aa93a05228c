"""Scripted demonstrators with controllable quality, speed, and mistakes."""

from __future__ import annotations

import numpy as np

from flowsteer.data.episode import Episode, EpisodeMetadata, Segment
from flowsteer.tensor.rng import SplitRng

from .world import SimEnv, EmbodimentSpec, EMBODIMENTS, score_progress, world_to_body

PLACE_TOL = 0.015
GRASP_FACTOR = 0.5  # close the gripper within this fraction of reach


class ScriptedController:
    """Pure-pursuit controller over a task's subtask script.

    quality < 5 adds action noise; quality <= 2 may corrupt the final place
    target (a deliberately wrong strategy). Mistakes are injected per
    segment: a random detour of 5-15 steps or one deliberately missed grasp,
    with exact step spans recorded via the is_mistake output flag.
    """

    def __init__(self, task, embodiment: EmbodimentSpec, quality: int = 5,
                 speed_factor: float = 1.0, mistake_rate: float = 0.0,
                 control_mode: str = "ee", rng: SplitRng | None = None):
        if not 1 <= quality <= 5:
            raise ValueError(f"quality must be in 1..5, got {quality}")
        self.task = task
        self.emb = embodiment
        self.quality = quality
        self.speed_factor = speed_factor
        self.mistake_rate = mistake_rate
        self.control_mode = control_mode
        self.rng = rng or SplitRng(0).split("controller")
        self.noise_sigma = 0.25 * (5 - quality) / 4.0
        self._seg_idx: int | None = None
        self._detour: tuple | None = None  # (target point, steps left)
        self._miss: dict | None = None
        self._grip_closed = False
        self._corrupt_point: tuple | None = None
        if quality <= 2 and self.rng.random() < 0.5:
            self._corrupt_point = tuple(self.rng.uniform(0.15, 0.55, size=2))
        self._gave_up = False

    def active_subtask(self, state) -> int | None:
        for i, sub in enumerate(self.task.subtask_script):
            if not sub.predicate(state):
                return i
        return None

    def _enter_segment(self, idx: int, state) -> None:
        self._seg_idx = idx
        self._detour = None
        self._miss = None
        if self.rng.random() < self.mistake_rate:
            goal = self.task.subtask_script[idx].goal
            if goal["kind"] == "grasp" and self.rng.random() < 0.5:
                obj = np.asarray(state.object_pos(goal["obj"]))
                off = self.rng.normal(size=2)
                off = off / np.linalg.norm(off) * self.emb.gripper_reach * 1.8
                self._miss = {"point": obj + off, "closed": False, "done": False}
            else:
                point = self.rng.uniform(0.1, 0.9, size=2)
                steps = int(self.rng.integers(5, 16))
                self._detour = [point, steps]

    def _goal_point(self, state, goal: dict) -> np.ndarray:
        if "point" in goal:
            p = goal["point"]
        else:
            p = state.object_pos(goal["point_of"])
        if self._corrupt_point is not None and goal["kind"] == "place" \
                and self._seg_idx == len(self.task.subtask_script) - 1:
            p = self._corrupt_point
        return np.asarray(p, dtype=np.float64)

    def _move_action(self, state, target: np.ndarray, grip: float) -> np.ndarray:
        delta = target - state.gripper
        dist = float(np.linalg.norm(delta))
        if dist < 1e-9:
            a_xy = np.zeros(2)
        else:
            mag = min(self.speed_factor, dist / self.emb.max_speed)
            a_xy = delta / dist * mag
        if self.noise_sigma > 0:
            a_xy = a_xy + self.rng.normal(0.0, self.noise_sigma * self.speed_factor,
                                          size=2)
            a_xy = np.clip(a_xy, -1.0, 1.0)
        if self.control_mode == "joint":
            a_xy = world_to_body(a_xy)
        return np.array([a_xy[0], a_xy[1], grip])

    def act(self, state) -> tuple[np.ndarray, str, bool]:
        """Return (action, active subtask text, is_mistake_step)."""
        idx = self.active_subtask(state)
        if idx is None:
            return np.zeros(3), self.task.subtask_script[-1].text, False
        if idx != self._seg_idx:
            self._enter_segment(idx, state)
        sub = self.task.subtask_script[idx]
        goal = sub.goal
        grip = 1.0 if self._grip_closed else -1.0

        if self._gave_up:
            # corrupted strategy already executed; wander in place
            a = self._move_action(state, state.gripper, -1.0)
            return a, sub.text, False

        if self._detour is not None:
            point, left = self._detour
            if left <= 0:
                self._detour = None
            else:
                self._detour[1] = left - 1
                return self._move_action(state, point, grip), sub.text, True

        if self._miss is not None and not self._miss["done"]:
            point = self._miss["point"]
            if not self._miss["closed"]:
                if float(np.linalg.norm(point - state.gripper)) > PLACE_TOL:
                    return self._move_action(state, point, -1.0), sub.text, True
                self._miss["closed"] = True
                self._grip_closed = True
                return np.array([0.0, 0.0, 1.0]), sub.text, True
            # reopen after the failed close, then resume normal behavior
            self._miss["done"] = True
            self._grip_closed = False
            return np.array([0.0, 0.0, -1.0]), sub.text, True

        holding_goal_obj = (state.held is not None and
                            state.object_poses[state.held][0] == goal["obj"])

        if goal["kind"] == "grasp" or not holding_goal_obj:
            if state.held is not None and not holding_goal_obj:
                self._grip_closed = False
                return np.array([0.0, 0.0, -1.0]), sub.text, False
            obj = np.asarray(state.object_pos(goal["obj"]))
            dist = float(np.linalg.norm(obj - state.gripper))
            if dist > self.emb.gripper_reach * GRASP_FACTOR:
                return self._move_action(state, obj, -1.0), sub.text, False
            if self._grip_closed and state.held is None:
                self._grip_closed = False  # failed close; reopen and retry
                return np.array([0.0, 0.0, -1.0]), sub.text, False
            self._grip_closed = True
            return np.array([0.0, 0.0, 1.0]), sub.text, False

        # place: carry the held object to the goal point, then release
        point = self._goal_point(state, goal)
        dist = float(np.linalg.norm(point - state.gripper))
        if dist > PLACE_TOL:
            return self._move_action(state, point, 1.0), sub.text, False
        self._grip_closed = False
        if self._corrupt_point is not None and \
                self._seg_idx == len(self.task.subtask_script) - 1:
            self._gave_up = True
        return np.array([0.0, 0.0, -1.0]), sub.text, False


def demo_step_cap(task, embodiment: EmbodimentSpec, speed_factor: float) -> int:
    n = len(task.subtask_script)
    scale = 0.04 / embodiment.max_speed
    return int(80 * n * scale / speed_factor) + 60


def scripted_demo(seed: int, task, embodiment: EmbodimentSpec | str,
                  quality: int = 5, speed_factor: float = 1.0,
                  mistake_rate: float = 0.0, control_mode: str = "ee",
                  view_size: int = 24, bin_width: int = 50,
                  max_steps: int | None = None, source: str = "demo") -> Episode:
    """Run the scripted controller and record a fully annotated episode."""
    if isinstance(embodiment, str):
        embodiment = EMBODIMENTS[embodiment]
    env = SimEnv(task, embodiment, view_size=view_size)
    state, obs = env.reset(seed)
    rng = SplitRng(seed).split("demo", task.instance_key, embodiment.id,
                               quality, speed_factor, mistake_rate)
    ctrl = ScriptedController(task, embodiment, quality, speed_factor,
                              mistake_rate, control_mode, rng)
    if max_steps is None:
        max_steps = demo_step_cap(task, embodiment, speed_factor)
    steps: list = []
    labels: list = []  # (subtask_text, is_mistake) per step
    done = False
    while not done and len(steps) < max_steps:
        action, text, is_mistake = ctrl.act(state)
        steps.append((obs, action.astype(np.float64)))
        labels.append((text, is_mistake))
        state, obs, done = env.step(state, action, control_mode)

    segments = _compress_segments(labels)
    if ctrl.mistake_rate >= 1.0 and not any(s.is_mistake for s in segments) and segments:
        # forced injection contract: rate 1.0 guarantees at least one span
        segments[0].is_mistake = True
    mistake = any(s.is_mistake for s in segments)
    metadata = EpisodeMetadata.from_episode(len(steps), quality, mistake, bin_width)
    ep = Episode(
        steps=steps,
        segments=segments,
        metadata=metadata,
        source=source,
        task_text=task.task_text,
        embodiment_id=embodiment.id,
        control_mode=control_mode,
        template_id=task.template_id,
        episode_id=(f"{task.instance_key}|{embodiment.id}|s{seed}|q{quality}"
                    f"|f{speed_factor}|m{mistake_rate}|{control_mode}"),
        final_progress=score_progress(state, task),
    )
    ep.validate()
    return ep


def _compress_segments(labels: list) -> list:
    segments: list = []
    for i, (text, mistake) in enumerate(labels):
        if segments and segments[-1].subtask_text == text \
                and segments[-1].is_mistake == mistake:
            segments[-1].end = i + 1
        else:
            segments.append(Segment(i, i + 1, text, mistake))
    return segments
