"""Deterministic 2-D planar manipulation world.

Continuous arena [0,1)^2, axis-aligned square objects, a point gripper with
an open/closed flag. Two control modes: "joint" commands a body-frame
velocity (body frame rotated a fixed angle from world), "ee" commands a
world-frame position delta. Everything is a pure function of
(seed, task, embodiment, actions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from flowsteer.data.episode import Observation
from flowsteer.tensor.rng import SplitRng

from .render import render_observation

ARENA_MARGIN = 0.05
OBJECT_HALF = 0.04
BODY_FRAME_ANGLE = math.pi / 4  # fixed rotation between body and world frame
GRASP_FRACTION = 1.0  # grasp radius = gripper_reach


@dataclass(frozen=True)
class EmbodimentSpec:
    id: str
    max_speed: float
    gripper_reach: float
    action_scaling: tuple  # per-dimension scale on raw actions
    wrist_crop: float  # wrist camera window size, arena fraction


EMBODIMENTS = {
    "compact": EmbodimentSpec("compact", max_speed=0.04, gripper_reach=0.06,
                              action_scaling=(1.0, 1.0, 1.0), wrist_crop=0.5),
    "heavy": EmbodimentSpec("heavy", max_speed=0.02, gripper_reach=0.05,
                            action_scaling=(1.0, 1.0, 1.0), wrist_crop=0.35),
}


@dataclass
class WorldState:
    gripper: np.ndarray  # (2,) position
    gripper_open: bool
    held: int | None  # index into object_poses
    object_poses: list  # list of (type_tag, np.ndarray (2,))
    initial_object_poses: list  # frozen copy from reset
    goal_regions: list  # list of (x0, y0, x1, y1, target_tag)
    step_index: int = 0

    def object_pos(self, tag: str) -> np.ndarray:
        for t, p in self.object_poses:
            if t == tag:
                return p
        raise KeyError(f"no object tagged {tag!r}")

    def initial_object_pos(self, tag: str) -> np.ndarray:
        for t, p in self.initial_object_poses:
            if t == tag:
                return p
        raise KeyError(f"no object tagged {tag!r}")

    def copy(self) -> "WorldState":
        return WorldState(
            gripper=self.gripper.copy(),
            gripper_open=self.gripper_open,
            held=self.held,
            object_poses=[(t, p.copy()) for t, p in self.object_poses],
            initial_object_poses=[(t, p.copy()) for t, p in self.initial_object_poses],
            goal_regions=list(self.goal_regions),
            step_index=self.step_index,
        )


def body_to_world(vec: np.ndarray) -> np.ndarray:
    c, s = math.cos(BODY_FRAME_ANGLE), math.sin(BODY_FRAME_ANGLE)
    return np.array([c * vec[0] - s * vec[1], s * vec[0] + c * vec[1]])


def world_to_body(vec: np.ndarray) -> np.ndarray:
    c, s = math.cos(BODY_FRAME_ANGLE), math.sin(BODY_FRAME_ANGLE)
    return np.array([c * vec[0] + s * vec[1], -s * vec[0] + c * vec[1]])


class SimEnv:
    """World instance bound to one task and embodiment. Single-threaded."""

    def __init__(self, task, embodiment: EmbodimentSpec | str, view_size: int = 24,
                 include_rear: bool = True):
        from .tasks import TaskSpec  # local import to avoid cycle at module load
        if isinstance(embodiment, str):
            embodiment = EMBODIMENTS[embodiment]
        self.task = task
        self.embodiment = embodiment
        self.view_size = view_size
        self.include_rear = include_rear

    def reset(self, seed: int) -> tuple[WorldState, Observation]:
        rng = SplitRng(seed).split("reset", self.task.instance_key)
        placements: list = []
        occupied: list[np.ndarray] = []
        for tag in self.task.object_tags:
            fixed = self.task.fixed_spawns.get(tag)
            if fixed is not None:
                pos = np.asarray(fixed, dtype=np.float64)
            else:
                pos = self._place(rng, occupied, tag)
            occupied.append(pos)
            placements.append((tag, pos))
        gripper = self._place(rng, occupied, "__gripper__")
        state = WorldState(
            gripper=gripper,
            gripper_open=True,
            held=None,
            object_poses=placements,
            initial_object_poses=[(t, p.copy()) for t, p in placements],
            goal_regions=list(self.task.goal_regions),
        )
        return state, self.observe(state)

    def _place(self, rng: SplitRng, occupied: list, tag: str) -> np.ndarray:
        lo, hi = ARENA_MARGIN + OBJECT_HALF, 1.0 - ARENA_MARGIN - OBJECT_HALF
        for _ in range(200):
            pos = rng.uniform(lo, hi, size=2)
            if self.task.forbidden_spawn_for(tag, pos):
                continue
            if all(np.max(np.abs(pos - q)) > 2.2 * OBJECT_HALF for q in occupied):
                return pos
        raise RuntimeError("could not place object without overlap")

    def observe(self, state: WorldState) -> Observation:
        return render_observation(state, self.embodiment, self.view_size,
                                  include_rear=self.include_rear)

    def step(self, state: WorldState, action: np.ndarray,
             control_mode: str = "ee") -> tuple[WorldState, Observation, bool]:
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (3,) or not np.all(np.isfinite(action)):
            raise ValueError(f"action must be a finite 3-vector, got {action}")
        if control_mode not in ("joint", "ee"):
            raise ValueError(f"unknown control mode {control_mode!r}")
        emb = self.embodiment
        scaled = action * np.asarray(emb.action_scaling)
        xy = scaled[:2]
        if control_mode == "joint":
            xy = body_to_world(xy)
        disp = xy * emb.max_speed
        norm = float(np.linalg.norm(disp))
        if norm > emb.max_speed:
            disp = disp * (emb.max_speed / norm)

        new = state.copy()
        new.gripper = np.clip(state.gripper + disp, ARENA_MARGIN, 1.0 - ARENA_MARGIN)
        want_closed = scaled[2] > 0.0
        if want_closed and new.gripper_open:
            new.gripper_open = False
            new.held = self._nearest_graspable(new)
        elif not want_closed and not new.gripper_open:
            new.gripper_open = True
            new.held = None
        if new.held is not None:
            tag, _ = new.object_poses[new.held]
            new.object_poses[new.held] = (tag, new.gripper.copy())
        new.step_index = state.step_index + 1
        done = score_progress(new, self.task) >= 1.0
        return new, self.observe(new), done

    def _nearest_graspable(self, state: WorldState) -> int | None:
        best, best_d = None, self.embodiment.gripper_reach * GRASP_FRACTION
        for i, (tag, pos) in enumerate(state.object_poses):
            d = float(np.linalg.norm(pos - state.gripper))
            if d <= best_d:
                best, best_d = i, d
        return best


def score_progress(state: WorldState, task) -> float:
    """Fraction of subtask completion predicates that hold, equal weights."""
    preds = [sub.predicate for sub in task.subtask_script]
    return sum(1.0 for p in preds if p(state)) / len(preds)
