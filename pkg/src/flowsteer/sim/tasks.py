"""Task templates: objects, goal regions, subtask scripts, progress predicates.

Every subtask pairs human-readable text with a completion predicate that is
a pure function of WorldState, plus a goal annotation consumed by the
scripted demonstrator. Subtask strings are shared primitives across
templates so instruction-following transfers between tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

MOVED_EPS = 0.05
STACK_EPS = 0.035

REGION_RECTS = {
    "right": (0.70, 0.35, 0.95, 0.65),
    "left": (0.05, 0.35, 0.30, 0.65),
    "top": (0.35, 0.05, 0.65, 0.30),
    "bottom": (0.35, 0.70, 0.65, 0.95),
}
CONTAINER_RECT = (0.62, 0.62, 0.95, 0.95)


@dataclass
class Subtask:
    text: str
    predicate: Callable  # WorldState -> bool
    goal: dict  # scripted-controller annotation


@dataclass
class TaskSpec:
    template_id: str
    instance_key: str
    task_text: str
    object_tags: list
    goal_regions: list  # (x0, y0, x1, y1, color_tag)
    subtask_script: list  # list[Subtask]
    fixed_spawns: dict = field(default_factory=dict)  # tag -> (x, y)
    spawn_exclusions: dict = field(default_factory=dict)  # tag -> list of rects

    def forbidden_spawn(self, pos) -> bool:
        # used for tags without a per-tag exclusion entry (incl. the gripper)
        return False

    def forbidden_spawn_for(self, tag: str, pos) -> bool:
        for (x0, y0, x1, y1) in self.spawn_exclusions.get(tag, []):
            if x0 <= pos[0] < x1 and y0 <= pos[1] < y1:
                return True
        return False


def _is_held(state, tag: str) -> bool:
    if state.held is None:
        return False
    return state.object_poses[state.held][0] == tag


def _lifted(tag: str):
    def pred(state) -> bool:
        if _is_held(state, tag):
            return True
        moved = np.linalg.norm(state.object_pos(tag) - state.initial_object_pos(tag))
        return float(moved) > MOVED_EPS
    return pred


def _in_rect(tag: str, rect: tuple):
    x0, y0, x1, y1 = rect

    def pred(state) -> bool:
        if _is_held(state, tag):
            return False
        p = state.object_pos(tag)
        return x0 <= p[0] < x1 and y0 <= p[1] < y1
    return pred


def _out_of_rect(tag: str, rect: tuple):
    inside = _in_rect(tag, rect)

    def pred(state) -> bool:
        if _is_held(state, tag):
            return False
        p = state.object_pos(tag)
        moved = np.linalg.norm(p - state.initial_object_pos(tag))
        x0, y0, x1, y1 = rect
        outside = not (x0 <= p[0] < x1 and y0 <= p[1] < y1)
        return outside and float(moved) > MOVED_EPS
    return pred


def _stacked(top: str, base: str):
    def pred(state) -> bool:
        if _is_held(state, top):
            return False
        d = np.linalg.norm(state.object_pos(top) - state.object_pos(base))
        return float(d) <= STACK_EPS
    return pred


def _rect_center(rect) -> tuple:
    x0, y0, x1, y1 = rect
    return ((x0 + x1) / 2, (y0 + y1) / 2)


def _pick(color: str) -> Subtask:
    return Subtask(f"pick up the {color} block", _lifted(color),
                   {"kind": "grasp", "obj": color})


def _place_region(color: str, side: str) -> Subtask:
    rect = REGION_RECTS[side]
    return Subtask(f"place the {color} block in the {side} region",
                   _in_rect(color, rect),
                   {"kind": "place", "obj": color, "point": _rect_center(rect)})


def make_move_task(color: str = "red", side: str = "right") -> TaskSpec:
    rect = REGION_RECTS[side]
    return TaskSpec(
        template_id="move-to-region",
        instance_key=f"move:{color}:{side}",
        task_text=f"move the {color} block to the {side} region",
        object_tags=[color],
        goal_regions=[rect + (color,)],
        subtask_script=[_pick(color), _place_region(color, side)],
        spawn_exclusions={color: [rect]},
    )


def make_stack_task(top: str = "red", base: str = "green") -> TaskSpec:
    return TaskSpec(
        template_id="stack",
        instance_key=f"stack:{top}:{base}",
        task_text=f"stack the {top} block on the {base} block",
        object_tags=[top, base],
        goal_regions=[],
        subtask_script=[
            _pick(top),
            Subtask(f"stack the {top} block on the {base} block",
                    _stacked(top, base),
                    {"kind": "place", "obj": top, "point_of": base}),
        ],
    )


def make_sort_task(c1: str = "red", s1: str = "right",
                   c2: str = "green", s2: str = "left") -> TaskSpec:
    r1, r2 = REGION_RECTS[s1], REGION_RECTS[s2]
    return TaskSpec(
        template_id="sort-two",
        instance_key=f"sort:{c1}:{s1}:{c2}:{s2}",
        task_text=f"sort the {c1} and {c2} blocks",
        object_tags=[c1, c2],
        goal_regions=[r1 + (c1,), r2 + (c2,)],
        subtask_script=[
            _pick(c1), _place_region(c1, s1),
            _pick(c2), _place_region(c2, s2),
        ],
        spawn_exclusions={c1: [r1], c2: [r2]},
    )


def make_container_task(color: str = "blue") -> TaskSpec:
    lid_start = _rect_center(CONTAINER_RECT)
    aside_point = (0.15, 0.85)
    return TaskSpec(
        template_id="open-container-then-place",
        instance_key=f"container:{color}",
        task_text=f"open the container and put the {color} block inside",
        object_tags=["lid", color],
        goal_regions=[CONTAINER_RECT + ("yellow",)],
        subtask_script=[
            Subtask("pick up the lid", _lifted("lid"),
                    {"kind": "grasp", "obj": "lid"}),
            Subtask("move the lid aside", _out_of_rect("lid", CONTAINER_RECT),
                    {"kind": "place", "obj": "lid", "point": aside_point}),
            _pick(color),
            Subtask(f"put the {color} block in the container",
                    _in_rect(color, CONTAINER_RECT),
                    {"kind": "place", "obj": color,
                     "point": _rect_center(CONTAINER_RECT)}),
        ],
        fixed_spawns={"lid": lid_start},
        spawn_exclusions={color: [CONTAINER_RECT]},
    )


TEMPLATE_BUILDERS = {
    "move-to-region": make_move_task,
    "stack": make_stack_task,
    "sort-two": make_sort_task,
    "open-container-then-place": make_container_task,
}


def make_task(template_id: str, **kwargs) -> TaskSpec:
    builder = TEMPLATE_BUILDERS.get(template_id)
    if builder is None:
        raise ValueError(f"unknown task template {template_id!r}")
    return builder(**kwargs)


def default_catalog() -> list:
    """The standard task instances used by data generation and eval."""
    return [
        make_move_task("red", "right"),
        make_move_task("green", "left"),
        make_move_task("blue", "top"),
        make_stack_task("red", "green"),
        make_sort_task("red", "right", "green", "left"),
        make_container_task("blue"),
    ]
