from .world import (
    EMBODIMENTS, EmbodimentSpec, SimEnv, WorldState, body_to_world,
    score_progress, world_to_body,
)
from .render import paint, render_observation, rear_view
from .tasks import (
    REGION_RECTS, Subtask, TaskSpec, default_catalog, make_container_task,
    make_move_task, make_sort_task, make_stack_task, make_task,
)
from .scripted import ScriptedController, demo_step_cap, scripted_demo

__all__ = [
    "EMBODIMENTS", "EmbodimentSpec", "SimEnv", "WorldState", "body_to_world",
    "score_progress", "world_to_body", "paint", "render_observation",
    "rear_view", "REGION_RECTS", "Subtask", "TaskSpec", "default_catalog",
    "make_container_task", "make_move_task", "make_sort_task",
    "make_stack_task", "make_task", "ScriptedController", "demo_step_cap",
    "scripted_demo",
]
