"""Grid rasterizer for arena views.

One painting rule shared by every camera: a view is the scene rasterized
over a square window, with each pixel colored by the scene test at the
pixel's center. The wrist view is the same rasterizer applied to a window
of embodiment-specific size centered on the gripper; the rear view is a
2x average-pooled global view upsampled back (deliberately low-information).
"""

from __future__ import annotations

import numpy as np

from flowsteer.data.episode import Observation

COLORS = {
    "red": (1.0, 0.15, 0.1),
    "green": (0.1, 1.0, 0.15),
    "blue": (0.2, 0.4, 1.0),
    "yellow": (1.0, 1.0, 0.2),
    "lid": (0.65, 0.65, 0.65),
}
BACKGROUND = 0.12
REGION_TINT = 0.30
GRIPPER_OPEN_COLOR = (1.0, 1.0, 1.0)
GRIPPER_CLOSED_COLOR = (1.0, 0.3, 1.0)
GRIPPER_HALF = 0.03
OBJECT_HALF = 0.04


def paint(state, window: tuple, size: int) -> np.ndarray:
    """Rasterize the scene over window=(x0, y0, extent) at size x size pixels."""
    x0, y0, extent = window
    centers = (np.arange(size) + 0.5) / size * extent
    px = x0 + centers  # columns
    py = y0 + centers  # rows
    gx, gy = np.meshgrid(px, py)  # shape (size, size): [row=y, col=x]
    img = np.zeros((size, size, 3), dtype=np.float64)

    inside = (gx >= 0) & (gx < 1) & (gy >= 0) & (gy < 1)
    img[inside] = BACKGROUND

    for (rx0, ry0, rx1, ry1, tag) in state.goal_regions:
        mask = inside & (gx >= rx0) & (gx < rx1) & (gy >= ry0) & (gy < ry1)
        img[mask] += np.array(COLORS[tag]) * REGION_TINT

    for tag, pos in state.object_poses:
        mask = (np.abs(gx - pos[0]) <= OBJECT_HALF) & \
               (np.abs(gy - pos[1]) <= OBJECT_HALF)
        img[mask] = COLORS[tag]

    gcol = GRIPPER_OPEN_COLOR if state.gripper_open else GRIPPER_CLOSED_COLOR
    mask = (np.abs(gx - state.gripper[0]) <= GRIPPER_HALF) & \
           (np.abs(gy - state.gripper[1]) <= GRIPPER_HALF)
    img[mask] = gcol

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def rear_view(global_frame: np.ndarray) -> np.ndarray:
    v = global_frame.shape[0]
    pooled = global_frame.reshape(v // 2, 2, v // 2, 2, 3).mean(axis=(1, 3))
    return np.repeat(np.repeat(pooled, 2, axis=0), 2, axis=1)


def render_observation(state, embodiment, view_size: int,
                       include_rear: bool = True) -> Observation:
    g = paint(state, (0.0, 0.0, 1.0), view_size)
    crop = embodiment.wrist_crop
    wrist_window = (state.gripper[0] - crop / 2, state.gripper[1] - crop / 2, crop)
    w = paint(state, wrist_window, view_size)
    views = {"global": g, "wrist": w}
    if include_rear:
        views["rear"] = rear_view(g)
    proprio = np.array([state.gripper[0], state.gripper[1],
                        1.0 if state.gripper_open else 0.0])
    return Observation(views=views, proprio=proprio)
