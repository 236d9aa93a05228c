"""Chunk sampling: Euler flow integration with classifier-free guidance."""

from __future__ import annotations

import numpy as np

from flowsteer.data.prompts import PromptContext
from flowsteer.tensor import SplitRng

from .model import ObsInput, PolicyModel
from .types import ActionChunk

GUIDANCE_BETAS = (1.3, 1.7, 2.2)
DEFAULT_BETA = 1.3
DEFAULT_UNCOND_FIELDS = ("metadata",)

# The Euler state is clamped each step and the final chunk is clipped to the
# action range. The derived-velocity head divides by (1 - tau), so a bad
# prediction late in the path can fling the state far outside the band the
# model was trained on; once there, predictions are garbage and the chunk
# explodes (observed: rollout gripper commands of +-20 while demos stay in
# [-1, 1]). The clamp bounds the state to the plausible interpolant band.
EULER_CLAMP = 4.0


def sample_chunk(model: PolicyModel, obs: ObsInput, prompt: PromptContext,
                 noise_rng: SplitRng, k_steps: int | None = None,
                 beta: float = 0.0,
                 uncond_fields=DEFAULT_UNCOND_FIELDS,
                 prev_chunk: ActionChunk | None = None,
                 delay: int = 0) -> ActionChunk:
    """Generate an action chunk from noise.

    Each Euler step uses v_cond + beta * (v_cond - v_uncond); beta = 0 runs a
    single conditional pass. A non-zero `delay` freezes the first `delay`
    actions to the previous chunk's overlapping rows (real-time stitching).
    """
    cfg = model.config
    k = cfg.denoise_steps if k_steps is None else int(k_steps)
    if k < 1:
        raise ValueError("k_steps must be >= 1")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    uncond_fields = tuple(uncond_fields)
    if beta > 0 and not uncond_fields:
        raise ValueError("guidance needs at least one unconditioned field")
    if not 0 <= delay <= cfg.max_delay:
        raise ValueError(f"delay {delay} outside [0, {cfg.max_delay}]")
    if delay and prev_chunk is None:
        raise ValueError("delay > 0 requires the previous chunk")

    committed = None
    flags = np.zeros(cfg.chunk_len)
    if delay:
        committed = prev_chunk.values[cfg.exec_len:cfg.exec_len + delay]
        if len(committed) != delay:
            raise ValueError("previous chunk too short for requested delay")
        flags[:delay] = 1.0

    bb_cond = model.forward_backbone(obs, prompt)
    bb_uncond = None
    if beta > 0:
        bb_uncond = model.forward_backbone(obs, prompt.without(uncond_fields))

    a = noise_rng.normal(size=(cfg.chunk_len, cfg.action_dim))
    for s in range(k):
        if committed is not None:
            a[:delay] = committed
        tau = s / k
        v_cond = model.velocity(bb_cond, a, flags, tau).data.astype(np.float64)
        if beta > 0:
            v_uncond = model.velocity(bb_uncond, a, flags, tau).data.astype(
                np.float64)
            v = v_cond + beta * (v_cond - v_uncond)
            check = (1.0 + beta) * v_cond - beta * v_uncond
            if not np.allclose(v, check, rtol=1e-6, atol=1e-7):
                raise AssertionError("guided velocity inconsistent")
        else:
            v = v_cond
        a = np.clip(a + v / k, -EULER_CLAMP, EULER_CLAMP)
    a = np.clip(a, *ACTION_RANGE)
    if committed is not None:
        a[:delay] = committed
    return ActionChunk(values=a, committed_prefix_len=delay)
