"""Action-chunk and flow-sample containers shared by training and sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from flowsteer.tensor.rng import SplitRng


@dataclass
class ActionChunk:
    """H consecutive actions plus the length of the immutable committed prefix."""
    values: np.ndarray  # (H, action_dim)
    committed_prefix_len: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("chunk must be (H, action_dim)")
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite actions in chunk")
        if not 0 <= self.committed_prefix_len <= len(self.values):
            raise ValueError("committed prefix outside [0, H]")
        self.values.setflags(write=False)

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class FlowSample:
    """One draw of the linear-interpolant flow path for a target chunk."""
    tau: float
    noise: np.ndarray
    interpolant: np.ndarray       # tau * target + (1 - tau) * noise
    velocity_target: np.ndarray   # target - noise

    # training never samples tau above this: the expert's derived-velocity
    # factor 1/(1 - tau) stays bounded, and the Euler sampler with k steps
    # only ever evaluates tau up to (k - 1) / k
    TAU_MAX = 0.9

    @staticmethod
    def draw(target: np.ndarray, rng: SplitRng) -> "FlowSample":
        target = np.asarray(target, dtype=np.float64)
        tau = float(rng.uniform()) * FlowSample.TAU_MAX
        noise = rng.normal(size=target.shape)
        return FlowSample(tau=tau, noise=noise,
                          interpolant=tau * target + (1.0 - tau) * noise,
                          velocity_target=target - noise)

    @staticmethod
    def draw_stratified(target: np.ndarray, rng: SplitRng, slot: int,
                        slots: int) -> "FlowSample":
        """Like draw, but tau falls in the slot-th of `slots` equal strata.

        Batches that stratify tau across examples cover the whole flow path
        every step, cutting the variance of the per-step gradient.
        """
        if not 0 <= slot < slots:
            raise ValueError("slot outside [0, slots)")
        target = np.asarray(target, dtype=np.float64)
        tau = (slot + float(rng.uniform())) / slots * FlowSample.TAU_MAX
        noise = rng.normal(size=target.shape)
        return FlowSample(tau=tau, noise=noise,
                          interpolant=tau * target + (1.0 - tau) * noise,
                          velocity_target=target - noise)
