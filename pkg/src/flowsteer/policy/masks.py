"""Block-structured attention masks over the joint backbone + action sequence.

Token block order is fixed:

    [obs image] [subgoal image] [text] [proprio] [discrete action] [flow action]

Rules (True = query row may attend key column):
  * obs tokens: bidirectional within the obs block only
  * subgoal tokens: bidirectional within their block, plus the obs block
  * text / proprio / discrete-action tokens: causal over the full prefix
  * discrete-action and flow tokens never attend each other
  * flow tokens: bidirectional among themselves, plus every backbone block
    except the discrete-action block
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BLOCKS = ("obs", "goal", "text", "proprio", "fast", "flow")


@dataclass(frozen=True)
class TokenLayout:
    n_obs: int
    n_goal: int
    n_text: int
    n_proprio: int
    n_fast: int
    n_flow: int

    def __post_init__(self):
        for b in BLOCKS:
            if getattr(self, f"n_{b}") < 0:
                raise ValueError(f"negative block length n_{b}")
        if self.n_obs == 0 or self.n_text == 0:
            raise ValueError("obs and text blocks must be non-empty")

    @property
    def total(self) -> int:
        return sum(getattr(self, f"n_{b}") for b in BLOCKS)

    def slices(self) -> dict:
        out, lo = {}, 0
        for b in BLOCKS:
            n = getattr(self, f"n_{b}")
            out[b] = slice(lo, lo + n)
            lo += n
        return out

    @property
    def backbone_len(self) -> int:
        return self.total - self.n_flow

    @property
    def prefix_len(self) -> int:
        """Backbone tokens visible to flow tokens (everything before fast)."""
        return self.n_obs + self.n_goal + self.n_text + self.n_proprio


def build_attention_mask(layout: TokenLayout, goals_present: bool = True,
                         history_present: bool = True) -> np.ndarray:
    """Boolean (N, N) matrix for the full joint sequence; True = may attend."""
    if not goals_present and layout.n_goal != 0:
        raise ValueError("goal tokens present but goals_present is False")
    if goals_present and layout.n_goal == 0:
        raise ValueError("goals_present but goal block is empty")
    del history_present  # history only changes block lengths, not the rules

    s = layout.slices()
    n = layout.total
    mask = np.zeros((n, n), dtype=bool)

    mask[s["obs"], s["obs"]] = True
    mask[s["goal"], s["goal"]] = True
    mask[s["goal"], s["obs"]] = True

    causal_lo, causal_hi = s["text"].start, s["fast"].stop
    for i in range(causal_lo, causal_hi):
        mask[i, : i + 1] = True

    mask[s["flow"], : s["fast"].start] = True
    mask[s["flow"], s["flow"]] = True
    return mask
