"""Training-example assembly and the single optimizer step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flowsteer.data.episode import Episode
from flowsteer.data.prompts import DropoutConfig, PromptContext, assemble_prompt
from flowsteer.tensor import AdamState, SplitRng, adam_step

from .config import ModelConfig
from .fast import fast_tokenize
from .model import ObsInput, PolicyModel
from .types import ActionChunk, FlowSample


def rtc_delay_condition(prev_chunk: ActionChunk, delay: int,
                        new_chunk_target: np.ndarray, max_delay: int = 4,
                        offset: int | None = None):
    """Splice the previous chunk's overlapping actions into a new target.

    The new chunk starts `offset` steps after the previous one (the executed
    prefix length), so its first `delay` rows overlap prev rows
    offset..offset+delay. Returns (target, committed_mask) where committed
    rows carry the previous chunk's actions and are excluded from the flow
    loss; at inference they are also forced into the sampled output.
    """
    target = np.array(new_chunk_target, dtype=np.float64)
    if not 0 <= delay <= max_delay:
        raise ValueError(f"delay {delay} outside [0, {max_delay}]")
    mask = np.zeros(len(target), dtype=bool)
    if delay:
        if prev_chunk is None:
            raise ValueError("delay > 0 requires a previous chunk")
        offset = len(target) // 2 if offset is None else offset
        rows = prev_chunk.values[offset:offset + delay]
        if len(rows) != delay:
            raise ValueError("previous chunk too short for requested delay")
        target[:delay] = rows
        mask[:delay] = True
    return target, mask


@dataclass
class TrainingExample:
    obs: ObsInput
    prompt: PromptContext
    target: np.ndarray         # (H, action_dim), committed rows already spliced
    committed_mask: np.ndarray  # (H,) bool


def make_training_example(episode: Episode, t: int, config: ModelConfig,
                          dropout: DropoutConfig, rng: SplitRng) -> TrainingExample:
    """One supervised example at step t with dropout and a simulated delay.

    The committed prefix uses the recorded actions at the same timesteps
    (training data has no stale chunk to splice), so the conditioning
    pathway and loss mask are exercised with self-consistent values.
    """
    prompt = assemble_prompt(episode, t, dropout, rng.split("prompt"))
    obs = ObsInput.from_episode(episode, t, config,
                                history_present=prompt.history_present,
                                rear_present=prompt.rear_present)
    h = config.chunk_len
    actions = np.stack([a for _, a in episode.steps])
    chunk = actions[t:t + h]
    if len(chunk) < h:
        chunk = np.concatenate([chunk, np.repeat(chunk[-1:], h - len(chunk), 0)])
    delay = int(rng.split("delay").integers(0, config.max_delay + 1))
    prev = ActionChunk(np.concatenate(
        [np.zeros((config.exec_len, config.action_dim)), chunk[:delay],
         np.zeros((h - config.exec_len - delay, config.action_dim))])) \
        if delay else None
    target, mask = rtc_delay_condition(prev, delay, chunk,
                                       max_delay=config.max_delay,
                                       offset=config.exec_len)
    return TrainingExample(obs=obs, prompt=prompt, target=target,
                           committed_mask=mask)


def train_step(model: PolicyModel, batch: list, adam_state: AdamState,
               rng: SplitRng, lr: float = 1e-3) -> dict:
    """One optimizer step; returns {"flow": ..., "fast": ...} mean losses.

    A non-finite loss aborts the step without touching parameters.
    """
    if not batch:
        raise ValueError("empty batch")
    cfg = model.config
    flow_terms, fast_terms = [], []
    for i, ex in enumerate(batch):
        tokens, _ = fast_tokenize(ex.target, cfg.fast_bins)
        bb = model.forward_backbone(ex.obs, ex.prompt,
                                    fast_targets=tokens.reshape(-1))
        fast_terms.append(model.fast_loss(bb))
        fs = FlowSample.draw_stratified(ex.target, rng.split("flow", i),
                                        slot=i, slots=len(batch))
        # committed rows enter the expert as clean actions, not interpolants
        fs.interpolant[ex.committed_mask] = ex.target[ex.committed_mask]
        flow_terms.append(model.flow_loss(bb, fs, ex.committed_mask))
    n = float(len(batch))
    flow_total = sum(flow_terms[1:], flow_terms[0]) * (1.0 / n)
    fast_total = sum(fast_terms[1:], fast_terms[0]) * (1.0 / n)
    losses = {"flow": float(flow_total.data), "fast": float(fast_total.data)}
    if not all(np.isfinite(v) for v in losses.values()):
        raise FloatingPointError(f"non-finite loss, step aborted: {losses}")
    model.store.zero_grad()
    (flow_total + fast_total).backward()
    adam_step(model.store.params, model.store.grads(), adam_state, lr=lr)
    return losses
