"""Subgoal image generator.

A small flow-matching transformer that denoises future frames conditioned on
the current frames, the subtask text, and episode metadata. Frames live in
[0, 1]; internally they are mapped to [-1, 1] and the generated output is
squashed back by clipping.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from flowsteer.data.episode import Episode, EpisodeMetadata
from flowsteer.data.manifest import is_high_quality
from flowsteer.data.prompts import SUBGOAL_VIEWS
from flowsteer.tensor import (
    AdamState, ParamStore, SplitRng, Tensor, adam_step, adaptive_rms_norm,
    concat, default_dtype, embedding, load_checkpoint, masked_attention, mse,
    save_checkpoint, sinusoidal_embedding,
)
from flowsteer.policy.model import _patchify
from flowsteer.policy.text import MAX_TEXT_TOKENS, UNK_ID, VOCAB, encode_text

_ROLES = {"cur_global": 0, "cur_wrist": 1, "tgt_global": 2, "tgt_wrist": 3}


@dataclass
class WorldModelConfig:
    d_model: int = 96
    layers: int = 3
    patch: int = 4
    denoise_steps: int = 8
    cfg_beta_text: float = 1.0
    p_text_drop: float = 0.1
    view_size: int = 24
    heads: int = 4
    mlp_mult: int = 4

    def __post_init__(self):
        if self.view_size % self.patch != 0:
            raise ValueError("patch must divide view_size")
        if self.d_model % self.heads != 0:
            raise ValueError("heads must divide d_model")

    @property
    def tokens_per_frame(self) -> int:
        side = self.view_size // self.patch
        return side * side

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @staticmethod
    def load(path) -> "WorldModelConfig":
        return WorldModelConfig(**json.loads(Path(path).read_text()))


@dataclass
class SubgoalBatch:
    """One supervised pair: frames now, frames at the enclosing segment end."""
    current_frames: dict
    subtask_text: str
    metadata: EpisodeMetadata
    target_frames: dict


def render_condition(subtask_text: str | None, metadata: EpisodeMetadata) -> str:
    parts = []
    if subtask_text is not None:
        parts.append(f"Subtask: {subtask_text}.")
    parts += [f"Speed: {metadata.speed_label}.", f"Quality: {metadata.quality}.",
              f"Mistake: {'true' if metadata.mistake else 'false'}."]
    return " ".join(parts)


def collect_subgoal_examples(episodes: list, rng: SplitRng,
                             per_segment: int = 2) -> list:
    """Draw (current, segment-end) frame pairs from high-quality episodes.

    Every input episode must carry the high-quality flag; mixed-provenance
    callers filter on the manifest column first.
    """
    examples = []
    for ep in episodes:
        if not is_high_quality(ep):
            raise ValueError(
                f"episode {ep.episode_id} is not flagged high-quality")
        for si, seg in enumerate(ep.segments):
            end = seg.end - 1
            tgt = {v: ep.steps[end][0].views[v] for v in SUBGOAL_VIEWS}
            ts = rng.split(ep.episode_id, si).integers(seg.start, seg.end,
                                                       size=per_segment)
            for t in ts:
                cur = {v: ep.steps[int(t)][0].views[v] for v in SUBGOAL_VIEWS}
                examples.append(SubgoalBatch(cur, seg.subtask_text,
                                             ep.metadata, tgt))
    return examples


def _unpatchify(patches: np.ndarray, view_size: int, patch: int) -> np.ndarray:
    side = view_size // patch
    x = patches.reshape(side, side, patch, patch, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(view_size, view_size, 3)


class WorldModel:
    def __init__(self, config: WorldModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.store = ParamStore(SplitRng(seed).split("worldmodel"))

    def _ada(self, prefix: str, x: Tensor, cond: Tensor) -> Tensor:
        d = self.config.d_model
        return adaptive_rms_norm(x, self.store.linear(f"{prefix}.scale", cond, d),
                                 self.store.linear(f"{prefix}.shift", cond, d))

    def _frame_tokens(self, frame, role: str, proj: str) -> Tensor:
        cfg = self.config
        d = cfg.d_model
        data = np.asarray(frame, dtype=default_dtype())
        x = self.store.linear(proj, Tensor(_patchify(data, cfg.patch)), d)
        x = x + self.store.get("wm.patch_pos", (cfg.tokens_per_frame, d),
                               "normal", scale=0.02)
        role_emb = self.store.get("wm.role_emb", (len(_ROLES), d), "normal",
                                  scale=0.02)
        return x + role_emb[_ROLES[role]]

    def velocity(self, current_frames: dict, text_ids: np.ndarray,
                 noisy: dict, tau: float) -> dict:
        """Predicted frame velocity for each subgoal view, as Tensors.

        The head predicts the clean target frame and the velocity is derived
        as (predicted_target - interpolant) / (1 - tau), which equals the
        (target - noise) supervision exactly when the prediction is exact.
        """
        if tau >= 0.999:
            raise ValueError("tau must stay below 1 for the derived velocity")
        cfg = self.config
        d = cfg.d_model
        tok_emb = self.store.get("wm.tok_emb", (len(VOCAB), d), "normal",
                                 scale=0.02)
        text_pos = self.store.get("wm.text_pos", (MAX_TEXT_TOKENS, d),
                                  "normal", scale=0.02)
        ids = np.asarray(text_ids, dtype=np.int64)
        blocks = [embedding(tok_emb, ids) + embedding(text_pos,
                                                      np.arange(len(ids)))]
        views = [v for v in SUBGOAL_VIEWS if v in current_frames]
        for v in views:
            blocks.append(self._frame_tokens(
                np.asarray(current_frames[v], dtype=default_dtype()) * 2.0 - 1.0,
                f"cur_{v}", "wm.patch"))
        tgt_start = len(ids) + len(views) * cfg.tokens_per_frame
        for v in views:
            blocks.append(self._frame_tokens(noisy[v], f"tgt_{v}",
                                             "wm.noisy_patch"))
        x = concat(blocks, axis=0)
        cond = self.store.linear(
            "wm.tau", Tensor(sinusoidal_embedding(tau, d)), d).tanh()
        for i in range(cfg.layers):
            pre = f"wm.l{i}"
            h = self._ada(f"{pre}.ada1", x, cond)
            n = h.shape[0]
            dh = d // cfg.heads
            q = self.store.linear(f"{pre}.q", h, d).reshape(n, cfg.heads, dh)
            k = self.store.linear(f"{pre}.k", h, d).reshape(n, cfg.heads, dh)
            v_ = self.store.linear(f"{pre}.v", h, d).reshape(n, cfg.heads, dh)
            att = masked_attention(q.swapaxes(0, 1), k.swapaxes(0, 1),
                                   v_.swapaxes(0, 1))
            x = x + self.store.linear(f"{pre}.o",
                                      att.swapaxes(0, 1).reshape(n, d), d)
            h = self._ada(f"{pre}.ada2", x, cond)
            h = self.store.linear(f"{pre}.up", h, d * cfg.mlp_mult).silu()
            x = x + self.store.linear(f"{pre}.down", h, d)
        x = self._ada("wm.ada_out", x, cond)
        out = {}
        p = cfg.tokens_per_frame
        inv = 1.0 / (1.0 - tau)
        for j, v in enumerate(views):
            sl = slice(tgt_start + j * p, tgt_start + (j + 1) * p)
            x1_pred = self.store.linear("wm.head", x[sl],
                                        cfg.patch * cfg.patch * 3)
            noisy_p = Tensor(_patchify(
                np.asarray(noisy[v], dtype=default_dtype()), cfg.patch))
            out[v] = (x1_pred - noisy_p) * inv
        return out


def maybe_drop_text(subtask_text: str, p_text_drop: float,
                    rng: SplitRng) -> str | None:
    """Training-time subtask-text dropout; enables text CFG at generation."""
    return None if rng.random() < p_text_drop else subtask_text


def wm_train_step(model: WorldModel, batch: list, adam_state: AdamState,
                  rng: SplitRng, lr: float = 1e-3) -> float:
    """One optimizer step of the frame flow-matching loss; returns the loss."""
    if not batch:
        raise ValueError("empty batch")
    cfg = model.config
    terms = []
    for i, ex in enumerate(batch):
        r = rng.split("ex", i)
        subtask = maybe_drop_text(ex.subtask_text, cfg.p_text_drop, r)
        ids = encode_text(render_condition(subtask, ex.metadata))
        # tau capped below 1: the derived-velocity factor 1/(1-tau) must stay
        # bounded, and the sampler never evaluates beyond (k-1)/k
        tau = float(r.uniform(0.0, 0.9))
        noisy, targets = {}, {}
        for v in SUBGOAL_VIEWS:
            x1 = np.asarray(ex.target_frames[v], dtype=np.float64) * 2.0 - 1.0
            x0 = r.normal(size=x1.shape)
            noisy[v] = tau * x1 + (1.0 - tau) * x0
            targets[v] = _patchify((x1 - x0).astype(default_dtype()), cfg.patch)
        pred = model.velocity(ex.current_frames, ids, noisy, tau)
        for v in SUBGOAL_VIEWS:
            terms.append(mse(pred[v], targets[v]))
    total = sum(terms[1:], terms[0]) * (1.0 / len(terms))
    loss = float(total.data)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite world-model loss {loss}")
    model.store.zero_grad()
    total.backward()
    adam_step(model.store.params, model.store.grads(), adam_state, lr=lr)
    return loss


def generate_subgoal(model: WorldModel, current_frames: dict,
                     subtask_text: str, metadata: EpisodeMetadata, seed: int,
                     beta: float | None = None, k_steps: int | None = None):
    """Sample subgoal frames; returns ({view: frame}, diagnostics).

    Deterministic given the seed. Unknown subtask words are carried as
    unknown tokens and reported in the diagnostics, never rejected.
    """
    cfg = model.config
    k = cfg.denoise_steps if k_steps is None else int(k_steps)
    beta = cfg.cfg_beta_text if beta is None else float(beta)
    ids_cond = encode_text(render_condition(subtask_text, metadata))
    ids_uncond = encode_text(render_condition(None, metadata))
    n_unknown = sum(1 for t in ids_cond if t == UNK_ID)
    rng = SplitRng(seed).split("subgoal")
    views = [v for v in SUBGOAL_VIEWS if v in current_frames]
    x = {v: rng.normal(size=(cfg.view_size, cfg.view_size, 3)) for v in views}
    for s in range(k):
        tau = s / k
        v_cond = model.velocity(current_frames, ids_cond, x, tau)
        if beta > 0:
            v_uncond = model.velocity(current_frames, ids_uncond, x, tau)
        for v in views:
            vc = _unpatchify(np.asarray(v_cond[v].data, dtype=np.float64),
                             cfg.view_size, cfg.patch)
            if beta > 0:
                vu = _unpatchify(np.asarray(v_uncond[v].data, dtype=np.float64),
                                 cfg.view_size, cfg.patch)
                vel = vc + beta * (vc - vu)
            else:
                vel = vc
            x[v] = x[v] + vel / k
    frames = {v: np.clip((x[v] + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)
              for v in views}
    return frames, {"unknown_tokens": n_unknown}


def save_world_model(path, model: WorldModel) -> None:
    save_checkpoint(path, model.store.params,
                    extra={"config": asdict(model.config), "seed": model.seed})


def load_world_model(path) -> WorldModel:
    tensors, extra = load_checkpoint(path)
    model = WorldModel(WorldModelConfig(**extra["config"]), seed=extra["seed"])
    model.store.load(tensors)
    return model
