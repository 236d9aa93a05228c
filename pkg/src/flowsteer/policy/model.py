"""The action policy network.

Backbone: block-masked transformer over [obs | subgoal | text | proprio |
discrete-action] tokens, with history frames compressed per patch so the
token count matches a single frame. The discrete-action head is the only
supervision path into the backbone.

Expert: a small flow-matching transformer over H action tokens that
cross-attends gradient-stopped backbone activations and injects the flow
time through adaptive RMS normalization.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from flowsteer.data.episode import Episode
from flowsteer.data.prompts import SUBGOAL_VIEWS, PromptContext
from flowsteer.tensor import (
    ParamStore, SplitRng, Tensor, adaptive_rms_norm, concat, cross_entropy,
    default_dtype, embedding, load_checkpoint, masked_attention, mse,
    rms_norm, save_checkpoint, sinusoidal_embedding, stop_gradient,
)

from .config import ModelConfig
from .fast import fast_tokenize
from .masks import TokenLayout, build_attention_mask
from .text import encode_prompt

VIEW_ROLES = {"global": 0, "wrist": 1, "rear": 2, "goal_global": 3, "goal_wrist": 4}
OBS_VIEW_ORDER = ("global", "wrist", "rear")
FAST_BOS = -1  # sentinel replaced by the dedicated start-of-sequence embedding


@dataclass
class ObsInput:
    """Per-view frame history (oldest..newest) plus proprio history."""
    frames: dict
    proprio: np.ndarray

    def __post_init__(self):
        self.proprio = np.atleast_2d(np.asarray(self.proprio, dtype=np.float64))
        t = len(self.proprio)
        for view, fs in self.frames.items():
            if len(fs) == 0:
                raise ValueError(f"no frames for view {view!r}")
            if len(fs) != t:
                raise ValueError(f"view {view!r} has {len(fs)} frames, "
                                 f"proprio has {t}")

    @property
    def history_len(self) -> int:
        return len(self.proprio)

    @staticmethod
    def from_episode(episode: Episode, t: int, cfg: ModelConfig,
                     history_present: bool = True,
                     rear_present: bool = True) -> "ObsInput":
        if history_present:
            idxs = [t - s * cfg.history_stride for s in range(cfg.max_history)]
            idxs = sorted(i for i in idxs if i >= 0)
        else:
            idxs = [t]
        views = [v for v in OBS_VIEW_ORDER
                 if v in episode.steps[t][0].views
                 and (v != "rear" or rear_present)]
        frames = {v: [episode.steps[i][0].views[v] for i in idxs] for v in views}
        proprio = np.stack([episode.steps[i][0].proprio for i in idxs])
        return ObsInput(frames=frames, proprio=proprio)


@dataclass
class BackboneOutput:
    activations: list          # post-residual output of each backbone layer
    layout: TokenLayout
    fast_logits: Tensor | None
    fast_targets: np.ndarray | None


def _patchify(frame: np.ndarray, patch: int) -> np.ndarray:
    v = frame.shape[0]
    side = v // patch
    x = np.asarray(frame, dtype=default_dtype())
    x = x.reshape(side, patch, side, patch, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(side * side, patch * patch * 3)


class PolicyModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.d_backbone % config.heads or config.d_expert % config.heads:
            raise ValueError("heads must divide d_backbone and d_expert")
        self.config = config
        self.seed = seed
        self.store = ParamStore(SplitRng(seed).split("policy"))

    # -- parameter groups -----------------------------------------------------

    def params(self) -> dict:
        return self.store.params

    def backbone_params(self) -> dict:
        return {k: v for k, v in self.store.params.items()
                if k.startswith("backbone.")}

    def expert_params(self) -> dict:
        return {k: v for k, v in self.store.params.items()
                if k.startswith("expert.")}

    # -- shared building blocks -----------------------------------------------

    def _mha(self, prefix: str, x: Tensor, kv: Tensor, heads: int,
             mask: np.ndarray | None) -> Tensor:
        n, d = x.shape
        m = kv.shape[0]
        q = self.store.linear(f"{prefix}.q", x, d)
        k = self.store.linear(f"{prefix}.k", kv, d)
        v = self.store.linear(f"{prefix}.v", kv, d)
        dh = d // heads
        q = q.reshape(n, heads, dh).swapaxes(0, 1)
        k = k.reshape(m, heads, dh).swapaxes(0, 1)
        v = v.reshape(m, heads, dh).swapaxes(0, 1)
        out = masked_attention(q, k, v, mask)
        out = out.swapaxes(0, 1).reshape(n, d)
        return self.store.linear(f"{prefix}.o", out, d)

    def _mlp(self, prefix: str, x: Tensor, d: int) -> Tensor:
        h = self.store.linear(f"{prefix}.up", x, d * self.config.mlp_mult).silu()
        return self.store.linear(f"{prefix}.down", h, d)

    def _frame_tokens(self, frame: np.ndarray, role: str) -> Tensor:
        cfg = self.config
        patches = _patchify(frame, cfg.patch)
        x = self.store.linear("backbone.patch", Tensor(patches), cfg.d_backbone)
        x = x + self.store.get("backbone.patch_pos",
                               (cfg.tokens_per_frame, cfg.d_backbone), "normal",
                               scale=0.02)
        role_emb = self.store.get("backbone.view_emb",
                                  (len(VIEW_ROLES), cfg.d_backbone), "normal",
                                  scale=0.02)
        return x + embedding(role_emb, np.full(cfg.tokens_per_frame,
                                               VIEW_ROLES[role]))

    # -- history compression --------------------------------------------------

    def encode_history(self, obs: ObsInput):
        """Compress per-view frame history to single-frame token counts.

        Per patch position, an attention pool over time with the newest
        frame as query; output token count is independent of history length.
        Proprio states each become one token (linear embedding + age tag).
        """
        cfg = self.config
        d = cfg.d_backbone
        t_hist = obs.history_len
        if t_hist > cfg.max_history:
            raise ValueError("history longer than max_history")
        time_emb = self.store.get("backbone.hist_time_emb",
                                  (cfg.max_history, d), "normal", scale=0.02)
        view_tokens = []
        for view in OBS_VIEW_ORDER:
            if view not in obs.frames:
                continue
            per_t = [self._frame_tokens(f, view) for f in obs.frames[view]]
            ages = np.arange(t_hist)[::-1]  # newest frame has age 0
            keyed = [per_t[i] + time_emb[int(ages[i])] for i in range(t_hist)]
            q = self.store.linear("backbone.hist_q", keyed[-1], d, bias=False)
            k = self.store.linear("backbone.hist_k",
                                  concat(keyed, axis=0).reshape(t_hist, -1, d), d,
                                  bias=False)
            v = self.store.linear("backbone.hist_v",
                                  concat(per_t, axis=0).reshape(t_hist, -1, d), d,
                                  bias=False)
            # per-patch attention over time: (P, 1, d) x (P, T, d)
            q = q.reshape(-1, 1, d)
            k = k.swapaxes(0, 1)
            v = v.swapaxes(0, 1)
            pooled = masked_attention(q, k, v).reshape(-1, d)
            view_tokens.append(self.store.linear("backbone.hist_o", pooled, d))
        obs_tokens = concat(view_tokens, axis=0)

        ages = np.arange(t_hist)[::-1]
        p = self.store.linear("backbone.proprio", Tensor(
            np.asarray(obs.proprio, dtype=default_dtype())), d)
        proprio_tokens = p + embedding(time_emb, ages)
        return obs_tokens, proprio_tokens

    # -- backbone -------------------------------------------------------------

    def forward_backbone(self, obs: ObsInput, prompt: PromptContext,
                         fast_targets: np.ndarray | None = None) -> BackboneOutput:
        cfg = self.config
        d = cfg.d_backbone
        obs_tokens, proprio_tokens = self.encode_history(obs)

        goal_tokens = None
        if prompt.has_subgoal:
            parts = [self._frame_tokens(prompt.subgoal_frames[v], f"goal_{v}")
                     for v in SUBGOAL_VIEWS if v in prompt.subgoal_frames]
            goal_tokens = concat(parts, axis=0)

        ids = np.asarray(encode_prompt(prompt), dtype=np.int64)
        from .text import MAX_TEXT_TOKENS, VOCAB
        tok_emb = self.store.get("backbone.tok_emb", (len(VOCAB), d), "normal",
                                 scale=0.02)
        text_pos = self.store.get("backbone.text_pos", (MAX_TEXT_TOKENS, d),
                                  "normal", scale=0.02)
        text_tokens = embedding(tok_emb, ids) + embedding(text_pos,
                                                          np.arange(len(ids)))

        fast_tokens = None
        if fast_targets is not None:
            fast_targets = np.asarray(fast_targets, dtype=np.int64).reshape(-1)
            n_fast = cfg.chunk_len * cfg.action_dim
            if fast_targets.size != n_fast:
                raise ValueError("fast target length mismatch")
            fast_emb = self.store.get("backbone.fast_emb",
                                      (cfg.fast_bins + 1, d), "normal", scale=0.02)
            fast_pos = self.store.get("backbone.fast_pos", (n_fast, d),
                                      "normal", scale=0.02)
            inputs = np.concatenate([[cfg.fast_bins], fast_targets[:-1]])
            fast_tokens = embedding(fast_emb, inputs) + embedding(
                fast_pos, np.arange(n_fast))

        layout = TokenLayout(
            n_obs=obs_tokens.shape[0],
            n_goal=0 if goal_tokens is None else goal_tokens.shape[0],
            n_text=len(ids), n_proprio=proprio_tokens.shape[0],
            n_fast=0 if fast_tokens is None else fast_tokens.shape[0],
            n_flow=0)
        blocks = [obs_tokens]
        if goal_tokens is not None:
            blocks.append(goal_tokens)
        blocks += [text_tokens, proprio_tokens]
        if fast_tokens is not None:
            blocks.append(fast_tokens)
        x = concat(blocks, axis=0)
        mask = build_attention_mask(layout, goals_present=prompt.has_subgoal)

        activations = []
        for i in range(cfg.layers_backbone):
            pre = f"backbone.l{i}"
            g1 = self.store.get(f"{pre}.norm1", (d,), "ones")
            x = x + self._mha(f"{pre}.attn", rms_norm(x, g1),
                              rms_norm(x, g1), cfg.heads, mask)
            g2 = self.store.get(f"{pre}.norm2", (d,), "ones")
            x = x + self._mlp(f"{pre}.mlp", rms_norm(x, g2), d)
            activations.append(x)

        fast_logits = None
        if fast_tokens is not None:
            final = rms_norm(x, self.store.get("backbone.final_norm", (d,), "ones"))
            fast_slice = layout.slices()["fast"]
            fast_logits = self.store.linear("backbone.fast_head",
                                            final[fast_slice], cfg.fast_bins)
        return BackboneOutput(activations=activations, layout=layout,
                              fast_logits=fast_logits, fast_targets=fast_targets)

    # Early chunk rows get extra cross-entropy weight: with teacher forcing,
    # later tokens are mostly smooth continuations of the given prefix and
    # carry almost no pressure to consult the observation, so an unweighted
    # mean lets the trunk skip perception entirely. The opening rows can only
    # be predicted by looking at the scene.
    FAST_ROW_BOOST = 7.0
    FAST_ROW_DECAY = 0.5

    def fast_loss(self, bb: BackboneOutput) -> Tensor:
        if bb.fast_logits is None:
            raise ValueError("backbone was run without discrete-action targets")
        cfg = self.config
        rows = np.arange(bb.fast_targets.size) // cfg.action_dim
        weights = 1.0 + self.FAST_ROW_BOOST * self.FAST_ROW_DECAY ** rows
        return cross_entropy(bb.fast_logits, bb.fast_targets, weights=weights)

    # -- flow expert ----------------------------------------------------------

    def _paired_activation(self, bb: BackboneOutput, expert_layer: int) -> Tensor:
        idx = (expert_layer + 1) * self.config.layers_backbone \
            // self.config.layers_expert - 1
        act = bb.activations[idx]
        # the expert may never see the discrete-action block, and must never
        # push gradient into the backbone
        return stop_gradient(act[: bb.layout.prefix_len])

    def _ada(self, prefix: str, x: Tensor, cond: Tensor) -> Tensor:
        de = self.config.d_expert
        scale = self.store.linear(f"{prefix}.scale", cond, de)
        shift = self.store.linear(f"{prefix}.shift", cond, de)
        return adaptive_rms_norm(x, scale, shift)

    def velocity(self, bb: BackboneOutput, interpolant: np.ndarray,
                 committed_flags: np.ndarray, tau: float) -> Tensor:
        cfg = self.config
        de = cfg.d_expert
        if tau >= 0.999:
            raise ValueError("tau too close to 1 for the derived velocity")
        interpolant = np.asarray(interpolant, dtype=default_dtype())
        if interpolant.shape != (cfg.chunk_len, cfg.action_dim):
            raise ValueError("interpolant must be (chunk_len, action_dim)")
        flags = np.asarray(committed_flags, dtype=default_dtype()).reshape(-1, 1)
        inp = Tensor(np.concatenate([interpolant, flags], axis=1))

        # noise-free plan stream: static row tokens cross-attend the prefix
        # and are injected additively. The flow stream's own attention
        # queries carry interpolant noise, which at low tau makes its prefix
        # readout unreliable — exactly where conditioning matters most. The
        # discrete-action pathway learns perception precisely because its
        # queries are static; this stream gives the expert the same property.
        plan = self.store.get("expert.plan_pos", (cfg.chunk_len, de),
                              "normal", scale=0.02)
        for i in range(cfg.layers_expert):
            pre = f"expert.plan{i}"
            g0 = self.store.get(f"{pre}.norm0", (de,), "ones")
            plan = plan + self._mha(f"{pre}.self", rms_norm(plan, g0),
                                    rms_norm(plan, g0), cfg.heads, None)
            g = self.store.get(f"{pre}.norm1", (de,), "ones")
            kv = self.store.linear(f"{pre}.kv_proj",
                                   self._paired_activation(bb, i), de)
            plan = plan + self._mha(f"{pre}.cross", rms_norm(plan, g), kv,
                                    cfg.heads, None)
            g2 = self.store.get(f"{pre}.norm2", (de,), "ones")
            plan = plan + self._mlp(f"{pre}.mlp", rms_norm(plan, g2), de)

        x = self.store.linear("expert.in", inp, de) + plan
        x = x + self.store.get("expert.flow_pos", (cfg.chunk_len, de),
                               "normal", scale=0.02)
        # conditioning vector: flow time plus a pooled scene summary. The
        # cross-attention alone reads raw prefix activations, which encode
        # local patch content; the pooled summary gives every adaptive norm
        # a global view of the scene so the clean-chunk regression does not
        # have to be rediscovered through two thin attention layers.
        pooled = bb.activations[-1].data[: bb.layout.prefix_len].mean(axis=0)
        pooled = pooled / (np.sqrt((pooled ** 2).mean()) + 1e-8)
        cond = self.store.linear(
            "expert.tau", Tensor(sinusoidal_embedding(tau, de)), de).tanh() \
            + self.store.linear("expert.summary",
                                Tensor(pooled.reshape(1, -1)), de)
        for i in range(cfg.layers_expert):
            pre = f"expert.l{i}"
            h = self._ada(f"{pre}.ada1", x, cond)
            x = x + self._mha(f"{pre}.attn", h, h, cfg.heads, None)
            kv = self.store.linear(f"{pre}.kv_proj",
                                   self._paired_activation(bb, i), de)
            x = x + self._mha(f"{pre}.cross", self._ada(f"{pre}.ada2", x, cond),
                              kv, cfg.heads, None)
            x = x + self._mlp(f"{pre}.mlp", self._ada(f"{pre}.ada3", x, cond), de)
        x = self._ada("expert.ada_out", x, cond)
        # the head predicts the clean chunk; velocity is derived from it.
        # Direct velocity regression fits poorly near tau=1, where the target
        # (clean - noisy)/(1 - tau) demands sharp tau-dependence.
        # The plan stream also feeds the head directly: at low tau the flow
        # stream is noise-dominated, and without the skip every perception
        # gradient would have to thread through those noisy layers.
        clean_pred = self.store.linear("expert.out", x, cfg.action_dim) \
            + self.store.linear("expert.plan_out", plan, cfg.action_dim)
        return (clean_pred - Tensor(interpolant)) * (1.0 / (1.0 - tau))

    def flow_loss(self, bb: BackboneOutput, flow_sample, committed_mask) -> Tensor:
        """Velocity-matching MSE with committed rows excluded from the loss.

        The residual is scaled by (1 - tau). With the derived-velocity head
        this makes the loss exactly the clean-chunk prediction error,
        weighting every tau draw equally; the unscaled velocity MSE would
        weight a tau=0.9 draw 100x more than tau=0, starving the low-tau
        regime where the sampler starts and conditioning matters most.
        """
        mask = np.asarray(committed_mask, dtype=bool).reshape(-1, 1)
        v = self.velocity(bb, flow_sample.interpolant,
                          mask.astype(np.float64).reshape(-1), flow_sample.tau)
        resid = (v - Tensor(flow_sample.velocity_target.astype(
            default_dtype()))) * (1.0 - flow_sample.tau)
        return mse(resid, np.zeros_like(flow_sample.velocity_target,
                                        dtype=default_dtype()),
                   weights=(~mask).astype(np.float64))


def save_policy(path, model: PolicyModel) -> None:
    save_checkpoint(path, model.store.params,
                    extra={"config": asdict(model.config), "seed": model.seed})


def load_policy(path) -> PolicyModel:
    tensors, extra = load_checkpoint(path)
    model = PolicyModel(ModelConfig(**extra["config"]), seed=extra["seed"])
    model.store.load(tensors)
    return model
