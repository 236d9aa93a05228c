"""Next-subtask prediction over a closed vocabulary.

A small transformer over [obs-frame tokens][text tokens] (task text plus the
recent instruction history) with a classification head; "done" is a reserved
vocabulary element marking task completion. Trainable directly from recorded
coaching sessions.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from flowsteer.data.episode import Episode, InstructionEvent
from flowsteer.policy.masks import TokenLayout, build_attention_mask
from flowsteer.policy.model import _patchify
from flowsteer.policy.text import MAX_TEXT_TOKENS, VOCAB, encode_text
from flowsteer.tensor import (
    AdamState, ParamStore, SplitRng, Tensor, adam_step, concat, cross_entropy,
    default_dtype, embedding, load_checkpoint, masked_attention, rms_norm,
    save_checkpoint,
)

DONE = "done"
_HL_VIEWS = ("global", "wrist")
_HISTORY_WINDOW = 3  # most recent instructions kept in the text context


@dataclass
class SubtaskVocabulary:
    """Closed, stably-ordered set of subtask strings plus the "done" token."""
    entries: list

    def __post_init__(self):
        if not self.entries:
            raise ValueError("empty subtask vocabulary")
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("duplicate vocabulary entries")
        if DONE not in self.entries:
            raise ValueError('vocabulary must contain the reserved "done" token')

    def index(self, text: str) -> int:
        return self.entries.index(text)

    def __len__(self) -> int:
        return len(self.entries)


def build_vocabulary(subtask_texts) -> SubtaskVocabulary:
    uniq = sorted(set(subtask_texts) - {DONE})
    return SubtaskVocabulary(uniq + [DONE])


@dataclass
class CoachingLog:
    """One coached session: instruction events plus the final outcome."""
    episode: Episode
    events: list = field(default_factory=list)
    outcome: float = 0.0

    def __post_init__(self):
        steps = [e.step_index for e in self.events]
        if steps != sorted(set(steps)):
            raise ValueError("instruction events must be strictly increasing")

    @staticmethod
    def from_episode(ep: Episode) -> "CoachingLog":
        events = list(ep.instruction_events)
        if not events:  # demos carry segments instead of typed instructions
            events = [InstructionEvent(s.start, s.subtask_text)
                      for s in ep.segments]
        return CoachingLog(episode=ep, events=events, outcome=ep.final_progress)


@dataclass
class HighLevelConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    patch: int = 4
    view_size: int = 24
    mlp_mult: int = 4

    def __post_init__(self):
        if self.view_size % self.patch or self.d_model % self.heads:
            raise ValueError("invalid high-level config")

    @property
    def tokens_per_frame(self) -> int:
        side = self.view_size // self.patch
        return side * side

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @staticmethod
    def load(path) -> "HighLevelConfig":
        return HighLevelConfig(**json.loads(Path(path).read_text()))


def _context_text(task_text: str, history) -> str:
    parts = [f"Task: {task_text}."]
    parts += [f"Subtask: {h}." for h in list(history)[-_HISTORY_WINDOW:]]
    return " ".join(parts)


class HighLevelPolicy:
    def __init__(self, config: HighLevelConfig, vocab: SubtaskVocabulary,
                 seed: int = 0):
        self.config = config
        self.vocab = vocab
        self.seed = seed
        self.store = ParamStore(SplitRng(seed).split("highlevel"))
        self.last_latency_s: float | None = None

    def logits(self, obs_frames: dict, task_text: str, history) -> Tensor:
        cfg = self.config
        d = cfg.d_model
        blocks = []
        for i, view in enumerate(_HL_VIEWS):
            patches = _patchify(np.asarray(obs_frames[view],
                                           dtype=default_dtype()), cfg.patch)
            x = self.store.linear("hl.patch", Tensor(patches), d)
            x = x + self.store.get("hl.patch_pos", (cfg.tokens_per_frame, d),
                                   "normal", scale=0.02)
            view_emb = self.store.get("hl.view_emb", (len(_HL_VIEWS), d),
                                      "normal", scale=0.02)
            blocks.append(x + view_emb[i])
        ids = np.asarray(encode_text(_context_text(task_text, history)))
        tok = self.store.get("hl.tok_emb", (len(VOCAB), d), "normal", scale=0.02)
        pos = self.store.get("hl.text_pos", (MAX_TEXT_TOKENS, d), "normal",
                             scale=0.02)
        blocks.append(embedding(tok, ids) + embedding(pos, np.arange(len(ids))))
        x = concat(blocks, axis=0)
        layout = TokenLayout(n_obs=len(_HL_VIEWS) * cfg.tokens_per_frame,
                             n_goal=0, n_text=len(ids), n_proprio=0,
                             n_fast=0, n_flow=0)
        mask = build_attention_mask(layout, goals_present=False)
        for i in range(cfg.layers):
            pre = f"hl.l{i}"
            h = rms_norm(x, self.store.get(f"{pre}.norm1", (d,), "ones"))
            n = h.shape[0]
            dh = d // cfg.heads
            q = self.store.linear(f"{pre}.q", h, d).reshape(n, cfg.heads, dh)
            k = self.store.linear(f"{pre}.k", h, d).reshape(n, cfg.heads, dh)
            v = self.store.linear(f"{pre}.v", h, d).reshape(n, cfg.heads, dh)
            att = masked_attention(q.swapaxes(0, 1), k.swapaxes(0, 1),
                                   v.swapaxes(0, 1), mask)
            x = x + self.store.linear(f"{pre}.o",
                                      att.swapaxes(0, 1).reshape(n, d), d)
            h = rms_norm(x, self.store.get(f"{pre}.norm2", (d,), "ones"))
            h = self.store.linear(f"{pre}.up", h, d * cfg.mlp_mult).silu()
            x = x + self.store.linear(f"{pre}.down", h, d)
        x = rms_norm(x, self.store.get("hl.final_norm", (d,), "ones"))
        pooled = x.mean(axis=0).reshape(1, d)
        return self.store.linear("hl.head", pooled, len(self.vocab)).reshape(-1)

    def predict_subtask(self, obs_frames: dict, task_text: str, history) -> str:
        t0 = time.perf_counter()
        logits = self.logits(obs_frames, task_text, history)
        self.last_latency_s = time.perf_counter() - t0
        return self.vocab.entries[int(np.argmax(logits.data))]


@dataclass
class HLExample:
    obs_frames: dict
    task_text: str
    history: list
    label: str


def examples_from_log(log: CoachingLog) -> list:
    """Supervised pairs at every instruction event, plus a terminal "done"."""
    ep = log.episode
    out = []
    history = []
    for ev in log.events:
        obs = ep.steps[ev.step_index][0]
        out.append(HLExample({v: obs.views[v] for v in _HL_VIEWS},
                             ep.task_text, list(history), ev.subtask_text))
        # consecutive repeats (a coach re-affirming the current subtask)
        # collapse, matching the runtime history which records only changes
        if not history or history[-1] != ev.subtask_text:
            history.append(ev.subtask_text)
    obs = ep.steps[-1][0]
    out.append(HLExample({v: obs.views[v] for v in _HL_VIEWS},
                         ep.task_text, list(history), DONE))
    return out


def hl_train_step(model: HighLevelPolicy, batch: list, adam_state: AdamState,
                  lr: float = 1e-3) -> float:
    if not batch:
        raise ValueError("empty batch")
    terms = [cross_entropy(model.logits(ex.obs_frames, ex.task_text,
                                        ex.history).reshape(1, -1),
                           np.array([model.vocab.index(ex.label)]))
             for ex in batch]
    total = sum(terms[1:], terms[0]) * (1.0 / len(terms))
    loss = float(total.data)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite high-level loss")
    model.store.zero_grad()
    total.backward()
    adam_step(model.store.params, model.store.grads(), adam_state, lr=lr)
    return loss


def train_from_coaching(logs: list, config: HighLevelConfig | None = None,
                        threshold: float = 0.8, steps: int = 300,
                        batch_size: int = 8, lr: float = 1e-3,
                        seed: int = 0,
                        oversample_transitions: int = 0) -> HighLevelPolicy:
    """Fit the next-subtask classifier on successful coached sessions.

    Sessions with outcome below `threshold` are discarded; if none qualify
    the call is rejected. `oversample_transitions` adds that many extra
    copies of every example whose label differs from the last history entry:
    most coaching events re-affirm the current subtask, so the rare advance
    decisions — the ones that require noticing completion in the frame —
    are swamped in an unweighted sample.
    """
    kept = [g for g in logs if g.outcome >= threshold]
    if not kept:
        raise ValueError(
            f"no coaching log reaches the outcome threshold {threshold} "
            f"(best was {max((g.outcome for g in logs), default=0.0):.3f})")
    examples = [ex for g in kept for ex in examples_from_log(g)]
    vocab = build_vocabulary([ex.label for ex in examples])
    transitions = [ex for ex in examples
                   if not ex.history or ex.history[-1] != ex.label]
    train_set = examples + transitions * oversample_transitions
    model = HighLevelPolicy(config or HighLevelConfig(), vocab, seed=seed)
    rng = SplitRng(seed).split("hl-train")
    state = AdamState()
    for i in range(steps):
        idx = rng.split("batch", i).choice(len(train_set),
                                           size=min(batch_size, len(train_set)),
                                           replace=False)
        hl_train_step(model, [train_set[j] for j in idx], state, lr=lr)
    return model


def save_high_level(path, model: HighLevelPolicy) -> None:
    save_checkpoint(path, model.store.params,
                    extra={"config": asdict(model.config), "seed": model.seed,
                           "vocab": model.vocab.entries})


def load_high_level(path) -> HighLevelPolicy:
    tensors, extra = load_checkpoint(path)
    model = HighLevelPolicy(HighLevelConfig(**extra["config"]),
                            SubtaskVocabulary(extra["vocab"]),
                            seed=extra["seed"])
    model.store.load(tensors)
    return model
