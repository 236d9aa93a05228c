"""Live episode loop: context refresh, async producers, chunk stitching.

Per step: poll producer slots, splice in coach instructions, refresh the
subgoal on subtask change or timer expiry, keep the chunk buffer primed
(the next chunk is requested `sim_delay` steps early and conditioned on the
committed overlap of the current one), execute exactly one action, record.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from flowsteer.data.episode import (
    Episode, EpisodeMetadata, InstructionEvent, Observation, Segment, bin_speed,
)
from flowsteer.data.prompts import PromptContext
from flowsteer.policy import ActionChunk, ObsInput, sample_chunk
from flowsteer.sim import SimEnv, score_progress
from flowsteer.tensor import SplitRng

from .slots import ProducerSlot

DONE_TOKEN = "done"


@dataclass
class RuntimeConfig:
    delta_steps: int = 40     # subgoal refresh timer
    sim_delay: int = 2        # simulated chunk-inference latency, in steps
    beta: float = 0.0
    k_steps: int | None = None
    uncond_fields: tuple = ("metadata",)
    max_steps: int = 400
    hl_period: int = 8        # steps between next-subtask requests
    use_subgoals: bool = True
    bin_width: int = 50
    step_period_s: float = 0.0


@dataclass
class SubgoalEvent:
    request_step: int
    reason: str               # init | subtask_change | timer
    subtask: str | None
    arrival_step: int | None = None
    accepted: bool | None = None


@dataclass
class RunResult:
    episode: Episode
    progress: float
    steps: int
    status: str               # done | step_limit | stopped
    subgoal_events: list
    chunk_log: list           # per chunk: id, start_step, ctx_version, delay
    attribution: list         # per step: (chunk_id, context_version)


def obs_history_input(observations: list, max_history: int,
                      stride: int) -> ObsInput:
    t = len(observations) - 1
    idxs = sorted(i for i in (t - s * stride for s in range(max_history))
                  if i >= 0)
    views = sorted(observations[t].views)
    return ObsInput(
        frames={v: [observations[i].views[v] for i in idxs] for v in views},
        proprio=np.stack([observations[i].proprio for i in idxs]))


def policy_chunk_fn(model, beta: float = 0.0, k_steps=None,
                    uncond_fields=("metadata",)):
    """Adapter turning a trained policy into the session's chunk producer."""
    cfg = model.config

    def fn(observations, prompt, prev_chunk, delay, rng):
        obs = obs_history_input(observations, cfg.max_history,
                                cfg.history_stride)
        return sample_chunk(model, obs, prompt, rng, k_steps=k_steps,
                            beta=beta, uncond_fields=uncond_fields,
                            prev_chunk=prev_chunk, delay=delay)

    return fn, cfg.chunk_len, cfg.exec_len


class RuntimeSession:
    """One live episode; see run() for the loop contract."""

    def __init__(self, env: SimEnv, chunk_fn, chunk_len: int, exec_len: int,
                 metadata: EpisodeMetadata, config: RuntimeConfig | None = None,
                 subgoal_fn=None, subtask_fn=None, mode: str = "autonomous",
                 seed: int = 0, executor=None, control_mode: str = "ee"):
        if mode not in ("autonomous", "coached"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "autonomous" and subtask_fn is None and chunk_fn is None:
            raise ValueError("autonomous mode needs a policy")
        self.env = env
        self.chunk_fn = chunk_fn
        self.chunk_len = chunk_len
        self.exec_len = exec_len
        self.metadata = metadata
        self.config = config or RuntimeConfig()
        if not 0 <= self.config.sim_delay < exec_len:
            raise ValueError("sim_delay must be < exec_len")
        self.subgoal_fn = subgoal_fn
        self.subtask_fn = subtask_fn
        self.mode = mode
        self.seed = seed
        self.control_mode = control_mode
        self.rng = SplitRng(seed).split("runtime")
        self.subgoal_slot = ProducerSlot(executor)
        self.subtask_slot = ProducerSlot(executor)

        self._lock = threading.Lock()
        self.context_version = 0
        self.subtask: str | None = None
        self.subgoal: dict | None = None
        self.step = 0
        self.stopped = False
        self.running = False
        self._pending_instructions = []  # (step, text) from the coach
        self.instruction_events: list = []
        self.subgoal_events: list = []
        self.chunk_log: list = []
        self.attribution: list = []
        self.history: list = []          # committed subtask strings, in order
        self.subtask_timeline: list = []  # (step, text) at each commit
        self.listeners: list = []        # callables(event_name, payload)

    # -- external inputs ------------------------------------------------------

    def submit_instruction(self, text: str) -> int:
        """Coach instruction; recorded at the step it was received."""
        if not text:
            raise ValueError("empty instruction")
        with self._lock:
            if self.stopped:
                raise ValueError("episode already stopped")
            self._pending_instructions.append((self.step, text))
            return self.step

    def stop(self) -> None:
        with self._lock:
            self.stopped = True

    def commit_context(self, subtask=None, subgoal=None) -> int:
        """Atomically install new context fields; returns the new version."""
        with self._lock:
            if subtask is not None:
                self.subtask = subtask
                self.history.append(subtask)
                self.subtask_timeline.append((self.step, subtask))
            if subgoal is not None:
                self.subgoal = subgoal
            self.context_version += 1
            return self.context_version

    # -- context plumbing -----------------------------------------------------

    def _prompt(self, rear_present: bool) -> PromptContext:
        return PromptContext(
            task_text=self.env.task.task_text,
            control_mode=self.control_mode,
            subtask_text=self.subtask, subgoal_frames=self.subgoal,
            speed_label=self.metadata.speed_label,
            quality=self.metadata.quality, mistake=self.metadata.mistake,
            history_present=True, rear_present=rear_present)

    def _request_subgoal(self, obs: Observation, reason: str) -> None:
        subtask = self.subtask
        ev = SubgoalEvent(request_step=self.step, reason=reason,
                          subtask=subtask)
        self.subgoal_events.append(ev)
        frames = {v: obs.views[v] for v in ("global", "wrist")
                  if v in obs.views}
        seed = int(self.rng.split("subgoal-seed", len(self.subgoal_events))
                   .integers(0, 2 ** 31))
        self.subgoal_slot.request(
            lambda: self.subgoal_fn(frames, subtask, self.metadata, seed),
            (ev, subtask))

    def _emit(self, name: str, payload: dict) -> None:
        for cb in list(self.listeners):
            cb(name, payload)

    # -- the loop -------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.config
        state, obs = self.env.reset(self.seed)
        observations = [obs]
        steps = []
        self.running = True
        control_mode = self.control_mode

        if self.mode == "autonomous" and self.subtask_fn is not None:
            first = self.subtask_fn(obs.views, self.env.task.task_text,
                                    list(self.history))
            if first != DONE_TOKEN:
                self.commit_context(subtask=first)

        chunk = None
        next_chunk = None     # (ActionChunk, arrival_step, ctx_version)
        exec_idx = 0
        chunk_id = -1
        chunk_version = 0
        last_goal_step = None
        status = "step_limit"
        progress = score_progress(state, self.env.task)

        for step in range(cfg.max_steps):
            t0 = time.perf_counter()
            with self._lock:
                self.step = step
                pending = self._pending_instructions
                self._pending_instructions = []
                if self.stopped:
                    status = "stopped"
                    break

            subtask_changed = False
            for at_step, text in pending:
                self.instruction_events.append(InstructionEvent(at_step, text))
                if text == DONE_TOKEN:
                    status = "stopped"
                    self.stop()
                else:
                    self.commit_context(subtask=text)
                    subtask_changed = True
            if status == "stopped":
                break

            for (ev, subtask_at_request), result in self.subgoal_slot.poll():
                frames = result[0] if isinstance(result, tuple) else result
                ev.arrival_step = step
                ev.accepted = subtask_at_request == self.subtask
                if ev.accepted:
                    self.commit_context(subgoal=frames)
                    self._emit("subgoal_preview", {"frames": frames})
            for _tag, text in self.subtask_slot.poll():
                if text == DONE_TOKEN:
                    status = "done_token"
                    self.stop()
                elif text != self.subtask:
                    self.commit_context(subtask=text)
                    subtask_changed = True
            if status == "done_token":
                break

            if self.subgoal_fn is not None and cfg.use_subgoals:
                timer_expired = (last_goal_step is None
                                 or step - last_goal_step >= cfg.delta_steps)
                if subtask_changed or timer_expired:
                    reason = ("init" if last_goal_step is None else
                              "subtask_change" if subtask_changed else "timer")
                    self._request_subgoal(obs, reason)
                    last_goal_step = step

            if (self.mode == "autonomous" and self.subtask_fn is not None
                    and step > 0 and step % cfg.hl_period == 0):
                views = dict(obs.views)
                hist = list(self.history)
                self.subtask_slot.request(
                    lambda: self.subtask_fn(views, self.env.task.task_text,
                                            hist), step)

            rear = "rear" in obs.views
            if chunk is None:
                chunk = self.chunk_fn(observations, self._prompt(rear), None,
                                      0, self.rng.split("chunk", 0))
                chunk_id += 1
                chunk_version = self.context_version
                self.chunk_log.append({"chunk_id": chunk_id, "start_step": step,
                                       "context_version": chunk_version,
                                       "delay": 0})
            if exec_idx == self.exec_len:
                if next_chunk is None and cfg.sim_delay == 0:
                    nc = self.chunk_fn(observations, self._prompt(rear), chunk,
                                       0, self.rng.split("chunk", chunk_id + 1))
                    next_chunk = (nc, step, self.context_version)
                if next_chunk is None or next_chunk[1] > step:
                    raise RuntimeError("chunk buffer underrun")
                chunk, _, chunk_version = next_chunk
                next_chunk = None
                chunk_id += 1
                exec_idx = 0
                self.chunk_log.append({"chunk_id": chunk_id, "start_step": step,
                                       "context_version": chunk_version,
                                       "delay": cfg.sim_delay})
            if exec_idx == self.exec_len - cfg.sim_delay and next_chunk is None:
                nc = self.chunk_fn(observations, self._prompt(rear), chunk,
                                   cfg.sim_delay,
                                   self.rng.split("chunk", chunk_id + 1))
                next_chunk = (nc, step + cfg.sim_delay, self.context_version)

            action = np.asarray(chunk.values[exec_idx], dtype=np.float64)
            self.attribution.append((chunk_id, chunk_version))
            state, obs, done = self.env.step(state, action, control_mode)
            steps.append((observations[-1], action))
            observations.append(obs)
            exec_idx += 1
            progress = score_progress(state, self.env.task)
            self._emit("state_update", {"step": step, "progress": progress,
                                        "subtask": self.subtask,
                                        "context_version": self.context_version})
            self._emit("frame_update", {"views": obs.views, "step": step})
            if done:
                status = "done"
                break
            if cfg.step_period_s:
                leftover = cfg.step_period_s - (time.perf_counter() - t0)
                if leftover > 0:
                    time.sleep(leftover)

        self.running = False
        self.stop()
        episode = self._build_episode(steps, progress)
        return RunResult(episode=episode, progress=progress, steps=len(steps),
                         status="done" if status in ("done", "done_token")
                         else status,
                         subgoal_events=self.subgoal_events,
                         chunk_log=self.chunk_log,
                         attribution=self.attribution)

    # -- recording ------------------------------------------------------------

    def _build_episode(self, steps, progress) -> Episode:
        if not steps:
            raise ValueError("episode recorded zero steps")
        n = len(steps)
        # segments follow the committed-subtask timeline
        segs = []
        timeline = [(min(s, n), t) for s, t in self.subtask_timeline]
        start, current = 0, ""
        for at, text in timeline:
            if at <= start:
                current = text
                continue
            if text != current:
                segs.append(Segment(start, at, current))
                start, current = at, text
        if start < n:
            segs.append(Segment(start, n, current))
        # eval rollouts are labeled by outcome: progress in [0,1] -> 1..5
        quality = 1 + int(np.floor(min(progress, 1.0) * 4))
        meta = EpisodeMetadata(length_steps=n,
                               speed_label=bin_speed(n, self.config.bin_width),
                               quality=quality, mistake=False)
        return Episode(
            steps=steps, segments=segs, metadata=meta,
            source="coaching" if self.mode == "coached" else "eval_rollout",
            task_text=self.env.task.task_text,
            embodiment_id=self.env.embodiment.id,
            control_mode=self.control_mode,
            template_id=self.env.task.template_id,
            episode_id=f"run|{self.env.task.instance_key}|"
                       f"{self.env.embodiment.id}|s{self.seed}|{self.mode}",
            instruction_events=list(self.instruction_events),
            final_progress=float(progress))
