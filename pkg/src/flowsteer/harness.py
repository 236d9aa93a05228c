"""Experiment harness: data generation, training, evaluation, ablations.

Every entry point is a deterministic function of (config, seed); artifacts
that must be byte-identical across reruns never include wall-clock values
(timings go to a separate sidecar file).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from flowsteer.data.buckets import bucket_by_quality, remove_diverse_slice
from flowsteer.data.episode import EpisodeMetadata, bin_speed
from flowsteer.data.manifest import DatasetStore
from flowsteer.data.prompts import DropoutConfig
from flowsteer.policy import (
    ActionChunk, ModelConfig, PolicyModel, load_policy, make_training_example,
    save_policy, train_step,
)
from flowsteer.runtime import RuntimeConfig, RuntimeSession, policy_chunk_fn
from flowsteer.sim import EMBODIMENTS, SimEnv, default_catalog, scripted_demo
from flowsteer.tensor import AdamState, SplitRng

VARIANTS = ("full", "no_metadata", "no_eval_data", "bucket_30", "bucket_50",
            "bucket_80", "bucket_100", "minus_diverse_20", "minus_random_20")

# single source of truth for metric columns, shared by eval and ablate
METRIC_FIELDS = ("success_rate", "mean_progress", "throughput_per_1000",
                 "instruction_following_rate", "episode_count")


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: str = "dataset"
    model_config: str | None = None
    variant: str = "full"
    eval_tasks: tuple = ()          # task instance keys; empty = full catalog
    episode_budget: int = 60
    # generation
    embodiments: tuple = ("compact",)
    quality_mix: dict = field(default_factory=lambda: {5: 0.5, 3: 0.3, 1: 0.2})
    eval_rollout_fraction: float = 0.0
    checkpoint: str | None = None   # policy used for eval-rollout generation
    bin_width: int = 50
    # training
    train_steps: int = 200
    batch_size: int = 4
    lr: float = 1e-3
    # evaluation
    eval_episodes: int = 2
    eval_max_steps: int = 120
    control_modes: tuple = ("ee",)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.episode_budget <= 0:
            raise ValueError("episode budget must be positive")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2,
                                         sort_keys=True, default=str) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        obj = json.loads(Path(path).read_text())
        for key in ("eval_tasks", "embodiments", "control_modes"):
            if key in obj:
                obj[key] = tuple(obj[key])
        if "quality_mix" in obj:
            obj["quality_mix"] = {int(k): v
                                  for k, v in obj["quality_mix"].items()}
        return cls(**obj)


@dataclass
class MetricsReport:
    success_rate: float
    mean_progress: float
    throughput_per_1000: float     # successes per 1,000 simulator steps
    instruction_following_rate: float
    episode_count: int
    per_task: dict = field(default_factory=dict)  # task key -> success rate
    cells: list = field(default_factory=list)     # per (task, emb, mode) rows
    wall_clock_s: float = 0.0      # informational; kept out of artifacts

    def __post_init__(self):
        for name in ("success_rate", "instruction_following_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")

    def row(self) -> list:
        return [f"{self.success_rate:.6f}", f"{self.mean_progress:.6f}",
                f"{self.throughput_per_1000:.6f}",
                f"{self.instruction_following_rate:.6f}",
                str(self.episode_count)]

    def to_json(self) -> str:
        obj = {k: getattr(self, k) for k in METRIC_FIELDS}
        obj["per_task"] = self.per_task
        obj["cells"] = self.cells
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- dataset generation --------------------------------------------------------

def _exact_quality_counts(mix: dict, n: int) -> list:
    """Largest-remainder apportionment of n episodes over quality levels."""
    keys = sorted(mix, reverse=True)
    raw = {q: mix[q] * n for q in keys}
    counts = {q: int(raw[q]) for q in keys}
    leftover = n - sum(counts.values())
    for q in sorted(keys, key=lambda q: (raw[q] - counts[q]), reverse=True):
        if leftover <= 0:
            break
        counts[q] += 1
        leftover -= 1
    out = []
    for q in keys:
        out.extend([q] * counts[q])
    return out


def generate_dataset(config: ExperimentConfig, out_dir) -> Path:
    """Scripted demos across tasks/embodiments/qualities, plus eval rollouts.

    On any failure the partially written manifest is removed so a dataset
    directory is either complete or unindexed.
    """
    store = DatasetStore(out_dir)
    catalog = default_catalog()
    n_eval = int(config.episode_budget * config.eval_rollout_fraction + 0.5)
    n_demo = config.episode_budget - n_eval
    qualities = _exact_quality_counts(config.quality_mix, n_demo)
    speeds = (1.0, 0.7, 1.3)
    episodes = []
    try:
        for i in range(n_demo):
            task = catalog[i % len(catalog)]
            emb = config.embodiments[i % len(config.embodiments)]
            control = "joint" if i % 5 == 4 else "ee"
            ep = scripted_demo(
                seed=config.seed * 100_000 + i, task=task, embodiment=emb,
                quality=qualities[i], speed_factor=speeds[i % len(speeds)],
                mistake_rate=1.0 if i % 10 == 7 else 0.0,
                control_mode=control, bin_width=config.bin_width)
            store.add(ep)
            episodes.append(ep)
        for i in range(n_eval):
            task = catalog[i % len(catalog)]
            emb = config.embodiments[i % len(config.embodiments)]
            if config.checkpoint:
                ep = _policy_rollout_episode(config, task, emb, i)
            else:
                # imperfect scripted rollouts stand in when no policy exists
                ep = scripted_demo(
                    seed=config.seed * 100_000 + n_demo + i, task=task,
                    embodiment=emb, quality=2 + (i % 3), speed_factor=1.0,
                    control_mode="ee", bin_width=config.bin_width,
                    source="eval_rollout")
            store.add(ep)
            episodes.append(ep)
        store.write_manifest(episodes)
    except BaseException:
        if store.manifest_path.exists():
            store.manifest_path.unlink()
        raise
    return store.manifest_path


def _policy_rollout_episode(config, task, embodiment, index):
    model = load_policy(config.checkpoint)
    fn, chunk_len, exec_len = policy_chunk_fn(model)
    meta = EpisodeMetadata(length_steps=config.eval_max_steps,
                           speed_label=bin_speed(config.eval_max_steps,
                                                 config.bin_width),
                           quality=5, mistake=False)
    sess = RuntimeSession(
        SimEnv(task, embodiment, view_size=model.config.view_size),
        fn, chunk_len, exec_len, meta,
        RuntimeConfig(max_steps=config.eval_max_steps, use_subgoals=False,
                      bin_width=config.bin_width),
        mode="autonomous", subtask_fn=None,
        seed=config.seed * 1000 + index)
    return sess.run().episode


# -- variants ------------------------------------------------------------------

def dataset_slice(episodes: list, bucket_fraction: float = 1.0,
                  metadata_on: bool = True, diversity_mode: str | None = None,
                  drop_eval: bool = False, seed: int = 0):
    """Composable dataset/conditioning filter behind every variant."""
    out = list(episodes)
    if drop_eval:
        out = [e for e in out if e.source != "eval_rollout"]
    if bucket_fraction < 1.0:
        out = bucket_by_quality(out, bucket_fraction)
    if diversity_mode == "most_diverse":
        out = remove_diverse_slice(out, 0.20, "most_diverse")
    elif diversity_mode == "random":
        out = remove_diverse_slice(out, 0.20, "random",
                                   rng=SplitRng(seed).split("diversity"))
    dropout = DropoutConfig()
    if not metadata_on:
        dropout.p_metadata_drop_all = 1.0
    return out, dropout


def apply_variant(episodes: list, variant: str, seed: int = 0):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "full":
        return dataset_slice(episodes, seed=seed)
    if variant == "no_metadata":
        return dataset_slice(episodes, metadata_on=False, seed=seed)
    if variant == "no_eval_data":
        return dataset_slice(episodes, drop_eval=True, seed=seed)
    if variant.startswith("bucket_"):
        return dataset_slice(episodes, bucket_fraction=int(variant[7:]) / 100,
                             seed=seed)
    if variant == "minus_diverse_20":
        return dataset_slice(episodes, diversity_mode="most_diverse", seed=seed)
    return dataset_slice(episodes, diversity_mode="random", seed=seed)


# -- training ------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


def train_policy_on(episodes: list, model_config: ModelConfig, steps: int,
                    batch_size: int, lr: float, seed: int,
                    dropout: DropoutConfig | None = None,
                    model: PolicyModel | None = None,
                    log_every: int = 10, log=None):
    """Train a chunk policy; returns (model, loss_rows).

    A non-finite loss raises TrainingDiverged carrying the model in its
    pre-step (last good) state.
    """
    if not episodes:
        raise ValueError("empty training set")
    dropout = dropout or DropoutConfig()
    model = model or PolicyModel(model_config, seed)
    rng = SplitRng(seed).split("train-loop")
    adam = AdamState()
    rows = []
    for step in range(steps):
        srng = rng.split("step", step)
        batch = []
        for b in range(batch_size):
            erng = srng.split("ex", b)
            ep = episodes[int(erng.integers(0, len(episodes)))]
            t = int(erng.integers(0, len(ep)))
            batch.append(make_training_example(ep, t, model.config, dropout,
                                               erng.split("example")))
        try:
            losses = train_step(model, batch, adam, srng.split("opt"), lr=lr)
        except FloatingPointError as e:
            # the failed step never touched parameters: model is last-good
            err = TrainingDiverged(str(e))
            err.model, err.rows = model, rows
            raise err from e
        if step % log_every == 0 or step == steps - 1:
            rows.append((step, losses["flow"], losses["fast"]))
            if log:
                log(step, losses)
    return model, rows


# -- evaluation ----------------------------------------------------------------

def scripted_reference_chunk_fn(task, embodiment: str, seed: int,
                                chunk_len: int = 16, exec_len: int = 8,
                                quality: int = 5):
    """The scripted demonstrator replayed as a chunk producer (oracle)."""
    demo = scripted_demo(seed, task, embodiment, quality=quality)
    actions = np.stack([a for _, a in demo.steps])

    def fn(observations, prompt, prev_chunk, delay, rng):
        t = len(observations) - 1 + delay
        idx = np.clip(np.arange(t, t + chunk_len), 0, len(actions) - 1)
        vals = actions[idx].copy()
        if prev_chunk is not None and delay:
            vals[:delay] = prev_chunk.values[exec_len:exec_len + delay]
        return ActionChunk(vals, committed_prefix_len=delay)

    return fn


def random_chunk_fn(seed: int, chunk_len: int = 16, exec_len: int = 8,
                    action_dim: int = 3):
    """Index-keyed uniform actions; consistent across overlapping chunks."""
    base = SplitRng(seed).split("random-policy")

    def action_at(t):
        return base.split("t", t).uniform(-1.0, 1.0, size=action_dim)

    def fn(observations, prompt, prev_chunk, delay, rng):
        t = len(observations) - 1 + delay
        vals = np.stack([action_at(t + j) for j in range(chunk_len)])
        if prev_chunk is not None and delay:
            vals[:delay] = prev_chunk.values[exec_len:exec_len + delay]
        return ActionChunk(vals, committed_prefix_len=delay)

    return fn


def make_chunk_provider(policy_spec: str, beta: float = 0.0,
                        uncond_fields=("metadata",)):
    """policy_spec: 'scripted', 'scripted:qN', 'random', or a checkpoint path.

    Returns fn(task, embodiment, seed) -> (chunk_fn, chunk_len, exec_len).
    """
    if policy_spec.startswith("scripted"):
        quality = int(policy_spec.split(":q")[1]) if ":q" in policy_spec else 5

        def provider(task, embodiment, seed):
            return (scripted_reference_chunk_fn(task, embodiment, seed,
                                                quality=quality), 16, 8)
        return provider
    if policy_spec == "random":
        def provider(task, embodiment, seed):
            return random_chunk_fn(seed), 16, 8
        return provider

    model = load_policy(policy_spec)

    def provider(task, embodiment, seed):
        fn, cl, el = policy_chunk_fn(model, beta=beta,
                                     uncond_fields=uncond_fields)
        return fn, cl, el
    return provider


def eval_tasks_from(config: ExperimentConfig) -> list:
    catalog = default_catalog()
    if not config.eval_tasks:
        return catalog
    by_key = {t.instance_key: t for t in catalog}
    out = []
    for key in config.eval_tasks:
        if key not in by_key:
            raise ValueError(f"unknown eval task {key!r}")
        out.append(by_key[key])
    return out


def run_eval_episode(task, embodiment: str, provider, seed: int,
                     max_steps: int = 120, control_mode: str = "ee",
                     metadata: EpisodeMetadata | None = None,
                     subgoal_fn=None, subtask_text: str | None = None,
                     runtime: RuntimeConfig | None = None,
                     instruction_script=None):
    """One evaluation rollout; returns (RunResult, session)."""
    chunk_fn, chunk_len, exec_len = provider(task, embodiment, seed)
    meta = metadata or EpisodeMetadata(length_steps=max_steps,
                                       speed_label=bin_speed(max_steps, 50),
                                       quality=5, mistake=False)
    cfg = runtime or RuntimeConfig(max_steps=max_steps,
                                   use_subgoals=subgoal_fn is not None)
    sess = RuntimeSession(SimEnv(task, embodiment), chunk_fn, chunk_len,
                          exec_len, meta, cfg, subgoal_fn=subgoal_fn,
                          mode="coached" if instruction_script else
                          "autonomous",
                          seed=seed, control_mode=control_mode)
    if subtask_text:
        sess.commit_context(subtask=subtask_text)
    if instruction_script:
        schedule = sorted(instruction_script)

        def coach(name, payload):
            if name != "state_update":
                return
            for at, text in schedule:
                if payload["step"] == at - 1:
                    sess.submit_instruction(text)

        for at, text in schedule:
            if at == 0:  # queued before the loop, applied at step 0
                sess.submit_instruction(text)
        sess.listeners.append(coach)
    result = sess.run()
    return result, sess


def instruction_following_stats(task, embodiment: str, seed: int,
                                episode) -> tuple[int, int]:
    """(followed, evaluable) instruction counts, by deterministic replay.

    An instruction is followed when its subtask predicate becomes true
    before the next instruction (or episode end). Instructions whose text
    matches no scripted subtask predicate are not evaluable.
    """
    preds = {s.text: s.predicate for s in task.subtask_script}
    events = sorted(episode.instruction_events, key=lambda e: e.step_index)
    if not events:
        return 0, 0
    env = SimEnv(task, embodiment)
    state, _ = env.reset(seed)
    states = [state]
    for _, action in episode.steps:
        state, _, _ = env.step(state, action, episode.control_mode)
        states.append(state)
    followed = evaluable = 0
    for i, ev in enumerate(events):
        pred = preds.get(ev.subtask_text)
        if pred is None:
            continue
        evaluable += 1
        end = (events[i + 1].step_index + 1 if i + 1 < len(events)
               else len(states))
        if any(pred(s) for s in states[ev.step_index:end]):
            followed += 1
    return followed, evaluable


def evaluate(policy_spec: str, config: ExperimentConfig,
             subgoal_fn=None, instruction_scripts=None) -> MetricsReport:
    """Fixed-seed evaluation battery over tasks x embodiments x modes."""
    t0 = time.perf_counter()
    provider = make_chunk_provider(policy_spec)
    tasks = eval_tasks_from(config)
    cells = []
    per_task: dict = {}
    total_success = total_steps = total_eps = 0
    progresses = []
    followed = evaluable = 0
    for task in tasks:
        for emb in config.embodiments:
            if emb not in EMBODIMENTS:
                raise ValueError(f"unknown embodiment {emb!r}")
            for mode in config.control_modes:
                succ = 0
                for k in range(config.eval_episodes):
                    seed = int(SplitRng(config.seed).split(
                        "eval", task.instance_key, emb, mode, k)
                        .integers(0, 2 ** 31))
                    script = None
                    if instruction_scripts:
                        script = instruction_scripts.get(task.instance_key)
                    res, _ = run_eval_episode(
                        task, emb, provider, seed,
                        max_steps=config.eval_max_steps, control_mode=mode,
                        subgoal_fn=subgoal_fn, instruction_script=script)
                    ok = res.progress >= 1.0
                    succ += ok
                    total_steps += res.steps
                    progresses.append(res.progress)
                    f, n = instruction_following_stats(task, emb, seed,
                                                       res.episode)
                    followed += f
                    evaluable += n
                total_success += succ
                total_eps += config.eval_episodes
                cells.append({"task": task.instance_key, "embodiment": emb,
                              "control_mode": mode,
                              "gc": subgoal_fn is not None,
                              "success_rate":
                                  succ / config.eval_episodes})
                per_task.setdefault(task.instance_key, []).append(
                    succ / config.eval_episodes)
    per_task = {k: float(np.mean(v)) for k, v in per_task.items()}
    return MetricsReport(
        success_rate=total_success / max(total_eps, 1),
        mean_progress=float(np.mean(progresses)) if progresses else 0.0,
        throughput_per_1000=1000.0 * total_success / max(total_steps, 1),
        instruction_following_rate=(followed / evaluable) if evaluable
        else 1.0,
        episode_count=total_eps, per_task=per_task, cells=cells,
        wall_clock_s=time.perf_counter() - t0)


# -- commands ------------------------------------------------------------------

def _model_config(config: ExperimentConfig) -> ModelConfig:
    if config.model_config:
        return ModelConfig.load(config.model_config)
    return ModelConfig(d_backbone=48, layers_backbone=2, heads=2, d_expert=24,
                       layers_expert=2, patch=8)


def cmd_generate(config: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return generate_dataset(config, out_dir)


def cmd_train(config: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = DatasetStore(config.dataset)
    episodes, dropout = apply_variant(store.load_all(), config.variant,
                                      config.seed)
    ckpt = out_dir / "policy.ckpt"
    try:
        model, rows = train_policy_on(
            episodes, _model_config(config), config.train_steps,
            config.batch_size, config.lr, config.seed, dropout)
    except TrainingDiverged as e:
        save_policy(ckpt, e.model)  # abort, but keep the last good state
        raise
    save_policy(ckpt, model)
    lines = ["step\tflow_loss\tfast_loss"]
    lines += [f"{s}\t{fl:.6f}\t{fa:.6f}" for s, fl, fa in rows]
    (out_dir / "loss_curve.tsv").write_text("\n".join(lines) + "\n")
    return ckpt


def write_report(report: MetricsReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = "\t".join(METRIC_FIELDS)
    (out_dir / "metrics.tsv").write_text(
        header + "\n" + "\t".join(report.row()) + "\n")
    (out_dir / "summary.json").write_text(report.to_json())
    # wall clock is hardware-dependent, so it lives outside the
    # byte-reproducible artifacts
    (out_dir / "timing.txt").write_text(f"{report.wall_clock_s:.3f}\n")


def cmd_eval(config: ExperimentConfig, policy_spec: str, out_dir,
             subgoal_fn=None) -> MetricsReport:
    report = evaluate(policy_spec, config, subgoal_fn=subgoal_fn)
    write_report(report, out_dir)
    return report


def ablation_grid() -> list:
    """(variant, bucket) cells: 4 buckets x metadata on/off + 3 diversity."""
    cells = [(v, b) for v in ("metadata", "no_metadata")
             for b in (30, 50, 80, 100)]
    cells += [("full", 100), ("minus_diverse_20", 100),
              ("minus_random_20", 100)]
    return sorted(cells)


def cmd_ablate(config: ExperimentConfig, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = DatasetStore(config.dataset)
    episodes = store.load_all()
    rows = []
    for variant, bucket in ablation_grid():
        try:
            if variant in ("metadata", "no_metadata"):
                subset, dropout = dataset_slice(
                    episodes, bucket_fraction=bucket / 100,
                    metadata_on=variant == "metadata", seed=config.seed)
            elif variant == "full":
                subset, dropout = dataset_slice(episodes, seed=config.seed)
            else:
                subset, dropout = dataset_slice(
                    episodes,
                    diversity_mode="most_diverse"
                    if variant == "minus_diverse_20" else "random",
                    seed=config.seed)
            model, _ = train_policy_on(
                subset, _model_config(config), config.train_steps,
                config.batch_size, config.lr, config.seed, dropout)
            cell_dir = out_dir / f"{variant}_{bucket}"
            cell_dir.mkdir(exist_ok=True)
            save_policy(cell_dir / "policy.ckpt", model)
            report = cmd_eval(config, str(cell_dir / "policy.ckpt"), cell_dir)
            rows.append([variant, str(bucket), "ok"] + report.row())
        except Exception as e:  # a failed cell must not sink the grid
            rows.append([variant, str(bucket), f"failed:{type(e).__name__}"]
                        + ["" for _ in METRIC_FIELDS])
    header = ["variant", "bucket", "status"] + list(METRIC_FIELDS)
    text = "\n".join("\t".join(r) for r in [header] + rows) + "\n"
    (out_dir / "ablation.tsv").write_text(text)
    return rows


def build_serve_session_factory(config: ExperimentConfig, policy_spec: str,
                                task_key: str | None = None):
    tasks = eval_tasks_from(config)
    task = tasks[0] if task_key is None else \
        {t.instance_key: t for t in tasks}[task_key]
    provider = make_chunk_provider(policy_spec)
    emb = config.embodiments[0]

    def factory():
        chunk_fn, chunk_len, exec_len = provider(task, emb, config.seed)
        meta = EpisodeMetadata(length_steps=config.eval_max_steps,
                               speed_label=bin_speed(config.eval_max_steps,
                                                     config.bin_width),
                               quality=5, mistake=False)
        return RuntimeSession(
            SimEnv(task, emb), chunk_fn, chunk_len, exec_len, meta,
            RuntimeConfig(max_steps=config.eval_max_steps,
                          use_subgoals=False, step_period_s=0.02),
            mode="coached", seed=config.seed)
    return factory
