"""Seeded experiment runner: environment + agent + replay sampler, with CSV logs."""

from __future__ import annotations

import ast
import configparser
import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .agents import DivergenceError, evaluate, make_agent
from .envs import ENVS, make_env
from .replay import ReplayBuffer, beta_schedule
from .sampler import SAMPLERS, compute_replay_reward, make_sampler
from .tinynn import NonFiniteGradientError

log = logging.getLogger(__name__)

CURVES_HEADER = ["step", "return", "replay_reward"]
SAMPLES_HEADER = ["step", "td_mean", "td_std", "q_mean", "q_std"]
SUMMARY_HEADER = ["sampler", "final_mean", "final_std", "auc_mean", "auc_std"]

# full-size network widths, selectable with ``widths = paper``
PAPER_WIDTHS = {
    "ners": dict(
        local_hidden=(256, 512, 256),
        local_out=128,
        global_hidden=(256, 512, 256),
        global_out=128,
        score_hidden=(256, 128, 64),
    ),
    "ero": dict(hidden=(64, 64)),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env: str = "pendulum_sparse"
    env_params: dict = field(default_factory=dict)
    agent_params: dict = field(default_factory=dict)
    sampler: str = "random"
    sampler_params: dict = field(default_factory=dict)
    total_steps: int = 50_000
    eval_interval: int = 200
    eval_episodes: int = 3
    seeds: tuple = (0, 1, 2, 3, 4)
    batch_size: int = 64
    buffer_size: int = 100_000
    initial_random_steps: int = 500
    gradient_steps: int = 1
    learning_starts: int | None = None
    stats_interval: int = 100
    gamma: float = 0.99
    alpha: float = 0.5
    beta_start: float = 0.4
    beta_end: float = 1.0
    beta_schedule: str = "increase"
    stratified: bool = False
    normalize_weights: bool = True
    replay_reward: str = "evaluation"
    widths: str = "desk"
    audit: bool = False
    out: str = "runs"
    label: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.total_steps >= self.eval_interval >= 1:
            raise ConfigError("need total_steps >= eval_interval >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.env not in ENVS:
            raise ConfigError(f"unknown env {self.env!r}; choose from {sorted(ENVS)}")
        if self.sampler.lower() not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}; choose from {sorted(SAMPLERS)}")
        if self.batch_size < 1 or self.buffer_size < 1:
            raise ConfigError("batch_size and buffer_size must be positive")
        if self.replay_reward not in ("evaluation", "training"):
            raise ConfigError("replay_reward must be 'evaluation' or 'training'")
        if self.widths not in ("desk", "paper"):
            raise ConfigError("widths must be 'desk' or 'paper'")
        if self.gradient_steps < 0 or self.eval_episodes < 1:
            raise ConfigError("gradient_steps must be >= 0 and eval_episodes >= 1")

    @property
    def name(self):
        return self.label or self.sampler

    def with_overrides(self, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


_RUN_KEYS = {f for f in ExperimentConfig.__dataclass_fields__} - {"env", "env_params", "agent_params", "sampler", "sampler_params"}


def _parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in text:
        return tuple(_parse_value(t) for t in text.split(",") if t.strip())
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(text):
    """Read the sectioned key = value format ([run], [env], [agent], [sampler])."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(cp.sections()) - {"run", "env", "agent", "sampler"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kw = {}
    if cp.has_section("run"):
        for key, raw in cp.items("run"):
            if key not in _RUN_KEYS:
                raise ConfigError(f"unknown [run] key {key!r}")
            kw[key] = _parse_value(raw)
    if "seeds" in kw and not isinstance(kw["seeds"], tuple):
        kw["seeds"] = (kw["seeds"],)
    env = dict((k, _parse_value(v)) for k, v in cp.items("env")) if cp.has_section("env") else {}
    agent = dict((k, _parse_value(v)) for k, v in cp.items("agent")) if cp.has_section("agent") else {}
    sampler = dict((k, _parse_value(v)) for k, v in cp.items("sampler")) if cp.has_section("sampler") else {}
    if "name" in env:
        kw["env"] = env.pop("name")
    if "name" in sampler:
        kw["sampler"] = sampler.pop("name")
    try:
        return ExperimentConfig(env_params=env, agent_params=agent, sampler_params=sampler, **kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    return parse_config(Path(path).read_text())


@dataclass
class RunLog:
    config_name: str
    seed: int
    curves: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    status: str = "ok"
    message: str = ""

    @property
    def returns(self):
        return [row[1] for row in self.curves]

    @property
    def final_return(self):
        return self.curves[-1][1] if self.curves else float("nan")

    @property
    def auc(self):
        """Area under the evaluation curve, normalized by its length (mean return)."""
        return float(np.mean(self.returns)) if self.curves else float("nan")

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "curves.csv", CURVES_HEADER, self.curves)
        _write_csv(out / "samples.csv", SAMPLES_HEADER, self.samples)
        return out

    @classmethod
    def read(cls, run_dir, config_name=None, seed=-1):
        run_dir = Path(run_dir)
        curves = [tuple(r) for r in _read_csv(run_dir / "curves.csv", CURVES_HEADER)]
        samples = [tuple(r) for r in _read_csv(run_dir / "samples.csv", SAMPLES_HEADER)]
        curves = [(int(r[0]), r[1], r[2]) for r in curves]
        samples = [(int(r[0]), *r[1:]) for r in samples]
        return cls(config_name or run_dir.parent.name, seed, curves, samples)


def _fmt(x):
    return str(x) if isinstance(x, (int, np.integer)) else repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _read_csv(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        got = next(reader)
        if got != header:
            raise ValueError(f"{path}: expected header {header}, found {got}")
        return [[float(v) for v in row] for row in reader]


def stats_snapshot(batch, value_oracle=None):
    """Mean/stdev (n-1) of raw |TD-error| and Q(s, a) over a sampled batch."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    td = np.abs(batch.td_errors)
    q = batch.q_values
    if value_oracle is not None:
        q = np.asarray(value_oracle.q_value(batch.states, batch.actions), dtype=np.float64)
    ddof = 1 if len(td) > 1 else 0
    return float(td.mean()), float(td.std(ddof=ddof)), float(q.mean()), float(q.std(ddof=ddof))


def _sampler_kwargs(cfg):
    params = dict(cfg.sampler_params)
    name = cfg.sampler.lower()
    if cfg.widths == "paper" and name in ("ners", "ners*", "ero"):
        key = "ero" if name == "ero" else "ners"
        for k, v in PAPER_WIDTHS[key].items():
            params.setdefault(k, v)
    return params


class Trainer:
    """One seeded run of the training loop, exposed step by step.

    Per environment step: act, push with priority 1.0, then for each gradient
    step sample a batch, score it, train the agent with the importance weights
    and write the scores back as priorities. At each episode end the learned
    samplers take one update from the latest replay reward.
    """

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        ss = np.random.SeedSequence(self.seed)
        (env_ss, agent_ss, sampler_ss, draw_ss, act_ss, eval_ss) = ss.spawn(6)
        self.env_rng = np.random.default_rng(env_ss)
        self.sampler_rng = np.random.default_rng(sampler_ss)
        self.draw_rng = np.random.default_rng(draw_ss)
        self.act_rng = np.random.default_rng(act_ss)
        self.eval_seed = int(np.random.default_rng(eval_ss).integers(2**63))

        self.env = make_env(cfg.env, **cfg.env_params)
        self.eval_env = make_env(cfg.env, **cfg.env_params)
        spec = self.env.spec
        agent_rng = np.random.default_rng(agent_ss)
        self.agent = make_agent(spec, agent_rng, gamma=cfg.gamma, **cfg.agent_params)
        self.buffer = ReplayBuffer(
            cfg.buffer_size,
            spec.observation_dim,
            action_dim=spec.action_dim,
            n_actions=spec.n_actions,
            alpha=cfg.alpha,
            gamma=cfg.gamma,
            stratified=cfg.stratified,
            normalize_weights=cfg.normalize_weights,
        )
        sampler_name = cfg.sampler.lower()
        self.sampler = make_sampler(sampler_name, self.buffer, np.random.default_rng(agent_rng.integers(2**63)), **_sampler_kwargs(cfg))
        self.replay_reward_mode = "training" if sampler_name == "ners*" else cfg.replay_reward
        self.learning_starts = cfg.learning_starts if cfg.learning_starts is not None else cfg.batch_size

        self.log = RunLog(cfg.name, self.seed)
        self.step = 0
        self.obs = self.env.reset(self.env_rng)
        self.episode_return = 0.0
        self.prev_eval = None
        self.prev_train_return = None
        self.pending_reward = None
        self.sampler_updates = 0

    # -- pieces of the loop -------------------------------------------------

    def env_step(self):
        cfg = self.cfg
        if self.step < cfg.initial_random_steps:
            action = self.env.random_action(self.act_rng)
        else:
            action = self.agent.act(self.obs, True, self.act_rng)
        nxt, reward, done = self.env.step(action)
        terminal = done and not self.env.truncated
        self.buffer.add(self.obs, action, reward, nxt, terminal, self.step)
        self.episode_return += reward
        self.obs = nxt
        return done

    def gradient_step(self):
        cfg = self.cfg
        beta = beta_schedule(self.step / cfg.total_steps, cfg.beta_start, cfg.beta_end, cfg.beta_schedule)
        batch = self.sampler.sample(self.buffer, cfg.batch_size, beta, self.agent, self.draw_rng)
        scores = self.sampler.score(batch)
        self.agent.train_step(batch)
        self.sampler.observe(self.buffer, batch, scores)
        if cfg.audit and self.sampler.uses_priorities:
            audit_priorities(self.buffer, batch.indices, scores)
        if self.step % cfg.stats_interval == 0:
            self.log.samples.append((self.step, *stats_snapshot(batch)))
        return batch, scores

    def evaluate_now(self):
        ret = evaluate(self.agent, self.eval_env, self.cfg.eval_episodes, np.random.default_rng(self.eval_seed))
        rre = compute_replay_reward(ret, self.prev_eval)
        self.prev_eval = ret
        self.log.curves.append((self.step, ret, rre))
        if self.replay_reward_mode == "evaluation":
            self.pending_reward = rre
        return ret, rre

    def end_episode(self):
        if self.replay_reward_mode == "training":
            self.pending_reward = compute_replay_reward(self.episode_return, self.prev_train_return)
            self.prev_train_return = self.episode_return
        if self.pending_reward is not None and self.sampler.pending:
            self.sampler.end_of_episode(self.buffer, self.pending_reward, self.agent, self.sampler_rng)
            self.sampler_updates += 1
            self.pending_reward = None
        self.obs = self.env.reset(self.env_rng)
        self.episode_return = 0.0

    def advance(self):
        """One full environment step including training, evaluation and episode end."""
        done = self.env_step()
        if self.buffer.size >= self.learning_starts:
            for _ in range(self.cfg.gradient_steps):
                self.gradient_step()
        self.step += 1
        if self.step % self.cfg.eval_interval == 0:
            self.evaluate_now()
        if done:
            self.end_episode()

    def run(self):
        try:
            # overflow shows up as a non-finite loss and is reported through the status
            with np.errstate(over="ignore", invalid="ignore"):
                while self.step < self.cfg.total_steps:
                    self.advance()
        except (DivergenceError, NonFiniteGradientError, FloatingPointError) as exc:
            self.log.status = "diverged"
            self.log.message = f"step {self.step}: {exc}"
            log.error("run %s seed %d diverged at step %d: %s", self.cfg.name, self.seed, self.step, exc)
        return self.log


def audit_priorities(buffer, indices, scores, tol=1e-9):
    """Recompute draw probabilities from the raw leaves and compare with the tree."""
    n = buffer.size
    leaves = buffer.tree.leaf_values[:n]
    brute = leaves / np.sum(leaves)
    tree_p = leaves / buffer.tree.total
    if not np.allclose(brute, tree_p, rtol=tol, atol=0.0):
        raise AssertionError("tree total disagrees with the leaf sum")
    expect = np.asarray(scores, dtype=np.float64) ** buffer.alpha
    # later duplicates win, matching the tree write order
    last = {int(i): k for k, i in enumerate(indices)}
    idx = np.fromiter(last.keys(), dtype=np.int64)
    pos = np.fromiter(last.values(), dtype=np.int64)
    if not np.allclose(leaves[idx], expect[pos], rtol=tol, atol=0.0):
        raise AssertionError("tree leaves disagree with the scores just written")


def run_experiment(cfg: ExperimentConfig, seed: int, out_dir=None) -> RunLog:
    run_log = Trainer(cfg, seed).run()
    if out_dir is not None:
        run_log.write(out_dir)
    return run_log


def run_dir_for(cfg, seed, root=None):
    return Path(root or cfg.out) / cfg.name / f"seed_{seed}"


def _run_job(args):
    cfg, seed, out_dir = args
    return run_experiment(cfg, seed, out_dir)


def sweep(cfg: ExperimentConfig, seeds=None, root=None, workers=1):
    """Run one config over several seeds, writing one log directory per seed."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    jobs = [(cfg, s, run_dir_for(cfg, s, root)) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


@dataclass
class ComparisonRow:
    sampler: str
    final_mean: float
    final_std: float
    auc_mean: float
    auc_std: float

    def as_tuple(self):
        return (self.sampler, self.final_mean, self.final_std, self.auc_mean, self.auc_std)


def _mean_std(values):
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std


def summarize(label, logs):
    finals = [lg.final_return for lg in logs]
    aucs = [lg.auc for lg in logs]
    fm, fs = _mean_std(finals)
    am, as_ = _mean_std(aucs)
    return ComparisonRow(label, fm, fs, am, as_)


def compare(configs, seeds=None, root=None, workers=1):
    """Run every config over the seeds and tabulate final return and AUC (stdev uses n-1)."""
    configs = list(configs)
    if not configs:
        raise ConfigError("nothing to compare")
    envs = {(c.env, tuple(sorted(c.env_params.items()))) for c in configs}
    if len(envs) > 1:
        raise ConfigError("compared configs must share one environment")
    if len({c.total_steps for c in configs}) > 1:
        raise ConfigError("compared configs must share total_steps")
    rows = []
    all_logs = {}
    for cfg in configs:
        logs = sweep(cfg, seeds, root, workers)
        all_logs[cfg.name] = logs
        rows.append(summarize(cfg.name, logs))
    return rows, all_logs


def compare_dirs(root):
    """Aggregate previously written logs laid out as ``root/<label>/seed_<k>/``."""
    rows = []
    for label_dir in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        seed_dirs = sorted(p for p in label_dir.iterdir() if p.is_dir() and (p / "curves.csv").exists())
        if not seed_dirs:
            continue
        logs = [RunLog.read(d, label_dir.name) for d in seed_dirs]
        rows.append(summarize(label_dir.name, logs))
    return rows


def write_summary(rows, path):
    _write_csv_rows(path, rows)
    return path


def _write_csv_rows(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r.sampler] + [_fmt(v) for v in r.as_tuple()[1:]])


def format_table(rows):
    head = ["sampler", "final return", "AUC"]
    body = [[r.sampler, f"{r.final_mean:.3f} ± {r.final_std:.3f}", f"{r.auc_mean:.3f} ± {r.auc_std:.3f}"] for r in rows]
    widths = [max(len(str(x[i])) for x in [head] + body) for i in range(3)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(head, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines)


def default_workers():
    return max(1, min(4, os.cpu_count() or 1))


__all__ = [
    "ComparisonRow",
    "ConfigError",
    "ExperimentConfig",
    "RunLog",
    "Trainer",
    "audit_priorities",
    "compare",
    "compare_dirs",
    "format_table",
    "load_config",
    "parse_config",
    "run_experiment",
    "stats_snapshot",
    "summarize",
    "sweep",
    "write_summary",
]
