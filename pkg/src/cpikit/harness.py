"""Training runs, seed sweeps, and their on-disk reporting.

A run is cut into fixed-length windows of environment steps ("iterations",
1000 steps by default). Each completed window yields one metrics row; the
window's score is the mean undiscounted return over the episodes that
*ended* inside it (an episode straddling a boundary counts toward the
window where it finished). Loss and mixture-rate columns average over the
gradient passes the window contained; windows without episodes or without
gradient passes record nan for those columns.

All delimited files are written with repr() floats, so re-parsing them
recovers the numbers bit-for-bit and identical runs produce identical
bytes.
"""
from __future__ import annotations

import logging
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import neural as N
from .agents import AgentConfig, make_agent
from .config import ConfigError, RunConfig
from .envs import CartPole, ChainWalk, OneStepEnv, TwoArmedBandit

logger = logging.getLogger(__name__)

METRICS_HEADER = "# cpikit metrics v1"
AGGREGATE_HEADER = "# cpikit aggregate v1"
COLUMNS = ("iteration", "steps", "episodes", "score", "alpha",
           "q_loss", "pi_loss")
AGG_COLUMNS = ("iteration", "score_mean", "score_std", "alpha_mean",
               "q_loss_mean", "pi_loss_mean")

_ENV_CLASSES = {"cartpole": CartPole, "bandit": TwoArmedBandit,
                "one_step": OneStepEnv, "chain": ChainWalk}


def resolve_outdir(outdir) -> Path:
    """Relative output paths land under $CPIKIT_OUT when it is set."""
    outdir = Path(outdir)
    root = os.environ.get("CPIKIT_OUT")
    if root and not outdir.is_absolute():
        return Path(root) / outdir
    return outdir


def build_env(cfg: RunConfig, seed):
    cls = _ENV_CLASSES[cfg["env.name"]]
    if cls is CartPole:
        return cls(seed=seed, reward_convention=cfg["env.reward_convention"],
                   max_steps=cfg["env.max_steps"])
    return cls(seed=seed)


def build_agent(cfg: RunConfig, seed: int):
    env_cls = _ENV_CLASSES[cfg["env.name"]]
    agent_cfg = AgentConfig(
        obs_dim=env_cls.obs_dim,
        n_actions=env_cls.n_actions,
        gamma=cfg["agent.gamma"],
        target_period=cfg["agent.target_period"],
        learn_period=cfg["agent.learn_period"],
        batch_size=cfg["agent.batch_size"],
        buffer_capacity=cfg["agent.buffer_capacity"],
        min_buffer_fill=cfg["agent.min_buffer_fill"],
        epsilon_start=cfg["agent.epsilon_start"],
        epsilon_end=cfg["agent.epsilon_end"],
        epsilon_horizon=cfg["agent.epsilon_horizon"],
        behavior=cfg["agent.behavior"],
        policy_kind=cfg["agent.policy_kind"],
        hidden=cfg.hidden,
        output_width=cfg["net.output_width"],
        optimizer=cfg["optimizer.kind"],
        lr=cfg["optimizer.lr"],
        dtype=cfg["net.dtype"],
        rate_kind=cfg["rate.kind"],
        alpha0=cfg["rate.alpha0"],
        rate_beta1=cfg["rate.beta1"],
        rate_beta2=cfg["rate.beta2"],
    )
    return make_agent(cfg["agent.kind"], agent_cfg, seed)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics(path, rows, header=METRICS_HEADER, columns=COLUMNS) -> None:
    lines = [header, ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics(path, header=METRICS_HEADER):
    """Rows back as a (n, len(columns)) float array."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != header:
        raise ValueError(f"{path}: not a {header!r} file")
    rows = [np.fromiter(map(float, line.split(",")), dtype=float)
            for line in text[2:] if line]
    return np.array(rows) if rows else np.empty((0, len(COLUMNS)))


def _mean_or_nan(values) -> float:
    return float(np.mean(values)) if len(values) else math.nan


@dataclass
class _WindowState:
    """Accumulators for the currently open iteration window."""

    scores: list
    loss_mark: int      # len(agent.q_losses) when the window opened
    pi_mark: int
    alpha_mark: int


def run_one(cfg: RunConfig, seed: int, outdir) -> np.ndarray:
    """Train one seed to cfg.steps, writing metrics.csv (and periodic
    checkpoints) under outdir. Picks up from outdir/checkpoint.npz when one
    is present, and resumed runs finish byte-identical to uninterrupted
    ones."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    agent = build_agent(cfg, seed)
    env = build_env(cfg, agent.env_entropy)
    rows: list = []
    window = _WindowState([], 0, 0, 0)

    ckpt_path = outdir / "checkpoint.npz"
    if ckpt_path.is_file():
        data = N.load_checkpoint(ckpt_path)
        agent.restore_state(data, "agent")
        env.restore_state(data, "env")
        rows = [tuple(r) for r in data["run.rows"]]
        window = _WindowState(
            data["run.window_scores"].tolist(),
            *(int(x) for x in data["run.window_marks"]))
        logger.info("seed %d: resuming from step %d", seed, agent.steps)

    def save_checkpoint_now():
        payload = agent.state_arrays("agent")
        payload.update(env.state_arrays("env"))
        payload["run.rows"] = np.array(rows, dtype=float).reshape(len(rows), len(COLUMNS))
        payload["run.window_scores"] = np.array(window.scores, dtype=float)
        payload["run.window_marks"] = np.array(
            [window.loss_mark, window.pi_mark, window.alpha_mark])
        N.save_checkpoint(ckpt_path, payload)
        write_metrics(outdir / "metrics.csv", rows)

    every = cfg["run.checkpoint_every"]
    while agent.steps < cfg.steps:
        episode = agent.train_step(env)
        if episode is not None:
            window.scores.append(episode[0])
        if agent.steps % cfg.iteration_length == 0:
            iteration = agent.steps // cfg.iteration_length
            rows.append((
                float(iteration),
                float(agent.steps),
                float(len(window.scores)),
                _mean_or_nan(window.scores),
                _mean_or_nan(agent.alphas[window.alpha_mark:]),
                _mean_or_nan(agent.q_losses[window.loss_mark:]),
                _mean_or_nan(agent.pi_losses[window.pi_mark:]),
            ))
            window = _WindowState([], len(agent.q_losses),
                                  len(agent.pi_losses), len(agent.alphas))
            write_metrics(outdir / "metrics.csv", rows)
        if every and agent.steps % every == 0 and agent.steps < cfg.steps:
            save_checkpoint_now()

    write_metrics(outdir / "metrics.csv", rows)
    if ckpt_path.is_file():
        ckpt_path.unlink()
    return np.array(rows).reshape(len(rows), len(COLUMNS))


def aggregate_rows(per_seed: list[np.ndarray]) -> np.ndarray:
    """Cross-seed mean and population std per iteration.

    Columns: iteration, score_mean, score_std, alpha_mean, q_loss_mean,
    pi_loss_mean. Seeds must agree on the iteration count.
    """
    if not per_seed:
        raise ValueError("no per-seed metrics to aggregate")
    lengths = {m.shape[0] for m in per_seed}
    if len(lengths) != 1:
        raise ValueError(f"seeds disagree on iteration count: {sorted(lengths)}")
    stack = np.stack(per_seed)            # (seeds, iters, cols)
    scores = stack[:, :, 3]
    with warnings.catch_warnings():
        # all-nan columns (e.g. no policy head) should aggregate to nan
        # quietly, not warn
        warnings.simplefilter("ignore", RuntimeWarning)
        out = np.column_stack([
            per_seed[0][:, 0],
            np.nanmean(scores, axis=0),
            np.nanstd(scores, axis=0),
            np.nanmean(stack[:, :, 4], axis=0),
            np.nanmean(stack[:, :, 5], axis=0),
            np.nanmean(stack[:, :, 6], axis=0),
        ])
    return out


def read_aggregate(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != AGGREGATE_HEADER:
        raise ValueError(f"{path}: not an aggregate file")
    rows = [np.fromiter(map(float, line.split(",")), dtype=float)
            for line in text[2:] if line]
    return np.array(rows).reshape(len(rows), len(AGG_COLUMNS))


@dataclass
class SweepResult:
    outdir: Path
    per_seed: dict          # seed -> metrics array
    failures: dict          # seed -> error string
    aggregate: np.ndarray | None

    @property
    def ok(self) -> bool:
        return not self.failures


def run_sweep(cfg: RunConfig) -> SweepResult:
    """Run every seed, then aggregate the survivors.

    A crashing seed is logged and recorded in failed_seeds.txt; the sweep
    carries on so one bad seed does not waste the others' compute.
    """
    outdir = resolve_outdir(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    per_seed, failures = {}, {}
    for seed in cfg.seeds:
        try:
            per_seed[seed] = run_one(cfg, seed, outdir / f"seed_{seed}")
        except Exception as exc:          # record and continue
            logger.exception("seed %d failed", seed)
            failures[seed] = f"{type(exc).__name__}: {exc}"
    if failures:
        (outdir / "failed_seeds.txt").write_text(
            "".join(f"{s}\t{msg}\n" for s, msg in sorted(failures.items())))
    agg = None
    if per_seed:
        agg = aggregate_rows(list(per_seed.values()))
        lines = [AGGREGATE_HEADER, ",".join(AGG_COLUMNS)]
        lines += [",".join(_fmt(x) for x in row) for row in agg]
        (outdir / "aggregate.csv").write_text("\n".join(lines) + "\n")
    return SweepResult(outdir, per_seed, failures, agg)


def auc_improvement(scores_a, scores_b) -> float:
    """Relative area-under-curve gain of run a over run b.

    Sums each curve's per-iteration scores and returns
    (sum_a - sum_b) / |sum_b|.
    """
    scores_a = np.asarray(scores_a, dtype=float)
    scores_b = np.asarray(scores_b, dtype=float)
    if scores_a.shape != scores_b.shape:
        raise ValueError("curves must cover the same iterations")
    s_a, s_b = float(np.nansum(scores_a)), float(np.nansum(scores_b))
    if s_b == 0.0:
        raise ValueError("baseline area is zero; relative gain undefined")
    return (s_a - s_b) / abs(s_b)


def write_plot_file(path, columns, rows) -> Path:
    """Space-separated curve file with a commented column header."""
    path = Path(path)
    lines = ["# " + " ".join(columns)]
    lines += [" ".join(_fmt(x) for x in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def emit_plot_data(aggregate: np.ndarray, outdir) -> list[Path]:
    """Columnar curve files: score.dat always (iteration, mean, lower,
    upper with a one-std band), alpha.dat / q_loss.dat / pi_loss.dat when
    those columns carry any data."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    it, mean, std = aggregate[:, 0], aggregate[:, 1], aggregate[:, 2]
    written = [write_plot_file(
        outdir / "score.dat", ("iteration", "mean", "lower", "upper"),
        np.column_stack([it, mean, mean - std, mean + std]))]
    for col, name in ((3, "alpha.dat"), (4, "q_loss.dat"), (5, "pi_loss.dat")):
        if np.any(np.isfinite(aggregate[:, col])):
            written.append(write_plot_file(
                outdir / name, ("iteration", "mean"),
                np.column_stack([it, aggregate[:, col]])))
    return written


def read_plot_data(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    rows = [np.fromiter(map(float, line.split()), dtype=float)
            for line in lines if line and not line.startswith("#")]
    return np.array(rows)
