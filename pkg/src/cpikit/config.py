"""Flat dotted-key run configuration.

Config files are plain text, one `key = value` per line, `#` comments and
blank lines ignored. Every key has a typed default below; unknown keys are
an error so typos fail loudly. Command-line overrides use the same
`key=value` form and win over the file.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(Exception):
    """Bad key, bad value, or unreadable config file."""


# key -> default; the default's type drives value parsing
DEFAULTS = {
    "env.name": "cartpole",              # cartpole | bandit | one_step | chain
    "env.reward_convention": "paper",    # paper | reference
    "env.max_steps": 500,
    "agent.kind": "dcpi",                # dcpi | dqn
    "agent.gamma": 0.99,
    "agent.target_period": 100,
    "agent.learn_period": 4,
    "agent.batch_size": 128,
    "agent.buffer_capacity": 50_000,
    "agent.min_buffer_fill": 500,
    "agent.epsilon_start": 0.01,
    "agent.epsilon_end": 0.01,
    "agent.epsilon_horizon": 1,
    "agent.behavior": "actor",           # actor | greedy_critic
    "agent.policy_kind": "network",      # network | greedy_oracle
    "net.hidden": "512,512",
    "net.output_width": 0,
    "net.dtype": "float32",
    "optimizer.kind": "adam",
    "optimizer.lr": 0.001,
    "rate.kind": "cpi",
    "rate.alpha0": 0.1,
    "rate.beta1": 0.99,
    "rate.beta2": 0.9999,
    "run.steps": 200_000,
    "run.iteration_length": 1000,
    "run.seeds": "0,1,2,3,4",
    "run.outdir": "runs/out",
    "run.checkpoint_every": 0,           # env steps between snapshots; 0 = off
}

_ENV_NAMES = ("cartpole", "bandit", "one_step", "chain")
_AGENT_KINDS = ("dcpi", "dqn")


def _convert(key: str, raw: str):
    kind = type(DEFAULTS[key])
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc


def parse_config_file(path) -> dict:
    """Read `key = value` lines into a typed mapping."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, raw)
    return out


def parse_overrides(pairs) -> dict:
    """`key=value` strings from the command line into a typed mapping."""
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r}: expected key=value")
        key, _, raw = pair.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"override: unknown key {key!r}")
        out[key] = _convert(key, raw)
    return out


def _parse_int_list(raw: str, what: str) -> tuple[int, ...]:
    items = [s for s in (part.strip() for part in raw.split(",")) if s]
    try:
        return tuple(int(s) for s in items)
    except ValueError as exc:
        raise ConfigError(f"{what}: bad integer list {raw!r}") from exc


@dataclass
class RunConfig:
    """One fully resolved training run (possibly over several seeds)."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = dict(DEFAULTS)
        for key, val in self.values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            merged[key] = val
        self.values = merged
        self.seeds = _parse_int_list(merged["run.seeds"], "run.seeds")
        self.hidden = _parse_int_list(merged["net.hidden"], "net.hidden")
        if not self.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        if not self.hidden:
            raise ConfigError("net.hidden must list at least one layer width")
        if merged["run.iteration_length"] < 1:
            raise ConfigError("run.iteration_length must be at least 1")
        if merged["run.steps"] < 1:
            raise ConfigError("run.steps must be positive")
        if merged["env.name"] not in _ENV_NAMES:
            raise ConfigError(f"env.name must be one of {_ENV_NAMES}")
        if merged["agent.kind"] not in _AGENT_KINDS:
            raise ConfigError(f"agent.kind must be one of {_AGENT_KINDS}")

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def steps(self) -> int:
        return self.values["run.steps"]

    @property
    def iteration_length(self) -> int:
        return self.values["run.iteration_length"]

    @property
    def outdir(self) -> str:
        return self.values["run.outdir"]


def load_run_config(path=None, overrides=None, extra=None) -> RunConfig:
    """Defaults <- config file <- --set overrides <- extra mapping.

    `extra` carries dedicated CLI flags (--steps and friends); None values
    there mean "flag not given" and are dropped.
    """
    values = {}
    if path is not None:
        values.update(parse_config_file(path))
    values.update(parse_overrides(overrides))
    for key, val in (extra or {}).items():
        if val is None:
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = val
    return RunConfig(values)
