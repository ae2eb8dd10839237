"""Replay-based agents: the conservative actor-critic and its plain
q-learning counterpart.

The conservative agent keeps four networks (online/target value nets,
online/target policy nets). Every learn step does one value update toward
r + gamma * E_{a ~ target policy}[target q(s', a)], then one distillation
update pulling the policy net toward the mixture
(1 - alpha) * target policy + alpha * greedy(online q), with alpha coming
from the adaptive rate state computed on the same policy batch.

Random streams are split per concern (acting, value batches, policy
batches, net inits, the env) from one master seed, so the q-learning path
of the conservative agent consumes exactly the same draws as the plain DQN
agent; with alpha = 1 and the greedy policy oracle the two produce
bit-identical value losses under a shared seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import neural as N
from . import rates as R
from .envs import restore_rng, rng_state_array


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray


class ReplayBuffer:
    """Fixed-capacity FIFO store with uniform (with-replacement) sampling."""

    def __init__(self, capacity: int, obs_dim: int, seed=0, dtype=np.float32):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._states = np.zeros((capacity, obs_dim), dtype=dtype)
        self._actions = np.zeros(capacity, dtype=np.int64)
        self._rewards = np.zeros(capacity, dtype=dtype)
        self._next_states = np.zeros((capacity, obs_dim), dtype=dtype)
        self._terminals = np.zeros(capacity, dtype=bool)
        self._rng = np.random.default_rng(seed)
        self._head = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, tr: Transition) -> None:
        i = self._head
        self._states[i] = tr.state
        self._actions[i] = tr.action
        self._rewards[i] = tr.reward
        self._next_states[i] = tr.next_state
        self._terminals[i] = tr.terminal
        self._head = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator | None = None) -> Batch:
        """Uniform sample; pass an rng to draw from a caller-owned stream."""
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = (rng if rng is not None else self._rng).integers(
            0, self._size, size=batch_size)
        return Batch(self._states[idx], self._actions[idx], self._rewards[idx],
                     self._next_states[idx], self._terminals[idx])

    def state_arrays(self, prefix: str) -> dict:
        return {
            f"{prefix}.states": self._states.copy(),
            f"{prefix}.actions": self._actions.copy(),
            f"{prefix}.rewards": self._rewards.copy(),
            f"{prefix}.next_states": self._next_states.copy(),
            f"{prefix}.terminals": self._terminals.copy(),
            f"{prefix}.counters": np.array([self._head, self._size]),
            f"{prefix}.rng": rng_state_array(self._rng),
        }

    def restore_state(self, data: dict, prefix: str) -> None:
        self._states = data[f"{prefix}.states"].copy()
        self._actions = data[f"{prefix}.actions"].copy()
        self._rewards = data[f"{prefix}.rewards"].copy()
        self._next_states = data[f"{prefix}.next_states"].copy()
        self._terminals = data[f"{prefix}.terminals"].copy()
        self._head, self._size = (int(x) for x in data[f"{prefix}.counters"])
        self._rng = restore_rng(data[f"{prefix}.rng"])


@dataclass
class AgentConfig:
    """Shared knobs for both agents; the policy fields only matter to the
    conservative one."""

    obs_dim: int
    n_actions: int
    gamma: float = 0.99
    target_period: int = 100        # copy online nets to targets every C steps
    learn_period: int = 4           # one gradient pass every F interactions
    batch_size: int = 128
    buffer_capacity: int = 50_000
    min_buffer_fill: int = 500
    epsilon_start: float = 0.01
    epsilon_end: float = 0.01
    epsilon_horizon: int = 1        # linear decay steps; 1 means flat
    behavior: str = "actor"         # actor | greedy_critic
    policy_kind: str = "network"    # network | greedy_oracle
    hidden: tuple = (512, 512)
    output_width: int = 0           # q-net head width; 0 means n_actions
    optimizer: str = "adam"
    lr: float = 1e-3
    dtype: str = "float32"
    rate_kind: str = "cpi"
    alpha0: float = 0.1
    rate_beta1: float = 0.99
    rate_beta2: float = 0.9999

    def __post_init__(self):
        if self.behavior not in ("actor", "greedy_critic"):
            raise ValueError(f"unknown behavior mode {self.behavior!r}")
        if self.policy_kind not in ("network", "greedy_oracle"):
            raise ValueError(f"unknown policy kind {self.policy_kind!r}")
        if self.output_width and self.output_width < self.n_actions:
            raise ValueError("q-net output width cannot be below the action count")
        if self.target_period < 1 or self.learn_period < 1:
            raise ValueError("update periods must be at least 1")
        if not (0.0 <= self.epsilon_start <= 1.0 and 0.0 <= self.epsilon_end <= 1.0):
            raise ValueError("exploration probabilities must lie in [0, 1]")

    @property
    def q_width(self) -> int:
        return self.output_width or self.n_actions

    def epsilon_at(self, step: int) -> float:
        if self.epsilon_horizon <= 1 or self.epsilon_start == self.epsilon_end:
            return self.epsilon_end
        frac = min(1.0, step / self.epsilon_horizon)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


def act(obs, q_values_fn, policy_probs_fn, epsilon: float, mode: str,
        rng: np.random.Generator, n_actions: int) -> int:
    """Epsilon-mixed action choice.

    With probability epsilon: uniform. Otherwise greedy_critic takes the
    value argmax and actor samples the policy head (one uniform draw via
    inverse cdf, probabilities renormalized against float32 drift).
    """
    if rng.random() < epsilon:
        return int(rng.integers(n_actions))
    if mode == "greedy_critic":
        return int(np.argmax(q_values_fn(obs)))
    p = np.asarray(policy_probs_fn(obs), dtype=np.float64)
    p = p / p.sum()
    return min(int(np.searchsorted(np.cumsum(p), rng.random(), side="right")),
               n_actions - 1)


def greedy_onehot(q_values: np.ndarray) -> np.ndarray:
    """Row one-hots on the value argmax (ties to the lowest index)."""
    out = np.zeros_like(q_values)
    out[np.arange(q_values.shape[0]), q_values.argmax(axis=1)] = 1.0
    return out


def conservative_q_targets(batch: Batch, q_target: N.MlpNet,
                           next_pi_probs: np.ndarray, gamma: float,
                           n_actions: int) -> np.ndarray:
    """r + gamma * sum_a pi(a|s') q_target(s', a), cut at terminal states."""
    q_next = q_target.forward(batch.next_states)[:, :n_actions]
    backup = (next_pi_probs * q_next).sum(axis=1)
    return batch.rewards + gamma * ~batch.terminals * backup


def greedy_q_targets(batch: Batch, q_target: N.MlpNet, gamma: float,
                     n_actions: int) -> np.ndarray:
    """r + gamma * max_a q_target(s', a), cut at terminal states."""
    q_next = q_target.forward(batch.next_states)[:, :n_actions]
    return batch.rewards + gamma * ~batch.terminals * q_next.max(axis=1)


def compute_policy_targets(target_pi_probs: np.ndarray, q_values: np.ndarray,
                           alpha: float) -> np.ndarray:
    """Distillation targets: mix the slow policy toward the greedy one.

    Per state: (1 - alpha) * target_policy + alpha * onehot(argmax q).
    Rows stay valid distributions for any alpha in [0, 1].
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("mixture rate must lie in [0, 1]")
    return (1.0 - alpha) * target_pi_probs + alpha * greedy_onehot(q_values)


class _AgentBase:
    """Interaction loop shared by both agents."""

    def __init__(self, config: AgentConfig, seed: int):
        self.config = config
        children = np.random.SeedSequence(seed).spawn(6)
        # fixed stream order so both agents line up on the shared streams:
        # env, acting, value batches, q init, pi init, policy batches
        self.env_entropy = children[0]
        self.rng_act = np.random.default_rng(children[1])
        self.buffer = ReplayBuffer(config.buffer_capacity, config.obs_dim,
                                   seed=children[2], dtype=config.dtype)
        self._net_seeds = (children[3], children[4])
        self.rng_pi_batch = np.random.default_rng(children[5])
        self._obs_dtype = np.dtype(config.dtype)

        self.steps = 0
        self.grad_steps = 0
        self.q_losses: list[float] = []
        self.pi_losses: list[float] = []
        self.alphas: list[float] = []
        self._obs = None
        self._episode_return = 0.0
        self._episode_length = 0

    def _make_optimizer(self) -> N.OptimizerState:
        return N.OptimizerState(kind=self.config.optimizer, lr=self.config.lr)

    def train_step(self, env) -> tuple[float, int] | None:
        """One environment interaction plus scheduled learning.

        Returns (episode_return, episode_length) when this step ended an
        episode, else None.
        """
        cfg = self.config
        if self._obs is None:
            self._obs = np.asarray(env.reset(), dtype=self._obs_dtype)
            self._episode_return = 0.0
            self._episode_length = 0

        action = act(self._obs, self._q_values_single, self._pi_probs_single,
                     cfg.epsilon_at(self.steps), self._behavior_mode(),
                     self.rng_act, cfg.n_actions)
        res = env.step(action)
        self.steps += 1
        next_obs = np.asarray(res.observation, dtype=self._obs_dtype)
        self.buffer.push(Transition(self._obs, action, res.reward, next_obs,
                                    res.terminal))
        self._episode_return += res.reward
        self._episode_length += 1

        episode = None
        if res.terminal or res.truncated:
            episode = (self._episode_return, self._episode_length)
            self._obs = None
        else:
            self._obs = next_obs

        if self.steps % cfg.learn_period == 0 and \
                len(self.buffer) >= max(cfg.min_buffer_fill, 1):
            self._learn()
        if self.steps % cfg.target_period == 0:
            self._sync_targets()
        return episode

    # hooks
    def _behavior_mode(self) -> str:
        raise NotImplementedError

    def _q_values_single(self, obs) -> np.ndarray:
        raise NotImplementedError

    def _pi_probs_single(self, obs) -> np.ndarray:
        raise NotImplementedError

    def _learn(self) -> None:
        raise NotImplementedError

    def _sync_targets(self) -> None:
        raise NotImplementedError

    # checkpoint plumbing shared by both agents
    def _base_state(self, prefix: str) -> dict:
        obs = self._obs if self._obs is not None else np.full(
            self.config.obs_dim, np.nan, dtype=np.float64)
        out = {
            f"{prefix}.counters": np.array([self.steps, self.grad_steps]),
            f"{prefix}.episode": np.array([self._episode_return,
                                           float(self._episode_length)]),
            f"{prefix}.obs": np.array(obs, dtype=np.float64),
            f"{prefix}.q_losses": np.array(self.q_losses, dtype=np.float64),
            f"{prefix}.pi_losses": np.array(self.pi_losses, dtype=np.float64),
            f"{prefix}.alphas": np.array(self.alphas, dtype=np.float64),
            f"{prefix}.rng_act": rng_state_array(self.rng_act),
            f"{prefix}.rng_pi": rng_state_array(self.rng_pi_batch),
        }
        out.update(self.buffer.state_arrays(f"{prefix}.buffer"))
        return out

    def _restore_base(self, data: dict, prefix: str) -> None:
        self.steps, self.grad_steps = (int(x) for x in data[f"{prefix}.counters"])
        ret, length = data[f"{prefix}.episode"]
        self._episode_return = float(ret)
        self._episode_length = int(length)
        obs = data[f"{prefix}.obs"]
        self._obs = None if np.any(np.isnan(obs)) else \
            obs.astype(self._obs_dtype)
        self.q_losses = data[f"{prefix}.q_losses"].tolist()
        self.pi_losses = data[f"{prefix}.pi_losses"].tolist()
        self.alphas = data[f"{prefix}.alphas"].tolist()
        self.rng_act = restore_rng(data[f"{prefix}.rng_act"])
        self.rng_pi_batch = restore_rng(data[f"{prefix}.rng_pi"])
        self.buffer.restore_state(data, f"{prefix}.buffer")


class DqnAgent(_AgentBase):
    """Plain replay q-learning with a target net and epsilon-greedy acting."""

    def __init__(self, config: AgentConfig, seed: int):
        super().__init__(config, seed)
        sizes = (config.obs_dim, *config.hidden, config.q_width)
        self.q = N.MlpNet(sizes, head="linear", seed=self._net_seeds[0],
                          dtype=config.dtype)
        self.q_target = self.q.clone()
        self.opt_q = self._make_optimizer()

    def _behavior_mode(self) -> str:
        return "greedy_critic"

    def _q_values_single(self, obs) -> np.ndarray:
        return self.q.forward(obs)[:self.config.n_actions]

    def _pi_probs_single(self, obs) -> np.ndarray:  # pragma: no cover
        raise RuntimeError("plain q-learning has no policy head")

    def _learn(self) -> None:
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size)
        targets = greedy_q_targets(batch, self.q_target, cfg.gamma, cfg.n_actions)
        loss, grads = N.q_loss_and_grad(self.q, batch.states, batch.actions, targets)
        N.optimizer_step(self.opt_q, self.q.params(), grads)
        self.grad_steps += 1
        self.q_losses.append(loss)

    def _sync_targets(self) -> None:
        self.q_target = self.q.clone()

    def state_arrays(self, prefix: str = "agent") -> dict:
        out = self._base_state(prefix)
        out.update(N.net_arrays(self.q, f"{prefix}.q"))
        out.update(N.net_arrays(self.q_target, f"{prefix}.q_target"))
        out.update(N.optimizer_arrays(self.opt_q, f"{prefix}.opt_q"))
        return out

    def restore_state(self, data: dict, prefix: str = "agent") -> None:
        self._restore_base(data, prefix)
        self.q = N.net_from_arrays(data, f"{prefix}.q")
        self.q_target = N.net_from_arrays(data, f"{prefix}.q_target")
        self.opt_q = N.optimizer_from_arrays(data, f"{prefix}.opt_q")


class ConservativeAgent(_AgentBase):
    """Value learning against a slowly moving distilled policy.

    policy_kind='greedy_oracle' replaces the policy nets by the exact greedy
    policy of the corresponding value net (online or target); with a constant
    mixture rate of 1 this reduces the value path to plain q-learning.
    """

    def __init__(self, config: AgentConfig, seed: int):
        super().__init__(config, seed)
        sizes_q = (config.obs_dim, *config.hidden, config.q_width)
        self.q = N.MlpNet(sizes_q, head="linear", seed=self._net_seeds[0],
                          dtype=config.dtype)
        self.q_target = self.q.clone()
        self.opt_q = self._make_optimizer()
        if config.policy_kind == "network":
            sizes_pi = (config.obs_dim, *config.hidden, config.n_actions)
            self.pi = N.MlpNet(sizes_pi, head="softmax", seed=self._net_seeds[1],
                               dtype=config.dtype)
            self.pi_target = self.pi.clone()
            self.opt_pi = self._make_optimizer()
        else:
            self.pi = self.pi_target = self.opt_pi = None
        self.rate = R.RateState(kind=config.rate_kind, alpha0=config.alpha0,
                                beta1=config.rate_beta1, beta2=config.rate_beta2)

    def _behavior_mode(self) -> str:
        return self.config.behavior

    def _q_values_single(self, obs) -> np.ndarray:
        return self.q.forward(obs)[:self.config.n_actions]

    def _pi_probs_single(self, obs) -> np.ndarray:
        if self.pi is not None:
            return self.pi.forward(obs)
        q = self._q_values_single(obs)
        out = np.zeros_like(q)
        out[int(np.argmax(q))] = 1.0
        return out

    def _pi_probs(self, states: np.ndarray, target: bool) -> np.ndarray:
        """Batch policy probabilities from the net or the greedy oracle."""
        if self.pi is not None:
            net = self.pi_target if target else self.pi
            return net.forward(states)
        q_net = self.q_target if target else self.q
        return greedy_onehot(q_net.forward(states)[:, :self.config.n_actions])

    def _learn(self) -> None:
        cfg = self.config
        # value step
        batch = self.buffer.sample(cfg.batch_size)
        next_probs = self._pi_probs(batch.next_states, target=True)
        targets = conservative_q_targets(batch, self.q_target, next_probs,
                                         cfg.gamma, cfg.n_actions)
        q_loss, grads = N.q_loss_and_grad(self.q, batch.states, batch.actions,
                                          targets)
        N.optimizer_step(self.opt_q, self.q.params(), grads)

        # distillation step on its own batch; the rate statistics come from
        # this exact batch, against the just-updated value net
        pbatch = self.buffer.sample(cfg.batch_size, rng=self.rng_pi_batch)
        q_vals = self.q.forward(pbatch.states)[:, :cfg.n_actions]
        online_probs = self._pi_probs(pbatch.states, target=False)
        self.rate.update(R.batch_stats(q_vals, online_probs))
        alpha = self.rate.current_alpha()
        target_probs = compute_policy_targets(
            self._pi_probs(pbatch.states, target=True), q_vals, alpha)
        if self.pi is not None:
            pi_loss, grads = N.pi_loss_and_grad(self.pi, pbatch.states,
                                                target_probs)
            N.optimizer_step(self.opt_pi, self.pi.params(), grads)
        else:
            pi_loss = 0.0  # the oracle has nothing to fit

        self.grad_steps += 1
        self.q_losses.append(q_loss)
        self.pi_losses.append(pi_loss)
        self.alphas.append(alpha)

    def _sync_targets(self) -> None:
        self.q_target = self.q.clone()
        if self.pi is not None:
            self.pi_target = self.pi.clone()

    def state_arrays(self, prefix: str = "agent") -> dict:
        out = self._base_state(prefix)
        out.update(N.net_arrays(self.q, f"{prefix}.q"))
        out.update(N.net_arrays(self.q_target, f"{prefix}.q_target"))
        out.update(N.optimizer_arrays(self.opt_q, f"{prefix}.opt_q"))
        if self.pi is not None:
            out.update(N.net_arrays(self.pi, f"{prefix}.pi"))
            out.update(N.net_arrays(self.pi_target, f"{prefix}.pi_target"))
            out.update(N.optimizer_arrays(self.opt_pi, f"{prefix}.opt_pi"))
        r = self.rate
        out[f"{prefix}.rate"] = np.array([r.trend, r.q_peak, r.adv_peak,
                                          r.adv_floor, float(r.updates)])
        return out

    def restore_state(self, data: dict, prefix: str = "agent") -> None:
        self._restore_base(data, prefix)
        self.q = N.net_from_arrays(data, f"{prefix}.q")
        self.q_target = N.net_from_arrays(data, f"{prefix}.q_target")
        self.opt_q = N.optimizer_from_arrays(data, f"{prefix}.opt_q")
        if f"{prefix}.pi.head" in data:
            self.pi = N.net_from_arrays(data, f"{prefix}.pi")
            self.pi_target = N.net_from_arrays(data, f"{prefix}.pi_target")
            self.opt_pi = N.optimizer_from_arrays(data, f"{prefix}.opt_pi")
        trend, q_peak, adv_peak, adv_floor, updates = data[f"{prefix}.rate"]
        self.rate.trend = float(trend)
        self.rate.q_peak = float(q_peak)
        self.rate.adv_peak = float(adv_peak)
        self.rate.adv_floor = float(adv_floor)
        self.rate.updates = int(updates)


def make_agent(kind: str, config: AgentConfig, seed: int) -> _AgentBase:
    if kind == "dqn":
        return DqnAgent(config, seed)
    if kind == "dcpi":
        return ConservativeAgent(config, seed)
    raise ValueError(f"unknown agent kind {kind!r}")
