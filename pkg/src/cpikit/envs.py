"""Training environments.

CartPole is implemented from scratch with the classic-control constants
(Euler integration, half-pole length 0.5, force 10 N, tau 0.02 s). Episodes
end two ways and the distinction matters for bootstrapping: crossing the
position or angle bound is a terminal event, while hitting the step cap
only truncates the episode and the next value still bootstraps.

Reward conventions:
    paper      +1 while balanced, 0 on the terminating step
    reference  +1 on every step including the terminating one
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import mdp as M


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminal: bool   # failure: bootstrapping stops here
    truncated: bool  # step cap: episode over, value still bootstraps


def rng_state_array(rng: np.random.Generator) -> np.ndarray:
    """Bit generator state as a json string array, for checkpoint files."""
    return np.array(json.dumps(rng.bit_generator.state))


def restore_rng(state_arr: np.ndarray) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(str(state_arr))
    return rng


class CartPole:
    """Balance a pole on a force-controlled cart. Actions: 0 push left, 1 push right."""

    GRAVITY = 9.8
    MASS_CART = 1.0
    MASS_POLE = 0.1
    TOTAL_MASS = MASS_CART + MASS_POLE
    HALF_LENGTH = 0.5                       # distance to the pole's center of mass
    POLE_MOMENT = MASS_POLE * HALF_LENGTH
    FORCE_MAG = 10.0
    TAU = 0.02                              # Euler integration step, seconds
    X_LIMIT = 2.4
    THETA_LIMIT = 12.0 * math.pi / 180.0

    n_actions = 2
    obs_dim = 4

    def __init__(self, seed=0, reward_convention: str = "paper",
                 max_steps: int = 500):
        if reward_convention not in ("paper", "reference"):
            raise ValueError(f"unknown reward convention {reward_convention!r}")
        self.reward_convention = reward_convention
        self.max_steps = max_steps
        self._rng = np.random.default_rng(seed)
        self._state = None
        self._steps = 0
        self._done = True

    def reset(self) -> np.ndarray:
        self._state = self._rng.uniform(-0.05, 0.05, size=4)
        self._steps = 0
        self._done = False
        return self._state.copy()

    def step(self, action: int) -> StepResult:
        if self._done:
            raise RuntimeError("episode over; call reset()")
        if action not in (0, 1):
            raise ValueError(f"invalid action {action!r}")
        x, x_dot, theta, theta_dot = self._state
        force = self.FORCE_MAG if action == 1 else -self.FORCE_MAG
        cos_t = math.cos(theta)
        sin_t = math.sin(theta)

        temp = (force + self.POLE_MOMENT * theta_dot ** 2 * sin_t) / self.TOTAL_MASS
        theta_acc = (self.GRAVITY * sin_t - cos_t * temp) / (
            self.HALF_LENGTH * (4.0 / 3.0 - self.MASS_POLE * cos_t ** 2 / self.TOTAL_MASS))
        x_acc = temp - self.POLE_MOMENT * theta_acc * cos_t / self.TOTAL_MASS

        x = x + self.TAU * x_dot
        x_dot = x_dot + self.TAU * x_acc
        theta = theta + self.TAU * theta_dot
        theta_dot = theta_dot + self.TAU * theta_acc
        self._state = np.array([x, x_dot, theta, theta_dot])
        self._steps += 1

        terminal = abs(x) > self.X_LIMIT or abs(theta) > self.THETA_LIMIT
        truncated = not terminal and self._steps >= self.max_steps
        self._done = terminal or truncated
        if terminal and self.reward_convention == "paper":
            reward = 0.0
        else:
            reward = 1.0
        return StepResult(self._state.copy(), reward, terminal, truncated)

    # checkpoint support
    def state_arrays(self, prefix: str) -> dict:
        state = self._state.copy() if self._state is not None \
            else np.full(4, np.nan)
        return {
            f"{prefix}.state": state,
            f"{prefix}.counters": np.array([self._steps, int(self._done)]),
            f"{prefix}.rng": rng_state_array(self._rng),
        }

    def restore_state(self, data: dict, prefix: str) -> None:
        state = data[f"{prefix}.state"]
        self._state = None if np.any(np.isnan(state)) else state.copy()
        steps, done = data[f"{prefix}.counters"]
        self._steps = int(steps)
        self._done = bool(done)
        self._rng = restore_rng(data[f"{prefix}.rng"])


class TwoArmedBandit:
    """Single-state diagnostic: arm 1 pays 1, arm 0 pays 0, one step per episode."""

    n_actions = 2
    obs_dim = 1

    def __init__(self, seed=0, **_):
        self._rng = np.random.default_rng(seed)  # kept for interface parity
        self._done = True

    def reset(self) -> np.ndarray:
        self._done = False
        return np.ones(1)

    def step(self, action: int) -> StepResult:
        if self._done:
            raise RuntimeError("episode over; call reset()")
        if action not in (0, 1):
            raise ValueError(f"invalid action {action!r}")
        self._done = True
        return StepResult(np.ones(1), float(action == 1), True, False)

    def state_arrays(self, prefix: str) -> dict:
        return {f"{prefix}.counters": np.array([int(self._done)]),
                f"{prefix}.rng": rng_state_array(self._rng)}

    def restore_state(self, data: dict, prefix: str) -> None:
        self._done = bool(data[f"{prefix}.counters"][0])
        self._rng = restore_rng(data[f"{prefix}.rng"])


class OneStepEnv:
    """Every action pays 1 and terminates: q should learn exactly 1 everywhere."""

    n_actions = 2
    obs_dim = 1

    def __init__(self, seed=0, **_):
        self._rng = np.random.default_rng(seed)
        self._done = True

    def reset(self) -> np.ndarray:
        self._done = False
        return np.ones(1)

    def step(self, action: int) -> StepResult:
        if self._done:
            raise RuntimeError("episode over; call reset()")
        self._done = True
        return StepResult(np.ones(1), 1.0, True, False)

    def state_arrays(self, prefix: str) -> dict:
        return {f"{prefix}.counters": np.array([int(self._done)]),
                f"{prefix}.rng": rng_state_array(self._rng)}

    def restore_state(self, data: dict, prefix: str) -> None:
        self._done = bool(data[f"{prefix}.counters"][0])
        self._rng = restore_rng(data[f"{prefix}.rng"])


class ChainWalk:
    """Episodic walk along an 8-state chain, one-hot observations.

    Action 1 moves right, action 0 moves left, both clamped at the ends.
    Reaching the rightmost state pays 1 and ends the episode; every other
    step pays 0, and wandering for 32 steps truncates without a terminal.
    The episodic counterpart of make_chain_mdp's continuing task: q*(s, right)
    under discount g is g^(distance-1), so the greedy path is fully checkable
    by hand.
    """

    N_STATES = 8
    MAX_STEPS = 32

    n_actions = 2
    obs_dim = N_STATES

    def __init__(self, seed=0, **_):
        self._rng = np.random.default_rng(seed)  # kept for interface parity
        self._pos = 0
        self._steps = 0
        self._done = True

    def _obs(self) -> np.ndarray:
        obs = np.zeros(self.N_STATES)
        obs[self._pos] = 1.0
        return obs

    def reset(self) -> np.ndarray:
        self._pos = 0
        self._steps = 0
        self._done = False
        return self._obs()

    def step(self, action: int) -> StepResult:
        if self._done:
            raise RuntimeError("episode over; call reset()")
        if action not in (0, 1):
            raise ValueError(f"invalid action {action!r}")
        self._pos = min(self._pos + 1, self.N_STATES - 1) if action == 1 \
            else max(self._pos - 1, 0)
        self._steps += 1
        terminal = self._pos == self.N_STATES - 1
        truncated = not terminal and self._steps >= self.MAX_STEPS
        self._done = terminal or truncated
        return StepResult(self._obs(), float(terminal), terminal, truncated)

    def state_arrays(self, prefix: str) -> dict:
        counters = np.array([int(self._done), self._pos, self._steps])
        return {f"{prefix}.counters": counters,
                f"{prefix}.rng": rng_state_array(self._rng)}

    def restore_state(self, data: dict, prefix: str) -> None:
        done, pos, steps = (int(x) for x in data[f"{prefix}.counters"])
        self._done = bool(done)
        self._pos = pos
        self._steps = steps
        self._rng = restore_rng(data[f"{prefix}.rng"])


def make_chain_mdp(n_states: int, gamma: float) -> M.TabularMdp:
    """Deterministic left/right chain for the exact tier.

    Action 1 moves right (the goal end, absorbing under action 1), action 0
    moves left. Reward 1 is paid in the rightmost state under any action, so
    v*(s) = gamma^(n-1-s) / (1 - gamma) and always-right is optimal.
    """
    if n_states < 2:
        raise ValueError("need at least two states")
    transitions = np.zeros((n_states, 2, n_states))
    rewards = np.zeros((n_states, 2))
    for s in range(n_states):
        transitions[s, 0, max(s - 1, 0)] = 1.0
        transitions[s, 1, min(s + 1, n_states - 1)] = 1.0
    rewards[n_states - 1, :] = 1.0
    return M.TabularMdp(transitions, rewards, gamma)
