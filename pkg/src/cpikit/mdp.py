"""Tabular MDP primitives: evaluation/optimality operators, exact solves,
occupancy measures and greedy-advantage quantities.

Conventions used throughout:
    transitions  -- array (S, A, S), transitions[s, a, s'] = P(s' | s, a)
    rewards      -- array (S, A)
    value        -- array (S,)
    q-table      -- array (S, A)
    policy probs -- array (S, A), rows sum to 1

All operations are pure functions on these arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ROW_TOL = 1e-8


@dataclass
class TabularMdp:
    """A finite MDP with dense transition and reward tables."""

    transitions: np.ndarray  # (S, A, S)
    rewards: np.ndarray      # (S, A)
    gamma: float
    reward_bound: float | None = None  # sup-norm bound on rewards; inferred if None

    def __post_init__(self) -> None:
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.transitions.ndim != 3 or self.rewards.ndim != 2:
            raise ValueError("transitions must be (S, A, S), rewards (S, A)")
        s, a, s2 = self.transitions.shape
        if s != s2 or self.rewards.shape != (s, a):
            raise ValueError("shape mismatch between transitions and rewards")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if np.any(self.transitions < -_ROW_TOL):
            raise ValueError("negative transition probability")
        row_sums = self.transitions.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > _ROW_TOL:
            raise ValueError("transition rows must sum to 1")
        if self.reward_bound is None:
            self.reward_bound = float(np.max(np.abs(self.rewards)))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


@dataclass
class TabularPolicy:
    """A stationary stochastic policy, one distribution over actions per state."""

    probs: np.ndarray  # (S, A)

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 2:
            raise ValueError("policy probs must be (S, A)")
        if np.any(self.probs < -_ROW_TOL):
            raise ValueError("negative action probability")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > _ROW_TOL:
            raise ValueError("policy rows must sum to 1")


def uniform_policy(mdp: TabularMdp) -> TabularPolicy:
    probs = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    return TabularPolicy(probs)


def transition_matrix(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """State-to-state transition matrix P_pi(s, s') = sum_a pi(a|s) P(s'|s, a)."""
    return np.einsum("sa,saz->sz", policy.probs, mdp.transitions)


def expected_reward(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """Per-state expected one-step reward r_pi(s) = sum_a pi(a|s) r(s, a)."""
    return np.einsum("sa,sa->s", policy.probs, mdp.rewards)


def solve_policy_value(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """Exact value of a policy via the linear system (I - gamma P_pi) v = r_pi."""
    p_pi = transition_matrix(mdp, policy)
    r_pi = expected_reward(mdp, policy)
    a = np.eye(mdp.n_states) - mdp.gamma * p_pi
    return np.linalg.solve(a, r_pi)


def apply_eval_operator(mdp: TabularMdp, policy: TabularPolicy,
                        v: np.ndarray) -> np.ndarray:
    """One application of the policy evaluation operator: r_pi + gamma P_pi v."""
    return expected_reward(mdp, policy) + mdp.gamma * transition_matrix(mdp, policy) @ v


def q_from_v(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """One-step lookahead q(s, a) = r(s, a) + gamma E[v(s') | s, a].

    The discount multiplies the expected next value; a value vector of zeros
    therefore gives back the reward table.
    """
    return mdp.rewards + mdp.gamma * mdp.transitions @ v


def apply_optimality_operator(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """One application of the Bellman optimality operator: max_a q_v(s, a)."""
    return q_from_v(mdp, v).max(axis=1)


def greedy_policy(q: np.ndarray) -> TabularPolicy:
    """Deterministic argmax policy; ties broken toward the lowest action index."""
    q = np.asarray(q, dtype=float)
    probs = np.zeros_like(q)
    probs[np.arange(q.shape[0]), q.argmax(axis=1)] = 1.0
    return TabularPolicy(probs)


def occupancy_measure(mdp: TabularMdp, policy: TabularPolicy,
                      mu: np.ndarray) -> np.ndarray:
    """Discounted state occupancy d(s) = (1 - gamma) mu^T (I - gamma P_pi)^{-1}.

    mu is a start-state distribution. The result is a probability vector
    (nonnegative, sums to 1) because (1 - gamma) sum_t gamma^t = 1.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (mdp.n_states,):
        raise ValueError("mu must be a length-S vector")
    if np.any(mu < -_ROW_TOL) or abs(mu.sum() - 1.0) > _ROW_TOL:
        raise ValueError("mu must be a probability distribution")
    p_pi = transition_matrix(mdp, policy)
    a = np.eye(mdp.n_states) - mdp.gamma * p_pi
    # Row-vector system d = (1-gamma) mu (I - gamma P)^{-1}, solved transposed.
    return (1.0 - mdp.gamma) * np.linalg.solve(a.T, mu)


def advantage_of_greedy(mdp: TabularMdp, policy: TabularPolicy,
                        mu: np.ndarray) -> tuple[np.ndarray, float]:
    """Advantage of the greedy improvement of `policy` over `policy` itself.

    Per state: max_a q_pi(s, a) - v_pi(s), which is nonnegative by
    construction. Also returns the aggregate under the occupancy measure
    started from mu.
    """
    v_pi = solve_policy_value(mdp, policy)
    q_pi = q_from_v(mdp, v_pi)
    per_state = q_pi.max(axis=1) - v_pi
    d = occupancy_measure(mdp, policy, mu)
    return per_state, float(d @ per_state)


def solve_optimal(mdp: TabularMdp) -> tuple[np.ndarray, TabularPolicy]:
    """Optimal value and an optimal policy, by policy iteration with exact solves.

    Policy iteration over a finite MDP terminates after finitely many
    improvements; the loop bound is a safety net only.
    """
    policy = greedy_policy(mdp.rewards)
    v = solve_policy_value(mdp, policy)
    for _ in range(mdp.n_states * mdp.n_actions + 64):
        improved = greedy_policy(q_from_v(mdp, v))
        if np.array_equal(improved.probs, policy.probs):
            return v, policy
        policy = improved
        v = solve_policy_value(mdp, policy)
    # Greedy cycling can only happen with value ties; the current v is optimal
    # when the optimality operator fixes it, which we verify before giving up.
    if np.max(np.abs(apply_optimality_operator(mdp, v) - v)) < 1e-10:
        return v, policy
    raise RuntimeError("policy iteration failed to terminate")


def random_mdp(n_states: int, n_actions: int, gamma: float,
               rng: np.random.Generator, reward_bound: float = 1.0) -> TabularMdp:
    """Dense random MDP: Dirichlet(1) transition rows, uniform rewards."""
    transitions = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    rewards = rng.uniform(-reward_bound, reward_bound, size=(n_states, n_actions))
    return TabularMdp(transitions, rewards, gamma, reward_bound=reward_bound)


# --- text serialization (consumed by the exact-verify CLI path) ---

_HEADER = "# cpikit mdp v1"


def save_mdp(mdp: TabularMdp, path: str) -> None:
    lines = [
        _HEADER,
        f"n_states {mdp.n_states}",
        f"n_actions {mdp.n_actions}",
        f"gamma {float(mdp.gamma)!r}",
        f"reward_bound {float(mdp.reward_bound)!r}",
        "transition " + " ".join(repr(float(x)) for x in mdp.transitions.ravel()),
        "reward " + " ".join(repr(float(x)) for x in mdp.rewards.ravel()),
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mdp(path: str) -> TabularMdp:
    fields: dict[str, str] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            fields[key] = rest
    try:
        s = int(fields["n_states"])
        a = int(fields["n_actions"])
        gamma = float(fields["gamma"])
        transitions = np.fromiter(
            map(float, fields["transition"].split()), dtype=float).reshape(s, a, s)
        rewards = np.fromiter(
            map(float, fields["reward"].split()), dtype=float).reshape(s, a)
    except (KeyError, ValueError) as exc:
        raise ValueError(f"malformed mdp file {path!r}: {exc}") from exc
    bound = float(fields["reward_bound"]) if "reward_bound" in fields else None
    return TabularMdp(transitions, rewards, gamma, reward_bound=bound)
