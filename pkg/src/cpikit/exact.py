"""Exact conservative policy iteration on tabular MDPs.

Runs the relaxed scheme

    pi_{k+1} = (1 - a_{k+1}) pi_k + a_{k+1} greedy(v_k) + pol_err_{k+1}
    v_{k+1}  = (T_{pi_{k+1}})^m v_k + val_err_{k+1}

with exact linear algebra, records every per-iteration quantity needed to
check the error-propagation bounds, and provides the bound verifier plus
the exact mixture-rate formulas (kakade and spi variants).

Special cases: m = 1 with a = 1 is value iteration, m = inf with a = 1 is
policy iteration, m = 1 with constant a < 1 is a damped value iteration.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import mdp as M

logger = logging.getLogger(__name__)

_DEGENERATE = 1e-12


# --- error injection -------------------------------------------------------

class RandomErrors:
    """Uniform noise injected each iteration, bounded in sup norm.

    Value noise is uniform in [-value_scale, value_scale] per state. Policy
    noise starts from uniform rows recentred to sum to zero; the scheme then
    projects the perturbed policy back onto the simplex and records the
    effective (post-projection) perturbation.
    """

    def __init__(self, value_scale: float = 0.0, policy_scale: float = 0.0,
                 seed: int = 0):
        self.value_scale = value_scale
        self.policy_scale = policy_scale
        self.seed = seed

    def sample(self, k: int, n_states: int, n_actions: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        eps_v = rng.uniform(-self.value_scale, self.value_scale, size=n_states) \
            if self.value_scale > 0 else np.zeros(n_states)
        if self.policy_scale > 0:
            raw = rng.uniform(-self.policy_scale, self.policy_scale,
                              size=(n_states, n_actions))
            eps_pi = raw - raw.mean(axis=1, keepdims=True)
        else:
            eps_pi = np.zeros((n_states, n_actions))
        return eps_v, eps_pi


class ExplicitErrors:
    """Fixed per-iteration error tables, mostly for tests."""

    def __init__(self, value_errors, policy_errors):
        self.value_errors = [np.asarray(e, dtype=float) for e in value_errors]
        self.policy_errors = [np.asarray(e, dtype=float) for e in policy_errors]

    def sample(self, k, n_states, n_actions, rng):
        return self.value_errors[k], self.policy_errors[k]


def project_rows_to_simplex(rows: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    rows = np.asarray(rows, dtype=float)
    n = rows.shape[1]
    u = np.sort(rows, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1)
    j = np.arange(1, n + 1)
    rho = np.count_nonzero(u * j > css - 1.0, axis=1)
    tau = (css[np.arange(rows.shape[0]), rho - 1] - 1.0) / rho
    return np.maximum(rows - tau[:, None], 0.0)


# --- scheme configuration and trace ----------------------------------------

@dataclass
class SchemeConfig:
    """How to run the relaxed scheme.

    m: number of evaluation-operator applications per iteration
       (math.inf solves the policy exactly).
    rate: 'constant' | 'schedule' | 'kakade' | 'spi'.
    alpha: the constant rate (rate='constant').
    schedule: per-iteration rates (rate='schedule').
    mu: start distribution for the exact-rate occupancy terms.
    errors: optional injector with .sample(k, S, A, rng).
    """

    iterations: int
    m: float = 1
    rate: str = "constant"
    alpha: float = 1.0
    schedule: list[float] | None = None
    mu: np.ndarray | None = None
    errors: object | None = None
    error_seed: int = 0

    def validate(self, mdp: M.TabularMdp) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (self.m == math.inf or (isinstance(self.m, (int, np.integer))
                                       and self.m >= 1)):
            raise ValueError(f"m must be a positive integer or math.inf, got {self.m}")
        if self.rate not in ("constant", "schedule", "kakade", "spi"):
            raise ValueError(f"unknown rate source {self.rate!r}")
        if self.rate == "constant" and not 0.0 < self.alpha <= 1.0:
            raise ValueError("constant rate must lie in (0, 1]")
        if self.rate == "schedule":
            if self.schedule is None or len(self.schedule) < self.iterations:
                raise ValueError("schedule must cover every iteration")
            if any(not 0.0 <= a <= 1.0 for a in self.schedule):
                raise ValueError("schedule rates must lie in [0, 1]")
        if self.mu is not None and len(self.mu) != mdp.n_states:
            raise ValueError("mu must have one entry per state")


@dataclass
class SchemeTrace:
    """Everything recorded while running the scheme, indexed by iteration.

    Arrays cover iterations 0..K. Index 0 holds the initial point with zero
    errors and an undefined (nan) rate. bellman_residuals[k] is
    v_k - T_{pi_{k+1}} v_k and therefore has K entries (0..K-1).
    """

    mdp: M.TabularMdp
    m: float
    values: np.ndarray           # (K+1, S)
    policies: np.ndarray         # (K+1, S, A)
    alphas: np.ndarray           # (K+1,), alphas[0] = nan
    value_errors: np.ndarray     # (K+1, S), row 0 zero
    policy_errors: np.ndarray    # (K+1, S, A), row 0 zero, rows sum to 0
    policy_values: np.ndarray    # (K+1, S) exact v_{pi_k}
    v_star: np.ndarray           # (S,)
    optimal_policy: np.ndarray   # (S, A)
    bellman_residuals: np.ndarray  # (K, S)

    @property
    def iterations(self) -> int:
        return self.values.shape[0] - 1

    @property
    def losses(self) -> np.ndarray:
        """v* - v_{pi_k}, the quantity the scheme drives to zero."""
        return self.v_star[None, :] - self.policy_values

    @property
    def dists(self) -> np.ndarray:
        """v* - (v_k - val_err_k): distance of the pre-noise iterate to v*."""
        return self.v_star[None, :] - (self.values - self.value_errors)

    @property
    def shifts(self) -> np.ndarray:
        """(v_k - val_err_k) - v_{pi_k}: evaluation shortfall."""
        return (self.values - self.value_errors) - self.policy_values

    def _gamma_p(self, k: int) -> np.ndarray:
        pol = M.TabularPolicy(self.policies[k])
        return self.mdp.gamma * M.transition_matrix(self.mdp, pol)

    def _policy_error_backup(self, k: int) -> np.ndarray:
        """sum_a pol_err_{k+1}(s, a) (r(s, a) + gamma E[v_k(s')])."""
        q_k = M.q_from_v(self.mdp, self.values[k])
        return np.einsum("sa,sa->s", self.policy_errors[k + 1], q_k)

    def x_term(self, k: int) -> np.ndarray:
        """Residual forcing term, defined for 1 <= k <= K-1."""
        gp = self._gamma_p(k)
        eps = self.value_errors[k]
        return eps - gp @ eps - self._policy_error_backup(k)

    def y_term(self, k: int) -> np.ndarray:
        """Distance forcing term, defined for 1 <= k <= K-1.

        Uses the mixture coefficient a_{k+1} that actually produced
        pi_{k+1}; with a constant rate this coincides with a_k.
        """
        a_next = self.alphas[k + 1]
        gp_k = self._gamma_p(k)
        pol_star = M.TabularPolicy(self.optimal_policy)
        gp_star = self.mdp.gamma * M.transition_matrix(self.mdp, pol_star)
        eps = self.value_errors[k]
        return (-((1.0 - a_next) * gp_k + a_next * gp_star) @ eps
                - self._policy_error_backup(k))


# --- the scheme -------------------------------------------------------------

def _apply_eval_m(mdp: M.TabularMdp, policy: M.TabularPolicy, v: np.ndarray,
                  m: float) -> np.ndarray:
    if m == math.inf:
        return M.solve_policy_value(mdp, policy)
    for _ in range(int(m)):
        v = M.apply_eval_operator(mdp, policy, v)
    return v


def run_scheme(mdp: M.TabularMdp, config: SchemeConfig,
               v0: np.ndarray | None = None,
               pi0: M.TabularPolicy | None = None) -> SchemeTrace:
    """Run the relaxed scheme for config.iterations steps and record a trace."""
    config.validate(mdp)
    n_s, n_a = mdp.n_states, mdp.n_actions
    k_max = config.iterations
    mu = np.asarray(config.mu, dtype=float) if config.mu is not None \
        else np.full(n_s, 1.0 / n_s)

    v = np.zeros(n_s) if v0 is None else np.asarray(v0, dtype=float).copy()
    pol = M.uniform_policy(mdp) if pi0 is None else pi0
    v_star, pi_star = M.solve_optimal(mdp)
    rng = np.random.default_rng(config.error_seed)

    values = np.zeros((k_max + 1, n_s))
    policies = np.zeros((k_max + 1, n_s, n_a))
    alphas = np.full(k_max + 1, np.nan)
    value_errors = np.zeros((k_max + 1, n_s))
    policy_errors = np.zeros((k_max + 1, n_s, n_a))
    policy_values = np.zeros((k_max + 1, n_s))
    residuals = np.zeros((k_max, n_s))

    values[0] = v
    policies[0] = pol.probs
    policy_values[0] = M.solve_policy_value(mdp, pol)

    for k in range(k_max):
        greedy = M.greedy_policy(M.q_from_v(mdp, v))
        if config.rate == "constant":
            alpha = config.alpha
        elif config.rate == "schedule":
            alpha = float(config.schedule[k])
        elif config.rate == "kakade":
            alpha = exact_kakade_rate(mdp, pol, mu)
        else:
            alpha = exact_spi_rate(mdp, pol, mu)

        mixture = (1.0 - alpha) * pol.probs + alpha * greedy.probs
        if config.errors is not None:
            eps_v, eps_pi_raw = config.errors.sample(k + 1, n_s, n_a, rng)
            new_probs = project_rows_to_simplex(mixture + eps_pi_raw)
            eps_pi = new_probs - mixture
        else:
            eps_v = np.zeros(n_s)
            eps_pi = np.zeros((n_s, n_a))
            new_probs = mixture
        new_pol = M.TabularPolicy(new_probs)

        # residual of the pre-update value against the new policy
        residuals[k] = v - M.apply_eval_operator(mdp, new_pol, v)

        v = _apply_eval_m(mdp, new_pol, v, config.m) + eps_v
        pol = new_pol

        values[k + 1] = v
        policies[k + 1] = pol.probs
        alphas[k + 1] = alpha
        value_errors[k + 1] = eps_v
        policy_errors[k + 1] = eps_pi
        policy_values[k + 1] = M.solve_policy_value(mdp, pol)

    return SchemeTrace(mdp=mdp, m=config.m, values=values, policies=policies,
                       alphas=alphas, value_errors=value_errors,
                       policy_errors=policy_errors, policy_values=policy_values,
                       v_star=v_star, optimal_policy=pi_star.probs,
                       bellman_residuals=residuals)


# --- bound verification ------------------------------------------------------

@dataclass
class TheoremReport:
    """Per-iteration slack of the three error-propagation relations.

    For the two one-sided relations the slack is (bound - actual); negative
    slack beyond the tolerance is a violation. For the shortfall identity
    the deviation is |lhs - rhs|. Iteration index i in the arrays refers to
    the relation instance anchored at iteration i + 1.
    """

    residual_slack: np.ndarray    # min over states, relations k = 1..K-1
    distance_slack: np.ndarray    # min over states, relations k = 1..K-1
    shift_deviation: np.ndarray   # max over states, relations k = 1..K
    tolerance: float
    violations: int
    max_violation: float

    @property
    def ok(self) -> bool:
        return self.violations == 0


def _matrix_power_geom(gp: np.ndarray, m: float) -> np.ndarray:
    """(gamma P)^m, with the m = inf limit being the zero matrix."""
    if m == math.inf:
        return np.zeros_like(gp)
    return np.linalg.matrix_power(gp, int(m))


def _partial_geom_sum(gp: np.ndarray, m: float, vec: np.ndarray) -> np.ndarray:
    """sum_{j=1}^{m-1} (gamma P)^j vec; empty for m = 1, full tail for m = inf."""
    if m == math.inf:
        n = gp.shape[0]
        return np.linalg.solve(np.eye(n) - gp, gp @ vec)
    out = np.zeros_like(vec)
    power = vec.copy()
    for _ in range(int(m) - 1):
        power = gp @ power
        out += power
    return out


def verify_theorem1(mdp: M.TabularMdp, trace: SchemeTrace,
                    tolerance: float = 1e-9) -> TheoremReport:
    """Check the recorded trace against the three propagation relations.

    residual:  b_k <= (gamma P_k)^m b_{k-1} + x_k
    distance:  d_{k+1} <= ((1-a)I + a gamma P_*) d_k + y_k
                          + sum_{j=1}^{m-1} (gamma P_{k+1})^j b_k
                          + (1-a) (gamma P_k)^m b_{k-1},  a = a_{k+1}
    shortfall: s_k = (gamma P_k)^m (I - gamma P_k)^{-1} b_{k-1}  (identity)
    """
    if trace.value_errors is None or trace.policy_errors is None:
        raise ValueError("trace is missing error records")
    k_max = trace.iterations
    if k_max < 2:
        raise ValueError("need at least two iterations to check the relations")
    n = mdp.n_states
    eye = np.eye(n)

    b = trace.bellman_residuals
    d = trace.dists
    s = trace.shifts

    res_slack = np.zeros(k_max - 1)
    dist_slack = np.zeros(k_max - 1)
    shift_dev = np.zeros(k_max)

    pol_star = M.TabularPolicy(trace.optimal_policy)
    gp_star = mdp.gamma * M.transition_matrix(mdp, pol_star)

    gp_cache: dict[int, np.ndarray] = {}

    def gp(k: int) -> np.ndarray:
        if k not in gp_cache:
            pol = M.TabularPolicy(trace.policies[k])
            gp_cache[k] = mdp.gamma * M.transition_matrix(mdp, pol)
        return gp_cache[k]

    for k in range(1, k_max + 1):
        gpk_m = _matrix_power_geom(gp(k), trace.m)
        rhs = gpk_m @ np.linalg.solve(eye - gp(k), b[k - 1])
        shift_dev[k - 1] = np.max(np.abs(s[k] - rhs))

        if k == k_max:
            break
        a_next = trace.alphas[k + 1]

        rhs_b = gpk_m @ b[k - 1] + trace.x_term(k)
        res_slack[k - 1] = np.min(rhs_b - b[k])

        rhs_d = (((1.0 - a_next) * eye + a_next * gp_star) @ d[k]
                 + trace.y_term(k)
                 + _partial_geom_sum(gp(k + 1), trace.m, b[k])
                 + (1.0 - a_next) * (gpk_m @ b[k - 1]))
        dist_slack[k - 1] = np.min(rhs_d - d[k + 1])

    worst = [np.max(shift_dev) - tolerance,
             -(np.min(res_slack) + tolerance) if res_slack.size else -math.inf,
             -(np.min(dist_slack) + tolerance) if dist_slack.size else -math.inf]
    violations = int(np.sum(shift_dev > tolerance)
                     + np.sum(res_slack < -tolerance)
                     + np.sum(dist_slack < -tolerance))
    return TheoremReport(residual_slack=res_slack, distance_slack=dist_slack,
                         shift_deviation=shift_dev, tolerance=tolerance,
                         violations=violations,
                         max_violation=max(0.0, max(worst)))


def contraction_envelope(alphas: np.ndarray, gamma: float,
                         initial_gap: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-iteration contraction product and its exponential upper bound.

    Each mixture step contracts the optimality gap by eta_k = 1 - a_k (1 - gamma).
    Returns (prod_{i<=k} eta_i * gap, exp(-(1 - gamma) sum_{i<=k} a_i) * gap);
    the product never exceeds the bound because 1 - x <= exp(-x).
    """
    alphas = np.asarray(alphas, dtype=float)
    etas = 1.0 - alphas * (1.0 - gamma)
    exact = np.cumprod(etas) * initial_gap
    bound = np.exp(-(1.0 - gamma) * np.cumsum(alphas)) * initial_gap
    return exact, bound


# --- exact mixture rates -----------------------------------------------------

def exact_kakade_rate(mdp: M.TabularMdp, policy: M.TabularPolicy,
                      mu: np.ndarray) -> float:
    """Conservative rate (1 - gamma) A / (4 R).

    A is the occupancy-aggregated advantage of the greedy improvement and R
    the reward sup-norm bound. Zero rewards give a zero rate. Clipped to [0, 1].
    """
    if mdp.reward_bound <= 0.0:
        return 0.0
    _, agg = M.advantage_of_greedy(mdp, policy, mu)
    rate = (1.0 - mdp.gamma) * agg / (4.0 * mdp.reward_bound)
    return float(np.clip(rate, 0.0, 1.0))


def exact_spi_rate(mdp: M.TabularMdp, policy: M.TabularPolicy,
                   mu: np.ndarray) -> float:
    """Less conservative rate (1 - gamma)^2 A / (gamma * dist * spread).

    dist is the largest per-state L1 distance between the greedy improvement
    and the current policy, spread the range of the per-state advantage.
    A degenerate denominator (already-greedy policy, or a flat advantage)
    allows the maximal safe step: the rate is 1. Clipped to [0, 1].
    """
    per_state, agg = M.advantage_of_greedy(mdp, policy, mu)
    v_pi = M.solve_policy_value(mdp, policy)
    greedy = M.greedy_policy(M.q_from_v(mdp, v_pi))
    dist = float(np.max(np.abs(greedy.probs - policy.probs).sum(axis=1)))
    spread = float(per_state.max() - per_state.min())
    denom = mdp.gamma * dist * spread
    if denom < _DEGENERATE:
        logger.info("spi rate denominator degenerate (dist=%.3g spread=%.3g); "
                    "using rate 1", dist, spread)
        return 1.0
    rate = (1.0 - mdp.gamma) ** 2 * agg / denom
    return float(np.clip(rate, 0.0, 1.0))
