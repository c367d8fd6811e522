"""Data-collection agents: the covariance-tracking collector, the
variance-oracle, on-policy, and homoscedastic design baselines.

Agnostic agents only ever see a sealed environment view exposing features
and reward sampling; the oracle view additionally exposes the true
per-action variances (never the reward parameter).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .design import DesignWeights, Objective, allocate, solve_design
from .estimators import (
    Dataset,
    EstimatePair,
    SingularSystemError,
    estimate_value,
    fit_sigma,
    ols_fit,
    pca_exploration_set,
    wls_fit,
)
from .model import Environment, TargetPolicy

AGENT_KINDS = ("speed", "oracle", "on-policy", "a-optimal", "g-optimal")

_COMMON_OPTIONS = {"epsilon", "max_iter"}
_ALLOWED_OPTIONS = {
    "speed": _COMMON_OPTIONS | {"sigma_floor_ratio"},
    "oracle": _COMMON_OPTIONS,
    "on-policy": {"variant"},
    "a-optimal": _COMMON_OPTIONS,
    "g-optimal": _COMMON_OPTIONS,
}

RIDGE_FALLBACK = 1e-6
SIGMA_FLOOR_RATIO = 1e-6


@dataclass(frozen=True)
class AgentSpec:
    """Agent kind plus kind-specific options, validated at construction."""

    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}; expected one of {AGENT_KINDS}")
        allowed = _ALLOWED_OPTIONS[self.kind]
        unknown = set(self.options) - allowed
        if unknown:
            raise ValueError(
                f"options {sorted(unknown)} not recognized for agent {self.kind!r}; "
                f"allowed: {sorted(allowed)}"
            )
        if self.kind == "on-policy":
            variant = self.options.get("variant", "plugin")
            if variant not in ("plugin", "mc"):
                raise ValueError("on-policy variant must be 'plugin' or 'mc'")


class SealedEnvironmentView:
    """Agent-facing view of an environment: features and sampling only."""

    def __init__(self, env: Environment):
        self.__env = env
        self.features = env.features
        self.n_actions = env.n_actions
        self.dim = env.dim

    def sample_rewards(self, action: int, size: int, rng: np.random.Generator) -> np.ndarray:
        return self.__env.sample_rewards(action, size, rng)


class OracleEnvironmentView(SealedEnvironmentView):
    """Sealed view that additionally reveals the true per-action variances."""

    def __init__(self, env: Environment):
        super().__init__(env)
        self._variances = env.variances()

    def variances(self) -> np.ndarray:
        return self._variances


def seal(env: Environment) -> SealedEnvironmentView:
    return SealedEnvironmentView(env)


@dataclass
class CollectionResult:
    dataset: Dataset
    estimate: EstimatePair
    value_estimate: float
    design_used: DesignWeights
    diagnostics: dict


def _sample_allocation(view, counts: np.ndarray, rng: np.random.Generator):
    """Pull each action its allocated number of times (action-major order)."""
    actions = np.repeat(np.arange(len(counts)), counts)
    rewards = np.empty(actions.shape[0])
    offset = 0
    for action, count in enumerate(counts):
        if count == 0:
            continue
        rewards[offset : offset + count] = view.sample_rewards(int(action), int(count), rng)
        offset += count
    return actions, rewards


def explore_covariance(view, gamma: int, rng: np.random.Generator):
    """Forced-exploration phase: round-robin over the principal-direction
    actions, then a least-squares covariance fit to the squared residuals.

    Returns the explored rows, the (ridge if needed) least-squares reward
    estimate they produce, and the fitted covariance matrix.
    """
    explore_set = pca_exploration_set(view.features, view.dim)
    slots = np.array([explore_set[t % len(explore_set)] for t in range(gamma)], dtype=int)
    rewards = np.empty(gamma)
    used_ridge = False
    for action in explore_set:
        where = np.flatnonzero(slots == action)
        if where.size:
            rewards[where] = view.sample_rewards(int(action), int(where.size), rng)
    features_obs = view.features[slots]
    try:
        theta_gamma = ols_fit(features_obs, rewards)
    except SingularSystemError:
        theta_gamma = ols_fit(features_obs, rewards, ridge=RIDGE_FALLBACK)
        used_ridge = True
    squared_residuals = (rewards - features_obs @ theta_gamma) ** 2
    sigma_hat = fit_sigma(features_obs, squared_residuals)
    return slots, rewards, theta_gamma, sigma_hat, used_ridge


def _clamped_variances(features: np.ndarray, sigma_hat: np.ndarray, floor_ratio: float) -> np.ndarray:
    """Per-action variances induced by an estimated covariance matrix, floored
    so they can serve as design scalings and regression weights.  An all-zero
    estimate (noiseless data) falls back to unit variances, under which the
    weighted fit reduces to ordinary least squares."""
    values = np.einsum("ad,de,ae->a", features, sigma_hat, features)
    values = np.maximum(values, 0.0)
    top = float(values.max())
    if top <= 0.0:
        return np.ones(features.shape[0])
    return np.maximum(values, floor_ratio * top)


def _wls_with_ridge_guard(features_obs, rewards, variances, diagnostics):
    try:
        return wls_fit(features_obs, rewards, variances)
    except SingularSystemError:
        # Integer rounding can starve enough actions to lose rank at small
        # budgets; fall back to a weighted ridge solve.
        diagnostics["wls_ridge"] = 1.0
        weights = 1.0 / np.asarray(variances, dtype=float)
        gram = (features_obs * weights[:, None]).T @ features_obs
        gram += RIDGE_FALLBACK * np.eye(features_obs.shape[1])
        return np.linalg.solve(gram, (features_obs * weights[:, None]).T @ rewards)


def run_speed(
    view: SealedEnvironmentView,
    pi: TargetPolicy,
    n: int,
    spec: AgentSpec | None = None,
    rng: np.random.Generator | None = None,
) -> CollectionResult:
    """Explore-then-commit collection that tracks the estimated optimal design.

    Phase 1 forces ceil(sqrt(n)) rounds of exploration over the principal
    feature directions and fits the noise covariance to squared residuals.
    Phase 2 solves the policy-evaluation design under the fitted variances,
    pulls actions by largest-remainder allocation for the remaining rounds,
    and returns the weighted least-squares value estimate computed on the
    post-exploration rows only.
    """
    start = time.perf_counter()
    spec = spec or AgentSpec("speed")
    options = spec.options
    dim, n_actions = view.dim, view.n_actions
    minimum = dim * (dim + 1) // 2 + dim
    if n < minimum:
        raise ValueError(f"budget {n} too small; need at least {minimum} for dim {dim}")

    gamma = math.ceil(math.sqrt(n))
    slots, explore_rewards, theta_gamma, sigma_hat, used_ridge = explore_covariance(view, gamma, rng)
    variances = _clamped_variances(
        view.features, sigma_hat, options.get("sigma_floor_ratio", SIGMA_FLOOR_RATIO)
    )

    epsilon = options.get("epsilon", 1.0 / math.sqrt(n))
    result = solve_design(
        Objective("pe"),
        view.features,
        variances,
        pi,
        epsilon=epsilon,
        max_iter=options.get("max_iter"),
    )
    counts = allocate(result.weights, n - gamma)
    actions, rewards = _sample_allocation(view, counts, rng)

    diagnostics = {
        "gamma": float(gamma),
        "gap": result.gap,
        "iterations": float(result.iterations),
        "converged": float(result.converged),
        "explore_ridge": float(used_ridge),
    }
    theta_n = _wls_with_ridge_guard(
        view.features[actions], rewards, variances[actions], diagnostics
    )
    value = estimate_value(theta_n, pi.probs, view.features)

    dataset = Dataset(
        actions=np.concatenate([slots, actions]),
        rewards=np.concatenate([explore_rewards, rewards]),
        env_dim=dim,
    )
    diagnostics["wall_time"] = time.perf_counter() - start
    return CollectionResult(
        dataset=dataset,
        estimate=EstimatePair(theta_hat=theta_n, sigma_hat=sigma_hat, gamma=gamma),
        value_estimate=value,
        design_used=result.weights,
        diagnostics=diagnostics,
    )


def run_oracle(
    env: Environment | OracleEnvironmentView,
    pi: TargetPolicy,
    n: int,
    rng: np.random.Generator,
    spec: AgentSpec | None = None,
) -> CollectionResult:
    """Collector granted the true variances: solves the policy-evaluation
    design exactly and estimates with correctly weighted least squares.

    Exact zero variances are degenerate for the inverse-variance scaling; a
    noiseless environment falls back to unit weights (every estimator is
    exact there anyway) and near-zero variances are floored.
    """
    start = time.perf_counter()
    spec = spec or AgentSpec("oracle")
    view = env if isinstance(env, SealedEnvironmentView) else OracleEnvironmentView(env)
    variances = view.variances()
    top = float(np.max(variances))
    if top <= 0.0:
        variances = np.ones_like(variances)
    else:
        variances = np.maximum(variances, SIGMA_FLOOR_RATIO * top)

    # The oracle tracks the exact optimal design: its tolerance is fixed and
    # tight rather than budget-dependent like the agnostic collector's.
    epsilon = spec.options.get("epsilon", 1e-7)
    result = solve_design(
        Objective("pe"),
        view.features,
        variances,
        pi,
        epsilon=epsilon,
        max_iter=spec.options.get("max_iter"),
    )
    counts = allocate(result.weights, n)
    actions, rewards = _sample_allocation(view, counts, rng)

    diagnostics = {
        "gap": result.gap,
        "iterations": float(result.iterations),
        "converged": float(result.converged),
    }
    theta_n = _wls_with_ridge_guard(
        view.features[actions], rewards, variances[actions], diagnostics
    )
    value = estimate_value(theta_n, pi.probs, view.features)
    diagnostics["wall_time"] = time.perf_counter() - start
    return CollectionResult(
        dataset=Dataset(actions=actions, rewards=rewards, env_dim=view.dim),
        estimate=EstimatePair(theta_hat=theta_n, sigma_hat=np.zeros((view.dim, view.dim))),
        value_estimate=value,
        design_used=result.weights,
        diagnostics=diagnostics,
    )


def run_on_policy(
    view: SealedEnvironmentView,
    pi: TargetPolicy,
    n: int,
    spec: AgentSpec | None = None,
    rng: np.random.Generator | None = None,
) -> CollectionResult:
    """Collect by the target policy itself.

    The default variant allocates deterministically in proportion to the
    policy and reports the ordinary-least-squares plug-in estimate; the
    "mc" variant samples actions i.i.d. from the policy and reports the
    reward sample mean.
    """
    start = time.perf_counter()
    spec = spec or AgentSpec("on-policy")
    variant = spec.options.get("variant", "plugin")
    design = DesignWeights(pi.probs)
    diagnostics: dict = {}

    if variant == "mc":
        time_order = rng.choice(view.n_actions, size=n, p=pi.probs)
        rewards = np.empty(n)
        for action in range(view.n_actions):
            where = np.flatnonzero(time_order == action)
            if where.size:
                rewards[where] = view.sample_rewards(action, int(where.size), rng)
        value = float(rewards.mean())
        try:
            theta_n = ols_fit(view.features[time_order], rewards)
        except SingularSystemError:
            theta_n = ols_fit(view.features[time_order], rewards, ridge=RIDGE_FALLBACK)
        actions = np.asarray(time_order, dtype=int)
    else:
        spans, _ = pi.span_flags(view.features)
        if not spans:
            raise ValueError("target-policy support does not span the feature space")
        counts = allocate(design, n)
        actions, rewards = _sample_allocation(view, counts, rng)
        theta_n = ols_fit(view.features[actions], rewards)
        value = estimate_value(theta_n, pi.probs, view.features)

    diagnostics["wall_time"] = time.perf_counter() - start
    return CollectionResult(
        dataset=Dataset(actions=actions, rewards=rewards, env_dim=view.dim),
        estimate=EstimatePair(theta_hat=theta_n, sigma_hat=np.zeros((view.dim, view.dim))),
        value_estimate=value,
        design_used=design,
        diagnostics=diagnostics,
    )


def run_design_baseline(
    kind: str,
    view: SealedEnvironmentView,
    pi: TargetPolicy,
    n: int,
    spec: AgentSpec | None = None,
    rng: np.random.Generator | None = None,
) -> CollectionResult:
    """Classical homoscedastic design baseline (trace- or worst-case-optimal)
    with an ordinary-least-squares plug-in estimate."""
    start = time.perf_counter()
    if kind not in ("a-optimal", "g-optimal"):
        raise ValueError("baseline kind must be 'a-optimal' or 'g-optimal'")
    spec = spec or AgentSpec(kind)
    objective = Objective(kind[0], heteroscedastic=False)
    result = solve_design(
        objective,
        view.features,
        epsilon=spec.options.get("epsilon", 1e-7),
        max_iter=spec.options.get("max_iter"),
    )
    counts = allocate(result.weights, n)
    actions, rewards = _sample_allocation(view, counts, rng)
    diagnostics = {
        "gap": result.gap,
        "iterations": float(result.iterations),
        "converged": float(result.converged),
    }
    try:
        theta_n = ols_fit(view.features[actions], rewards)
    except SingularSystemError:
        diagnostics["ols_ridge"] = 1.0
        theta_n = ols_fit(view.features[actions], rewards, ridge=RIDGE_FALLBACK)
    value = estimate_value(theta_n, pi.probs, view.features)
    diagnostics["wall_time"] = time.perf_counter() - start
    return CollectionResult(
        dataset=Dataset(actions=actions, rewards=rewards, env_dim=view.dim),
        estimate=EstimatePair(theta_hat=theta_n, sigma_hat=np.zeros((view.dim, view.dim))),
        value_estimate=value,
        design_used=result.weights,
        diagnostics=diagnostics,
    )


def run_agent(
    spec: AgentSpec,
    env: Environment,
    pi: TargetPolicy,
    n: int,
    rng: np.random.Generator,
) -> CollectionResult:
    """Dispatch one collection run, constructing the appropriate view."""
    if spec.kind == "speed":
        return run_speed(seal(env), pi, n, spec, rng)
    if spec.kind == "oracle":
        return run_oracle(OracleEnvironmentView(env), pi, n, rng, spec)
    if spec.kind == "on-policy":
        return run_on_policy(seal(env), pi, n, spec, rng)
    return run_design_baseline(spec.kind, seal(env), pi, n, spec, rng)
