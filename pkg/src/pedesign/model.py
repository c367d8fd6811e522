"""Heteroscedastic linear-bandit environments, target policies, and fixtures.

An environment holds a finite action set with features ``x(a)``, a reward
parameter ``theta_star`` and a covariance parameter ``sigma_star``.  Rewards
are ``x(a)'theta_star`` plus zero-mean noise whose variance is the quadratic
form ``x(a)'sigma_star x(a)``, so the noise scale varies smoothly with the
action features.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SYMMETRY_TOL = 1e-12
EIGENVALUE_TOL = 1e-10
SIMPLEX_TOL = 1e-12

NOISE_FAMILIES = ("gaussian", "truncated-gaussian", "uniform")

# Truncation tighter than this distorts the noise variance beyond what a
# Monte Carlo check at the 5% level can absorb.
MIN_TRUNCATION_SIGMAS = 2.0


@dataclass(frozen=True)
class NoiseModel:
    """Reward-noise descriptor: distribution family plus truncation half-width."""

    family: str = "truncated-gaussian"
    bound: float | None = None

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}; expected one of {NOISE_FAMILIES}")
        if self.bound is not None and not self.bound > 0:
            raise ValueError("noise bound must be positive")

    def sample(self, variance: float, size: int, rng: np.random.Generator) -> np.ndarray:
        """Draw zero-mean noise with the given variance, honoring the bound."""
        sigma = math.sqrt(max(variance, 0.0))
        if sigma == 0.0:
            return np.zeros(size)
        if self.family == "gaussian":
            return rng.normal(0.0, sigma, size)
        if self.family == "uniform":
            half_width = math.sqrt(3.0) * sigma
            if self.bound is not None and half_width > self.bound + 1e-12:
                raise ValueError("uniform noise width exceeds the stored bound")
            return rng.uniform(-half_width, half_width, size)
        # Truncated Gaussian: resample the out-of-range draws so the noise
        # stays symmetric (exactly zero mean) and never exceeds the bound.
        bound = math.inf if self.bound is None else self.bound
        draws = rng.normal(0.0, sigma, size)
        bad = np.abs(draws) > bound
        while np.any(bad):
            draws[bad] = rng.normal(0.0, sigma, int(bad.sum()))
            bad = np.abs(draws) > bound
        return draws


@dataclass(frozen=True)
class Environment:
    """Ground truth a simulator samples from: features, theta_star, sigma_star, noise."""

    features: np.ndarray
    theta_star: np.ndarray
    sigma_star: np.ndarray
    noise: NoiseModel = field(default_factory=NoiseModel)
    name: str = ""

    def __post_init__(self):
        features = np.atleast_2d(np.asarray(self.features, dtype=float))
        theta = np.asarray(self.theta_star, dtype=float).ravel()
        sigma = np.atleast_2d(np.asarray(self.sigma_star, dtype=float))
        if features.ndim != 2:
            raise ValueError("features must be a 2-D array of shape (actions, dim)")
        n_actions, dim = features.shape
        if theta.shape != (dim,):
            raise ValueError(f"theta_star must have length {dim}")
        if sigma.shape != (dim, dim):
            raise ValueError(f"sigma_star must be {dim}x{dim}")
        if not (np.all(np.isfinite(features)) and np.all(np.isfinite(theta)) and np.all(np.isfinite(sigma))):
            raise ValueError("environment parameters must be finite")
        if np.max(np.abs(sigma - sigma.T)) > SYMMETRY_TOL:
            raise ValueError("sigma_star must be symmetric")
        eigenvalues = np.linalg.eigvalsh(sigma)
        if eigenvalues.min() < -EIGENVALUE_TOL:
            raise ValueError("sigma_star must be positive semi-definite")
        norms = np.linalg.norm(features, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("degenerate zero-norm action features are not allowed")

        noise = self.noise
        variances = np.einsum("ad,de,ae->a", features, sigma, features)
        sigma_max = math.sqrt(max(float(variances.max()), 0.0))
        if noise.bound is None and noise.family != "gaussian":
            # Default truncation at six maximal noise scales: effectively
            # sub-Gaussian while keeping the noise bounded.
            default = 6.0 * sigma_max if sigma_max > 0 else 1.0
            noise = dataclasses.replace(noise, bound=default)
        if noise.family == "truncated-gaussian" and noise.bound is not None and sigma_max > 0:
            if noise.bound < MIN_TRUNCATION_SIGMAS * sigma_max:
                raise ValueError(
                    f"truncation bound {noise.bound:g} is below "
                    f"{MIN_TRUNCATION_SIGMAS:g} maximal noise scales ({sigma_max:g})"
                )

        for arr in (features, theta, sigma):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "theta_star", theta)
        object.__setattr__(self, "sigma_star", sigma)
        object.__setattr__(self, "noise", noise)

    @property
    def n_actions(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def norm_bounds(self) -> tuple[float, float]:
        """Lower and upper bounds on the feature norms, computed at construction."""
        norms = np.linalg.norm(self.features, axis=1)
        return float(norms.min()), float(norms.max())

    def variance_of(self, action: int) -> float:
        """Noise variance of one action: the quadratic form x(a)'sigma_star x(a)."""
        if not 0 <= action < self.n_actions:
            raise IndexError(f"action index {action} out of range [0, {self.n_actions})")
        x = self.features[action]
        return float(x @ self.sigma_star @ x)

    def variances(self) -> np.ndarray:
        """Noise variances of all actions, clipped at zero against roundoff."""
        values = np.einsum("ad,de,ae->a", self.features, self.sigma_star, self.features)
        return np.maximum(values, 0.0)

    def mean_rewards(self) -> np.ndarray:
        return self.features @ self.theta_star

    def sample_rewards(self, action: int, size: int, rng: np.random.Generator) -> np.ndarray:
        """Draw rewards for one action; deterministic given the generator state."""
        if not 0 <= action < self.n_actions:
            raise IndexError(f"action index {action} out of range [0, {self.n_actions})")
        mean = float(self.features[action] @ self.theta_star)
        return mean + self.noise.sample(self.variance_of(action), size, rng)

    def sample_reward(self, action: int, rng: np.random.Generator) -> float:
        return float(self.sample_rewards(action, 1, rng)[0])

    def true_value(self, policy: "TargetPolicy") -> float:
        """Expected reward of the target policy under the true parameters."""
        probs = policy.probs
        if probs.shape[0] != self.n_actions:
            raise ValueError("policy length does not match the number of actions")
        return float(probs @ self.mean_rewards())

    def variance_bounds(self) -> tuple[float, float]:
        """Bounds sandwiching every per-action variance.

        Built from the singular values of sigma_star and the stored feature-norm
        bounds; the smallest singular value times the squared lower norm bound
        is a floor and the largest times the squared upper bound a ceiling.
        """
        singular_values = np.linalg.svd(self.sigma_star, compute_uv=False)
        h_low, h_high = self.norm_bounds
        return (
            float(np.abs(singular_values).min() * h_low**2),
            float(np.abs(singular_values).max() * h_high**2),
        )

    def with_noise(self, noise: NoiseModel) -> "Environment":
        return dataclasses.replace(self, noise=noise)

    def to_dict(self) -> dict:
        return {
            "features": self.features.tolist(),
            "theta_star": self.theta_star.tolist(),
            "sigma_star": self.sigma_star.tolist(),
            "noise": {"family": self.noise.family, "bound": self.noise.bound},
            "metadata": {"name": self.name},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Environment":
        noise_spec = payload.get("noise", {})
        noise = NoiseModel(
            family=noise_spec.get("family", "truncated-gaussian"),
            bound=noise_spec.get("bound"),
        )
        return cls(
            features=np.asarray(payload["features"], dtype=float),
            theta_star=np.asarray(payload["theta_star"], dtype=float),
            sigma_star=np.asarray(payload["sigma_star"], dtype=float),
            noise=noise,
            name=payload.get("metadata", {}).get("name", ""),
        )


@dataclass(frozen=True)
class TargetPolicy:
    """Probability vector over actions whose value is being estimated."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float).ravel()
        if np.any(probs < 0):
            raise ValueError("policy probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"policy probabilities sum to {probs.sum():.17g}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.probs > 0)

    def span_flags(self, features: np.ndarray) -> tuple[bool, bool]:
        """Whether the supported features span R^d and their outer products span
        the symmetric-matrix space.  Reported, never enforced."""
        features = np.asarray(features, dtype=float)
        supported = features[self.support]
        dim = features.shape[1]
        spans_linear = np.linalg.matrix_rank(supported) == dim if supported.size else False
        rows = quadratic_form_rows(supported)
        spans_quadratic = (
            np.linalg.matrix_rank(rows) == dim * (dim + 1) // 2 if rows.size else False
        )
        return spans_linear, spans_quadratic


def quadratic_form_rows(features: np.ndarray) -> np.ndarray:
    """Rows encoding x -> <x x', S> as a linear map over the d(d+1)/2 free
    entries of a symmetric matrix S (upper-triangle parametrization)."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    dim = features.shape[1]
    rows_i, cols_j = np.triu_indices(dim)
    rows = features[:, rows_i] * features[:, cols_j]
    off_diagonal = rows_i != cols_j
    rows[:, off_diagonal] *= 2.0
    return rows


def symmetric_from_upper(coefficients: np.ndarray, dim: int) -> np.ndarray:
    """Inverse of the upper-triangle parametrization used by quadratic_form_rows."""
    matrix = np.zeros((dim, dim))
    rows_i, cols_j = np.triu_indices(dim)
    matrix[rows_i, cols_j] = coefficients
    matrix[cols_j, rows_i] = coefficients
    return matrix


def solve_sigma_for_variances(features: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Least-squares solve for a symmetric matrix matching target variances,
    projected to the PSD cone by clipping negative eigenvalues."""
    rows = quadratic_form_rows(features)
    coefficients, *_ = np.linalg.lstsq(rows, np.asarray(variances, dtype=float), rcond=None)
    sigma = symmetric_from_upper(coefficients, features.shape[1])
    eigenvalues, eigenvectors = np.linalg.eigh(sigma)
    sigma = (eigenvectors * np.maximum(eigenvalues, 0.0)) @ eigenvectors.T
    return (sigma + sigma.T) / 2.0


def fixture_env_E() -> tuple[Environment, TargetPolicy]:
    """Three actions in the plane with one redundant diagonal direction.

    Per-action variances are (1.0, 1.0, 0.05); the covariance matrix is the
    unique symmetric solution of the induced quadratic-form equations.
    """
    features = np.array([
        [1.0, 0.0],
        [0.0, 1.0],
        [1.0 / math.sqrt(2.0), 1.0 / math.sqrt(2.0)],
    ])
    variances = np.array([1.0, 1.0, 0.05])
    sigma = solve_sigma_for_variances(features, variances)
    env = Environment(
        features=features,
        theta_star=np.array([1.0, 0.0]),
        sigma_star=sigma,
        name="env-E",
    )
    return env, TargetPolicy(np.array([0.9, 0.1, 0.0]))


def fixture_tabular2() -> tuple[Environment, TargetPolicy]:
    """Two one-hot actions with variances (1, 4) and a uniform target policy."""
    env = Environment(
        features=np.eye(2),
        theta_star=np.array([1.0, 1.0]),
        sigma_star=np.diag([1.0, 4.0]),
        name="tabular-2",
    )
    return env, TargetPolicy(np.array([0.5, 0.5]))


def fixture_unit_ball(
    dim: int,
    n_actions: int,
    seed: int = 0,
    informative_variance: float = 0.35,
    informative_mass: float = 0.1,
    reward_variance: float = 0.01,
) -> tuple[Environment, TargetPolicy]:
    """Unit-norm actions in three groups: the reward-maximizing axis, the
    informative orthogonal axes carrying high noise, and a low-variance
    cluster of less-informative actions near the reward direction.

    The cluster comes in mirrored pairs around the reward axis so the
    feature second-moment matrix stays axis-aligned.  The target policy
    puts only ``informative_mass`` on the high-variance group; the variance
    contrast makes running the target policy clearly suboptimal, since it
    starves exactly the directions that are expensive to learn.
    """
    if dim < 2:
        raise ValueError("dimension must be at least 2")
    if n_actions < dim:
        raise ValueError("need at least as many actions as dimensions")
    rng = np.random.default_rng(seed)

    features = np.zeros((n_actions, dim))
    features[:dim] = np.eye(dim)
    # Cluster directions cycle through the informative axes and, for d >= 3,
    # their pairwise diagonals so the supported outer products span the
    # symmetric-matrix space once the cluster is large enough.
    off_axis = [np.eye(dim)[j] for j in range(1, dim)]
    for i in range(1, dim):
        for j in range(i + 1, dim):
            off_axis.append((np.eye(dim)[i] + np.eye(dim)[j]) / math.sqrt(2.0))
    n_cluster = n_actions - dim
    for k in range(0, n_cluster - 1, 2):
        angle = rng.uniform(0.08, 0.20)
        direction = off_axis[(k // 2) % len(off_axis)]
        features[dim + k] = math.cos(angle) * features[0] + math.sin(angle) * direction
        features[dim + k + 1] = math.cos(angle) * features[0] - math.sin(angle) * direction
    if n_cluster % 2 == 1:
        angle = rng.uniform(0.08, 0.20)
        direction = off_axis[(n_cluster // 2) % len(off_axis)]
        features[-1] = math.cos(angle) * features[0] + math.sin(angle) * direction

    sigma = np.diag(np.full(dim, informative_variance))
    sigma[0, 0] = reward_variance
    theta = np.zeros(dim)
    theta[0] = 1.0

    probs = np.zeros(n_actions)
    if n_cluster > 0:
        probs[0] = 0.6
        probs[dim:] = 0.3 / n_cluster
    else:
        probs[0] = 1.0 - informative_mass
    probs[1:dim] = informative_mass / (dim - 1)

    env = Environment(
        features=features,
        theta_star=theta,
        sigma_star=sigma,
        name=f"unitball-d{dim}",
    )
    return env, TargetPolicy(probs)


FIXTURE_BUILDERS = {
    "env-E": fixture_env_E,
    "tabular-2": fixture_tabular2,
    "unitball-d2": lambda: fixture_unit_ball(2, 4, seed=7),
    "unitball-d15": lambda: fixture_unit_ball(15, 15 * 15 + 20, seed=7),
}


def load_fixture(name: str) -> tuple[Environment, TargetPolicy]:
    try:
        builder = FIXTURE_BUILDERS[name]
    except KeyError:
        known = ", ".join(sorted(FIXTURE_BUILDERS))
        raise KeyError(f"unknown fixture {name!r}; bundled fixtures: {known}") from None
    return builder()


def save_environment(env: Environment, path: str | Path) -> None:
    Path(path).write_text(json.dumps(env.to_dict(), indent=2) + "\n")


def load_environment(path: str | Path) -> Environment:
    return Environment.from_dict(json.loads(Path(path).read_text()))


def save_policy(policy: TargetPolicy, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"probs": policy.probs.tolist()}, indent=2) + "\n")


def load_policy(path: str | Path) -> TargetPolicy:
    return TargetPolicy(np.asarray(json.loads(Path(path).read_text())["probs"], dtype=float))
