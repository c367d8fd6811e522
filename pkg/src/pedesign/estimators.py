"""Least-squares estimators for the heteroscedastic linear reward model."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import quadratic_form_rows, symmetric_from_upper

RANK_TOL = None  # numpy's default relative rank threshold


class SingularSystemError(RuntimeError):
    """Normal equations are rank deficient; retry with a ridge term."""


@dataclass
class Dataset:
    """Collected (action, reward) rows in collection order."""

    actions: np.ndarray
    rewards: np.ndarray
    env_dim: int

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=int)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.actions.shape != self.rewards.shape:
            raise ValueError("actions and rewards must have equal length")
        if self.actions.size and self.actions.min() < 0:
            raise ValueError("negative action index in dataset")

    def __len__(self) -> int:
        return int(self.actions.size)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["round", "action", "reward"])
            for t, (action, reward) in enumerate(zip(self.actions, self.rewards)):
                writer.writerow([t, int(action), f"{reward:.17g}"])


@dataclass
class EstimatePair:
    """Reward-parameter estimate plus the fitted noise-covariance matrix."""

    theta_hat: np.ndarray
    sigma_hat: np.ndarray
    gamma: int = 0


def ols_fit(features_obs: np.ndarray, rewards: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Ordinary (optionally ridge-regularized) least squares.

    With ridge=0 the design must have full column rank; otherwise a
    SingularSystemError tells the caller to fall back to a ridge term.
    """
    features_obs = np.atleast_2d(np.asarray(features_obs, dtype=float))
    rewards = np.asarray(rewards, dtype=float).ravel()
    if features_obs.shape[0] != rewards.shape[0]:
        raise ValueError("observation count mismatch between features and rewards")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    dim = features_obs.shape[1]
    if ridge == 0.0:
        if np.linalg.matrix_rank(features_obs, tol=RANK_TOL) < dim:
            raise SingularSystemError(
                "observed features are rank deficient; refit with a positive ridge"
            )
        solution, *_ = np.linalg.lstsq(features_obs, rewards, rcond=None)
        return solution
    gram = features_obs.T @ features_obs + ridge * np.eye(dim)
    return np.linalg.solve(gram, features_obs.T @ rewards)


def wls_fit(features_obs: np.ndarray, rewards: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Inverse-variance weighted least squares."""
    features_obs = np.atleast_2d(np.asarray(features_obs, dtype=float))
    rewards = np.asarray(rewards, dtype=float).ravel()
    variances = np.asarray(variances, dtype=float).ravel()
    if not (features_obs.shape[0] == rewards.shape[0] == variances.shape[0]):
        raise ValueError("observation count mismatch")
    if np.any(variances <= 0):
        raise ValueError("variances must be strictly positive (clamp upstream)")
    weights = 1.0 / np.sqrt(variances)
    scaled = features_obs * weights[:, None]
    if np.linalg.matrix_rank(scaled, tol=RANK_TOL) < features_obs.shape[1]:
        raise SingularSystemError("weighted normal equations are singular")
    solution, *_ = np.linalg.lstsq(scaled, rewards * weights, rcond=None)
    return solution


def fit_sigma(features_obs: np.ndarray, squared_residuals: np.ndarray) -> np.ndarray:
    """Fit a covariance matrix to squared residuals.

    Solves the least-squares problem over symmetric matrices S matching
    <x_t x_t', S> to each squared residual (minimum-norm solution when the
    outer products do not span), then projects onto the PSD cone by clipping
    negative eigenvalues at zero.
    """
    features_obs = np.atleast_2d(np.asarray(features_obs, dtype=float))
    squared_residuals = np.asarray(squared_residuals, dtype=float).ravel()
    if features_obs.shape[0] == 0:
        raise ValueError("cannot fit a covariance matrix to an empty sample")
    if features_obs.shape[0] != squared_residuals.shape[0]:
        raise ValueError("observation count mismatch")
    if np.any(squared_residuals < 0):
        raise ValueError("squared residuals must be nonnegative")
    rows = quadratic_form_rows(features_obs)
    coefficients, *_ = np.linalg.lstsq(rows, squared_residuals, rcond=None)
    sigma = symmetric_from_upper(coefficients, features_obs.shape[1])
    eigenvalues, eigenvectors = np.linalg.eigh(sigma)
    projected = (eigenvectors * np.maximum(eigenvalues, 0.0)) @ eigenvectors.T
    return (projected + projected.T) / 2.0


def pca_exploration_set(features: np.ndarray, n_directions: int | None = None) -> list[int]:
    """Pick one action per principal direction of the feature second moment.

    Directions come from the uncentered second-moment matrix X'X ordered by
    decreasing explained variance; each direction selects the action with
    maximal absolute cosine similarity, substituting the next-best action on
    collisions, with ties broken by the lowest index.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    n_actions, dim = features.shape
    if n_directions is None:
        n_directions = dim
    norms = np.linalg.norm(features, axis=1)
    valid = norms > 0
    if len(np.unique(features[valid], axis=0)) < n_directions:
        raise ValueError("fewer distinct nonzero actions than requested directions")
    second_moment = features.T @ features
    eigenvalues, eigenvectors = np.linalg.eigh(second_moment)
    order = np.argsort(eigenvalues)[::-1][:n_directions]

    unit = np.zeros_like(features)
    unit[valid] = features[valid] / norms[valid, None]
    chosen: list[int] = []
    used = set()
    for direction_index in order:
        direction = eigenvectors[:, direction_index]
        cosines = np.abs(unit @ direction)
        cosines[~valid] = -np.inf
        for candidate in np.argsort(-cosines, kind="stable"):
            if int(candidate) not in used:
                chosen.append(int(candidate))
                used.add(int(candidate))
                break
    return chosen


def estimate_value(theta_hat: np.ndarray, pi_probs: np.ndarray, features: np.ndarray) -> float:
    """Plug-in value estimate: the policy-weighted mean of estimated rewards."""
    theta_hat = np.asarray(theta_hat, dtype=float).ravel()
    pi_probs = np.asarray(getattr(pi_probs, "probs", pi_probs), dtype=float).ravel()
    features = np.atleast_2d(np.asarray(features, dtype=float))
    if features.shape != (pi_probs.shape[0], theta_hat.shape[0]):
        raise ValueError("dimension mismatch between policy, features, and estimate")
    return float(pi_probs @ (features @ theta_hat))
