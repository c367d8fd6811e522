from __future__ import annotations

import numpy as np
import pytest

from pedesign.model import Environment, TargetPolicy


def random_environment(
    rng: np.random.Generator,
    dim: int,
    n_actions: int,
    unit_norm: bool = False,
    var_lo: float = 0.05,
    var_hi: float = 0.5,
) -> Environment:
    """Random environment with a rotation-mixed PSD covariance."""
    features = rng.normal(size=(n_actions, dim))
    if unit_norm:
        features /= np.linalg.norm(features, axis=1)[:, None]
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    eigenvalues = rng.uniform(var_lo, var_hi, size=dim)
    sigma = (basis * eigenvalues) @ basis.T
    return Environment(
        features=features,
        theta_star=rng.normal(size=dim),
        sigma_star=(sigma + sigma.T) / 2.0,
    )


def random_policy(rng: np.random.Generator, n_actions: int) -> TargetPolicy:
    return TargetPolicy(rng.dirichlet(np.ones(n_actions)))


def random_simplex(rng: np.random.Generator, n_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
