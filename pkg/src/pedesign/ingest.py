"""Build semi-synthetic heteroscedastic environments from regression CSVs.

Dataset rows become actions; an alternating least-squares pass fits the
reward parameter and the noise-covariance matrix, so simulated rewards mimic
the dataset's mean and noise-scale structure.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .estimators import SingularSystemError, fit_sigma, ols_fit, wls_fit
from .model import Environment, TargetPolicy

RIDGE_FALLBACK = 1e-6
WEIGHT_FLOOR_RATIO = 1e-6


@dataclass
class RawTable:
    """Cleaned numeric regression table."""

    features: np.ndarray
    target: np.ndarray
    feature_names: list[str]
    target_name: str
    n_dropped: int = 0

    @property
    def n_rows(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


def load_csv(
    path: str | Path,
    feature_cols: list[str],
    target_col: str,
    normalize: bool = True,
) -> RawTable:
    """Parse a header CSV, dropping rows with missing or non-numeric entries.

    With `normalize`, each feature column is rescaled to unit max-norm,
    which keeps the downstream design matrices well conditioned.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    frame = pd.read_csv(path)
    missing = [c for c in list(feature_cols) + [target_col] if c not in frame.columns]
    if missing:
        raise ValueError(f"columns {missing} not present in {path.name}")
    selected = frame[list(feature_cols) + [target_col]].apply(pd.to_numeric, errors="coerce")
    cleaned = selected.replace([np.inf, -np.inf], np.nan).dropna()
    n_dropped = len(selected) - len(cleaned)
    if cleaned.empty:
        raise ValueError("no usable rows after dropping missing/non-numeric entries")
    features = cleaned[list(feature_cols)].to_numpy(dtype=float)
    if normalize:
        scale = np.abs(features).max(axis=0)
        scale[scale == 0] = 1.0
        features = features / scale
    return RawTable(
        features=features,
        target=cleaned[target_col].to_numpy(dtype=float),
        feature_names=list(feature_cols),
        target_name=target_col,
        n_dropped=n_dropped,
    )


def subsample_actions(table: RawTable, m: int, seed: int) -> RawTable:
    """Uniform without-replacement row subsample, preserving row order."""
    if m > table.n_rows:
        raise ValueError(f"cannot subsample {m} rows from {table.n_rows}")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(table.n_rows, size=m, replace=False))
    return RawTable(
        features=table.features[keep],
        target=table.target[keep],
        feature_names=table.feature_names,
        target_name=table.target_name,
        n_dropped=table.n_dropped,
    )


def _ridge_guarded_ols(features: np.ndarray, target: np.ndarray) -> np.ndarray:
    try:
        return ols_fit(features, target)
    except SingularSystemError:
        return ols_fit(features, target, ridge=RIDGE_FALLBACK)


def fit_semisynthetic(table: RawTable, iters: int = 2) -> Environment:
    """Alternate reward-parameter and covariance fits over a raw table.

    The first pass bootstraps with ordinary least squares; each further pass
    refits the parameter by variance-weighted least squares under the current
    covariance estimate and then refits the covariance to the new squared
    residuals.  Table rows become the environment's actions.
    """
    if iters < 1:
        raise ValueError("need at least one fitting pass")
    dim = table.dim
    if table.n_rows < dim * (dim + 1) // 2:
        raise ValueError("too few rows to identify the covariance matrix")
    norms = np.linalg.norm(table.features, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm rows cannot serve as actions")

    theta = _ridge_guarded_ols(table.features, table.target)
    sigma = fit_sigma(table.features, (table.target - table.features @ theta) ** 2)
    for _ in range(iters - 1):
        variances = np.einsum("ad,de,ae->a", table.features, sigma, table.features)
        variances = np.maximum(variances, 0.0)
        top = float(variances.max())
        if top <= 0.0:
            raise ValueError(
                "fitted covariance is identically zero (zero residuals); "
                "add a variance floor or skip the weighted refit"
            )
        weights = np.maximum(variances, WEIGHT_FLOOR_RATIO * top)
        theta = wls_fit(table.features, table.target, weights)
        sigma = fit_sigma(table.features, (table.target - table.features @ theta) ** 2)

    if float(np.einsum("ad,de,ae->a", table.features, sigma, table.features).max()) <= 0.0:
        raise ValueError(
            "fitted covariance is identically zero (zero residuals); "
            "add a variance floor or use a noiseless model directly"
        )
    return Environment(
        features=table.features,
        theta_star=theta,
        sigma_star=sigma,
        name=f"semisynthetic-{table.target_name}",
    )


def make_threshold_policy(env: Environment, tau: float, p_low: float) -> TargetPolicy:
    """Target policy giving total mass `p_low` uniformly to the actions whose
    variance exceeds the threshold and the rest uniformly to the others."""
    if not 0 < p_low < 1:
        raise ValueError("p_low must lie strictly between 0 and 1")
    variances = env.variances()
    high = variances > tau
    n_high = int(high.sum())
    n_low = env.n_actions - n_high
    if n_high == 0 or n_low == 0:
        raise ValueError(
            f"threshold {tau:g} puts all {env.n_actions} actions on one side "
            f"({n_high} above); pick a level inside the variance range "
            f"[{variances.min():.4g}, {variances.max():.4g}]"
        )
    probs = np.empty(env.n_actions)
    probs[high] = p_low / n_high
    probs[~high] = (1.0 - p_low) / n_low
    return TargetPolicy(probs)
