"""Independent brute-force oracles used to verify the solver paths.

Everything here recomputes losses directly with dense inverses and explicit
sums, deliberately avoiding the library's own loss/gradient code.
"""

from __future__ import annotations

import numpy as np


def direct_pe_loss(pi_probs, b_probs, variances, features, n=1.0) -> float:
    """Policy-evaluation loss evaluated from first principles."""
    features = np.asarray(features, dtype=float)
    scaled = features / np.sqrt(np.asarray(variances, dtype=float))[:, None]
    info = np.zeros((features.shape[1], features.shape[1]))
    for weight, row in zip(b_probs, scaled):
        info += weight * np.outer(row, row)
    z = np.zeros(features.shape[1])
    for prob, row in zip(pi_probs, features):
        z += prob * row
    return float(z @ np.linalg.inv(info) @ z) / n


def simplex_grid(n_actions: int, resolution: float):
    """All points of the regular simplex grid at the given resolution."""
    steps = int(round(1.0 / resolution))
    if n_actions == 2:
        first = np.arange(steps + 1) / steps
        return np.stack([first, 1.0 - first], axis=1)
    if n_actions == 3:
        points = []
        for i in range(steps + 1):
            for j in range(steps + 1 - i):
                points.append((i, j, steps - i - j))
        return np.asarray(points, dtype=float) / steps
    raise NotImplementedError("grid oracle supports 2 or 3 actions")


def grid_search_pe_design(pi_probs, variances, features, resolution=1e-3):
    """Brute-force minimizer of the policy-evaluation loss over the simplex grid."""
    features = np.asarray(features, dtype=float)
    n_actions, dim = features.shape
    grid = simplex_grid(n_actions, resolution)
    scaled = features / np.sqrt(np.asarray(variances, dtype=float))[:, None]
    atoms = np.einsum("ai,aj->aij", scaled, scaled)
    matrices = np.tensordot(grid, atoms, axes=(1, 0))
    z = features.T @ np.asarray(pi_probs, dtype=float)

    losses = np.full(len(grid), np.inf)
    if dim == 2:
        a = matrices[:, 0, 0]
        b = matrices[:, 0, 1]
        c = matrices[:, 1, 1]
        det = a * c - b * b
        usable = det > 1e-12
        numer = c * z[0] ** 2 - 2.0 * b * z[0] * z[1] + a * z[1] ** 2
        losses[usable] = numer[usable] / det[usable]
    else:
        for index, matrix in enumerate(matrices):
            try:
                losses[index] = float(z @ np.linalg.solve(matrix, z))
            except np.linalg.LinAlgError:
                continue
    best = int(np.argmin(losses))
    return grid[best], float(losses[best])


def onpolicy_plugin_mse(pi_probs, variances, features, n=1.0) -> float:
    """Closed-form MSE of the OLS plug-in under a deterministic pi-allocation."""
    features = np.asarray(features, dtype=float)
    pi_probs = np.asarray(pi_probs, dtype=float)
    gram = (features * pi_probs[:, None]).T @ features
    meat = (features * (pi_probs * np.asarray(variances))[:, None]).T @ features
    z = features.T @ pi_probs
    gram_inv = np.linalg.inv(gram)
    return float(z @ gram_inv @ meat @ gram_inv @ z) / n
