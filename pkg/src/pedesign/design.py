"""Optimal-design objectives and the Frank-Wolfe solver on the simplex.

The policy-evaluation objective measures the variance of the weighted
least-squares value estimate: with z the policy-averaged feature vector and
A(b) the inverse-variance-scaled information matrix of a sampling proportion
b, the loss after n samples is z'A(b)^{-1}z / n.  Classical A-, D-, and
G-optimal objectives are provided for baselines, all solved by Frank-Wolfe
with a duality-gap certificate.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .model import TargetPolicy

CONDITION_LIMIT = 1e12
WEIGHT_TOL = 1e-10
SUPPORT_EPS = 1e-6
LINE_SEARCH_TOL = 1e-12

OBJECTIVE_KINDS = ("pe", "a", "g", "d")


class SingularDesignError(RuntimeError):
    """The design matrix is singular: the weighted support does not span."""


@dataclass(frozen=True)
class DesignWeights:
    """Sampling proportion over actions (a point on the probability simplex)."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float).ravel()
        if np.any(probs < -WEIGHT_TOL):
            raise ValueError("design weights must be nonnegative")
        if abs(probs.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"design weights sum to {probs.sum():.17g}, not 1")
        probs = np.maximum(probs, 0.0)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)


@dataclass
class DesignMatrixBundle:
    a_mat: np.ndarray
    a_inv: np.ndarray
    cond: float


@dataclass(frozen=True)
class Objective:
    """Design objective; `heteroscedastic` toggles the x/sigma feature scaling."""

    kind: str
    heteroscedastic: bool = True

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective {self.kind!r}; expected one of {OBJECTIVE_KINDS}")


@dataclass
class KwCertificate:
    """Equivalence-theorem quantities for a solved design."""

    weighted_avg_norm: float
    max_norm: float
    support_size: int
    trace_inverse: float


@dataclass
class DesignResult:
    weights: DesignWeights
    gap: float
    iterations: int
    converged: bool


def _probs(policy) -> np.ndarray:
    if isinstance(policy, TargetPolicy):
        return policy.probs
    return np.asarray(getattr(policy, "probs", policy), dtype=float).ravel()


def scaled_features(features: np.ndarray, variances: np.ndarray | None) -> np.ndarray:
    """Features divided by per-action noise scale (identity when variances is None)."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    if variances is None:
        return features
    variances = np.asarray(variances, dtype=float).ravel()
    if variances.shape[0] != features.shape[0]:
        raise ValueError("variance vector length must match the action count")
    if np.any(variances <= 0):
        raise ValueError("variances must be strictly positive")
    return features / np.sqrt(variances)[:, None]


def design_matrix(b, features: np.ndarray, variances: np.ndarray | None) -> DesignMatrixBundle:
    """Weighted information matrix of a sampling proportion, with its inverse."""
    weights = _probs(b)
    scaled = scaled_features(features, variances)
    if weights.shape[0] != scaled.shape[0]:
        raise ValueError("weight vector length must match the action count")
    a_mat = (scaled * weights[:, None]).T @ scaled
    a_mat = (a_mat + a_mat.T) / 2.0
    cond = float(np.linalg.cond(a_mat))
    if not np.isfinite(cond) or cond >= CONDITION_LIMIT:
        raise SingularDesignError(
            f"design matrix is singular or ill-conditioned (cond={cond:.3g}); "
            "the weighted support does not span the feature space"
        )
    return DesignMatrixBundle(a_mat=a_mat, a_inv=np.linalg.inv(a_mat), cond=cond)


def policy_feature_sum(pi, features: np.ndarray) -> np.ndarray:
    """Policy-averaged feature vector z = sum_a pi(a) x(a)."""
    return np.atleast_2d(np.asarray(features, dtype=float)).T @ _probs(pi)


def pe_loss(pi, b, variances: np.ndarray, features: np.ndarray, n: float) -> float:
    """Mean squared error of the variance-weighted value estimate at budget n."""
    if n <= 0:
        raise ValueError("budget must be positive")
    bundle = design_matrix(b, features, variances)
    z = policy_feature_sum(pi, features)
    return float(z @ bundle.a_inv @ z) / float(n)


def pe_loss_gradient(pi, b, variances: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Exact gradient of the unnormalized loss z'A(b)^{-1}z in the weights.

    Entry a equals -(z'A^{-1}x~(a))^2, so every entry is nonpositive.
    """
    bundle = design_matrix(b, features, variances)
    z = policy_feature_sum(pi, features)
    scaled = scaled_features(features, variances)
    projections = scaled @ (bundle.a_inv @ z)
    return -(projections**2)


def gradient_bound(pi, b, b_alt, variances: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Per-action bound on the gradient change between two proportions.

    Uses the largest eigenvalue of the policy moment z z' on both terms (the
    smallest is zero whenever d >= 2, so it cannot bound the first term) and
    floors each information matrix by its smallest weighted direction.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    variances = np.asarray(variances, dtype=float).ravel()
    z = policy_feature_sum(pi, features)
    top_eigenvalue = float(z @ z)
    h_high_sq = float(np.max(np.sum(features**2, axis=1)))
    lambda_min_moment = float(np.linalg.eigvalsh(features.T @ features)[0])

    def term(weights: np.ndarray) -> np.ndarray:
        floor = float(np.min(weights / variances)) * lambda_min_moment
        if floor <= 0:
            raise SingularDesignError("proportion has empty support in some direction")
        return top_eigenvalue * h_high_sq / (variances * floor**2)

    return term(_probs(b)) + term(_probs(b_alt))


def _golden_section(func, lo: float, hi: float, tol: float = LINE_SEARCH_TOL) -> float:
    """Minimize a unimodal function on [lo, hi] to the given interval width."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = func(c), func(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = func(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = func(d)
    return (a + b) / 2.0


class _SimplexObjective:
    """Value/gradient of one design criterion over proportions.

    The one-dimensional restrictions toward a vertex (and away from one) are
    rank-one updates of the information matrix, so their values reduce to
    scalar rational/log expressions; line searches evaluate those instead of
    refactorizing the matrix.
    """

    def __init__(self, objective: Objective, features, variances, pi):
        self.kind = "d" if objective.kind == "g" else objective.kind
        self.scaled = scaled_features(features, variances if objective.heteroscedastic else None)
        self.n_actions, self.dim = self.scaled.shape
        if self.kind == "pe":
            if pi is None:
                raise ValueError("the policy-evaluation objective requires a target policy")
            self.z = policy_feature_sum(pi, features)
        else:
            self.z = None

    def matrix(self, weights: np.ndarray) -> np.ndarray:
        a_mat = (self.scaled * weights[:, None]).T @ self.scaled
        return (a_mat + a_mat.T) / 2.0

    def value(self, weights: np.ndarray) -> float:
        a_mat = self.matrix(weights)
        try:
            chol = np.linalg.cholesky(a_mat)
        except np.linalg.LinAlgError:
            return math.inf
        if self.kind == "d":
            return -2.0 * float(np.sum(np.log(np.diag(chol))))
        inv_chol = np.linalg.solve(chol, np.eye(self.dim))
        a_inv = inv_chol.T @ inv_chol
        if self.kind == "a":
            return float(np.trace(a_inv))
        return float(self.z @ a_inv @ self.z)

    def state(self, weights: np.ndarray):
        """Inverse information matrix plus the current value and gradient."""
        a_mat = self.matrix(weights)
        try:
            a_inv = np.linalg.inv(a_mat)
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError("design matrix became singular") from exc
        a_inv = (a_inv + a_inv.T) / 2.0
        if self.kind == "d":
            sign, logdet = np.linalg.slogdet(a_mat)
            value = math.inf if sign <= 0 else -float(logdet)
            grad = -np.sum((self.scaled @ a_inv) * self.scaled, axis=1)
        elif self.kind == "a":
            value = float(np.trace(a_inv))
            grad = -np.sum((self.scaled @ a_inv) ** 2, axis=1)
        else:
            projections = self.scaled @ (a_inv @ self.z)
            value = float(self.z @ a_inv @ self.z)
            grad = -(projections**2)
        return a_inv, value, grad

    def gradient(self, weights: np.ndarray) -> np.ndarray:
        return self.state(weights)[2]

    def segment_profile(self, a_inv: np.ndarray, value: float, vertex: int, towards_vertex: bool):
        """Scalar restriction of the objective along a vertex segment.

        With `towards_vertex` the segment is b + t(e_v - b); otherwise it is
        the away ray b + t(b - e_v).  Both keep the iterate on the simplex and
        change the information matrix by a scaled rank-one term.
        """
        row = self.scaled[vertex]
        p = float(row @ a_inv @ row)
        sign = 1.0 if towards_vertex else -1.0
        if self.kind == "pe":
            q_sq = float(self.z @ a_inv @ row) ** 2
        elif self.kind == "a":
            q_sq = float((a_inv @ row) @ (a_inv @ row))
        else:
            q_sq = 0.0

        def profile(t: float) -> float:
            shrink = 1.0 - sign * t
            denom = shrink + sign * t * p
            if shrink <= 0.0 or denom <= 0.0:
                return math.inf
            if self.kind == "d":
                return value - (self.dim - 1) * math.log(shrink) - math.log(denom)
            return value / shrink - sign * t * q_sq / (shrink * denom)

        return profile


_SOLVE_CACHE: dict[bytes, DesignResult] = {}
_SOLVE_CACHE_LIMIT = 128


def _solve_cache_key(objective, features, variances, pi, epsilon, max_iter) -> bytes:
    digest = hashlib.sha256()
    digest.update(f"{objective.kind}|{objective.heteroscedastic}|{epsilon!r}|{max_iter!r}".encode())
    for label, payload in (("f", features), ("v", variances), ("p", _probs(pi) if pi is not None else None)):
        digest.update(label.encode())
        if payload is None:
            digest.update(b"-")
            continue
        arr = np.ascontiguousarray(np.asarray(payload, dtype=float))
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.digest()


def solve_design(
    objective: Objective,
    features: np.ndarray,
    variances: np.ndarray | None = None,
    pi=None,
    epsilon: float = 1e-7,
    max_iter: int | None = None,
) -> DesignResult:
    """Frank-Wolfe on the simplex from the uniform start, with away steps.

    The returned gap is the standard Frank-Wolfe duality gap of the
    unnormalized criterion; by convexity any gap below `epsilon` certifies an
    epsilon-accurate design.  Away steps keep the iterate support tight and
    give the linear convergence plain Frank-Wolfe lacks near interior optima.
    Step sizes come from an exact line search on the one-dimensional
    restriction (convex, so golden-section applies), falling back to the
    2/(k+2) schedule when roundoff defeats the search.

    The G-optimal criterion is solved through its D-optimal equivalent; the
    certificate of `kw_certificate` then checks the max-norm condition.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    # The solve is a deterministic function of its inputs; memoize on content
    # so repeated identical solves (oracle replications) are free.
    key = _solve_cache_key(objective, features, variances, pi, epsilon, max_iter)
    cached = _SOLVE_CACHE.get(key)
    if cached is not None:
        return cached
    problem = _SimplexObjective(objective, features, variances, pi)
    n_actions = problem.n_actions
    if max_iter is None:
        max_iter = 10 * n_actions * problem.dim

    weights = np.full(n_actions, 1.0 / n_actions)
    if not np.isfinite(problem.value(weights)):
        raise SingularDesignError("features do not span the space: uniform design is singular")

    def finish(result: DesignResult) -> DesignResult:
        if len(_SOLVE_CACHE) >= _SOLVE_CACHE_LIMIT:
            _SOLVE_CACHE.clear()
        _SOLVE_CACHE[key] = result
        return result

    gap = math.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        a_inv, value, grad = problem.state(weights)
        towards = int(np.argmin(grad))
        gap = float(grad @ weights - grad[towards])
        if gap <= epsilon:
            return finish(DesignResult(DesignWeights(weights), gap, iterations - 1, True))

        away_scores = np.where(weights > 0, grad, -math.inf)
        away = int(np.argmax(away_scores))
        away_gap = float(grad[away] - grad @ weights)

        # Dust weights left by renormalization sit below float resolution of
        # the objective; drop them outright instead of line-searching.
        if 0.0 < weights[away] <= 1e-12:
            weights = weights.copy()
            weights[away] = 0.0
            weights /= weights.sum()
            continue

        if gap >= away_gap or weights[away] >= 1.0:
            vertex, is_away, step_max = towards, False, 1.0
        else:
            vertex, is_away = away, True
            step_max = weights[away] / (1.0 - weights[away])

        def make_direction(to_vertex: int, away_step: bool) -> np.ndarray:
            if away_step:
                direction = weights.copy()
                direction[to_vertex] -= 1.0
            else:
                direction = -weights.copy()
                direction[to_vertex] += 1.0
            return direction

        profile = problem.segment_profile(a_inv, value, vertex, towards_vertex=not is_away)
        step = _golden_section(profile, 0.0, step_max)
        # The boundary of an away step removes the vertex from the support;
        # take that drop exactly even when the improvement is below float
        # resolution.
        is_drop = is_away and step >= step_max * (1.0 - 1e-9)
        if is_drop:
            step = step_max
        new_value = profile(step)
        slack = 1e-12 * (1.0 + abs(value)) if is_drop else 0.0
        accepted = new_value <= value + slack if is_drop else (step > 0 and new_value < value)
        if not accepted and is_away:
            vertex, is_away, is_drop, step_max = towards, False, False, 1.0
            profile = problem.segment_profile(a_inv, value, vertex, towards_vertex=True)
            step = _golden_section(profile, 0.0, step_max)
            new_value = profile(step)
            accepted = step > 0 and new_value < value
        direction = make_direction(vertex, is_away)
        if not accepted:
            # Confirm with a full evaluation before giving up: the scalar
            # profile can disagree with the factorization at float precision.
            full = problem.value(weights + step * direction) if step > 0 else math.inf
            if step > 0 and full < value:
                accepted = True
            else:
                fallback = min(2.0 / (iterations + 2.0), step_max)
                if problem.value(weights + fallback * direction) < value:
                    step, accepted = fallback, True
                else:
                    break
        weights = weights + step * direction
        if is_drop:
            weights[away] = 0.0
        weights = np.maximum(weights, 0.0)
        weights /= weights.sum()

    grad = problem.gradient(weights)
    gap = float(grad @ weights - grad.min())
    return finish(DesignResult(DesignWeights(weights), gap, iterations, gap <= epsilon))


def kw_certificate(b, features: np.ndarray, variances: np.ndarray | None = None) -> KwCertificate:
    """Equivalence-theorem certificate for a design.

    The weighted average of the inverse-information norms always equals the
    dimension (a trace identity); the max norm touching the dimension
    certifies D/G-optimality, and the support of an optimal design can be
    pruned to at most d(d+1)/2 atoms.
    """
    weights = _probs(b)
    bundle = design_matrix(b, features, variances)
    scaled = scaled_features(features, variances)
    norms = np.sum((scaled @ bundle.a_inv) * scaled, axis=1)
    return KwCertificate(
        weighted_avg_norm=float(weights @ norms),
        max_norm=float(norms.max()),
        support_size=int(np.sum(weights > SUPPORT_EPS)),
        trace_inverse=float(np.trace(bundle.a_inv)),
    )


def loss_bounds_from_moment(moment: np.ndarray, dim: int, n: float) -> tuple[float, float]:
    """Loss sandwich d*lambda_min(V)/n .. d*lambda_max(V)/n for a moment matrix V."""
    eigenvalues = np.linalg.eigvalsh(np.asarray(moment, dtype=float))
    return (
        max(float(eigenvalues[0]), 0.0) * dim / float(n),
        max(float(eigenvalues[-1]), 0.0) * dim / float(n),
    )


def corollary1_bounds(pi, features: np.ndarray, n: float) -> tuple[float, float]:
    """Eigenvalue sandwich for the loss at a trace-optimal design.

    The policy moment matrix z z' is rank one, so the lower bound is zero
    whenever d >= 2.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    z = policy_feature_sum(pi, features)
    return loss_bounds_from_moment(np.outer(z, z), features.shape[1], n)


def allocate(b, m: int) -> np.ndarray:
    """Integer sample counts for a proportion: floors plus largest remainders.

    Always sums to m exactly; remainder ties go to the lowest action index.
    """
    weights = _probs(b)
    m = int(m)
    if m < 0:
        raise ValueError("sample count must be nonnegative")
    raw = weights * m
    counts = np.floor(raw).astype(int)
    remainder = m - int(counts.sum())
    if remainder > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts
