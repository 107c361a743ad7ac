"""Monte-Carlo L2 norms, 1-D Wasserstein-2 by order statistics, and Sinkhorn divergence."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SampleCloud",
    "mc_l2",
    "w2_1d",
    "sinkhorn_divergence",
    "default_epsilon",
]


@dataclass(frozen=True)
class SampleCloud:
    """Uniformly weighted empirical measure on n points in R^d."""

    points: np.ndarray  # (n, d)

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[0] < 1:
            raise ValueError(f"expected (n, d) points with n >= 1, got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ValueError("cloud contains non-finite entries")
        object.__setattr__(self, "points", points)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _cloud(x) -> SampleCloud:
    return x if isinstance(x, SampleCloud) else SampleCloud(points=np.asarray(x, dtype=float))


def mc_l2(values: np.ndarray) -> float:
    """Root mean square of the entries (the Monte-Carlo L2 norm estimator)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("mc_l2 of an empty vector is undefined")
    return float(np.sqrt(np.mean(np.square(values))))


def w2_1d(a, b) -> float:
    """Wasserstein-2 distance between equal-size 1-D clouds via sorted pairing."""
    ca, cb = _cloud(a), _cloud(b)
    if ca.dim != 1 or cb.dim != 1:
        raise ValueError("w2_1d needs one-dimensional clouds")
    if ca.n != cb.n:
        raise ValueError(f"sample counts differ: {ca.n} vs {cb.n}")
    xs = np.sort(ca.points[:, 0])
    ys = np.sort(cb.points[:, 0])
    return float(np.sqrt(np.mean(np.square(xs - ys))))


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    cross = x @ y.T
    sq = np.sum(x * x, axis=1)[:, None] + np.sum(y * y, axis=1)[None, :] - 2.0 * cross
    return np.maximum(sq, 0.0)


def default_epsilon(a, b) -> float:
    """5% of the median pairwise squared distance between the two clouds."""
    cost = _sq_dists(_cloud(a).points, _cloud(b).points)
    med = float(np.median(cost))
    return 0.05 * med if med > 0.0 else 1e-6


def _logsumexp(m: np.ndarray, axis: int) -> np.ndarray:
    top = np.max(m, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(m - top), axis=axis)) + np.squeeze(top, axis=axis)
    return out


def _entropic_ot(x: np.ndarray, y: np.ndarray, epsilon: float, max_iters: int,
                 tol: float) -> tuple[float, int, bool]:
    """Dual value of entropic OT between uniform clouds, by log-domain iterations.

    Returns (value, iterations, converged); convergence means the L1 column
    marginal violation dropped below tol (row marginals are exact after
    each f-update).
    """
    n, m = x.shape[0], y.shape[0]
    cost = _sq_dists(x, y)
    log_a = -np.log(n)
    log_b = -np.log(m)
    f = np.zeros(n)
    g = np.zeros(m)
    iterations = 0
    converged = False
    for iterations in range(1, max_iters + 1):
        g = -epsilon * (_logsumexp((f[:, None] - cost) / epsilon + log_a, axis=0))
        f = -epsilon * (_logsumexp((g[None, :] - cost) / epsilon + log_b, axis=1))
        log_plan = log_a + log_b + (f[:, None] + g[None, :] - cost) / epsilon
        col = np.exp(_logsumexp(log_plan, axis=0))
        violation = float(np.abs(col - 1.0 / m).sum())
        if violation < tol:
            converged = True
            break
    value = float(np.mean(f) + np.mean(g))
    return value, iterations, converged


def _entropic_self(x: np.ndarray, epsilon: float, max_iters: int,
                   tol: float) -> tuple[float, int, bool]:
    """Entropic self-transport cost via the symmetric averaged iteration.

    The self problem has a symmetric optimum f = g; averaging
    f <- (f + T f) / 2 contracts geometrically for every epsilon, unlike
    the alternating updates.
    """
    n = x.shape[0]
    cost = _sq_dists(x, x)
    log_a = -np.log(n)
    f = np.zeros(n)
    iterations = 0
    converged = False
    for iterations in range(1, max_iters + 1):
        mapped = -epsilon * _logsumexp((f[None, :] - cost) / epsilon + log_a, axis=1)
        f = 0.5 * (f + mapped)
        log_plan = 2.0 * log_a + (f[:, None] + f[None, :] - cost) / epsilon
        col = np.exp(_logsumexp(log_plan, axis=0))
        violation = float(np.abs(col - 1.0 / n).sum())
        if violation < tol:
            converged = True
            break
    return float(2.0 * np.mean(f)), iterations, converged


def sinkhorn_divergence(a, b, epsilon: float | None = None, max_iters: int = 500,
                        tol: float = 1e-9) -> float:
    """Debiased entropic optimal-transport divergence with squared-Euclidean cost.

    S(a, b) = OT_eps(a, b) - (OT_eps(a, a) + OT_eps(b, b)) / 2, clamped at
    zero.  Approximates the squared Wasserstein-2 distance for small
    epsilon.  Non-convergence is reported through a RuntimeWarning carrying
    the iteration count, not an exception.
    """
    ca, cb = _cloud(a), _cloud(b)
    if ca.dim != cb.dim:
        raise ValueError(f"cloud dimensions differ: {ca.dim} vs {cb.dim}")
    if epsilon is None:
        epsilon = default_epsilon(ca, cb)
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    self_a, it_aa, ok_aa = _entropic_self(ca.points, epsilon, max_iters, tol)
    if np.array_equal(ca.points, cb.points):
        # the cross problem is the same self problem; reuse it so S(a, a) = 0 exactly
        cross, it_ab, ok_ab = self_a, it_aa, ok_aa
        self_b, it_bb, ok_bb = self_a, it_aa, ok_aa
    else:
        cross, it_ab, ok_ab = _entropic_ot(ca.points, cb.points, epsilon, max_iters, tol)
        self_b, it_bb, ok_bb = _entropic_self(cb.points, epsilon, max_iters, tol)
    if not (ok_ab and ok_aa and ok_bb):
        warnings.warn(
            f"Sinkhorn iterations did not reach tol={tol:g} "
            f"(iterations: ab={it_ab}, aa={it_aa}, bb={it_bb})",
            RuntimeWarning,
            stacklevel=2,
        )
    return max(cross - 0.5 * (self_a + self_b), 0.0)
