"""Ground-truth chaos coefficients: closed-form oracles, the propagator ODE
solver for affine SDEs, Monte-Carlo projection, truncated-expansion
evaluation, and retained-energy diagnostics.

The closed forms follow from the pathwise solutions: an OU value is
Gaussian, so only degrees 0 and 1 carry mass and the degree-1 mass is the
projection of the exponential kernel onto the basis; a GBM value is a
Gaussian exponential, whose coefficients factor through the Hermite
generating function.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .chaos_basis import (
    GaussianFeatures,
    MultiIndex,
    _wavelet_geometry,
    chaos_values,
    enumerate_multi_indices,
    encode_values,
    haar_antiderivative_curve,
    haar_eval,
    haar_indicator_energy,
    hermite_table,
)
from .sde_lab import (
    GaussianLangevin,
    GeometricBrownianMotion,
    IntegrationBlowupError,
    OrnsteinUhlenbeck,
    SdeSpec,
    _em_batch,
    _ou_trajectory_from_increments,
)

__all__ = [
    "CoefficientTable",
    "AffineSdeCoeffs",
    "ou_coeff",
    "ou_unit_coeff",
    "gbm_coeff",
    "propagator_solve",
    "mc_project_coeff",
    "pce_eval",
    "pce_eval_batch",
    "truncation_energy",
    "parseval_defect",
    "analytic_table",
    "ou_second_moment",
    "gbm_second_moment",
    "ou_retained_energy",
    "gbm_retained_energy",
    "gbm_truncated_eval",
]


@dataclass(frozen=True)
class CoefficientTable:
    """Chaos coefficients on a uniform time grid, one column per multi-index."""

    times: np.ndarray  # (n_t,)
    indices: tuple[MultiIndex, ...]
    values: np.ndarray  # (n_t, n_indices)

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("need at least two grid times")
        if values.shape != (times.size, len(self.indices)):
            raise ValueError(
                f"values shape {values.shape} does not match grid {times.size} x {len(self.indices)}"
            )
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "indices", tuple(self.indices))

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def slots(self) -> int:
        return len(self.indices[0]) if self.indices else 0

    def row(self, t: float) -> np.ndarray:
        """Coefficient vector at time t, linearly interpolated between grid rows."""
        times = self.times
        if not times[0] <= t <= times[-1]:
            raise ValueError(f"time {t} outside table range [{times[0]}, {times[-1]}]")
        k = int(np.searchsorted(times, t, side="right") - 1)
        if k >= times.size - 1:
            return self.values[-1].copy()
        w = (t - times[k]) / (times[k + 1] - times[k])
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def column(self, alpha: MultiIndex) -> np.ndarray:
        try:
            pos = self.indices.index(alpha)
        except ValueError:
            raise KeyError(f"index {alpha.label()} not in table") from None
        return self.values[:, pos]

    def energies(self) -> np.ndarray:
        """Time-integrated squared coefficients, one entry per index."""
        return np.trapezoid(np.square(self.values), self.times, axis=0)

    def top_positions(self, count: int) -> np.ndarray:
        """Positions of the `count` most energetic indices, canonical order on ties."""
        order = np.argsort(-self.energies(), kind="stable")
        return order[:count]

    def save_csv(self, path: str) -> None:
        header = ["t"] + [alpha.label() for alpha in self.indices]
        rows = [
            [repr(float(t))] + [repr(float(v)) for v in row]
            for t, row in zip(self.times, self.values)
        ]
        _atomic_write_csv(path, header, rows)

    @classmethod
    def load_csv(cls, path: str) -> "CoefficientTable":
        with open(path, newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader)
            indices = tuple(MultiIndex.from_label(label) for label in header[1:])
            data = [[float(v) for v in row] for row in reader]
        arr = np.asarray(data)
        return cls(times=arr[:, 0], indices=indices, values=arr[:, 1:])


def _atomic_write_csv(path: str, header: list[str], rows) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".csv")
    os.close(fd)
    try:
        with open(tmp, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _as_fn(value) -> Callable[[float], float]:
    if callable(value):
        return value
    return lambda t, _v=float(value): _v


@dataclass(frozen=True)
class AffineSdeCoeffs:
    """Affine drift and diffusion: mu(t, x) = a(t) x + b(t), sigma(t, x) = c(t) x + h(t).

    Fields accept constants or callables of time.
    """

    a: Callable[[float], float]
    b: Callable[[float], float]
    c: Callable[[float], float]
    h: Callable[[float], float]

    def __post_init__(self) -> None:
        for name in ("a", "b", "c", "h"):
            object.__setattr__(self, name, _as_fn(getattr(self, name)))

    @classmethod
    def from_ou(cls, spec: OrnsteinUhlenbeck) -> "AffineSdeCoeffs":
        return cls(a=-spec.theta, b=spec.theta * spec.mean, c=0.0, h=spec.sigma)

    @classmethod
    def from_gbm(cls, spec: GeometricBrownianMotion) -> "AffineSdeCoeffs":
        return cls(a=spec.mu, b=0.0, c=spec.sigma, h=0.0)


def _ou_unit_curve(i: int, times: np.ndarray, spec: OrnsteinUhlenbeck) -> np.ndarray:
    """Integral over [0, t] of exp(-theta (t - s)) e_i(s) ds for an array of t."""
    times = np.asarray(times, dtype=float)
    theta = spec.theta
    horizon = spec.horizon
    if i == 0:
        return (1.0 - np.exp(-theta * times)) / (theta * math.sqrt(horizon))
    start, mid, end, amp = _wavelet_geometry(i, horizon)

    def piece(lo: float, hi: float) -> np.ndarray:
        upper = np.minimum(times, hi)
        active = upper > lo
        vals = (np.exp(-theta * (times - upper)) - np.exp(-theta * (times - lo))) / theta
        return np.where(active, vals, 0.0)

    return amp * (piece(start, mid) - piece(mid, end))


def ou_unit_coeff(i: int, t: float, spec: OrnsteinUhlenbeck) -> float:
    """Degree-one coefficient of the OU solution on basis slot i (without sigma)."""
    return float(_ou_unit_curve(i, np.asarray([t]), spec)[0])


def ou_coeff(alpha: MultiIndex, t: float, spec: OrnsteinUhlenbeck) -> float:
    """Exact chaos coefficient of the OU solution at time t.

    The solution is Gaussian, so all coefficients of degree >= 2 vanish.
    """
    degree = alpha.degree
    if degree == 0:
        return float(spec.mean_at(t))
    if degree == 1:
        (slot,) = alpha.support()
        return spec.sigma * ou_unit_coeff(slot, t, spec)
    return 0.0


def gbm_coeff(alpha: MultiIndex, t: float, spec: GeometricBrownianMotion) -> float:
    """Exact chaos coefficient of the GBM solution at time t."""
    value = spec.x0 * math.exp(spec.mu * t)
    for i in alpha.support():
        e_i = float(haar_antiderivative_curve(i, np.asarray([t]), spec.horizon)[0])
        k = alpha[i]
        value *= (spec.sigma * e_i) ** k / math.sqrt(math.factorial(k))
    return value


def _ou_coeff_curve(alpha: MultiIndex, times: np.ndarray, spec: OrnsteinUhlenbeck) -> np.ndarray:
    degree = alpha.degree
    if degree == 0:
        return spec.mean_at(times)
    if degree == 1:
        (slot,) = alpha.support()
        return spec.sigma * _ou_unit_curve(slot, times, spec)
    return np.zeros_like(np.asarray(times, dtype=float))


def _gbm_coeff_curve(alpha: MultiIndex, times: np.ndarray,
                     spec: GeometricBrownianMotion) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    value = spec.x0 * np.exp(spec.mu * times)
    for i in alpha.support():
        curve = haar_antiderivative_curve(i, times, spec.horizon)
        k = alpha[i]
        value = value * (spec.sigma * curve) ** k / math.sqrt(math.factorial(k))
    return value


def analytic_table(spec: SdeSpec, max_degree: int, m: int, n_t: int = 257) -> CoefficientTable:
    """Coefficient table filled from the closed-form oracles (OU and GBM only)."""
    times = np.linspace(0.0, spec.horizon, n_t)
    indices = enumerate_multi_indices(max_degree, m)
    if isinstance(spec, OrnsteinUhlenbeck):
        curve = lambda alpha: _ou_coeff_curve(alpha, times, spec)
    elif isinstance(spec, GeometricBrownianMotion):
        curve = lambda alpha: _gbm_coeff_curve(alpha, times, spec)
    else:
        raise ValueError(f"no closed-form coefficients for {type(spec).__name__}")
    values = np.column_stack([curve(alpha) for alpha in indices])
    return CoefficientTable(times=times, indices=tuple(indices), values=values)


def propagator_solve(coeffs: AffineSdeCoeffs, x0: float, max_degree: int, m: int,
                     horizon: float, n_t: int = 257, ode_step: float = 1e-3) -> CoefficientTable:
    """Integrate the coupled coefficient ODE system with classical RK4.

    d x_alpha / dt = a x_alpha + b 1_{alpha = 0}
                     + sum_j sqrt(alpha_j) e_j(t) (c x_{alpha-(j)} + h 1_{alpha-(j) = 0}),
    starting from x_alpha(0) = x0 1_{alpha = 0}.

    The basis functions are piecewise constant between dyadic breakpoints,
    so the grid must contain every breakpoint ((n_t - 1) divisible by m) and
    each grid interval uses the basis values at its midpoint; stepping
    blindly across a jump would cost the scheme its order.  Within an
    interval the step is the largest even subdivision not exceeding
    ode_step.
    """
    if m < 1 or (m & (m - 1)) != 0:
        raise ValueError(f"basis size must be a power of two, got {m}")
    if max_degree < 0:
        raise ValueError(f"max_degree must be >= 0, got {max_degree}")
    if n_t < 2 or (n_t - 1) % m != 0:
        raise ValueError(f"need (n_t - 1) divisible by m, got n_t={n_t}, m={m}")
    if ode_step <= 0.0:
        raise ValueError(f"ode_step must be positive, got {ode_step}")
    indices = enumerate_multi_indices(max_degree, m)
    position = {alpha.alpha: k for k, alpha in enumerate(indices)}
    n_idx = len(indices)

    rows, cols, slots, vals = [], [], [], []
    for pos, alpha in enumerate(indices):
        for j in alpha.support():
            rows.append(pos)
            cols.append(position[alpha.lowered(j).alpha])
            slots.append(j)
            vals.append(math.sqrt(alpha[j]))
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    slots = np.asarray(slots, dtype=np.intp)
    vals = np.asarray(vals, dtype=float)

    unit_positions = np.array(
        [position[tuple(1 if q == j else 0 for q in range(m))] for j in range(m)],
        dtype=np.intp,
    )

    times = np.linspace(0.0, horizon, n_t)
    values = np.zeros((n_t, n_idx))
    state = np.zeros(n_idx)
    state[position[(0,) * m]] = x0
    values[0] = state
    zero_pos = position[(0,) * m]

    for k in range(n_t - 1):
        t0, t1 = times[k], times[k + 1]
        e_vec = np.array([haar_eval(j, 0.5 * (t0 + t1), horizon) for j in range(m)])
        edge_vals = e_vec[slots] * vals

        def rhs(t: float, x: np.ndarray) -> np.ndarray:
            lowered = np.bincount(rows, weights=edge_vals * x[cols], minlength=n_idx)
            out = coeffs.a(t) * x + coeffs.c(t) * lowered
            out[zero_pos] += coeffs.b(t)
            h_t = coeffs.h(t)
            if h_t != 0.0:
                out[unit_positions] += h_t * e_vec
            return out

        substeps = max(1, math.ceil((t1 - t0) / ode_step))
        h = (t1 - t0) / substeps
        t = t0
        for _ in range(substeps):
            k1 = rhs(t, state)
            k2 = rhs(t + 0.5 * h, state + 0.5 * h * k1)
            k3 = rhs(t + 0.5 * h, state + 0.5 * h * k2)
            k4 = rhs(t + h, state + h * k3)
            state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
        if not np.all(np.isfinite(state)):
            bad = int(np.flatnonzero(~np.isfinite(state))[0])
            raise IntegrationBlowupError(
                f"non-finite coefficient {indices[bad].label()} at t = {t1:g}",
                step=k + 1,
                time=t1,
            )
        values[k + 1] = state

    return CoefficientTable(times=times, indices=tuple(indices), values=values)


def mc_project_coeff(spec: SdeSpec, alpha: MultiIndex, t: float, n_paths: int, m: int,
                     seed: int = 0, sim_level: int = 10):
    """Monte-Carlo projection estimate of a chaos coefficient with its standard error.

    Averages X_t * Psi_alpha(G) over independent paths; X_t comes from the
    pathwise reference (OU, GBM) or Euler-Maruyama otherwise.  For
    one-dimensional processes alpha ranges over the m basis slots; for
    d-dimensional ones it ranges over the d * m flattened component-major
    slots and the estimate is returned per component.
    """
    if n_paths < 100:
        raise ValueError(f"need at least 100 paths, got {n_paths}")
    if sim_level < max(1, m.bit_length() - 1):
        raise ValueError(f"sim_level {sim_level} too coarse for basis size {m}")
    dim = spec.dim
    if len(alpha) > dim * m:
        raise ValueError(f"multi-index covers {len(alpha)} slots, only {dim * m} available")
    rng = np.random.default_rng(seed)
    n = 1 << sim_level
    dt = spec.horizon / n
    k = round(t / dt)
    if abs(t - k * dt) > 1e-9 * spec.horizon:
        raise ValueError(f"time {t} is not on the level-{sim_level} grid")
    increments = rng.normal(0.0, math.sqrt(dt), size=(n_paths, dim, n))
    if isinstance(spec, GeometricBrownianMotion):
        w_t = increments[:, 0, :k].sum(axis=1)
        x_t = spec.solution_from_w(t, w_t)[:, None]
    elif isinstance(spec, OrnsteinUhlenbeck):
        x_t = _ou_trajectory_from_increments(spec, increments[:, 0, :], spec.horizon)[:, k]
        x_t = x_t[:, None]
    else:
        x_t = _em_batch(spec, increments, spec.horizon)[:, :, k]
    values = np.zeros((n_paths, dim, n + 1))
    np.cumsum(increments, axis=2, out=values[:, :, 1:])
    g = encode_values(values, spec.horizon, m).reshape(n_paths, dim * m)
    psi = chaos_values([alpha], g)[:, 0]
    products = x_t * psi[:, None]
    estimate = products.mean(axis=0)
    stderr = products.std(axis=0, ddof=1) / math.sqrt(n_paths)
    if dim == 1:
        return float(estimate[0]), float(stderr[0])
    return estimate, stderr


def pce_eval(table: CoefficientTable, features: GaussianFeatures, t: float) -> float:
    """Truncated chaos expansion value at time t for one feature vector."""
    return float(pce_eval_batch(table, features.g[None, :], t)[0])


def pce_eval_batch(table: CoefficientTable, g_matrix: np.ndarray, t: float) -> np.ndarray:
    """Truncated chaos expansion values for a batch of feature vectors."""
    row = table.row(t)
    psi = chaos_values(list(table.indices), g_matrix)
    return psi @ row


def truncation_energy(table: CoefficientTable, t: float) -> float:
    """Retained coefficient energy sum_alpha x_alpha(t)^2 at time t."""
    row = table.row(t)
    return float(np.dot(row, row))


def parseval_defect(table: CoefficientTable, t: float, second_moment: float) -> float:
    """Relative energy gap 1 - retained / E[X_t^2]; near zero means little truncation loss."""
    if second_moment <= 0.0:
        raise ValueError(f"second moment must be positive, got {second_moment}")
    return 1.0 - truncation_energy(table, t) / second_moment


def ou_second_moment(spec: OrnsteinUhlenbeck, t: float) -> float:
    mean = float(spec.mean_at(t))
    var = spec.sigma**2 * (1.0 - math.exp(-2.0 * spec.theta * t)) / (2.0 * spec.theta)
    return mean**2 + var


def gbm_second_moment(spec: GeometricBrownianMotion, t: float) -> float:
    return spec.x0**2 * math.exp((2.0 * spec.mu + spec.sigma**2) * t)


def ou_retained_energy(spec: OrnsteinUhlenbeck, t: float, max_degree: int, m: int) -> float:
    """Energy captured by indices of degree <= max_degree over the first m slots."""
    energy = float(spec.mean_at(t)) ** 2
    if max_degree >= 1:
        curves = [_ou_unit_curve(i, np.asarray([t]), spec)[0] for i in range(m)]
        energy += spec.sigma**2 * float(np.sum(np.square(curves)))
    return energy


def gbm_retained_energy(spec: GeometricBrownianMotion, t: float, max_degree: int,
                        m: int) -> float:
    """Energy captured by indices of degree <= max_degree over the first m slots.

    Grouping the coefficient squares by total degree collapses the sum over
    each degree shell to a power of the captured quadratic mass, so the
    value is exact without enumerating the index set.
    """
    mass = spec.sigma**2 * haar_indicator_energy(t, spec.horizon, m)
    shell = 1.0
    total = 0.0
    for degree in range(max_degree + 1):
        if degree > 0:
            shell *= mass / degree
        total += shell
    return spec.x0**2 * math.exp(2.0 * spec.mu * t) * total


def gbm_truncated_eval(spec: GeometricBrownianMotion, g_matrix: np.ndarray, t: float,
                       max_degree: int, m: int) -> np.ndarray:
    """Closed-form value of the degree/basis-truncated expansion of a GBM.

    Summing each degree shell of the expansion collapses to a single
    Hermite polynomial of the reconstructed Brownian value, which makes
    large (degree, m) combinations evaluable without the index set.
    """
    g_matrix = np.asarray(g_matrix, dtype=float)
    curves = np.array([
        float(haar_antiderivative_curve(i, np.asarray([t]), spec.horizon)[0])
        for i in range(m)
    ])
    u = spec.sigma * curves
    rho = float(np.linalg.norm(u))
    base = spec.x0 * math.exp(spec.mu * t)
    if rho == 0.0:
        return np.full(g_matrix.shape[0], base)
    z = g_matrix[:, :m] @ u / rho
    herm = hermite_table(max_degree, z)
    total = np.zeros_like(z)
    coeff = 1.0
    for degree in range(max_degree + 1):
        if degree > 0:
            coeff *= rho / math.sqrt(degree)
        total += coeff * herm[degree]
    return base * total
