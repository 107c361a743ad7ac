"""Brownian paths, benchmark SDEs with pathwise references, and dataset assembly.

Reference solutions are pathwise exact where a closed form exists
(geometric Brownian motion) or use an exponential integrator whose bias is
quadratic per step (Ornstein-Uhlenbeck); everything else falls back to
Euler-Maruyama on a fine dyadic grid.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .chaos_basis import encode_values

__all__ = [
    "DyadicPath",
    "OrnsteinUhlenbeck",
    "GeometricBrownianMotion",
    "GaussianLangevin",
    "CustomSde",
    "SdeSpec",
    "Sample",
    "IntegrationBlowupError",
    "sample_brownian",
    "sample_rng",
    "exact_solution",
    "exact_trajectory",
    "euler_maruyama",
    "make_dataset",
    "save_dataset",
    "load_dataset",
]


class IntegrationBlowupError(RuntimeError):
    """Raised when a trajectory leaves the representable range.

    Carries the step index (and time, when known) at which the first
    non-finite state appeared.
    """

    def __init__(self, message: str, step: int, time: float | None = None):
        super().__init__(message)
        self.step = step
        self.time = time


@dataclass(frozen=True)
class DyadicPath:
    """Brownian path values on the dyadic grid k * T / 2^level, k = 0..2^level."""

    horizon: float
    level: int
    values: np.ndarray  # (dim, 2^level + 1)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[None, :]
        if self.horizon <= 0.0 or self.level < 0:
            raise ValueError(f"bad horizon {self.horizon} or level {self.level}")
        expected = (1 << self.level) + 1
        if values.ndim != 2 or values.shape[1] != expected:
            raise ValueError(f"expected (dim, {expected}) values, got {values.shape}")
        if not np.all(values[:, 0] == 0.0):
            raise ValueError("paths must start at zero")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return 1 << self.level

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def component(self, c: int) -> np.ndarray:
        return self.values[c]

    def restrict(self, level: int) -> "DyadicPath":
        """The same path on a coarser dyadic grid."""
        if level > self.level:
            raise ValueError(f"cannot refine level {self.level} to {level}")
        stride = 1 << (self.level - level)
        return DyadicPath(horizon=self.horizon, level=level, values=self.values[:, ::stride])

    def grid_index(self, t: float) -> int:
        """Index of t on the grid; rejects off-grid times."""
        step = self.horizon / self.n_steps
        k = round(t / step)
        if not 0 <= k <= self.n_steps or abs(t - k * step) > 1e-9 * self.horizon:
            raise ValueError(f"time {t} is not on the level-{self.level} grid")
        return int(k)


def sample_rng(seed: int, path_id: int) -> np.random.Generator:
    """Independent, reproducible generator for one sample of a dataset."""
    return np.random.default_rng([seed, path_id])


def sample_brownian(level: int, horizon: float, dim: int = 1, rng=0) -> DyadicPath:
    """Sample a Brownian path on the dyadic grid; increments are iid N(0, T/2^L)."""
    if level < 1:
        raise ValueError(f"level must be >= 1, got {level}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    n = 1 << level
    increments = rng.normal(0.0, math.sqrt(horizon / n), size=(dim, n))
    values = np.zeros((dim, n + 1))
    np.cumsum(increments, axis=1, out=values[:, 1:])
    return DyadicPath(horizon=horizon, level=level, values=values)


@dataclass(frozen=True)
class OrnsteinUhlenbeck:
    """dX = -theta (X - mean) dt + sigma dW."""

    theta: float
    mean: float
    sigma: float
    x0: float = 0.0
    horizon: float = 1.0

    def __post_init__(self) -> None:
        if self.theta <= 0.0 or self.sigma <= 0.0 or self.horizon <= 0.0:
            raise ValueError("need theta > 0, sigma > 0 and horizon > 0")

    dim = 1

    def drift(self, t, x):
        return -self.theta * (x - self.mean)

    def diffusion(self, t, x):
        return self.sigma * np.ones_like(np.asarray(x, dtype=float))

    def mean_at(self, t):
        return self.mean + (self.x0 - self.mean) * np.exp(-self.theta * np.asarray(t, float))


@dataclass(frozen=True)
class GeometricBrownianMotion:
    """dX = mu X dt + sigma X dW, with the pathwise closed-form solution."""

    mu: float
    sigma: float
    x0: float = 1.0
    horizon: float = 1.0

    def __post_init__(self) -> None:
        if self.sigma <= 0.0 or self.horizon <= 0.0:
            raise ValueError("need sigma > 0 and horizon > 0")

    dim = 1

    def drift(self, t, x):
        return self.mu * np.asarray(x, dtype=float)

    def diffusion(self, t, x):
        return self.sigma * np.asarray(x, dtype=float)

    def solution_from_w(self, t, w):
        """x0 * exp((mu - sigma^2 / 2) t + sigma W_t)."""
        t = np.asarray(t, dtype=float)
        return self.x0 * np.exp((self.mu - 0.5 * self.sigma**2) * t + self.sigma * np.asarray(w))


@dataclass(frozen=True)
class GaussianLangevin:
    """Overdamped Langevin dynamics in the potential of N(mean, covariance).

    dX = -covariance^{-1} (X - mean) dt + sqrt(2) dB, componentwise noise.
    """

    covariance: np.ndarray
    mean: np.ndarray
    x0: np.ndarray
    horizon: float = 1.0
    precision: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if cov.shape != (mean.size, mean.size) or x0.size != mean.size:
            raise ValueError("covariance, mean and x0 dimensions disagree")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        eigvals = np.linalg.eigvalsh(cov)
        if eigvals.min() <= 0.0:
            raise ValueError("covariance must be positive definite")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "precision", np.linalg.inv(cov))

    @property
    def dim(self) -> int:
        return self.mean.size

    def drift(self, t, x):
        return -(np.asarray(x, dtype=float) - self.mean) @ self.precision.T

    def diffusion(self, t, x):
        return math.sqrt(2.0) * np.ones_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class CustomSde:
    """User-supplied drift and diagonal diffusion; both must broadcast over a batch axis."""

    drift_fn: Callable
    diffusion_fn: Callable
    x0: np.ndarray
    horizon: float
    dim: int

    def drift(self, t, x):
        return self.drift_fn(t, x)

    def diffusion(self, t, x):
        return self.diffusion_fn(t, x)


SdeSpec = Union[OrnsteinUhlenbeck, GeometricBrownianMotion, GaussianLangevin, CustomSde]


def _ou_trajectory_from_increments(spec: OrnsteinUhlenbeck, increments: np.ndarray,
                                   horizon: float) -> np.ndarray:
    """Exponential-integrator trajectory over the grid, batched over leading axes.

    Equivalent to stepping X_{k+1} = mean + (X_k - mean) e^{-theta dt}
    + sigma e^{-theta dt / 2} dW_k, written as a weighted cumulative sum.
    """
    n = increments.shape[-1]
    dt = horizon / n
    t_grid = np.arange(1, n + 1) * dt
    weighted = np.cumsum(increments * np.exp(spec.theta * t_grid), axis=-1)
    stochastic = spec.sigma * math.exp(-spec.theta * dt / 2.0) * np.exp(-spec.theta * t_grid) * weighted
    out = np.empty(increments.shape[:-1] + (n + 1,))
    out[..., 0] = spec.x0
    out[..., 1:] = spec.mean_at(t_grid) + stochastic
    return out


def exact_trajectory(spec: SdeSpec, path: DyadicPath) -> np.ndarray:
    """Reference trajectory on the path grid, shape (dim, 2^L + 1).

    GBM is pathwise exact; OU uses the midpoint-weighted exponential
    integrator.  Other variants have no closed form here.
    """
    if isinstance(spec, GeometricBrownianMotion):
        return spec.solution_from_w(path.times, path.values[0])[None, :]
    if isinstance(spec, OrnsteinUhlenbeck):
        increments = np.diff(path.values[0])
        return _ou_trajectory_from_increments(spec, increments, path.horizon)[None, :]
    raise ValueError(f"no exact solution for {type(spec).__name__}")


def exact_solution(spec: SdeSpec, path: DyadicPath, t: float) -> float:
    """Reference solution at a grid time t (OU and GBM only)."""
    k = path.grid_index(t)
    return float(exact_trajectory(spec, path)[0, k])


def _em_scan(spec: SdeSpec, increments: np.ndarray, horizon: float) -> np.ndarray:
    """Euler-Maruyama over (..., dim, n) increments; returns (..., dim, n + 1)."""
    n = increments.shape[-1]
    dt = horizon / n
    x0 = np.atleast_1d(np.asarray(spec.x0, dtype=float))
    out = np.empty(increments.shape[:-1] + (n + 1,))
    out[..., 0] = x0
    # state keeps the dim axis last so drift/diffusion broadcast over the batch
    state = np.broadcast_to(x0, increments.shape[:-1]).astype(float).copy()
    times = np.arange(n) * dt
    for k in range(n):
        dw = increments[..., k]
        drift = spec.drift(times[k], state)
        diff = spec.diffusion(times[k], state)
        state = state + drift * dt + diff * dw
        if not np.all(np.isfinite(state)):
            raise IntegrationBlowupError(
                f"non-finite state at step {k + 1} (t = {(k + 1) * dt:g})",
                step=k + 1,
                time=(k + 1) * dt,
            )
        out[..., k + 1] = state
    return out


def euler_maruyama(spec: SdeSpec, path: DyadicPath) -> np.ndarray:
    """Euler-Maruyama trajectory on the path grid, shape (dim, 2^L + 1)."""
    if path.dim != spec.dim:
        raise ValueError(f"path dim {path.dim} does not match spec dim {spec.dim}")
    increments = np.diff(path.values, axis=1)  # (dim, n)
    return _em_scan(spec, increments[None, ...], path.horizon)[0]


def _em_batch(spec: SdeSpec, increments: np.ndarray, horizon: float) -> np.ndarray:
    """Batched Euler-Maruyama: increments (batch, dim, n) -> (batch, dim, n + 1)."""
    return _em_scan(spec, increments, horizon)


@dataclass(frozen=True)
class Sample:
    """One training point: time, state, and per-component path features."""

    path_id: int
    t: float
    x: np.ndarray  # (dim,)
    g: np.ndarray  # (dim, m)


def _snap(t: float, horizon: float, level: int) -> float:
    n = 1 << level
    return round(t / horizon * n) * horizon / n


def make_dataset(spec: SdeSpec, n_samples: int, m: int, sim_level: int,
                 seed: int = 0) -> list[Sample]:
    """Assemble (t, X_t, features) samples from independent paths.

    Each sample owns the generator sample_rng(seed, path_id), from which the
    path increments are drawn first and the uniform time second; t is
    snapped to the simulation grid so the stored state is pathwise
    consistent with the stored features.
    """
    if sim_level < max(1, m.bit_length() - 1):
        raise ValueError(f"sim_level {sim_level} too coarse for basis size {m}")
    langevin_like = not isinstance(spec, (OrnsteinUhlenbeck, GeometricBrownianMotion))
    samples: list[Sample] = []
    chunk: list[tuple[int, float, DyadicPath]] = []
    chunk_size = 512

    def flush() -> None:
        if not chunk:
            return
        increments = np.stack([np.diff(p.values, axis=1) for _, _, p in chunk])
        trajectories = _em_batch(spec, increments, spec.horizon)
        for (path_id, t, path), traj in zip(chunk, trajectories):
            k = path.grid_index(t)
            samples.append(Sample(path_id=path_id, t=t,
                                  x=traj[:, k].copy(),
                                  g=encode_values(path.values, spec.horizon, m)))
        chunk.clear()

    for path_id in range(n_samples):
        rng = sample_rng(seed, path_id)
        path = sample_brownian(sim_level, spec.horizon, spec.dim, rng)
        t = _snap(rng.uniform(0.0, spec.horizon), spec.horizon, sim_level)
        if langevin_like:
            chunk.append((path_id, t, path))
            if len(chunk) >= chunk_size:
                flush()
            continue
        k = path.grid_index(t)
        x = exact_trajectory(spec, path)[:, k]
        samples.append(Sample(path_id=path_id, t=t, x=x.copy(),
                              g=encode_values(path.values, spec.horizon, m)))
    flush()
    return samples


def _format(x: float) -> str:
    return repr(float(x))


def save_dataset(samples: list[Sample], path: str) -> None:
    """Write samples as CSV with header path_id,t,x_0..,g_0.. (exact decimal doubles)."""
    if not samples:
        raise ValueError("cannot infer the schema of an empty dataset")
    dim, m = samples[0].g.shape
    header = (
        ["path_id", "t"]
        + [f"x_{c}" for c in range(dim)]
        + [f"g_{i}" for i in range(dim * m)]
    )
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".csv")
    os.close(fd)
    try:
        with open(tmp, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            for s in samples:
                row = [str(s.path_id), _format(s.t)]
                row += [_format(v) for v in s.x]
                row += [_format(v) for v in s.g.reshape(-1)]
                writer.writerow(row)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path: str) -> list[Sample]:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        dim = sum(1 for name in header if name.startswith("x_"))
        n_g = sum(1 for name in header if name.startswith("g_"))
        if dim == 0 or n_g % dim:
            raise ValueError(f"malformed dataset header: {header}")
        m = n_g // dim
        samples = []
        for row in reader:
            x = np.array([float(v) for v in row[2 : 2 + dim]])
            g = np.array([float(v) for v in row[2 + dim :]]).reshape(dim, m)
            samples.append(Sample(path_id=int(row[0]), t=float(row[1]), x=x, g=g))
    return samples
