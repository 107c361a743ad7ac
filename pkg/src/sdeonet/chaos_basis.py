"""Haar basis machinery, Hermite polynomials, multi-indices, and the path encoder.

The L2([0, T]) basis used throughout is the Haar family: one constant
function plus dyadic step wavelets on complete levels.  Its Brownian
integrals G_i are iid standard normals and can be computed exactly from
finitely many dyadic path increments, which makes the encoder pathwise
exact rather than a quadrature approximation.

Slot layout for a basis of size m = 2^k: slot 0 holds the constant, slot
i >= 1 holds the level-n wavelet at position j, where n = bit_length(i)
and j = i - 2^(n-1) + 1, so the slots 1..2^k-1 cover the complete levels
1..k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator

import numpy as np

if TYPE_CHECKING:
    from .sde_lab import DyadicPath

__all__ = [
    "HaarIndex",
    "MultiIndex",
    "GaussianFeatures",
    "haar_eval",
    "haar_antiderivative",
    "haar_antiderivative_curve",
    "haar_sq_antiderivative_integral",
    "haar_indicator_energy",
    "haar_tail_energy",
    "hermite_eval",
    "hermite_table",
    "chaos_poly_eval",
    "chaos_values",
    "enumerate_multi_indices",
    "encode_values",
    "encode_path",
    "encode_components",
    "reconstruct_path",
]


def _level_position(i: int) -> tuple[int, int]:
    # n = bit_length(i) and j = i - 2^(n-1) + 1 invert i = 2^(n-1) + j - 1.
    n = int(i).bit_length()
    return n, i - (1 << (n - 1)) + 1


def _slot(level: int, position: int) -> int:
    return (1 << (level - 1)) + position - 1


@dataclass(frozen=True)
class HaarIndex:
    """Flat index into the Haar family.

    Slot 0 is the constant function; slot i >= 1 decomposes uniquely into a
    level n >= 1 and a position j in {1..2^(n-1)}.
    """

    i: int

    def __post_init__(self) -> None:
        if self.i < 0:
            raise ValueError(f"Haar index must be non-negative, got {self.i}")

    @property
    def is_constant(self) -> bool:
        return self.i == 0

    @property
    def level(self) -> int:
        if self.i == 0:
            raise ValueError("the constant function has no wavelet level")
        return _level_position(self.i)[0]

    @property
    def position(self) -> int:
        if self.i == 0:
            raise ValueError("the constant function has no wavelet position")
        return _level_position(self.i)[1]

    @classmethod
    def from_level_position(cls, level: int, position: int) -> "HaarIndex":
        if level < 1 or not 1 <= position <= (1 << (level - 1)):
            raise ValueError(f"invalid wavelet (level={level}, position={position})")
        return cls(_slot(level, position))

    def __index__(self) -> int:
        return self.i


def _check_time(t: float, horizon: float) -> None:
    if horizon <= 0.0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if not 0.0 <= t <= horizon:
        raise ValueError(f"time {t} outside [0, {horizon}]")


def _wavelet_geometry(i: int, horizon: float) -> tuple[float, float, float, float]:
    """Support breakpoints (start, mid, end) and amplitude of wavelet slot i >= 1."""
    n, j = _level_position(i)
    piece = horizon / (1 << n)
    start = (2 * j - 2) * piece
    mid = (2 * j - 1) * piece
    end = (2 * j) * piece
    amp = math.sqrt((1 << (n - 1)) / horizon)
    return start, mid, end, amp


def haar_eval(i: int, t: float, horizon: float) -> float:
    """Value of the i-th Haar function at time t.

    At interior breakpoints the left-limit value is returned; the global
    left edge t = 0 uses the right value so the first piece is closed.
    """
    i = int(i)
    _check_time(t, horizon)
    if i == 0:
        return 1.0 / math.sqrt(horizon)
    start, mid, end, amp = _wavelet_geometry(i, horizon)
    if t < start or t > end:
        return 0.0
    if t == start:
        return amp if start == 0.0 else 0.0
    if t <= mid:
        return amp
    return -amp


def haar_antiderivative(i: int, t: float, horizon: float) -> float:
    """Integral of the i-th Haar function over [0, t]: a hat function for wavelets."""
    i = int(i)
    _check_time(t, horizon)
    if i == 0:
        return t / math.sqrt(horizon)
    start, mid, end, amp = _wavelet_geometry(i, horizon)
    if t <= start or t >= end:
        return 0.0
    if t <= mid:
        return amp * (t - start)
    return amp * (end - t)


def haar_antiderivative_curve(i: int, times: np.ndarray, horizon: float) -> np.ndarray:
    """Vectorized antiderivative of the i-th Haar function over an array of times."""
    i = int(i)
    times = np.asarray(times, dtype=float)
    if times.size and (times.min() < 0.0 or times.max() > horizon):
        raise ValueError("times outside [0, horizon]")
    if i == 0:
        return times / math.sqrt(horizon)
    start, mid, end, amp = _wavelet_geometry(i, horizon)
    return amp * np.clip(np.minimum(times - start, end - times), 0.0, mid - start)


def haar_sq_antiderivative_integral(i: int, t: float, horizon: float) -> float:
    """Exact value of the integral over [0, t] of the squared antiderivative."""
    i = int(i)
    _check_time(t, horizon)
    if i == 0:
        return t**3 / (3.0 * horizon)
    start, mid, end, amp = _wavelet_geometry(i, horizon)
    upper = min(t, end)
    if upper <= start:
        return 0.0
    half = mid - start
    rising = min(upper, mid) - start
    total = amp**2 * rising**3 / 3.0
    if upper > mid:
        total += amp**2 * (half**3 - (end - upper) ** 3) / 3.0
    return total


def haar_indicator_energy(t: float, horizon: float, m: int) -> float:
    """Sum over the first m slots of the squared antiderivatives at time t.

    Converges to t as m grows (the antiderivatives are the basis
    coefficients of the indicator of [0, t]).
    """
    _validate_basis_size(m)
    _check_time(t, horizon)
    return sum(haar_antiderivative(i, t, horizon) ** 2 for i in range(m))


def haar_tail_energy(n: int, t: float, horizon: float, level_cap: int) -> float:
    """Energy of the antiderivatives above level n, truncated at level_cap.

    Computes sum over levels n+1..level_cap of
    sum_j (E_j(t)^2 + integral_0^t E_j^2) with exact piecewise integration.
    Wavelet supports within a level are disjoint, so at most one squared
    antiderivative per level is nonzero at t and the integral splits into
    fully covered supports plus one partial support.
    """
    if n < 1:
        raise ValueError(f"level n must be >= 1, got {n}")
    if level_cap <= n:
        raise ValueError(f"level_cap must exceed n, got cap={level_cap}, n={n}")
    _check_time(t, horizon)
    total = 0.0
    for level in range(n + 1, level_cap + 1):
        width = horizon / (1 << (level - 1))  # support width at this level
        full_integral = horizon**2 / 3.0 * 4.0 ** (-level)
        active = min(int(t // width) + 1, 1 << (level - 1))
        slot = _slot(level, active)
        total += haar_antiderivative(slot, t, horizon) ** 2
        total += (active - 1) * full_integral
        total += haar_sq_antiderivative_integral(slot, t, horizon)
    return total


def hermite_eval(n: int, x):
    """Normalized (orthonormal under the standard Gaussian) Hermite polynomial.

    Evaluated by the stable recurrence
    H_{k+1}(x) = (x * H_k(x) - sqrt(k) * H_{k-1}(x)) / sqrt(k + 1),
    which avoids the factorial overflow of the closed form for large n.
    Accepts scalars or arrays.
    """
    if n < 0:
        raise ValueError(f"degree must be non-negative, got {n}")
    x = np.asarray(x, dtype=float)
    prev = np.ones_like(x)
    if n == 0:
        return prev if prev.ndim else float(prev)
    cur = x.copy()
    for k in range(1, n):
        prev, cur = cur, (x * cur - math.sqrt(k) * prev) / math.sqrt(k + 1)
    return cur if cur.ndim else float(cur)


def hermite_table(max_degree: int, x: np.ndarray) -> np.ndarray:
    """Stack of normalized Hermite values H_0(x)..H_max(x), shape (max_degree+1, ...)."""
    x = np.asarray(x, dtype=float)
    out = np.empty((max_degree + 1,) + x.shape, dtype=float)
    out[0] = 1.0
    if max_degree >= 1:
        out[1] = x
    for k in range(1, max_degree):
        out[k + 1] = (x * out[k] - math.sqrt(k) * out[k - 1]) / math.sqrt(k + 1)
    return out


@dataclass(frozen=True)
class MultiIndex:
    """Tuple of polynomial degrees over basis slots, indexing one chaos polynomial."""

    alpha: tuple[int, ...]

    def __post_init__(self) -> None:
        alpha = tuple(int(a) for a in self.alpha)
        if any(a < 0 for a in alpha):
            raise ValueError(f"multi-index entries must be non-negative: {alpha}")
        object.__setattr__(self, "alpha", alpha)

    @property
    def degree(self) -> int:
        return sum(self.alpha)

    @property
    def support_size(self) -> int:
        return sum(1 for a in self.alpha if a > 0)

    @property
    def is_zero(self) -> bool:
        return self.degree == 0

    def support(self) -> tuple[int, ...]:
        return tuple(i for i, a in enumerate(self.alpha) if a > 0)

    def lowered(self, j: int) -> "MultiIndex":
        """The index with entry j decremented by one."""
        if self.alpha[j] < 1:
            raise ValueError(f"cannot lower entry {j} of {self.alpha}")
        entries = list(self.alpha)
        entries[j] -= 1
        return MultiIndex(tuple(entries))

    def label(self) -> str:
        return "-".join(str(a) for a in self.alpha)

    @classmethod
    def from_label(cls, label: str) -> "MultiIndex":
        return cls(tuple(int(part) for part in label.split("-")))

    def __len__(self) -> int:
        return len(self.alpha)

    def __getitem__(self, j: int) -> int:
        return self.alpha[j]

    def __iter__(self) -> Iterator[int]:
        return iter(self.alpha)


def _compositions(total: int, slots: int) -> Iterator[tuple[int, ...]]:
    if slots == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, slots - 1):
            yield (first,) + rest


def enumerate_multi_indices(max_degree: int, slots: int) -> list[MultiIndex]:
    """All multi-indices over `slots` entries with degree <= max_degree.

    Ordered degree-major, then lexicographically with the leading entry
    largest first, so the zero index comes first and the order is stable
    across runs.  The count is binomial(max_degree + slots, slots).
    """
    if max_degree < 0 or slots < 1:
        raise ValueError(f"need max_degree >= 0 and slots >= 1, got {max_degree}, {slots}")
    out: list[MultiIndex] = []
    for degree in range(max_degree + 1):
        out.extend(MultiIndex(alpha) for alpha in _compositions(degree, slots))
    return out


@dataclass(frozen=True)
class GaussianFeatures:
    """Brownian integrals of the first m basis functions for one path component."""

    g: np.ndarray
    horizon: float

    def __post_init__(self) -> None:
        g = np.asarray(self.g, dtype=float)
        if g.ndim != 1:
            raise ValueError(f"features must be a vector, got shape {g.shape}")
        if self.horizon <= 0.0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        object.__setattr__(self, "g", g)

    def __len__(self) -> int:
        return len(self.g)


def chaos_poly_eval(alpha: MultiIndex, features: GaussianFeatures) -> float:
    """Product of normalized Hermite polynomials H_{alpha_i}(g_i) over the support."""
    if len(alpha) > len(features):
        raise ValueError(
            f"multi-index has {len(alpha)} slots but only {len(features)} features"
        )
    value = 1.0
    for i in alpha.support():
        value *= hermite_eval(alpha[i], features.g[i])
    return value


def chaos_values(indices: list[MultiIndex], g_matrix: np.ndarray) -> np.ndarray:
    """Chaos polynomial values for a batch of feature vectors.

    g_matrix has shape (n_samples, m); the result has shape
    (n_samples, len(indices)).
    """
    g_matrix = np.asarray(g_matrix, dtype=float)
    if g_matrix.ndim != 2:
        raise ValueError(f"expected (n_samples, m) features, got shape {g_matrix.shape}")
    if indices and max(len(a) for a in indices) > g_matrix.shape[1]:
        raise ValueError("multi-index longer than the feature vectors")
    max_degree = max((max(a.alpha, default=0) for a in indices), default=0)
    table = hermite_table(max_degree, g_matrix)  # (deg+1, n, m)
    out = np.ones((g_matrix.shape[0], len(indices)), dtype=float)
    for pos, alpha in enumerate(indices):
        for i in alpha.support():
            out[:, pos] *= table[alpha[i], :, i]
    return out


def _validate_basis_size(m: int) -> None:
    if m < 1 or (m & (m - 1)) != 0:
        raise ValueError(f"basis size must be a power of two, got {m}")


def encode_values(values: np.ndarray, horizon: float, m: int) -> np.ndarray:
    """Encode dyadic path values (..., 2^L + 1) into the first m Brownian integrals.

    The constant slot gets W_T / sqrt(T); wavelet slot (n, j) gets the
    scaled difference of the two adjacent level-n increments.  Requires
    2^L >= m so all needed dyadic points exist.
    """
    _validate_basis_size(m)
    values = np.asarray(values, dtype=float)
    n_points = values.shape[-1]
    if n_points < 2 or (n_points - 1) & (n_points - 2):
        raise ValueError(f"path must have 2^L + 1 values, got {n_points}")
    level = (n_points - 1).bit_length() - 1
    if (1 << level) < m:
        raise ValueError(f"path level {level} too coarse for basis size {m}")
    out = np.empty(values.shape[:-1] + (m,), dtype=float)
    root_t = math.sqrt(horizon)
    out[..., 0] = values[..., -1] / root_t
    max_level = m.bit_length() - 1
    for n in range(1, max_level + 1):
        stride = 1 << (level - n)
        grid = values[..., ::stride]  # level-n dyadic values
        inc = np.diff(grid, axis=-1)
        scale = 2.0 ** ((n - 1) / 2.0) / root_t
        lo = 1 << (n - 1)
        out[..., lo : 2 * lo] = scale * (inc[..., 0::2] - inc[..., 1::2])
    return out


def encode_path(path: "DyadicPath", m: int) -> GaussianFeatures:
    """Encode a one-dimensional dyadic Brownian path into GaussianFeatures."""
    if path.dim != 1:
        raise ValueError(f"encode_path expects a scalar path, got dim {path.dim}")
    g = encode_values(path.values[0], path.horizon, m)
    return GaussianFeatures(g=g, horizon=path.horizon)


def encode_components(path: "DyadicPath", m: int) -> np.ndarray:
    """Per-component encoding of a d-dimensional path, shape (d, m)."""
    return encode_values(path.values, path.horizon, m)


def reconstruct_path(features: GaussianFeatures, t: float) -> float:
    """Partial-sum reconstruction of the path from its features at time t.

    Exact at every dyadic point of level log2(m); elsewhere it is the
    piecewise-linear interpolant between those points.
    """
    _check_time(t, features.horizon)
    return float(
        sum(
            features.g[i] * haar_antiderivative(i, t, features.horizon)
            for i in range(len(features))
        )
    )
