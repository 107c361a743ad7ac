"""Assembly of the operator model: encoder features in, branch and trunk
networks combined by a bilinear reconstructor, plus the training loop and
the empirical error decomposition.

The branch network maps the m (per component) Gaussian features to p
surrogate chaos-polynomial values, the trunk maps scaled time to p
surrogate coefficient values, and the prediction is their per-component
inner product.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import metrics as metrics_mod
from .chaos_basis import chaos_values, encode_values
from .neural import (
    AdamState,
    Mlp,
    adam_step,
    mlp_forward,
    mlp_grad,
    mlp_init,
    mlp_parameters,
)
from .pce_ref import CoefficientTable
from .sde_lab import (
    GeometricBrownianMotion,
    OrnsteinUhlenbeck,
    Sample,
    SdeSpec,
    _em_batch,
    _ou_trajectory_from_increments,
)

__all__ = [
    "SdeonetModel",
    "TrainConfig",
    "MetricsReport",
    "ErrorDecomposition",
    "build_model",
    "model_forward",
    "loss",
    "train",
    "evaluate",
    "error_decomposition",
    "save_model",
    "load_model",
]


@dataclass
class SdeonetModel:
    """Branch/trunk operator model for one SDE.

    basis_size is the per-component encoder width m (a power of two),
    n_terms the number p of retained expansion terms; the approximator maps
    m * dim features to p * dim branch values and the trunk maps scaled
    time to p * dim coefficient values.
    """

    basis_size: int
    n_terms: int
    dim: int
    horizon: float
    approximator: Mlp
    trunk: Mlp

    def __post_init__(self) -> None:
        m, p, d = self.basis_size, self.n_terms, self.dim
        if m < 1 or (m & (m - 1)) != 0:
            raise ValueError(f"basis size must be a power of two, got {m}")
        if self.approximator.in_dim != m * d or self.approximator.out_dim != p * d:
            raise ValueError(
                f"approximator must map {m * d} -> {p * d}, got "
                f"{self.approximator.in_dim} -> {self.approximator.out_dim}"
            )
        if self.trunk.in_dim != 1 or self.trunk.out_dim != p * d:
            raise ValueError(
                f"trunk must map 1 -> {p * d}, got {self.trunk.in_dim} -> {self.trunk.out_dim}"
            )

    def branch_values(self, g_matrix: np.ndarray) -> np.ndarray:
        """Branch outputs for a batch of flattened features, shape (batch, p * dim)."""
        g_matrix = np.asarray(g_matrix, dtype=float)
        if g_matrix.ndim == 3:
            g_matrix = g_matrix.reshape(g_matrix.shape[0], -1)
        return mlp_forward(self.approximator, g_matrix)

    def trunk_values(self, times: np.ndarray) -> np.ndarray:
        """Trunk outputs over an array of times (scaled internally), shape (n, p * dim)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        return mlp_forward(self.trunk, (times / self.horizon)[:, None])

    def predict(self, g_matrix: np.ndarray, t: float) -> np.ndarray:
        """Model state estimates at one time for a batch of features, shape (batch, dim)."""
        branch = self.branch_values(g_matrix)
        trunk = self.trunk_values(np.asarray([t]))[0]
        b = branch.reshape(branch.shape[0], self.dim, self.n_terms)
        tau = trunk.reshape(self.dim, self.n_terms)
        return np.einsum("bdp,dp->bd", b, tau)


def _passthrough_branch_init(dims: list[int], rng: np.random.Generator) -> Mlp:
    """Lecun-uniform init with an exact (x, -x, 1) block through the hidden layers.

    The doubled coordinates survive ReLU for all real inputs, so every
    linear function of the features is in the final layer's span from the
    first step; degree-one expansion terms then fit at linear-regression
    speed instead of waiting for hidden features to align.  Falls back to
    the plain init when the hidden layers cannot host the block.
    """
    net = mlp_init(dims, rng, scheme="lecun_uniform")
    d = dims[0]
    block = 2 * d + 1
    if any(h < block for h in dims[1:-1]):
        return net
    w, b = net.weights[0], net.biases[0]
    w[:block] = 0.0
    b[:block] = 0.0
    w[:d, :d] = np.eye(d)
    w[d : 2 * d, :d] = -np.eye(d)
    b[2 * d] = 1.0
    for layer in range(1, len(dims) - 2):
        w, b = net.weights[layer], net.biases[layer]
        w[:block] = 0.0
        b[:block] = 0.0
        w[:block, :block] = np.eye(block)
    return net


def _spline_trunk_init(dims: list[int], rng: np.random.Generator) -> Mlp:
    """Kink-dictionary init for the scalar-input trunk.

    The first layer places up- and down-facing ReLU kinks on a uniform knot
    grid over [0, 1] and later hidden layers start as identities, so the
    final layer sees a linear-spline dictionary and can represent localized
    coefficient curves immediately.
    """
    net = mlp_init(dims, rng, scheme="lecun_uniform")
    if dims[0] != 1 or len(dims) < 3:
        return net
    h = dims[1]
    up = h // 2
    down = h - up
    w, b = net.weights[0], net.biases[0]
    w[:up, 0] = 1.0
    b[:up] = -np.linspace(0.0, 1.0, up, endpoint=False)
    w[up:, 0] = -1.0
    b[up:] = np.linspace(0.0, 1.0, down, endpoint=False) + 1.0 / down
    for layer in range(1, len(dims) - 2):
        net.weights[layer] = np.eye(dims[layer + 1], dims[layer])
        net.biases[layer] = np.zeros(dims[layer + 1])
    return net


def build_model(basis_size: int, n_terms: int, dim: int, horizon: float,
                hidden: list[int], seed: int = 0,
                init_scheme: str = "structured") -> SdeonetModel:
    """Fresh model with freshly initialized branch and trunk networks.

    The default "structured" scheme gives the branch a linear feature
    passthrough and the trunk a spline kink dictionary, which trains to
    markedly lower held-out error for a fixed epoch budget; the plain
    "lecun_uniform" and "fan_in_uniform" schemes are available for
    comparison.
    """
    rng = np.random.default_rng(seed)
    approx_dims = [basis_size * dim, *hidden, n_terms * dim]
    trunk_dims = [1, *hidden, n_terms * dim]
    if init_scheme == "structured":
        approx = _passthrough_branch_init(approx_dims, rng)
        trunk = _spline_trunk_init(trunk_dims, rng)
    else:
        approx = mlp_init(approx_dims, rng, scheme=init_scheme)
        trunk = mlp_init(trunk_dims, rng, scheme=init_scheme)
    return SdeonetModel(
        basis_size=basis_size,
        n_terms=n_terms,
        dim=dim,
        horizon=horizon,
        approximator=approx,
        trunk=trunk,
    )


def model_forward(model: SdeonetModel, g, t: float):
    """Single-sample prediction; returns a float for scalar processes."""
    g = np.asarray(g, dtype=float)
    flat = g.reshape(1, -1)
    if flat.shape[1] != model.basis_size * model.dim:
        raise ValueError(
            f"expected {model.basis_size * model.dim} features, got {flat.shape[1]}"
        )
    if not 0.0 <= t <= model.horizon:
        raise ValueError(f"time {t} outside [0, {model.horizon}]")
    out = model.predict(flat, t)[0]
    return float(out[0]) if model.dim == 1 else out


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters for the mini-batch Adam loop."""

    learning_rate: float = 3e-4
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    n_samples: int | None = None

    def __post_init__(self) -> None:
        if self.learning_rate < 0.0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("need learning_rate >= 0, epochs >= 1, batch_size >= 1")


def _batch_arrays(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    g = np.stack([s.g.reshape(-1) for s in samples])
    t = np.array([s.t for s in samples])
    x = np.stack([np.atleast_1d(s.x) for s in samples])
    return g, t, x


def _loss_and_grads(model: SdeonetModel, g: np.ndarray, t: np.ndarray, x: np.ndarray,
                    x0: np.ndarray, want_grads: bool = True):
    """Batch loss (state term plus initial-state term) and parameter gradients."""
    batch = g.shape[0]
    d, p = model.dim, model.n_terms
    branch = mlp_forward(model.approximator, g)  # (B, p*d)
    trunk_in = np.concatenate([t / model.horizon, np.zeros(1)])[:, None]
    trunk_all = mlp_forward(model.trunk, trunk_in)
    trunk_t = trunk_all[:batch]  # (B, p*d)
    trunk_0 = trunk_all[batch]  # (p*d,)

    b3 = branch.reshape(batch, d, p)
    tau3 = trunk_t.reshape(batch, d, p)
    tau03 = trunk_0.reshape(d, p)
    pred = np.einsum("bdp,bdp->bd", b3, tau3)
    pred0 = np.einsum("bdp,dp->bd", b3, tau03)

    resid = pred - x
    resid0 = pred0 - x0[None, :]
    value = float((np.sum(resid**2) + np.sum(resid0**2)) / batch)
    if not want_grads:
        return value, None, None

    e = (2.0 / batch) * resid  # (B, d)
    e0 = (2.0 / batch) * resid0
    up_branch = (e[:, :, None] * tau3 + e0[:, :, None] * tau03[None]).reshape(batch, d * p)
    up_trunk = (e[:, :, None] * b3).reshape(batch, d * p)
    up_trunk0 = (e0[:, :, None] * b3).reshape(batch, d * p)

    approx_grads, _ = mlp_grad(model.approximator, g, up_branch)
    trunk_up = np.vstack([up_trunk, up_trunk0.sum(axis=0)[None, :]])
    trunk_grads, _ = mlp_grad(model.trunk, trunk_in, trunk_up)
    return value, approx_grads, trunk_grads


def loss(model: SdeonetModel, batch: list[Sample], x0) -> float:
    """Mean squared state error plus mean squared initial-state error over a batch."""
    if not batch:
        raise ValueError("loss of an empty batch is undefined")
    g, t, x = _batch_arrays(batch)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    value, _, _ = _loss_and_grads(model, g, t, x, x0, want_grads=False)
    return value


def train(model: SdeonetModel, dataset: list[Sample], x0,
          config: TrainConfig) -> tuple[SdeonetModel, list[float]]:
    """Mini-batch Adam on the two networks; returns the model and per-epoch mean loss.

    Data are reshuffled every epoch from the config seed, so a fixed
    (model, dataset, config) triple reproduces the history bit for bit.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    if config.n_samples is not None and config.n_samples != len(dataset):
        raise ValueError(f"config expects {config.n_samples} samples, got {len(dataset)}")
    g_all, t_all, x_all = _batch_arrays(dataset)
    if g_all.shape[1] != model.basis_size * model.dim:
        raise ValueError("dataset feature width does not match the model")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    params = mlp_parameters(model.approximator) + mlp_parameters(model.trunk)
    state = AdamState.for_params(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            value, approx_grads, trunk_grads = _loss_and_grads(
                model, g_all[idx], t_all[idx], x_all[idx], x0
            )
            if not math.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            epoch_loss += value * len(idx)
            adam_step(params, approx_grads + trunk_grads, state)
        history.append(epoch_loss / n)
    return model, history


@dataclass(frozen=True)
class MetricsReport:
    """Per-time evaluation metrics; w2 holds the Sinkhorn divergence when dim > 1."""

    times: np.ndarray
    l2: np.ndarray
    rel_l2: np.ndarray
    w2: np.ndarray

    def save_csv(self, path: str) -> None:
        rows = [
            [repr(float(t)), repr(float(a)), repr(float(r)), repr(float(w))]
            for t, a, r, w in zip(self.times, self.l2, self.rel_l2, self.w2)
        ]
        _atomic_csv(path, ["t", "l2", "rel_l2", "w2"], rows)


def _atomic_csv(path: str, header: list[str], rows) -> None:
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


def _reference_states(spec: SdeSpec, increments: np.ndarray, grid_indices: np.ndarray,
                      horizon: float) -> np.ndarray:
    """Reference X at selected grid indices for a batch of increment arrays.

    increments has shape (batch, dim, n); the result (batch, dim, len(idx)).
    """
    if isinstance(spec, GeometricBrownianMotion):
        w = np.concatenate(
            [np.zeros((increments.shape[0], 1)), np.cumsum(increments[:, 0], axis=1)], axis=1
        )
        n = increments.shape[-1]
        times = grid_indices * (horizon / n)
        return spec.solution_from_w(times[None, :], w[:, grid_indices])[:, None, :]
    if isinstance(spec, OrnsteinUhlenbeck):
        traj = _ou_trajectory_from_increments(spec, increments[:, 0], horizon)
        return traj[:, grid_indices][:, None, :]
    traj = _em_batch(spec, increments, horizon)
    return traj[:, :, grid_indices]


def evaluate(model, spec: SdeSpec, t_grid: np.ndarray, n_eval: int, seed: int = 0,
             sim_level: int = 12, sinkhorn_epsilon: float | None = None,
             sinkhorn_max_iters: int = 500, sinkhorn_tol: float = 1e-6) -> MetricsReport:
    """Held-out metrics per time: absolute L2 error, relative L2 error, and
    W2 (sorted pairing for scalars, Sinkhorn divergence otherwise).

    Fresh paths are drawn for every time in the grid; the reference and the
    model prediction share each path.  The model only needs predict(),
    dim, basis_size and horizon, so oracle stubs can stand in for a trained
    network.
    """
    if n_eval < 100:
        raise ValueError(f"need at least 100 evaluation paths, got {n_eval}")
    dim = model.dim
    m = model.basis_size
    horizon = model.horizon
    n = 1 << sim_level
    dt = horizon / n
    times_out, l2s, rels, w2s = [], [], [], []
    for t_idx, t in enumerate(np.asarray(t_grid, dtype=float)):
        k = int(round(t / dt))
        t_used = k * dt
        rng = np.random.default_rng([seed, t_idx])
        increments = rng.normal(0.0, math.sqrt(dt), size=(n_eval, dim, n))
        x = _reference_states(spec, increments, np.asarray([k]), horizon)[:, :, 0]
        values = np.zeros((n_eval, dim, n + 1))
        np.cumsum(increments, axis=2, out=values[:, :, 1:])
        g = encode_values(values, horizon, m).reshape(n_eval, dim * m)
        pred = np.asarray(model.predict(g, t_used))
        if pred.ndim == 1:
            pred = pred[:, None]
        diff_norms = np.linalg.norm(x - pred, axis=1)
        ref_norms = np.linalg.norm(x, axis=1)
        l2 = metrics_mod.mc_l2(diff_norms)
        rel = l2 / metrics_mod.mc_l2(ref_norms)
        if dim == 1:
            w2 = metrics_mod.w2_1d(x[:, 0], pred[:, 0])
        else:
            w2 = metrics_mod.sinkhorn_divergence(
                x, pred, epsilon=sinkhorn_epsilon,
                max_iters=sinkhorn_max_iters, tol=sinkhorn_tol,
            )
        times_out.append(t_used)
        l2s.append(l2)
        rels.append(rel)
        w2s.append(w2)
    return MetricsReport(
        times=np.asarray(times_out),
        l2=np.asarray(l2s),
        rel_l2=np.asarray(rels),
        w2=np.asarray(w2s),
    )


@dataclass(frozen=True)
class ErrorDecomposition:
    """Empirical truncation / approximation / reconstruction split of the L2 error.

    All four norms are time-integrated over the reference grid and share
    the same paths, so e_total <= e_trunc + e_approx + e_recon holds up to
    the triangle inequality of the empirical norm.
    """

    e_trunc: float
    e_approx: float
    e_recon: float
    e_total: float
    standard_error: float
    selected: tuple


def error_decomposition(model, reference: CoefficientTable, spec: SdeSpec,
                        n_eval: int = 2000, seed: int = 0,
                        sim_level: int = 12, n_terms: int | None = None) -> ErrorDecomposition:
    """Estimate the three-term error split against a reference coefficient table.

    The retained set is the n_terms most time-energetic indices of the
    reference; branch output j is paired with the j-th selected index in
    the table's canonical order.
    """
    if model.dim != 1:
        raise ValueError("error decomposition is defined for scalar processes")
    if reference.slots != model.basis_size:
        raise ValueError(
            f"reference has {reference.slots} slots, model expects {model.basis_size}"
        )
    p = model.n_terms if n_terms is None else n_terms
    if p > model.n_terms or p < 1:
        raise ValueError(f"n_terms must be in 1..{model.n_terms}, got {p}")
    if p > len(reference.indices):
        raise ValueError(f"reference table has only {len(reference.indices)} indices")
    horizon = model.horizon
    times = reference.times
    n = 1 << sim_level
    dt = horizon / n
    grid_indices = np.round(times / dt).astype(int)
    if np.max(np.abs(times - grid_indices * dt)) > 1e-9 * horizon:
        raise ValueError("reference grid is not dyadically representable at sim_level")

    top = reference.top_positions(p)
    selected = tuple(reference.indices[pos] for pos in top)
    x_sel = reference.values[:, top]  # (n_t, p)

    rng = np.random.default_rng([seed])
    increments = rng.normal(0.0, math.sqrt(dt), size=(n_eval, 1, n))
    x_paths = _reference_states(spec, increments, grid_indices, horizon)[:, 0, :]  # (B, n_t)
    values = np.zeros((n_eval, 1, n + 1))
    np.cumsum(increments, axis=2, out=values[:, :, 1:])
    g = encode_values(values, horizon, model.basis_size)[:, 0, :]  # (B, m)

    psi = chaos_values(list(selected), g)  # (B, p)
    branch = np.asarray(model.branch_values(g))[:, :p]
    trunk = np.asarray(model.trunk_values(times))[:, :p]  # (n_t, p)

    def norm(residuals: np.ndarray) -> tuple[float, np.ndarray]:
        per_path = np.trapezoid(residuals**2, times, axis=1)
        return float(np.sqrt(np.mean(per_path))), per_path

    e_trunc, _ = norm(x_paths - psi @ x_sel.T)
    e_approx, _ = norm((psi - branch) @ x_sel.T)
    e_recon, _ = norm(branch @ (x_sel - trunk).T)
    e_total, z = norm(x_paths - branch @ trunk.T)
    mean_z = float(np.mean(z))
    se_z = float(np.std(z, ddof=1) / math.sqrt(n_eval))
    se_norm = se_z / (2.0 * math.sqrt(mean_z)) if mean_z > 0.0 else 0.0
    return ErrorDecomposition(
        e_trunc=e_trunc,
        e_approx=e_approx,
        e_recon=e_recon,
        e_total=e_total,
        standard_error=se_norm,
        selected=selected,
    )


def save_model(model: SdeonetModel, path: str) -> None:
    """Write the model (header plus both networks) to an .npz archive."""
    arrays = {
        "meta": np.array(
            [model.basis_size, model.n_terms, model.dim, model.horizon], dtype=float
        )
    }
    for prefix, net in (("a", model.approximator), ("t", model.trunk)):
        arrays[f"{prefix}_dims"] = np.asarray(net.dims, dtype=np.int64)
        for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"{prefix}_w{layer}"] = w
            arrays[f"{prefix}_b{layer}"] = b
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path: str) -> SdeonetModel:
    with np.load(path) as data:
        meta = data["meta"]
        nets = {}
        for prefix in ("a", "t"):
            dims = data[f"{prefix}_dims"]
            weights = [data[f"{prefix}_w{i}"].copy() for i in range(len(dims) - 1)]
            biases = [data[f"{prefix}_b{i}"].copy() for i in range(len(dims) - 1)]
            nets[prefix] = Mlp(weights=weights, biases=biases)
    return SdeonetModel(
        basis_size=int(meta[0]),
        n_terms=int(meta[1]),
        dim=int(meta[2]),
        horizon=float(meta[3]),
        approximator=nets["a"],
        trunk=nets["t"],
    )
