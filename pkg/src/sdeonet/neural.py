"""Minimal feed-forward ReLU networks with explicit reverse-mode gradients.

Plain numpy arrays, no autograd framework: the training loops in this
package need bit-level determinism and exact parameter accounting, and the
networks involved are small dense MLPs.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mlp",
    "AdamState",
    "mlp_init",
    "mlp_forward",
    "mlp_grad",
    "mlp_parameters",
    "adam_step",
    "parallelise",
    "pad_depth",
    "size",
    "nonzero_size",
    "depth",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class Mlp:
    """Feed-forward network: affine layers with ReLU between them.

    The last affine map has no activation.  weights[l] has shape
    (n_{l+1}, n_l) and biases[l] has shape (n_{l+1},).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {layer}: weight {w.shape} and bias {b.shape} disagree")
            if layer > 0 and w.shape[1] != self.weights[layer - 1].shape[0]:
                raise ValueError(f"layer {layer}: input width {w.shape[1]} breaks the chain")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]


def depth(net: Mlp) -> int:
    """Number of affine layers."""
    return len(net.weights)


def size(net: Mlp) -> int:
    """Dense parameter count: sum over layers of (n_in + 1) * n_out."""
    return sum((w.shape[1] + 1) * w.shape[0] for w in net.weights)


def nonzero_size(net: Mlp) -> int:
    """Number of nonzero stored parameters.

    This is the count under which parallelisation is exactly additive; the
    dense `size` formula over-counts the structural zero blocks of a
    parallelised network.
    """
    return int(
        sum(np.count_nonzero(w) for w in net.weights)
        + sum(np.count_nonzero(b) for b in net.biases)
    )


def mlp_init(dims: list[int], rng, scheme: str = "fan_in_uniform") -> Mlp:
    """Initialize a fresh network, deterministically per seed.

    "fan_in_uniform": weights uniform(-s, s) with s = sqrt(6 / fan_in),
    biases zero.  "lecun_uniform": the tighter bound s = 1 / sqrt(fan_in)
    for weights and biases both; the nonzero biases spread the ReLU kinks
    at initialization, which trains noticeably better on low-dimensional
    inputs such as time.
    """
    if len(dims) < 2:
        raise ValueError(f"need at least input and output dims, got {dims}")
    if scheme not in ("fan_in_uniform", "lecun_uniform"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        if scheme == "fan_in_uniform":
            bound = np.sqrt(6.0 / n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        else:
            bound = 1.0 / np.sqrt(n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            biases.append(rng.uniform(-bound, bound, size=n_out))
    return Mlp(weights=weights, biases=biases)


def _as_batch(x: np.ndarray, width: int, name: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != width:
        raise ValueError(f"{name} must have width {width}, got shape {x.shape}")
    return batch, single


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Realize the network on x, shape (n_in,) or (batch, n_in)."""
    batch, single = _as_batch(x, net.in_dim, "input")
    out = batch
    last = len(net.weights) - 1
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = out @ w.T + b
        if layer < last:
            out = np.maximum(out, 0.0)
    return out[0] if single else out


def mlp_grad(net: Mlp, x: np.ndarray, upstream: np.ndarray):
    """Gradients of <upstream, output> w.r.t. every parameter and the input.

    Batched inputs sum the parameter gradients over the batch; the input
    gradient keeps the batch axis.  The ReLU subgradient at 0 is 0.
    Returns (param_grads, input_grad) with param_grads ordered like
    mlp_parameters.
    """
    batch, single = _as_batch(x, net.in_dim, "input")
    up, up_single = _as_batch(upstream, net.out_dim, "upstream")
    if batch.shape[0] != up.shape[0]:
        raise ValueError("input and upstream batch sizes disagree")
    last = len(net.weights) - 1
    activations = [batch]
    pre_acts = []
    out = batch
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = out @ w.T + b
        pre_acts.append(z)
        out = np.maximum(z, 0.0) if layer < last else z
        activations.append(out)
    w_grads: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    b_grads: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    delta = up
    for layer in range(last, -1, -1):
        w_grads[layer] = delta.T @ activations[layer]
        b_grads[layer] = delta.sum(axis=0)
        delta = delta @ net.weights[layer]
        if layer > 0:
            delta = delta * (pre_acts[layer - 1] > 0.0)
    grads = []
    for wg, bg in zip(w_grads, b_grads):
        grads.extend((wg, bg))
    input_grad = delta[0] if single and up_single else delta
    return grads, input_grad


def mlp_parameters(net: Mlp) -> list[np.ndarray]:
    """Live parameter arrays, interleaved [W0, b0, W1, b1, ...]."""
    params = []
    for w, b in zip(net.weights, net.biases):
        params.extend((w, b))
    return params


@dataclass
class AdamState:
    """Per-parameter moment accumulators plus the step counter and hyperparameters."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 3e-4, **kwargs) -> "AdamState":
        return cls(
            lr=lr,
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **kwargs,
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to the parameter arrays in place."""
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ValueError("params, grads and state shapes disagree")
    state.step += 1
    correct1 = 1.0 - state.beta1**state.step
    correct2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.lr * (m / correct1) / (np.sqrt(v / correct2) + state.eps)
    return params, state


def pad_depth(net: Mlp, target_depth: int, nonnegative_input: bool = False) -> Mlp:
    """Front-pad a network with identity layers until it has target_depth layers.

    The default construction doubles the input into (x_+, x_-) so ReLU
    identity layers are exact for all real inputs; with
    nonnegative_input=True plain identity layers are used instead, which is
    exact only when every input coordinate is >= 0.
    """
    extra = target_depth - depth(net)
    if extra < 0:
        raise ValueError(f"target depth {target_depth} below current {depth(net)}")
    if extra == 0:
        return Mlp(weights=[w.copy() for w in net.weights], biases=[b.copy() for b in net.biases])
    n_in = net.in_dim
    eye = np.eye(n_in)
    if nonnegative_input:
        weights = [eye.copy() for _ in range(extra)]
        biases = [np.zeros(n_in) for _ in range(extra)]
        weights += [w.copy() for w in net.weights]
        biases += [b.copy() for b in net.biases]
        return Mlp(weights=weights, biases=biases)
    doubled = np.vstack([eye, -eye])
    weights = [doubled]
    biases = [np.zeros(2 * n_in)]
    eye2 = np.eye(2 * n_in)
    for _ in range(extra - 1):
        weights.append(eye2.copy())
        biases.append(np.zeros(2 * n_in))
    first = net.weights[0]
    weights.append(np.hstack([first, -first]))
    biases.append(net.biases[0].copy())
    weights += [w.copy() for w in net.weights[1:]]
    biases += [b.copy() for b in net.biases[1:]]
    return Mlp(weights=weights, biases=biases)


def parallelise(a: Mlp, b: Mlp) -> Mlp:
    """Block-diagonal composition of two equal-depth nets sharing their input.

    The first layers are stacked, later layers placed on a block diagonal,
    so the realization is the concatenation of the two realizations and the
    nonzero parameter count is exactly additive.
    """
    if a.in_dim != b.in_dim:
        raise ValueError(f"input dims differ: {a.in_dim} vs {b.in_dim}")
    if depth(a) != depth(b):
        raise ValueError(
            f"depths differ ({depth(a)} vs {depth(b)}); pad the shallower net first"
        )
    weights = [np.vstack([a.weights[0], b.weights[0]])]
    biases = [np.concatenate([a.biases[0], b.biases[0]])]
    for wa, wb, ba, bb in zip(a.weights[1:], b.weights[1:], a.biases[1:], b.biases[1:]):
        block = np.zeros((wa.shape[0] + wb.shape[0], wa.shape[1] + wb.shape[1]))
        block[: wa.shape[0], : wa.shape[1]] = wa
        block[wa.shape[0] :, wa.shape[1] :] = wb
        weights.append(block)
        biases.append(np.concatenate([ba, bb]))
    return Mlp(weights=weights, biases=biases)


def save_checkpoint(net: Mlp, path: str) -> None:
    """Write the network to an .npz archive; round-trips exactly."""
    arrays = {"dims": np.asarray(net.dims, dtype=np.int64)}
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"w{layer}"] = w
        arrays[f"b{layer}"] = b
    _atomic_savez(path, arrays)


def load_checkpoint(path: str) -> Mlp:
    with np.load(path) as data:
        dims = data["dims"]
        n_layers = len(dims) - 1
        weights = [data[f"w{i}"].copy() for i in range(n_layers)]
        biases = [data[f"b{i}"].copy() for i in range(n_layers)]
    return Mlp(weights=weights, biases=biases)


def _atomic_savez(path: str, arrays: dict) -> None:
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
