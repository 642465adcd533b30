"""Dense feed-forward networks on top of the tape autodiff core.

An `Mlp` is a plain container of per-layer weight matrices and bias vectors.
Hidden layers always use the rectifier; the output layer is identity or tanh.
Weight matrix i has shape (layer_dims[i+1], layer_dims[i]), biases have
length layer_dims[i+1].

Training state lives outside the network: gradients accumulate into a
shape-congruent `GradientBuffer`, and `adam_step` applies the standard Adam
update with bias correction.  Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

OUTPUT_ACTIVATIONS = ("identity", "tanh")


@dataclass
class Mlp:
    dims: tuple
    weights: list          # per layer, shape (out_dim, in_dim)
    biases: list           # per layer, shape (out_dim,)
    output_activation: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]


@dataclass
class GradientBuffer:
    d_weights: list
    d_biases: list

    def zero(self):
        for a in self.d_weights:
            a.fill(0.0)
        for a in self.d_biases:
            a.fill(0.0)


def gradient_buffer(net: Mlp) -> GradientBuffer:
    """Zeroed accumulators congruent in shape to the network's parameters."""
    return GradientBuffer(
        d_weights=[np.zeros_like(w) for w in net.weights],
        d_biases=[np.zeros_like(b) for b in net.biases],
    )


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Optional[list] = None
    second_moment: Optional[list] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1): got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def adam_init(net: Mlp, learning_rate: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    state = AdamState(learning_rate, beta1, beta2, epsilon)
    state.first_moment = [np.zeros_like(p) for p in net.weights + net.biases]
    state.second_moment = [np.zeros_like(p) for p in net.weights + net.biases]
    return state


def mlp_init(layer_dims, output_activation: str = "identity", seed: int = 0) -> Mlp:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ValueError(f"need at least input and output dims, got {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all layer dims must be >= 1, got {dims}")
    if output_activation not in OUTPUT_ACTIVATIONS:
        raise ValueError(f"unknown output activation {output_activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(dims=dims, weights=weights, biases=biases,
               output_activation=output_activation)


def mlp_copy(net: Mlp) -> Mlp:
    return Mlp(dims=net.dims,
               weights=[w.copy() for w in net.weights],
               biases=[b.copy() for b in net.biases],
               output_activation=net.output_activation)


def mlp_forward(net: Mlp, x, tape: Optional[Tape] = None,
                grad_buffer: Optional[GradientBuffer] = None):
    """Evaluate the network.

    For an ndarray `x` of shape (in_dim,) or (batch, in_dim) an ndarray of
    matching rank comes back (tape must be None).  For a batched Var the
    result is a Var; with a tape all intermediates are recorded, and a
    `grad_buffer` accumulates parameter gradients (leave it None to keep
    the weights frozen while gradients still reach x).
    """
    if not isinstance(x, Var):
        if tape is not None:
            raise TypeError("taped forward expects a Var input")
        return _forward_array(net, x)
    if x.data.ndim != 2 or x.data.shape[1] != net.in_dim:
        raise ValueError(f"input shape {x.data.shape} does not match input dim {net.in_dim}")
    if not np.isfinite(x.data).all():
        raise ValueError("non-finite input to mlp_forward")
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        dw = grad_buffer.d_weights[i] if grad_buffer is not None else None
        db = grad_buffer.d_biases[i] if grad_buffer is not None else None
        h = ad.affine(tape, h, w, b, dw, db)
        if i < last:
            h = ad.relu(tape, h)
    if net.output_activation == "tanh":
        h = ad.tanh(tape, h)
    return h


def _forward_array(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.in_dim:
        raise ValueError(f"input shape {x.shape} does not match input dim {net.in_dim}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite input to mlp_forward")
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
    if net.output_activation == "tanh":
        h = np.tanh(h)
    return h


def adam_step(net: Mlp, grads: GradientBuffer, state: AdamState):
    """One in-place Adam update; returns (net, state) for convenience."""
    params = net.weights + net.biases
    grad_arrays = grads.d_weights + grads.d_biases
    names = [f"layer {i} weights" for i in range(len(net.weights))] + \
            [f"layer {i} biases" for i in range(len(net.biases))]
    for name, g in zip(names, grad_arrays):
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient in {name}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr, eps = state.learning_rate, state.epsilon
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grad_arrays, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    for name, p in zip(names, params):
        if not np.isfinite(p).all():
            raise ValueError(f"non-finite parameters in {name} after update")
    return net, state


# ---------------------------------------------------------------------------
# Checkpoint format: one JSON document per network, weights row-major.
# ---------------------------------------------------------------------------

def mlp_to_json(net: Mlp) -> str:
    doc = {
        "dims": list(net.dims),
        "output_activation": net.output_activation,
        "weights": [w.reshape(-1).tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    return json.dumps(doc)


def mlp_from_json(text: str) -> Mlp:
    doc = json.loads(text)
    dims = tuple(int(d) for d in doc["dims"])
    act = doc["output_activation"]
    if act not in OUTPUT_ACTIVATIONS:
        raise ValueError(f"unknown output activation {act!r} in checkpoint")
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = np.asarray(doc["weights"][i], dtype=np.float64).reshape(fan_out, fan_in)
        b = np.asarray(doc["biases"][i], dtype=np.float64)
        if b.shape != (fan_out,):
            raise ValueError(f"bias {i} has shape {b.shape}, expected ({fan_out},)")
        weights.append(w)
        biases.append(b)
    net = Mlp(dims=dims, weights=weights, biases=biases, output_activation=act)
    if not all(np.isfinite(w).all() for w in weights) or \
       not all(np.isfinite(b).all() for b in biases):
        raise ValueError("non-finite parameters in checkpoint")
    return net


def save_mlp(net: Mlp, path):
    with open(path, "w") as f:
        f.write(mlp_to_json(net))


def load_mlp(path) -> Mlp:
    with open(path) as f:
        return mlp_from_json(f.read())
