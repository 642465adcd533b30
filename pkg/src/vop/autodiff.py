"""Reverse-mode automatic differentiation over batched numpy arrays.

The computation graphs needed here are small and strictly sequential (dense
layers, elementwise arithmetic, a handful of reductions), so instead of a
general graph we keep a `Tape`: an ordered list of backward closures, one per
recorded primitive.  Replaying the list in reverse propagates the gradient of
a scalar output to every `Var` and into any registered parameter
accumulators.

Values are `Var` objects wrapping float64 arrays, normally of shape
(batch, dim) so that a whole minibatch of rollouts shares one tape.
Constants (reward targets, normalization vectors, branch masks) enter the
graph as plain ndarrays / floats and receive no gradient.

Two conventions worth calling out:

* `gate` treats its boolean mask as a constant during the reverse pass.  The
  mask may depend on recorded values (e.g. an |angle| threshold), but no
  gradient flows through the branch decision itself.
* `abs_` uses subgradient 0 at the origin (np.sign(0) == 0).
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


class Var:
    """A node value: float64 array plus a lazily allocated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    def __repr__(self):
        return f"Var(shape={self.data.shape})"


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Each recorded entry is a closure that reads the gradient of the
    primitive's output and accumulates into the gradients of its inputs.
    `backward` seeds the scalar output and replays the record in reverse;
    every node is visited exactly once.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    def record(self, backward_fn):
        self._nodes.append(backward_fn)

    def backward(self, output: Var, seed: float = 1.0):
        """Propagate d(output)/d(everything recorded); output must be scalar."""
        if not self._nodes:
            raise TapeError("backward called on an empty tape (no forward pass recorded)")
        if output.data.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {output.data.shape}")
        _accum(output, np.full_like(output.data, seed))
        for fn in reversed(self._nodes):
            fn()


def _accum(v: Var, g: Array):
    if v.grad is None:
        v.grad = np.zeros_like(v.data)
    v.grad += g


# ---------------------------------------------------------------------------
# Primitives.  All take the tape first; tape=None evaluates without recording.
# ---------------------------------------------------------------------------

def affine(tape, x: Var, w: Array, b: Array, dw: Array = None, db: Array = None) -> Var:
    """y = x @ w.T + b for weight w of shape (out_dim, in_dim).

    `dw`/`db` are optional accumulator arrays (a GradientBuffer's blocks);
    omitting them freezes the parameters while gradients still flow to x.
    """
    out = Var(x.data @ w.T + b)
    if tape is not None:
        def backward():
            g = out.grad
            _accum(x, g @ w)
            if dw is not None:
                dw[...] += g.T @ x.data
                db[...] += g.sum(axis=0)
        tape.record(backward)
    return out


def relu(tape, x: Var) -> Var:
    out = Var(np.maximum(x.data, 0.0))
    if tape is not None:
        mask = x.data > 0.0
        def backward():
            _accum(x, out.grad * mask)
        tape.record(backward)
    return out


def tanh(tape, x: Var) -> Var:
    out = Var(np.tanh(x.data))
    if tape is not None:
        def backward():
            _accum(x, out.grad * (1.0 - out.data * out.data))
        tape.record(backward)
    return out


def add(tape, a: Var, b: Var) -> Var:
    out = Var(a.data + b.data)
    if tape is not None:
        def backward():
            _accum(a, out.grad)
            _accum(b, out.grad)
        tape.record(backward)
    return out


def sub(tape, a: Var, b: Var) -> Var:
    out = Var(a.data - b.data)
    if tape is not None:
        def backward():
            _accum(a, out.grad)
            _accum(b, -out.grad)
        tape.record(backward)
    return out


def neg(tape, a: Var) -> Var:
    return scale(tape, a, -1.0)


def scale(tape, a: Var, c) -> Var:
    """Multiply by a constant scalar or (broadcastable) constant array."""
    out = Var(a.data * c)
    if tape is not None:
        def backward():
            _accum(a, out.grad * c)
        tape.record(backward)
    return out


def add_const(tape, a: Var, c) -> Var:
    out = Var(a.data + c)
    if tape is not None:
        def backward():
            _accum(a, out.grad)
        tape.record(backward)
    return out


def abs_(tape, a: Var) -> Var:
    out = Var(np.abs(a.data))
    if tape is not None:
        sign = np.sign(a.data)  # subgradient 0 at the origin
        def backward():
            _accum(a, out.grad * sign)
        tape.record(backward)
    return out


def square(tape, a: Var) -> Var:
    out = Var(a.data * a.data)
    if tape is not None:
        def backward():
            _accum(a, out.grad * 2.0 * a.data)
        tape.record(backward)
    return out


def gate(tape, mask: Array, a: Var) -> Var:
    """y = a where mask else 0; the mask is constant in the reverse pass."""
    out = Var(np.where(mask, a.data, 0.0))
    if tape is not None:
        def backward():
            _accum(a, np.where(mask, out.grad, 0.0))
        tape.record(backward)
    return out


def clip_rows(tape, a: Var, bound: float) -> Var:
    """Identity forward; the reverse pass rescales each row of the incoming
    gradient to L2 norm at most `bound`.

    Deliberately not a derivative.  Backprop through long rollout chains
    passes repeatedly through locally unstable dynamics, so a few rows'
    adjoints grow exponentially with depth and would swamp every other
    row's signal in the accumulated gradient; bounding rows independently
    keeps the well-behaved ones intact.
    """
    out = Var(a.data)
    if tape is not None:
        def backward():
            g = out.grad
            norms = np.sqrt((g * g).sum(axis=1, keepdims=True))
            with np.errstate(invalid="ignore", divide="ignore"):
                fac = np.where(norms > bound, bound / norms, 1.0)
            _accum(a, g * fac)
        tape.record(backward)
    return out


def clamp_grad(tape, a: Var, bound: float) -> Var:
    """Identity forward; the reverse pass clamps each gradient element to
    [-bound, +bound].

    Like `clip_rows` this is deliberately not a derivative.  Elementwise
    clamping caps the exponentially growing adjoint components without
    rescaling the well-behaved components that share a row with them.
    """
    out = Var(a.data)
    if tape is not None:
        def backward():
            _accum(a, np.clip(out.grad, -bound, bound))
        tape.record(backward)
    return out


def wrap_angle(tape, a: Var) -> Var:
    """Wrap values into [-pi, pi).  The 2*pi shift count is a constant, so
    the reverse pass is the identity."""
    out = Var(np.mod(a.data + np.pi, 2.0 * np.pi) - np.pi)
    if tape is not None:
        def backward():
            _accum(a, out.grad)
        tape.record(backward)
    return out


def concat(tape, parts) -> Var:
    """Column-concatenate Vars and constant ndarrays; constants get no grad."""
    datas = [p.data if isinstance(p, Var) else np.asarray(p, dtype=np.float64) for p in parts]
    out = Var(np.concatenate(datas, axis=1))
    if tape is not None:
        spans = []
        j = 0
        for p, d in zip(parts, datas):
            spans.append((p, j, j + d.shape[1]))
            j += d.shape[1]
        def backward():
            for p, j0, j1 in spans:
                if isinstance(p, Var):
                    _accum(p, out.grad[:, j0:j1])
        tape.record(backward)
    return out


def slice_cols(tape, a: Var, j0: int, j1: int) -> Var:
    out = Var(a.data[:, j0:j1].copy())
    if tape is not None:
        def backward():
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, j0:j1] += out.grad
        tape.record(backward)
    return out


def sum_all(tape, a: Var) -> Var:
    out = Var(a.data.sum())
    if tape is not None:
        def backward():
            _accum(a, np.full_like(a.data, out.grad))
        tape.record(backward)
    return out


def mean_all(tape, a: Var) -> Var:
    out = Var(a.data.mean())
    if tape is not None:
        inv_n = 1.0 / a.data.size
        def backward():
            _accum(a, np.full_like(a.data, out.grad * inv_n))
        tape.record(backward)
    return out
