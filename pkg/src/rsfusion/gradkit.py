"""Dense-tensor arithmetic with reverse-mode autodiff over a fixed primitive set.

The primitive set is deliberately small (affine map, sine, sigmoid, softplus,
elementwise add/multiply, scalar scale, sum-reduce, concatenate,
coordinate-gather, absolute value, square root): it is exactly what the
space-time fusion networks and their regularizers need, and a fixed set keeps
the reverse pass auditable. Storage is float64 by default; float32 is
available for speed, with reductions always accumulated in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GradkitError",
    "UsageError",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "AdamState",
    "adam_step",
    "evaluate",
    "backward",
    "finite_diff_check",
    "set_check_finite",
    "set_default_dtype",
]

_CHECK_FINITE = True
_DEFAULT_DTYPE = np.float64


class GradkitError(Exception):
    pass


class UsageError(GradkitError):
    pass


class NonFiniteError(GradkitError):
    """Raised when a primitive produces NaN/Inf and checking is enabled."""

    def __init__(self, primitive: str, node_index: int):
        self.primitive = primitive
        self.node_index = node_index
        super().__init__(
            f"non-finite values produced by primitive '{primitive}' at node {node_index}"
        )


def set_check_finite(enabled: bool) -> bool:
    """Toggle NaN/Inf checking after every primitive; returns previous value."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


def set_default_dtype(dtype) -> None:
    """Set storage dtype for new tensors (float64 default, float32 permitted)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UsageError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def _sum64(x: np.ndarray, axis=None) -> np.ndarray:
    # 64-bit accumulation even in float32 storage mode.
    return np.sum(x, axis=axis, dtype=np.float64).astype(x.dtype)


class Tape:
    """Ordered record of primitive applications; single-owner, one backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def leaf(self, values, requires_grad: bool = False, name: str = "") -> "Tensor":
        arr = np.asarray(values, dtype=_DEFAULT_DTYPE)
        return Tensor(self, arr, parents=(), vjp=None, primitive="leaf",
                      requires_grad=requires_grad, name=name)

    def constant(self, values) -> "Tensor":
        return self.leaf(values, requires_grad=False)

    def _register(self, node: "Tensor") -> int:
        if self.consumed:
            raise UsageError("tape already consumed by a backward pass")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def release(self) -> None:
        """Break the node reference cycles so large buffers free promptly."""
        self.consumed = True
        for node in self.nodes:
            node.vjp = None
            node.parents = ()
        self.nodes.clear()


class Tensor:
    """A node on a tape: a dense array plus the provenance needed for reverse mode."""

    __slots__ = ("tape", "data", "parents", "vjp", "primitive", "requires_grad",
                 "name", "index")

    def __init__(self, tape: Tape, data: np.ndarray, parents, vjp, primitive: str,
                 requires_grad: bool, name: str = ""):
        self.tape = tape
        self.data = data
        self.parents = tuple(parents)
        self.vjp = vjp
        self.primitive = primitive
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name
        self.index = tape._register(self)
        if _CHECK_FINITE and primitive != "leaf" and not np.all(np.isfinite(data)):
            raise NonFiniteError(primitive, self.index)

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise UsageError("operands live on different tapes")
    return tape


def _op(primitive: str, data: np.ndarray, parents, vjp) -> Tensor:
    tape = _same_tape(*parents)
    return Tensor(tape, data, parents, vjp, primitive, requires_grad=False)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b); x is (n, p), w is (p, q), b is (q,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise UsageError(f"affine shape mismatch: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise UsageError(f"affine bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b.data

    def vjp(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(_sum64(g, axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _op("affine", out, parents, vjp)


def sin(x: Tensor) -> Tensor:
    return _op("sine", np.sin(x.data), (x,), lambda g: [g * np.cos(x.data)])


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _op("sigmoid", s, (x,), lambda g: [g * s * (1.0 - s)])


def softplus(x: Tensor) -> Tensor:
    # log(1+e^x) computed stably for large |x|.
    out = np.logaddexp(0.0, x.data)
    return _op("softplus", out, (x,),
               lambda g: [g / (1.0 + np.exp(-x.data))])


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise UsageError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _op("add", a.data + b.data, (a, b), lambda g: [g, g])


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise UsageError(f"multiply shape mismatch: {a.shape} vs {b.shape}")
    return _op("multiply", a.data * b.data, (a, b),
               lambda g: [g * b.data, g * a.data])


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _op("scale", x.data * c, (x,), lambda g: [g * c])


def shift(x: Tensor, c: float) -> Tensor:
    """Add a scalar constant (a scale-free special case of add)."""
    c = float(c)
    return _op("scale", x.data + c, (x,), lambda g: [g])


def sum_reduce(x: Tensor, axis: int | None = None) -> Tensor:
    out = _sum64(x.data, axis=axis)
    shape = x.data.shape

    def vjp(g):
        if axis is None:
            return [np.broadcast_to(np.asarray(g), shape).astype(x.data.dtype)]
        return [np.broadcast_to(np.expand_dims(g, axis), shape).astype(x.data.dtype)]

    return _op("sum-reduce", np.asarray(out), (x,), vjp)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise UsageError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return list(np.split(g, splits, axis=axis))

    return _op("concatenate", out, tuple(parts), vjp)


def gather(x: Tensor, indices, axis: int = -1) -> Tensor:
    """Coordinate gather: select columns/rows by integer index."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)
    # Unique indices admit a plain scatter, which is much faster than add.at.
    unique = idx.size < 2 or bool(np.all(np.diff(np.sort(idx)) > 0))

    def vjp(g):
        gx = np.zeros_like(x.data)
        if unique:
            np.moveaxis(gx, axis, 0)[idx] = np.moveaxis(g, axis, 0)
        else:
            np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return [gx]

    return _op("coordinate-gather", out, (x,), vjp)


def absval(x: Tensor) -> Tensor:
    return _op("absolute-value", np.abs(x.data), (x,),
               lambda g: [g * np.sign(x.data)])


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _op("square-root", out, (x,), lambda g: [g * (0.5 / out)])


# ---------------------------------------------------------------------------
# Evaluate / backward
# ---------------------------------------------------------------------------

def evaluate(fn, inputs: list[np.ndarray], requires_grad: bool = True):
    """Run a tape-building function on fresh leaves; returns (output, tape).

    `fn` receives one leaf Tensor per input array and must compose only the
    fixed primitives above.
    """
    tape = Tape()
    leaves = [tape.leaf(x, requires_grad=requires_grad) for x in inputs]
    out = fn(*leaves)
    if not isinstance(out, Tensor) or out.tape is not tape:
        raise UsageError("tape-building function must return a Tensor on its tape")
    return out, tape


def backward(output: Tensor, seed=None) -> dict[Tensor, np.ndarray]:
    """Reverse pass from `output`; returns gradients keyed by leaf tensors.

    Consumes the tape: a second backward on the same tape is a usage error.
    """
    tape = output.tape
    if tape.consumed:
        raise UsageError("tape already consumed by a backward pass")
    tape.consumed = True

    if seed is None:
        seed = np.ones_like(output.data)
    seed = np.asarray(seed, dtype=output.data.dtype)
    if seed.shape != output.data.shape:
        raise UsageError(f"seed shape {seed.shape} != output shape {output.data.shape}")

    adjoints: dict[int, np.ndarray] = {output.index: seed}
    grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes[: output.index + 1]):
        g = adjoints.pop(node.index, None)
        if g is None or not node.requires_grad:
            continue
        if node.vjp is None:  # leaf
            grads[node] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            acc = adjoints.get(parent.index)
            adjoints[parent.index] = pg if acc is None else acc + pg
    tape.release()
    return grads


def finite_diff_check(fn, inputs: list[np.ndarray], perturbation: float = 1e-4,
                      eps_abs: float = 1e-12) -> float:
    """Max relative error between analytic gradients and central differences.

    `fn` must produce a scalar output. The central-difference side never
    touches the reverse pass, so it stays an independent oracle.
    """
    if perturbation <= 0:
        raise UsageError("perturbation must be positive")
    out, _ = evaluate(fn, inputs)
    if out.data.size != 1:
        raise UsageError("finite_diff_check requires a scalar output")
    grads = backward(out)
    leaves = [t for t in out.tape.nodes if t.primitive == "leaf" and t.requires_grad]

    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = grads.get(leaf, np.zeros_like(leaf.data))
        flat = inputs[k].astype(np.float64).ravel()
        for j in range(flat.size):
            plus = [x.copy() for x in inputs]
            minus = [x.copy() for x in inputs]
            plus[k].ravel()[j] += perturbation
            minus[k].ravel()[j] -= perturbation
            fp, _ = evaluate(lambda *ls: fn(*ls), plus, requires_grad=False)
            fm, _ = evaluate(lambda *ls: fn(*ls), minus, requires_grad=False)
            numeric = (float(fp.data) - float(fm.data)) / (2.0 * perturbation)
            a = float(analytic.ravel()[j])
            err = abs(a - numeric) / (abs(a) + abs(numeric) + eps_abs)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter moment accumulators for bias-corrected Adam."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def ensure(self, params: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update; mutates state, returns new param arrays."""
    if len(params) != len(grads):
        raise UsageError("params and grads length mismatch")
    state.ensure(params)
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise UsageError(f"adam shape mismatch: param {p.shape}, grad {g.shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out
