"""Reverse-mode autodiff over dense float64 arrays with a recording switch.

The tape records one node per primitive application. Recording can be
paused; ops computed while paused return constant leaves whose values are
bit-identical to the recorded path, which is how selective-graph gradients
(stop-gradient semantics) are realized. `node_count` is the memory proxy
used by the benchmark harness.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive's rule."""


PRIMITIVES = (
    "add", "sub", "scale", "mul", "matmul", "affine",
    "tanh", "sum", "mean", "sqnorm", "clamp", "exp", "log",
)


def _freeze(value) -> np.ndarray:
    if (isinstance(value, np.ndarray) and value.dtype == np.float64
            and not value.flags.writeable):
        return value  # already immutable; sharing it is safe
    arr = np.array(value, dtype=np.float64, copy=True, order="C")
    arr.flags.writeable = False
    return arr


class Var:
    """Handle to a value on a tape. Valid only for the tape that issued it."""

    __slots__ = ("tape", "value", "live")

    def __init__(self, tape: "Tape", value: np.ndarray, live: bool):
        self.tape = tape
        self.value = value
        self.live = live

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.shape}, live={self.live})"


class Node:
    __slots__ = ("op", "out", "parents", "saved")

    def __init__(self, op: str, out: Var, parents: tuple[Var, ...], saved: tuple):
        self.op = op
        self.out = out
        self.parents = parents
        self.saved = saved


class Tape:
    """Single-writer recording tape. Use one tape per concurrent worker."""

    def __init__(self, recording: bool = True):
        self.nodes: list[Node] = []
        self.recording = recording
        self.watched: list[Var] = []

    # ---------------------------------------------------------------- leaves

    def constant(self, value) -> Var:
        return Var(self, _freeze(value), live=False)

    def variable(self, value) -> Var:
        """Watched leaf: backward() reports a gradient for it."""
        v = Var(self, _freeze(value), live=True)
        self.watched.append(v)
        return v

    def node_count(self) -> int:
        return len(self.nodes)

    @contextmanager
    def paused(self):
        """Disable recording inside the block (values are unaffected)."""
        prev = self.recording
        self.recording = False
        try:
            yield self
        finally:
            self.recording = prev

    # ------------------------------------------------------------- recording

    def _own(self, *vars_: Var, op: str):
        for v in vars_:
            if not isinstance(v, Var):
                raise TypeError(f"{op}: expected Var, got {type(v).__name__}")
            if v.tape is not self:
                raise ValueError(f"{op}: operand belongs to a different tape")

    def _emit(self, op: str, value: np.ndarray, parents: tuple[Var, ...], saved: tuple) -> Var:
        # op results are freshly allocated by numpy; freeze without copying
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        if self.recording and any(p.live for p in parents):
            out = Var(self, value, live=True)
            self.nodes.append(Node(op, out, parents, saved))
            return out
        return Var(self, value, live=False)

    # ------------------------------------------------------------ primitives

    def add(self, a: Var, b: Var) -> Var:
        self._own(a, b, op="add")
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return self._emit("add", a.value + b.value, (a, b), ())

    def sub(self, a: Var, b: Var) -> Var:
        self._own(a, b, op="sub")
        if a.shape != b.shape:
            raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
        return self._emit("sub", a.value - b.value, (a, b), ())

    def scale(self, a: Var, c: float) -> Var:
        self._own(a, op="scale")
        c = float(c)
        return self._emit("scale", c * a.value, (a,), (c,))

    def mul(self, a: Var, b: Var) -> Var:
        """Elementwise product; one operand may be scalar-shaped."""
        self._own(a, b, op="mul")
        if a.shape != b.shape and a.shape != () and b.shape != ():
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} are not "
                             "equal and neither is scalar")
        return self._emit("mul", a.value * b.value, (a, b),
                          (a.value.copy(), b.value.copy()))

    def matmul(self, a: Var, b: Var) -> Var:
        self._own(a, b, op="matmul")
        if a.value.ndim != 2 or b.value.ndim not in (1, 2):
            raise ShapeError(f"matmul: expects (m,k)@(k,n) or (m,k)@(k,), "
                             f"got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims differ: {a.shape} @ {b.shape}")
        return self._emit("matmul", a.value @ b.value, (a, b),
                          (a.value.copy(), b.value.copy()))

    def affine(self, w: Var, x: Var, b: Var) -> Var:
        """w @ x + b for w (m,k), x (k,) or (k,n), b matching the output."""
        self._own(w, x, b, op="affine")
        if w.value.ndim != 2 or x.value.ndim not in (1, 2) or w.shape[1] != x.shape[0]:
            raise ShapeError(f"affine: bad w @ x shapes: {w.shape} @ {x.shape}")
        y = w.value @ x.value
        if b.shape != y.shape:
            raise ShapeError(f"affine: bias shape {b.shape} does not match "
                             f"product shape {y.shape}")
        return self._emit("affine", y + b.value, (w, x, b),
                          (w.value.copy(), x.value.copy()))

    def tanh(self, a: Var) -> Var:
        self._own(a, op="tanh")
        y = np.tanh(a.value)
        return self._emit("tanh", y, (a,), (y,))

    def sum(self, a: Var) -> Var:
        self._own(a, op="sum")
        return self._emit("sum", np.sum(a.value), (a,), (a.shape,))

    def mean(self, a: Var) -> Var:
        self._own(a, op="mean")
        return self._emit("mean", np.mean(a.value), (a,), (a.shape, a.value.size))

    def sqnorm(self, a: Var) -> Var:
        """Sum of squared entries (scalar)."""
        self._own(a, op="sqnorm")
        return self._emit("sqnorm", np.sum(a.value * a.value), (a,),
                          (a.value.copy(),))

    def clamp(self, a: Var, lo: float, hi: float) -> Var:
        self._own(a, op="clamp")
        lo, hi = float(lo), float(hi)
        if not lo <= hi:
            raise ValueError(f"clamp: lo={lo} > hi={hi}")
        mask = (a.value > lo) & (a.value < hi)  # zero subgradient on boundary
        return self._emit("clamp", np.clip(a.value, lo, hi), (a,),
                          (mask.astype(np.float64),))

    def exp(self, a: Var) -> Var:
        self._own(a, op="exp")
        y = np.exp(a.value)
        return self._emit("exp", y, (a,), (y,))

    def log(self, a: Var) -> Var:
        self._own(a, op="log")
        if np.any(a.value <= 0.0):
            raise ValueError("log: requires strictly positive entries")
        return self._emit("log", np.log(a.value), (a,), (a.value.copy(),))

    def apply(self, op: str, *args) -> Var:
        """Apply a primitive by name (generic entry for harness code)."""
        if op not in PRIMITIVES:
            raise ValueError(f"unknown primitive {op!r}")
        return getattr(self, op)(*args)

    def stop_gradient(self, v: Var) -> Var:
        """Identity on values; backward contributes zero to all ancestors."""
        self._own(v, op="stop_gradient")
        return Var(self, v.value, live=False)

    # -------------------------------------------------------------- backward

    def backward(self, output: Var) -> dict[Var, np.ndarray]:
        """Reverse accumulation from a scalar output to every watched leaf."""
        self._own(output, op="backward")
        if output.shape != ():
            raise ShapeError(f"backward: output must be scalar-shaped, "
                             f"got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.asarray(1.0)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, _VJP[node.op](node, g)):
                if not parent.live or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
        return {w: np.asarray(grads.get(id(w), np.zeros(w.shape)), dtype=np.float64)
                for w in self.watched}


# Backward rules, one per primitive: (node, grad_out) -> per-parent grads.

def _vjp_add(node, g):
    return g, g


def _vjp_sub(node, g):
    return g, -g


def _vjp_scale(node, g):
    (c,) = node.saved
    return (c * g,)


def _vjp_mul(node, g):
    a, b = node.saved
    ga, gb = g * b, g * a
    if a.shape == () and ga.shape != ():
        ga = np.sum(ga)
    if b.shape == () and gb.shape != ():
        gb = np.sum(gb)
    return ga, gb


def _vjp_matmul(node, g):
    a, b = node.saved
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


def _vjp_affine(node, g):
    w, x = node.saved
    gw = np.outer(g, x) if x.ndim == 1 else g @ x.T
    return gw, w.T @ g, g


def _vjp_tanh(node, g):
    (y,) = node.saved
    return (g * (1.0 - y * y),)


def _vjp_sum(node, g):
    (shape,) = node.saved
    return (g * np.ones(shape),)


def _vjp_mean(node, g):
    shape, size = node.saved
    return ((g / size) * np.ones(shape),)


def _vjp_sqnorm(node, g):
    (a,) = node.saved
    return (2.0 * g * a,)


def _vjp_clamp(node, g):
    (mask,) = node.saved
    return (g * mask,)


def _vjp_exp(node, g):
    (y,) = node.saved
    return (g * y,)


def _vjp_log(node, g):
    (a,) = node.saved
    return (g / a,)


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "scale": _vjp_scale,
    "mul": _vjp_mul,
    "matmul": _vjp_matmul,
    "affine": _vjp_affine,
    "tanh": _vjp_tanh,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "sqnorm": _vjp_sqnorm,
    "clamp": _vjp_clamp,
    "exp": _vjp_exp,
    "log": _vjp_log,
}
