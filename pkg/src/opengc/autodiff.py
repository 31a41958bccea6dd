"""Minimal reverse-mode tape over dense float64 arrays.

Every op below dispatches on its arguments: with no ``Node`` among them it
is plain numpy and returns an ndarray, with at least one ``Node`` it
records onto that node's tape and returns a new ``Node``.  Writing the
objective once against these ops therefore gives both the differentiable
path (leaves = condensed features and log-temperature) and a cheap
value-only path for finite differencing.

The tape is an append-only list; creation order is a topological order,
so the backward pass is a single reverse sweep that visits each recorded
node exactly once.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg

from .errors import NumericalError

_SOLVE_TOL = 1e-10  # max-norm residual bound relative to max|B|


class Node:
    """A recorded value. ``grad`` is populated by ``Tape.backward``."""

    __slots__ = ("value", "grad", "tape", "_vjp", "is_leaf")

    def __init__(self, value, tape, vjp=None, is_leaf=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self._vjp = vjp
        self.is_leaf = is_leaf

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, leaf={self.is_leaf})"


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Node] = []

    def leaf(self, value, requires_grad: bool = True) -> Node:
        node = Node(value, self, is_leaf=requires_grad)
        self.nodes.append(node)
        if requires_grad:
            self.leaves.append(node)
        return node

    def _record(self, value, vjp) -> Node:
        node = Node(value, self, vjp=vjp)
        self.nodes.append(node)
        return node

    def _accumulate(self, target: Node, g: np.ndarray) -> None:
        if target.grad is None:
            target.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            target.grad += g

    def backward(self, loss: Node) -> list[np.ndarray]:
        """Reverse sweep from a scalar loss; returns one gradient per
        marked leaf (zeros for leaves the loss does not depend on)."""
        if not isinstance(loss, Node) or loss.tape is not self:
            raise ValueError("loss is not a node on this tape")
        if loss.value.ndim != 0:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones(())
        for node in reversed(self.nodes):
            if node.grad is not None and node._vjp is not None:
                node._vjp(node.grad)
        return [
            leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
            for leaf in self.leaves
        ]


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _val(a):
    return a.value if isinstance(a, Node) else np.asarray(a, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b):
    tape = _tape_of(a, b)
    va, vb = _val(a), _val(b)
    if va.shape[-1] != vb.shape[0]:
        raise ValueError(f"matmul shape mismatch: {va.shape} @ {vb.shape}")
    out = va @ vb
    if tape is None:
        return out

    def vjp(g):
        if isinstance(a, Node):
            tape._accumulate(a, g @ vb.T)
        if isinstance(b, Node):
            tape._accumulate(b, va.T @ g)

    return tape._record(out, vjp)


def transpose(a):
    tape = _tape_of(a)
    out = _val(a).T
    if tape is None:
        return out

    def vjp(g):
        tape._accumulate(a, g.T)

    return tape._record(out, vjp)


def add(a, b):
    tape = _tape_of(a, b)
    va, vb = _val(a), _val(b)
    out = va + vb
    if tape is None:
        return out

    def vjp(g):
        if isinstance(a, Node):
            tape._accumulate(a, _unbroadcast(g, va.shape))
        if isinstance(b, Node):
            tape._accumulate(b, _unbroadcast(g, vb.shape))

    return tape._record(out, vjp)


def scale(a, alpha: float):
    tape = _tape_of(a)
    out = _val(a) * alpha
    if tape is None:
        return out

    def vjp(g):
        tape._accumulate(a, g * alpha)

    return tape._record(out, vjp)


def sub(a, b):
    return add(a, scale(b, -1.0))


def mul(a, b):
    """Elementwise product with scalar broadcasting."""
    tape = _tape_of(a, b)
    va, vb = _val(a), _val(b)
    out = va * vb
    if tape is None:
        return out

    def vjp(g):
        if isinstance(a, Node):
            tape._accumulate(a, _unbroadcast(g * vb, va.shape))
        if isinstance(b, Node):
            tape._accumulate(b, _unbroadcast(g * va, vb.shape))

    return tape._record(out, vjp)


def relu(a):
    """max(x, 0); the subgradient at exactly 0 is fixed to 0."""
    tape = _tape_of(a)
    va = _val(a)
    out = np.maximum(va, 0.0)
    if tape is None:
        return out
    mask = va > 0.0

    def vjp(g):
        tape._accumulate(a, g * mask)

    return tape._record(out, vjp)


def exp(a):
    tape = _tape_of(a)
    out = np.exp(_val(a))
    if tape is None:
        return out

    def vjp(g):
        tape._accumulate(a, g * out)

    return tape._record(out, vjp)


def reciprocal(a):
    tape = _tape_of(a)
    with np.errstate(divide="ignore"):
        out = 1.0 / _val(a)
    if tape is None:
        return out

    def vjp(g):
        tape._accumulate(a, -g * out * out)

    return tape._record(out, vjp)


def reduce_sum(a):
    tape = _tape_of(a)
    va = _val(a)
    out = va.sum()
    if tape is None:
        return out

    def vjp(g):
        tape._accumulate(a, np.broadcast_to(g, va.shape))

    return tape._record(out, vjp)


def reduce_mean(a):
    tape = _tape_of(a)
    va = _val(a)
    out = va.mean()
    if tape is None:
        return out
    inv = 1.0 / va.size

    def vjp(g):
        tape._accumulate(a, np.broadcast_to(g * inv, va.shape))

    return tape._record(out, vjp)


def log_softmax(z, log_tau=0.0):
    """Row-wise log-softmax of ``z / tau`` with ``tau = exp(log_tau)``.

    Rows are shifted by their max before exponentiation, so large logits
    or tiny temperatures do not overflow.  ``log_tau`` may be a scalar
    node, in which case the temperature receives a gradient too.
    """
    tape = _tape_of(z, log_tau)
    vz = _val(z)
    lt = float(_val(log_tau))
    if not np.all(np.isfinite(vz)):
        raise NumericalError("non-finite logits")
    s = vz * math.exp(-lt)
    shifted = s - s.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    if tape is None:
        return out
    p = np.exp(out)

    def vjp(g):
        ds = g - p * g.sum(axis=1, keepdims=True)
        if isinstance(z, Node):
            tape._accumulate(z, ds * math.exp(-lt))
        if isinstance(log_tau, Node):
            tape._accumulate(log_tau, np.asarray(-(ds * s).sum()))

    return tape._record(out, vjp)


def _cholesky_with_jitter(m: np.ndarray):
    """Factor an SPD matrix, retrying once with a trace-scaled diagonal
    jitter before giving up."""
    try:
        return scipy.linalg.cho_factor(m, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        pass
    jitter = 1e-10 * np.trace(m) / m.shape[0]
    try:
        return scipy.linalg.cho_factor(
            m + jitter * np.eye(m.shape[0]), lower=True, check_finite=False
        )
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError("matrix not SPD") from exc


def _refined_solve(factor, m: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cholesky solve plus up to two iterative-refinement sweeps, keeping
    the residual below _SOLVE_TOL * max|B|."""
    x = scipy.linalg.cho_solve(factor, b, check_finite=False)
    bound = _SOLVE_TOL * max(np.abs(b).max(), np.finfo(np.float64).tiny)
    for _ in range(2):
        resid = b - m @ x
        if np.abs(resid).max() <= bound:
            break
        x = x + scipy.linalg.cho_solve(factor, resid, check_finite=False)
    return x


def spd_solve(m, b):
    """Solve M X = B for symmetric positive definite M.

    Backward rule: with X = solve(M, B) and output cotangent G,
    dB = solve(M, G) and dM = -solve(M, G) X^T (the outer-product
    correction), reusing the forward factorization.
    """
    tape = _tape_of(m, b)
    vm, vb = _val(m), _val(b)
    if vm.ndim != 2 or vm.shape[0] != vm.shape[1]:
        raise ValueError(f"expected square system matrix, got {vm.shape}")
    if vb.shape[0] != vm.shape[0]:
        raise ValueError(f"shape mismatch: {vm.shape} vs {vb.shape}")
    factor = _cholesky_with_jitter(vm)
    out = _refined_solve(factor, vm, vb)
    if tape is None:
        return out

    def vjp(g):
        s = scipy.linalg.cho_solve(factor, g, check_finite=False)
        if isinstance(b, Node):
            tape._accumulate(b, s)
        if isinstance(m, Node):
            tape._accumulate(m, -s @ out.T)

    return tape._record(out, vjp)


def grad_check(f, x0: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite
    differences of a scalar function of one matrix leaf.

    ``f`` must be written against the ops in this module so it can be
    evaluated both on a leaf node (reverse pass) and on plain perturbed
    arrays (differences).  Entries whose forward and backward one-sided
    differences disagree by more than 1% of the central estimate are
    treated as sitting on a kink (e.g. relu at exactly 0) and excluded
    from the comparison.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if h <= 0:
        raise ValueError("step h must be positive")
    tape = Tape()
    leaf = tape.leaf(x0.copy())
    loss = f(leaf)
    if not isinstance(loss, Node):
        raise ValueError("f must return a node when given a leaf")
    ad = tape.backward(loss)[0]

    f0 = float(f(x0.copy()))
    if not math.isfinite(f0):
        raise NumericalError("non-finite evaluation at base point")
    worst = 0.0
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x0.copy()
        xp[idx] += h
        xm = x0.copy()
        xm[idx] -= h
        fp, fm = float(f(xp)), float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"non-finite evaluation at perturbed entry {idx}")
        fd = (fp - fm) / (2.0 * h)
        one_sided_gap = abs((fp - f0) / h - (f0 - fm) / h)
        if one_sided_gap > 1e-2 * max(1.0, abs(fd)):
            continue  # kink inside the stencil
        err = abs(ad[idx] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
