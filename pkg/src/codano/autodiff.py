"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps float64/complex128 data; every operation records a closure that
maps the output cotangent to input cotangents (micrograd-style tape, freed
after backward). Complex tensors use the convention grad = dL/dRe + i dL/dIm,
under which linear maps pull back through their conjugate transpose; gradients
of real tensors fed into complex ops keep only their real part.

Reductions across the token axis of the attention mechanism must be invariant
to input permutations at the bit level, so `ordered_sum` and the softmax
denominator sum their terms in value-sorted order (IEEE addition commutes but
does not associate).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError, TrainingStateError

_CHECKED = False
_GRAD_ENABLED = True


def set_checked(flag: bool) -> None:
    """Enable finite-value checks after every forward op and NaN checks in backward."""
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


class no_grad:
    """Context manager that skips tape recording (evaluation / finite differences)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.complex128):
            arr = arr.astype(np.complex128 if np.iscomplexobj(arr) else np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.real) if np.iscomplexobj(self.data) else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents, vjp, op: str) -> Tensor:
    """Create an op output, recording the tape edge when gradients are live."""
    if _CHECKED and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op {op!r}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a cotangent down to the shape numpy broadcast it up from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _match(t: Tensor, g: np.ndarray) -> np.ndarray:
    """Coerce a cotangent to the primal's dtype (real primal keeps the real part)."""
    if np.iscomplexobj(g) and not np.iscomplexobj(t.data):
        g = g.real
    return g


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * np.conj(b.data), a.data.shape),
            _unbroadcast(g * np.conj(a.data), b.data.shape),
        )

    return _node(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        inv = 1.0 / b.data
        return (
            _unbroadcast(g * np.conj(inv), a.data.shape),
            _unbroadcast(-g * np.conj(a.data * inv * inv), b.data.shape),
        )

    return _node(out, (a, b), vjp, "div")


def texp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * np.conj(out),)

    return _node(out, (a,), vjp, "exp")


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * np.conj(0.5 / out),)

    return _node(out, (a,), vjp, "sqrt")


def gelu(a) -> Tensor:
    """Exact GELU x * Phi(x) with the erf form; real inputs only."""
    a = as_tensor(a)
    if np.iscomplexobj(a.data):
        raise ShapeError("gelu is defined for real tensors")
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return _node(out, (a,), vjp, "gelu")


# -- shape ---------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), vjp, "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _node(out, (a,), vjp, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(ts), vjp, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(out, tuple(ts), vjp, "stack")


# -- reductions ----------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def ordered_sum(a, axis: int) -> Tensor:
    """Sum along one axis in value-sorted order: bit-invariant to permutations."""
    a = as_tensor(a)
    if np.iscomplexobj(a.data):
        raise ShapeError("ordered_sum is defined for real tensors")
    out = np.sort(a.data, axis=axis).sum(axis=axis)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _node(out, (a,), vjp, "ordered_sum")


def softmax_rows(a) -> Tensor:
    """Row softmax over the last axis with a value-sorted denominator sum."""
    a = as_tensor(a)
    if np.iscomplexobj(a.data):
        raise ShapeError("softmax_rows is defined for real tensors")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    den = np.sort(e, axis=-1).sum(axis=-1, keepdims=True)
    s = e / den

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _node(s, (a,), vjp, "softmax_rows")


# -- contractions ----------------------------------------------------------


def _einsum_parts(spec: str):
    lhs, out = spec.split("->")
    a_sub, b_sub = lhs.split(",")
    return a_sub, b_sub, out


def einsum2(spec: str, a, b) -> Tensor:
    """Two-operand einsum with a conjugating vector-Jacobian product."""
    a, b = as_tensor(a), as_tensor(b)
    a_sub, b_sub, o_sub = _einsum_parts(spec)
    if "." in spec:
        raise ShapeError("einsum2 requires explicit subscripts (no ellipsis)")
    # the swapped-subscript vjp needs every input index visible from the other side
    for sub, other in ((a_sub, b_sub), (b_sub, a_sub)):
        orphans = set(sub) - set(other) - set(o_sub)
        if orphans:
            raise ShapeError(f"einsum spec {spec!r} sums {orphans} within one operand")
    out = np.einsum(spec, a.data, b.data)

    def vjp(g):
        ga = np.einsum(f"{o_sub},{b_sub}->{a_sub}", g, np.conj(b.data))
        gb = np.einsum(f"{o_sub},{a_sub}->{b_sub}", g, np.conj(a.data))
        return ga, gb

    return _node(out, (a, b), vjp, f"einsum[{spec}]")


def sparse_matmul(sp_pair, x) -> Tensor:
    """Multiply by a constant scipy CSR matrix; sp_pair = (S, S_transpose_csr)."""
    s_mat, s_t = sp_pair
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("sparse_matmul expects a 2D tensor")
    out = s_mat @ x.data

    def vjp(g):
        return (s_t @ g,)

    return _node(out, (x,), vjp, "sparse_matmul")


# -- spectral ----------------------------------------------------------------


def fftn(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = np.fft.fftn(a.data, axes=axes)
    n_total = int(np.prod([a.data.shape[ax] for ax in axes]))

    def vjp(g):
        return (np.fft.ifftn(g, axes=axes) * n_total,)

    return _node(out, (a,), vjp, "fftn")


def ifftn(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = np.fft.ifftn(a.data, axes=axes)
    n_total = int(np.prod([a.data.shape[ax] for ax in axes]))

    def vjp(g):
        return (np.fft.fftn(g, axes=axes) / n_total,)

    return _node(out, (a,), vjp, "ifftn")


def real(a) -> Tensor:
    a = as_tensor(a)
    out = np.ascontiguousarray(a.data.real)

    def vjp(g):
        return (g.astype(np.complex128) if np.iscomplexobj(a.data) else g,)

    return _node(out, (a,), vjp, "real")


def make_complex(re, im) -> Tensor:
    re, im = as_tensor(re), as_tensor(im)
    if np.iscomplexobj(re.data) or np.iscomplexobj(im.data):
        raise ShapeError("make_complex expects real parts")
    out = re.data + 1j * im.data

    def vjp(g):
        return np.ascontiguousarray(g.real), np.ascontiguousarray(g.imag)

    return _node(out, (re, im), vjp, "make_complex")


def corners_extract(a, modes) -> Tensor:
    """Gather the retained per-axis FFT bins [0, m) and [-m, -1] of the leading
    spatial axes after a batch axis: input (batch, n1, ..., nd, c)."""
    a = as_tensor(a)
    spatial = a.data.shape[1:-1]
    idx = [np.r_[0:m, n - m:n] for m, n in zip(modes, spatial)]
    out = a.data
    for ax, ix in enumerate(idx):
        out = np.take(out, ix, axis=ax + 1)

    def vjp(g):
        full = np.zeros(a.data.shape, dtype=g.dtype)
        sl = np.ix_(np.arange(a.data.shape[0]), *idx, np.arange(a.data.shape[-1]))
        full[sl] = g
        return (full,)

    return _node(out, (a,), vjp, "corners_extract")


def corners_embed(a, resolution) -> Tensor:
    """Adjoint of corners_extract: place retained bins into a zero spectrum."""
    a = as_tensor(a)
    modes = tuple(s // 2 for s in a.data.shape[1:-1])
    idx = [np.r_[0:m, n - m:n] for m, n in zip(modes, resolution)]
    shape = (a.data.shape[0],) + tuple(resolution) + (a.data.shape[-1],)
    out = np.zeros(shape, dtype=a.data.dtype if np.iscomplexobj(a.data) else np.complex128)
    sl = np.ix_(np.arange(shape[0]), *idx, np.arange(shape[-1]))
    out[sl] = a.data

    def vjp(g):
        got = g
        for ax, ix in enumerate(idx):
            got = np.take(got, ix, axis=ax + 1)
        return (got,)

    return _node(out, (a,), vjp, "corners_embed")


# -- graph traversal ----------------------------------------------------------


def backward(loss: Tensor, params=None) -> None:
    """Reverse sweep from a scalar loss; frees the tape afterwards.

    Any tensors in `params` (a ParamStore or iterable of Tensors) that the
    graph never reached get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        if _CHECKED:
            for g in grads:
                if g is not None and np.isnan(g).any():
                    raise NumericError(f"NaN in backward pass of op {node._op!r}")
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad or g is None:
                continue
            g = _match(parent, g)
            if g.shape != parent.data.shape:
                raise ShapeError(
                    f"vjp of {node._op!r} produced shape {g.shape} for {parent.data.shape}"
                )
            parent.grad = g if parent.grad is None else parent.grad + g
        node._parents = ()
        node._vjp = None
        node.grad = None  # intermediates drop their cotangent; leaves keep theirs
    if params is not None:
        tensors = params.tensors() if hasattr(params, "tensors") else list(params)
        for t in tensors:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


# -- parameter store ----------------------------------------------------------


class ParamStore:
    """Named parameter tensors with freeze flags; creation order is recorded."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise TrainingStateError(f"parameter {name!r} already exists")
        t = Tensor(np.array(array, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list:
        return list(self._params.values())

    def freeze(self, prefix: str) -> None:
        hits = [n for n in self._params if n == prefix or n.startswith(prefix)]
        self._frozen.update(hits)

    def unfreeze_all(self) -> None:
        self._frozen.clear()

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable_names(self) -> list[str]:
        return [n for n in self._params if n not in self._frozen]

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise TrainingStateError(f"state mismatch: missing {missing}, extra {extra}")
        for n, arr in state.items():
            t = self._params[n]
            if t.data.shape != arr.shape:
                raise ShapeError(f"parameter {n!r}: shape {arr.shape} != {t.data.shape}")
            t.data = np.array(arr, dtype=np.float64)


# -- optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments keyed by parameter name; lr 1e-3, betas (0.9, 0.999), eps 1e-8."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all trainable gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for name in params.trainable_names():
        g = params[name].grad
        if g is None:
            raise TrainingStateError(f"missing gradient on trainable parameter {name!r}")
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for name in params.trainable_names():
            params[name].grad = params[name].grad * scale
    return norm


def optimizer_step(params: ParamStore, state: AdamState) -> None:
    """One Adam update on every trainable parameter; frozen entries untouched."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name in params.trainable_names():
        t = params[name]
        g = t.grad
        if g is None:
            raise TrainingStateError(f"missing gradient on trainable parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        t.data = t.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -- gradient verification ---------------------------------------------------------


@dataclass
class GroupCheck:
    max_rel_err: float
    n_elements: int
    status: str  # "ok" | "fail" | "skipped"


@dataclass
class GradCheckReport:
    groups: dict
    tol: float
    passed: bool
    worst_group: str | None
    max_rel_err: float

    def summary_lines(self) -> list[str]:
        lines = []
        for name, g in self.groups.items():
            lines.append(f"{name}: {g.status} max_rel_err={g.max_rel_err:.3e} n={g.n_elements}")
        lines.append(
            f"overall: {'PASS' if self.passed else 'FAIL'} "
            f"max_rel_err={self.max_rel_err:.3e} tol={self.tol:.1e}"
        )
        return lines


def grad_check(loss_fn, params: ParamStore, tol: float = 1e-5, step: float = 1e-6,
               include=None, corrupt: str | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    Per-element relative error uses max(|ad|, |fd|, floor) in the denominator,
    where floor = 1e-3 * the global max gradient magnitude: central differences
    of an O(1) loss carry ~1e-10 absolute noise, so elements with gradients at
    that floor are compared on the scale where the comparison means something.
    Frozen parameters are reported as skipped. `corrupt` perturbs one group's
    reverse-mode gradient before comparing (a hook for testing the checker).
    """
    params.zero_grads()
    loss = loss_fn()
    backward(loss, params)
    ad = {n: params[n].grad.copy() for n in params.trainable_names()}
    if corrupt is not None:
        if corrupt not in ad:
            raise TrainingStateError(f"cannot corrupt unknown/frozen group {corrupt!r}")
        ad[corrupt] = ad[corrupt] + 1.0 + np.abs(ad[corrupt])
    gmax = max((float(np.max(np.abs(g))) for g in ad.values()), default=0.0)
    floor = 1e-3 * gmax + 1e-12
    groups: dict[str, GroupCheck] = {}
    worst, worst_name = 0.0, None
    names = params.names() if include is None else [n for n in params.names() if n in include]
    with no_grad():
        for name in names:
            if params.is_frozen(name):
                groups[name] = GroupCheck(0.0, 0, "skipped")
                continue
            t = params[name]
            saved = t.data.copy()
            fd = np.zeros_like(saved)
            it = np.nditer(saved, flags=["multi_index"])
            for _ in it:
                ix = it.multi_index
                h = step * max(1.0, abs(saved[ix]))
                t.data[ix] = saved[ix] + h
                up = float(loss_fn().data)
                t.data[ix] = saved[ix] - h
                down = float(loss_fn().data)
                t.data[ix] = saved[ix]
                fd[ix] = (up - down) / (2.0 * h)
            t.data = saved
            denom = np.maximum(np.maximum(np.abs(ad[name]), np.abs(fd)), floor)
            rel = float(np.max(np.abs(ad[name] - fd) / denom)) if fd.size else 0.0
            status = "ok" if rel <= tol else "fail"
            groups[name] = GroupCheck(rel, int(fd.size), status)
            if rel > worst:
                worst, worst_name = rel, name
    passed = all(g.status != "fail" for g in groups.values())
    return GradCheckReport(groups=groups, tol=tol, passed=passed,
                           worst_group=worst_name, max_rel_err=worst)
