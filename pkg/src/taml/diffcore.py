"""Dense f64 tensors with define-by-run reverse-mode differentiation.

Operations record onto the active :class:`Tape` (entered with ``with Tape()``)
whenever at least one input requires a gradient.  Outside a tape everything
runs as plain numpy, which is what evaluation uses.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "NumericError",
    "Tensor",
    "Tape",
    "ParamSet",
    "SGD",
    "Adam",
    "tensor",
    "affine",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sqrt",
    "texp",
    "transpose",
    "relu",
    "softplus",
    "tsum",
    "tmean",
    "moments",
    "cross_entropy",
    "concat",
    "rows",
    "detach",
    "backward",
    "finite_diff_check",
]


class NumericError(ArithmeticError):
    """A tensor picked up NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite entries in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, opname: str) -> "Tensor":
        # fast path for op outputs: arr is already a fresh float64 array
        if not np.isfinite(arr).all():
            raise NumericError(f"{opname} produced non-finite values")
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations, in the order they were executed.

    Execution order is already a topological order, so the backward pass
    simply walks the node list in reverse.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._active[-1] if cls._active else None


def _record(out_arr: np.ndarray, inputs: tuple[Tensor, ...], bwd, opname: str) -> Tensor:
    tape = Tape.current()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, needs, opname)
    if needs:
        tape.nodes.append(_Node(inputs, out, bwd))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise and linear ops ---------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for x [B,Cin], w [Cin,Cout], b [Cout]."""
    xs, ws, bs = x.data.shape, w.data.shape, b.data.shape
    if len(xs) != 2 or len(ws) != 2 or xs[1] != ws[0] or bs != (ws[1],):
        raise ValueError(f"affine dimension mismatch: x{xs} w{ws} b{bs}")
    xd, wd = x.data, w.data

    def bwd(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _record(xd @ wd + b.data, (x, w, b), bwd, "affine")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), bwd, "matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericError("division by zero")
    out = ad / bd

    def bwd(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record(out, (a, b), bwd, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _record(out, (a,), bwd, "sqrt")


# When a list, relu appends a fingerprint of each activation mask; the
# gradient checker uses it to spot probes that cross a kink.
_mask_log: list | None = None


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def transpose(a: Tensor) -> Tensor:
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0
    if _mask_log is not None:
        _mask_log.append(np.packbits(mask).tobytes())

    def bwd(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), bwd, "relu")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))

    def bwd(g):
        # d/dx softplus = sigmoid(x), written to avoid overflow
        e = np.exp(-np.abs(xd))
        sig = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _record(out, (x,), bwd, "softplus")


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = x.data.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64), (x,), bwd, "sum")


def tmean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    if count == 0:
        raise ValueError("mean over an empty axis")
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def moments(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-column mean and population variance of a [B, C] tensor."""
    xd = x.data
    if xd.ndim != 2:
        raise ValueError(f"moments expects [B, C], got {xd.shape}")
    b = xd.shape[0]
    if b == 0:
        raise ValueError("moments of an empty batch")
    mu = xd.mean(axis=0)
    centred = xd - mu
    var = (centred * centred).mean(axis=0)
    tape = Tape.current()
    needs = tape is not None and x.requires_grad
    mean_t = Tensor._wrap(mu, needs, "moments")
    var_t = Tensor._wrap(var, needs, "moments")
    if needs:
        tape.nodes.append(_Node((x,), mean_t, lambda g: (np.broadcast_to(g / b, xd.shape).copy(),)))
        tape.nodes.append(_Node((x,), var_t, lambda g: (centred * (2.0 * g / b),)))
    return mean_t, var_t


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-softmax of the labelled entries."""
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError(f"logits must be [B, N], got {ld.shape}")
    bsz, n = ld.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (bsz,):
        raise ValueError(f"expected {bsz} labels, got {y.shape}")
    if bsz and (y.min() < 0 or y.max() >= n):
        raise IndexError(f"label out of range [0, {n})")
    shifted = ld - ld.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    idx = np.arange(bsz)
    loss = -logp[idx, y].mean()

    def bwd(g):
        p = np.exp(logp)
        p[idx, y] -= 1.0
        return (p * (g / bsz),)

    return _record(np.asarray(loss), (logits,), bwd, "cross_entropy")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    sizes = [p.data.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([p.data for p in parts], axis=axis), parts, bwd, "concat")


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice ``x[start:stop]``."""
    shape = x.data.shape

    def bwd(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record(x.data[start:stop].copy(), (x,), bwd, "rows")


def detach(x: Tensor) -> Tensor:
    return Tensor._wrap(x.data, False, "detach")


# -- backward -----------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for node in tape.nodes:
        produced.add(id(node.output))
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # whatever remains belongs to leaves (tensors not produced on this tape)
    leaves = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in produced:
                leaves[id(inp)] = inp
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    for key, g in grads.items():
        leaf = leaves.get(key)
        if leaf is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(leaf.data.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# -- parameters and optimizers ------------------------------------------------


class ParamSet:
    """Named parameters, iterated in lexicographic path order."""

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._p: dict[str, Tensor] = {}
        for path, t in (params or {}).items():
            self[path] = t

    def __setitem__(self, path: str, t: Tensor) -> None:
        if path in self._p:
            raise KeyError(f"duplicate parameter path {path!r}")
        t.requires_grad = True
        t.name = path
        self._p[path] = t

    def __getitem__(self, path: str) -> Tensor:
        return self._p[path]

    def __contains__(self, path: str) -> bool:
        return path in self._p

    def __len__(self) -> int:
        return len(self._p)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._p))

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for k in sorted(self._p):
            yield k, self._p[k]

    def subset(self, prefixes: Iterable[str]) -> list[str]:
        prefixes = tuple(prefixes)
        return [k for k in self if k.startswith(prefixes)]

    def zero_grad(self) -> None:
        for t in self._p.values():
            t.grad = None

    def copy(self) -> "ParamSet":
        return ParamSet({k: Tensor(v.data.copy()) for k, v in self.items()})

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._p.values())

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, t in self.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


def _require_grads(params: ParamSet, paths: Iterable[str]) -> list[str]:
    paths = list(paths)
    for p in paths:
        if params[p].grad is None:
            raise ValueError(f"missing gradient for parameter {p!r}")
    return paths


class SGD:
    kind = "sgd"

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParamSet, paths: Iterable[str] | None = None) -> None:
        for p in _require_grads(params, params if paths is None else paths):
            t = params[p]
            t.data = t.data - self.lr * t.grad

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        pass


class Adam:
    """Adam with per-path moments and per-path step counts."""

    kind = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: ParamSet, paths: Iterable[str] | None = None) -> None:
        b1, b2 = self.beta1, self.beta2
        for p in _require_grads(params, params if paths is None else paths):
            t = params[p]
            g = t.grad
            m = self.m.get(p)
            if m is None:
                m = np.zeros_like(t.data)
                self.v[p] = np.zeros_like(t.data)
            n = self.t.get(p, 0) + 1
            m = b1 * m + (1 - b1) * g
            v = b2 * self.v[p] + (1 - b2) * g * g
            self.m[p], self.v[p], self.t[p] = m, v, n
            mhat = m / (1 - b1**n)
            vhat = v / (1 - b2**n)
            t.data = t.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for p in sorted(self.m):
            out[f"m/{p}"] = self.m[p]
            out[f"v/{p}"] = self.v[p]
            out[f"t/{p}"] = np.array([float(self.t[p])])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.m, self.v, self.t = {}, {}, {}
        for key, arr in arrays.items():
            kind, path = key.split("/", 1)
            if kind == "m":
                self.m[path] = arr.copy()
            elif kind == "v":
                self.v[path] = arr.copy()
            elif kind == "t":
                self.t[path] = int(arr[0])


# -- gradient checking --------------------------------------------------------


def finite_diff_check(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    h: float = 1e-6,
    max_coords: int | None = 200,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = True,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild its graph from ``params`` on each call and be
    deterministic.  At most ``max_coords`` coordinates are probed (all of
    them when the set is smaller).  With ``skip_kinks`` a coordinate whose
    +-h probes change any relu activation pattern is excluded.
    """
    params.zero_grad()
    with Tape() as tape:
        loss = f(params)
    backward(tape, loss)
    coords = [(p, i) for p, t in params.items() for i in range(t.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    def evaluate() -> tuple[float, list]:
        global _mask_log
        _mask_log = [] if skip_kinks else None
        try:
            val = float(f(params).data)
        finally:
            masks, _mask_log = _mask_log, None
        if not math.isfinite(val):
            raise NumericError("finite-difference probe returned non-finite loss")
        return val, masks

    _, m0 = evaluate()
    worst = 0.0
    for path, i in coords:
        t = params[path]
        flat = t.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp, mp = evaluate()
        flat[i] = orig - h
        fm, mm = evaluate()
        flat[i] = orig
        if skip_kinks and (mp != m0 or mm != m0):
            continue
        numeric = (fp - fm) / (2 * h)
        # a parameter the loss never touched has zero gradient
        analytic = 0.0 if t.grad is None else float(t.grad.reshape(-1)[i])
        err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, err)
    params.zero_grad()
    return worst
