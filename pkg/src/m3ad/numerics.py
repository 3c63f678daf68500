"""Dense tensors with reverse-mode automatic differentiation.

All model math runs through :class:`Tensor` and the op functions below.
Forward values are plain numpy arrays; each differentiable op records a
vector-Jacobian closure so :meth:`Tensor.backward` can fill gradients of
the leaves it reached. The engine is deliberately small: only the ops the
model needs exist, and each one is written so its gradient can be checked
against central finite differences (see :func:`grad_check`).

Also hosted here because they sit at the same level of the stack:
the :class:`Module` parameter container, the ``no_grad`` context, and the
``.m3t`` tensor file format.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special

from .errors import CheckpointError, ContractError, ShapeError

_GRAD_ENABLED = True

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block. Ops still compute values."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation.

    Parameters
    ----------
    data : array-like
        Floating-point payload. Integer input is rejected; label indices
        and gather indices are passed to ops as raw numpy arrays instead.
    requires_grad : bool
        Leaves with ``requires_grad=True`` receive ``.grad`` after a
        ``backward`` call that reaches them. Repeated backward calls
        accumulate into ``.grad`` until :meth:`zero_grad`.
    name : str
        Optional label used in error messages and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating) or arr.dtype == np.float16:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- graph plumbing ------------------------------------------------

    def _is_node(self) -> bool:
        return self.requires_grad or self._vjp is not None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor to every reachable leaf.

        Without an explicit ``grad`` the tensor must be scalar. Leaf
        gradients accumulate across calls; intermediate gradients are
        discarded once consumed.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(
                    f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent._is_node():
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = g.copy()
                    else:
                        node.grad = node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent._is_node():
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    # -- operator sugar ------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)


def _wrap(node_data: np.ndarray, parents: tuple[Tensor, ...],
          vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(node_data)
    if _GRAD_ENABLED and any(p._is_node() for p in parents):
        out._parents = parents
        out._vjp = vjp
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise ShapeError(f"operand dtypes differ: {like.dtype} vs {x.dtype}")
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic --------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _coerce(b, a)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _wrap(data, (a, b), vjp)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    b = _coerce(b, a)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _wrap(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _coerce(b, a)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _wrap(data, (a, b), vjp)


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    b = _coerce(b, a)
    data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _wrap(data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _wrap(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D operands or stacked operands whose leading
    (batch) dimensions match exactly; no batch broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        if not (a.ndim == 2 or b.ndim == 2):
            raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"operand dtypes differ: {a.dtype} vs {b.dtype}")
    data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _wrap(data, (a, b), vjp)


# -- elementwise nonlinearities ---------------------------------------


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _wrap(data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    return _wrap(data, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return _wrap(data, (a,), lambda g: (g * (0.5 / data),))


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)
    return _wrap(data, (a,), lambda g: (g * np.sign(a.data),))


def clamp_min(a: Tensor, low: float) -> Tensor:
    """max(a, low); gradient passes only where a > low."""
    data = np.maximum(a.data, np.asarray(low, dtype=a.dtype))
    mask = (a.data > low).astype(a.dtype)
    return _wrap(data, (a,), lambda g: (g * mask,))


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)
    mask = (a.data > 0).astype(a.dtype)
    return _wrap(data, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    data = special.expit(a.data)
    return _wrap(data, (a,), lambda g: (g * data * (1.0 - data),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    data = np.logaddexp(np.asarray(0, dtype=a.dtype), a.data)
    sig = special.expit(a.data)
    return _wrap(data, (a,), lambda g: (g * sig,))


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + special.erf(x * np.asarray(_INV_SQRT2, dtype=a.dtype)))
    data = x * phi
    pdf = np.asarray(_INV_SQRT_2PI, dtype=a.dtype) * np.exp(-0.5 * x * x)
    return _wrap(data, (a,), lambda g: (g * (phi + x * pdf),))


# -- reductions --------------------------------------------------------


def _ones_shape(shape, axis, keepdims):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if keepdims:
        return None  # grad already has the right rank
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        gshape = _ones_shape(shape, axis, keepdims)
        if gshape is not None:
            g = g.reshape(gshape)
        return (np.broadcast_to(g, shape).astype(a.dtype, copy=False),)

    return _wrap(data, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.data.size if axis is None else int(np.prod(
        [shape[ax % len(shape)] for ax in ((axis,) if isinstance(axis, int) else axis)]))

    def vjp(g):
        gshape = _ones_shape(shape, axis, keepdims)
        if gshape is not None:
            g = g.reshape(gshape)
        return (np.broadcast_to(g, shape).astype(a.dtype, copy=False) / count,)

    return _wrap(data, (a,), vjp)


# -- shape ops ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    orig = a.shape
    return _wrap(data, (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))
    return _wrap(data, (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing. Copies so later writes cannot alias."""
    data = a.data[key].copy()
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _wrap(data, (a,), vjp)


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0 with an integer index array.

    Duplicate indices are allowed; their gradients accumulate.
    """
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"take() needs integer indices, got dtype {idx.dtype}")
    data = np.take(a.data, idx, axis=0)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _wrap(data, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat() of an empty sequence")
    if any(t.dtype != tensors[0].dtype for t in tensors):
        raise ShapeError("concat() operands must share a dtype")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(np.moveaxis(moved[offsets[i]:offsets[i + 1]], 0, axis)
                     for i in range(len(sizes)))

    return _wrap(data, tuple(tensors), vjp)


def roll(a: Tensor, shift, axis) -> Tensor:
    data = np.roll(a.data, shift, axis=axis)
    neg_shift = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return _wrap(data, (a,), lambda g: (np.roll(g, neg_shift, axis=axis),))


def pad2d(a: Tensor, before_h: int, after_h: int, before_w: int, after_w: int) -> Tensor:
    """Zero-pad the last two axes."""
    width = [(0, 0)] * (a.ndim - 2) + [(before_h, after_h), (before_w, after_w)]
    data = np.pad(a.data, width)
    h, w = a.shape[-2], a.shape[-1]

    def vjp(g):
        sl = (Ellipsis, slice(before_h, before_h + h), slice(before_w, before_w + w))
        return (g[sl],)

    return _wrap(data, (a,), vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape).copy()
    orig = a.shape
    return _wrap(data, (a,), lambda g: (_unbroadcast(g, orig),))


# -- fused layers ------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _wrap(data, (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def vjp(g):
        gbeta = g.reshape(-1, n).sum(axis=0)
        ggamma = (g * xhat).reshape(-1, n).sum(axis=0)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _wrap(data, (x, gamma, beta), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of integer labels against (B, C) logits."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError(f"labels must be integers, got dtype {labels.dtype}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(
            f"label index out of range for {c} classes: min={labels.min()}, max={labels.max()}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    data = np.asarray((lse - z[np.arange(b), labels]).mean(), dtype=logits.dtype)
    probs = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        gl = probs.copy()
        gl[np.arange(b), labels] -= 1.0
        return (gl * (g / b),)

    return _wrap(data, (logits,), vjp)


# -- parameter containers ----------------------------------------------


class Module:
    """Base class for anything that owns parameters.

    Parameters are discovered by walking instance attributes: tensors with
    ``requires_grad``, nested modules, and lists of either. Attribute
    definition order fixes the traversal order, which checkpoints and the
    optimizer both rely on.
    """

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix=f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
                    elif isinstance(item, Module):
                        out.update(item.named_parameters(prefix=f"{name}.{i}."))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def parameter(rng: np.random.Generator, shape, dtype, scale: float = 0.02,
              name: str | None = None) -> Tensor:
    """Gaussian-initialized trainable tensor."""
    data = (rng.standard_normal(shape) * scale).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def zeros_param(shape, dtype, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def full_param(shape, value: float, dtype, name: str | None = None) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True, name=name)


class Linear(Module):
    """Affine map on the last axis: y = x @ W + b with W of shape (in, out)."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int,
                 dtype, bias: bool = True, scale: float = 0.02):
        self.weight = parameter(rng, (in_dim, out_dim), dtype, scale=scale)
        self.bias = zeros_param((out_dim,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
        y = matmul(flat, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        if x.ndim != 2:
            y = reshape(y, lead + (self.weight.shape[1],))
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = zeros_param((dim,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, eps=self.eps)


# -- gradient checking -------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
               coords_per_tensor: int = 6, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must rebuild its graph on every call (a closure over ``params``)
    and return a scalar. A sample of coordinates from each parameter is
    perturbed in place; relative error uses |a - n| / (|a| + |n| + 1e-8).
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise ContractError(f"grad_check target must be scalar, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            flat = p.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            k = min(coords_per_tensor, flat.size)
            picks = rng.choice(flat.size, size=k, replace=False)
            for i in picks:
                keep = flat[i]
                flat[i] = keep + eps
                hi = float(f().data)
                flat[i] = keep - eps
                lo = float(f().data)
                flat[i] = keep
                numeric = (hi - lo) / (2.0 * eps)
                a = float(ana_flat[i])
                err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
                if err > worst:
                    worst = err
    for p in params:
        p.grad = None
    return worst


# -- .m3t tensor files -------------------------------------------------

_M3T_MAGIC = b"M3TD"
_M3T_VERSION = 1


def save_m3t(path, array: np.ndarray) -> None:
    """Write one float32 array: magic, version, rank, extents, row-major payload.

    All header integers and the payload are little-endian; float64 input is
    cast down, so only float32 data round-trips bit-exactly.
    """
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_M3T_MAGIC)
        fh.write(struct.pack("<I", _M3T_VERSION))
        fh.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(arr.tobytes())


def load_m3t(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _M3T_MAGIC:
        raise CheckpointError(f"{path}: not a tensor file (bad magic)")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != _M3T_VERSION:
        raise CheckpointError(f"{path}: unsupported tensor format version {version}")
    offset = 12
    if len(blob) < offset + 8 * rank:
        raise CheckpointError(f"{path}: truncated tensor header")
    shape = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
    offset += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(blob) != offset + 4 * count:
        raise CheckpointError(
            f"{path}: payload length {len(blob) - offset} does not match shape {shape}")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
