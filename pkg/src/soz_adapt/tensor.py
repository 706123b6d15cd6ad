"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the 1D-CNN needs are provided. Convolution and pooling
work internally in channels-last layout ``(N, L, C)`` because that turns the
convolution into a single large matrix product; the public functions accept
the conventional channels-first layout as well.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_DEFAULT_DTYPE = np.float32
_CONV_CHUNK_ROWS = 2048


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating point type (e.g. to float64 for gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # basic properties
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # autodiff
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_sum(self) * (1.0 / self.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _lift(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else _DEFAULT_DTYPE))


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and shape ops

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _lift(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    out = a.data ** exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def tensor_sum(a) -> Tensor:
    a = _lift(a)
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    original = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def flatten(a) -> Tensor:
    """Collapse every axis after the first."""
    a = _lift(a)
    return reshape(a, (a.shape[0], -1))


def take(a, rows) -> Tensor:
    """Gather rows along the first axis."""
    a = _lift(a)
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, rows, g)
        return (ga,)

    return _result(a.data[rows], (a,), backward)


def relu(a) -> Tensor:
    a = _lift(a)
    out = np.maximum(a.data, 0)

    def backward(g):
        # subgradient at exactly zero is taken as 0
        return (g * (a.data > 0),)

    return _result(out, (a,), backward)


def dropout(a, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is the identity."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    a = _lift(a)
    if not training or p == 0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = rng.random(a.shape, dtype=a.dtype if a.dtype in (np.float32, np.float64) else np.float64) >= p
    scale = a.dtype.type(1.0 / (1.0 - p))
    mask = keep * scale
    out = a.data * mask
    return _result(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# layers

def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, F_in) and ``weight`` (F_out, F_in)."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input width {x.shape[1]} != weight in-features {weight.shape[1]}")
    parents = [x, weight]
    out = x.data @ weight.data.T
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _result(out, parents, backward)


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def pool_output_length(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


def _to_nlc(x: Tensor, channels_last: bool) -> tuple[Tensor, bool]:
    """Return a batched channels-last view of ``x`` and whether a batch axis was added."""
    if x.ndim not in (2, 3):
        raise ShapeError(f"expected (C, L) or (N, C, L) input, got shape {x.shape}")
    unbatched = x.ndim == 2
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if not channels_last:
        x = transpose(x, (0, 2, 1))
    return x, unbatched


def _from_nlc(y: Tensor, channels_last: bool, unbatched: bool) -> Tensor:
    if not channels_last:
        y = transpose(y, (0, 2, 1))
    if unbatched:
        y = reshape(y, y.shape[1:])
    return y


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    inverse = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0, channels_last: bool = False) -> Tensor:
    """1-d cross-correlation.

    ``weight`` is (C_out, C_in, K). ``x`` is (C_in, L) / (N, C_in, L), or
    (L, C_in) / (N, L, C_in) when ``channels_last``. Output length is
    ``floor((L + 2*padding - K) / stride) + 1``.
    """
    x, weight = _lift(x), _lift(weight)
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if weight.ndim != 3:
        raise ShapeError(f"conv weight must be (C_out, C_in, K), got {weight.shape}")
    xn, unbatched = _to_nlc(x, channels_last)
    n, length, c_in = xn.shape
    c_out, c_in_w, k = weight.shape
    if c_in != c_in_w:
        raise ShapeError(f"input has {c_in} channels but weight expects {c_in_w}")
    padded_len = length + 2 * padding
    if k > padded_len:
        raise ShapeError(f"kernel {k} longer than padded input {padded_len}")
    l_out = conv_output_length(length, k, stride, padding)

    data = xn.data
    if padding:
        xp = np.zeros((n, padded_len, c_in), dtype=data.dtype)
        xp[:, padding:padding + length] = data
    else:
        xp = np.ascontiguousarray(data)
    s0, s1, s2 = xp.strides
    # work in chunks of samples so each im2col block stays cache-sized
    chunk = max(1, _CONV_CHUNK_ROWS // l_out)

    def im2col(start: int, stop: int) -> np.ndarray:
        view = as_strided(xp[start:], shape=(stop - start, l_out, k, c_in),
                          strides=(s0, stride * s1, s1, s2), writeable=False)
        return view.reshape((stop - start) * l_out, k * c_in)

    # rows of wmat are ordered (tap, in_channel) to match im2col columns
    wmat = weight.data.transpose(2, 1, 0).reshape(k * c_in, c_out)
    out = np.empty((n, l_out, c_out), dtype=np.result_type(xp.dtype, wmat.dtype))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        np.matmul(im2col(start, stop), wmat, out=out[start:stop].reshape(-1, c_out))
    parents = [xn, weight]
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
        out += bias.data
        parents.append(bias)

    def backward(g):
        gw = np.zeros((k * c_in, c_out), dtype=g.dtype) if weight.requires_grad else None
        gxp = np.zeros((n, padded_len, c_in), dtype=g.dtype) if xn.requires_grad else None
        w_taps = [np.ascontiguousarray(wmat[tap * c_in:(tap + 1) * c_in].T) for tap in range(k)]
        span = stride * (l_out - 1) + 1
        for start in range(0, n, chunk):
            stop = min(n, start + chunk)
            g2 = g[start:stop].reshape(-1, c_out)
            if gw is not None:
                gw += im2col(start, stop).T @ g2
            if gxp is not None:
                block = gxp[start:stop]
                for tap in range(k):
                    block[:, tap:tap + span:stride] += (g2 @ w_taps[tap]).reshape(stop - start, l_out, c_in)
        if gw is not None:
            gw = gw.reshape(k, c_in, c_out).transpose(2, 1, 0)
        gx = gxp[:, padding:padding + length] if gxp is not None else None
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, c_out).sum(axis=0)

    y = _result(out, parents, backward)
    return _from_nlc(y, channels_last, unbatched)


def maxpool1d(x, kernel: int, stride: int, channels_last: bool = False, return_indices: bool = False):
    """Max pooling over the length axis; ties resolve to the lowest index.

    With ``return_indices`` the window-relative argmax positions are also
    returned (same layout as the output).
    """
    x = _lift(x)
    if kernel < 1 or stride < 1:
        raise ValueError(f"invalid kernel={kernel} / stride={stride}")
    xn, unbatched = _to_nlc(x, channels_last)
    n, length, c = xn.shape
    if length < kernel:
        raise ShapeError(f"input length {length} shorter than pool kernel {kernel}")
    l_out = pool_output_length(length, kernel, stride)
    data = xn.data
    span = stride * (l_out - 1) + 1
    taps = [data[:, j:j + span:stride] for j in range(kernel)]
    out = taps[0].copy()
    for tap in taps[1:]:
        np.maximum(out, tap, out=out)

    def argmax():
        # first tap that attains the max, i.e. lowest index on ties
        idx = np.zeros(out.shape, dtype=np.int16)
        free = np.ones(out.shape, dtype=bool)
        for j, tap in enumerate(taps):
            hit = (tap == out) & free
            idx[hit] = j
            free &= ~hit
        return idx

    def backward(g):
        gx = np.zeros((n, length, c), dtype=g.dtype)
        if stride == kernel:
            windows = data[:, :l_out * kernel].reshape(n, l_out, kernel, c)
            hits = windows == out[:, :, None, :]
            block = gx[:, :l_out * kernel].reshape(n, l_out, kernel, c)
            np.multiply(hits, g[:, :, None, :], out=block)
            tied = hits.sum(axis=2) > 1
            if tied.any():
                a, b, ch = np.nonzero(tied)
                first = hits[a, b, :, ch].argmax(axis=1)
                block[a, b, :, ch] = 0
                block[a, b, first, ch] = g[a, b, ch]
            return (gx,)
        free = np.ones(out.shape, dtype=bool)
        for j, tap in enumerate(taps):
            hit = (tap == out) & free
            gx[:, j:j + span:stride] += np.where(hit, g, 0)
            free &= ~hit
        return (gx,)

    y = _from_nlc(_result(out, (xn,), backward), channels_last, unbatched)
    if return_indices:
        idx = argmax()
        positions = idx if channels_last else idx.transpose(0, 2, 1)
        if unbatched:
            positions = positions[0]
        return y, positions
    return y


def cross_entropy(logits, labels, sample_weights=None) -> Tensor:
    """Weighted mean of per-sample negative log-likelihoods.

    loss = sum_i w_i * nll_i / sum_i w_i; with no weights every w_i is 1.
    """
    logits = _lift(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, C), got {logits.shape}")
    n, n_classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("labels must lie in [0, C)")
    dtype = logits.dtype
    if sample_weights is None:
        weights = np.ones(n, dtype=dtype)
    else:
        weights = np.asarray(sample_weights, dtype=dtype)
        if weights.shape != (n,):
            raise ShapeError(f"sample_weights shape {weights.shape} != ({n},)")
        if np.any(weights < 0):
            raise ValueError("sample weights must be non-negative")
    total = weights.sum()
    if not total > 0:
        raise ValueError("sample weights sum to zero; weighted loss is undefined")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - lse
    rows = np.arange(n)
    nll = -log_probs[rows, labels]
    loss = np.asarray((weights * nll).sum() / total, dtype=dtype)

    def backward(g):
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1
        return (probs * (weights / total)[:, None] * g,)

    return _result(loss, (logits,), backward)


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
