"""Dense tensors with tape-based reverse-mode differentiation.

Every feature map in the library is a rank-4 ``(batch, channel, height, width)``
array wrapped in :class:`Tensor`.  Operations record a closure that maps the
output gradient to gradients of their inputs; :func:`backward` replays the
tape in reverse topological order and accumulates into leaves.

Only first-order derivatives are supported.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Union

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Raised for invalid static configuration (group counts, sizes, ...)."""


class ContractError(RuntimeError):
    """Raised when an operation is used outside its contract."""


_DTYPES = {"f64": np.float64, "f32": np.float32}
_default_dtype = np.float64
_grad_enabled = True


def set_precision(precision: str) -> None:
    """Select the floating point width for newly created tensors ("f64" or "f32")."""
    global _default_dtype
    try:
        _default_dtype = _DTYPES[precision]
    except KeyError:
        raise ConfigurationError(f"unknown precision {precision!r}; use f32 or f64") from None


def get_dtype() -> type:
    return _default_dtype


@contextlib.contextmanager
def precision(name: str):
    prev = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_default_dtype"] = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Array node in the differentiation graph.

    Leaves created with ``requires_grad=True`` accumulate gradients into
    ``.grad`` on every :func:`backward` call; intermediate nodes never keep
    gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: BackwardFn) -> "Tensor":
        """Wrap the result of an operation, recording it on the tape if needed."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = ""
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__


class Param(Tensor):
    """Learnable leaf.  ``grad`` always has the shape of ``data``."""

    __slots__ = ()

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor4(data, requires_grad: bool = False) -> Tensor:
    """Build a rank-4 feature tensor, rejecting other ranks and non-finite values."""
    t = Tensor(data, requires_grad=requires_grad)
    if t.ndim != 4:
        raise DimensionError(f"expected rank-4 (batch, channel, height, width), got shape {t.shape}")
    if not np.all(np.isfinite(t.data)):
        raise ContractError("tensor contains non-finite entries")
    return t


def _topo_order(root: Tensor) -> list:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with ``requires_grad``.

    Raises
    ------
    ContractError
        If ``loss`` is not a single scalar.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _check_rank4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected rank-4 input, got shape {x.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors, accumulated left to right."""
    if not tensors:
        raise ContractError("add_n of an empty list")
    first = tensors[0]
    out = first.data.copy()
    for t in tensors[1:]:
        _check_same(first, t, "add_n")
        out += t.data
    return Tensor.from_op(out, tuple(tensors), lambda g: tuple(g for _ in tensors))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, s: Union[float, Tensor]) -> Tensor:
    """Multiply by a python scalar or by a single-element tensor (differentiable)."""
    xd = x.data
    if isinstance(s, Tensor):
        if s.data.size != 1:
            raise DimensionError(f"scale: factor must hold one element, got {s.shape}")
        sv = s.data.reshape(())
        return Tensor.from_op(
            xd * sv, (x, s), lambda g: (g * sv, np.sum(g * xd).reshape(s.shape))
        )
    sv = float(s)
    return Tensor.from_op(xd * sv, (x,), lambda g: (g * sv,))


def one_minus(s: Tensor) -> Tensor:
    return Tensor.from_op(1.0 - s.data, (s,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def open_unit_sigmoid(x: Tensor) -> Tensor:
    """Logistic function clipped to the representable open interval (0, 1)."""
    y = open_unit(_sigmoid(x.data))
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def open_unit(y: np.ndarray) -> np.ndarray:
    """Clip values in [0, 1] to the nearest floats strictly inside (0, 1)."""
    fi = np.finfo(y.dtype)
    return np.clip(y, fi.tiny, 1.0 - fi.epsneg).astype(y.dtype)


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    y = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return Tensor.from_op(y, (x,), lambda g: (g * _sigmoid(xd),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * v)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor.from_op(np.sum(x.data).reshape(()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return Tensor.from_op(
        np.mean(x.data).reshape(()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


# ---------------------------------------------------------------- convolutions


def conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Pointwise convolution: ``out[b,o,h,w] = bias[o] + sum_i weight[o,i] * x[b,i,h,w]``."""
    _check_rank4(x, "conv1x1")
    b, c, h, w = x.shape
    if weight.ndim != 2:
        raise DimensionError(f"conv1x1: weight must be (Cout, Cin), got {weight.shape}")
    cout, cin = weight.shape
    if cin != c:
        raise DimensionError(f"conv1x1: channel axis mismatch, weight expects {cin} input channels, x has {c}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv1x1: bias must be ({cout},), got {bias.shape}")
    xf = x.data.reshape(b, c, h * w)
    wd = weight.data
    out = np.matmul(wd, xf)
    if bias is not None:
        out += bias.data[None, :, None]

    def grad(g):
        gf = g.reshape(b, cout, h * w)
        gx = np.matmul(wd.T, gf).reshape(b, c, h, w)
        gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0)
        if bias is None:
            return gx, gw
        return gx, gw, gf.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out.reshape(b, cout, h, w), parents, grad)


def dwconv3x3(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Depthwise 3x3 convolution, stride 1, zero padding 1."""
    _check_rank4(x, "dwconv3x3")
    b, c, h, w = x.shape
    if weight.shape != (c, 3, 3):
        raise DimensionError(f"dwconv3x3: weight must be ({c}, 3, 3) for {c} channels, got {weight.shape}")
    if bias is not None and bias.shape != (c,):
        raise DimensionError(f"dwconv3x3: bias must be ({c},), got {bias.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wd = weight.data
    out = np.zeros_like(x.data)
    for dh in range(3):
        for dw in range(3):
            out += wd[None, :, dh, dw, None, None] * xp[:, :, dh:dh + h, dw:dw + w]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for dh in range(3):
            for dw in range(3):
                gxp[:, :, dh:dh + h, dw:dw + w] += wd[None, :, dh, dw, None, None] * g
                gw[:, dh, dw] = np.einsum("bchw,bchw->c", g, xp[:, :, dh:dh + h, dw:dw + w])
        gx = gxp[:, :, 1:h + 1, 1:w + 1]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, grad)


# ---------------------------------------------------------------- normalization


def default_groups(channels: int) -> int:
    """Group count used for directional GroupNorm: 4 when possible, else 1."""
    return 4 if channels >= 4 and channels % 4 == 0 else 1


def _shifted_stats(v: np.ndarray, axis) -> tuple:
    # Shift by one sample so that constant input gives an exactly zero centred tensor.
    ref = np.take(v, [0], axis=axis[-1])
    for ax in axis[:-1]:
        ref = np.take(ref, [0], axis=ax)
    d = v - ref
    mean_d = d.mean(axis=axis, keepdims=True)
    centred = d - mean_d
    var = np.mean(centred * centred, axis=axis, keepdims=True)
    return ref + mean_d, centred, var


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _check_rank4(x, "group_norm")
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigurationError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm: affine parameters must be ({c},)")
    xg = x.data.reshape(b, groups, -1)
    _, centred, var = _shifted_stats(xg, (2,))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (centred * inv).reshape(b, c, h, w)
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def grad(g):
        ghat = (g * gd).reshape(b, groups, -1)
        xh = xhat.reshape(b, groups, -1)
        gx = inv * (ghat - ghat.mean(axis=2, keepdims=True) - xh * (ghat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(b, c, h, w), np.einsum("bchw,bchw->c", g, xhat), g.sum(axis=(0, 2, 3))

    return Tensor.from_op(out, (x, gamma, beta), grad)


class BatchNormState:
    """Running statistics owned by one batch-norm site."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=_default_dtype)
        self.running_var = np.ones(channels, dtype=_default_dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization over (batch, height, width).

    In training mode batch statistics are used and the running estimates are
    updated with ``state.momentum`` (unbiased variance for the running value).
    """
    _check_rank4(x, "batch_norm")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise DimensionError(f"batch_norm: parameters must match {c} channels")
    gd = gamma.data[None, :, None, None]
    bd = beta.data[None, :, None, None]
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
        inv4 = inv[None, :, None, None]
        return Tensor.from_op(
            xhat * gd + bd,
            (x, gamma, beta),
            lambda g: (g * gd * inv4, np.einsum("bchw,bchw->c", g, xhat), g.sum(axis=(0, 2, 3))),
        )
    m = b * h * w
    if m < 2:
        raise ContractError("batch_norm: training mode needs at least two values per channel")
    mean, centred, var = _shifted_stats(x.data, (0, 2, 3))
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = centred * inv
    mom = state.momentum
    state.running_mean = (1 - mom) * state.running_mean + mom * mean.reshape(c)
    state.running_var = (1 - mom) * state.running_var + mom * var.reshape(c) * m / (m - 1)

    def grad(g):
        ghat = g * gd
        gx = inv * (ghat - ghat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (ghat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return gx, np.einsum("bchw,bchw->c", g, xhat), g.sum(axis=(0, 2, 3))

    return Tensor.from_op(xhat * gd + bd, (x, gamma, beta), grad)


# ---------------------------------------------------------------- spatial


def gap(x: Tensor) -> Tensor:
    """Global average pool to a 1x1 spatial map."""
    _check_rank4(x, "gap")
    b, c, h, w = x.shape
    n = h * w
    return Tensor.from_op(
        x.data.mean(axis=(2, 3), keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / n, (b, c, h, w)).copy(),),
    )


def broadcast_spatial(x: Tensor, height: int, width: int) -> Tensor:
    """Expand a (B, C, 1, 1) map to (B, C, height, width)."""
    _check_rank4(x, "broadcast_spatial")
    if x.shape[2:] != (1, 1):
        raise DimensionError(f"broadcast_spatial: expected 1x1 spatial input, got {x.shape}")
    b, c = x.shape[:2]
    return Tensor.from_op(
        np.broadcast_to(x.data, (b, c, height, width)).copy(),
        (x,),
        lambda g: (g.sum(axis=(2, 3), keepdims=True),),
    )


def _nearest_matrix(src: int, dst: int, dtype) -> np.ndarray:
    idx = np.floor(np.arange(dst) * (src / dst)).astype(np.int64)
    idx = np.minimum(idx, src - 1)
    m = np.zeros((dst, src), dtype=dtype)
    m[np.arange(dst), idx] = 1.0
    return m


def resize_nearest(x: Tensor, height: int, width: int) -> Tensor:
    """Nearest-neighbour resize; source index ``floor(dst * src_size / dst_size)``."""
    _check_rank4(x, "resize_nearest")
    b, c, h, w = x.shape
    if (h, w) == (height, width):
        return Tensor.from_op(x.data.copy(), (x,), lambda g: (g,))
    if h and height % h == 0 and w and width % w == 0:
        fh, fw = height // h, width // w
        out = np.repeat(np.repeat(x.data, fh, axis=2), fw, axis=3)

        def grad(g):
            # strided accumulation beats a 6-d reshape-sum by several times
            acc = np.zeros_like(x.data)
            for i in range(fh):
                for j in range(fw):
                    acc += g[:, :, i::fh, j::fw]
            return (acc,)

        return Tensor.from_op(out, (x,), grad)
    rh = _nearest_matrix(h, height, x.data.dtype)
    rw = _nearest_matrix(w, width, x.data.dtype)
    out = np.einsum("ph,bchw,qw->bcpq", rh, x.data, rw, optimize=True)
    return Tensor.from_op(out, (x,), lambda g: (np.einsum("ph,bcpq,qw->bchw", rh, g, rw, optimize=True),))


def avg_pool2x2(x: Tensor) -> Tensor:
    _check_rank4(x, "avg_pool2x2")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2x2: spatial size {h}x{w} is not even")
    xd = x.data
    out = (xd[:, :, 0::2, 0::2] + xd[:, :, 0::2, 1::2] + xd[:, :, 1::2, 0::2] + xd[:, :, 1::2, 1::2]) * 0.25

    def grad(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3),)

    return Tensor.from_op(out, (x,), grad)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ContractError("concat_channels of an empty list")
    ref = tensors[0].shape
    for t in tensors:
        _check_rank4(t, "concat_channels")
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: shapes {ref} and {t.shape} disagree off the channel axis")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return Tensor.from_op(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=1)))


def softmax_over_channels(x: Tensor, active: Optional[int] = None) -> Tensor:
    """Softmax along axis 1.

    With ``active`` set, only the first ``active`` channels take part; the
    remaining channels are masked to exactly zero weight.
    """
    _check_rank4(x, "softmax_over_channels")
    c = x.shape[1]
    k = c if active is None else active
    if not 1 <= k <= c:
        raise ConfigurationError(f"softmax_over_channels: active={active} outside 1..{c}")
    xa = x.data[:, :k]
    e = np.exp(xa - xa.max(axis=1, keepdims=True))
    s = np.zeros_like(x.data)
    s[:, :k] = e / e.sum(axis=1, keepdims=True)
    return Tensor.from_op(s, (x,), lambda g: (s * (g - np.sum(g * s, axis=1, keepdims=True)),))


def weighted_experts(weights: Tensor, experts: Sequence[Tensor]) -> Tensor:
    """``sum_e weights[:, e] * experts[e]`` with the weight broadcast over channels."""
    _check_rank4(weights, "weighted_experts")
    ne = len(experts)
    if weights.shape[1] < ne:
        raise DimensionError(f"weighted_experts: {weights.shape[1]} weight channels for {ne} experts")
    if np.any(weights.data[:, ne:]):
        raise ContractError("weighted_experts: weight channels beyond the expert count must be zero")
    ref = experts[0].shape
    for e in experts:
        if e.shape != ref:
            raise DimensionError(f"weighted_experts: expert shapes {ref} and {e.shape} differ")
    if weights.shape[0] != ref[0] or weights.shape[2:] != ref[2:]:
        raise DimensionError(f"weighted_experts: weights {weights.shape} do not match experts {ref}")
    wd = weights.data
    out = np.zeros_like(experts[0].data)
    for i, e in enumerate(experts):
        out += wd[:, i:i + 1] * e.data

    def grad(g):
        gw = np.zeros_like(wd)
        for i, e in enumerate(experts):
            gw[:, i] = np.sum(g * e.data, axis=1)
        return (gw,) + tuple(wd[:, i:i + 1] * g for i in range(len(experts)))

    return Tensor.from_op(out, (weights,) + tuple(experts), grad)


def take_positions(x: Tensor, index: np.ndarray) -> Tensor:
    """Reorder the last axis of a (B, C, L) tensor: ``out[..., t] = x[..., index[t]]``.

    ``index`` must be a permutation; the gradient is the inverse reordering.
    """
    if x.ndim != 3:
        raise DimensionError(f"take_positions: expected (batch, channel, length), got {x.shape}")
    if index.shape != (x.shape[2],):
        raise DimensionError(f"take_positions: index length {index.shape} does not match length {x.shape[2]}")
    inv = np.empty_like(index)
    inv[index] = np.arange(index.size)
    return Tensor.from_op(x.data[:, :, index], (x,), lambda g: (g[:, :, inv],))


# ---------------------------------------------------------------- losses


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy computed from logits in a numerically stable form."""
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    if t.shape != z.shape:
        raise DimensionError(f"bce_with_logits: target {t.shape} vs logits {z.shape}")
    loss = np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))))
    n = z.size
    return Tensor.from_op(np.asarray(loss, dtype=z.dtype).reshape(()), (logits,),
                          lambda g: (g * (_sigmoid(z) - t) / n,))


def soft_dice_loss(logits: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`` over the whole batch, p = sigmoid(logits)."""
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    if t.shape != z.shape:
        raise DimensionError(f"soft_dice_loss: target {t.shape} vs logits {z.shape}")
    p = _sigmoid(z)
    num = 2.0 * np.sum(p * t) + smooth
    den = np.sum(p) + np.sum(t) + smooth
    loss = 1.0 - num / den

    def grad(g):
        dp = -(2.0 * t * den - num) / (den * den)
        return (g * dp * p * (1.0 - p),)

    return Tensor.from_op(np.asarray(loss, dtype=z.dtype).reshape(()), (logits,), grad)
