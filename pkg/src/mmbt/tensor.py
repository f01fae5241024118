"""Dense tensors with reverse-mode automatic differentiation.

Implements exactly the operator set the encoders, fusion blocks, and loss
functions need: 2-D matmul, row softmax / log-softmax, layer norm, GELU,
grid pooling, n-D cross-correlation, gathers, splits, and concatenation.
Each operation records a backward closure on the result; ``backward()``
replays the closures over a topologically ordered tape in which every node
appears after its inputs and is visited exactly once.

Broadcasting is restricted to bias rows and python scalars so every
gradient rule stays auditable. Values are float64 by default (the finite
difference oracles need the headroom); float32 is used for training.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError

_creation_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense n-d array plus the bookkeeping for reverse-mode AD.

    ``data`` is always a contiguous numpy array. ``grad`` is populated by
    ``backward()`` and has the same shape as ``data``. Operation results
    keep references to their parents and a closure mapping the output
    gradient to parent gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "order", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self.order = next(_creation_counter)
        self._parents = ()
        self._grad_fn = None

    # -- basic queries ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A constant view of this value, severed from the graph."""
        return Tensor(self.data.copy(), requires_grad=False, op="detach")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every grad-requiring node."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        tape = build_tape(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape):
            if node._grad_fn is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._grad_fn(node.grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pgrad


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of graph nodes ending at ``root``.

    Iterative post-order traversal; every operation appears after all of
    its inputs, so one reverse sweep visits each node exactly once.
    """
    tape: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return tape


def _result(data, parents, grad_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.order = next(_creation_counter)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with grads g·bᵀ and aᵀ·g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out_data, (a, b), grad_fn, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.shape}")
    return _result(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    in_shape = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(in_shape),), "reshape")


# -- elementwise ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} vs {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(x.data * s, (x,), lambda g: (g * s,), "scale")


def add_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=x.dtype)
    return _result(x.data + c, (x,), lambda g: (g,), "add_const")


def mul_const(x: Tensor, c) -> Tensor:
    """Elementwise product with a constant array (not differentiated through)."""
    c = np.asarray(c, dtype=x.dtype)
    if c.shape not in ((), x.shape):
        raise DimensionError(f"mul_const shapes differ: {x.shape} vs {c.shape}")
    return _result(x.data * c, (x,), lambda g: (g * c,), "mul_const")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-d bias row to every row of an (n, d) matrix."""
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias shapes incompatible: {x.shape} + {bias.shape}")
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def gelu(x: Tensor) -> Tensor:
    """Smooth GELU (tanh form)."""
    c = 0.7978845608028654  # sqrt(2/pi); python float keeps float32 inputs float32
    u = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def grad_fn(g):
        du = c * (1.0 + 3 * 0.044715 * x.data**2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * d,)

    return _result(out_data.astype(x.dtype, copy=False), (x,), grad_fn, "gelu")


# -- reductions ----------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)
    return _result(out_data, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out_data = np.asarray(x.data.mean(), dtype=x.dtype)
    return _result(out_data, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "mean")


def weighted_sum(x: Tensor, weights) -> Tensor:
    """Scalar Σ wᵢⱼ·xᵢⱼ with a constant weight array."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise DimensionError(f"weighted_sum shapes differ: {x.shape} vs {w.shape}")
    out_data = np.asarray((x.data * w).sum(), dtype=x.dtype)
    return _result(out_data, (x,), lambda g: (g * w,), "weighted_sum")


# -- row-normalized maps -------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the trailing axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _result(y.astype(x.dtype, copy=False), (x,), grad_fn, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out_data = z - lse
    sm = np.exp(out_data)

    def grad_fn(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _result(out_data.astype(x.dtype, copy=False), (x,), grad_fn, "log_softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance over the trailing axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def grad_fn(g):
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = (gg - m1 - xhat * m2) * inv
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out_data.astype(x.dtype, copy=False), (x, gain, bias), grad_fn, "layer_norm")


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of an (n, d) matrix to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def grad_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norm,)

    return _result(y.astype(x.dtype, copy=False), (x,), grad_fn, "l2_normalize_rows")


# -- structural ops ------------------------------------------------------


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_rows of zero tensors")
    width = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise DimensionError(f"concat_rows width mismatch: {[p.shape for p in parts]}")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), grad_fn, "concat_rows")


def split_rows(x: Tensor, sizes: list[int]) -> tuple[Tensor, ...]:
    if sum(sizes) != x.shape[0]:
        raise DimensionError(f"split_rows sizes {sizes} vs {x.shape[0]} rows")
    outs = []
    offset = 0
    for s in sizes:
        lo, hi = offset, offset + s

        def grad_fn(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[lo:hi] = g
            return (full,)

        outs.append(_result(x.data[lo:hi].copy(), (x,), grad_fn, "split_rows"))
        offset = hi
    return tuple(outs)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo < hi <= x.shape[1]):
        raise DimensionError(f"slice_cols [{lo}:{hi}] on {x.shape}")

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[:, lo:hi]), (x,), grad_fn, "slice_cols")


def concat_cols(parts: list[Tensor]) -> Tensor:
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise DimensionError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), grad_fn, "concat_cols")


def gather_cols(x: Tensor, index) -> Tensor:
    """out[i, j] = x[i, index[i, j]]; backward scatter-adds into x."""
    idx = np.asarray(index)
    if x.data.ndim != 2 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_cols: {x.shape} with index {idx.shape}")
    rows = np.arange(x.shape[0])[:, None]
    out_data = x.data[rows, idx]

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (np.broadcast_to(rows, idx.shape), idx), g)
        return (dx,)

    return _result(out_data, (x,), grad_fn, "gather_cols")


def add_block(x: Tensor, block: Tensor, row_offset: int, col_offset: int) -> Tensor:
    """Add a smaller matrix into a sub-rectangle of x (used for score biases)."""
    r, c = block.shape
    if row_offset + r > x.shape[0] or col_offset + c > x.shape[1]:
        raise DimensionError(f"add_block {block.shape} at ({row_offset},{col_offset}) in {x.shape}")
    out_data = x.data.copy()
    out_data[row_offset:row_offset + r, col_offset:col_offset + c] += block.data

    def grad_fn(g):
        return g, g[row_offset:row_offset + r, col_offset:col_offset + c]

    return _result(out_data, (x, block), grad_fn, "add_block")


# -- grid pooling --------------------------------------------------------


def pool_grid(x: Tensor, extents, strides, mode: str = "max") -> Tensor:
    """Pool an (N, d) token matrix laid out row-major over ``extents``.

    Strides must divide the extents (schedules guarantee this). Average
    pooling preserves the mean of each pooled region exactly; max pooling
    routes gradient to the first maximal element of each region.
    """
    extents = tuple(int(e) for e in extents)
    strides = tuple(int(s) for s in strides)
    if len(extents) != len(strides):
        raise DimensionError(f"pool_grid rank mismatch: {extents} vs {strides}")
    n, d = x.shape
    if int(np.prod(extents)) != n:
        raise DimensionError(f"pool_grid extents {extents} cover {np.prod(extents)} tokens, got {n}")
    for e, s in zip(extents, strides):
        if s < 1 or e % s != 0:
            raise DimensionError(f"pool_grid stride {strides} does not divide grid {extents}")
    if mode not in ("max", "avg"):
        raise ValueError(f"pool_grid mode {mode!r}")
    out_extents = tuple(e // s for e, s in zip(extents, strides))
    if all(s == 1 for s in strides):
        return _result(x.data.copy(), (x,), lambda g: (g,), "pool_grid")

    # (e0, e1, ..., d) -> (o0, s0, o1, s1, ..., d), reduce over the s axes
    split_shape = []
    for e, s in zip(extents, strides):
        split_shape += [e // s, s]
    split_shape.append(d)
    window = x.data.reshape(split_shape)
    reduce_axes = tuple(range(1, 2 * len(extents), 2))
    n_out = int(np.prod(out_extents))

    if mode == "avg":
        region = int(np.prod(strides))
        out_data = window.mean(axis=reduce_axes).reshape(n_out, d)

        def grad_fn(g):
            gw = g.reshape([*out_extents, d]) / region
            for ax in reduce_axes:
                gw = np.expand_dims(gw, ax)
            return (np.broadcast_to(gw, split_shape).reshape(n, d).copy(),)

        return _result(out_data, (x,), grad_fn, "pool_grid_avg")

    flat = np.moveaxis(window, reduce_axes, range(-1 - len(extents), -1))
    flat = flat.reshape(n_out, -1, d)  # (n_out, region, d), region axis contiguous per output
    arg = flat.argmax(axis=1)
    out_data = np.take_along_axis(flat, arg[:, None, :], axis=1)[:, 0, :]

    # map (out position, region slot) back to flat input rows
    region = flat.shape[1]
    out_idx = np.arange(n_out)
    multi_out = np.unravel_index(out_idx, out_extents)
    base = [m * s for m, s in zip(multi_out, strides)]

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        slot = np.unravel_index(arg.reshape(-1), strides)  # per (out, channel)
        coords = []
        for axis in range(len(extents)):
            b = np.repeat(base[axis], d)
            coords.append(b + slot[axis])
        rows = np.ravel_multi_index(tuple(coords), extents)
        cols = np.tile(np.arange(d), n_out)
        np.add.at(dx, (rows, cols), g.reshape(-1))
        return (dx,)

    return _result(np.ascontiguousarray(out_data), (x,), grad_fn, "pool_grid_max")


# -- convolution ---------------------------------------------------------


def _pad_amounts(in_extent: int, kernel: int, stride: int, out_extent: int) -> tuple[int, int]:
    total = max(0, (out_extent - 1) * stride + kernel - in_extent)
    return total // 2, total - total // 2


def conv_nd(x: Tensor, weight: Tensor, bias: Tensor, stride, padding) -> Tensor:
    """n-D cross-correlation (n = 2 or 3): (C_in, *spatial) -> (C_out, *out).

    ``padding`` is a per-axis (before, after) pair list. Output extents are
    floor((in + pads - kernel)/stride) + 1.
    """
    c_in = x.shape[0]
    spatial = x.shape[1:]
    c_out = weight.shape[0]
    if weight.shape[1] != c_in:
        raise DimensionError(f"conv weight {weight.shape} vs input channels {c_in}")
    kernel = weight.shape[2:]
    nd = len(kernel)
    if len(spatial) != nd or len(stride) != nd or len(padding) != nd:
        raise DimensionError(f"conv rank mismatch: input {x.shape}, kernel {weight.shape}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv bias {bias.shape} vs {c_out} filters")

    pad_width = [(0, 0)] + [tuple(p) for p in padding]
    xp = np.pad(x.data, pad_width) if any(p != (0, 0) for p in pad_width) else x.data
    padded = xp.shape[1:]
    out_extents = tuple((padded[i] - kernel[i]) // stride[i] + 1 for i in range(nd))
    for i in range(nd):
        if padded[i] < kernel[i]:
            raise DimensionError(f"conv kernel {kernel} exceeds padded extent {padded}")

    windows = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=tuple(range(1, nd + 1)))
    slicer = (slice(None),) + tuple(slice(None, None, s) for s in stride)
    windows = windows[slicer]  # (C_in, *out, *kernel)
    windows = np.moveaxis(windows, 0, nd)  # (*out, C_in, *kernel)
    n_pos = int(np.prod(out_extents))
    k_flat = c_in * int(np.prod(kernel))
    cols = windows.reshape(n_pos, k_flat)
    w_flat = weight.data.reshape(c_out, k_flat)
    out = cols @ w_flat.T + bias.data  # (n_pos, C_out)
    out_data = np.ascontiguousarray(out.T.reshape(c_out, *out_extents))

    def grad_fn(g):
        g2 = g.reshape(c_out, n_pos).T  # (n_pos, C_out)
        dw = (g2.T @ cols).reshape(weight.shape)
        db = g2.sum(axis=0)
        dcols = g2 @ w_flat  # (n_pos, k_flat)
        dxp = np.zeros_like(xp)
        dwin = dcols.reshape(*out_extents, c_in, *kernel)
        dwin = np.moveaxis(dwin, nd, 0)  # (C_in, *out, *kernel)
        # scatter each kernel offset back onto the strided input view
        for offset in np.ndindex(*kernel):
            sl = tuple(
                slice(offset[i], offset[i] + stride[i] * out_extents[i], stride[i])
                for i in range(nd)
            )
            dxp[(slice(None),) + sl] += dwin[(slice(None), *(slice(None),) * nd, *offset)]
        if xp is x.data:
            dx = dxp
        else:
            unpad = tuple(slice(p[0], p[0] + x.shape[1 + i]) for i, p in enumerate(padding))
            dx = dxp[(slice(None),) + unpad]
        return np.ascontiguousarray(dx), dw, db

    return _result(out_data, (x, weight, bias), grad_fn, "conv")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride, padding) -> Tensor:
    return conv_nd(x, weight, bias, stride, padding)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride, padding) -> Tensor:
    return conv_nd(x, weight, bias, stride, padding)


# -- losses as primitives -------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class over a (B, C) batch."""
    y = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if y.shape != (b,):
        raise DimensionError(f"cross_entropy labels {y.shape} vs batch {b}")
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"label out of range for {c} classes: {y}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out_data = np.asarray(-logp[np.arange(b), y].mean(), dtype=logits.dtype)

    def grad_fn(g):
        sm = np.exp(logp)
        sm[np.arange(b), y] -= 1.0
        return (g * sm / b,)

    return _result(out_data, (logits,), grad_fn, "cross_entropy")


# -- initializers / misc -------------------------------------------------


def trunc_normal(shape, rng: np.random.Generator, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(16):
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2 * std, 2 * std).astype(dtype)


def check_finite(x: Tensor, label: str = "") -> Tensor:
    if not np.isfinite(x.data).all():
        raise FloatingPointError(f"non-finite values in {label or x.op}")
    return x


def first_nonfinite(root: Tensor) -> str | None:
    """Name of the earliest-created non-finite node reachable from root."""
    bad = [n for n in build_tape(root) if not np.isfinite(n.data).all()]
    if not bad:
        return None
    return min(bad, key=lambda n: n.order).op
