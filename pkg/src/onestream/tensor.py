"""Dense tensors with hand-written reverse-mode gradients.

Implements exactly the operators the tracker needs, nothing more. There is
no general broadcasting: operand shapes must match, except bias addition of
a vector over the last axis. The global dtype is float64 in test mode and
float32 in run mode (`set_default_dtype`).
"""

from __future__ import annotations

import math

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float64


class DimensionError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class OptimizationError(RuntimeError):
    """Raised when the optimizer encounters non-finite gradients."""


def set_default_dtype(mode):
    """Select the global dtype: 'f64' (test mode) or 'f32' (run mode)."""
    global _default_dtype
    if isinstance(mode, str):
        if mode not in _DTYPES:
            raise ValueError(f"unknown precision {mode!r}, expected 'f32' or 'f64'")
        _default_dtype = _DTYPES[mode]
    else:
        _default_dtype = np.dtype(mode).type


def default_dtype():
    return _default_dtype


class Tensor:
    """A dense array node in the backward graph.

    Treat instances as immutable after creation: ops never write to their
    inputs, and `data` must not be mutated by callers.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        """The underlying array (read-only by convention)."""
        return self.data

    def item(self):
        return float(self.data)

    def backward(self, seed=None):
        """Reverse-mode sweep from this tensor (defaults to grad of ones)."""
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # a handful of operators for readable model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{opname}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    """a + b; b may be a scalar or a vector added over the last axis (bias)."""
    a = _as_tensor(a)
    if isinstance(b, (int, float, np.floating, np.integer)):
        data = a.data + b

        def backward(g):
            a._accumulate(g)

        return _result(data, (a,), backward)
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        data = a.data + b.data

        def backward(g):
            a._accumulate(g)
            b._accumulate(g)

        return _result(data, (a, b), backward)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]:
        data = a.data + b.data
        lead = tuple(range(a.data.ndim - 1))

        def backward(g):
            a._accumulate(g)
            b._accumulate(g.sum(axis=lead))

        return _result(data, (a, b), backward)
    raise DimensionError(f"add: shapes {a.data.shape} and {b.data.shape} differ")


def sub(a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float, np.floating, np.integer)):
        return add(a, -b)
    b = _as_tensor(b)
    _check_same_shape(a, b, "sub")
    data = a.data - b.data

    def backward(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _result(data, (a, b), backward)


def mul(a, b):
    """Elementwise a * b (same shape) or scaling by a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float, np.floating, np.integer)):
        data = a.data * b

        def backward(g):
            a._accumulate(g * b)

        return _result(data, (a,), backward)
    b = _as_tensor(b)
    _check_same_shape(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _result(data, (a, b), backward)


def pow_scalar(a, p):
    a = _as_tensor(a)
    data = a.data ** p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return _result(data, (a,), backward)


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _result(data, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _result(data, (a,), backward)


def log(a):
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _result(data, (a,), backward)


def abs_(a):
    """|a|; subgradient 0 at exactly 0."""
    a = _as_tensor(a)
    data = np.abs(a.data)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _result(data, (a,), backward)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient is zero outside the open interval."""
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        a._accumulate(g * inside)

    return _result(data, (a,), backward)


def wrap_angle(a):
    """Wrap radians into (-pi, pi]; gradient passes through unchanged."""
    a = _as_tensor(a)
    data = a.data - 2.0 * np.pi * np.ceil((a.data - np.pi) / (2.0 * np.pi))

    def backward(g):
        a._accumulate(g)

    return _result(data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product, 2D or batched 3D with equal batch dimension."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    ok = (
        len(sa) == len(sb)
        and len(sa) in (2, 3)
        and sa[-1] == sb[-2]
        and (len(sa) == 2 or sa[0] == sb[0])
    )
    if not ok:
        raise DimensionError(f"matmul: shapes {sa} and {sb} incompatible")
    data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ b.data.swapaxes(-1, -2))
        b._accumulate(a.data.swapaxes(-1, -2) @ g)

    return _result(data, (a, b), backward)


def linear(x, weight, bias=None):
    """x @ weight (+ bias over the last axis)."""
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, bias)
    return y


def softmax_rows(x):
    """Stable softmax over the last axis; each row sums to 1."""
    x = _as_tensor(x)
    if x.data.ndim < 1 or x.data.shape[-1] < 1:
        raise DimensionError(f"softmax_rows: need at least one column, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        x._accumulate(data * (g - dot))

    return _result(data, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta must have shape ({d},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data
    lead = tuple(range(x.data.ndim - 1))

    def backward(g):
        gamma._accumulate((g * xhat).sum(axis=lead))
        beta._accumulate(g.sum(axis=lead))
        gx = g * gamma.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(inv * (gx - m1 - xhat * m2))

    return _result(data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.data.shape} as {shape}")
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _result(data, (a,), backward)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = np.argsort(axes)
    data = a.data.transpose(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _result(data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return _result(data, tensors, backward)


def split(a, sections, axis=0):
    """Split into equal sections along an axis; inverse of concat."""
    a = _as_tensor(a)
    n = a.data.shape[axis]
    if n % sections != 0:
        raise DimensionError(f"split: axis {axis} of size {n} not divisible by {sections}")
    step = n // sections
    outs = []
    for k in range(sections):
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(k * step, (k + 1) * step)
        idx = tuple(idx)
        data = a.data[idx]

        def backward(g, idx=idx):
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full)

        outs.append(_result(data, (a,), backward))
    return outs


def slice_rows(a, start, stop):
    """Contiguous row slice along axis 0."""
    a = _as_tensor(a)
    data = a.data[start:stop]

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a._accumulate(full)

    return _result(data, (a,), backward)


def gather_rows(a, index):
    """Select rows a[index]; repeated indices accumulate in the backward pass."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _result(data, (a,), backward)


def crop2d(a, h, w):
    """Keep the top-left h x w window of an (H, W, C) tensor."""
    a = _as_tensor(a)
    data = a.data[:h, :w]

    def backward(g):
        full = np.zeros_like(a.data)
        full[:h, :w] = g
        a._accumulate(full)

    return _result(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a):
    a = _as_tensor(a)
    data = np.asarray(a.data.sum())

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _result(data, (a,), backward)


def mean_all(a):
    a = _as_tensor(a)
    n = a.data.size
    data = np.asarray(a.data.mean())

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.data.shape).copy())

    return _result(data, (a,), backward)


def sum_last(a):
    """Sum over the last axis."""
    a = _as_tensor(a)
    data = a.data.sum(axis=-1)

    def backward(g):
        a._accumulate(np.repeat(g[..., None], a.data.shape[-1], axis=-1))

    return _result(data, (a,), backward)


def _reduce_over_axis(a, axis, argfn, reducefn):
    a = _as_tensor(a)
    data = reducefn(a.data, axis=axis)
    idx = argfn(a.data, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        a._accumulate(full)

    return _result(data, (a,), backward)


def max_pool_over_axis(a, axis):
    """Max over one axis; gradient routes to the first maximal element."""
    return _reduce_over_axis(a, axis, np.argmax, np.max)


def min_over_axis(a, axis):
    """Min over one axis; gradient routes to the first minimal element."""
    return _reduce_over_axis(a, axis, np.argmin, np.min)


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x, weight, bias=None, stride=1, padding=None):
    """2D convolution over an (H, W, Cin) tensor.

    weight is (kh, kw, Cin, Cout). Default padding (k-1)//2 preserves H and W
    for odd kernels at stride 1; stride 2 yields ceil(n/2) per axis.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise DimensionError(
            f"conv2d: expected (H,W,Cin) and (kh,kw,Cin,Cout), got "
            f"{x.data.shape} and {weight.data.shape}"
        )
    kh, kw, cin, cout = weight.data.shape
    if x.data.shape[2] != cin:
        raise DimensionError(
            f"conv2d: input channels {x.data.shape[2]} != kernel channels {cin}"
        )
    if padding is None:
        padding = (kh - 1) // 2
    h, w, _ = x.data.shape
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = np.empty((ho, wo, kh, kw, cin), dtype=x.data.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj, :] = xp[di : di + ho * stride : stride,
                                       dj : dj + wo * stride : stride, :]
    wmat = weight.data.reshape(kh * kw * cin, cout)
    data = (cols.reshape(ho * wo, -1) @ wmat).reshape(ho, wo, cout)
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        data = data + bias.data
        parents.append(bias)

    def backward(g):
        gmat = g.reshape(ho * wo, cout)
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 1)))
        weight._accumulate((cols.reshape(ho * wo, -1).T @ gmat).reshape(weight.data.shape))
        gcols = (gmat @ wmat.T).reshape(ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                gxp[di : di + ho * stride : stride,
                    dj : dj + wo * stride : stride, :] += gcols[:, :, di, dj, :]
        if padding:
            gxp = gxp[padding:-padding, padding:-padding, :]
        x._accumulate(gxp)

    return _result(data, parents, backward)


def deconv2d(x, weight, bias=None, stride=2):
    """Transposed convolution with kernel size == stride: exact upsampling.

    An (H, W, Cin) input becomes (stride*H, stride*W, Cout).
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if weight.data.ndim != 4 or weight.data.shape[0] != stride or weight.data.shape[1] != stride:
        raise DimensionError(
            f"deconv2d: kernel must be ({stride},{stride},Cin,Cout), got {weight.data.shape}"
        )
    if x.data.ndim != 3 or x.data.shape[2] != weight.data.shape[2]:
        raise DimensionError(
            f"deconv2d: input {x.data.shape} incompatible with kernel {weight.data.shape}"
        )
    h, w, cin = x.data.shape
    cout = weight.data.shape[3]
    y5 = np.einsum("hwc,ijco->hiwjo", x.data, weight.data)
    data = y5.reshape(h * stride, w * stride, cout)
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        data = data + bias.data
        parents.append(bias)

    def backward(g):
        g5 = g.reshape(h, stride, w, stride, cout)
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 1)))
        weight._accumulate(np.einsum("hwc,hiwjo->ijco", x.data, g5))
        x._accumulate(np.einsum("hiwjo,ijco->hwc", g5, weight.data))

    return _result(data, parents, backward)


def scatter_max(src, cell, num_cells):
    """Per-cell, per-channel max of src rows grouped by cell id.

    src is (N, C); cell is (N,) int with -1 meaning "dropped". Empty cells
    are zero. The gradient routes to the first row attaining each cell max.
    """
    src = _as_tensor(src)
    cell = np.asarray(cell, dtype=np.int64)
    n, c = src.data.shape
    best = np.full((num_cells, c), -np.inf, dtype=src.data.dtype)
    winner = np.full((num_cells, c), -1, dtype=np.int64)
    for i in range(n):
        m = cell[i]
        if m < 0:
            continue
        upd = src.data[i] > best[m]
        best[m][upd] = src.data[i][upd]
        winner[m][upd] = i
    data = np.where(winner >= 0, best, 0.0)

    def backward(g):
        full = np.zeros_like(src.data)
        rows, chans = np.nonzero(winner >= 0)
        np.add.at(full, (winner[rows, chans], chans), g[rows, chans])
        src._accumulate(full)

    return _result(data, (src,), backward)


# ---------------------------------------------------------------------------
# parameters and optimizer


class Parameter:
    """A named trainable tensor; the name path is the checkpoint key."""

    def __init__(self, data, name=""):
        self.tensor = Tensor(data, requires_grad=True)
        self.name = name

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype)

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


class AdamState:
    """Adam moments keyed by parameter name; lr is set externally per epoch."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.step = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.first_moment = {}
        self.second_moment = {}


def adam_step(params, grads, state):
    """One Adam update over aligned (params, grads); returns the state."""
    if len(params) != len(grads):
        raise DimensionError(f"adam_step: {len(params)} params vs {len(grads)} grads")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise OptimizationError(f"non-finite gradient for parameter {p.name!r}")
        m = state.first_moment.get(p.name)
        v = state.second_moment.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.first_moment[p.name] = m
        state.second_moment[p.name] = v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


def lr_at_epoch(base_lr, epoch, decay=5.0, every=6):
    """Step schedule: divide the base rate by `decay` every `every` epochs."""
    return base_lr / decay ** (epoch // every)
