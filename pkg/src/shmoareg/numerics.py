"""Dense float64 tensors with reverse-mode differentiation.

Every primitive records its parents and a backward closure on the output
tensor. ``Tensor.backward`` walks the recorded graph in reverse topological
order. The graph is rebuilt on every forward pass and tracked tensors are
never mutated in place.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "retain_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.retain_grad = False
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate gradients of this tensor into every reachable leaf.

        Leaves (and tensors flagged ``retain_grad``) get ``.grad`` added to,
        so two calls from different roots sum their contributions.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node.retain_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), backward)


def power(a, p: float):
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def clip(a, lo, hi):
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Tanh-approximated GELU (smooth everywhere, unlike ReLU)."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), backward)


# reductions and shape ops -------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx):
    """Basic or advanced indexing; the backward scatter-adds."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward)


def take(a, indices, axis=0):
    """Gather slices of ``a`` along ``axis`` (like ``np.take``)."""
    a = as_tensor(a)
    indices = np.asarray(indices)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        flat_idx = indices.reshape(-1)
        gm = gm.reshape((flat_idx.size,) + moved.shape[1:])
        # scatter by expert id with a bincount-style loop over unique ids
        for i in np.unique(flat_idx):
            moved[i] += gm[flat_idx == i].sum(axis=0)
        return (full,)

    return _make(np.take(a.data, indices, axis=axis), (a,), backward)


def take_along_axis(a, indices, axis=-1):
    """Gather along one axis with per-row indices; indices must be distinct per row."""
    a = as_tensor(a)
    indices = np.asarray(indices)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, indices, g, axis=axis)
        return (full,)

    return _make(np.take_along_axis(a.data, indices, axis=axis), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def roll(a, shift, axis):
    a = as_tensor(a)
    neg = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
    return _make(np.roll(a.data, shift, axis), (a,), lambda g: (np.roll(g, neg, axis),))


def pad(a, widths):
    """Zero padding; ``widths`` as for ``np.pad``."""
    a = as_tensor(a)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[sl],))


# linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def _expand_ellipsis(subs, out_sub, ndims):
    used = set("".join(subs) + out_sub)
    free = [c for c in "ABCDEFGHIJKLMNOPQRSTUVWXYZ" if c not in used]
    n_ell = max(nd - len(s.replace("...", "")) for s, nd in zip(subs, ndims) if "..." in s)
    ell = "".join(free[:n_ell])
    new = []
    for s, nd in zip(subs, ndims):
        if "..." in s:
            m = nd - len(s.replace("...", ""))
            s = s.replace("...", ell[n_ell - m:])
        new.append(s)
    return new, out_sub.replace("...", ell)


def einsum(spec: str, *operands):
    """Differentiable ``np.einsum`` for explicit-output specs without repeated
    subscripts inside an operand."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = spec.replace(" ", "").split("->")
    subs = lhs.split(",")
    if "..." in spec:
        subs, out_sub = _expand_ellipsis(subs, out_sub, [o.ndim for o in ops])
        spec = ",".join(subs) + "->" + out_sub
    data = [o.data for o in ops]
    out = np.einsum(spec, *data, optimize=True)

    def backward(g):
        grads = []
        for i, s in enumerate(subs):
            if not ops[i].requires_grad:
                grads.append(None)
                continue
            others = [subs[j] for j in range(len(ops)) if j != i]
            odata = [data[j] for j in range(len(ops)) if j != i]
            present = set(out_sub).union(*others) if others else set(out_sub)
            missing = [c for c in s if c not in present]
            if missing:
                raise ShapeError(f"einsum backward cannot restore summed-out index {missing} in {spec}")
            grads.append(np.einsum(",".join([out_sub] + others) + "->" + s, g, *odata, optimize=True))
        return tuple(grads)

    return _make(out, tuple(ops), backward)


# attention / routing primitives -------------------------------------------

def softmax(x, axis=-1):
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def topk(x, k: int, axis=-1):
    """Indices (ascending) and values of the ``k`` largest entries along ``axis``.

    Ties go to the lowest index. Selection carries no gradient; the returned
    values are plain arrays. Use ``take_along_axis`` to gather differentiably.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    n = arr.shape[axis]
    if not 1 <= k <= n:
        raise ValueError(f"topk needs 1 <= k <= {n}, got k={k}")
    # stable sort on the negated values keeps lower indices first among ties
    order = np.argsort(-arr, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    idx = np.sort(idx, axis=axis)
    return idx, np.take_along_axis(arr, idx, axis=axis)


def layer_norm(x, scale, offset, axis=-1, eps=1e-5):
    """Per-token standardisation followed by a learned affine map."""
    mu = mean(x, axis=axis, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=axis, keepdims=True)
    return xc / sqrt(var + eps) * scale + offset


# 3D convolution -----------------------------------------------------------

def conv3d(x, kernel, bias=None):
    """Zero-padded 'same' cross-correlation of a C×D×H×W input with an
    O×C×s×s×s kernel (s odd), stride 1."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects C×D×H×W input and O×C×s×s×s kernel, got {x.shape} and {kernel.shape}")
    o, c, s = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.shape[2:] != (s, s, s):
        raise ShapeError(f"conv3d kernel must be cubic, got {kernel.shape}")
    if s % 2 == 0:
        raise ValueError(f"conv3d kernel size must be odd, got {s}")
    if c != x.shape[0]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if o <= c:
        out, backward = _conv3d_output_shift(x, kernel)
    else:
        out, backward = _conv3d_input_shift(x, kernel)
    y = _make(out, (x, kernel), backward)
    if bias is not None:
        y = y + reshape(bias, (o, 1, 1, 1))
    return y


def _offsets(s):
    return [(a, b, cc) for a in range(s) for b in range(s) for cc in range(s)]


def _conv3d_input_shift(x, kernel):
    """Accumulate one matmul per kernel offset over shifted input patches."""
    o, c, s = kernel.shape[:3]
    p = (s - 1) // 2
    _, d, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p)))
    kd = kernel.data
    out = np.zeros((o, d * h * w))
    for a, b, cc in _offsets(s):
        out += kd[:, :, a, b, cc] @ xp[:, a:a + d, b:b + h, cc:cc + w].reshape(c, -1)
    out = out.reshape(o, d, h, w)

    def backward(g):
        gflat = g.reshape(o, -1)
        gk = gx = None
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            for a, b, cc in _offsets(s):
                gk[:, :, a, b, cc] = gflat @ xp[:, a:a + d, b:b + h, cc:cc + w].reshape(c, -1).T
        if x.requires_grad:
            # correlation of the padded output gradient with the flipped kernel
            gp = np.pad(g, ((0, 0), (p, p), (p, p), (p, p)))
            gx = np.zeros((c, d * h * w))
            for a, b, cc in _offsets(s):
                ga, gb, gc = s - 1 - a, s - 1 - b, s - 1 - cc
                gx += kd[:, :, a, b, cc].T @ gp[:, ga:ga + d, gb:gb + h, gc:gc + w].reshape(o, -1)
            gx = gx.reshape(c, d, h, w)
        return gx, gk

    return out, backward


def _shift_slices(t, n):
    """Destination and source slices for out[i] += src[i + t] along one axis."""
    return slice(max(0, -t), min(n, n - t)), slice(max(0, t), min(n, n + t))


def _conv3d_output_shift(x, kernel, max_elems=16_000_000):
    """Multiply every kernel offset against the unshifted input at once and
    shift-add the (narrower) outputs. Cheaper than input shifting when the
    kernel has fewer output than input channels."""
    o, c, s = kernel.shape[:3]
    p = (s - 1) // 2
    _, d, h, w = x.shape
    v = d * h * w
    offs = _offsets(s)
    xflat = x.data.reshape(c, v)
    kall = kernel.data.transpose(2, 3, 4, 0, 1).reshape(len(offs), o, c)
    chunk = max(1, max_elems // max(1, o * v))
    sl = [[_shift_slices(t - p, n) for t in range(s)] for n in (d, h, w)]

    out = np.zeros((o, d, h, w))
    for start in range(0, len(offs), chunk):
        part = offs[start:start + chunk]
        y = (kall[start:start + len(part)].reshape(-1, c) @ xflat).reshape(len(part), o, d, h, w)
        for j, (a, b, cc) in enumerate(part):
            (da, sa), (db, sb), (dc, sc) = sl[0][a], sl[1][b], sl[2][cc]
            out[:, da, db, dc] += y[j][:, sa, sb, sc]

    def backward(g):
        gk = np.empty((len(offs), o, c)) if kernel.requires_grad else None
        gx = np.zeros((c, v)) if x.requires_grad else None
        for start in range(0, len(offs), chunk):
            part = offs[start:start + chunk]
            gs = np.zeros((len(part), o, d, h, w))
            for j, (a, b, cc) in enumerate(part):
                (da, sa), (db, sb), (dc, sc) = sl[0][a], sl[1][b], sl[2][cc]
                gs[j][:, sa, sb, sc] = g[:, da, db, dc]
            gs = gs.reshape(len(part) * o, v)
            if gk is not None:
                gk[start:start + len(part)] = (gs @ xflat.T).reshape(len(part), o, c)
            if gx is not None:
                gx += kall[start:start + len(part)].reshape(-1, c).T @ gs
        if gk is not None:
            gk = gk.reshape(s, s, s, o, c).transpose(3, 4, 0, 1, 2)
        if gx is not None:
            gx = gx.reshape(c, d, h, w)
        return gx, gk

    return out, backward


# trilinear sampling -------------------------------------------------------

def _corner_weights(coords, extents):
    """Clamp sample coordinates to the volume and split them into lower
    corner indices and fractional parts, per axis."""
    lo, frac, inside = [], [], []
    for ax, n in enumerate(extents):
        c = coords[ax]
        cc = np.clip(c, 0.0, n - 1)
        f0 = np.floor(cc)
        i0 = np.minimum(f0.astype(np.int64), max(n - 2, 0))
        lo.append(i0)
        frac.append(cc - i0)
        inside.append((c >= 0.0) & (c <= n - 1))
    return lo, frac, inside


def trilinear_sample(vol, coords):
    """Sample a C×D×H×W volume at absolute voxel coordinates.

    ``coords`` is 3×P (any trailing shape) holding (d, h, w) positions.
    Out-of-range positions are clamped to the border. Differentiable in
    both the volume and the coordinates.
    """
    vol, coords = as_tensor(vol), as_tensor(coords)
    c_, d, h, w = vol.shape
    pshape = coords.shape[1:]
    cd = coords.data.reshape(3, -1)
    (i0, j0, k0), (fd, fh, fw), inside = _corner_weights(cd, (d, h, w))
    i1 = np.minimum(i0 + 1, d - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    k1 = np.minimum(k0 + 1, w - 1)
    vflat = vol.data.reshape(c_, -1)

    corners = []
    for di, wd in ((i0, 1 - fd), (i1, fd)):
        for dj, wh in ((j0, 1 - fh), (j1, fh)):
            for dk, ww in ((k0, 1 - fw), (k1, fw)):
                corners.append(((di * h + dj) * w + dk, (di, dj, dk), (wd, wh, ww)))
    out = np.zeros((c_, cd.shape[1]))
    for lin, _, (wd, wh, ww) in corners:
        out += vflat[:, lin] * (wd * wh * ww)
    out = out.reshape((c_,) + pshape)

    def backward(g):
        gflat = g.reshape(c_, -1)
        gv = gc = None
        if vol.requires_grad:
            gv = np.zeros((c_, d * h * w))
            for lin, _, (wd, wh, ww) in corners:
                wt = wd * wh * ww
                for ch in range(c_):
                    gv[ch] += np.bincount(lin, weights=gflat[ch] * wt, minlength=d * h * w)
            gv = gv.reshape(vol.shape)
        if coords.requires_grad:
            gc = np.zeros_like(cd)
            for lin, (di, dj, dk), (wd, wh, ww) in corners:
                val = (gflat * vflat[:, lin]).sum(axis=0)
                # derivative of each weight factor wrt its own coordinate is ±1
                sd = np.where(di == i0, -1.0, 1.0) if d > 1 else 0.0
                sh = np.where(dj == j0, -1.0, 1.0) if h > 1 else 0.0
                sw = np.where(dk == k0, -1.0, 1.0) if w > 1 else 0.0
                gc[0] += val * sd * wh * ww
                gc[1] += val * wd * sh * ww
                gc[2] += val * wd * wh * sw
            gc = gc * np.stack(inside)
            gc = gc.reshape(coords.shape)
        return gv, gc

    return _make(out, (vol, coords), backward)


def identity_grid(shape) -> np.ndarray:
    """3×D×H×W array of voxel index coordinates."""
    return np.stack(np.meshgrid(*[np.arange(n, dtype=DTYPE) for n in shape], indexing="ij"))


# gradient checking --------------------------------------------------------

def finite_diff_check(f, x: Tensor, h: float = 1e-5, max_elems: int | None = None, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps the (possibly closed-over) tensor ``x`` to a scalar Tensor.
    The error per element is |analytic - numeric| / max(1, |numeric|).
    ``max_elems`` limits the check to a seeded random subset of entries.
    """
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if not isinstance(y, Tensor) or y.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar-valued function, got shape {getattr(y, 'shape', None)}")
    y.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_elems is not None and flat.size > max_elems:
        idx = np.sort(rng(seed).choice(flat.size, size=max_elems, replace=False))
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        err = abs(analytic.reshape(-1)[i] - num) / max(1.0, abs(num))
        worst = max(worst, err)
    x.grad = None
    return worst
