"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node holding its parents and a
backward rule. Nodes carry a global creation index, so sorting the nodes
reachable from a loss in descending index order is a valid reverse
topological order. ``backward`` walks that order once and then drops the
nodes, which consumes the graph.

Arrays keep the dtype they were created with: training runs at float32,
gradient checks at float64.
"""

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DimensionError

DEFAULT_DTYPE = np.float32

_node_counter = itertools.count()


class _Node:
    __slots__ = ("index", "parents", "backward")

    def __init__(self, parents, backward):
        self.index = next(_node_counter)
        self.parents = parents
        self.backward = backward


class Tensor:
    """A numpy array plus gradient bookkeeping.

    Leaf tensors created with ``requires_grad=True`` get a zero ``grad``
    array up front; gradients accumulate into it until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(
                data.dtype, np.floating
            ):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(parents, backward_fn)
    return out


def backward(loss):
    """Populate ``grad`` on every tensor that ``loss`` depends on."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward() needs a scalar loss tensor")
    if not loss.requires_grad:
        return

    reached = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in reached:
            continue
        reached[id(t)] = t
        if t._node is not None:
            stack.extend(p for p in t._node.parents if p.requires_grad)

    ordered = sorted(
        (t for t in reached.values() if t._node is not None),
        key=lambda t: t._node.index,
        reverse=True,
    )
    pending = {id(loss): np.ones_like(loss.data)}
    for t in ordered:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t.grad = g
        node = t._node
        t._node = None
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg

    for key, g in pending.items():
        leaf = reached[key]
        if leaf.grad is None:
            leaf.grad = g.astype(leaf.dtype, copy=False)
        else:
            leaf.grad = leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _result(a.data + b, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        return _result(a - b.data, (b,), lambda g: (-g,))
    if not isinstance(b, Tensor):
        return _result(a.data - b, (a,), lambda g: (g,))
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _result(a.data * b, (a,), lambda g: (g * b,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (
            g * bd if a.requires_grad else None,
            g * ad if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), grad_fn)


def div(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _result(a.data / b, (a,), lambda g: (g / b,))
    if not isinstance(a, Tensor):
        bd = b.data
        out = a / bd
        return _result(out, (b,), lambda g: (-g * out / bd,))
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def grad_fn(g):
        return (
            g / bd if a.requires_grad else None,
            -g * out / bd if b.requires_grad else None,
        )

    return _result(out, (a, b), grad_fn)


def square(x):
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def abs_(x):
    xd = x.data
    return _result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    """Tanh approximation of GELU."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _result(out, (x,), grad_fn)


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum_(x):
    shape = x.shape
    return _result(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    shape, n = x.shape, x.data.size
    return _result(
        x.data.mean(), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),)
    )


def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(
        out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis))
    )


def channel_slice(x, start, stop):
    """Channels ``start:stop`` of an N,C,H,W tensor."""
    shape, dtype = x.shape, x.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop], (x,), grad_fn)


def chunk(x, parts):
    c = x.shape[1]
    if c % parts:
        raise DimensionError(f"cannot split {c} channels into {parts} equal parts")
    step = c // parts
    return [channel_slice(x, i * step, (i + 1) * step) for i in range(parts)]


def global_avg_pool(x):
    """N,C,H,W -> N,C,1,1."""
    shape = x.shape
    hw = shape[2] * shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / hw, shape).copy(),))


def normalize_sum(x):
    """Rows of an N,F tensor divided by their sum."""
    xd = x.data
    total = xd.sum(axis=1, keepdims=True)
    out = xd / total

    def grad_fn(g):
        return ((g - (g * out).sum(axis=1, keepdims=True)) / total,)

    return _result(out, (x,), grad_fn)


def weighted_frame_sum(frames, weights):
    """Sum over F of ``weights[n, f] * frames[n, f]``; frames are N,F,C,H,W."""
    if frames.shape[:2] != weights.shape:
        raise DimensionError(
            f"weights {weights.shape} do not match frames {frames.shape[:2]}"
        )
    fd, wd = frames.data, weights.data
    out = np.einsum("nf,nfchw->nchw", wd, fd)

    def grad_fn(g):
        return (
            wd[:, :, None, None, None] * g[:, None] if frames.requires_grad else None,
            np.einsum("nfchw,nchw->nf", fd, g) if weights.requires_grad else None,
        )

    return _result(out, (frames, weights), grad_fn)


# ---------------------------------------------------------------------------
# convolutions


def _check_kernel(kh, kw, padding, stride=1):
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel extents must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise DimensionError(f"invalid padding={padding} / stride={stride}")


def _pad(x, padding):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of N,C,H,W input with an O,C,kh,kw kernel."""
    n, c, h, w = x.shape
    o, kc, kh, kw = weight.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {kc}")
    _check_kernel(kh, kw, padding, stride)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input")

    xp = _pad(x.data, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
                    ] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad_fn)


def depthwise_conv2d(x, weight, padding=0):
    """Per-channel cross-correlation with a C,1,kh,kw kernel, stride 1."""
    n, c, h, w = x.shape
    kc, one, kh, kw = weight.shape
    if kc != c or one != 1:
        raise DimensionError(
            f"depthwise_conv2d: input has {c} channels, kernel shape {weight.shape}"
        )
    _check_kernel(kh, kw, padding)
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError("depthwise_conv2d: kernel larger than padded input")

    xp = _pad(x.data, padding)
    k = weight.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(xp, k))
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            np.multiply(xp[:, :, i : i + ho, j : j + wo], k[None, :, i, j, None, None], out=tmp)
            out += tmp

    def grad_fn(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            tmp = np.empty_like(g)
            for i in range(kh):
                for j in range(kw):
                    np.multiply(g, k[None, :, i, j, None, None], out=tmp)
                    gxp[:, :, i : i + ho, j : j + wo] += tmp
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if weight.requires_grad:
            gw = np.empty(weight.shape, dtype=weight.dtype)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i : i + ho, j : j + wo])
        return gx, gw

    return _result(out, (x, weight), grad_fn)


# ---------------------------------------------------------------------------
# normalization and attention


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize each pixel across the channel axis, then apply a per-channel affine."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    c = x.shape[1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(
            f"layer_norm: {c} channels but gain {gain.shape} / bias {bias.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data[None, :, None, None]
    out = xhat * gd + bias.data[None, :, None, None]

    def grad_fn(g):
        gx = gg = gb = None
        if x.requires_grad:
            gxh = g * gd
            gx = inv * (
                gxh
                - gxh.mean(axis=1, keepdims=True)
                - xhat * (gxh * xhat).mean(axis=1, keepdims=True)
            )
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gg, gb

    return _result(out, (x, gain, bias), grad_fn)


_NORM_EPS = 1e-12


def _split_heads(a, heads):
    n, c, h, w = a.shape
    return a.reshape(n, heads, c // heads, h * w)


def _l2_normalize(a):
    norm = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, _NORM_EPS)
    return a / denom, denom, norm > _NORM_EPS


def _softmax(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_heads(c, heads, temperature):
    if heads < 1 or c % heads:
        raise ConfigError(f"{c} channels are not divisible into {heads} heads")
    if temperature.shape != (heads,):
        raise DimensionError(
            f"temperature must have shape ({heads},), got {temperature.shape}"
        )


def channel_attention_weights(q, k, heads, temperature):
    """Row-stochastic N,heads,C/heads,C/heads attention matrices (no graph)."""
    q, k, temperature = as_tensor(q).data, as_tensor(k).data, as_tensor(temperature).data
    _check_heads(q.shape[1], heads, temperature)
    qn = _l2_normalize(_split_heads(q, heads))[0]
    kn = _l2_normalize(_split_heads(k, heads))[0]
    logits = (qn @ kn.transpose(0, 1, 3, 2)) * temperature[None, :, None, None]
    return _softmax(logits)


def channel_attention(q, k, v, heads, temperature):
    """Transposed attention across channels.

    q, k and v are N,C,H,W. Within each head the C/heads channel vectors of
    q and k are L2-normalized over pixels, their similarity matrix scaled by
    the per-head temperature and softmaxed row-wise, and the result mixes
    the channels of v. Cost is linear in the pixel count.
    """
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    n, c, h, w = q.shape
    _check_heads(c, heads, temperature)
    qh, kh, vh = (_split_heads(a.data, heads) for a in (q, k, v))
    qn, qden, qmask = _l2_normalize(qh)
    kn, kden, kmask = _l2_normalize(kh)
    sim = qn @ kn.transpose(0, 1, 3, 2)
    t = temperature.data[None, :, None, None]
    attn = _softmax(sim * t)
    out = (attn @ vh).reshape(n, c, h, w)

    def grad_fn(g):
        go = g.reshape(vh.shape)
        gv = attn.transpose(0, 1, 3, 2) @ go if v.requires_grad else None
        ga = go @ vh.transpose(0, 1, 3, 2)
        glog = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True))
        gt = (glog * sim).sum(axis=(0, 2, 3)) if temperature.requires_grad else None
        gsim = glog * t
        gq = gk = None
        if q.requires_grad:
            gqn = gsim @ kn
            gq = gqn / qden - qmask * qn * (gqn * qn).sum(axis=-1, keepdims=True) / qden
            gq = gq.reshape(q.shape)
        if k.requires_grad:
            gkn = gsim.transpose(0, 1, 3, 2) @ qn
            gk = gkn / kden - kmask * kn * (gkn * kn).sum(axis=-1, keepdims=True) / kden
            gk = gk.reshape(k.shape)
        if gv is not None:
            gv = gv.reshape(v.shape)
        return gq, gk, gv, gt

    return _result(out, (q, k, v, temperature), grad_fn)


# ---------------------------------------------------------------------------
# resampling


def _unshuffle(a, f):
    n, c, h, w = a.shape
    a = a.reshape(n, c, h // f, f, w // f, f).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(a.reshape(n, c * f * f, h // f, w // f))


def _shuffle(a, f):
    n, c, h, w = a.shape
    a = a.reshape(n, c // (f * f), f, f, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(a.reshape(n, c // (f * f), h * f, w * f))


def pixel_unshuffle(x, factor):
    """Fold each factor x factor spatial block into channels."""
    _, _, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise DimensionError(f"spatial size {h}x{w} is not divisible by {factor}")
    return _result(_unshuffle(x.data, factor), (x,), lambda g: (_shuffle(g, factor),))


def pixel_shuffle(x, factor):
    """Inverse of :func:`pixel_unshuffle`."""
    c = x.shape[1]
    if factor < 1 or c % (factor * factor):
        raise DimensionError(f"{c} channels not divisible by {factor}**2")
    return _result(_shuffle(x.data, factor), (x,), lambda g: (_unshuffle(g, factor),))
