"""Reverse-mode autodiff substrate.

A small dynamically-built tape over numpy arrays, with exactly the kernels
the model needs: dense products, 2-D convolution / transposed convolution,
bilinear grid sampling, elementwise nonlinearities, softmax and reductions.

Every op checks its result for NaN/Inf at creation time and raises naming
the producing op, so numerical blow-ups surface at the first bad node
instead of at the loss.
"""

from __future__ import annotations

import json

import numpy as np

__all__ = [
    "Tensor",
    "Rng",
    "GraphError",
    "NonFiniteError",
    "tensor",
    "zeros",
    "concat",
    "matmul",
    "conv2d",
    "deconv2d",
    "grid_sample",
    "softmax",
    "backward",
]

DEFAULT_DTYPE = np.float64


class GraphError(ValueError):
    """Structural misuse of the tape (shape mismatch, non-scalar loss...)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def _as_array(values, dtype):
    arr = np.asarray(values, dtype=dtype)
    return arr


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")


class Tensor:
    """A node in the computation graph.

    Values are immutable once the node participates in a graph; gradients
    accumulate into ``grad`` on leaves with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, values, requires_grad=False, op="leaf", parents=(), vjp=None,
                 dtype=None):
        if isinstance(values, Tensor):
            raise GraphError("Tensor cannot wrap another Tensor")
        self.data = _as_array(values, dtype or (values.dtype if isinstance(values, np.ndarray) and values.dtype in (np.float32, np.float64) else DEFAULT_DTYPE))
        _check_finite(self.data, op)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._vjp = vjp

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, op="detach")

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing -----------------------------------------------------

    def _needs_tape(self):
        return self.requires_grad or self._parents

    def backward(self):
        backward(self)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, "add", np.add,
                       lambda a, b, g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, "sub", np.subtract,
                       lambda a, b, g: (g, -g))

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        return _binary(self, other, "mul", np.multiply,
                       lambda a, b, g: (g * b.data, g * a.data))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, "div", np.divide,
                       lambda a, b, g: (g / b.data, -g * a.data / (b.data ** 2)))

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __neg__(self):
        return _unary(self, "neg", np.negative, lambda a, out, g: -g)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise GraphError("only scalar exponents are supported")
        return _unary(self, "pow", lambda a: a ** p,
                      lambda a, out, g: g * p * a ** (p - 1))

    # -- nonlinearities -----------------------------------------------------

    def tanh(self):
        return _unary(self, "tanh", np.tanh, lambda a, out, g: g * (1.0 - out ** 2))

    def sigmoid(self):
        def fwd(a):
            return 0.5 * (np.tanh(0.5 * a) + 1.0)
        return _unary(self, "sigmoid", fwd, lambda a, out, g: g * out * (1.0 - out))

    def exp(self):
        return _unary(self, "exp", np.exp, lambda a, out, g: g * out)

    def log(self):
        return _unary(self, "log", np.log, lambda a, out, g: g / a)

    def sqrt(self):
        return _unary(self, "sqrt", np.sqrt, lambda a, out, g: g * 0.5 / out)

    def relu(self):
        return _unary(self, "relu", lambda a: np.maximum(a, 0.0),
                      lambda a, out, g: g * (a > 0.0))

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.shape
        return _make(self.data.reshape(shape), "reshape", (self,),
                     lambda g: (g.reshape(src_shape),))

    def flatten(self):
        return self.reshape(-1)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return _make(self.data.transpose(axes), "transpose", (self,),
                     lambda g: (g.transpose(inv),))

    def __getitem__(self, idx):
        src_shape = self.shape

        def vjp(g):
            out = np.zeros(src_shape, dtype=g.dtype)
            out[idx] = g
            return (out,)

        return _make(self.data[idx], "slice", (self,), vjp)

    def sum(self, axis=None, keepdims=False):
        src_shape = self.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, src_shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src_shape).copy(),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), "sum", (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _make(data, op, parents, vjp):
    if any(p._needs_tape() for p in parents):
        return Tensor(data, op=op, parents=tuple(parents), vjp=vjp)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b, op, fwd, bwd):
    a, b = _wrap(a), _wrap(b)
    data = fwd(a.data, b.data)

    def vjp(g):
        ga, gb = bwd(a, b, g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(data, op, (a, b), vjp)


def _unary(a, op, fwd, bwd):
    out_holder = {}
    data = fwd(a.data)

    def vjp(g):
        return (bwd(a.data, out_holder["out"].data, g),)

    t = _make(data, op, (a,), vjp)
    out_holder["out"] = t
    return t


# -- construction helpers ----------------------------------------------------

def tensor(values, requires_grad=False, dtype=None):
    return Tensor(values, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make(data, "concat", tuple(tensors), vjp)


# -- dense -------------------------------------------------------------------

def matmul(a, b):
    """Matrix product; supports [n]@[n,m], [B,n]@[n,m] and [n,m]@[m,k]."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[0]:
        raise GraphError(
            f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        if a.ndim == 1:
            ga = g @ b.data.T
            gb = np.outer(a.data, g)
        else:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return (ga, gb)

    return _make(data, "matmul", (a, b), vjp)


def softmax(x, axis=-1):
    """Numerically stable softmax built from primitive ops."""
    x = _wrap(x)
    shift = Tensor(x.data.max(axis=axis, keepdims=True), op="const")
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


# -- 2-D convolution ----------------------------------------------------------

def _conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    # x: [B, C, H, W] -> cols [B, H', W', C, kh, kw]
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride].transpose(0, 2, 3, 1, 4, 5)


def _conv_fwd(x, w, stride, pad):
    # x: [B, Cin, H, W], w: [Cout, Cin, kh, kw]
    cout, cin, kh, kw = w.shape
    cols = _im2col(x, kh, kw, stride, pad)
    b, ho, wo = cols.shape[:3]
    out = cols.reshape(b, ho * wo, cin * kh * kw) @ w.reshape(cout, -1).T
    return out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)


def _conv_bwd_kernel(x, g, stride, pad, kh, kw):
    # g: [B, Cout, H', W']
    cols = _im2col(x, kh, kw, stride, pad)
    b, ho, wo, cin = cols.shape[:4]
    cout = g.shape[1]
    gm = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
    cm = cols.reshape(b * ho * wo, cin * kh * kw)
    return (gm.T @ cm).reshape(cout, cin, kh, kw)


def _conv_bwd_input(g, w, stride, pad, in_hw):
    # scatter g back through the kernel footprint
    b, cout, ho, wo = g.shape
    _, cin, kh, kw = w.shape
    h, wdt = in_hw
    gp = np.zeros((b, cin, h + 2 * pad, wdt + 2 * pad), dtype=g.dtype)
    # grad_cols[b, i, j, cin] for each kernel offset
    gmat = g.transpose(0, 2, 3, 1)  # [B, H', W', Cout]
    for i in range(kh):
        for j in range(kw):
            contrib = gmat @ w[:, :, i, j]  # [B, H', W', Cin]
            gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                contrib.transpose(0, 3, 1, 2)
    if pad:
        gp = gp[:, :, pad:pad + h, pad:pad + wdt]
    return gp


def _with_batch(x):
    """Return (array, had_batch) with a leading batch axis guaranteed."""
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise GraphError(f"expected 3-D or 4-D input, got shape {x.shape}")


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of [C,H,W] or [B,C,H,W] with kernel [Cout,Cin,kh,kw]."""
    x, kernel = _wrap(x), _wrap(kernel)
    if stride < 1 or padding < 0:
        raise GraphError("stride must be >= 1 and padding >= 0")
    xb, batched = _with_batch(x.data)
    cout, cin, kh, kw = kernel.shape
    if xb.shape[1] != cin:
        raise GraphError(
            f"conv2d channel mismatch: input has {xb.shape[1]} channels, "
            f"kernel expects {cin}")
    h, w = xb.shape[2:]
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise GraphError(
            f"conv2d kernel {kh}x{kw} does not fit padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")
    out = _conv_fwd(xb, kernel.data, stride, padding)

    def vjp(g):
        gb = g if batched else g[None]
        gx = _conv_bwd_input(gb, kernel.data, stride, padding, (h, w))
        gk = _conv_bwd_kernel(xb, gb, stride, padding, kh, kw)
        return (gx if batched else gx[0], gk)

    return _make(out if batched else out[0], "conv2d", (x, kernel), vjp)


def deconv2d(x, kernel, stride=1, padding=0):
    """Transposed convolution; kernel is [Cin, Cout, kh, kw].

    Adjoint of conv2d: the gradient of deconv2d w.r.t. its input is a conv2d
    with the same kernel.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    if stride < 1 or padding < 0:
        raise GraphError("stride must be >= 1 and padding >= 0")
    xb, batched = _with_batch(x.data)
    cin, cout, kh, kw = kernel.shape
    if xb.shape[1] != cin:
        raise GraphError(
            f"deconv2d channel mismatch: input has {xb.shape[1]} channels, "
            f"kernel expects {cin}")
    h, w = xb.shape[2:]
    ho = (h - 1) * stride + kh - 2 * padding
    wo = (w - 1) * stride + kw - 2 * padding
    if ho <= 0 or wo <= 0:
        raise GraphError(f"deconv2d output size {ho}x{wo} is not positive")
    # a deconv kernel [Cin, Cout, kh, kw] is, bit for bit, the conv kernel
    # [C_out_conv, C_in_conv, kh, kw] whose adjoint this op computes
    wconv = kernel.data
    out = _conv_bwd_input(xb, wconv, stride, padding, (ho, wo))

    def vjp(g):
        gb = g if batched else g[None]
        gx = _conv_fwd(gb, wconv, stride, padding)
        gk = _conv_bwd_kernel(gb, xb, stride, padding, kh, kw)
        return (gx if batched else gx[0], gk)

    return _make(out if batched else out[0], "deconv2d", (x, kernel), vjp)


# -- bilinear grid sampling ----------------------------------------------------

def _out_grid(n):
    # normalized coordinates of output pixels, align-corners style
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


def grid_sample(image, affine, out_hw=None):
    """Bilinear sample of [C,H,W] or [B,C,H,W] under a 2x3 affine map.

    Output pixel (i, j) at normalized coords (y_out, x_out) reads the input at
    [x_in, y_in] = A @ [x_out, y_out, 1]; samples outside the image are zero.
    Identity affine with out_hw == input size reproduces the input exactly.
    """
    image, affine = _wrap(image), _wrap(affine)
    imb, batched = _with_batch(image.data)
    b, c, h, w = imb.shape
    if out_hw is None:
        out_hw = (h, w)
    oh, ow = out_hw

    aff = affine.data
    if aff.shape == (6,):
        aff = aff.reshape(2, 3)
    if aff.shape == (2, 3):
        affb = np.broadcast_to(aff, (b, 2, 3))
    elif aff.shape == (b, 2, 3):
        affb = aff
    else:
        raise GraphError(
            f"affine must have shape (2,3), (6,) or ({b},2,3); got {affine.shape}")

    ys = _out_grid(oh)
    xs = _out_grid(ow)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")  # [oh, ow]
    basis = np.stack([gx, gy, np.ones_like(gx)], axis=-1)  # [oh, ow, 3]

    # input coords per batch: [B, oh, ow]
    xin = np.einsum("hwk,bk->bhw", basis, affb[:, 0, :])
    yin = np.einsum("hwk,bk->bhw", basis, affb[:, 1, :])
    px = (xin + 1.0) * 0.5 * (w - 1)
    py = (yin + 1.0) * 0.5 * (h - 1)
    # snap coordinates that land within rounding noise of a pixel, so that
    # integer-aligned transforms (identity in particular) reproduce pixel
    # values bit for bit instead of blending in a ~1e-16 neighbour weight
    px = np.where(np.abs(px - np.rint(px)) < 1e-9, np.rint(px), px)
    py = np.where(np.abs(py - np.rint(py)) < 1e-9, np.rint(py), py)

    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0

    def gather(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        bi = np.arange(b)[:, None, None]
        vals = imb[bi, :, yc, xc]  # [B, oh, ow, C]
        return vals * valid[..., None], valid

    v00, m00 = gather(y0, x0)
    v01, m01 = gather(y0, x0 + 1)
    v10, m10 = gather(y0 + 1, x0)
    v11, m11 = gather(y0 + 1, x0 + 1)

    w00 = ((1 - fy) * (1 - fx))[..., None]
    w01 = ((1 - fy) * fx)[..., None]
    w10 = (fy * (1 - fx))[..., None]
    w11 = (fy * fx)[..., None]

    out = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11)
    out = out.transpose(0, 3, 1, 2)  # [B, C, oh, ow]

    def vjp(g):
        gb = g if batched else g[None]
        gpix = gb.transpose(0, 2, 3, 1)  # [B, oh, ow, C]
        gimg = np.zeros_like(imb)
        bi = np.broadcast_to(np.arange(b)[:, None, None], (b, oh, ow))

        def scatter(yi, xi, wgt, mask):
            sel = mask
            np.add.at(
                gimg.transpose(0, 2, 3, 1),
                (bi[sel], np.clip(yi, 0, h - 1)[sel], np.clip(xi, 0, w - 1)[sel]),
                (gpix * wgt)[sel])

        scatter(y0, x0, w00, m00)
        scatter(y0, x0 + 1, w01, m01)
        scatter(y0 + 1, x0, w10, m10)
        scatter(y0 + 1, x0 + 1, w11, m11)

        # gradient w.r.t. sample coordinates
        gout = gpix
        dpx = ((1 - fy)[..., None] * (v01 - v00) + fy[..., None] * (v11 - v10))
        dpy = ((1 - fx)[..., None] * (v10 - v00) + fx[..., None] * (v11 - v01))
        gpx = (gout * dpx).sum(axis=-1)  # [B, oh, ow]
        gpy = (gout * dpy).sum(axis=-1)
        gxin = gpx * 0.5 * (w - 1)
        gyin = gpy * 0.5 * (h - 1)
        ga = np.empty((b, 2, 3), dtype=g.dtype)
        ga[:, 0, :] = np.einsum("bhw,hwk->bk", gxin, basis)
        ga[:, 1, :] = np.einsum("bhw,hwk->bk", gyin, basis)
        if affine.ndim != 3:
            ga = ga.sum(axis=0).reshape(affine.shape)
        return (gimg if batched else gimg[0], ga)

    return _make(out if batched else out[0], "grid_sample", (image, affine), vjp)


# -- backward pass -------------------------------------------------------------

def backward(loss):
    """Populate ``grad`` on every reachable leaf with requires_grad.

    Visits each node exactly once in reverse topological order; gradients on
    leaves accumulate, so call ``zero_grad`` between passes.
    """
    if loss.shape != ():
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p._needs_tape():
                continue
            if pg.shape != p.shape:
                pg = pg.reshape(p.shape)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


# -- seeded RNG ----------------------------------------------------------------

class Rng:
    """Counter-based (Philox) random stream; identical seed gives the identical
    stream on every platform."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape=(), dtype=DEFAULT_DTYPE):
        return self._gen.standard_normal(shape).astype(dtype, copy=False)

    def uniform(self, low, high, shape=(), dtype=DEFAULT_DTYPE):
        return self._gen.uniform(low, high, shape).astype(dtype, copy=False)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def shuffle(self, seq):
        self._gen.shuffle(seq)

    def spawn(self, key):
        """Derive an independent stream from (seed, key); deterministic."""
        return Rng(np.random.SeedSequence([self.seed, int(key)]).generate_state(1)[0])

    def get_state(self):
        """JSON-serializable snapshot of the stream position."""
        state = self._gen.bit_generator.state
        return json.loads(json.dumps(state, default=lambda o: o.tolist()))

    def set_state(self, state):
        current = self._gen.bit_generator.state
        restored = dict(state)
        restored["state"] = {
            k: (np.array(v, dtype=np.uint64) if isinstance(v, list) else v)
            for k, v in state["state"].items()}
        if "buffer" in restored:
            restored["buffer"] = np.array(restored["buffer"], dtype=np.uint64)
        self._gen.bit_generator.state = restored
