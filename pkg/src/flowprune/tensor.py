"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations record themselves on an explicit gradient tape; a single
reverse sweep over the tape populates ``.grad`` on every tensor that
requires gradients.  Everything runs in double precision so that
finite-difference checks are meaningful.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class ConfigError(ValueError):
    """An operation was configured with impossible hyperparameters."""


class NumericalError(RuntimeError):
    """A non-finite value appeared during training."""


class Tensor:
    """N-dimensional float64 array, optionally tracking a gradient.

    Layout conventions: 4-D tensors are (batch, channels, height, width),
    2-D tensors are (batch, features).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        # grad buffers are allocated lazily on first accumulation
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


def param(data, name=None):
    """Create a trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


class Node:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of operations for one forward pass.

    Creation order is a topological order by construction, so the
    backward sweep simply walks the node list in reverse, visiting each
    node exactly once.  Accumulation order is therefore fixed, which
    keeps repeated runs bit-identical.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._stack.pop()
        return False

    @staticmethod
    def active():
        return Tape._stack[-1] if Tape._stack else None


def _record(op, inputs, out_data, backward_fn):
    """Wrap ``out_data`` in a Tensor; record the op if a tape is active."""
    tape = Tape.active()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._tape = tape
        tape.nodes.append(Node(op, inputs, out, backward_fn))
    return out


def backward(loss, release=False):
    """Reverse sweep from a scalar loss, accumulating ``.grad`` everywhere.

    With ``release=True`` the tape is consumed: each node's closure and
    intermediate gradient buffer are dropped as soon as they have been
    used, so activation memory is freed during the sweep. The tape cannot
    be swept again afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ConfigError("loss was not produced on an active tape")
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad[...] = 1.0
    stop = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].out is loss:
            stop = i
            break
    if stop is None:
        raise ConfigError("loss does not belong to its recorded tape")
    for i in range(stop, -1, -1):
        node = tape.nodes[i]
        g = node.out.grad
        if g is not None:
            node.backward_fn(g)
        if release:
            node.out.grad = None
            tape.nodes[i] = None
    if release:
        del tape.nodes[stop + 1 :]


def _accum(t, g, own=False):
    """Add ``g`` into ``t.grad``, allocating on first touch.

    ``own=True`` promises ``g`` is a fresh array used nowhere else, so it
    can be adopted directly instead of copied.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else np.array(g, dtype=np.float64)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _record("add", (a, b), a.data + b.data, back)


def sub(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")

    def back(g):
        _accum(a, g)
        _accum(b, -g, own=True)

    return _record("sub", (a, b), a.data - b.data, back)


def scale(a, c):
    c = float(c)

    def back(g):
        _accum(a, c * g, own=True)

    return _record("scale", (a,), c * a.data, back)


def relu(a):
    mask = a.data > 0

    def back(g):
        _accum(a, g * mask, own=True)

    return _record("relu", (a,), np.maximum(a.data, 0.0), back)


def l1_norm(a):
    """Sum of absolute values, reduced to a scalar. Subgradient at 0 is 0."""
    sign = np.sign(a.data)

    def back(g):
        _accum(a, float(g) * sign, own=True)

    return _record("l1_norm", (a,), np.abs(a.data).sum(), back)


def mse(pred, target):
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size

    def back(g):
        d = (2.0 * float(g) / n) * diff
        nd = -d
        _accum(pred, d, own=True)
        _accum(target, nd, own=True)

    return _record("mse", (pred, target), (diff * diff).mean(), back)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of logits [B,K] against integer labels [B]."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    b = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = np.log(ez.sum(axis=1)) - z[np.arange(b), labels]

    def back(g):
        d = probs.copy()
        d[np.arange(b), labels] -= 1.0
        _accum(logits, (float(g) / b) * d, own=True)

    return _record("softmax_cross_entropy", (logits,), nll.mean(), back)


# ---------------------------------------------------------------------------
# shape ops

def flatten(a):
    """[B, ...] -> [B, D]."""
    b = a.shape[0]
    shape = a.shape

    def back(g):
        _accum(a, g.reshape(shape))

    return _record("flatten", (a,), a.data.reshape(b, -1), back)


def global_avg_pool(a):
    """[B,C,H,W] -> [B,C] spatial mean."""
    if a.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {a.shape}")
    _, _, h, w = a.shape

    def back(g):
        _accum(a, np.broadcast_to(g[:, :, None, None] / (h * w), a.shape))

    return _record("global_avg_pool", (a,), a.data.mean(axis=(2, 3)), back)


def scatter_channels(x, positions, width):
    """Place [B,C,H,W] channels at ``positions`` in a zero tensor of
    ``width`` channels. Used to pad pruned residual branches back to the
    trunk width before the shortcut addition."""
    if x.data.ndim != 4:
        raise ShapeError(f"scatter_channels expects 4-D input, got {x.shape}")
    positions = np.asarray(positions, dtype=np.intp)
    if positions.shape != (x.shape[1],):
        raise ShapeError(
            f"scatter_channels: {len(positions)} positions for {x.shape[1]} channels"
        )
    if len(np.unique(positions)) != len(positions) or (
        len(positions) and (positions.min() < 0 or positions.max() >= width)
    ):
        raise ConfigError("scatter_channels: positions must be unique and in range")
    b, c, h, w = x.shape
    out = np.zeros((b, width, h, w))
    out[:, positions] = x.data

    def back(g):
        _accum(x, g[:, positions], own=True)

    return _record("scatter_channels", (x,), out, back)


# ---------------------------------------------------------------------------
# linear / convolution / pooling / batchnorm

def linear(x, w, bias=None):
    """Affine map: [B,D] @ [O,D]^T + [O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        _accum(x, g @ w.data, own=True)
        _accum(w, g.T @ x.data, own=True)
        if bias is not None:
            _accum(bias, g.sum(axis=0), own=True)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record("linear", inputs, out, back)


def _im2col(img, kh, kw, stride, pad):
    """Unfold [B,C,H,W] to [C·kh·kw, B·OH·OW].

    The (c, kh, kw) row order matches the natural flattening of an
    [F,C,kh,kw] weight, so a conv forward is one GEMM against this
    matrix; each window slice copies whole contiguous rows.
    """
    b, c, h, w = img.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        img = np.pad(img, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = np.empty((c, kh, kw, b, oh, ow))
    src = img.transpose(1, 0, 2, 3)
    for y in range(kh):
        ym = y + stride * oh
        for x in range(kw):
            xm = x + stride * ow
            col[:, y, x] = src[:, :, y:ym:stride, x:xm:stride]
    return col.reshape(c * kh * kw, b * oh * ow)


def _col2im(col, img_shape, kh, kw, stride, pad):
    """Fold [C·kh·kw, B·OH·OW] back onto [B,C,H,W], summing overlaps."""
    b, c, h, w = img_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    col = col.reshape(c, kh, kw, b, oh, ow)
    img = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    dst = img.transpose(1, 0, 2, 3)
    for y in range(kh):
        ym = y + stride * oh
        for x in range(kw):
            xm = x + stride * ow
            dst[:, :, y:ym:stride, x:xm:stride] += col[:, y, x]
    if pad:
        return img[:, :, pad:-pad, pad:-pad]
    return img


def _conv_out_size(h, k, stride, pad):
    # floor division: a trailing partial window is dropped, matching the
    # stride-2 convs of the residual nets on even-sized inputs
    span = h + 2 * pad - k
    if span < 0:
        raise ConfigError(
            f"conv2d: kernel {k} with padding {pad} does not fit input size {h}"
        )
    return span // stride + 1


def conv2d(x, w, bias=None, stride=1, padding=0):
    """Cross-correlation of [B,C,H,W] with filters [F,C,kh,kw]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and weight, got {x.shape}, {w.shape}")
    b, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias {bias.shape} incompatible with {f} filters")
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(wd, kw, stride, padding)

    col = _im2col(x.data, kh, kw, stride, padding)
    wm = w.data.reshape(f, -1)
    out = np.ascontiguousarray(
        (wm @ col).reshape(f, b, oh, ow).transpose(1, 0, 2, 3)
    )
    if bias is not None:
        out += bias.data[None, :, None, None]

    x_shape = x.shape

    def back(g):
        # col stays captured here; the release sweep frees it with the node
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
        if w.requires_grad:
            _accum(w, (gm @ col.T).reshape(f, c, kh, kw), own=True)
        if x.requires_grad:
            _accum(x, _col2im(wm.T @ gm, x_shape, kh, kw, stride, padding), own=True)
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)), own=True)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record("conv2d", inputs, out, back)


def maxpool2d(x, kernel, stride=None):
    """Windowed max over [B,C,H,W]; ties go to the earliest position in
    row-major window order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {x.shape}")
    stride = kernel if stride is None else stride
    b, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ConfigError(f"maxpool2d: window {kernel} larger than input {h}x{w}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1

    disjoint = stride == kernel and h % kernel == 0 and w % kernel == 0
    if disjoint:
        # non-overlapping windows: a reshape exposes them without copies
        cols = np.ascontiguousarray(
            x.data.reshape(b, c, oh, kernel, ow, kernel)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, oh, ow, kernel * kernel)
        )
    else:
        cols = np.empty((b, c, oh, ow, kernel * kernel))
        for y in range(kernel):
            for xk in range(kernel):
                cols[..., y * kernel + xk] = x.data[
                    :, :, y : y + stride * oh : stride, xk : xk + stride * ow : stride
                ]
    arg = cols.argmax(axis=-1)
    out = np.take_along_axis(cols, arg[..., None], axis=-1)[..., 0]

    def back(g):
        if not x.requires_grad:
            return
        if disjoint:
            buf = np.zeros((b, c, oh, ow, kernel * kernel))
            np.put_along_axis(buf, arg[..., None], g[..., None], axis=-1)
            gx = np.ascontiguousarray(
                buf.reshape(b, c, oh, ow, kernel, kernel)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c, h, w)
            )
        else:
            gx = np.zeros((b, c, h, w))
            bi, ci, yi, xi = np.indices((b, c, oh, ow))
            iy = arg // kernel + yi * stride
            ix = arg % kernel + xi * stride
            np.add.at(gx, (bi, ci, iy, ix), g)
        _accum(x, gx, own=True)

    return _record("maxpool2d", (x,), out, back)


class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    __slots__ = ("mean", "var")

    def __init__(self, channels):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def copy(self):
        out = RunningStats(len(self.mean))
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batchnorm2d(x, gamma, beta, stats, train, eps=1e-5, momentum=0.1):
    """Channelwise batch normalization over [B,C,H,W].

    Train mode normalizes with batch statistics and updates ``stats``
    in place (unbiased variance for the running estimate); eval mode
    normalizes with the running statistics.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine params must have shape ({c},)")
    n = b * h * w
    if train:
        if n < 2:
            raise ConfigError("batchnorm2d: train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = np.einsum("bchw,bchw->c", x.data, x.data) / n - mean * mean
        stats.mean = (1.0 - momentum) * stats.mean + momentum * mean
        stats.var = (1.0 - momentum) * stats.var + momentum * var * (n / (n - 1))
    else:
        mean = stats.mean
        var = stats.var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = x.data - mean[None, :, None, None]
    xhat *= invstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat
    out += beta.data[None, :, None, None]

    def back(g):
        _accum(gamma, np.einsum("bchw,bchw->c", g, xhat), own=True)
        _accum(beta, g.sum(axis=(0, 2, 3)), own=True)
        if not x.requires_grad:
            return
        gx = g * gamma.data[None, :, None, None]
        if train:
            s1 = gx.sum(axis=(0, 2, 3))
            s2 = np.einsum("bchw,bchw->c", gx, xhat)
            gin = xhat * (s2[None, :, None, None] / n)
            gin += (s1 / n)[None, :, None, None]
            gin -= gx
            gin *= -invstd[None, :, None, None]
        else:
            gx *= invstd[None, :, None, None]
            gin = gx
        _accum(x, gin, own=True)

    return _record("batchnorm2d", (x, gamma, beta), out, back)
