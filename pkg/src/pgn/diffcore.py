"""Small reverse-mode autodiff library on top of numpy.

Every value is a :class:`Tensor` holding a contiguous float32 array.  Ops
record their parents and a closure that maps the output gradient to input
gradients; :func:`backward` replays those closures in reverse topological
order.  Tensors that do not require a gradient (constants, frozen
parameters) are never recorded, so frozen weights cannot appear in the
gradient registry while gradients still flow *through* them into inputs.
"""

import contextlib

import numpy as np

from pgn import _kernels

DTYPE = np.float32


class ShapeError(ValueError):
    """Incompatible tensor dimensions."""


class ContractError(ValueError):
    """An op was called outside its contract (e.g. non-scalar loss)."""


class ConfigError(ValueError):
    """Invalid optimizer or layer configuration."""


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the working float type (used by float64 gradient oracles)."""
    global DTYPE
    saved, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = saved


def make_rng(seed):
    """Seeded counter-based generator (Philox, 64-bit counter)."""
    return np.random.Generator(np.random.Philox(int(seed)))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        return backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __neg__ = lambda a: mul(a, -1.0)
    __matmul__ = lambda a, b: matmul(a, b)


class Parameter(Tensor):
    """Trainable tensor with its gradient buffer and Adam moments."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name=None, trainable=True):
        super().__init__(data, requires_grad=trainable, name=name)
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def trainable(self):
        return self.requires_grad

    def zero_grad(self):
        self.grad.fill(0.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    """Build an op output; record the closure only if a parent needs grads."""
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(x):
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def absolute(x):
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def log(x):
    if np.any(x.data <= 0):
        raise ContractError("log: input must be strictly positive")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


_SIG_LO = np.float32(np.finfo(np.float32).tiny)
_SIG_HI = np.nextafter(np.float32(1.0), np.float32(0.0))


def sigmoid(x):
    # computed in float64 and pinned inside the open interval so that
    # log(o) and log(1 - o) stay finite downstream
    z = x.data.astype(np.float64)
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = np.clip(s.astype(DTYPE), _SIG_LO, _SIG_HI)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- reductions


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    total = x.data.sum(axis=axis, dtype=np.float64).astype(DTYPE)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(DTYPE),)

    return _make(total, (x,), bw)


def mean(x, axis=None):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis), 1.0 / float(count))


def reshape(x, shape):
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from None
    return _make(data, (x,), lambda g: (g.reshape(old),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dense(x, weight, bias):
    """``x @ weight + bias`` with weight laid out (in_features, out_features)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data + bias.data

    def bw(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(out, (x, weight, bias), bw)


# ---------------------------------------------------------------- convolution


def _out_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0:
        return None
    return span // stride + 1


def conv2d(x, weight, bias, stride=1, padding=0):
    """Cross-correlation, NCHW input, weight (O, I, KH, KW)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {i}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    oh, ow = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if oh is None or ow is None:
        raise ShapeError(
            f"conv2d: spatial size {h}x{w} too small for kernel {kh}x{kw} with padding {padding}"
        )
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _kernels.im2col(xp, kh, kw, stride, oh, ow).reshape(c * kh * kw, n * oh * ow)
    wmat = weight.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3) + bias.data.reshape(1, o, 1, 1)

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, n * oh * ow)
        gw = (gmat @ cols.T).reshape(weight.shape)
        gb = gmat.sum(axis=1)
        gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, oh, ow)
        gx = _kernels.col2im(gcols, h + 2 * p, w + 2 * p, stride)
        return gx[:, :, p : p + h, p : p + w].transpose(1, 0, 2, 3), gw, gb

    return _make(out, (x, weight, bias), bw)


def conv_transpose2d(x, weight, bias, stride=1, padding=0):
    """Transposed convolution, weight (I, O, KH, KW): the adjoint of conv2d."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv_transpose2d: expected 4-d input and weight, got {x.shape} and {weight.shape}"
        )
    n, c, h, w = x.shape
    i, o, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv_transpose2d: input has {c} channels but weight expects {i}")
    if bias.shape != (o,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({o},)")
    p = padding
    hout = (h - 1) * stride - 2 * p + kh
    wout = (w - 1) * stride - 2 * p + kw
    if hout <= 0 or wout <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output size {hout}x{wout}")
    hp, wp = hout + 2 * p, wout + 2 * p
    xmat = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    wmat = weight.data.reshape(c, o * kh * kw)
    cols = (wmat.T @ xmat).reshape(o, kh, kw, n, h, w)
    full = _kernels.col2im(cols, hp, wp, stride)
    out = full[:, :, p : p + hout, p : p + wout].transpose(1, 0, 2, 3) + bias.data.reshape(1, o, 1, 1)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols = _kernels.im2col(gp, kh, kw, stride, h, w).reshape(o * kh * kw, n * h * w)
        gx = (wmat @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        gw = (xmat @ gcols.T).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw)


def avg_pool2d(x, kernel, stride=None):
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = _out_size(h, kernel, stride, 0), _out_size(w, kernel, stride, 0)
    if oh is None or ow is None:
        raise ShapeError(f"avg_pool2d: {h}x{w} smaller than the {kernel}x{kernel} window")
    cols = _kernels.im2col(x.data, kernel, kernel, stride, oh, ow)
    out = cols.reshape(c, kernel * kernel, n, oh, ow).mean(axis=1).transpose(1, 0, 2, 3)
    scale = 1.0 / (kernel * kernel)

    def bw(g):
        gt = (g.transpose(1, 0, 2, 3) * scale).astype(DTYPE)
        gcols = np.ascontiguousarray(np.broadcast_to(gt[:, None, None], (c, kernel, kernel, n, oh, ow)))
        return (_kernels.col2im(gcols, h, w, stride).transpose(1, 0, 2, 3),)

    return _make(out, (x,), bw)


def global_avg_pool(x):
    """NCHW -> NC, mean over spatial positions."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(DTYPE)
    scale = 1.0 / (h * w)
    return _make(
        out,
        (x,),
        lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(DTYPE),),
    )


# ---------------------------------------------------------------- softmax family


def _log_softmax(z):
    z = z.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(x):
    if x.ndim != 2:
        raise ShapeError(f"softmax: expected (N, K) input, got {x.shape}")
    s = np.exp(_log_softmax(x.data)).astype(DTYPE)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), bw)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    lsm = _log_softmax(logits.data)
    idx = np.arange(n)
    loss = -lsm[idx, labels].sum() / n

    def bw(g):
        p = np.exp(lsm)
        p[idx, labels] -= 1.0
        return ((p * (float(g) / n)).astype(DTYPE),)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), bw)


# ---------------------------------------------------------------- backward


def topological_order(root):
    """Nodes reachable from ``root`` that require gradients, parents first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Backpropagate from a scalar ``loss``.

    Gradients accumulate into ``Parameter.grad`` (call ``zero_grad`` between
    steps) and are assigned to ``.grad`` of any other leaf tensor that
    requires them.  Returns the list of parameters that received a gradient.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    order = topological_order(loss)
    grads = {id(loss): np.ones((), dtype=DTYPE)}
    registry = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if isinstance(node, Parameter):
                node.grad += g
                registry.append(node)
            else:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return registry


# ---------------------------------------------------------------- Adam


def adam_step(params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update on every trainable parameter."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for p in params:
        if not p.trainable:
            continue
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.adam_m = (beta1 * p.adam_m + (1.0 - beta1) * g).astype(DTYPE)
        p.adam_v = (beta2 * p.adam_v + (1.0 - beta2) * g * g).astype(DTYPE)
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(DTYPE)


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------- layers


def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Layer:
    def parameters(self):
        return []

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, rng=None, zero_init=False):
        shape = (out_ch, in_ch, kernel, kernel)
        w = np.zeros(shape, DTYPE) if zero_init else he_uniform(rng, shape, in_ch * kernel * kernel)
        self.weight = Parameter(w, name="weight")
        self.bias = Parameter(np.zeros(out_ch, DTYPE), name="bias")
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [self.weight, self.bias]


class ConvTranspose2d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, rng=None, zero_init=False):
        shape = (in_ch, out_ch, kernel, kernel)
        # each output pixel sees roughly in_ch * k^2 / s^2 inputs
        fan_in = max(1.0, in_ch * kernel * kernel / (stride * stride))
        w = np.zeros(shape, DTYPE) if zero_init else he_uniform(rng, shape, fan_in)
        self.weight = Parameter(w, name="weight")
        self.bias = Parameter(np.zeros(out_ch, DTYPE), name="bias")
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [self.weight, self.bias]


class Dense(Layer):
    def __init__(self, in_features, out_features, rng=None, zero_init=False):
        shape = (in_features, out_features)
        w = np.zeros(shape, DTYPE) if zero_init else he_uniform(rng, shape, in_features)
        self.weight = Parameter(w, name="weight")
        self.bias = Parameter(np.zeros(out_features, DTYPE), name="bias")

    def forward(self, x):
        return dense(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class ReLU(Layer):
    def forward(self, x):
        return relu(x)


class Sigmoid(Layer):
    def forward(self, x):
        return sigmoid(x)


class AvgPool2d(Layer):
    def __init__(self, kernel, stride=None):
        self.kernel, self.stride = kernel, stride or kernel

    def forward(self, x):
        return avg_pool2d(x, self.kernel, self.stride)


class GlobalAvgPool(Layer):
    def forward(self, x):
        return global_avg_pool(x)


class Flatten(Layer):
    def forward(self, x):
        return flatten(x)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]
