"""
Reverse-mode automatic differentiation over NumPy arrays.

A DiffTensor stores a float64 array, the parents it was computed from and a
closure mapping the upstream gradient to one gradient per parent. Calling
``backward`` on a scalar walks the graph in reverse topological order,
accumulates gradients into every node that requires them and then releases
the intermediate nodes so that nothing survives the step except leaf grads.

Complex values use a real-composite representation: a ComplexTensor is a pair
of real DiffTensors and every complex operation is written with real
arithmetic, so the real-valued reverse mode stays correct for real losses of
complex intermediates.
"""

import numpy as np

from utils.errors import ShapeError


class DiffTensor:
    """N-dimensional float64 array participating in reverse-mode differentiation"""

    __slots__ = ('data', 'grad', 'requires_grad', '_backward', '_prev', '_op', '__weakref__')

    # keep numpy from broadcasting ndarray <op> DiffTensor into object arrays
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()
        self._op = ''

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return DiffTensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, axis1, axis2):
        return swapaxes(self, axis1, axis2)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(value):
    if isinstance(value, DiffTensor):
        return value
    return DiffTensor(value)


def parameter(value):
    """Create a leaf tensor that collects gradients."""
    return DiffTensor(np.array(value, dtype=np.float64), requires_grad=True)


def _result(data, parents, op, backward_fn):
    requires_grad = any(p.requires_grad for p in parents)
    out = DiffTensor(data, requires_grad=requires_grad)
    if requires_grad:
        out._prev = parents
        out._op = op
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis, ndim):
    axes = axis if isinstance(axis, (tuple, list)) else (axis,)
    return tuple(sorted(a % ndim for a in axes))


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), 'add', backward_fn)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), 'sub', backward_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), 'mul', backward_fn)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), 'div', backward_fn)


def neg(x):
    x = as_tensor(x)
    return _result(-x.data, (x,), 'neg', lambda g: (-g,))


def power(x, exponent):
    x = as_tensor(x)
    if not np.isscalar(exponent):
        raise ShapeError("power only supports scalar exponents")

    def backward_fn(g):
        return (g * exponent * np.power(x.data, exponent - 1),)

    return _result(np.power(x.data, exponent), (x,), f'pow{exponent}', backward_fn)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), 'exp', lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), 'log', lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _result(out, (x,), 'sqrt', lambda g: (0.5 * g / out,))


def relu(x):
    x = as_tensor(x)
    return _result(np.maximum(x.data, 0.0), (x,), 'relu', lambda g: (g * (x.data > 0),))


def sigmoid(x):
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _result(out, (x,), 'sigmoid', lambda g: (g * out * (1.0 - out),))


def clamp_min(x, floor):
    """max(x, floor) for a constant floor; no gradient where the floor is active."""
    x = as_tensor(x)
    return _result(np.maximum(x.data, floor), (x,), 'clamp_min', lambda g: (g * (x.data > floor),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation

def tensor_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, _normalize_axes(axis, x.ndim))
        return (np.broadcast_to(g, x.shape),)

    return _result(data, (x,), 'sum', backward_fn)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        count = int(np.prod([x.shape[a] for a in _normalize_axes(axis, x.ndim)]))
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), 'reshape', lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), 'transpose', lambda g: (np.transpose(g, inverse),))


def swapaxes(x, axis1, axis2):
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, axis1, axis2), (x,), 'swapaxes',
                   lambda g: (np.swapaxes(g, axis1, axis2),))


def expand_dims(x, axis):
    x = as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer, type(None), type(Ellipsis))) for i in items)


def getitem(x, index):
    x = as_tensor(x)
    basic = _is_basic_index(index)

    def backward_fn(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), 'getitem', backward_fn)


def concatenate(tensors, axis=0):
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, 'concatenate', backward_fn)


def stack(tensors, axis=0):
    return concatenate([expand_dims(t, axis) for t in tensors], axis=axis)


def pad(x, pad_width):
    """Zero-pad; ``pad_width`` follows numpy.pad (one (before, after) pair per axis)."""
    x = as_tensor(x)
    pad_width = tuple(tuple(int(v) for v in pair) for pair in pad_width)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))
    return _result(np.pad(x.data, pad_width), (x,), 'pad', lambda g: (g[crop],))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects operands with at least 2 dims, got {a.shape} and {b.shape}")

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), 'matmul', backward_fn)


def inv(x):
    """Batched matrix inverse; d(A^-1) = -A^-1 dA A^-1."""
    x = as_tensor(x)
    out = np.linalg.inv(x.data)

    def backward_fn(g):
        out_t = np.swapaxes(out, -1, -2)
        return (-(out_t @ g @ out_t),)

    return _result(out, (x,), 'inv', backward_fn)


# ---------------------------------------------------------------------------
# convolutions

def conv1d(x, weight, stride=1, dilation=1, padding=(0, 0), groups=1):
    """
    1-D convolution (cross-correlation) over [batch, channels, time] input.

    Args:
        x: input [B, C_in, T]
        weight: [C_out, C_in, K] for groups=1, [C_in, 1, K] for depthwise (groups=C_in)
        stride, dilation: positive integers
        padding: (left, right) zero padding in samples
        groups: 1 or C_in

    Returns:
        DiffTensor [B, C_out, T_out]
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input and weight, got {x.shape} and {weight.shape}")
    batch, channels, length = x.shape
    depthwise = groups != 1
    if depthwise and (groups != channels or weight.shape[:2] != (channels, 1)):
        raise ShapeError(f"depthwise conv1d needs weight [{channels}, 1, K], got {weight.shape}")
    if not depthwise and weight.shape[1] != channels:
        raise ShapeError(f"conv1d weight expects {weight.shape[1]} input channels, got {channels}")

    left, right = padding
    kernel = weight.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    out_len = (xp.shape[2] - dilation * (kernel - 1) - 1) // stride + 1
    if out_len <= 0:
        raise ShapeError(f"conv1d input of length {length} too short for kernel {kernel}")
    taps = [slice(k * dilation, k * dilation + stride * (out_len - 1) + 1, stride) for k in range(kernel)]
    w = weight.data

    if depthwise:
        out = sum(w[:, 0, k][None, :, None] * xp[:, :, taps[k]] for k in range(kernel))
    else:
        out = sum(w[:, :, k] @ xp[:, :, taps[k]] for k in range(kernel))

    def backward_fn(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w)
        for k in range(kernel):
            xk = xp[:, :, taps[k]]
            if depthwise:
                gw[:, 0, k] = np.sum(g * xk, axis=(0, 2))
                if gx is not None:
                    gx[:, :, taps[k]] += w[:, 0, k][None, :, None] * g
            else:
                gw[:, :, k] = np.sum(g @ np.swapaxes(xk, 1, 2), axis=0)
                if gx is not None:
                    gx[:, :, taps[k]] += w[:, :, k].T @ g
        if gx is not None:
            gx = gx[:, :, left:left + length]
        return gx, gw

    return _result(out, (x, weight), 'conv1d', backward_fn)


def conv_transpose1d(x, weight, stride):
    """
    Transposed 1-D convolution used as a learned overlap-add decoder.

    x is [B, C_in, F], weight is [C_in, C_out, K]; the output is
    [B, C_out, (F - 1) * stride + K].
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or weight.shape[0] != x.shape[1]:
        raise ShapeError(f"conv_transpose1d shape mismatch: input {x.shape}, weight {weight.shape}")
    batch, _, frames = x.shape
    kernel = weight.shape[2]
    length = (frames - 1) * stride + kernel
    taps = [slice(k, k + stride * (frames - 1) + 1, stride) for k in range(kernel)]
    w = weight.data
    out = np.zeros((batch, w.shape[1], length))
    for k in range(kernel):
        out[:, :, taps[k]] += w[:, :, k].T @ x.data

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w)
        for k in range(kernel):
            gk = g[:, :, taps[k]]
            gx += w[:, :, k] @ gk
            gw[:, :, k] = np.sum(x.data @ np.swapaxes(gk, 1, 2), axis=0)
        return gx, gw

    return _result(out, (x, weight), 'conv_transpose1d', backward_fn)


# ---------------------------------------------------------------------------
# framing and Fourier transforms

def frame_array(x, frame_length, hop):
    """Slice the last axis into overlapping frames: [..., P] -> [..., F, L]."""
    num_frames = (x.shape[-1] - frame_length) // hop + 1
    index = hop * np.arange(num_frames)[:, None] + np.arange(frame_length)[None, :]
    return x[..., index]


def overlap_add_array(frames, hop, length=None):
    """Inverse of frame_array up to window weighting: [..., F, L] -> [..., P]."""
    num_frames, frame_length = frames.shape[-2:]
    total = (num_frames - 1) * hop + frame_length
    out = np.zeros(frames.shape[:-2] + (max(total, length or 0),))
    for t in range(num_frames):
        out[..., t * hop:t * hop + frame_length] += frames[..., t, :]
    if length is not None:
        out = out[..., :length]
    return out


def frame(x, frame_length, hop):
    x = as_tensor(x)
    length = x.shape[-1]
    if length < frame_length:
        raise ShapeError(f"cannot frame {length} samples with frame length {frame_length}")
    return _result(frame_array(x.data, frame_length, hop), (x,), 'frame',
                   lambda g: (overlap_add_array(g, hop, length),))


def overlap_add(frames, hop):
    frames = as_tensor(frames)
    frame_length = frames.shape[-1]
    return _result(overlap_add_array(frames.data, hop), (frames,), 'overlap_add',
                   lambda g: (frame_array(g, frame_length, hop),))


def bin_weights(n):
    """Multiplicity of each one-sided bin in the full spectrum."""
    weights = np.full(n // 2 + 1, 2.0)
    weights[0] = 1.0
    if n % 2 == 0:
        weights[-1] = 1.0
    return weights


def rfft(x):
    """One-sided DFT over the last axis, returned as a ComplexTensor."""
    x = as_tensor(x)
    n = x.shape[-1]
    spectrum = np.fft.rfft(x.data, axis=-1)
    weights = bin_weights(n)

    def backward_re(g):
        return (n * np.fft.irfft(g / weights, n=n, axis=-1),)

    def backward_im(g):
        return (n * np.fft.irfft(1j * g / weights, n=n, axis=-1),)

    re = _result(np.ascontiguousarray(spectrum.real), (x,), 'rfft.re', backward_re)
    im = _result(np.ascontiguousarray(spectrum.imag), (x,), 'rfft.im', backward_im)
    return ComplexTensor(re, im)


def irfft(spectrum, n):
    """Inverse of rfft for a Hermitian-symmetric full spectrum of length n."""
    re, im = spectrum.re, spectrum.im
    if re.shape[-1] != n // 2 + 1:
        raise ShapeError(f"irfft of length {n} needs {n // 2 + 1} bins, got {re.shape[-1]}")
    scale = bin_weights(n) / n

    def backward_fn(g):
        grad = np.fft.rfft(g, axis=-1) * scale
        return np.ascontiguousarray(grad.real), np.ascontiguousarray(grad.imag)

    data = np.fft.irfft(re.data + 1j * im.data, n=n, axis=-1)
    return _result(data, (re, im), 'irfft', backward_fn)


# ---------------------------------------------------------------------------
# complex values as (real, imaginary) pairs

class ComplexTensor:
    """Complex array stored as two real DiffTensors."""

    __slots__ = ('re', 'im')

    def __init__(self, re, im):
        self.re = as_tensor(re)
        self.im = as_tensor(im)
        if self.re.shape != self.im.shape:
            raise ShapeError(f"real part {self.re.shape} and imaginary part {self.im.shape} differ")

    @classmethod
    def from_numpy(cls, values, requires_grad=False):
        values = np.asarray(values, dtype=np.complex128)
        return cls(DiffTensor(values.real.copy(), requires_grad), DiffTensor(values.imag.copy(), requires_grad))

    def __repr__(self):
        return f"ComplexTensor(shape={self.shape})"

    @property
    def shape(self):
        return self.re.shape

    @property
    def ndim(self):
        return self.re.ndim

    @property
    def requires_grad(self):
        return self.re.requires_grad or self.im.requires_grad

    def numpy(self):
        return self.re.data + 1j * self.im.data

    def detach(self):
        return ComplexTensor(self.re.detach(), self.im.detach())

    @staticmethod
    def _coerce(other):
        if isinstance(other, ComplexTensor):
            return other
        if isinstance(other, np.ndarray) and np.iscomplexobj(other):
            return ComplexTensor.from_numpy(other)
        if isinstance(other, complex):
            return ComplexTensor(DiffTensor(other.real), DiffTensor(other.imag))
        return None

    def __add__(self, other):
        z = self._coerce(other)
        if z is None:
            return ComplexTensor(self.re + other, self.im)
        return ComplexTensor(self.re + z.re, self.im + z.im)

    __radd__ = __add__

    def __sub__(self, other):
        z = self._coerce(other)
        if z is None:
            return ComplexTensor(self.re - other, self.im)
        return ComplexTensor(self.re - z.re, self.im - z.im)

    def __neg__(self):
        return ComplexTensor(-self.re, -self.im)

    def __mul__(self, other):
        z = self._coerce(other)
        if z is None:
            return ComplexTensor(self.re * other, self.im * other)
        return ComplexTensor(self.re * z.re - self.im * z.im, self.re * z.im + self.im * z.re)

    __rmul__ = __mul__

    def __truediv__(self, other):
        z = self._coerce(other)
        if z is None:
            return ComplexTensor(self.re / other, self.im / other)
        denominator = z.abs2()
        return ComplexTensor((self.re * z.re + self.im * z.im) / denominator,
                             (self.im * z.re - self.re * z.im) / denominator)

    def __matmul__(self, other):
        z = self._coerce(other)
        return ComplexTensor(self.re @ z.re - self.im @ z.im, self.re @ z.im + self.im @ z.re)

    def __getitem__(self, index):
        return ComplexTensor(self.re[index], self.im[index])

    def conj(self):
        return ComplexTensor(self.re, -self.im)

    def abs2(self):
        return self.re * self.re + self.im * self.im

    def transpose(self, *axes):
        return ComplexTensor(self.re.transpose(*axes), self.im.transpose(*axes))

    def swapaxes(self, axis1, axis2):
        return ComplexTensor(self.re.swapaxes(axis1, axis2), self.im.swapaxes(axis1, axis2))

    def reshape(self, *shape):
        return ComplexTensor(self.re.reshape(*shape), self.im.reshape(*shape))

    def sum(self, axis=None, keepdims=False):
        return ComplexTensor(self.re.sum(axis, keepdims), self.im.sum(axis, keepdims))

    def hermitian(self):
        """Conjugate transpose of the last two axes."""
        return self.conj().swapaxes(-1, -2)

    def trace(self):
        eye = np.eye(self.shape[-1])
        return ComplexTensor((self.re * eye).sum(axis=(-2, -1)), (self.im * eye).sum(axis=(-2, -1)))


def complex_inv(matrix):
    """
    Batched complex inverse through the real embedding [[Ar, -Ai], [Ai, Ar]].

    The inverse of the embedding is the embedding of the inverse, so the real
    and imaginary parts of A^-1 are read from its left block column.
    """
    size = matrix.shape[-1]
    top = concatenate([matrix.re, -matrix.im], axis=-1)
    bottom = concatenate([matrix.im, matrix.re], axis=-1)
    embedded_inverse = inv(concatenate([top, bottom], axis=-2))
    return ComplexTensor(embedded_inverse[..., :size, :size], embedded_inverse[..., size:, :size])


# ---------------------------------------------------------------------------
# reverse pass

def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """
    Accumulate d(loss)/d(node) into ``grad`` of every leaf reachable from loss.

    Intermediate nodes are released afterwards: their gradients, closures and
    parent links are dropped so the graph can be garbage collected.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, grad in zip(node._prev, grads):
            if grad is None or not parent.requires_grad:
                continue
            parent.grad = grad if parent.grad is None else parent.grad + grad
    for node in order:
        if node._backward is not None:
            node.grad = None
            node._backward = None
            node._prev = ()
