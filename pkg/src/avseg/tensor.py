"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a backward rule on a per-forward graph (the tape).
Calling ``backward`` on a scalar output walks that graph once in reverse
topological order and accumulates gradients additively into the ``grad``
buffers of all leaves created with ``requires_grad=True``. A graph can be
walked only once; a new forward pass builds a new graph.

All data is 64-bit, row-major numpy. There is no GPU path and no fusion
beyond expressing convolution as patch-unfolding plus a matrix product.
"""

from __future__ import annotations

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """n-dimensional float64 array with an optional gradient buffer.

    ``data`` is always a numpy float64 array. ``grad`` is ``None`` until a
    backward pass deposits into it; it then has the same shape as ``data``
    and accumulates across backward passes until ``zero_grad`` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        """Reverse-walk the graph rooted here, accumulating leaf gradients.

        The loss must be a single element. Each graph supports exactly one
        backward pass; a second call on any tensor of a consumed graph is an
        error because intermediate buffers are not retained for replay.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if self._spent:
            raise RuntimeError("backward() already ran for this graph; run a new forward pass")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            node._spent = True
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # leaf: persistent additive accumulation
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is not None:
                for parent, contrib in node._backward(g):
                    prev = flowing.get(id(parent))
                    flowing[id(parent)] = contrib if prev is None else prev + contrib

    # -- operator sugar (thin wrappers over the module-level ops) --

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    """Build an op output; the graph is recorded only when a parent needs it."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over dimensions that broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules apply)
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))
    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))
    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape)))
    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return ((a, _unbroadcast(g / b.data, a.data.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))
    return _make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return ((a, -g),)
    return _make(-a.data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward(g):
        return ((a, g * mask),)
    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, evaluated in the overflow-free branch form."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return ((a, g * out * (1.0 - out)),)
    return _make(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    """Exponential; finite only for inputs below the float64 overflow bound."""
    out = np.exp(a.data)

    def backward(g):
        return ((a, g * out),)
    return _make(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    """Natural log with inputs floored at LOG_FLOOR; zero gradient in the floor."""
    clipped = np.maximum(a.data, LOG_FLOOR)
    mask = a.data > LOG_FLOOR

    def backward(g):
        return ((a, g * mask / clipped),)
    return _make(np.log(clipped), (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was interior."""
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        return ((a, g * mask),)
    return _make(np.clip(a.data, lo, hi), (a,), backward)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return ((a, g.reshape(a.data.shape)),)
    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return ((a, g.transpose(inverse)),)
    return _make(a.data.transpose(axes), (a,), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)),)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (repeats accumulate)."""
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return ((a, da),)
    return _make(a.data[idx], (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            shape = [1 if i in axes else n for i, n in enumerate(a.data.shape)]
            g = g.reshape(shape)
        return ((a, np.broadcast_to(g, a.data.shape).copy()),)
    return _make(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    return mul(tsum(a, axis=axes, keepdims=keepdims), Tensor(1.0 / count))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along one axis, shift-stabilized by the (constant) row max."""
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul needs (m,k)x(k,n), got {a.data.shape} x {b.data.shape}")

    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))
    return _make(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# spatial operations: all take (T, h, w, C) activations
# ---------------------------------------------------------------------------

def _conv_out_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    # floor convention: a stride-2 3x3 conv with padding 1 halves even sizes
    span = n + 2 * padding - dilation * (k - 1) - 1
    if span < 0:
        raise ShapeError(
            f"conv window does not fit: input {n}, kernel {k}, "
            f"stride {stride}, dilation {dilation}, padding {padding}")
    return span // stride + 1


def unfold(a: Tensor, kh: int, kw: int, stride: int, dilation: int, padding: int) -> Tensor:
    """Extract sliding patches into rows: (T,h,w,C) -> (T*h2*w2, kh*kw*C).

    One slice copy per kernel offset keeps both directions vectorized; the
    backward pass scatter-adds each offset's slice back into the padded input.
    """
    t, h, w, c = a.data.shape
    h2 = _conv_out_size(h, kh, stride, dilation, padding)
    w2 = _conv_out_size(w, kw, stride, dilation, padding)

    xp = np.pad(a.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((t, h2, w2, kh, kw, c), dtype=np.float64)
    for ki in range(kh):
        i0 = ki * dilation
        for kj in range(kw):
            j0 = kj * dilation
            cols[:, :, :, ki, kj, :] = xp[:, i0:i0 + h2 * stride:stride,
                                          j0:j0 + w2 * stride:stride, :]

    def backward(g):
        gc = g.reshape(t, h2, w2, kh, kw, c)
        dxp = np.zeros_like(xp)
        for ki in range(kh):
            i0 = ki * dilation
            for kj in range(kw):
                j0 = kj * dilation
                dxp[:, i0:i0 + h2 * stride:stride,
                    j0:j0 + w2 * stride:stride, :] += gc[:, :, :, ki, kj, :]
        if padding:
            dxp = dxp[:, padding:h + padding, padding:w + padding, :]
        return ((a, dxp),)

    return _make(cols.reshape(t * h2 * w2, kh * kw * c), (a,), backward)


def conv2d(a: Tensor, weight: Tensor, bias: Tensor,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding over (T, h, w, Cin) inputs.

    Weight layout is (kh, kw, Cin, Cout); kernels must be odd-sized. The
    computation is unfold + matmul, so the matrix-product backward rule
    carries the convolution gradients.
    """
    if a.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d needs 4-d input and weight, got {a.data.shape} and {weight.data.shape}")
    t, h, w, cin = a.data.shape
    kh, kw, wcin, cout = weight.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel dims must be odd, got ({kh}, {kw})")
    if wcin != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input {a.data.shape} vs weight {weight.data.shape}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.data.shape}")
    h2 = _conv_out_size(h, kh, stride, dilation, padding)
    w2 = _conv_out_size(w, kw, stride, dilation, padding)

    cols = unfold(a, kh, kw, stride, dilation, padding)
    flat = add(matmul(cols, reshape(weight, (kh * kw * cin, cout))), bias)
    return reshape(flat, (t, h2, w2, cout))


def avg_pool2d(a: Tensor, kh: int, kw: int) -> Tensor:
    """Mean over non-overlapping kh x kw windows of a (T, h, w, C) tensor."""
    if a.data.ndim != 4:
        raise ShapeError(f"avg_pool2d needs a 4-d input, got {a.data.shape}")
    t, h, w, c = a.data.shape
    if h % kh != 0 or w % kw != 0:
        raise ShapeError(
            f"avg_pool2d window ({kh}, {kw}) must divide spatial dims of {a.data.shape}")
    windows = reshape(a, (t, h // kh, kh, w // kw, kw, c))
    return tmean(windows, axis=(2, 4))


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic 1-d interpolation matrix with half-pixel center alignment."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear(a: Tensor, factor: int) -> Tensor:
    """Scale the spatial dims of a (T, h, w, C) tensor by an integer factor."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if a.data.ndim != 4:
        raise ShapeError(f"upsample_bilinear needs a 4-d input, got {a.data.shape}")
    if factor == 1:
        return reshape(a, a.data.shape)
    t, h, w, c = a.data.shape
    rh = _interp_matrix(h * factor, h)
    rw = _interp_matrix(w * factor, w)

    out = np.einsum("ai,tiwc->tawc", rh, a.data)
    out = np.einsum("bj,tajc->tabc", rw, out)

    def backward(g):
        da = np.einsum("bj,tabc->tajc", rw, g)
        da = np.einsum("ai,tawc->tiwc", rh, da)
        return ((a, da),)
    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(f, inputs, epsilon: float = 1e-5) -> float:
    """Compare analytic gradients of ``f(*inputs)`` with central differences.

    Returns the max over all coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``. ``f`` must build a scalar
    from the given tensors; any tensors it closes over are held fixed.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    inputs = list(inputs)
    for x in inputs:
        x.requires_grad = True
        x.zero_grad()

    out = f(*inputs)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued tensor function")
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    worst = 0.0
    for x, ga in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        gflat = ga.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            hi = f(*inputs).item()
            flat[j] = orig - epsilon
            lo = f(*inputs).item()
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            err = abs(gflat[j] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
