"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine: `Tensor` wraps an ndarray and records the
operations applied to it, `Tensor.backward()` walks the tape and accumulates
gradients into every tensor that requires them.  Float32 is the working
precision; every op preserves the dtype of its inputs, so running the same
graph in float64 (for finite-difference verification) needs no special path.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce `grad` back to `shape` by summing the broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()
        self._grad_owned = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    def _accumulate(self, grad):
        grad = _unbroadcast(np.asarray(grad), self.data.shape)
        if self.grad is None:
            # keep a reference on the first contribution; contributions are
            # never mutated once handed over, so copying can wait until a
            # second contribution actually arrives
            if grad.dtype == self.data.dtype:
                self.grad = grad
                self._grad_owned = False
            else:
                self.grad = grad.astype(self.data.dtype)
                self._grad_owned = True
        else:
            if not self._grad_owned:
                self.grad = self.grad + grad
                self._grad_owned = True
            else:
                self.grad += grad

    # -- basic properties ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        t = self

        def backward(g):
            t._accumulate(g.astype(t.data.dtype))

        return Tensor._make(self.data.astype(dtype), (self,), backward)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        a = self
        if not isinstance(other, Tensor):
            # python scalars stay weak so float32 graphs are not upcast
            def backward(g):
                a._accumulate(g)

            return Tensor._make(a.data + other, (a,), backward)
        b = other

        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)

        return Tensor._make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._make(-a.data, (a,), backward)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        a = self
        if not isinstance(other, Tensor):
            def backward(g):
                a._accumulate(g * other)

            return Tensor._make(a.data * other, (a,), backward)
        b = other

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

        return Tensor._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Tensor):
            return self * (1.0 / other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(g / b.data)
            if b.requires_grad:
                b._accumulate(-g * a.data / (b.data * b.data))

        return Tensor._make(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        a = self

        def backward(g):
            a._accumulate(-g * other / (a.data * a.data))

        return Tensor._make(other / a.data, (a,), backward)

    def __pow__(self, exponent: float):
        a = self
        out = a.data ** exponent

        def backward(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1))

        return Tensor._make(out, (a,), backward)

    def __matmul__(self, other):
        a, b = self, _wrap(other)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._make(a.data @ b.data, (a, b), backward)

    # -- elementwise functions ----------------------------------------------------

    def exp(self):
        a = self
        out = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out)

        return Tensor._make(out, (a,), backward)

    def log(self):
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        return Tensor._make(np.log(a.data), (a,), backward)

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)

        def backward(g):
            a._accumulate(g * 0.5 / out)

        return Tensor._make(out, (a,), backward)

    def tanh(self):
        a = self
        out = np.tanh(a.data)

        def backward(g):
            a._accumulate(g * (1.0 - out * out))

        return Tensor._make(out, (a,), backward)

    def abs(self):
        a = self

        def backward(g):
            a._accumulate(g * np.sign(a.data))

        return Tensor._make(np.abs(a.data), (a,), backward)

    def relu(self):
        a = self
        mask = a.data > 0

        def backward(g):
            a._accumulate(g * mask)

        return Tensor._make(a.data * mask, (a,), backward)

    def maximum(self, floor: float):
        """Elementwise max with a constant; zero gradient at the floor."""
        a = self
        mask = a.data > floor

        def backward(g):
            a._accumulate(g * mask)

        return Tensor._make(np.maximum(a.data, floor), (a,), backward)

    # -- reductions ------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape))

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        if axis is None:
            count = a.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for ax in axes:
                count *= a.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims: bool = False):
        """Max along one axis; gradient flows to the first maximal entry."""
        a = self
        out = a.data.max(axis=axis, keepdims=True)
        mask = a.data == out
        # break ties toward the first occurrence so the gradient is a partition
        first = np.cumsum(mask, axis=axis) == 1
        mask = mask & first

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(g * mask)

        return Tensor._make(out if keepdims else out.squeeze(axis), (a,), backward)

    # -- shape ops ----------------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def backward(g):
            a._accumulate(g.reshape(a.data.shape))

        return Tensor._make(a.data.reshape(shape), (a,), backward)

    def transpose(self, *axes):
        a = self
        axes = axes or tuple(reversed(range(a.data.ndim)))
        inv = tuple(np.argsort(axes))

        def backward(g):
            a._accumulate(g.transpose(inv))

        return Tensor._make(a.data.transpose(axes), (a,), backward)

    def __getitem__(self, idx):
        a = self

        def backward(g):
            dx = np.zeros_like(a.data)
            np.add.at(dx, idx, g)
            a._accumulate(dx)

        return Tensor._make(a.data[idx], (a,), backward)

    # -- backward pass ----------------------------------------------------------------------

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)

        # iterative topological sort (graphs from unrolled loops can be deep)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# -- convolution and pooling primitives -----------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(dcols: np.ndarray, xshape: tuple, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int):
    n, c, h, w = xshape
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
    if pad:
        dx = dx[:, :, pad : pad + h, pad : pad + w]
    return dx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW layout, square kernel, symmetric padding."""
    n = x.data.shape[0]
    o, cin, kh, kw = weight.data.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(o, cin * kh * kw)
    out = np.matmul(wmat, cols)  # (n, o, oh*ow) by broadcasting
    if bias is not None:
        out += bias.data.reshape(1, o, 1)
    out = out.reshape(n, o, oh, ow)

    # capture which gradients are needed at forward time; skipping the weight
    # GEMM halves the cost of input-only passes (attacks, inversions)
    need_x = x.requires_grad
    need_w = weight.requires_grad
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.reshape(n, o, oh * ow)
        if need_w:
            dw = np.tensordot(gmat, cols, axes=([0, 2], [0, 2]))
            weight._accumulate(dw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=(0, 2)))
        if need_x:
            dcols = np.matmul(wmat.T, gmat)
            x._accumulate(_col2im(dcols, x.data.shape, kh, kw, stride, pad, oh, ow))

    return Tensor._make(out, parents, backward)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping average pooling; spatial dims must be divisible by k."""
    n, c, h, w = x.data.shape
    oh, ow = h // k, w // k
    a = x
    out = x.data.reshape(n, c, oh, k, ow, k).mean(axis=(3, 5))

    def backward(g):
        dx = np.broadcast_to(
            g[:, :, :, None, :, None] / (k * k), (n, c, oh, k, ow, k)
        ).reshape(n, c, h, w)
        a._accumulate(dx)

    return Tensor._make(out, (a,), backward)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Fused batch normalization over (N, H, W) using batch statistics.

    Returns (y, batch_mean, batch_var); the statistics are plain per-channel
    arrays for the caller's running-average update.
    """
    n, c, h, w = x.data.shape
    m = n * h * w
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu.reshape(1, c, 1, 1)
    var = np.einsum("nchw,nchw->c", xc, xc) / m
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        g_sum = g.sum(axis=(0, 2, 3))
        gx_sum = np.einsum("nchw,nchw->c", g, xhat)
        if beta.requires_grad:
            beta._accumulate(g_sum)
        if gamma.requires_grad:
            gamma._accumulate(gx_sum)
        if x.requires_grad:
            k = (gamma.data * inv_std).reshape(1, c, 1, 1)
            dx = k * (g - (g_sum / m).reshape(1, c, 1, 1) - xhat * (gx_sum / m).reshape(1, c, 1, 1))
            x._accumulate(dx)

    return Tensor._make(out, (x, gamma, beta), backward), mu, var


def batch_norm_infer(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var, eps: float):
    """Batch normalization with fixed (running) statistics."""
    c = x.data.shape[1]
    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate(np.einsum("nchw,nchw->c", g, xhat))
        if x.requires_grad:
            x._accumulate(g * (gamma.data * inv_std).reshape(1, c, 1, 1))

    return Tensor._make(out, (x, gamma, beta), backward)


# -- composite functions ---------------------------------------------------------------


def log_softmax(logits: Tensor, axis: int = 1) -> Tensor:
    """Numerically stable log-softmax; outputs are nonpositive by construction."""
    m = logits.data.max(axis=axis, keepdims=True)  # constant shift, no gradient needed
    shifted = logits - m
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def softmax(logits: Tensor, axis: int = 1) -> Tensor:
    return log_softmax(logits, axis=axis).exp()


def nll_loss(logp: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels given log-probabilities."""
    n = logp.data.shape[0]
    return -logp[np.arange(n), labels].mean()


def kl_divergence(p: np.ndarray, logq: Tensor) -> Tensor:
    """Mean KL(p || q) over the batch with p a fixed probability array.

    Only the cross term -sum(p * logq) carries gradient; the entropy of p is
    added as a constant so the value is a true KL (zero iff p == q).
    """
    p = np.asarray(p)
    entropy = float(np.sum(p * np.log(np.maximum(p, 1e-12)))) / p.shape[0]
    cross = (Tensor(p) * logq).sum() * (-1.0 / p.shape[0])
    return cross + entropy
