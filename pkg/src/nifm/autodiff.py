"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Exactly the operator set the network stack needs: elementwise arithmetic,
matmul, strided 1-D convolution, relu/softplus, batch normalisation, axis
means and sums, reshape/slice, log/exp/square and a batched lower-triangular
solve for full-covariance Gaussian losses.

Operations record onto an active :class:`Tape` (a context manager); without
an active tape they are plain forward computations with identical values.
A tape supports a single backward pass.
"""

from __future__ import annotations

import numpy as np

_ACTIVE_TAPE = None


class AutodiffError(RuntimeError):
    pass


class Tensor:
    """Dense array with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad)


class Tape:
    """Ordered record of primitive operations with backward closures.

    Entries are appended in execution order, which is already a topological
    order of the computation graph; the backward pass walks it in reverse.
    """

    def __init__(self):
        self.entries = []  # (out, parents, backward_fn)
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise AutodiffError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, out, parents, backward_fn):
        self.entries.append((out, parents, backward_fn))


def _maybe_record(out, parents, backward_fn):
    if _ACTIVE_TAPE is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE_TAPE.record(out, parents, backward_fn)
    return out


def _accumulate(parent, grad):
    if not parent.requires_grad:
        return
    if parent.grad is None:
        # adopt the first contribution without copying; contributions may
        # alias other gradient buffers (passthrough ops), so accumulation
        # below allocates instead of mutating in place
        parent.grad = grad
    else:
        parent.grad = parent.grad + grad


def backward(loss, tape=None):
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = tape if tape is not None else _ACTIVE_TAPE
    if tape is None:
        raise AutodiffError("backward requires an active tape (or an explicit one)")
    if tape.consumed:
        raise AutodiffError("tape already consumed by a previous backward pass")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, parents, backward_fn in reversed(tape.entries):
        if out.grad is None:
            continue
        grads = backward_fn(out.grad)
        for parent, g in zip(parents, grads):
            if g is not None:
                _accumulate(parent, g)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear algebra primitives
# ---------------------------------------------------------------------------

def add(a, b):
    out = Tensor(a.data + b.data)
    return _maybe_record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    out = Tensor(a.data - b.data)
    return _maybe_record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    out = Tensor(a.data * b.data)
    return _maybe_record(
        out, (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    out = Tensor(a.data / b.data)
    return _maybe_record(
        out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / b.data**2, b.data.shape),
        ),
    )


def scale(a, c):
    """Multiply by a python scalar constant."""
    out = Tensor(a.data * c)
    return _maybe_record(out, (a,), lambda g: (g * c,))


def add_const(a, c):
    out = Tensor(a.data + c)
    return _maybe_record(out, (a,), lambda g: (g,))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise AutodiffError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    return _maybe_record(
        out, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def relu(a):
    out = Tensor(np.maximum(a.data, 0))
    return _maybe_record(out, (a,), lambda g: (g * (a.data > 0),))


def softplus(a):
    out = Tensor(np.logaddexp(0.0, a.data).astype(a.data.dtype, copy=False))
    from scipy.special import expit

    return _maybe_record(out, (a,), lambda g: (g * expit(a.data),))


def log(a):
    out = Tensor(np.log(a.data))
    return _maybe_record(out, (a,), lambda g: (g / a.data,))


def exp(a):
    out = Tensor(np.exp(a.data))
    return _maybe_record(out, (a,), lambda g: (g * out.data,))


def square(a):
    out = Tensor(a.data**2)
    return _maybe_record(out, (a,), lambda g: (g * 2.0 * a.data,))


def sum_all(a):
    out = Tensor(np.asarray(a.data.sum()))
    return _maybe_record(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def sum_over_axis(a, axis):
    out = Tensor(a.data.sum(axis=axis))
    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)
    return _maybe_record(out, (a,), bw)


def mean_over_axis(a, axis):
    # accumulate in float64 so the result is unchanged (to rounding) under
    # permutations of the reduced axis, then return in the input dtype
    n = a.data.shape[axis]
    out64 = a.data.mean(axis=axis, dtype=np.float64)
    out = Tensor(out64.astype(a.data.dtype, copy=False))
    def bw(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape).copy(),)
    return _maybe_record(out, (a,), bw)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    return _maybe_record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def flatten(a):
    """Collapse all axes but the first."""
    return reshape(a, (a.data.shape[0], -1))


def slice_(a, index):
    """Static basic slicing (gather); ``index`` is anything numpy accepts."""
    out = Tensor(a.data[index])
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _maybe_record(out, (a,), bw)


# ---------------------------------------------------------------------------
# conv1d (cross-correlation convention)
# ---------------------------------------------------------------------------

def conv1d_output_length(length, kernel, stride, padding):
    return (length + 2 * padding - kernel) // stride + 1


def _conv_windows(xp, kernel, stride, n_out):
    b, c, _ = xp.shape
    s0, s1, s2 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, n_out, kernel), strides=(s0, s1, s2 * stride, s2), writeable=False
    )


def conv1d(x, w, b, stride=1, padding=0):
    """1-D cross-correlation: x (B, C_in, L), w (C_out, C_in, K), b (C_out,)."""
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise AutodiffError(
            f"conv1d expects (B,C,L) input and (O,C,K) kernel, got {x.data.shape} and {w.data.shape}"
        )
    if x.data.shape[1] != w.data.shape[1]:
        raise AutodiffError(
            f"conv1d channel mismatch: input {x.data.shape} vs kernel {w.data.shape}"
        )
    kernel = w.data.shape[2]
    n_out = conv1d_output_length(x.data.shape[2], kernel, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    windows = _conv_windows(xp, kernel, stride, n_out)
    out_data = np.einsum("bclk,ock->bol", windows, w.data, optimize=True)
    out_data += b.data[None, :, None]
    out = Tensor(out_data.astype(x.data.dtype, copy=False))

    def bw(g):
        gw = np.einsum("bol,bclk->ock", g, windows, optimize=True).astype(w.data.dtype)
        gb = g.sum(axis=(0, 2)).astype(b.data.dtype)
        gxp = np.zeros_like(xp)
        tmp = np.einsum("bol,ock->bclk", g, w.data, optimize=True)
        for k in range(kernel):
            gxp[:, :, k : k + stride * n_out : stride] += tmp[:, :, :, k]
        gx = gxp[:, :, padding : xp.shape[2] - padding] if padding else gxp
        return gx.astype(x.data.dtype), gw, gb

    return _maybe_record(out, (x, w, b), bw)


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------

def batchnorm1d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Feature-wise batch normalisation over the batch axis of x (B, F).

    In training mode the batch statistics normalise and the running buffers
    (plain arrays, mutated in place) track them with the given momentum; in
    eval mode the output is a deterministic affine map using the buffers.
    """
    if x.data.ndim != 2:
        raise AutodiffError(f"batchnorm1d expects (B, F) input, got {x.data.shape}")
    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        n = x.data.shape[0]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        out = Tensor((gamma.data * xhat + beta.data).astype(x.data.dtype, copy=False))

        def bw(g):
            ggamma = (g * xhat).sum(axis=0).astype(gamma.data.dtype)
            gbeta = g.sum(axis=0).astype(beta.data.dtype)
            gxhat = g * gamma.data
            gx = (
                inv_std
                / n
                * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
            )
            return gx.astype(x.data.dtype), ggamma, gbeta

        return _maybe_record(out, (x, gamma, beta), bw)

    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * inv_std
    out = Tensor((gamma.data * xhat + beta.data).astype(x.data.dtype, copy=False))

    def bw(g):
        ggamma = (g * xhat).sum(axis=0).astype(gamma.data.dtype)
        gbeta = g.sum(axis=0).astype(beta.data.dtype)
        gx = (g * gamma.data * inv_std).astype(x.data.dtype)
        return gx, ggamma, gbeta

    return _maybe_record(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# batched triangular solve (full-covariance Gaussian loss)
# ---------------------------------------------------------------------------

def _solve_lower(L, r):
    b, m = r.shape
    x = np.empty_like(r)
    for i in range(m):
        acc = r[:, i].copy()
        for j in range(i):
            acc -= L[:, i, j] * x[:, j]
        x[:, i] = acc / L[:, i, i]
    return x


def _solve_lower_t(L, r):
    # solves L^T x = r
    b, m = r.shape
    x = np.empty_like(r)
    for i in range(m - 1, -1, -1):
        acc = r[:, i].copy()
        for j in range(i + 1, m):
            acc -= L[:, j, i] * x[:, j]
        x[:, i] = acc / L[:, i, i]
    return x


def lower_triangular_solve(L, r):
    """Solve L x = r for each batch element; L is (B, m, m), r is (B, m)."""
    if L.data.ndim != 3 or r.data.ndim != 2 or L.data.shape[:2] != (r.data.shape[0], r.data.shape[1]):
        raise AutodiffError(
            f"lower_triangular_solve shapes incompatible: {L.data.shape} vs {r.data.shape}"
        )
    x = _solve_lower(L.data, r.data)
    out = Tensor(x)

    def bw(g):
        w = _solve_lower_t(L.data, g)
        # forward reads only the lower triangle, so the gradient lives there
        gL = np.tril(-np.einsum("bi,bj->bij", w, x))
        return gL.astype(L.data.dtype), w.astype(r.data.dtype)

    return _maybe_record(out, (L, r), bw)


# ---------------------------------------------------------------------------
# Adam optimiser
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers plus the step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0


def adam_step(params, grads, state, lr=9e-5, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update with bias correction; returns ``state``."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g**2
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state
