"""Dense float64 tensors with a reverse-mode autodiff tape.

Everything runs in 64-bit arithmetic. A :class:`Tape` records one closure per
differentiable operation in execution order; :func:`backward` replays them in
reverse and accumulates adjoints additively on every tensor that requires a
gradient. Only the operation set the extrapolation model actually uses is
implemented here, plus the diagonal-Gaussian primitives shared by the
stochastic stage and the loss.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from . import _kernels as kernels

LOG_2PI = math.log(2.0 * math.pi)

_TLS = threading.local()  # per-thread tape stacks; forward passes are single-threaded

# Optional per-op finiteness validation; off by default because it costs a
# full pass over every intermediate. The training loop independently checks
# the loss every iteration.
_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


_ALLOCATOR_TUNED = False


def tune_allocator() -> None:
    """Raise glibc's mmap/trim thresholds so MB-scale temporaries are reused
    from the heap instead of being mmapped and page-faulted on every op.
    No-op on non-glibc platforms. Called by the training/CLI entry points."""
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        m_trim_threshold, m_mmap_threshold = -1, -3
        libc.mallopt(m_trim_threshold, 1 << 30)
        libc.mallopt(m_mmap_threshold, 1 << 30)
    except (OSError, AttributeError):
        pass


class Tape:
    """Ordered record of executed operations for one forward pass.

    Use as a context manager around the forward computation, then hand the
    tape to :func:`backward`. A tape is single-use: build a fresh one per
    optimization step.
    """

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops: list = []

    def __enter__(self) -> "Tape":
        stack = getattr(_TLS, "stack", None)
        if stack is None:
            stack = _TLS.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TLS.stack.pop()
        return False

    def record(self, fn) -> None:
        self._ops.append(fn)

    def clear(self) -> None:
        self._ops.clear()

    def __len__(self) -> int:
        return len(self._ops)


def active_tape() -> Tape | None:
    stack = getattr(_TLS, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped without gradient participation
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(out: Tensor, what: str) -> Tensor:
    if _CHECK_FINITE:
        out.assert_finite(what)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Additive fan-out accumulation. Adjoint arrays are never mutated in
    # place, so aliasing the first contribution is safe.
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.reshape(g, shape)


def _trace(out: Tensor, inputs: tuple, fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(fn)
    return out


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _trace(out, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _trace(out, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, -g)

    return _trace(out, (a,), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _trace(out, (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * out.data / b.data, b.data.shape))

    return _trace(out, (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    # 2-D GEMM or stacked GEMM with identical leading dimensions.
    if a.data.ndim > 2 or b.data.ndim > 2:
        if a.data.ndim == b.data.ndim and a.data.shape[:-2] != b.data.shape[:-2]:
            raise ValueError("stacked matmul requires matching leading dims")
    out = Tensor(np.matmul(a.data, b.data))

    def backward_fn():
        g = out.grad
        if g is None:
            return
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        _accumulate(a, _unbroadcast(np.matmul(g, bt), a.data.shape))
        _accumulate(b, _unbroadcast(np.matmul(at, g), b.data.shape))

    return _trace(out, (a, b), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(np.reshape(a.data, shape))

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, np.reshape(g, a.data.shape))

    return _trace(out, (a,), backward_fn)


def broadcast_to(a: Tensor, shape) -> Tensor:
    data = np.empty(shape)
    data[...] = a.data
    out = Tensor(data)

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, _unbroadcast(g, a.data.shape))

    return _trace(out, (a,), backward_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def backward_fn():
        g = out.grad
        if g is None:
            return
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _trace(out, (a,), backward_fn)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]

    def backward_fn():
        g = out.grad
        if g is None:
            return
        offs = np.cumsum([0] + sizes)
        for t, lo, hi in zip(tensors, offs[:-1], offs[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _trace(out, tuple(tensors), backward_fn)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor (fixed ascending-index order)."""
    out = Tensor(np.sum(a.data))

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _trace(out, (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, g * out.data)

    return _trace(out, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    out = _finish(Tensor(np.log(a.data)), "log")

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, g / a.data)

    return _trace(out, (a,), backward_fn)


def sqrt(a: Tensor) -> Tensor:
    out = _finish(Tensor(np.sqrt(a.data)), "sqrt")

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, g * (0.5 / out.data))

    return _trace(out, (a,), backward_fn)


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, g * (2.0 * a.data))

    return _trace(out, (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, kernels.tanh_backward(g, out.data))

    return _trace(out, (a,), backward_fn)


def add3(a: Tensor, b: Tensor, c: Tensor) -> Tensor:
    """Fused three-way sum; operands must share one shape."""
    if not (a.data.shape == b.data.shape == c.data.shape):
        return add(add(a, b), c)
    out = Tensor(kernels.sum3(a.data, b.data, c.data))

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, g)
        _accumulate(b, g)
        _accumulate(c, g)

    return _trace(out, (a, b, c), backward_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow in exp saturates to the correct 0/1 limits
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a: Tensor) -> Tensor:
    out = Tensor(_softplus(a.data))

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(a, g * _sigmoid(a.data))

    return _trace(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def conv1d_causal(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                  dilation: int = 1) -> Tensor:
    """Dilated causal 1-D convolution over the second-to-last axis.

    ``x`` has shape ``(..., T, C_in)``, ``kernel`` ``(k, C_in, C_out)`` and
    ``bias`` ``(C_out,)``. Output position ``t`` reads only
    ``x[t - dilation*s]`` for ``s in [0, k)``; reads before the window start
    are exactly 0.0, so the output keeps length ``T``.
    """
    k, cin, cout = kernel.data.shape
    if x.data.shape[-1] != cin:
        raise ValueError(
            f"conv1d_causal: input has {x.data.shape[-1]} channels, kernel expects {cin}")
    if k < 1 or dilation < 1:
        raise ValueError("conv1d_causal: kernel size and dilation must be >= 1")
    lead = x.data.shape[:-2]
    t_len = x.data.shape[-2]
    xd = x.data.reshape(-1, t_len, cin)
    s_rows = xd.shape[0]
    x2 = xd.reshape(-1, cin)
    y = (x2 @ kernel.data[0]).reshape(s_rows, t_len, cout)
    for tap in range(1, k):
        off = dilation * tap
        if off >= t_len:
            break
        seg = xd[:, : t_len - off, :].reshape(-1, cin)
        y[:, off:, :] += (seg @ kernel.data[tap]).reshape(s_rows, t_len - off, cout)
    if bias is not None:
        y += bias.data
    out = Tensor(y.reshape(*lead, t_len, cout))

    def backward_fn():
        g = out.grad
        if g is None:
            return
        gd = g.reshape(s_rows, t_len, cout)
        g2 = gd.reshape(-1, cout)
        gx = (g2 @ kernel.data[0].T).reshape(s_rows, t_len, cin)
        gk = np.empty_like(kernel.data)
        gk[0] = x2.T @ g2
        for tap in range(1, k):
            off = dilation * tap
            if off >= t_len:
                gk[tap:] = 0.0
                break
            gseg = gd[:, off:, :].reshape(-1, cout)
            gx[:, : t_len - off, :] += (gseg @ kernel.data[tap].T).reshape(
                s_rows, t_len - off, cin)
            gk[tap] = xd[:, : t_len - off, :].reshape(-1, cin).T @ gseg
        _accumulate(x, gx.reshape(x.data.shape))
        _accumulate(kernel, gk)
        if bias is not None:
            _accumulate(bias, gd.sum(axis=(0, 1)))

    ins = (x, kernel) if bias is None else (x, kernel, bias)
    return _trace(out, ins, backward_fn)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-time-step affine map: ``(..., C_in) @ (C_in, C_out) + bias``."""
    cin, cout = weight.data.shape
    if x.data.shape[-1] != cin:
        raise ValueError(
            f"conv1x1: input has {x.data.shape[-1]} channels, weight expects {cin}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    y = x2 @ weight.data
    if bias is not None:
        y += bias.data
    out = Tensor(y.reshape(*lead, cout))

    def backward_fn():
        g = out.grad
        if g is None:
            return
        g2 = g.reshape(-1, cout)
        _accumulate(x, (g2 @ weight.data.T).reshape(x.data.shape))
        _accumulate(weight, x2.T @ g2)
        if bias is not None:
            _accumulate(bias, g2.sum(axis=0))

    ins = (x, weight) if bias is None else (x, weight, bias)
    return _trace(out, ins, backward_fn)


# ---------------------------------------------------------------------------
# diagonal Gaussians
# ---------------------------------------------------------------------------

@dataclass
class DiagGaussian:
    """Mean/std pair over a grid; the currency of the stochastic stage."""

    mean: Tensor
    std: Tensor

    def __post_init__(self):
        if self.mean.data.shape != self.std.data.shape:
            raise ValueError("DiagGaussian: mean and std shapes differ")

    @property
    def shape(self) -> tuple:
        return self.mean.data.shape


def bounded_std(raw: Tensor, sigma_min: float) -> Tensor:
    """Smooth positive parameterization ``sigma_min + softplus(raw)``."""
    out = Tensor(sigma_min + _softplus(raw.data))

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(raw, g * _sigmoid(raw.data))

    return _trace(out, (raw,), backward_fn)


def diag_gaussian_logpdf(y, g: DiagGaussian, mask) -> Tensor:
    """Masked factorized-Gaussian log density, summed over observed entries.

    Entries where ``mask == 0`` contribute exactly 0 regardless of ``y``.
    """
    yd = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    md = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    mu, sigma = g.mean, g.std
    if yd.shape != mu.data.shape or md.shape != mu.data.shape:
        raise ValueError("diag_gaussian_logpdf: shape mismatch")
    if np.min(sigma.data) <= 0.0:
        raise ValueError("diag_gaussian_logpdf: non-positive std")
    u = (yd - mu.data) / sigma.data
    terms = md * (-0.5 * LOG_2PI - np.log(sigma.data) - 0.5 * u * u)
    out = Tensor(np.sum(terms))

    def backward_fn():
        gr = out.grad
        if gr is None:
            return
        _accumulate(mu, gr * md * u / sigma.data)
        _accumulate(sigma, gr * md * (u * u - 1.0) / sigma.data)

    return _trace(out, (mu, sigma), backward_fn)


def diag_gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) between factorized Gaussians, summed over entries."""
    if q.shape != p.shape:
        raise ValueError("diag_gaussian_kl: shape mismatch")
    mq, sq, mp, sp = q.mean, q.std, p.mean, p.std
    delta = mq.data - mp.data
    vp = sp.data * sp.data
    terms = (np.log(sp.data) - np.log(sq.data)
             + (sq.data * sq.data + delta * delta) / (2.0 * vp) - 0.5)
    out = Tensor(np.sum(terms))

    def backward_fn():
        g = out.grad
        if g is None:
            return
        _accumulate(mq, g * delta / vp)
        _accumulate(mp, -g * delta / vp)
        _accumulate(sq, g * (sq.data / vp - 1.0 / sq.data))
        _accumulate(sp, g * (1.0 / sp.data - (sq.data * sq.data + delta * delta) / (vp * sp.data)))

    return _trace(out, (mq, sq, mp, sp), backward_fn)


def reparameterize(g: DiagGaussian, noise) -> Tensor:
    """Sample ``mean + std * noise``; gradients flow to mean/std only."""
    nd = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=np.float64)
    if nd.shape != g.shape:
        raise ValueError("reparameterize: noise shape mismatch")
    mu, sigma = g.mean, g.std
    out = Tensor(mu.data + sigma.data * nd)

    def backward_fn():
        gr = out.grad
        if gr is None:
            return
        _accumulate(mu, gr)
        _accumulate(sigma, gr * nd)

    return _trace(out, (mu, sigma), backward_fn)


# ---------------------------------------------------------------------------
# backward pass and gradient verification
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> None:
    """Replay the tape's adjoints in reverse registration order."""
    if loss.data.shape != ():
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to the tape")
    loss.grad = np.ones(())
    for fn in reversed(tape._ops):
        fn()


def finite_diff_check(program, params: list[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``program`` must be a deterministic function of ``params`` returning a
    scalar tensor; any sampling noise has to be baked in as fixed inputs.
    Returns ``max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`` over every
    parameter entry.
    """
    base = program(params).item()
    if program(params).item() != base:
        raise ValueError("program is not deterministic; inject noise as a fixed input")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = program(params)
    backward(tape, loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, g_ad in zip(params, grads):
        flat = p.data.reshape(-1)
        g_flat = g_ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = program(params).item()
            flat[i] = orig - h
            f_minus = program(params).item()
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(g_ad.reshape(-1)[i] - g_fd) / max(1e-8, abs(g_flat[i]) + abs(g_fd))
            if err > worst:
                worst = err
    return worst
