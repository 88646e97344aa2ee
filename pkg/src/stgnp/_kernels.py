"""Fused single-pass kernels for the memory-bound elementwise chains.

Every kernel has a pure-numpy twin used when numba is unavailable; both
compute the same algebra (last-ulp rounding may differ between the two
backends, never within one). Transcendentals stay in numpy, whose SIMD
implementations beat scalar libm loops.
"""
from __future__ import annotations

import numpy as np

try:
    import numba

    def _jit(fn):
        return numba.njit(fastmath=False, cache=True)(fn)

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a soft dependency
    def _jit(fn):
        return None

    HAVE_NUMBA = False


def _flat(a: np.ndarray) -> np.ndarray:
    if not a.flags.c_contiguous:
        a = np.ascontiguousarray(a)
    return a.reshape(a.size)


# ---------------------------------------------------------------------------
# precision-form Gaussian conditioning
# ---------------------------------------------------------------------------

def _gba_forward_loop(mu, sigma, s_term, w_term, out_mean, out_std, den):
    for i in range(mu.size):
        v = sigma[i] * sigma[i]
        d = 1.0 + v * s_term[i]
        den[i] = d
        out_mean[i] = (mu[i] + v * w_term[i]) / d
        out_std[i] = sigma[i] / np.sqrt(d)


_gba_forward_jit = _jit(_gba_forward_loop)


def gba_forward(mu, sigma, s_term, w_term):
    out_mean = np.empty_like(mu)
    out_std = np.empty_like(mu)
    den = np.empty_like(mu)
    if HAVE_NUMBA:
        _gba_forward_jit(_flat(mu), _flat(sigma), _flat(s_term), _flat(w_term),
                         out_mean.reshape(-1), out_std.reshape(-1),
                         den.reshape(-1))
    else:
        var = sigma * sigma
        np.multiply(var, s_term, out=den)
        den += 1.0
        np.multiply(var, w_term, out=out_mean)
        out_mean += mu
        out_mean /= den
        np.divide(sigma, np.sqrt(den), out=out_std)
    return out_mean, out_std, den


def _gba_backward_loop(gm, gs, has_gm, has_gs, sigma, s_term, w_term,
                       out_mean, out_std, den, g_mu, g_sigma, g_s, g_w):
    for i in range(sigma.size):
        v = sigma[i] * sigma[i]
        inv_d = 1.0 / den[i]
        v_over = v * inv_d
        gsv = 0.0
        gsig = 0.0
        if has_gm:
            gmi = gm[i]
            g_w[i] = gmi * v_over
            g_mu[i] = gmi * inv_d
            gsv += -gmi * out_mean[i] * v_over
            gsig += gmi * 2.0 * sigma[i] * (w_term[i] - out_mean[i] * s_term[i]) * inv_d
        if has_gs:
            gsi = gs[i]
            gsig += gsi * (out_std[i] / sigma[i]) * (1.0 - v * s_term[i] * inv_d)
            gsv += -0.5 * gsi * out_std[i] * v_over
        g_s[i] = gsv
        g_sigma[i] = gsig


_gba_backward_jit = _jit(_gba_backward_loop)


def gba_backward(gm, gs, sigma, s_term, w_term, out_mean, out_std, den):
    """Adjoints for (mu, sigma, s, w); gm/gs may be None."""
    g_mu = np.zeros_like(sigma) if gm is None else np.empty_like(sigma)
    g_sigma = np.empty_like(sigma)
    g_s = np.empty_like(sigma)
    g_w = np.zeros_like(sigma) if gm is None else np.empty_like(sigma)
    zero = np.zeros(1)
    if HAVE_NUMBA:
        _gba_backward_jit(
            zero if gm is None else _flat(gm), zero if gs is None else _flat(gs),
            gm is not None, gs is not None, _flat(sigma), _flat(s_term),
            _flat(w_term), _flat(out_mean), _flat(out_std), _flat(den),
            g_mu.reshape(-1), g_sigma.reshape(-1), g_s.reshape(-1),
            g_w.reshape(-1))
        return g_mu, g_sigma, g_s, g_w
    var = sigma * sigma
    inv_den = 1.0 / den
    v_over = var * inv_den
    g_sigma[...] = 0.0
    g_s[...] = 0.0
    if gm is not None:
        np.multiply(gm, v_over, out=g_w)
        np.multiply(gm, inv_den, out=g_mu)
        g_s -= gm * out_mean * v_over
        g_sigma += gm * 2.0 * sigma * (w_term - out_mean * s_term) * inv_den
    if gs is not None:
        g_sigma += gs * (out_std / sigma) * (1.0 - var * s_term * inv_den)
        g_s -= 0.5 * gs * out_std * v_over
    return g_mu, g_sigma, g_s, g_w


def _obs_backward_loop(gp, gw, has_gw, prec, obs_mean, obs_std, g_r, g_std):
    for i in range(prec.size):
        p = prec[i]
        acc = gp[i]
        if has_gw:
            gwp = gw[i]
            g_r[i] = gwp * p
            acc += gwp * obs_mean[i]
        g_std[i] = acc * (-2.0 * p) / obs_std[i]


_obs_backward_jit = _jit(_obs_backward_loop)


def obs_backward(g_prec, g_wmix, prec, obs_mean, obs_std):
    """Adjoints for the latent observations: returns (g_R, g_obs_std)."""
    g_r = np.zeros_like(prec) if g_wmix is None else np.empty_like(prec)
    g_std = np.empty_like(prec)
    zero = np.zeros(1)
    if HAVE_NUMBA:
        _obs_backward_jit(_flat(g_prec),
                          zero if g_wmix is None else _flat(g_wmix),
                          g_wmix is not None, _flat(prec), _flat(obs_mean),
                          _flat(obs_std), g_r.reshape(-1), g_std.reshape(-1))
        return g_r, g_std
    acc = g_prec.copy()
    if g_wmix is not None:
        np.multiply(g_wmix, prec, out=g_r)
        acc += g_wmix * obs_mean
    np.multiply(acc, -2.0 * prec, out=g_std)
    g_std /= obs_std
    return g_r, g_std


# ---------------------------------------------------------------------------
# misc fused passes
# ---------------------------------------------------------------------------

def _tanh_backward_loop(g, out, g_in):
    for i in range(g.size):
        g_in[i] = g[i] * (1.0 - out[i] * out[i])


_tanh_backward_jit = _jit(_tanh_backward_loop)


def tanh_backward(g, out):
    g_in = np.empty_like(g)
    if HAVE_NUMBA:
        _tanh_backward_jit(_flat(g), _flat(out), g_in.reshape(-1))
    else:
        np.multiply(out, out, out=g_in)
        np.subtract(1.0, g_in, out=g_in)
        g_in *= g
    return g_in


def _sum3_loop(a, b, c, out):
    for i in range(a.size):
        out[i] = a[i] + b[i] + c[i]


_sum3_jit = _jit(_sum3_loop)


def sum3(a, b, c):
    out = np.empty_like(a)
    if HAVE_NUMBA and a.shape == b.shape == c.shape:
        _sum3_jit(_flat(a), _flat(b), _flat(c), out.reshape(-1))
    else:
        np.add(a, b, out=out)
        out += c
    return out


def _adam_loop(p, g, m, v, beta1, beta2, lr, eps, c1, c2):
    for i in range(p.size):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


_adam_jit = _jit(_adam_loop)


def adam_update(p, g, m, v, beta1, beta2, lr, eps, c1, c2):
    if HAVE_NUMBA:
        _adam_jit(p.reshape(-1), _flat(g), m.reshape(-1), v.reshape(-1),
                  beta1, beta2, lr, eps, c1, c2)
    else:
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
