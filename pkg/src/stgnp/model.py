"""The extrapolation network.

Two stages. A deterministic stack interleaves cross-set graph convolutions
(targets aggregate context neighbors, contexts never look back at targets)
with dilated causal convolutions, injecting covariate features and a
1x1-projected residual at every layer. A stochastic stage then runs top-down
over the layers: each layer's latent prior is encoded from the layer's target
representation and the sample from the layer above, and gets conditioned on
per-context-node latent observations by a closed-form precision-weighted
update (Bayesian aggregation on the 1-hop adjacency row).

Batched shapes are window-major throughout: ``(B, nodes, T, channels)``.
During training the target rows are stacked ``[token path; data path]`` so
prior and posterior share every graph/conv dispatch.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import _kernels as kernels
from .tensor import (
    DiagGaussian, Tensor, active_tape, add3, as_tensor, bounded_std,
    concat, conv1d_causal, conv1x1, diag_gaussian_logpdf, narrow,
    reparameterize, reshape, tanh, broadcast_to, _accumulate,
)

CHECKPOINT_MAGIC = b"STGNPCK1"


@dataclass
class StgnpConfig:
    d_y: int
    d_x: int
    L: int = 3
    kernel_size: int = 3
    det_channels: tuple = (16, 32, 64)
    latent_channels: tuple = (16, 32, 64)
    d0: int = 16
    likelihood_hidden: int = 128
    K: int = 2
    T: int = 24
    sigma_min_latent: float = 1e-3
    sigma_min_likelihood: float = 1e-2

    def __post_init__(self):
        self.det_channels = tuple(int(c) for c in self.det_channels)
        self.latent_channels = tuple(int(c) for c in self.latent_channels)
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if len(self.det_channels) != self.L or len(self.latent_channels) != self.L:
            raise ValueError("channel lists must have exactly L entries")
        if min(self.det_channels) < 1 or min(self.latent_channels) < 1:
            raise ValueError("channel widths must be >= 1")
        if self.d_y < 1 or self.d_x < 0 or self.d0 < 1:
            raise ValueError("bad feature widths")
        if self.kernel_size < 1 or self.K < 1 or self.T < 1:
            raise ValueError("bad kernel_size / K / T")

    def dilation(self, layer: int) -> int:
        return 2 ** layer

    def z_above_channels(self, layer: int) -> int:
        # Top layer conditions on an all-zeros tensor of the top latent width
        # so the encoder keeps a uniform input signature.
        if layer == self.L - 1:
            return self.latent_channels[-1]
        return self.latent_channels[layer + 1]


class StgnpModel:
    """Parameter registry plus hyperparameters. Parameters are created as
    zeros; see ``training.xavier_init`` for the initialization scheme."""

    def __init__(self, config: StgnpConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        c = config
        self._add("token", (c.d0,))
        self._add("embed.weight", (c.d_y, c.d0))
        d_prev = c.d0
        for l in range(c.L):
            d = c.det_channels[l]
            for k in range(c.K + 1):
                self._add(f"layer{l}.csgcn.w{k}", (d_prev, d))
            self._add(f"layer{l}.conv.kernel", (c.kernel_size, d, d))
            self._add(f"layer{l}.conv.bias", (d,))
            if c.d_x > 0:
                self._add(f"layer{l}.cov.weight", (c.d_x, d))
                self._add(f"layer{l}.cov.bias", (d,))
            self._add(f"layer{l}.proj.weight", (d_prev, d))
            lat = c.latent_channels[l]
            self._add(f"layer{l}.enc_z.hidden.weight", (c.z_above_channels(l) + d, d))
            self._add(f"layer{l}.enc_z.hidden.bias", (d,))
            self._add(f"layer{l}.enc_z.mean.weight", (d, lat))
            self._add(f"layer{l}.enc_z.mean.bias", (lat,))
            self._add(f"layer{l}.enc_z.raw.weight", (d, lat))
            self._add(f"layer{l}.enc_z.raw.bias", (lat,))
            self._add(f"layer{l}.enc_r.hidden.weight", (d, d))
            self._add(f"layer{l}.enc_r.hidden.bias", (d,))
            self._add(f"layer{l}.enc_r.mean.weight", (d, lat))
            self._add(f"layer{l}.enc_r.mean.bias", (lat,))
            self._add(f"layer{l}.enc_r.raw.weight", (d, lat))
            self._add(f"layer{l}.enc_r.raw.bias", (lat,))
            d_prev = d
        lik_in = sum(c.latent_channels) + c.d_x
        h = c.likelihood_hidden
        self._add("lik.h1.weight", (lik_in, h))
        self._add("lik.h1.bias", (h,))
        self._add("lik.h2.weight", (h, h))
        self._add("lik.h2.bias", (h,))
        self._add("lik.mean.weight", (h, c.d_y))
        self._add("lik.mean.bias", (c.d_y,))
        self._add("lik.raw.weight", (h, c.d_y))
        self._add("lik.raw.bias", (c.d_y,))

    def _add(self, name: str, shape: tuple) -> None:
        self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self):
        return list(self.params.items())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def assert_finite(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(f"non-finite parameter {name}")


@dataclass
class LayerState:
    v: Tensor  # target representations (B, S, T, d_l); S may stack two paths
    h: Tensor  # context representations (B, N, T, d_l)


@dataclass
class ModelInputs:
    """One batch of windows with a common (context, target) partition size.

    All arrays are window-major numpy constants in standardized units;
    ``hops[k]`` holds the cross-set adjacency block of hop k per window.
    """

    y_context: np.ndarray  # (B, N, T, d_y), masked entries already zeroed
    x_context: np.ndarray  # (B, N, T, d_x)
    x_target: np.ndarray  # (B, M, T, d_x)
    hops: list  # K+1 arrays of shape (B, M, N)
    y_target: np.ndarray | None = None  # (B, M, T, d_y), training only
    mask_target: np.ndarray | None = None  # (B, M, T, d_y)

    @property
    def n_windows(self) -> int:
        return self.y_context.shape[0]

    @property
    def n_targets(self) -> int:
        return self.x_target.shape[1]


# ---------------------------------------------------------------------------
# deterministic stage
# ---------------------------------------------------------------------------

def embed_context(y_context, weight: Tensor) -> Tensor:
    """Per-time-step linear embedding Y @ W (no bias)."""
    return conv1x1(as_tensor(y_context), weight)


def broadcast_token(token: Tensor, n_nodes: int, t_len: int,
                    n_windows: int = 1) -> Tensor:
    return broadcast_to(token, (n_windows, n_nodes, t_len, token.data.shape[0]))


def csgcn(v_prev: Tensor, h_prev: Tensor, hop_blocks: list,
          weights: list[Tensor]) -> Tensor:
    """Cross-set graph convolution.

    For every hop k the target representation is averaged with its
    adjacency-weighted context neighbors, normalized by the total weight
    mass, then linearly mapped; hop contributions are summed. Context
    representations are read, never written.

    ``v_prev``: (B, S, T, d_in); ``h_prev``: (B, N, T, d_in);
    ``hop_blocks[k]``: (B, S, N) constants, k = 0 block all zeros.
    """
    if len(hop_blocks) != len(weights):
        raise ValueError("csgcn: need one weight matrix per hop block")
    b, s, t_len, d_in = v_prev.data.shape
    n = h_prev.data.shape[1]
    d_out = weights[0].data.shape[1]
    for w in weights:
        if w.data.shape != (d_in, d_out):
            raise ValueError("csgcn: weight shape mismatch")

    td = t_len * d_in
    v_flat = v_prev.data.reshape(b, s, td)
    v2 = v_prev.data.reshape(-1, d_in)
    h_flat = h_prev.data.reshape(b, n, td)
    out2 = v2 @ weights[0].data  # hop 0: no cross entries, denominator 1
    cache = []
    for k in range(1, len(hop_blocks)):
        a = hop_blocks[k]
        inv = 1.0 / (1.0 + a.sum(axis=2))  # (B, S)
        u = np.matmul(a, h_flat)
        u += v_flat
        u *= inv[:, :, None]
        u2 = u.reshape(-1, d_in)
        out2 += u2 @ weights[k].data
        cache.append((u2, inv))
    out = Tensor(out2.reshape(b, s, t_len, d_out))

    def backward_fn():
        g = out.grad
        if g is None:
            return
        g2 = g.reshape(-1, d_out)
        gv = g2 @ weights[0].data.T
        _accumulate(weights[0], v2.T @ g2)
        gh_flat = None
        for k in range(1, len(hop_blocks)):
            u2, inv = cache[k - 1]
            gu = g2 @ weights[k].data.T
            gu_flat = gu.reshape(b, s, td)
            gu_flat *= inv[:, :, None]
            gv += gu
            contrib = np.matmul(hop_blocks[k].transpose(0, 2, 1), gu_flat)
            gh_flat = contrib if gh_flat is None else gh_flat + contrib
            _accumulate(weights[k], u2.T @ g2)
        _accumulate(v_prev, gv.reshape(v_prev.data.shape))
        if gh_flat is not None:
            _accumulate(h_prev, gh_flat.reshape(h_prev.data.shape))

    tape = active_tape()
    ins = (v_prev, h_prev, *weights)
    if tape is not None and any(x.requires_grad for x in ins):
        out.requires_grad = True
        tape.record(backward_fn)
    return out


def _covariate_branch(model: StgnpModel, layer: int, x: Tensor | None) -> Tensor | None:
    if model.config.d_x == 0 or x is None:
        return None
    return conv1x1(x, model[f"layer{layer}.cov.weight"], model[f"layer{layer}.cov.bias"])


def context_update(h_prev: Tensor, x_context: Tensor | None, model: StgnpModel,
                   layer: int) -> Tensor:
    """One context-pathway layer: project channels, run the dilated causal
    convolution, add the covariate features and the projected residual."""
    proj = conv1x1(h_prev, model[f"layer{layer}.proj.weight"])
    out = conv1d_causal(proj, model[f"layer{layer}.conv.kernel"],
                        model[f"layer{layer}.conv.bias"],
                        dilation=model.config.dilation(layer))
    cov = _covariate_branch(model, layer, x_context)
    if cov is None:
        return out + proj
    return add3(out, cov, proj)


def _target_update(v_prev: Tensor, h_prev: Tensor, x_target: Tensor | None,
                   hop_blocks: list, model: StgnpModel, layer: int) -> Tensor:
    w_hops = [model[f"layer{layer}.csgcn.w{k}"] for k in range(model.config.K + 1)]
    mixed = csgcn(v_prev, h_prev, hop_blocks, w_hops)
    out = conv1d_causal(mixed, model[f"layer{layer}.conv.kernel"],
                        model[f"layer{layer}.conv.bias"],
                        dilation=model.config.dilation(layer))
    res = conv1x1(v_prev, model[f"layer{layer}.proj.weight"])
    cov = _covariate_branch(model, layer, x_target)
    if cov is None:
        return out + res
    return add3(out, cov, res)


def strl_forward(model: StgnpModel, y_context, x_context, x_target, hop_blocks,
                 y_target=None) -> list[LayerState]:
    """Run the deterministic stack; returns per-layer (V, H) states.

    When ``y_target`` is given, the target axis is stacked to ``2M`` rows:
    the first M start from the shared token, the last M from the embedding
    of the target signals (the posterior path).
    """
    cfg = model.config
    y_ctx = as_tensor(y_context)
    b, _, t_len, _ = y_ctx.data.shape
    m = x_target.shape[1] if x_target is not None else y_target.shape[1]
    h = embed_context(y_ctx, model["embed.weight"])
    v = broadcast_token(model["token"], m, t_len, b)
    x_tgt = None if cfg.d_x == 0 else as_tensor(x_target)
    if y_target is not None:
        v = concat([v, embed_context(as_tensor(y_target), model["embed.weight"])], axis=1)
        hop_blocks = [np.concatenate([a, a], axis=1) for a in hop_blocks]
        if x_tgt is not None:
            x_tgt = as_tensor(np.concatenate([x_target, x_target], axis=1))
    x_ctx = None if cfg.d_x == 0 else as_tensor(x_context)
    states = []
    for l in range(cfg.L):
        v = _target_update(v, h, x_tgt, hop_blocks, model, l)
        h = context_update(h, x_ctx, model, l)
        states.append(LayerState(v=v, h=h))
    return states


# ---------------------------------------------------------------------------
# stochastic stage
# ---------------------------------------------------------------------------

def _enc_heads(model: StgnpModel, prefix: str, x: Tensor, sigma_min: float):
    hid = tanh(conv1x1(x, model[f"{prefix}.hidden.weight"], model[f"{prefix}.hidden.bias"]))
    mean = conv1x1(hid, model[f"{prefix}.mean.weight"], model[f"{prefix}.mean.bias"])
    raw = conv1x1(hid, model[f"{prefix}.raw.weight"], model[f"{prefix}.raw.bias"])
    return mean, bounded_std(raw, sigma_min)


def gba_prior(model: StgnpModel, layer: int, z_above: Tensor, v: Tensor) -> DiagGaussian:
    """Pre-update latent prior encoded from (sample above, target state)."""
    mean, std = _enc_heads(model, f"layer{layer}.enc_z",
                           concat([z_above, v], axis=-1),
                           model.config.sigma_min_latent)
    return DiagGaussian(mean, std)


def _enc_observations(model: StgnpModel, layer: int, h: Tensor):
    return _enc_heads(model, f"layer{layer}.enc_r", h, model.config.sigma_min_latent)


def gba_observations(model: StgnpModel, layer: int, h: Tensor) -> list[DiagGaussian]:
    """Per-context-node latent observation distributions at one layer."""
    mean, std = _enc_observations(model, layer, h)
    n = h.data.shape[-3]
    axis = h.data.ndim - 3
    return [DiagGaussian(narrow(mean, axis, i, 1), narrow(std, axis, i, 1))
            for i in range(n)]


def _gba_posterior(mu: Tensor, sigma: Tensor, obs_mean: Tensor, obs_std: Tensor,
                   a_block: np.ndarray):
    """Fused precision-form conditioning, elementwise over the grid.

    ``mu/sigma``: (B, S, T, d); ``obs_mean/obs_std``: (B, N, T, d);
    ``a_block``: (B, S, N) nonnegative constants. Computed as
    ``den = 1 + sigma^2 * s``, ``std = sigma / sqrt(den)``,
    ``mean = (mu + sigma^2 * w) / den`` with ``s = sum_n a_n^2 / obs_var_n``
    and ``w = sum_n a_n obs_mean_n / obs_var_n``: algebraically the standard
    precision update, but exact (bit-for-bit identity) when every a_n is 0.
    """
    if np.min(sigma.data) <= 0.0 or (obs_std.data.size and np.min(obs_std.data) <= 0.0):
        raise ValueError("gba update: non-positive std")
    b, s_rows, t_len, d = mu.data.shape
    n = obs_mean.data.shape[1]
    td = t_len * d
    prec = 1.0 / (obs_std.data * obs_std.data)  # (B, N, T, d)
    prec_flat = prec.reshape(b, n, td)
    a2 = a_block * a_block
    s_term = np.matmul(a2, prec_flat).reshape(b, s_rows, t_len, d)
    w_term = np.matmul(a_block, (obs_mean.data * prec).reshape(b, n, td))
    w_term = w_term.reshape(b, s_rows, t_len, d)
    mean_data, std_data, den = kernels.gba_forward(mu.data, sigma.data,
                                                   s_term, w_term)
    out_mean = Tensor(mean_data)
    out_std = Tensor(std_data)

    def backward_fn():
        gm = out_mean.grad
        gs = out_std.grad
        if gm is None and gs is None:
            return
        g_mu, g_sigma, g_s, g_w = kernels.gba_backward(
            gm, gs, sigma.data, s_term, w_term, out_mean.data, out_std.data, den)
        if gm is not None:
            _accumulate(mu, g_mu)
        _accumulate(sigma, g_sigma)
        if n:
            gs_flat = np.matmul(a2.transpose(0, 2, 1), g_s.reshape(b, s_rows, td))
            g_prec = gs_flat.reshape(b, n, t_len, d)
            if gm is not None:
                gw_flat = np.matmul(a_block.transpose(0, 2, 1),
                                    g_w.reshape(b, s_rows, td))
                g_wmix = gw_flat.reshape(b, n, t_len, d)
            else:
                g_wmix = None
            g_r, g_obs_std = kernels.obs_backward(g_prec, g_wmix, prec,
                                                  obs_mean.data, obs_std.data)
            if g_wmix is not None:
                _accumulate(obs_mean, g_r)
            _accumulate(obs_std, g_obs_std)

    tape = active_tape()
    ins = (mu, sigma, obs_mean, obs_std)
    if tape is not None and any(x.requires_grad for x in ins):
        out_mean.requires_grad = True
        out_std.requires_grad = True
        tape.record(backward_fn)
    return out_mean, out_std


def _split_kl_sample(mean: Tensor, std: Tensor, noise: np.ndarray, m: int):
    """Fused layer exit for the stacked training pass.

    ``mean/std`` carry 2M target rows ([prior; posterior]). Computes the
    summed KL(posterior || prior), one reparameterized posterior sample, and
    the sample tiled back to both paths for the next layer's conditioning.
    Exact zero KL when the two halves are bitwise identical.
    """
    md, sd = mean.data, std.data
    mp, sp = md[:, :m], sd[:, :m]
    mq, sq = md[:, m:], sd[:, m:]
    delta = mq - mp
    vp = sp * sp
    quad = sq * sq
    quad += delta * delta
    kl_val = np.log(sp / sq)
    kl_val += quad / (2.0 * vp)
    kl_val -= 0.5
    kl = Tensor(np.sum(kl_val))
    z = sq * noise
    z += mq
    z_above = np.concatenate([z, z], axis=1)
    out_z = Tensor(z)
    out_za = Tensor(z_above)

    def backward_fn():
        gkl = kl.grad
        gz = out_z.grad
        gza = out_za.grad
        if gkl is None and gz is None and gza is None:
            return
        g_mean = np.zeros_like(md)
        g_std = np.zeros_like(sd)
        gz_eff = None
        if gz is not None:
            gz_eff = gz
        if gza is not None:
            half = gza[:, :m] + gza[:, m:]
            gz_eff = half if gz_eff is None else gz_eff + half
        if gz_eff is not None:
            g_mean[:, m:] += gz_eff
            g_std[:, m:] += gz_eff * noise
        if gkl is not None:
            scaled = gkl * delta / vp
            g_mean[:, m:] += scaled
            g_mean[:, :m] -= scaled
            g_std[:, m:] += gkl * (sq / vp - 1.0 / sq)
            g_std[:, :m] += gkl * (1.0 / sp - quad / (vp * sp))
        _accumulate(mean, g_mean)
        _accumulate(std, g_std)

    tape = active_tape()
    if tape is not None and (mean.requires_grad or std.requires_grad):
        kl.requires_grad = True
        out_z.requires_grad = True
        out_za.requires_grad = True
        tape.record(backward_fn)
    return kl, out_z, out_za


def gba_update(prior: DiagGaussian, observations, weights) -> DiagGaussian:
    """Condition a factorized-Gaussian prior on per-neighbor latent
    observations weighted by the 1-hop adjacency row.

    ``observations`` is a sequence of DiagGaussians shaped like the prior;
    ``weights`` the matching nonnegative adjacency entries. Zero-weight
    neighbors leave the posterior equal to the prior bit-for-bit.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n = len(observations)
    if weights.shape != (n,):
        raise ValueError("gba_update: one weight per observation required")
    if np.any(weights < 0.0):
        raise ValueError("gba_update: weights must be nonnegative")
    shape = prior.shape
    if len(shape) < 1:
        raise ValueError("gba_update: prior must be at least 1-d")
    rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
    d = shape[-1]
    mu = reshape(prior.mean, (1, 1, rows, d))
    sigma = reshape(prior.std, (1, 1, rows, d))
    if n:
        for o in observations:
            if o.shape != shape:
                raise ValueError("gba_update: observation shape mismatch")
        obs_mean = concat([reshape(o.mean, (1, rows, d)) for o in observations], axis=0)
        obs_std = concat([reshape(o.std, (1, rows, d)) for o in observations], axis=0)
        obs_mean = reshape(obs_mean, (1, n, rows, d))
        obs_std = reshape(obs_std, (1, n, rows, d))
    else:
        obs_mean = Tensor(np.zeros((1, 0, rows, d)))
        obs_std = Tensor(np.ones((1, 0, rows, d)))
    out_mean, out_std = _gba_posterior(mu, sigma, obs_mean, obs_std,
                                       weights.reshape(1, 1, n))
    return DiagGaussian(reshape(out_mean, shape), reshape(out_std, shape))


def _likelihood(model: StgnpModel, z_list: list[Tensor],
                x_target: Tensor | None) -> DiagGaussian:
    parts = list(z_list)
    if model.config.d_x > 0 and x_target is not None:
        parts.append(x_target)
    x = concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    hid = tanh(conv1x1(x, model["lik.h1.weight"], model["lik.h1.bias"]))
    hid = tanh(conv1x1(hid, model["lik.h2.weight"], model["lik.h2.bias"]))
    mean = conv1x1(hid, model["lik.mean.weight"], model["lik.mean.bias"])
    raw = conv1x1(hid, model["lik.raw.weight"], model["lik.raw.bias"])
    return DiagGaussian(mean, bounded_std(raw, model.config.sigma_min_likelihood))


def _stochastic_stage(model: StgnpModel, states: list[LayerState], a1_stacked,
                      n_targets: int, noise: list | None, mode: str,
                      posterior: bool, want_distributions: bool = True):
    """Top-down pass over layers.

    With ``posterior=True`` the states carry 2M stacked target rows; each
    layer computes prior (rows :M) and posterior (rows M:) in one dispatch,
    conditions both with the same observations, and the next layer's
    conditioning sample is drawn from the posterior. Returns per-layer
    distributions, samples and KL terms (ascending layer order).
    """
    cfg = model.config
    b, s_rows, t_len, _ = states[0].v.data.shape
    m = n_targets
    z_above = Tensor(np.zeros((b, s_rows, t_len, cfg.z_above_channels(cfg.L - 1))))
    priors: list = [None] * cfg.L
    posteriors: list = [None] * cfg.L
    samples: list = [None] * cfg.L
    kls: list = [None] * cfg.L
    for l in reversed(range(cfg.L)):
        v, h = states[l].v, states[l].h
        obs_mean, obs_std = _enc_observations(model, l, h)
        mean, std = _enc_heads(model, f"layer{l}.enc_z",
                               concat([z_above, v], axis=-1), cfg.sigma_min_latent)
        mean, std = _gba_posterior(mean, std, obs_mean, obs_std, a1_stacked)
        if posterior:
            if want_distributions:
                priors[l] = DiagGaussian(narrow(mean, 1, 0, m), narrow(std, 1, 0, m))
                posteriors[l] = DiagGaussian(narrow(mean, 1, m, m),
                                             narrow(std, 1, m, m))
            kls[l], z, z_above = _split_kl_sample(mean, std, noise[l], m)
        else:
            priors[l] = DiagGaussian(mean, std)
            z = priors[l].mean if mode == "mean" else reparameterize(priors[l], noise[l])
            z_above = z
        samples[l] = z
    return priors, posteriors, samples, kls


def generative_forward(model: StgnpModel, inputs: ModelInputs, mode: str = "mean",
                       noise: list | None = None):
    """Evaluation pass: per-layer conditioned priors plus the predictive
    Gaussian over the target signals. ``mode='mean'`` propagates latent
    means (deterministic); ``mode='sample'`` uses the supplied noise."""
    if mode not in ("mean", "sample"):
        raise ValueError("mode must be 'mean' or 'sample'")
    if mode == "sample" and noise is None:
        raise ValueError("mode='sample' requires noise arrays")
    states = strl_forward(model, inputs.y_context, inputs.x_context,
                          inputs.x_target, inputs.hops)
    priors, _, samples, _ = _stochastic_stage(
        model, states, inputs.hops[1], inputs.n_targets, noise, mode, posterior=False)
    x_tgt = as_tensor(inputs.x_target) if model.config.d_x > 0 else None
    predictive = _likelihood(model, samples, x_tgt)
    return priors, predictive


def posterior_forward(model: StgnpModel, inputs: ModelInputs, noise: list):
    """Training-side pass; returns per-layer posteriors and their samples."""
    if inputs.y_target is None:
        raise ValueError("posterior_forward requires target signals")
    states = strl_forward(model, inputs.y_context, inputs.x_context,
                          inputs.x_target, inputs.hops, y_target=inputs.y_target)
    a1 = np.concatenate([inputs.hops[1], inputs.hops[1]], axis=1)
    _, posteriors, samples, _ = _stochastic_stage(
        model, states, a1, inputs.n_targets, noise, "sample", posterior=True)
    return posteriors, samples


def elbo(model: StgnpModel, inputs: ModelInputs, noise: list):
    """Negative evidence lower bound, averaged over the windows in the batch.

    loss = (-masked log-likelihood + sum of per-layer KL(q || p)) / B, with
    prior and posterior at every layer conditioned on the same posterior
    sample from the layer above. Returns (loss tensor, diagnostics dict).
    """
    if inputs.y_target is None or inputs.mask_target is None:
        raise ValueError("elbo requires target signals and mask")
    states = strl_forward(model, inputs.y_context, inputs.x_context,
                          inputs.x_target, inputs.hops, y_target=inputs.y_target)
    a1 = np.concatenate([inputs.hops[1], inputs.hops[1]], axis=1)
    _, _, samples, kls = _stochastic_stage(
        model, states, a1, inputs.n_targets, noise, "sample", posterior=True,
        want_distributions=False)
    x_tgt = as_tensor(inputs.x_target) if model.config.d_x > 0 else None
    predictive = _likelihood(model, samples, x_tgt)
    recon = diag_gaussian_logpdf(inputs.y_target, predictive, inputs.mask_target)
    kl_total = kls[0]
    for k in kls[1:]:
        kl_total = kl_total + k
    inv_b = 1.0 / inputs.n_windows
    loss = (kl_total - recon) * inv_b
    diagnostics = {
        "recon": recon.item() * inv_b,
        "kl_per_layer": [k.item() * inv_b for k in kls],
    }
    return loss, diagnostics


def draw_latent_noise(rng: np.random.Generator, config: StgnpConfig,
                      n_windows: int, n_targets: int) -> list[np.ndarray]:
    """Per-layer standard-normal noise, drawn in one generator call."""
    block = rng.standard_normal((n_windows, n_targets, config.T,
                                 sum(config.latent_channels)))
    out, off = [], 0
    for c in config.latent_channels:
        out.append(np.ascontiguousarray(block[..., off:off + c]))
        off += c
    return out


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(model: StgnpModel, path, extra: dict | None = None) -> None:
    """Write a manifest (JSON) plus a little-endian float64 blob.

    The manifest records hyperparameters, parameter names/shapes/offsets and
    a dtype tag; loading is bit-exact.
    """
    entries = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": "stgnp-checkpoint",
        "version": 1,
        "dtype": "<f8",
        "config": asdict(model.config),
        "params": entries,
        "extra": extra or {},
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Read a checkpoint; returns (model, extra). Round-trips bit-exactly."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length).decode("utf-8"))
        blob = fh.read()
    if manifest.get("dtype") != "<f8":
        raise ValueError("unsupported checkpoint dtype")
    cfg = StgnpConfig(**manifest["config"])
    model = StgnpModel(cfg)
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        model.params[entry["name"]].data = arr.reshape(shape).astype(np.float64).copy()
    return model, manifest.get("extra", {})
