"""Self-contained verification entry points: the aggregation equivalence
check and a finite-difference audit of the full training loss on a toy
problem. Both are wired into the CLI and the test suite."""
from __future__ import annotations

import numpy as np

from .fullcov import check_factorized_vs_full
from .model import ModelInputs, StgnpConfig, StgnpModel, draw_latent_noise, elbo
from .tensor import finite_diff_check
from .training import xavier_init

__all__ = ["check_factorized_vs_full", "make_toy_problem", "elbo_gradient_error"]


def make_toy_problem(n_context: int = 4, n_target: int = 1, t_len: int = 8,
                     n_layers: int = 2, seed: int = 0):
    """A small fully-wired model plus one batch of inputs and fixed noise."""
    rng = np.random.default_rng(seed)
    cfg = StgnpConfig(
        d_y=1, d_x=2, L=n_layers, kernel_size=3,
        det_channels=tuple([3, 4][:n_layers] or [3]),
        latent_channels=tuple([2, 3][:n_layers] or [2]),
        d0=3, likelihood_hidden=6, K=1, T=t_len,
    )
    model = xavier_init(StgnpModel(cfg), seed=seed)
    b, n, m = 1, n_context, n_target
    a1 = rng.uniform(0.1, 1.0, size=(b, m, n))
    hops = [np.zeros((b, m, n)), a1]
    inputs = ModelInputs(
        y_context=rng.normal(size=(b, n, t_len, cfg.d_y)),
        x_context=rng.normal(size=(b, n, t_len, cfg.d_x)),
        x_target=rng.normal(size=(b, m, t_len, cfg.d_x)),
        hops=hops,
        y_target=rng.normal(size=(b, m, t_len, cfg.d_y)),
        mask_target=(rng.uniform(size=(b, m, t_len, cfg.d_y)) < 0.9).astype(np.float64),
    )
    noise = draw_latent_noise(rng, cfg, b, m)
    return model, inputs, noise


def elbo_gradient_error(n_context: int = 4, n_target: int = 1, t_len: int = 8,
                        n_layers: int = 2, seed: int = 0, h: float = 1e-5) -> float:
    """Worst relative error of the tape gradient of the training loss against
    central finite differences, over every model parameter entry."""
    model, inputs, noise = make_toy_problem(n_context, n_target, t_len,
                                            n_layers, seed)
    params = [p for _, p in model.named_parameters()]

    def program(_):
        loss, _diag = elbo(model, inputs, noise)
        return loss

    return finite_diff_check(program, params, h=h)
