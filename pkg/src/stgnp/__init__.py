"""Spatio-temporal graph neural processes for sensor-signal extrapolation."""

from .tensor import (Tape, Tensor, DiagGaussian, backward, bounded_std,
                     conv1d_causal, conv1x1, diag_gaussian_kl,
                     diag_gaussian_logpdf, finite_diff_check, reparameterize)
from .graph import (GraphConfig, SensorGraph, build_adjacency,
                    build_sensor_graph, khop_cross_adjacency,
                    split_context_target)
from .data import (StDataset, NormStats, Window, corrupt_missing,
                   generate_synthetic, iter_windows, load_csv, standardize,
                   write_csv)
from .model import (LayerState, ModelInputs, StgnpConfig, StgnpModel, csgcn,
                    broadcast_token, context_update, elbo, embed_context,
                    gba_observations, gba_prior, gba_update,
                    generative_forward, load_checkpoint, posterior_forward,
                    save_checkpoint, strl_forward)
from .fullcov import (FullGaussian, check_factorized_vs_full, condition_full,
                      joint_precision)
from .training import (MetricsReport, TrainConfig, TrainResult, adam_step,
                       baseline_idw, baseline_knn, clip_gradients,
                       compute_metrics, evaluate, evaluate_baseline,
                       init_adam, train, xavier_init)

__version__ = "0.1.0"
