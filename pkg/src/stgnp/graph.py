"""Sensor graph construction: thresholded-Gaussian adjacency, k-hop cross
blocks between target and context sets, and node partitioning."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_KM = 6371.0


@dataclass
class GraphConfig:
    kernel_sigma: float | None = None  # None: std of pairwise distances
    threshold: float = 0.1
    K: int = 2
    distance: str = "euclidean"  # or "haversine_km"

    def __post_init__(self):
        if self.kernel_sigma is not None and self.kernel_sigma <= 0:
            raise ValueError("kernel_sigma must be positive")
        if not 0.0 <= self.threshold < 1.0:
            raise ValueError("threshold must be in [0, 1)")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.distance not in ("euclidean", "haversine_km"):
            raise ValueError(f"unknown distance '{self.distance}'")


def pairwise_distances(coords: np.ndarray, distance: str) -> np.ndarray:
    """Symmetric distance matrix; haversine expects (lat deg, lon deg) rows."""
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise ValueError("non-finite coordinates")
    if distance == "euclidean":
        diff = coords[:, None, :] - coords[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))
    lat = np.radians(coords[:, 0])
    lon = np.radians(coords[:, 1])
    dlat = np.abs(lat[:, None] - lat[None, :])
    dlon = np.abs(lon[:, None] - lon[None, :])
    a = (np.sin(dlat / 2.0) ** 2
         + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def build_adjacency(coords: np.ndarray, config: GraphConfig) -> np.ndarray:
    """Thresholded Gaussian-kernel weights from node locations.

    ``w_ij = exp(-dist(i,j)^2 / sigma^2)`` when that value clears the
    threshold, else 0; the diagonal is zero and the result is symmetric.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] < 2:
        raise ValueError("need at least 2 nodes")
    dist = pairwise_distances(coords, config.distance)
    sigma = config.kernel_sigma
    if sigma is None:
        iu = np.triu_indices(dist.shape[0], k=1)
        sigma = float(np.std(dist[iu]))
        if sigma <= 0.0:
            sigma = 1.0  # all nodes co-located; any scale gives weight 1
    w = np.exp(-(dist * dist) / (sigma * sigma))
    w[w < config.threshold] = 0.0
    np.fill_diagonal(w, 0.0)
    return w


def khop_cross_adjacency(adjacency_full: np.ndarray, K: int,
                         context_ids, target_ids) -> list[np.ndarray]:
    """Cross-set blocks ``A^k[target, context]`` for k = 0..K.

    ``A^k`` is the k-th matrix power of the full adjacency clipped entrywise
    to [0, 1]; the k = 0 block is all zeros because the identity has no
    cross-set entries.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    context_ids = np.asarray(context_ids, dtype=np.intp)
    target_ids = np.asarray(target_ids, dtype=np.intp)
    blocks = [np.zeros((target_ids.size, context_ids.size))]
    power = np.eye(adjacency_full.shape[0])
    for _ in range(K):
        power = power @ adjacency_full
        clipped = np.clip(power, 0.0, 1.0)
        blocks.append(clipped[np.ix_(target_ids, context_ids)])
    return blocks


def split_context_target(node_ids, target_fraction: float, seed: int):
    """Deterministic shuffle-split into (context_ids, target_ids) index lists."""
    n = len(node_ids)
    if n < 2:
        raise ValueError("need at least 2 nodes to split")
    if not 0.0 < target_fraction < 1.0:
        raise ValueError("target_fraction must be in (0, 1)")
    n_target = int(np.floor(n * target_fraction + 0.5))
    n_target = min(max(n_target, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    target = np.sort(perm[:n_target])
    context = np.sort(perm[n_target:])
    return context.tolist(), target.tolist()


@dataclass
class SensorGraph:
    """Immutable graph over all dataset nodes plus a fixed context/target split.

    ``powers[k]`` holds the clipped k-th power of the full adjacency so that
    cross blocks for arbitrary ad-hoc splits (the per-iteration training
    splits) can be sliced without recomputing matrix powers.
    """

    node_ids: list[str]
    coords: np.ndarray
    adjacency_full: np.ndarray
    context_ids: list[int]
    target_ids: list[int]
    config: GraphConfig
    powers: list[np.ndarray] = field(default_factory=list)
    khop_cross: list[np.ndarray] = field(default_factory=list)

    def cross_blocks(self, target_ids, context_ids) -> list[np.ndarray]:
        t = np.asarray(target_ids, dtype=np.intp)
        c = np.asarray(context_ids, dtype=np.intp)
        return [p[np.ix_(t, c)] for p in self.powers]


def build_sensor_graph(node_ids, coords, config: GraphConfig,
                       context_ids, target_ids) -> SensorGraph:
    adjacency = build_adjacency(coords, config)
    n = adjacency.shape[0]
    powers = [np.eye(n)]  # sliced cross blocks of the identity are all zero
    power = np.eye(n)
    for _ in range(config.K):
        power = power @ adjacency
        powers.append(np.clip(power, 0.0, 1.0))
    graph = SensorGraph(
        node_ids=list(node_ids),
        coords=np.asarray(coords, dtype=np.float64),
        adjacency_full=adjacency,
        context_ids=list(context_ids),
        target_ids=list(target_ids),
        config=config,
        powers=powers,
    )
    graph.khop_cross = graph.cross_blocks(graph.target_ids, graph.context_ids)
    return graph
