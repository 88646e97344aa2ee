"""Datasets: synthetic generation, CSV ingestion, missing-value masking,
train-segment standardization and window iteration.

Storage convention: a masked (missing) signal entry always holds the value
0.0, and every consumer that must ignore missing data additionally checks the
mask. Splits over time are the sequential 80/10/10 cut.
"""
from __future__ import annotations

import csv
import datetime
import math
from dataclasses import dataclass, replace

import numpy as np

from .graph import GraphConfig, build_adjacency

SEGMENTS = ("train", "val", "test")


@dataclass
class NormStats:
    y_mean: np.ndarray
    y_std: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist()
                for k in ("y_mean", "y_std", "x_mean", "x_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in d})


@dataclass
class StDataset:
    """Per-node signal/covariate sequences with observation masks."""

    node_ids: list[str]
    coords: np.ndarray  # (n, 2)
    timestamps: list  # labels (ints or ISO strings), length n_steps
    y: np.ndarray  # (n, n_steps, d_y)
    x: np.ndarray  # (n, n_steps, d_x)
    mask: np.ndarray  # (n, n_steps, d_y), {0, 1}
    norm: NormStats | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        n, t = self.y.shape[0], self.y.shape[1]
        if self.mask.shape != self.y.shape:
            raise ValueError("mask must match signal shape")
        if self.x.shape[:2] != (n, t):
            raise ValueError("covariates must align with signals")
        if len(self.node_ids) != n or len(self.timestamps) != t:
            raise ValueError("node/timestamp labels must match array shapes")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.x))):
            raise ValueError("non-finite values in dataset")
        # canonical storage: masked slots hold exactly 0.0
        self.y = self.y * self.mask

    @property
    def n_nodes(self) -> int:
        return self.y.shape[0]

    @property
    def n_steps(self) -> int:
        return self.y.shape[1]

    @property
    def d_y(self) -> int:
        return self.y.shape[2]

    @property
    def d_x(self) -> int:
        return self.x.shape[2]

    def segment_bounds(self, segment: str) -> tuple[int, int]:
        """Half-open [start, end) step range of the 80/10/10 sequential cut."""
        if segment not in SEGMENTS:
            raise ValueError(f"unknown segment '{segment}'")
        t = self.n_steps
        train_end = int(math.floor(0.8 * t))
        val_end = int(math.floor(0.9 * t))
        return {"train": (0, train_end),
                "val": (train_end, val_end),
                "test": (val_end, t)}[segment]

    def inverse_y(self, values: np.ndarray) -> np.ndarray:
        if self.norm is None:
            return values
        return values * self.norm.y_std + self.norm.y_mean

    def y_scale(self) -> np.ndarray:
        return np.ones(self.d_y) if self.norm is None else self.norm.y_std


def generate_synthetic(n_nodes: int, n_steps: int, seed: int, alpha: float = 0.8,
                       beta: float = 0.5, gamma: float = 0.1,
                       burn_in: int = 100) -> StDataset:
    """Graph-diffused daily sinusoid with white-noise forcing.

    Nodes sit uniformly in the unit square; the signal follows
    ``y[t] = alpha * (A_norm @ y[t-1]) + beta * sin(2 pi t / 24 + phase) +
    gamma * eps[t]`` with per-node random phases, where ``A_norm`` is the
    row-normalized default thresholded-Gaussian adjacency. The first
    ``burn_in`` steps are discarded. Covariates are the node's own phase
    sinusoid plus independent white noise, so the signal is partially
    predictable from both the graph and the covariates.
    """
    if n_nodes < 4:
        raise ValueError("need at least 4 nodes")
    if n_steps < 240:
        raise ValueError("need at least 240 steps (10 windows of 24)")
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0.0, 1.0, size=(n_nodes, 2))
    phases = rng.uniform(0.0, 2.0 * math.pi, size=n_nodes)
    total = burn_in + n_steps
    x_noise = rng.standard_normal((n_nodes, total))
    eps = rng.standard_normal((n_nodes, total))

    adjacency = build_adjacency(coords, GraphConfig())
    row_sums = adjacency.sum(axis=1)
    for i in np.flatnonzero(row_sums == 0.0):
        adjacency[i, i] = 1.0  # isolated node keeps its own history
    a_norm = adjacency / adjacency.sum(axis=1, keepdims=True)

    t_grid = np.arange(total)
    sin_mat = np.sin(2.0 * math.pi * t_grid[None, :] / 24.0 + phases[:, None])
    y = np.zeros((n_nodes, total))
    prev = np.zeros(n_nodes)
    for t in range(total):
        prev = alpha * (a_norm @ prev) + beta * sin_mat[:, t] + gamma * eps[:, t]
        y[:, t] = prev

    keep = slice(burn_in, total)
    x = np.stack([sin_mat[:, keep], x_noise[:, keep]], axis=-1)
    return StDataset(
        node_ids=[f"n{i:03d}" for i in range(n_nodes)],
        coords=coords,
        timestamps=list(range(n_steps)),
        y=y[:, keep, None],
        x=x,
        mask=np.ones((n_nodes, n_steps, 1)),
    )


def corrupt_missing(dataset: StDataset, ratio: float, seed: int) -> StDataset:
    """Mark a uniform random fraction of currently observed entries missing.

    Exactly ``floor(ratio * n_observed)`` entries get value 0 and mask 0.
    Applied before standardization.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError("ratio must be in [0, 1)")
    if dataset.norm is not None:
        raise ValueError("corrupt before standardizing")
    mask = dataset.mask.copy()
    observed = np.flatnonzero(mask.reshape(-1) == 1.0)
    k = int(math.floor(ratio * observed.size))
    if k > 0:
        hit = np.random.default_rng(seed).choice(observed, size=k, replace=False)
        flat = mask.reshape(-1)
        flat[hit] = 0.0
    y = dataset.y * mask
    return replace(dataset, y=y, mask=mask)


def standardize(dataset: StDataset) -> StDataset:
    """Z-score per feature using train-segment statistics.

    Signal statistics use observed train entries only; constant features get
    std 1; masked slots stay exactly 0 after the transform. The stats are
    kept on the returned dataset so metrics can be reported in original
    units.
    """
    if dataset.norm is not None:
        raise ValueError("dataset is already standardized")
    lo, hi = dataset.segment_bounds("train")
    if hi - lo < 1:
        raise ValueError("empty train segment")
    y_tr = dataset.y[:, lo:hi, :]
    m_tr = dataset.mask[:, lo:hi, :]
    counts = m_tr.sum(axis=(0, 1))
    y_mean = np.zeros(dataset.d_y)
    y_std = np.ones(dataset.d_y)
    for f in range(dataset.d_y):
        if counts[f] > 0:
            vals = y_tr[:, :, f][m_tr[:, :, f] == 1.0]
            y_mean[f] = vals.mean()
            std = vals.std()
            y_std[f] = std if std > 0.0 else 1.0
    if dataset.d_x > 0:
        x_tr = dataset.x[:, lo:hi, :]
        x_mean = x_tr.mean(axis=(0, 1))
        x_std = x_tr.std(axis=(0, 1))
        x_std[x_std == 0.0] = 1.0
    else:
        x_mean = np.zeros(0)
        x_std = np.ones(0)
    norm = NormStats(y_mean=y_mean, y_std=y_std, x_mean=x_mean, x_std=x_std)
    y = ((dataset.y - y_mean) / y_std) * dataset.mask
    x = (dataset.x - x_mean) / x_std if dataset.d_x > 0 else dataset.x
    return replace(dataset, y=y, x=x, norm=norm)


def apply_norm(dataset: StDataset, norm: NormStats) -> StDataset:
    """Standardize with externally supplied statistics (checkpoint reuse)."""
    if dataset.norm is not None:
        raise ValueError("dataset is already standardized")
    y = ((dataset.y - norm.y_mean) / norm.y_std) * dataset.mask
    x = (dataset.x - norm.x_mean) / norm.x_std if dataset.d_x > 0 else dataset.x
    return replace(dataset, y=y, x=x, norm=norm)


@dataclass
class Window:
    start: int
    t_len: int
    context_ids: list[int]
    target_ids: list[int]


def iter_windows(dataset: StDataset, segment: str, t_len: int, stride: int, *,
                 context_ids=None, target_ids=None, node_pool=None,
                 target_count: int | None = None,
                 rng: np.random.Generator | None = None) -> list[Window]:
    """Windows over one time segment.

    Two modes: a fixed (context_ids, target_ids) partition applied to every
    window (evaluation; use stride == t_len for non-overlapping coverage), or
    a fresh random split of ``node_pool`` into ``target_count`` targets per
    window (training; stride 1).
    """
    lo, hi = dataset.segment_bounds(segment)
    if hi - lo < t_len:
        raise ValueError(f"segment '{segment}' shorter than one window")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    fixed = context_ids is not None
    if fixed == (node_pool is not None):
        raise ValueError("pass either a fixed split or a node pool, not both")
    windows = []
    for start in range(lo, hi - t_len + 1, stride):
        if fixed:
            ctx, tgt = list(context_ids), list(target_ids)
        else:
            pool = np.asarray(node_pool)
            if target_count is None or not 1 <= target_count < pool.size:
                raise ValueError("target_count must be in [1, len(node_pool))")
            chosen = rng.choice(pool.size, size=target_count, replace=False)
            sel = np.zeros(pool.size, dtype=bool)
            sel[chosen] = True
            tgt = pool[sel].tolist()
            ctx = pool[~sel].tolist()
        windows.append(Window(start=start, t_len=t_len, context_ids=ctx,
                              target_ids=tgt))
    return windows


# ---------------------------------------------------------------------------
# CSV interface: node_id,lat,lon,timestamp,y_0..y_{dy-1},x_0..x_{dx-1}
# ---------------------------------------------------------------------------

def _format_value(v: float) -> str:
    return repr(float(v))


def write_csv(dataset: StDataset, path) -> None:
    """Write the dataset in the ingestion format; masked entries are blank."""
    if dataset.norm is not None:
        raise ValueError("write original-unit datasets only")
    y_cols = [f"y_{j}" for j in range(dataset.d_y)]
    x_cols = [f"x_{j}" for j in range(dataset.d_x)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "lat", "lon", "timestamp"] + y_cols + x_cols)
        for i, node in enumerate(dataset.node_ids):
            lat, lon = dataset.coords[i]
            for t, stamp in enumerate(dataset.timestamps):
                row = [node, _format_value(lat), _format_value(lon), str(stamp)]
                for j in range(dataset.d_y):
                    row.append(_format_value(dataset.y[i, t, j])
                               if dataset.mask[i, t, j] == 1.0 else "")
                for j in range(dataset.d_x):
                    row.append(_format_value(dataset.x[i, t, j]))
                writer.writerow(row)


def _parse_timestamp(text: str, row_no: int):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return datetime.datetime.fromisoformat(text)
    except ValueError:
        raise ValueError(
            f"row {row_no}: timestamp '{text}' is neither an integer step "
            f"nor ISO-8601") from None


def load_csv(path) -> StDataset:
    """Read a dataset; empty signal fields become masked zeros.

    Rows may arrive in any order. Every node must cover the same complete,
    regularly spaced timestamp grid; violations are reported with the file
    row numbers involved.
    """
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = list(reader)

    required = ["node_id", "lat", "lon", "timestamp"]
    if header[: len(required)] != required:
        raise ValueError(f"{path}: header must start with {','.join(required)}")
    feature_cols = header[len(required):]
    y_cols = [c for c in feature_cols if c.startswith("y_")]
    x_cols = [c for c in feature_cols if c.startswith("x_")]
    if feature_cols != y_cols + x_cols or y_cols != [f"y_{j}" for j in range(len(y_cols))] \
            or x_cols != [f"x_{j}" for j in range(len(x_cols))]:
        raise ValueError(f"{path}: feature columns must be y_0..y_k then x_0..x_m")
    if not y_cols:
        raise ValueError(f"{path}: at least one y_ column is required")
    d_y, d_x = len(y_cols), len(x_cols)

    node_order: list[str] = []
    node_rows: dict[str, dict] = {}
    for off, row in enumerate(rows):
        row_no = off + 2  # 1-based, after the header
        if len(row) != len(header):
            raise ValueError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
        node = row[0]
        lat, lon = float(row[1]), float(row[2])
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"row {row_no}: non-finite coordinates")
        stamp = _parse_timestamp(row[3], row_no)
        if node not in node_rows:
            node_order.append(node)
            node_rows[node] = {"coords": (lat, lon), "coord_row": row_no, "stamps": {}}
        info = node_rows[node]
        if info["coords"] != (lat, lon):
            raise ValueError(
                f"row {row_no}: node {node} coordinates differ from row {info['coord_row']}")
        if stamp in info["stamps"]:
            first = info["stamps"][stamp][0]
            raise ValueError(
                f"row {row_no}: duplicate (node {node}, timestamp {row[3]}) "
                f"first seen at row {first}")
        y_vals, m_vals = [], []
        for j in range(d_y):
            cell = row[4 + j].strip()
            if cell == "":
                y_vals.append(0.0)
                m_vals.append(0.0)
            else:
                y_vals.append(float(cell))
                m_vals.append(1.0)
        x_vals = []
        for j in range(d_x):
            cell = row[4 + d_y + j].strip()
            x_vals.append(0.0 if cell == "" else float(cell))
        info["stamps"][stamp] = (row_no, y_vals, m_vals, x_vals)

    if not node_order:
        raise ValueError(f"{path}: no data rows")
    all_stamps = sorted({s for info in node_rows.values() for s in info["stamps"]})
    if len(all_stamps) >= 3:
        deltas = {all_stamps[i + 1] - all_stamps[i] for i in range(len(all_stamps) - 1)}
        if len(deltas) != 1:
            raise ValueError(f"{path}: timestamps are not a regular grid: deltas {sorted(deltas)}")
    for node in node_order:
        missing = [s for s in all_stamps if s not in node_rows[node]["stamps"]]
        if missing:
            raise ValueError(
                f"{path}: node {node} is missing timestamp {missing[0]} "
                f"({len(missing)} missing rows total)")

    n, t = len(node_order), len(all_stamps)
    y = np.zeros((n, t, d_y))
    mask = np.zeros((n, t, d_y))
    x = np.zeros((n, t, d_x))
    coords = np.zeros((n, 2))
    for i, node in enumerate(node_order):
        coords[i] = node_rows[node]["coords"]
        for ti, stamp in enumerate(all_stamps):
            _, y_vals, m_vals, x_vals = node_rows[node]["stamps"][stamp]
            y[i, ti] = y_vals
            mask[i, ti] = m_vals
            x[i, ti] = x_vals
    stamps_out = [s.isoformat() if isinstance(s, datetime.datetime) else s
                  for s in all_stamps]
    return StDataset(node_ids=node_order, coords=coords, timestamps=stamps_out,
                     y=y, x=x, mask=mask)
