"""One-shot image selection by distance-weighted sampling over knowledge clusters.

The loop mirrors k-means++ seeding at cluster granularity: a random first
image seeds the selected pool; afterwards each step draws one cluster with
probability proportional to its squared distance from the nearest already
selected cluster (strategy "probabilistic"), or deterministically picks the
farthest cluster (strategy "fds"), and admits the whole image that owns it.

Randomness comes from a single PCG64 stream seeded with the config seed and
is consumed in a fixed order: one draw to pick the initial image, then exactly
one draw per probabilistic step (uniform-fallback steps also consume one);
non-degenerate fds steps consume none.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._engine import build_engine
from .errors import ConfigError, DistanceDomainError
from .knowledge_clusters import iter_cluster_file

DISTANCE_KINDS = ("cosine", "euclidean")
STRATEGIES = ("probabilistic", "fds")


@dataclass
class SelectionConfig:
    tau: float = 0.5
    k: int = 5
    distance: str = "cosine"
    strategy: str = "probabilistic"
    budget: int = 1
    seed: int = 0
    trials: int = 3

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.distance not in DISTANCE_KINDS:
            raise ConfigError(f"distance must be one of {DISTANCE_KINDS}, got {self.distance!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")

    def to_dict(self):
        return {
            "tau": self.tau,
            "k": self.k,
            "distance": self.distance,
            "strategy": self.strategy,
            "budget": self.budget,
            "seed": self.seed,
            "trials": self.trials,
        }


def distance(a, b, kind: str) -> float:
    """Distance between two vectors: cosine (1 - cos angle, in [0, 2]) or L2."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if kind == "cosine":
        na = np.linalg.norm(a)
        nb = np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise DistanceDomainError("cosine distance undefined for the zero vector")
        return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))
    if kind == "euclidean":
        return float(np.linalg.norm(a - b))
    raise ConfigError(f"unknown distance kind {kind!r}")


class ClusterPool:
    """All knowledge clusters of a cluster file, flattened for selection.

    Clusters are stored image-major in file order: `slices[i]` gives the
    [start, stop) rows of image i inside `vecs`.
    """

    def __init__(self, ids, vecs, owner, local_idx, slices, member_counts):
        self.ids = ids
        self.vecs = vecs
        self.owner = owner
        self.local_idx = local_idx
        self.slices = slices
        self.member_counts = member_counts

    @property
    def image_count(self):
        return len(self.ids)

    @property
    def cluster_count(self):
        return self.vecs.shape[0]

    @property
    def feature_dim(self):
        return self.vecs.shape[1]

    @classmethod
    def load(cls, path) -> "ClusterPool":
        ids, mats, counts = [], [], []
        for rec in iter_cluster_file(path):
            ids.append(rec.image_id)
            mats.append(rec.centroids)
            counts.append(rec.member_counts)
        if not ids:
            raise ConfigError(f"cluster file {os.fspath(path)!r} holds no images")
        vecs = np.ascontiguousarray(np.concatenate(mats, axis=0), dtype=np.float32)
        sizes = np.array([m.shape[0] for m in mats], dtype=np.int64)
        stops = np.cumsum(sizes)
        starts = stops - sizes
        owner = np.repeat(np.arange(len(ids), dtype=np.int64), sizes)
        local_idx = np.concatenate([np.arange(n, dtype=np.int64) for n in sizes])
        return cls(ids, vecs, owner, local_idx,
                   list(zip(starts.tolist(), stops.tolist())), counts)


class SelectionState:
    """Mutable state of one selection run."""

    def __init__(self, pool, config, engine=None):
        self.pool = pool
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.engine = build_engine(pool.vecs, config.distance, config.seed,
                                   engine=engine)
        # per engine row, the owning image and in-image cluster index
        self.owner_e = pool.owner[self.engine.rowmap]
        self.local_e = pool.local_idx[self.engine.rowmap]
        self.selected: list[int] = []
        self.selected_mask = np.zeros(pool.image_count, dtype=bool)
        self.selected_cluster_count = 0
        # scratch buffers for the per-step categorical draw
        self._weights = np.empty(pool.cluster_count)
        self._cumweights = np.empty(pool.cluster_count)

    @property
    def min_dist(self):
        """Min distance per cluster, in cluster-file order."""
        return self.engine.min_dist[self.engine.invmap]

    def admit(self, image_index: int):
        """Add an image's clusters to the selected pool and kill their weight."""
        start, stop = self.pool.slices[image_index]
        self.engine.update(self.pool.vecs[start:stop].astype(np.float64))
        rows = self.engine.invmap[start:stop]
        self.engine.zero_rows(rows)
        self.selected.append(image_index)
        self.selected_mask[image_index] = True
        self.selected_cluster_count += stop - start


def init_state(clusters, config: SelectionConfig, engine=None) -> SelectionState:
    """Pick the initial image uniformly at random and prime the distance cache."""
    pool = clusters if isinstance(clusters, ClusterPool) else ClusterPool.load(clusters)
    if config.budget > pool.image_count:
        raise ConfigError(
            f"budget {config.budget} exceeds pool size {pool.image_count}"
        )
    state = SelectionState(pool, config, engine=engine)
    i0 = int(state.rng.integers(pool.image_count))
    state.admit(i0)
    return state


def update_min_dist(state: SelectionState, new_image_clusters) -> SelectionState:
    """Fold a new image's clusters into every candidate's min distance."""
    c = np.ascontiguousarray(np.asarray(new_image_clusters, dtype=np.float64))
    if c.ndim != 2 or c.shape[1] != state.pool.feature_dim:
        raise ConfigError(
            f"new clusters must be K'x{state.pool.feature_dim}, got {c.shape}"
        )
    state.engine.update(c)
    return state


def _uniform_fallback(state):
    # all remaining weights are zero (duplicate-heavy pool): pick uniformly
    # among unselected images, consuming exactly one draw
    unsel = np.nonzero(~state.selected_mask)[0]
    img = int(unsel[int(state.rng.integers(unsel.size))])
    return img, -1, 0.0


def sample_next(state: SelectionState, strategy: Optional[str] = None):
    """Pick the next image; returns (image_index, cluster_index, distance).

    probabilistic: one cluster is drawn with probability proportional to its
    squared min distance (selected images carry zero weight); fds: the cluster
    with the largest min distance wins, ties broken by ascending image id then
    cluster index. If every weight is zero, both fall back to a uniform draw
    among unselected images (cluster_index -1).
    """
    strategy = strategy or state.config.strategy
    if len(state.selected) >= state.pool.image_count:
        raise ConfigError("no unselected image remains")
    md = state.engine.min_dist
    if strategy == "probabilistic":
        w = state._weights
        cum = state._cumweights
        np.multiply(md, md, out=w)
        np.cumsum(w, out=cum)
        total = float(cum[-1])
        if not total > 0.0:
            return _uniform_fallback(state)
        v = state.rng.random() * total
        row = min(int(np.searchsorted(cum, v, side="right")), md.shape[0] - 1)
        return int(state.owner_e[row]), int(state.local_e[row]), float(md[row])
    if strategy == "fds":
        mx, rows = state.engine.max_info()
        if not mx > 0.0:
            return _uniform_fallback(state)
        best = min(
            (state.pool.ids[state.owner_e[r]], int(state.local_e[r]), int(r))
            for r in rows
        )
        row = best[2]
        return int(state.owner_e[row]), int(state.local_e[row]), float(mx)
    raise ConfigError(f"unknown strategy {strategy!r}")


@dataclass
class SelectionResult:
    """Ordered selection plus per-step metadata and wall-clock timings."""

    selected: list
    steps: list
    config: dict
    seed: int
    timings_ms: dict = field(default_factory=dict)
    method: str = "geal"

    def to_dict(self):
        return {
            "method": self.method,
            "config": self.config,
            "seed": self.seed,
            "steps": self.steps,
            "selected": self.selected,
            "timings_ms": self.timings_ms,
        }

    def write_ids(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for image_id in self.selected:
                f.write(image_id + "\n")


def select(clusters, config: SelectionConfig, engine=None) -> SelectionResult:
    """Run the full selection loop until `budget` images are chosen."""
    t0 = time.perf_counter()
    state = init_state(clusters, config, engine=engine)
    t_init = time.perf_counter() - t0
    pool = state.pool
    steps = [{"image_id": pool.ids[state.selected[0]], "distance": None}]
    per_1000 = []
    span_start = time.perf_counter()
    while len(state.selected) < config.budget:
        img, _cluster, dist = sample_next(state)
        state.admit(img)
        steps.append({"image_id": pool.ids[img], "distance": dist})
        done = len(state.selected)
        if done % 1000 == 0:
            per_1000.append((time.perf_counter() - span_start) * 1e3)
            span_start = time.perf_counter()
    total = time.perf_counter() - t0
    return SelectionResult(
        selected=[pool.ids[i] for i in state.selected],
        steps=steps,
        config=config.to_dict(),
        seed=config.seed,
        timings_ms={
            "init": t_init * 1e3,
            "per_1000_steps": per_1000,
            "select": (total - t_init) * 1e3,
            "total": total * 1e3,
        },
    )
