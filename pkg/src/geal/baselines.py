"""Reference selection strategies: k-center greedy over global features, and
uniform random sampling.

kcenter_greedy is written as an independent farthest-first traversal (not via
the selector module) so the two can cross-check each other: with one cluster
per image equal to its global feature, selector's fds strategy and this
traversal must produce identical orders under the shared seed and tie-break.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DistanceDomainError
from .feature_store import read_dump
from .selector import SelectionResult

BASELINE_METHODS = ("kcenter_global", "random")


@dataclass
class BaselineConfig:
    method: str = "kcenter_global"
    distance: str = "cosine"
    budget: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.method not in BASELINE_METHODS:
            raise ConfigError(
                f"method must be one of {BASELINE_METHODS}, got {self.method!r}"
            )
        if self.distance not in ("cosine", "euclidean"):
            raise ConfigError(f"unknown distance {self.distance!r}")
        if self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")

    def to_dict(self):
        return {
            "method": self.method,
            "distance": self.distance,
            "budget": self.budget,
            "seed": self.seed,
        }


def load_global_features(dump_path, distance: str = "euclidean"):
    """Stream a dump and keep only ids and global feature vectors (float64)."""
    ids, rows = [], []
    for rec in read_dump(dump_path, require_nonzero_rows=(distance == "cosine")):
        ids.append(rec.image_id)
        rows.append(rec.global_feature.astype(np.float64))
    if not ids:
        raise ConfigError(f"dump {dump_path!r} holds no records")
    return ids, np.vstack(rows)


def _dist_to_point(feats, units, point, kind):
    if kind == "cosine":
        n = np.linalg.norm(point)
        if n == 0.0:
            raise DistanceDomainError("cosine distance undefined for the zero vector")
        return np.clip(1.0 - units @ (point / n), 0.0, 2.0)
    diff = feats - point[None, :]
    return np.sqrt((diff * diff).sum(axis=1))


def kcenter_greedy(dump_path, config: BaselineConfig) -> SelectionResult:
    """Farthest-first traversal over global features.

    A uniformly random seed point starts the traversal; every later step adds
    the point farthest from its nearest selected point, ties broken by
    ascending image id. The covering radius after each step is recorded.
    """
    t0 = time.perf_counter()
    ids, feats = load_global_features(dump_path, config.distance)
    n = len(ids)
    if config.budget > n:
        raise ConfigError(f"budget {config.budget} exceeds pool size {n}")
    units = None
    if config.distance == "cosine":
        norms = np.linalg.norm(feats, axis=1)
        if np.any(norms == 0):
            raise DistanceDomainError(
                "cosine distance undefined: a global feature is the zero vector"
            )
        units = feats / norms[:, None]
    rng = np.random.default_rng(config.seed)
    first = int(rng.integers(n))
    selected = [first]
    selected_mask = np.zeros(n, dtype=bool)
    selected_mask[first] = True
    md = _dist_to_point(feats, units, feats[first], config.distance)
    md[first] = 0.0
    t_init = time.perf_counter() - t0
    steps = [
        {"image_id": ids[first], "distance": None, "covering_radius": float(md.max())}
    ]
    while len(selected) < config.budget:
        mx = float(md.max())
        if mx > 0.0:
            cand = np.nonzero(md == mx)[0]
            nxt = int(min(cand, key=lambda i: ids[i]))
            dist = mx
        else:
            unsel = np.nonzero(~selected_mask)[0]
            nxt = int(unsel[int(rng.integers(unsel.size))])
            dist = 0.0
        selected.append(nxt)
        selected_mask[nxt] = True
        np.minimum(md, _dist_to_point(feats, units, feats[nxt], config.distance), out=md)
        md[nxt] = 0.0
        steps.append(
            {"image_id": ids[nxt], "distance": dist, "covering_radius": float(md.max())}
        )
    total = time.perf_counter() - t0
    return SelectionResult(
        selected=[ids[i] for i in selected],
        steps=steps,
        config=config.to_dict(),
        seed=config.seed,
        timings_ms={"init": t_init * 1e3, "select": (total - t_init) * 1e3,
                    "total": total * 1e3},
        method="kcenter_global",
    )


def random_select(ids, budget: int, seed: int) -> SelectionResult:
    """Uniform sample of `budget` ids without replacement, in draw order."""
    ids = list(ids)
    if budget > len(ids):
        raise ConfigError(f"budget {budget} exceeds pool size {len(ids)}")
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(ids), size=budget, replace=False)
    total = time.perf_counter() - t0
    return SelectionResult(
        selected=[ids[int(i)] for i in picks],
        steps=[{"image_id": ids[int(i)], "distance": None} for i in picks],
        config={"method": "random", "budget": budget, "seed": seed},
        seed=seed,
        timings_ms={"init": 0.0, "select": total * 1e3, "total": total * 1e3},
        method="random",
    )
