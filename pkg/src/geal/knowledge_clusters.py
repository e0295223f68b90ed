"""Knowledge-cluster extraction: attention filtering followed by per-image K-Means.

Also owns the GEALKC01 cluster-file format:

    header: magic "GEALKC01" | version u32 (=1) | image_count u64 | feature_dim u32
    record: id_len u32 | image_id UTF-8 | cluster_count u32
            | centroids f32[cluster_count * feature_dim] | member_counts u32[cluster_count]
"""

from __future__ import annotations

import hashlib
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError, ValidationError
from .feature_store import (
    ImageRecord,
    read_dump,
    read_record_at,
    scan_record_offsets,
)

KC_MAGIC = b"GEALKC01"
KC_VERSION = 1

_KC_HEADER = struct.Struct("<8sIQI")

DEFAULT_TAU = 0.5
DEFAULT_K = 5
DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-6
DEFAULT_N_INIT = 10


@dataclass
class FilteredFeatures:
    """The retained top-attention rows of one image, in float64."""

    image_id: str
    rows: np.ndarray
    retained_count: int
    retained_attention_mass: float


@dataclass
class KnowledgeClusterSet:
    """Per-image cluster centroids and their member counts."""

    image_id: str
    centroids: np.ndarray
    member_counts: np.ndarray


@dataclass
class KMeansResult:
    centroids: np.ndarray
    member_counts: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list


def sort_regions_by_attention(record: ImageRecord) -> np.ndarray:
    """Region indices ordered by non-increasing attention, ties by original index."""
    att = record.attention.astype(np.float64)
    return np.argsort(-att, kind="stable")


def filter_by_attention(record: ImageRecord, tau: float) -> FilteredFeatures:
    """Keep the largest attention-sorted prefix whose cumulative mass stays <= tau.

    tau=1 keeps every region. If even the single top region exceeds tau, that
    one region is kept anyway so every image yields at least one cluster.
    """
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must be in (0, 1], got {tau}")
    perm = sort_regions_by_attention(record)
    att = record.normalized_attention()[perm]
    r = att.shape[0]
    if tau == 1.0:
        t = r
    else:
        cums = np.cumsum(att)
        t = int(np.searchsorted(cums, tau, side="right"))
        t = min(max(t, 1), r)
    rows = record.patch_features[perm[:t]].astype(np.float64)
    mass = float(att[:t].sum())
    return FilteredFeatures(record.image_id, rows, t, mass)


def _weighted_pick(rng, weights):
    # Draw an index proportionally to non-negative weights; zero-weight entries
    # can never be returned (searchsorted side='right' skips empty intervals).
    cum = np.cumsum(weights)
    total = cum[-1]
    v = rng.random() * total
    return min(int(np.searchsorted(cum, v, side="right")), len(weights) - 1)


def _seed_plusplus(points, k, x2, rng):
    t = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(t))]
    if k == 1:
        return centers
    d2 = np.maximum(x2 - 2.0 * (points @ centers[0]) + centers[0] @ centers[0], 0.0)
    for j in range(1, k):
        idx = _weighted_pick(rng, d2)
        centers[j] = points[idx]
        nd2 = np.maximum(x2 - 2.0 * (points @ centers[j]) + centers[j] @ centers[j], 0.0)
        np.minimum(d2, nd2, out=d2)
    return centers


def _lloyd(points, k, x2, scale, centers, max_iters, tol):
    """One Lloyd run from given initial centers. Returns a KMeansResult."""
    t = points.shape[0]
    idx = np.arange(t)
    labels_old = None
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        c2 = (centers * centers).sum(axis=1)
        d2 = x2[:, None] - 2.0 * (points @ centers.T) + c2[None, :]
        np.maximum(d2, 0.0, out=d2)
        labels = d2.argmin(axis=1)
        counts = np.bincount(labels, minlength=k)
        # repair empty clusters: steal the point currently farthest from its
        # centroid (never a sole member), lowest empty index first
        for j in np.nonzero(counts == 0)[0]:
            own = d2[idx, labels].copy()
            own[counts[labels] <= 1] = -1.0
            steal = int(own.argmax())
            counts[labels[steal]] -= 1
            labels[steal] = j
            counts[j] = 1
        history.append(float(d2[idx, labels].sum()))
        onehot = np.zeros((t, k))
        onehot[idx, labels] = 1.0
        new_centers = (onehot.T @ points) / counts[:, None]
        shift = float(np.abs(new_centers - centers).max())
        centers = new_centers
        if labels_old is not None and np.array_equal(labels, labels_old):
            break
        labels_old = labels
        if shift <= tol * scale:
            break
    diffs = points - centers[labels]
    inertia = float((diffs * diffs).sum())
    history.append(inertia)
    return KMeansResult(centers, counts, labels, inertia, n_iter, history)


def kmeans(
    points,
    k: int,
    seed,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    n_init: int = DEFAULT_N_INIT,
) -> KMeansResult:
    """Lloyd's algorithm with squared-Euclidean objective and k-means++ seeding.

    The effective cluster count is min(k, number of distinct rows), so feeding
    fewer points than k shrinks the result instead of erroring. Runs `n_init`
    independently seeded restarts (drawn sequentially from one PCG64 stream
    seeded with `seed`) and returns the run with the lowest objective; every
    returned centroid is the exact mean of its assigned points.
    """
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
    if points.ndim != 2 or points.shape[0] < 1:
        raise ConfigError(f"kmeans needs a non-empty 2-D point matrix, got {points.shape}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    t = points.shape[0]
    k_eff = min(k, len(np.unique(points, axis=0)))
    x2 = (points * points).sum(axis=1)
    scale = float(np.sqrt(x2.max())) or 1.0
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(n_init, 1)):
        centers = _seed_plusplus(points, k_eff, x2, rng)
        res = _lloyd(points, k_eff, x2, scale, centers, max_iters, tol)
        if best is None or res.inertia < best.inertia:
            best = res
        if t <= k_eff:
            break  # zero-cost solution, restarts cannot improve
    return best


def derive_image_seed(seed: int, image_id: str) -> int:
    """Stable 64-bit per-image seed: keyed BLAKE2b of the image id.

    The global seed (mod 2^64, little-endian) is the hash key, so extraction
    results are independent of record order and worker count.
    """
    key = (int(seed) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    digest = hashlib.blake2b(image_id.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def extract_knowledge_clusters(
    record: ImageRecord,
    tau: float = DEFAULT_TAU,
    k: int = DEFAULT_K,
    seed: int = 0,
) -> KnowledgeClusterSet:
    """Filter one image's regions by attention mass, then cluster the survivors."""
    filtered = filter_by_attention(record, tau)
    res = kmeans(filtered.rows, k, derive_image_seed(seed, record.image_id))
    return KnowledgeClusterSet(record.image_id, res.centroids, res.member_counts)


@dataclass
class ClusterRecord:
    """One image's entry in a GEALKC01 file (centroids as stored, float32)."""

    image_id: str
    centroids: np.ndarray
    member_counts: np.ndarray


def write_cluster_file(records: Iterable[ClusterRecord], feature_dim: int, path) -> int:
    """Write cluster records to a GEALKC01 file; back-patches the count."""
    path = os.fspath(path)
    count = 0
    f = open(path, "wb")
    try:
        f.write(_KC_HEADER.pack(KC_MAGIC, KC_VERSION, 0, feature_dim))
        for rec in records:
            cents = np.ascontiguousarray(np.asarray(rec.centroids, dtype=np.float32))
            counts = np.ascontiguousarray(np.asarray(rec.member_counts, dtype=np.uint32))
            if cents.ndim != 2 or cents.shape[1] != feature_dim:
                raise FormatError(
                    f"cluster record {rec.image_id!r}: centroid shape {cents.shape} "
                    f"does not match feature_dim {feature_dim}"
                )
            if counts.shape != (cents.shape[0],) or cents.shape[0] < 1:
                raise ValidationError(
                    f"cluster record {rec.image_id!r}: bad member_counts",
                    image_id=rec.image_id,
                )
            id_bytes = rec.image_id.encode("utf-8")
            f.write(struct.pack("<I", len(id_bytes)))
            f.write(id_bytes)
            f.write(struct.pack("<I", cents.shape[0]))
            f.write(cents.tobytes())
            f.write(counts.tobytes())
            count += 1
        f.seek(0)
        f.write(_KC_HEADER.pack(KC_MAGIC, KC_VERSION, count, feature_dim))
        f.close()
    except BaseException:
        f.close()
        if os.path.exists(path):
            os.unlink(path)
        raise
    return count


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CorruptionError(f"cluster file truncated while reading {what}")
    return buf


def read_cluster_header(f):
    raw = f.read(_KC_HEADER.size)
    if len(raw) < _KC_HEADER.size:
        raise FormatError("file too short to hold a GEALKC01 header")
    magic, version, image_count, feature_dim = _KC_HEADER.unpack(raw)
    if magic != KC_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {KC_MAGIC!r}")
    if version != KC_VERSION:
        raise FormatError(f"unsupported cluster-file version {version}")
    return image_count, feature_dim


def iter_cluster_file(path) -> Iterator[ClusterRecord]:
    """Stream validated ClusterRecords from a GEALKC01 file."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        image_count, feature_dim = read_cluster_header(f)
        seen = set()
        for i in range(image_count):
            (id_len,) = struct.unpack("<I", _read_exact(f, 4, f"record {i} id_len"))
            image_id = _read_exact(f, id_len, f"record {i} image_id").decode("utf-8")
            (kp,) = struct.unpack(
                "<I", _read_exact(f, 4, f"record {image_id!r} cluster_count")
            )
            if kp == 0:
                raise ValidationError(
                    f"cluster record {image_id!r}: zero clusters", image_id=image_id
                )
            cents = np.frombuffer(
                _read_exact(f, 4 * kp * feature_dim, f"record {image_id!r} centroids"),
                dtype="<f4",
            ).reshape(kp, feature_dim)
            counts = np.frombuffer(
                _read_exact(f, 4 * kp, f"record {image_id!r} member_counts"),
                dtype="<u4",
            )
            if np.any(counts == 0):
                raise ValidationError(
                    f"cluster record {image_id!r}: zero member count",
                    image_id=image_id,
                )
            if image_id in seen:
                raise ValidationError(
                    f"duplicate image_id {image_id!r}", image_id=image_id
                )
            seen.add(image_id)
            yield ClusterRecord(image_id, cents, counts)
        if f.read(1):
            raise CorruptionError("trailing bytes after the last cluster record")


def _extract_one(record, tau, k, seed):
    kc = extract_knowledge_clusters(record, tau=tau, k=k, seed=seed)
    return ClusterRecord(
        kc.image_id,
        kc.centroids.astype(np.float32),
        kc.member_counts.astype(np.uint32),
    )


_worker_state = {}


def _worker_init(path, feature_dim, tau, k, seed):
    _worker_state["f"] = open(path, "rb")
    _worker_state["args"] = (feature_dim, tau, k, seed)


def _worker_chunk(offsets):
    f = _worker_state["f"]
    feature_dim, tau, k, seed = _worker_state["args"]
    out = []
    for off in offsets:
        rec = read_record_at(f, feature_dim, off)
        rec.validate()
        cr = _extract_one(rec, tau, k, seed)
        out.append((cr.image_id, cr.centroids.tobytes(), cr.member_counts.tobytes(),
                    cr.centroids.shape[0]))
    return out


def extract_all(
    dump_path,
    out_path,
    tau: float = DEFAULT_TAU,
    k: int = DEFAULT_K,
    seed: int = 0,
    workers: int = 1,
    require_nonzero_rows: bool = False,
    progress=None,
) -> dict:
    """Extract knowledge clusters for every record of a dump into a GEALKC01 file.

    Output is byte-identical for any worker count (per-image seeds are derived
    from the image id). A partial output file is removed on failure. Returns a
    summary with counts and per-phase timings.
    """
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must be in (0, 1], got {tau}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    dump_path = os.fspath(dump_path)
    out_path = os.fspath(out_path)
    t0 = time.perf_counter()
    feature_dim, offsets = scan_record_offsets(dump_path)
    t_scan = time.perf_counter() - t0

    n = len(offsets)
    total_clusters = 0
    t1 = time.perf_counter()
    try:
        if workers <= 1 or n == 0:
            def produce():
                nonlocal total_clusters
                for i, rec in enumerate(
                    read_dump(dump_path, require_nonzero_rows=require_nonzero_rows)
                ):
                    cr = _extract_one(rec, tau, k, seed)
                    total_clusters += cr.centroids.shape[0]
                    if progress and (i + 1) % 1000 == 0:
                        progress(i + 1, n)
                    yield cr

            count = write_cluster_file(produce(), feature_dim, out_path)
        else:
            chunk = max(1, min(256, n // (workers * 4) or 1))
            chunks = [offsets[i : i + chunk] for i in range(0, n, chunk)]
            results = []
            with ProcessPoolExecutor(
                max_workers=workers,
                initializer=_worker_init,
                initargs=(dump_path, feature_dim, tau, k, seed),
            ) as pool:
                done = 0
                for part in pool.map(_worker_chunk, chunks):
                    results.extend(part)
                    done += len(part)
                    if progress:
                        progress(done, n)

            def produce_parallel():
                nonlocal total_clusters
                for image_id, cent_bytes, count_bytes, kp in results:
                    cents = np.frombuffer(cent_bytes, dtype=np.float32).reshape(
                        kp, feature_dim
                    )
                    counts = np.frombuffer(count_bytes, dtype=np.uint32)
                    total_clusters += kp
                    yield ClusterRecord(image_id, cents, counts)

            count = write_cluster_file(produce_parallel(), feature_dim, out_path)
    except BaseException:
        if os.path.exists(out_path):
            os.unlink(out_path)
        raise
    t_extract = time.perf_counter() - t1
    return {
        "images": count,
        "clusters": total_clusters,
        "feature_dim": feature_dim,
        "tau": tau,
        "k": k,
        "seed": seed,
        "workers": workers,
        "timings_ms": {
            "scan": t_scan * 1e3,
            "extract": t_extract * 1e3,
            "total": (time.perf_counter() - t0) * 1e3,
        },
    }
