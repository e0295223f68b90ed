"""Exact min-distance maintenance engines for the selection loop.

Two interchangeable engines keep, for every cluster in the pool, its distance
to the nearest already-selected cluster:

* DenseEngine: plain vectorized full scan per update. Used for small pools
  and as the reference implementation.
* BlockedEngine: the pool is reordered into a two-level hierarchy of
  geometrically tight blocks (coarse k-means superblocks, median-split leaf
  blocks of a few dozen rows). Per update, triangle-inequality lower bounds
  prune whole superblocks, then leaf blocks, and a fused numba kernel screens
  the surviving rows and computes exact float64 distances only where the
  bound cannot rule out an improvement. Results match DenseEngine to float64
  rounding: bounds only ever skip rows that provably cannot improve.

Cluster vectors are held in float32 (as stored in cluster files); all
distance arithmetic is in float64.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import DistanceDomainError

# pool sizes below this use DenseEngine; above, BlockedEngine pays off
BLOCKED_MIN_POOL = 20_000

_BLOCK_SEED_TAG = 0x626C6F63  # mixes the run seed into the blocking rng stream

# bound slack: dominates the fp error of the bound computation, never of the
# exact distances themselves
_F64_MARGIN = 1e-9


def _norms64(v32, chunk=1 << 16):
    out = np.empty(v32.shape[0])
    for s in range(0, v32.shape[0], chunk):
        x = v32[s : s + chunk].astype(np.float64)
        out[s : s + chunk] = np.sqrt((x * x).sum(axis=1))
    return out


def _require_nonzero(norms, what):
    bad = np.nonzero(norms == 0)[0]
    if bad.size:
        raise DistanceDomainError(
            f"cosine distance undefined: {what} row {int(bad[0])} is the zero vector"
        )


class DenseEngine:
    """Reference engine: exact full-scan updates in float64."""

    def __init__(self, vecs_f32, kind):
        self.kind = kind
        self.m = vecs_f32.shape[0]
        self.raw = vecs_f32.astype(np.float64)
        if kind == "cosine":
            norms = np.sqrt((self.raw * self.raw).sum(axis=1))
            _require_nonzero(norms, "pool")
            self.unit = self.raw / norms[:, None]
        self.min_dist = np.full(self.m, np.inf)
        self.rowmap = np.arange(self.m, dtype=np.int64)
        self.invmap = self.rowmap

    def _dists_to(self, c64):
        if self.kind == "cosine":
            norms = np.sqrt((c64 * c64).sum(axis=1))
            _require_nonzero(norms, "update")
            dots = self.unit @ (c64 / norms[:, None]).T
            d = 1.0 - dots.max(axis=1)
            return np.clip(d, 0.0, 2.0)
        best = None
        for row in c64:
            diff = self.raw - row[None, :]
            d = np.sqrt((diff * diff).sum(axis=1))
            best = d if best is None else np.minimum(best, d)
        return best

    def update(self, c64):
        np.minimum(self.min_dist, self._dists_to(c64), out=self.min_dist)

    def zero_rows(self, engine_rows):
        self.min_dist[engine_rows] = 0.0

    def max_info(self):
        mx = float(self.min_dist.max())
        return mx, np.nonzero(self.min_dist == mx)[0]


@njit(cache=True, fastmath=True)
def _kernel_cosine(touched, starts, ends, v32, nrm, rowdist, chord_cb, c64, cnrm,
                   md, blockmax):
    # per surviving row of a touched leaf block, either the annulus bound
    # rules out any improvement or the exact dots are evaluated in float64
    kp = c64.shape[0]
    dim = v32.shape[1]
    for bi in range(touched.shape[0]):
        j = touched[bi]
        s, e = starts[j], ends[j]
        bmax = 0.0
        for i in range(s, e):
            cur = md[i]
            lb = 1e300
            for k in range(kp):
                t = chord_cb[bi, k] - rowdist[i]
                if t < 0.0:
                    t = -t
                v = 0.5 * t * t
                if v < lb:
                    lb = v
            if lb < cur + _F64_MARGIN:
                for k in range(kp):
                    acc = 0.0
                    for d in range(dim):
                        acc += v32[i, d] * c64[k, d]
                    dist = 1.0 - acc / (nrm[i] * cnrm[k])
                    if dist < 0.0:
                        dist = 0.0
                    elif dist > 2.0:
                        dist = 2.0
                    if dist < cur:
                        cur = dist
                md[i] = cur
            if cur > bmax:
                bmax = cur
        blockmax[j] = bmax


@njit(cache=True, fastmath=True)
def _kernel_euclidean(touched, starts, ends, v32, rowdist, dist_cb, c64, md,
                      blockmax, margin):
    kp = c64.shape[0]
    dim = v32.shape[1]
    for bi in range(touched.shape[0]):
        j = touched[bi]
        s, e = starts[j], ends[j]
        bmax = 0.0
        for i in range(s, e):
            cur = md[i]
            lb = 1e300
            for k in range(kp):
                t = dist_cb[bi, k] - rowdist[i]
                if t < 0.0:
                    t = -t
                if t < lb:
                    lb = t
            if lb < cur + margin:
                for k in range(kp):
                    acc = 0.0
                    for d in range(dim):
                        t = v32[i, d] - c64[k, d]
                        acc += t * t
                    dist = np.sqrt(acc)
                    if dist < cur:
                        cur = dist
                md[i] = cur
            if cur > bmax:
                bmax = cur
        blockmax[j] = bmax


class BlockedEngine:
    """Two-level block-pruned engine; exact, fast on geometrically structured
    pools and never worse than a full scan by more than the bound overhead."""

    def __init__(self, vecs_f32, kind, seed, super_rows=160, leaf_cap=32):
        self.kind = kind
        m, dim = vecs_f32.shape
        self.m = m
        rng = np.random.default_rng(
            np.random.SeedSequence((int(seed) & 0xFFFFFFFFFFFFFFFF, _BLOCK_SEED_TAG))
        )
        norms = _norms64(vecs_f32)
        if kind == "cosine":
            _require_nonzero(norms, "pool")
            self.scale = 1.0
        else:
            self.scale = float(norms.max()) or 1.0

        # geometry space: unit vectors for cosine (distances are chords),
        # raw vectors for euclidean
        geom32 = vecs_f32
        if kind == "cosine":
            geom32 = np.empty_like(vecs_f32)
            for s in range(0, m, 1 << 15):
                x = vecs_f32[s : s + (1 << 15)].astype(np.float64)
                geom32[s : s + (1 << 15)] = (x / norms[s : s + (1 << 15), None])

        n_super = int(np.clip(m // super_rows, 4, 1024))
        order, sup_of_leaf = self._build_blocks(geom32, rng, n_super, leaf_cap)
        self.rowmap = order  # engine row -> pool row
        self.invmap = np.empty(m, dtype=np.int64)
        self.invmap[order] = np.arange(m, dtype=np.int64)
        self.v32 = np.ascontiguousarray(vecs_f32[order])
        self.nrm = norms[order]

        nb = len(self._leaf_slices)
        self.starts = np.array([s for s, _ in self._leaf_slices], dtype=np.int64)
        self.ends = np.array([e for _, e in self._leaf_slices], dtype=np.int64)
        self.leaf_super = sup_of_leaf
        ns = int(self.leaf_super.max()) + 1 if nb else 0
        # children of super s are the contiguous leaf range sup_ptr[s]:sup_ptr[s+1]
        self.sup_ptr = np.searchsorted(self.leaf_super, np.arange(ns + 1))

        geom = self.v32.astype(np.float64)
        if kind == "cosine":
            geom /= self.nrm[:, None]
        self.gcent = np.zeros((nb, dim))
        self.radius = np.zeros(nb)
        self.rowdist = np.zeros(m)
        for j in range(nb):
            s, e = self.starts[j], self.ends[j]
            blk = geom[s:e]
            g = blk.mean(axis=0)
            if kind == "cosine":
                n = np.linalg.norm(g)
                g = g / n if n > 0 else blk[0]
            self.gcent[j] = g
            rd = np.sqrt(np.maximum(((blk - g) ** 2).sum(axis=1), 0.0))
            self.rowdist[s:e] = rd
            self.radius[j] = rd.max() + 1e-12 if rd.size else 0.0
        self.scent = np.zeros((ns, dim))
        self.sradius = np.zeros(ns)
        for si in range(ns):
            s = self.starts[self.sup_ptr[si]]
            e = self.ends[self.sup_ptr[si + 1] - 1]
            blk = geom[s:e]
            g = blk.mean(axis=0)
            if kind == "cosine":
                n = np.linalg.norm(g)
                g = g / n if n > 0 else blk[0]
            self.scent[si] = g
            self.sradius[si] = float(
                np.sqrt(np.maximum(((blk - g) ** 2).sum(axis=1), 0.0)).max()
            ) + 1e-12
        del geom

        self.min_dist = np.full(m, np.inf)
        self.blockmax = np.full(nb, np.inf)
        self.supmax = np.full(ns, np.inf)
        self._row_leaf = np.repeat(np.arange(nb), self.ends - self.starts)

    def _build_blocks(self, geom32, rng, n_super, cap):
        """Coarse k-means into superblocks, median-split each into leaf blocks.

        Returns (row order, super index per leaf); fills self._leaf_slices.
        """
        m = geom32.shape[0]
        sub_n = min(m, n_super * 8)
        sub = geom32[rng.choice(m, size=sub_n, replace=False)]
        centers = sub[rng.choice(sub_n, size=n_super, replace=False)].copy()
        for _ in range(3):
            lab = self._assign(sub, centers)
            for j in range(n_super):
                mask = lab == j
                if mask.any():
                    centers[j] = sub[mask].mean(axis=0)
        lab = self._assign(geom32, centers)
        order0 = np.argsort(lab, kind="stable")
        bounds = np.searchsorted(lab[order0], np.arange(n_super + 1))
        groups = []
        sup_of_leaf = []

        def split(idxs, si):
            if idxs.size <= cap:
                groups.append(idxs)
                sup_of_leaf.append(si)
                return
            x = geom32[idxs].astype(np.float64)
            d = int(x.var(axis=0).argmax())
            med = np.median(x[:, d])
            left = idxs[x[:, d] <= med]
            right = idxs[x[:, d] > med]
            if left.size == 0 or right.size == 0:
                o = np.argsort(x[:, d], kind="stable")
                half = idxs.size // 2
                left, right = idxs[o[:half]], idxs[o[half:]]
            split(left, si)
            split(right, si)

        si = 0
        for j in range(n_super):
            idxs = order0[bounds[j] : bounds[j + 1]]
            if idxs.size:
                split(idxs, si)
                si += 1
        self._leaf_slices = []
        pos = 0
        for g in groups:
            self._leaf_slices.append((pos, pos + g.size))
            pos += g.size
        return np.concatenate(groups), np.array(sup_of_leaf, dtype=np.int64)

    @staticmethod
    def _assign(x32, centers32, chunk=8192):
        lab = np.empty(x32.shape[0], dtype=np.int64)
        c = np.ascontiguousarray(centers32)
        c2 = (c.astype(np.float64) ** 2).sum(axis=1).astype(np.float32)
        for s in range(0, x32.shape[0], chunk):
            d = x32[s : s + chunk] @ c.T
            d *= -2.0
            d += c2[None, :]
            lab[s : s + chunk] = d.argmin(axis=1)
        return lab

    def _center_dists(self, centers, c64, units=None):
        if self.kind == "cosine":
            return np.sqrt(np.maximum(2.0 - 2.0 * (centers @ units.T), 0.0))
        d2 = (
            (centers * centers).sum(axis=1)[:, None]
            - 2.0 * (centers @ c64.T)
            + (c64 * c64).sum(axis=1)[None, :]
        )
        return np.sqrt(np.maximum(d2, 0.0))

    def _metric_lb(self, gap):
        # chord gap -> cosine distance for the bound comparison
        if self.kind == "cosine":
            return 0.5 * gap * gap
        return gap

    def _touched(self, c64):
        """Two-level pruning; returns (leaf indices, per-leaf center dists)."""
        units = None
        if self.kind == "cosine":
            norms = np.sqrt((c64 * c64).sum(axis=1))
            _require_nonzero(norms, "update")
            units = c64 / norms[:, None]
            margin = _F64_MARGIN
        else:
            norms = None
            margin = 1e-9 * self.scale + _F64_MARGIN
        ds = self._center_dists(self.scent, c64, units)
        gap = np.maximum(ds - self.sradius[:, None], 0.0)
        sup = np.nonzero(self._metric_lb(gap).min(axis=1) < self.supmax + margin)[0]
        if sup.size == 0:
            return (np.empty(0, dtype=np.int64), np.empty((0, c64.shape[0])),
                    norms, margin)
        cand = np.concatenate(
            [np.arange(self.sup_ptr[s], self.sup_ptr[s + 1]) for s in sup]
        )
        db = self._center_dists(self.gcent[cand], c64, units)
        gap = np.maximum(db - self.radius[cand, None], 0.0)
        keep = self._metric_lb(gap).min(axis=1) < self.blockmax[cand] + margin
        return cand[keep], db[keep], norms, margin

    def update(self, c64):
        c64 = np.ascontiguousarray(c64, dtype=np.float64)
        touched, dcb, norms, margin = self._touched(c64)
        if touched.size == 0:
            return
        if self.kind == "cosine":
            _kernel_cosine(
                touched, self.starts, self.ends, self.v32, self.nrm, self.rowdist,
                dcb, c64, norms, self.min_dist, self.blockmax,
            )
        else:
            _kernel_euclidean(
                touched, self.starts, self.ends, self.v32, self.rowdist,
                dcb, c64, self.min_dist, self.blockmax, margin,
            )
        self._refresh_supmax(np.unique(self.leaf_super[touched]))

    def _refresh_supmax(self, supers):
        for s in supers:
            lo, hi = self.sup_ptr[s], self.sup_ptr[s + 1]
            self.supmax[s] = self.blockmax[lo:hi].max()

    def zero_rows(self, engine_rows):
        self.min_dist[engine_rows] = 0.0
        leaves = np.unique(self._row_leaf[engine_rows])
        for j in leaves:
            s, e = self.starts[j], self.ends[j]
            self.blockmax[j] = self.min_dist[s:e].max()
        self._refresh_supmax(np.unique(self.leaf_super[leaves]))

    def max_info(self):
        mx = float(self.blockmax.max())
        rows = []
        for j in np.nonzero(self.blockmax == mx)[0]:
            s, e = self.starts[j], self.ends[j]
            local = np.nonzero(self.min_dist[s:e] == mx)[0]
            rows.append(local + s)
        rows = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
        return mx, rows


def build_engine(vecs_f32, kind, seed, engine=None):
    """Pick an engine for the pool: dense for small pools, blocked for large."""
    if engine is None:
        engine = "blocked" if vecs_f32.shape[0] >= BLOCKED_MIN_POOL else "dense"
    if engine == "dense":
        return DenseEngine(vecs_f32, kind)
    if engine == "blocked":
        return BlockedEngine(vecs_f32, kind, seed)
    raise ValueError(f"unknown engine {engine!r}")
