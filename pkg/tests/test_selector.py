"""Selection loop: distances, incremental min-dist cache, sampling law, both
strategies, and the blocked engine against the dense reference."""

import numpy as np
import pytest

from geal._engine import BlockedEngine, DenseEngine
from geal.errors import ConfigError, DistanceDomainError
from geal.selector import (
    ClusterPool,
    SelectionConfig,
    SelectionState,
    distance,
    init_state,
    sample_next,
    select,
    update_min_dist,
)

from conftest import pool_from_centroids


def brute_force_min_dist(pool, selected_indices, kind):
    """Oracle: per cluster, min distance to any selected image's cluster."""
    sel_rows = []
    for i in selected_indices:
        start, stop = pool.slices[i]
        sel_rows.extend(range(start, stop))
    out = np.empty(pool.cluster_count)
    for x in range(pool.cluster_count):
        out[x] = min(
            distance(pool.vecs[x], pool.vecs[r], kind) for r in sel_rows
        )
    return out


class TestDistance:
    def test_cosine_self_is_zero(self, rng):
        for _ in range(10):
            v = rng.standard_normal(6)
            assert distance(v, v, "cosine") == pytest.approx(0.0, abs=1e-12)

    def test_cosine_orthogonal(self):
        assert distance([1.0, 0.0], [0.0, 1.0], "cosine") == pytest.approx(1.0)

    def test_cosine_opposite(self):
        assert distance([2.0, 0.0], [-3.0, 0.0], "cosine") == pytest.approx(2.0)

    def test_euclidean_345(self):
        assert distance([0.0, 0.0], [3.0, 4.0], "euclidean") == pytest.approx(5.0)

    def test_symmetry_and_self(self, rng):
        for kind in ("cosine", "euclidean"):
            for _ in range(20):
                a = rng.standard_normal(5) + 0.1
                b = rng.standard_normal(5) + 0.1
                assert distance(a, b, kind) == pytest.approx(
                    distance(b, a, kind), abs=1e-14
                )
                assert distance(a, b, kind) >= 0.0
        assert distance([1.0, 2.0], [1.0, 2.0], "euclidean") == 0.0

    def test_cosine_zero_vector_raises(self):
        with pytest.raises(DistanceDomainError):
            distance([0.0, 0.0], [1.0, 0.0], "cosine")


class TestInitState:
    def test_single_image_pool(self, tmp_path):
        _, pool = pool_from_centroids(tmp_path, {"only": [[1.0, 2.0], [3.0, 4.0]]})
        cfg = SelectionConfig(budget=1, seed=3, distance="euclidean")
        state = init_state(pool, cfg)
        assert state.selected == [0]
        np.testing.assert_array_equal(state.min_dist, [0.0, 0.0])

    def test_same_seed_same_start(self, tmp_path):
        _, pool = pool_from_centroids(
            tmp_path, {f"i{j}": [[float(j), 1.0]] for j in range(7)}
        )
        cfg = SelectionConfig(budget=1, seed=11, distance="euclidean")
        a = init_state(pool, cfg).selected
        b = init_state(pool, cfg).selected
        assert a == b

    def test_uniform_over_pool(self, tmp_path):
        n, runs = 5, 20000
        _, pool = pool_from_centroids(
            tmp_path, {f"i{j}": [[float(j), 1.0]] for j in range(n)}
        )
        hits = np.zeros(n)
        for seed in range(runs):
            cfg = SelectionConfig(budget=1, seed=seed, distance="euclidean")
            hits[init_state(pool, cfg).selected[0]] += 1
        p = 1.0 / n
        sigma = np.sqrt(p * (1 - p) / runs)
        np.testing.assert_allclose(hits / runs, p, atol=3 * sigma)

    def test_budget_exceeds_pool(self, tmp_path):
        _, pool = pool_from_centroids(tmp_path, {"a": [[1.0, 0.0]]})
        with pytest.raises(ConfigError):
            init_state(pool, SelectionConfig(budget=2, seed=0))


class TestUpdateMinDist:
    @pytest.mark.parametrize("kind", ["cosine", "euclidean"])
    def test_matches_brute_force(self, tmp_path, rng, kind):
        for trial in range(12):
            n = int(rng.integers(3, 20))
            k = int(rng.integers(1, 5))
            d = int(rng.integers(2, 10))
            sets = {
                f"img{j:02d}": rng.standard_normal((k, d)) + 0.2 for j in range(n)
            }
            _, pool = pool_from_centroids(tmp_path, sets, name=f"p{kind}{trial}.kc")
            cfg = SelectionConfig(budget=1, seed=trial, distance=kind)
            state = init_state(pool, cfg)
            extra = [i for i in range(n) if i != state.selected[0]][: n // 2]
            for i in extra:
                state.admit(i)
            got = state.min_dist
            want = brute_force_min_dist(pool, state.selected, kind)
            sel_rows = np.concatenate(
                [np.arange(*pool.slices[i]) for i in state.selected]
            )
            mask = np.ones(pool.cluster_count, dtype=bool)
            mask[sel_rows] = False
            np.testing.assert_allclose(got[mask], want[mask], atol=1e-12)
            np.testing.assert_array_equal(got[~mask], 0.0)

    def test_far_cluster_changes_nothing(self, tmp_path):
        _, pool = pool_from_centroids(
            tmp_path, {"a": [[0.0, 0.0]], "b": [[1.0, 0.0]], "c": [[2.0, 0.0]]}
        )
        cfg = SelectionConfig(budget=1, seed=0, distance="euclidean")
        state = init_state(pool, cfg)
        before = state.min_dist.copy()
        update_min_dist(state, np.array([[1e6, 1e6]]))
        np.testing.assert_array_equal(state.min_dist, before)

    def test_duplicate_image_drives_dists_to_zero(self, tmp_path):
        c = [[1.5, -0.5], [2.0, 3.0]]
        _, pool = pool_from_centroids(tmp_path, {"a": c, "b": c})
        cfg = SelectionConfig(budget=1, seed=1, distance="euclidean")
        state = init_state(pool, cfg)
        np.testing.assert_allclose(state.min_dist, 0.0, atol=1e-12)

    def test_monotone_non_increasing(self, tmp_path, rng):
        sets = {f"i{j}": rng.standard_normal((3, 4)) for j in range(10)}
        _, pool = pool_from_centroids(tmp_path, sets)
        cfg = SelectionConfig(budget=1, seed=5, distance="cosine")
        state = init_state(pool, cfg)
        prev = state.min_dist
        for i in range(10):
            if not state.selected_mask[i]:
                state.admit(i)
                cur = state.min_dist
                assert np.all(cur <= prev + 1e-15)
                prev = cur


class TestSampleNext:
    def _line_pool(self, tmp_path):
        # 1-D centroids 0, 1, 3: after selecting A, squared distances give
        # p(B) = 1/(1+9) = 0.1 and p(C) = 0.9
        return pool_from_centroids(
            tmp_path, {"A": [[0.0]], "B": [[1.0]], "C": [[3.0]]}, name="line.kc"
        )

    def test_probabilistic_law(self, tmp_path):
        _, pool = self._line_pool(tmp_path)
        runs = 20000
        hits = {"B": 0, "C": 0}
        for seed in range(runs):
            cfg = SelectionConfig(budget=1, seed=seed, distance="euclidean")
            state = SelectionState(pool, cfg)
            state.admit(0)  # force the selected pool to start at A
            img, _, _ = sample_next(state, "probabilistic")
            hits[pool.ids[img]] += 1
        sigma = np.sqrt(0.1 * 0.9 / runs)
        assert hits["B"] / runs == pytest.approx(0.1, abs=3 * sigma)
        assert hits["C"] / runs == pytest.approx(0.9, abs=3 * sigma)

    def test_fds_takes_farthest(self, tmp_path):
        _, pool = self._line_pool(tmp_path)
        cfg = SelectionConfig(budget=1, seed=0, distance="euclidean", strategy="fds")
        state = SelectionState(pool, cfg)
        state.admit(0)
        img, cluster, dist = sample_next(state, "fds")
        assert pool.ids[img] == "C"
        assert dist == pytest.approx(3.0)

    def test_fds_tie_breaks_by_id_then_cluster(self, tmp_path):
        sets = {"b": [[4.0, 0.0]], "a": [[0.0, 4.0], [4.0, 0.0]], "z": [[0.0, 0.0]]}
        _, pool = pool_from_centroids(tmp_path, sets)
        cfg = SelectionConfig(budget=1, seed=0, distance="euclidean", strategy="fds")
        state = SelectionState(pool, cfg)
        state.admit(2)  # select z at the origin; a and b tie at distance 4
        img, cluster, _ = sample_next(state, "fds")
        assert pool.ids[img] == "a"
        assert cluster == 0

    def test_uniform_fallback_on_duplicates(self, tmp_path):
        c = [[1.0, 2.0]]
        _, pool = pool_from_centroids(tmp_path, {"a": c, "b": c, "c": c})
        counts = {"dup": 0}
        seen = set()
        for seed in range(200):
            cfg = SelectionConfig(budget=1, seed=seed, distance="euclidean")
            state = SelectionState(pool, cfg)
            state.admit(0)
            img, cluster, dist = sample_next(state, "probabilistic")
            assert img != 0
            assert cluster == -1 and dist == 0.0
            seen.add(img)
        assert seen == {1, 2}

    def test_exhausted_pool_raises(self, tmp_path):
        _, pool = pool_from_centroids(tmp_path, {"a": [[1.0, 0.0]]})
        cfg = SelectionConfig(budget=1, seed=0)
        state = init_state(pool, cfg)
        with pytest.raises(ConfigError):
            sample_next(state)


class TestSelect:
    def test_budget_one_is_initial_image(self, tmp_path):
        _, pool = pool_from_centroids(
            tmp_path, {f"i{j}": [[float(j), 1.0]] for j in range(6)}
        )
        cfg = SelectionConfig(budget=1, seed=9, distance="euclidean")
        res = select(pool, cfg)
        assert len(res.selected) == 1
        assert res.selected[0] == pool.ids[init_state(pool, cfg).selected[0]]

    @pytest.mark.parametrize("strategy", ["probabilistic", "fds"])
    def test_full_budget_selects_everything(self, tmp_path, rng, strategy):
        sets = {f"i{j}": rng.standard_normal((2, 3)) for j in range(8)}
        _, pool = pool_from_centroids(tmp_path, sets)
        cfg = SelectionConfig(budget=8, seed=4, strategy=strategy, distance="cosine")
        res = select(pool, cfg)
        assert sorted(res.selected) == sorted(pool.ids)

    def test_no_duplicates_across_runs(self, tmp_path, rng):
        sets = {f"i{j}": rng.standard_normal((3, 4)) for j in range(15)}
        _, pool = pool_from_centroids(tmp_path, sets)
        for seed in range(10):
            cfg = SelectionConfig(budget=10, seed=seed, distance="cosine")
            res = select(pool, cfg)
            assert len(set(res.selected)) == 10

    def test_deterministic_given_seed(self, tmp_path, rng):
        sets = {f"i{j}": rng.standard_normal((2, 5)) for j in range(12)}
        _, pool = pool_from_centroids(tmp_path, sets)
        for strategy in ("probabilistic", "fds"):
            cfg = SelectionConfig(budget=7, seed=2, strategy=strategy)
            a, b = select(pool, cfg), select(pool, cfg)
            assert a.selected == b.selected
            assert a.steps == b.steps

    @pytest.mark.parametrize("strategy", ["probabilistic", "fds"])
    def test_cosine_scale_invariance(self, tmp_path, rng, strategy):
        sets = {f"i{j}": rng.standard_normal((2, 4)) + 0.3 for j in range(10)}
        doubled = {k: 2.0 * np.asarray(v) for k, v in sets.items()}
        _, pool1 = pool_from_centroids(tmp_path, sets, name="s1.kc")
        _, pool2 = pool_from_centroids(tmp_path, doubled, name="s2.kc")
        cfg = SelectionConfig(budget=6, seed=13, strategy=strategy, distance="cosine")
        assert select(pool1, cfg).selected == select(pool2, cfg).selected

    def test_steps_record_distances(self, tmp_path, rng):
        sets = {f"i{j}": rng.standard_normal((2, 3)) for j in range(5)}
        _, pool = pool_from_centroids(tmp_path, sets)
        cfg = SelectionConfig(budget=4, seed=1, distance="euclidean")
        res = select(pool, cfg)
        assert res.steps[0]["distance"] is None
        assert all(s["distance"] >= 0 for s in res.steps[1:])
        assert [s["image_id"] for s in res.steps] == res.selected


class TestBlockedEngine:
    @pytest.mark.parametrize("kind", ["cosine", "euclidean"])
    def test_matches_dense_reference(self, rng, kind):
        m, d = 3000, 12
        vecs = (rng.standard_normal((m, d)) + 0.1).astype(np.float32)
        dense = DenseEngine(vecs, kind)
        blocked = BlockedEngine(vecs, kind, seed=7)
        for step in range(30):
            c = rng.standard_normal((int(rng.integers(1, 5)), d)) + 0.1
            dense.update(c)
            blocked.update(c)
            got = blocked.min_dist[blocked.invmap]
            np.testing.assert_allclose(got, dense.min_dist, atol=1e-12)

    def test_structured_data_prunes_but_stays_exact(self, rng):
        protos = rng.standard_normal((6, 16)) * 50
        vecs = (
            protos[rng.integers(6, size=5000)] + rng.standard_normal((5000, 16))
        ).astype(np.float32)
        dense = DenseEngine(vecs, "cosine")
        blocked = BlockedEngine(vecs, "cosine", seed=3)
        for step in range(40):
            c = vecs[rng.integers(5000, size=3)].astype(np.float64)
            dense.update(c)
            blocked.update(c)
        np.testing.assert_allclose(
            blocked.min_dist[blocked.invmap], dense.min_dist, atol=1e-12
        )

    def test_select_same_results_via_both_engines(self, tmp_path, rng):
        sets = {f"i{j:03d}": rng.standard_normal((3, 6)) + 0.2 for j in range(60)}
        _, pool = pool_from_centroids(tmp_path, sets)
        cfg = SelectionConfig(budget=25, seed=6, distance="euclidean", strategy="fds")
        a = select(pool, cfg, engine="dense")
        b = select(pool, cfg, engine="blocked")
        assert a.selected == b.selected
