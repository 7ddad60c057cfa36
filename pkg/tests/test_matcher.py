import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from idp.hnsw import BuildParams, IndexNotFrozen, AnnIndex, build_index, load_index, save_index
from idp.matcher import (NeighborAssignment, aggregation_weights, assign_neighbors, generate_embeddings,
                         generate_inner_domain, load_generated, retrieve, retrieve_exact)

from oracles import cosine, full_sort_top


def _assignment(sources, sims):
    sources = np.atleast_2d(np.asarray(sources, dtype=np.int64))
    sims = np.atleast_2d(np.asarray(sims, dtype=np.float64))
    return NeighborAssignment(np.arange(len(sources)), sources, sims, np.full(len(sources), sources.shape[1]))


def recall(got, exact):
    return np.mean([len(set(g) & set(e)) / len(e) for g, e in zip(got.tolist(), exact.tolist())])


class TestExact:
    def test_m_exceeds_sources(self, rng):
        src = rng.normal(size=(4, 3))
        idx, sims = retrieve_exact(rng.normal(size=3), src, 10)
        assert sorted(idx.tolist()) == [0, 1, 2, 3]
        assert np.all(np.diff(sims) <= 0)

    def test_query_equal_to_source(self, rng):
        src = rng.normal(size=(20, 5))
        idx, sims = retrieve_exact(src[7], src, 3)
        assert idx[0] == 7 and abs(sims[0] - 1.0) < 1e-12

    def test_five_vectors_full_sort(self, rng):
        src = rng.normal(size=(5, 4))
        q = rng.normal(size=4)
        idx, _ = retrieve_exact(q, src, 3)
        assert idx.tolist() == full_sort_top([cosine(q, s) for s in src], 3)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 1000), st.integers(1, 15), st.integers(0, 2**31 - 1))
    def test_matches_full_sort(self, n, m, seed):
        rng = np.random.default_rng(seed)
        src = rng.normal(size=(n, 6))
        if n > 3:
            src[1] = src[0]  # an exact tie
        q = rng.normal(size=6)
        idx, _ = retrieve_exact(q, src, m)
        sims = np.array([cosine(q, s) for s in src])
        assert idx.tolist() == full_sort_top(sims, m)

    def test_bad_m(self, rng):
        with pytest.raises(ValueError):
            retrieve_exact(rng.normal(size=3), rng.normal(size=(2, 3)), 0)

    def test_permutation_changes_nothing(self, rng):
        src = rng.normal(size=(50, 8))
        q = rng.normal(size=8)
        perm = rng.permutation(50)
        idx, sims = retrieve_exact(q, src, 5)
        pidx, psims = retrieve_exact(q, src[perm], 5)
        assert perm[pidx].tolist() == idx.tolist()
        np.testing.assert_allclose(psims, sims, rtol=0, atol=1e-15)


class TestAnn:
    def test_singleton(self, rng):
        index = build_index(rng.normal(size=(1, 4)))
        for _ in range(5):
            idx, _ = index.query(rng.normal(size=4), 3)
            assert idx.tolist() == [0]

    def test_unfrozen_query_raises(self, rng):
        index = AnnIndex(3)
        index.add(rng.normal(size=(5, 3)))
        with pytest.raises(IndexNotFrozen):
            index.query(np.ones(3), 1)
        index.freeze()
        with pytest.raises(RuntimeError):
            index.add(np.ones(3))

    def test_layer0_connected(self, rng):
        # tight clumps far apart are the usual way to disconnect a proximity graph
        centres = rng.normal(size=(8, 16)) * 50
        data = np.repeat(centres, 60, axis=0) + rng.normal(size=(480, 16)) * 0.01
        index = build_index(data, BuildParams(max_degree=4, ef_construction=8))
        assert index.is_connected()

    def test_recall_10k(self):
        rng = np.random.default_rng(0)
        src = rng.normal(size=(10_000, 64))
        queries = rng.normal(size=(1_000, 64))
        index = build_index(src, BuildParams(), rng_seed=0)
        exact, _ = retrieve(queries, src, 10, method="exact")
        got = np.stack([index.query(q, 10)[0] for q in queries])
        assert recall(got, exact) >= 0.95

    def test_recall_nondecreasing_in_beam(self):
        rng = np.random.default_rng(1)
        src = rng.normal(size=(2_000, 32))
        queries = rng.normal(size=(200, 32))
        index = build_index(src, BuildParams(max_degree=8, ef_construction=50), rng_seed=1)
        exact, _ = retrieve(queries, src, 10, method="exact")
        recalls = [recall(np.stack([index.query(q, 10, ef)[0] for q in queries]), exact)
                   for ef in (1, 10, 25, 50, 100)]
        assert all(b >= a for a, b in zip(recalls, recalls[1:])), recalls

    def test_save_load_round_trip(self, rng, tmp_path):
        src = rng.normal(size=(300, 8))
        index = build_index(src)
        save_index(index, tmp_path / "i.ckpt")
        again = load_index(tmp_path / "i.ckpt")
        for q in rng.normal(size=(20, 8)):
            a, b = index.query(q, 5), again.query(q, 5)
            assert a[0].tolist() == b[0].tolist()
            np.testing.assert_array_equal(a[1], b[1])

    def test_save_requires_frozen(self, tmp_path):
        index = AnnIndex(2)
        with pytest.raises(IndexNotFrozen):
            save_index(index, tmp_path / "x")

    def test_build_deterministic(self, rng):
        src = rng.normal(size=(500, 8))
        a, b = build_index(src, rng_seed=3), build_index(src, rng_seed=3)
        q = rng.normal(size=8)
        assert a.query(q, 10)[0].tolist() == b.query(q, 10)[0].tolist()


class TestWeights:
    def test_two_sims(self):
        w, fell = aggregation_weights(np.array([0.6, 0.2]))
        np.testing.assert_allclose(w, [0.75, 0.25], rtol=0, atol=1e-15)
        assert not fell

    def test_single_neighbor_copies_row(self, rng):
        E = rng.normal(size=(5, 3))
        gen = generate_embeddings(_assignment([[3]], [[0.42]]), E)
        np.testing.assert_array_equal(gen.E_T[0], E[3])

    def test_equal_sims_give_centroid(self, rng):
        E = rng.normal(size=(6, 4))
        gen = generate_embeddings(_assignment([[0, 2, 5]], [[0.3, 0.3, 0.3]]), E)
        np.testing.assert_allclose(gen.weights[0], [1 / 3] * 3, rtol=0, atol=1e-15)
        np.testing.assert_allclose(gen.E_T[0], E[[0, 2, 5]].mean(axis=0), rtol=0, atol=1e-14)

    def test_all_negative_fall_back(self, rng, caplog):
        E = rng.normal(size=(4, 2))
        gen = generate_embeddings(_assignment([[0, 1]], [[-0.5, -0.1]]), E)
        np.testing.assert_allclose(gen.weights[0], [0.5, 0.5])
        assert gen.status == ["uniform"]
        assert "uniform" in caplog.text

    def test_out_of_range_neighbor(self, rng):
        with pytest.raises(IndexError):
            generate_embeddings(_assignment([[9]], [[1.0]]), rng.normal(size=(3, 2)))

    def test_cold_row_is_zero(self, rng, caplog):
        a = NeighborAssignment(np.array([0, 1]), np.array([[0], [0]]), np.array([[0.5], [0.0]]), np.array([1, 0]))
        gen = generate_embeddings(a, rng.normal(size=(2, 3)))
        np.testing.assert_array_equal(gen.E_T[1], 0.0)
        assert gen.status == ["weighted", "cold-fallback"]
        assert "lack a vector" in caplog.text

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
                  elements=st.floats(-1, 1, allow_nan=False)),
           st.integers(0, 2**31 - 1))
    def test_convex_and_normalised(self, sims, seed):
        rng = np.random.default_rng(seed)
        rows, m = sims.shape
        E = rng.normal(size=(12, 3))
        sources = np.stack([rng.choice(12, m, replace=False) for _ in range(rows)])
        gen = generate_embeddings(_assignment(sources, sims), E)
        for r in range(rows):
            assert abs(gen.weights[r].sum() - 1.0) < 1e-9
            assert np.all(gen.weights[r] >= 0)
            nb = E[sources[r]]
            assert np.all(gen.E_T[r] >= nb.min(axis=0) - 1e-12)
            assert np.all(gen.E_T[r] <= nb.max(axis=0) + 1e-12)


class TestAssignment:
    def test_maps_source_ids_and_lengths(self, rng):
        src_vecs = rng.normal(size=(5, 3))
        tgt_vecs = src_vecs[[4, 1]]
        a = assign_neighbors(np.array([10, 11, 12]), np.vstack([tgt_vecs, np.zeros(3)]),
                             np.array([True, True, False]), np.arange(100, 105), src_vecs, 2)
        assert a.sources[0, 0] == 104 and a.sources[1, 0] == 101
        assert a.lengths.tolist() == [2, 2, 0]

    def test_ann_path_agrees_with_exact_on_small(self, rng):
        src = rng.normal(size=(200, 6))
        q = rng.normal(size=(30, 6))
        e, _ = retrieve(q, src, 5, method="exact")
        a, _ = retrieve(q, src, 5, method="ann")
        assert recall(a, e) >= 0.95

    def test_tsv_round_trip(self, rng, tmp_path):
        a = assign_neighbors(np.arange(4), rng.normal(size=(4, 3)), np.array([1, 1, 0, 1], bool),
                             np.arange(10), rng.normal(size=(10, 3)), 3)
        a.to_tsv(tmp_path / "n.tsv")
        b = NeighborAssignment.from_tsv(tmp_path / "n.tsv")
        assert b.targets.tolist() == a.targets.tolist()
        assert b.lengths.tolist() == a.lengths.tolist()
        for r in range(4):
            assert [s for s, _ in b.row(r)] == [s for s, _ in a.row(r)]
            np.testing.assert_allclose([v for _, v in b.row(r)], [v for _, v in a.row(r)], rtol=1e-8)

    def test_generated_save_load(self, rng, tmp_path):
        a = _assignment([[0, 1], [1, 2]], [[0.9, 0.1], [0.5, 0.5]])
        gen = generate_embeddings(a, rng.normal(size=(3, 4)))
        gen.save(tmp_path / "g.ckpt", tmp_path / "p.tsv")
        targets, E_T = load_generated(tmp_path / "g.ckpt")
        np.testing.assert_array_equal(E_T, gen.E_T)
        assert targets.tolist() == [0, 1]
        first = (tmp_path / "p.tsv").read_text().splitlines()[0].split("\t")
        assert first[:2] == ["0", "weighted"]


class TestInnerDomain:
    def test_zero_cold_is_noop(self, rng):
        gen = generate_inner_domain(np.array(["A"] * 3), np.array([], np.int64), rng.normal(size=(3, 2)),
                                    rng.normal(size=(3, 4)), np.ones(3, bool))
        assert gen.E_T.shape == (0, 2)

    def test_identical_vector_copies_warm_row(self, rng):
        domains = np.array(["A"] * 6)
        vecs = rng.normal(size=(6, 4))
        vecs[5] = vecs[2]
        E = rng.normal(size=(6, 3))
        gen = generate_inner_domain(domains, np.array([5]), E, vecs, np.ones(6, bool), m=1)
        np.testing.assert_array_equal(gen.E_T[0], E[2])

    def test_sources_stay_in_domain_and_warm(self, rng):
        domains = np.array(["A"] * 10 + ["B"] * 10)
        vecs = rng.normal(size=(20, 4))
        cold = np.array([1, 3, 12])
        gen = generate_inner_domain(domains, cold, rng.normal(size=(20, 2)), vecs, np.ones(20, bool), m=4)
        a = gen.assignment
        for r, t in enumerate(a.targets.tolist()):
            srcs = a.sources[r, : a.lengths[r]]
            assert set(domains[srcs].tolist()) == {domains[t]}
            assert not set(srcs.tolist()) & set(cold.tolist())
