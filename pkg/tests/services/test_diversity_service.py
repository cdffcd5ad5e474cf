"""Tests for embedding ingestion, PCA and t-SNE."""

import csv
import json
import unittest

import numpy as np
import pytest
from reorm.errors import DiversityError
from reorm.schemas import TsneParams
from reorm.services.diversity_service import (
    BINARY_HEADER,
    EmbeddingSet,
    components_for,
    conditional_affinities,
    explained_variance_ratios,
    l2_normalize,
    load_embeddings,
    load_embeddings_binary,
    pca_explained_variance,
    run_diversity,
    save_embeddings_binary,
    save_embeddings_jsonl,
    subsample_indices,
    subsample_match,
    summarize,
    tsne,
)


def _clusters(n_per=20, dim=10, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 0.1, size=(n_per, dim))
    a[:, 0] += 5.0
    b = rng.normal(0.0, 0.1, size=(n_per, dim))
    b[:, 1] += 5.0
    return np.vstack([a, b]), np.array([0] * n_per + [1] * n_per)


class TestPreprocessing(unittest.TestCase):
    """Normalization and subsampling."""

    def test_l2_normalize(self):
        """(3, 4) → (0.6, 0.8)."""
        out = l2_normalize(EmbeddingSet("a", np.array([[3.0, 4.0], [0.0, 2.0]])))
        np.testing.assert_allclose(out.vectors, [[0.6, 0.8], [0.0, 1.0]])

    def test_zero_row_names_its_id(self):
        """The error points at the offending row."""
        with self.assertRaisesRegex(DiversityError, r"row 1 \(id b\)"):
            l2_normalize(EmbeddingSet("a", np.array([[1.0, 0.0], [0.0, 0.0]]), ["a", "b"]))

    def test_invalid_matrices(self):
        """Empty, ragged-id and non-finite inputs are refused."""
        with self.assertRaises(DiversityError):
            EmbeddingSet("a", np.zeros((0, 3)))
        with self.assertRaises(DiversityError):
            EmbeddingSet("a", np.zeros((2, 3)), ["only-one"])
        with self.assertRaises(DiversityError):
            EmbeddingSet("a", np.array([[1.0, np.nan]]))

    def test_subsample_indices(self):
        """Seeded permutation prefix, without replacement."""
        idx = subsample_indices(10, 4, seed=3)
        np.testing.assert_array_equal(idx, np.random.default_rng(3).permutation(10)[:4])
        self.assertEqual(len(set(idx.tolist())), 4)
        np.testing.assert_array_equal(idx, subsample_indices(10, 4, seed=3))

    def test_subsample_match(self):
        """The larger set shrinks; the smaller one is untouched."""
        big = EmbeddingSet("big", np.arange(20.0).reshape(10, 2))
        small = EmbeddingSet("small", np.ones((4, 2)))
        a, b = subsample_match(big, small, seed=1)
        self.assertEqual(a.n, 4)
        self.assertIs(b, small)
        expected_ids = [str(i) for i in np.random.default_rng(1).permutation(10)[:4]]
        self.assertEqual(a.ids, expected_ids)
        b2, a2 = subsample_match(small, big, seed=1)
        self.assertIs(b2, small)
        self.assertEqual(a2.ids, expected_ids)


class TestPca(unittest.TestCase):
    """Explained variance."""

    def test_known_spectrum(self):
        """Variances 8/3 and 2/3 give cumulative (0.8, 1.0)."""
        emb = EmbeddingSet("a", np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]]))
        np.testing.assert_allclose(pca_explained_variance(emb), [0.8, 1.0])
        np.testing.assert_allclose(explained_variance_ratios(emb), [0.8, 0.2])

    def test_rank_one(self):
        """Collinear rows put all variance in the first component."""
        t = np.array([[-1.0], [0.0], [1.0], [3.0]])
        emb = EmbeddingSet("a", t * np.array([[1.0, 2.0, -2.0]]))
        cum = pca_explained_variance(emb)
        self.assertEqual(len(cum), 3)
        np.testing.assert_allclose(cum, [1.0, 1.0, 1.0], atol=1e-12)

    def test_rotation_invariance(self):
        """An orthogonal transform does not change the spectrum."""
        rng = np.random.default_rng(4)
        x = rng.normal(size=(30, 5)) * np.array([5.0, 3.0, 1.0, 0.5, 0.1])
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        np.testing.assert_allclose(
            pca_explained_variance(EmbeddingSet("a", x)), pca_explained_variance(EmbeddingSet("b", x @ q))
        )

    def test_length_is_min_of_rows_minus_one_and_dim(self):
        """At most N-1 non-trivial components."""
        rng = np.random.default_rng(5)
        self.assertEqual(len(pca_explained_variance(EmbeddingSet("a", rng.normal(size=(4, 10))))), 3)
        self.assertEqual(len(pca_explained_variance(EmbeddingSet("a", rng.normal(size=(12, 6))))), 6)

    def test_degenerate_inputs(self):
        """One row, or identical rows, have no variance to explain."""
        with self.assertRaises(DiversityError):
            pca_explained_variance(EmbeddingSet("a", np.ones((1, 3))))
        with self.assertRaises(DiversityError):
            pca_explained_variance(EmbeddingSet("a", np.ones((5, 3))))

    def test_components_for(self):
        """Smallest k reaching the threshold."""
        cum = [0.5, 0.85, 0.93, 0.97, 1.0]
        self.assertEqual(components_for(cum, 0.90), 3)
        self.assertEqual(components_for(cum, 0.95), 4)
        self.assertEqual(components_for(cum, 0.85), 2)
        self.assertEqual(components_for(cum, 1.0), 5)
        self.assertEqual(components_for(cum, 0.1), 1)
        for bad in (0.0, -0.5, 1.5):
            with self.assertRaises(DiversityError):
                components_for(cum, bad)

    def test_engineered_spectrum(self):
        """Axis-aligned pairs with variance shares 0.5, 0.2, 0.15, 0.10, 0.05."""
        shares = np.array([50.0, 20.0, 15.0, 10.0, 5.0])
        rows = []
        for k, share in enumerate(shares):
            axis = np.zeros(len(shares))
            axis[k] = np.sqrt(share)
            rows.extend([axis, -axis])
        cum = pca_explained_variance(EmbeddingSet("a", np.array(rows)))

        np.testing.assert_allclose(cum, [0.5, 0.7, 0.85, 0.95, 1.0], rtol=1e-12)
        expected = {0.3: 1, 0.5: 1, 0.6: 2, 0.7: 2, 0.85: 3, 0.9: 4, 0.95: 4, 0.96: 5, 1.0: 5}
        for threshold, k in expected.items():
            self.assertEqual(components_for(cum, threshold), k, threshold)
        summary = summarize(EmbeddingSet("eng", np.array(rows)), cum)
        self.assertEqual(summary.components, {"90%": 4, "95%": 4})
        self.assertEqual((summary.label, summary.n, summary.dim), ("eng", 10, 5))
        self.assertAlmostEqual(summary.top5_share, 1.0)


@pytest.mark.parametrize("rank", [1, 3, 10])
def test_low_rank_data_is_recovered(rank):
    rng = np.random.default_rng(rank)
    x = rng.normal(size=(64, rank)) @ rng.normal(size=(rank, 512))
    cum = pca_explained_variance(EmbeddingSet("a", x))

    assert len(cum) == 63
    assert cum[rank - 1] >= 0.9999
    assert components_for(cum, 0.9999) == rank


class TestTsne:
    def test_affinities_hit_the_perplexity(self):
        x, _ = _clusters(10, 4, seed=2)
        sq = np.square(x[:, None, :] - x[None, :, :]).sum(axis=2)
        p = conditional_affinities(sq, perplexity=5.0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        assert np.all(np.diag(p) == 0.0)
        rows = np.where(p > 0, p, 1.0)
        entropy = -(p * np.log(rows)).sum(axis=1)
        np.testing.assert_allclose(entropy, np.log(5.0), atol=1e-4)

    def test_four_points(self):
        emb = EmbeddingSet("a", np.random.default_rng(8).normal(size=(4, 5)))
        result = tsne(emb, TsneParams(perplexity=0.9, iterations=200, exaggeration_iterations=50))
        assert result.points.shape == (4, 2)
        assert np.isfinite(result.points).all()
        dists = np.linalg.norm(result.points[:, None] - result.points[None, :], axis=2)
        assert dists[~np.eye(4, dtype=bool)].min() > 0.0

    def test_separated_clusters_stay_apart(self):
        x, labels = _clusters()
        params = TsneParams(perplexity=10, iterations=500, exaggeration_iterations=100)
        result = tsne(EmbeddingSet("a", x), params)

        dists = np.linalg.norm(result.points[:, None] - result.points[None, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        nearest = dists.argmin(axis=1)
        purity = float(np.mean(labels[nearest] == labels))
        assert purity >= 0.95

        first_kl = result.kl_trace[0]
        assert first_kl[0] == params.exaggeration_iterations
        assert result.kl_trace[-1][0] == params.iterations
        assert result.kl_trace[-1][1] <= first_kl[1]

    def test_deterministic(self):
        x, _ = _clusters(8, 6, seed=3)
        params = TsneParams(perplexity=4, iterations=120, exaggeration_iterations=40)
        a = tsne(EmbeddingSet("a", x), params)
        b = tsne(EmbeddingSet("a", x), params)
        np.testing.assert_array_equal(a.points, b.points)
        assert a.kl_trace == b.kl_trace

    @pytest.mark.parametrize("seed", [0, 7])
    def test_same_seed_is_bit_identical(self, seed):
        x = np.random.default_rng(seed).normal(size=(40, 512))
        params = TsneParams(perplexity=8, iterations=150, exaggeration_iterations=50, seed=seed)
        a = tsne(EmbeddingSet("a", x), params)
        b = tsne(EmbeddingSet("a", x.copy()), params)
        assert a.points.tobytes() == b.points.tobytes()
        assert a.kl_trace == b.kl_trace

    def test_preconditions(self):
        with pytest.raises(DiversityError, match="at least 4"):
            tsne(EmbeddingSet("a", np.eye(3)))
        with pytest.raises(DiversityError, match="infeasible"):
            tsne(EmbeddingSet("a", np.eye(10)), TsneParams(perplexity=3.0))


class TestFiles:
    def test_binary_round_trip(self, tmp_path):
        emb = EmbeddingSet("a", np.random.default_rng(0).normal(size=(5, 3)))
        path = save_embeddings_binary(emb, tmp_path / "a.rmeb")
        loaded = load_embeddings(path)
        np.testing.assert_array_equal(loaded.vectors, emb.vectors)
        assert loaded.label == "a"
        assert path.stat().st_size == BINARY_HEADER.size + 5 * 3 * 8

    def test_binary_corruption(self, tmp_path):
        emb = EmbeddingSet("a", np.ones((2, 2)))
        path = save_embeddings_binary(emb, tmp_path / "a.rmeb")
        raw = bytearray(path.read_bytes())

        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(DiversityError, match="checksum"):
            load_embeddings(path)

        path.write_bytes(bytes(raw[:-8]))
        with pytest.raises(DiversityError, match="payload"):
            load_embeddings(path)

        path.write_bytes(b"XXXX" + bytes(raw[4:]))
        with pytest.raises(DiversityError, match="not an RMEB"):
            load_embeddings_binary(path)

    def test_jsonl_round_trip_and_sidecar(self, tmp_path):
        emb = EmbeddingSet("ds", np.array([[1.0, 2.0], [3.0, 4.5]]), ["img-1", "img-2"])
        path = save_embeddings_jsonl(emb, tmp_path / "ds.jsonl")
        sidecar = tmp_path / "ds.jsonl.sha256"
        assert sidecar.read_text(encoding="utf-8").endswith("  ds.jsonl\n")

        loaded = load_embeddings(path)
        assert loaded.ids == ["img-1", "img-2"]
        np.testing.assert_array_equal(loaded.vectors, emb.vectors)

        path.write_text(path.read_text(encoding="utf-8").replace("4.5", "4.6"), encoding="utf-8")
        with pytest.raises(DiversityError, match="checksum"):
            load_embeddings(path)

    def test_jsonl_errors(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "a", "vector": [1, 2]}\n{"id": "b"}\n', encoding="utf-8")
        with pytest.raises(DiversityError, match="line 2"):
            load_embeddings(path)
        path.write_text('{"id": "a", "vector": [1, 2]}\n{"id": "b", "vector": [1]}\n', encoding="utf-8")
        with pytest.raises(DiversityError, match="dimensions"):
            load_embeddings(path)
        with pytest.raises(DiversityError, match="not found"):
            load_embeddings(tmp_path / "nope.jsonl")


def test_run_diversity(tmp_path):
    rng = np.random.default_rng(9)
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    save_embeddings_jsonl(EmbeddingSet("emb", rng.normal(size=(30, 8))), tmp_path / "a" / "emb.jsonl")
    save_embeddings_binary(EmbeddingSet("emb", rng.normal(size=(25, 8)) + 1.0), tmp_path / "b" / "emb.rmeb")

    params = TsneParams(perplexity=5, iterations=150, exaggeration_iterations=50, seed=1)
    paths = run_diversity(tmp_path / "a" / "emb.jsonl", tmp_path / "b" / "emb.rmeb", tmp_path / "out", 1, params)

    with paths["points"].open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 50
    assert {r["dataset"] for r in rows} == {"emb_a", "emb_b"}

    with paths["variance"].open(encoding="utf-8") as fh:
        variance = list(csv.reader(fh))
    assert variance[0] == ["component", "emb_a", "emb_b"]
    assert float(variance[-1][1]) == pytest.approx(1.0)

    summary = json.loads(paths["thresholds"].read_text(encoding="utf-8"))
    assert summary["seed"] == 1
    assert [d["n"] for d in summary["datasets"]] == [25, 25]
    assert set(summary["datasets"][0]["components"]) == {"90%", "95%"}
    assert 0.0 < summary["datasets"][0]["top5_share"] <= 1.0

    with paths["kl_trace"].open(encoding="utf-8") as fh:
        trace = list(csv.reader(fh))
    assert trace[0] == ["iteration", "kl"]
    assert int(trace[-1][0]) == 150


def test_run_diversity_dimension_mismatch(tmp_path):
    save_embeddings_jsonl(EmbeddingSet("a", np.eye(5)), tmp_path / "a.jsonl")
    save_embeddings_jsonl(EmbeddingSet("b", np.eye(6)), tmp_path / "b.jsonl")
    with pytest.raises(DiversityError, match="dimensions differ"):
        run_diversity(tmp_path / "a.jsonl", tmp_path / "b.jsonl", tmp_path / "out")
