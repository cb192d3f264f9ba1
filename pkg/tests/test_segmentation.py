import numpy as np
import pytest

from dualflow.errors import DegenerateMaskError, DegenerateSpectrumError, LaplacianError, ShapeError
from dualflow.segmentation import (
    SegmentationMask,
    bipartition,
    fiedler_vector,
    laplacian,
    majority_filter,
    segment,
)


def planted_graph(sizes, weights, rng):
    """Block graph with ``weights[i][j]`` between groups; returns (adjacency, group per node)."""
    groups = np.repeat(np.arange(len(sizes)), sizes)
    perm = rng.permutation(groups.size)
    groups = groups[perm]
    a = np.asarray(weights, dtype=float)[groups[:, None], groups[None, :]]
    return a, groups


def same_partition(labels: np.ndarray, truth: np.ndarray) -> bool:
    labels = labels.reshape(-1).astype(bool)
    truth = truth.astype(bool)
    return bool(np.array_equal(labels, truth) or np.array_equal(labels, ~truth))


class TestLaplacian:
    def test_normalized_spectrum_starts_at_zero(self, rng):
        a, _ = planted_graph([5, 7], [[1.0, 0.1], [0.1, 1.0]], rng)
        lap = laplacian(a)
        values = np.linalg.eigvalsh(lap.matrix)
        assert values[0] == pytest.approx(0.0, abs=1e-12)
        assert values[-1] <= 2.0 + 1e-12
        np.testing.assert_allclose(lap.matrix @ lap.null_direction(), 0.0, atol=1e-12)

    @pytest.mark.parametrize("normalized", [True, False])
    def test_random_graphs_are_positive_semidefinite(self, rng, normalized):
        for n in (3, 17, 60):
            w = rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < 0.4)
            a = np.triu(w, 1) + np.triu(w, 1).T + np.diag(rng.uniform(0.01, 0.1, n))
            assert np.linalg.eigvalsh(laplacian(a, normalized).matrix)[0] >= -1e-8

    def test_unnormalized(self):
        a = np.array([[0.0, 2.0], [2.0, 0.0]])
        np.testing.assert_array_equal(laplacian(a, normalized=False).matrix, [[2.0, -2.0], [-2.0, 2.0]])

    def test_negative_weight(self):
        with pytest.raises(LaplacianError, match="negative"):
            laplacian(np.array([[0.0, -1.0], [-1.0, 0.0]]))

    def test_asymmetric(self):
        with pytest.raises(LaplacianError, match="symmetric"):
            laplacian(np.array([[0.0, 1.0], [0.5, 0.0]]))

    def test_isolated_node_is_named(self):
        a = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        with pytest.raises(LaplacianError) as info:
            laplacian(a)
        assert info.value.node == 2

    def test_not_square(self):
        with pytest.raises(ShapeError):
            laplacian(np.ones((2, 3)))


class TestFiedler:
    def test_planted_partitions_are_recovered(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            first = int(rng.integers(8, 25))
            a, groups = planted_graph([first, 32 - first], [[1.0, 0.01], [0.01, 1.0]], rng)
            mask = segment(a)
            assert same_partition(mask.labels, groups == 1), seed

    def test_sparse_path_agrees(self, rng):
        a, groups = planted_graph([12, 20], [[1.0, 0.01], [0.01, 1.0]], rng)
        lap = laplacian(a)
        sparse = fiedler_vector(lap, dense_limit=0)
        dense = fiedler_vector(lap)
        assert abs(float(sparse.vector @ dense.vector)) >= 0.999
        assert same_partition(bipartition(sparse.vector).labels, groups == 1)

    def test_matches_dense_eigendecomposition(self, rng):
        a = rng.uniform(0.1, 1.0, (20, 20))
        a = 0.5 * (a + a.T)
        lap = laplacian(a)
        result = fiedler_vector(lap)
        _, vectors = np.linalg.eigh(lap.matrix)
        assert abs(float(result.vector @ vectors[:, 1])) >= 0.999
        assert result.residual < 1e-6

    def test_sign_convention(self, rng):
        a, _ = planted_graph([6, 9], [[1.0, 0.05], [0.05, 1.0]], rng)
        u = fiedler_vector(laplacian(a)).vector
        assert u[np.argmax(np.abs(u))] > 0

    def test_complete_graph_has_no_unique_cut(self):
        with pytest.raises(DegenerateSpectrumError):
            fiedler_vector(laplacian(np.ones((6, 6))))

    def test_single_node(self):
        with pytest.raises(ShapeError):
            fiedler_vector(laplacian(np.ones((1, 1))))


class TestMasks:
    def test_constant_vector(self):
        with pytest.raises(DegenerateMaskError):
            bipartition(np.ones(4))

    def test_non_finite_vector(self):
        with pytest.raises(DegenerateMaskError):
            bipartition(np.array([0.1, np.nan, -0.2]))

    def test_threshold_at_mean(self):
        mask = bipartition(np.array([0.9, 0.1, 0.2, 0.3]), (2, 2))
        np.testing.assert_array_equal(mask.labels, [[True, False], [False, False]])

    def test_majority_filter_removes_specks(self):
        mask = np.zeros((7, 7), dtype=bool)
        mask[3, 3] = True
        assert not majority_filter(mask).any()
        np.testing.assert_array_equal(majority_filter(~mask), np.ones((7, 7), dtype=bool))

    def test_majority_filter_keeps_blocks(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[3:7, 3:7] = True
        np.testing.assert_array_equal(majority_filter(mask), mask)

    def test_upsample_flip_and_uint8(self):
        mask = SegmentationMask(np.array([[True, False], [False, False]]))
        up = mask.upsampled((4, 4))
        assert up[:2, :2].all() and up.sum() == 4
        flipped = mask.flipped()
        np.testing.assert_array_equal(flipped.foreground, ~mask.labels)
        np.testing.assert_array_equal(flipped.flipped().foreground, mask.labels)
        assert mask.to_uint8((4, 4)).max() == 255
        assert mask.to_uint8().dtype == np.uint8


class TestSegment:
    def test_grid_mismatch(self):
        with pytest.raises(ShapeError):
            segment(np.ones((6, 6)), grid=(2, 2))

    def test_refinement_can_mark_degenerate(self):
        a = np.ones((9, 9))
        a[4, :] = a[:, 4] = 0.01
        mask = segment(a, grid=(3, 3))
        assert mask.labels[1, 1] and mask.labels.sum() == 1
        refined = segment(a, grid=(3, 3), refine=True)
        assert refined.degenerate
        assert not refined.labels.any()

    def test_recursive_cut_finds_three_regions(self, rng):
        weights = [[1.0, 0.05, 0.005], [0.05, 1.0, 0.005], [0.005, 0.005, 1.0]]
        a, groups = planted_graph([10, 10, 12], weights, rng)
        mask = segment(a, grid=(4, 8), recursive=True)
        regions = mask.regions.reshape(-1)
        assert set(np.unique(regions)) == {0, 1, 2}
        for g in range(3):
            assert len(np.unique(regions[groups == g])) == 1
        assert len({int(regions[groups == g][0]) for g in range(3)}) == 3
