"""Correspondence machinery tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2plreg.cloud import PointCloud
from p2plreg.correspond import (
    CorrespondenceSet,
    gumbel_hard_weights,
    load_scores_csv,
    match_matrix,
    naive_vector_pointers,
    nn_correspond,
    reliability_weights,
    row_softmax,
    soft_pointers,
    topk_keypoints,
)
from p2plreg.geometry import RigidTransform, random_rotation


def _cloud(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, 3))
    nrm = rng.standard_normal((n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm)


class TestNearestNeighbor:
    def test_self_correspondence(self):
        cloud = _cloud(1, 100)
        corr = nn_correspond(cloud, cloud)
        np.testing.assert_array_equal(corr.targets, cloud.positions)
        np.testing.assert_array_equal(corr.normals, cloud.normals)
        np.testing.assert_array_equal(corr.weights, np.ones(100))

    def test_matches_exhaustive_scan(self):
        source = _cloud(2, 1000)
        target = _cloud(3, 1000)
        corr = nn_correspond(source, target)
        d2 = np.sum((source.positions[:, None, :] - target.positions[None, :, :]) ** 2, axis=2)
        idx = np.argmin(d2, axis=1)
        np.testing.assert_array_equal(corr.targets, target.positions[idx])
        np.testing.assert_array_equal(corr.normals, target.normals[idx])

    def test_exhaustive_scan_up_to_2000(self):
        source = _cloud(4, 2000)
        target = _cloud(5, 2000)
        corr = nn_correspond(source, target)
        d2 = np.sum((source.positions[:, None, :] - target.positions[None, :, :]) ** 2, axis=2)
        idx = np.argmin(d2, axis=1)
        np.testing.assert_array_equal(corr.targets, target.positions[idx])

    def test_tie_breaks_to_lowest_index(self):
        target = PointCloud(
            np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]),
            np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]),
        )
        source = PointCloud(np.zeros((1, 3)))
        corr = nn_correspond(source, target)
        np.testing.assert_array_equal(corr.targets[0], target.positions[0])

    def test_single_target(self):
        target = PointCloud(np.array([[1.0, 2.0, 3.0]]), np.array([[0.0, 0.0, 1.0]]))
        corr = nn_correspond(_cloud(6, 5), target)
        assert np.all(corr.targets == target.positions[0])


class TestSoftPointers:
    def test_saturated_scores_pick_one_target(self):
        target = _cloud(7, 12)
        u = np.zeros((4, 12))
        stars = [3, 0, 7, 11]
        for i, j in enumerate(stars):
            u[i, j] = 100.0
        corr = soft_pointers(u, target)
        for i, j in enumerate(stars):
            np.testing.assert_allclose(corr.targets[i], target.positions[j], atol=1e-6)
            dot = abs(corr.normals[i] @ target.normals[j])
            assert dot >= 1.0 - 1e-6

    def test_antipodal_normals_survive_tensor_average(self):
        n = np.array([0.6, 0.7, math.sqrt(1 - 0.85)])
        n /= np.linalg.norm(n)
        target = PointCloud(np.array([[1.0, 0, 0], [-1.0, 0, 0]]), np.stack([n, -n]))
        corr = soft_pointers(np.zeros((1, 2)), target)
        assert abs(corr.normals[0] @ n) >= 1.0 - 1e-9
        # The vector-average baseline collapses on the same fixture.
        resultant = naive_vector_pointers(np.zeros((1, 2)), target)
        assert np.linalg.norm(resultant[0]) < 1e-12

    def test_matches_dense_eigensolver(self):
        rng = np.random.default_rng(8)
        target = _cloud(9, 30)
        u = rng.standard_normal((25, 30))
        corr = soft_pointers(u, target)
        c = row_softmax(u)
        for i in range(25):
            s = np.einsum("j,ja,jb->ab", c[i], target.normals, target.normals)
            lams, vecs = np.linalg.eigh(s)
            expect = vecs[:, -1]
            dot = abs(expect @ corr.normals[i])
            assert dot >= 1.0 - 1e-8

    def test_sign_flip_invariance_100_patterns(self):
        rng = np.random.default_rng(10)
        target = _cloud(11, 40)
        u = rng.standard_normal((16, 40))
        base = soft_pointers(u, target).normals
        for _ in range(100):
            flips = np.where(rng.random(40) < 0.5, -1.0, 1.0)
            flipped = PointCloud(target.positions, target.normals * flips[:, None])
            out = soft_pointers(u, flipped).normals
            angular = np.abs(np.abs(np.einsum("ni,ni->n", base, out)) - 1.0)
            assert np.max(angular) <= 1e-8

    def test_degenerate_tensor_flagged(self):
        # Two orthogonal normals with equal weight: top eigenvalues tie.
        target = PointCloud(
            np.array([[1.0, 0, 0], [0, 1.0, 0]]),
            np.array([[1.0, 0, 0], [0, 1.0, 0]]),
        )
        corr = soft_pointers(np.zeros((1, 2)), target)
        assert corr.degenerate is not None and corr.degenerate[0]


class TestMatchMatrix:
    def test_aligned_diagonal_is_row_max(self):
        cloud = _cloud(12, 25)
        u = match_matrix(cloud, cloud, RigidTransform.identity(), alpha=0.0, beta=2.0)
        assert np.all(np.diag(u) == 0.0)
        off = u - np.diag(np.full(25, np.inf))
        assert np.all(np.diag(u) >= off.max(axis=1))

    def test_large_beta_reproduces_nearest_neighbor(self):
        source = _cloud(13, 60)
        target = _cloud(14, 80)
        u = match_matrix(source, target, RigidTransform.identity(), alpha=0.3, beta=1e6)
        soft = row_softmax(u)
        picks = np.argmax(soft, axis=1)
        corr = nn_correspond(source, target)
        np.testing.assert_array_equal(target.positions[picks], corr.targets)
        np.testing.assert_allclose(soft.max(axis=1), 1.0, atol=1e-9)

    def test_alpha_shift_invariance(self):
        source = _cloud(15, 10)
        target = _cloud(16, 15)
        t = RigidTransform(random_rotation(np.random.default_rng(17)), np.zeros(3))
        s1 = row_softmax(match_matrix(source, target, t, alpha=0.0, beta=1.5))
        s2 = row_softmax(match_matrix(source, target, t, alpha=7.0, beta=1.5))
        np.testing.assert_allclose(s1, s2, atol=1e-12)

    def test_beta_positive_required(self):
        with pytest.raises(ValueError):
            match_matrix(_cloud(18, 4), _cloud(19, 4), RigidTransform.identity(), 0.0, 0.0)


class TestGumbel:
    def test_zero_noise_hook_is_argmax(self):
        u = np.array([[0.1, 3.0, -1.0], [5.0, 4.0, 4.9]])
        w = gumbel_hard_weights(u, tau=0.7, seed=0, zero_noise=True)
        np.testing.assert_array_equal(w, [[0, 1, 0], [1, 0, 0]])

    def test_rows_exactly_one_hot(self):
        rng = np.random.default_rng(20)
        u = rng.standard_normal((64, 9))
        w = gumbel_hard_weights(u, tau=1.0, seed=5)
        assert set(np.unique(w)) <= {0.0, 1.0}
        np.testing.assert_array_equal(w.sum(axis=1), np.ones(64))

    def test_tau_does_not_change_selection(self):
        rng = np.random.default_rng(21)
        u = rng.standard_normal((32, 6))
        a = gumbel_hard_weights(u, tau=0.01, seed=9)
        b = gumbel_hard_weights(u, tau=100.0, seed=9)
        np.testing.assert_array_equal(a, b)

    def test_constant_row_shift_invariance(self):
        rng = np.random.default_rng(22)
        u = rng.standard_normal((16, 5))
        a = gumbel_hard_weights(u, tau=1.0, seed=11)
        b = gumbel_hard_weights(u + 3.25, tau=1.0, seed=11)
        np.testing.assert_array_equal(a, b)

    def test_selection_frequencies_match_softmax(self):
        # The perturb-and-argmax construction samples the softmax
        # distribution; Monte-Carlo frequencies must match (1, 2, 3) / 6.
        u = np.tile(np.log(np.array([1.0, 2.0, 3.0])), (100_000, 1))
        w = gumbel_hard_weights(u, tau=1.0, seed=123)
        freq = w.mean(axis=0)
        np.testing.assert_allclose(freq, [1 / 6, 2 / 6, 3 / 6], atol=0.01)


class TestReliability:
    def test_uniform_scores(self):
        zeta = reliability_weights(np.zeros((3, 5)))
        np.testing.assert_array_equal(zeta, [5.0, 5.0, 5.0])

    def test_underflow_row_is_zero(self):
        u = np.full((2, 4), -1e9)
        u[0] = 0.0
        zeta = reliability_weights(u)
        assert zeta[0] == 4.0
        assert zeta[1] == 0.0

    def test_matches_compensated_sum(self):
        rng = np.random.default_rng(23)
        u = rng.uniform(-30, 30, size=(50, 200))
        zeta = reliability_weights(u)
        for i in range(50):
            expect = math.fsum(math.exp(v) for v in u[i])
            assert zeta[i] == pytest.approx(expect, rel=1e-12)

    def test_clamp_keeps_finite(self):
        zeta = reliability_weights(np.full((1, 3), 1e9))
        assert np.isfinite(zeta).all()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_in_scores(self, seed):
        rng = np.random.default_rng(seed)
        u = rng.uniform(-5, 5, size=(4, 6))
        i, j = rng.integers(4), rng.integers(6)
        bumped = u.copy()
        bumped[i, j] += 0.5
        base = reliability_weights(u)
        up = reliability_weights(bumped)
        assert up[i] > base[i]
        mask = np.arange(4) != i
        np.testing.assert_array_equal(up[mask], base[mask])


class TestTopK:
    def test_example(self):
        np.testing.assert_array_equal(topk_keypoints([3.0, 1.0, 2.0], 2), [1, 2])

    def test_k_equals_n(self):
        out = topk_keypoints([5.0, 1.0, 3.0], 3)
        np.testing.assert_array_equal(sorted(out), [0, 1, 2])

    def test_matches_full_sort(self):
        rng = np.random.default_rng(24)
        norms = rng.standard_normal(500)
        out = topk_keypoints(norms, 40)
        np.testing.assert_array_equal(out, np.argsort(norms, kind="stable")[:40])

    def test_descending_option(self):
        rng = np.random.default_rng(25)
        norms = rng.standard_normal(100)
        out = topk_keypoints(norms, 10, order="desc")
        np.testing.assert_array_equal(out, np.argsort(-norms, kind="stable")[:10])

    def test_stable_on_ties(self):
        np.testing.assert_array_equal(topk_keypoints([1.0, 1.0, 1.0], 2), [0, 1])


class TestCorrespondenceSet:
    def test_rejects_nonunit_normals(self):
        with pytest.raises(ValueError):
            CorrespondenceSet(np.zeros((2, 3)), np.full((2, 3), 0.5), np.ones(2))

    def test_rejects_negative_weights(self):
        n = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        with pytest.raises(ValueError):
            CorrespondenceSet(np.zeros((2, 3)), n, np.array([1.0, -0.1]))

    def test_rejects_all_zero_weights(self):
        n = np.array([[0.0, 0.0, 1.0]])
        with pytest.raises(ValueError):
            CorrespondenceSet(np.zeros((1, 3)), n, np.zeros(1))


def test_scores_csv_round_trip(tmp_path):
    u = np.array([[1.5, -2.0, 3.0], [0.0, 0.25, -1.75]])
    path = tmp_path / "scores.csv"
    path.write_text("\n".join(",".join("%.17g" % v for v in row) for row in u) + "\n")
    np.testing.assert_array_equal(load_scores_csv(path), u)


def test_scores_csv_rejects_garbage(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1.0,2.0\n1.0,x\n")
    with pytest.raises(ValueError, match="line 2"):
        load_scores_csv(path)
