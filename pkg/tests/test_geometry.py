"""PCA, principal angles, linear probes, and cross-task projection."""

import numpy as np
import pytest

from taskweave.errors import ContractError
from taskweave.geometry import (
    ProbeCurve,
    cross_task_projection_eval,
    linear_task_probe,
    pca,
    principal_angles,
    projection_sweep,
    sliding_window_probe,
    task_subspace,
)
from taskweave.metrics import roc_auc


def basis_vectors(dim, *indices):
    out = np.zeros((dim, len(indices)))
    for col, idx in enumerate(indices):
        out[idx, col] = 1.0
    return out


def oracle_pca(X):
    """Independent route: eigendecomposition of the covariance matrix."""
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    return eigvals[order], eigvecs[:, order]


def align_signs(basis):
    flip = basis[np.abs(basis).argmax(axis=0), np.arange(basis.shape[1])] < 0
    out = basis.copy()
    out[:, flip] *= -1.0
    return out


class TestPca:
    def test_line_in_three_dims(self):
        rng = np.random.default_rng(0)
        direction = np.array([1.0, 2.0, -1.0])
        direction /= np.linalg.norm(direction)
        X = np.outer(rng.standard_normal(50), direction)
        space = pca(X)
        assert space.eigvals[0] > 1e-2
        np.testing.assert_allclose(space.eigvals[1:], 0.0, atol=1e-20)
        cos = abs(space.basis[:, 0] @ direction)
        assert abs(cos - 1.0) < 1e-10

    def test_projection_reconstructs(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((30, 6))
        space = pca(X)
        coords = (X - space.mean) @ space.basis
        back = coords @ space.basis.T + space.mean
        np.testing.assert_allclose(back, X, atol=1e-10)

    def test_orthonormal_basis(self):
        rng = np.random.default_rng(2)
        space = pca(rng.standard_normal((40, 8)))
        gram = space.basis.T @ space.basis
        np.testing.assert_allclose(gram, np.eye(space.dim), atol=1e-10)
        assert (space.eigvals >= 0).all()
        assert (np.diff(space.eigvals) <= 1e-12).all()

    def test_duplicating_rows_keeps_basis(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((25, 5))
        doubled = np.vstack([X, X])
        base = pca(X)
        dup = pca(doubled)
        oracle_vals, oracle_vecs = oracle_pca(doubled)
        np.testing.assert_allclose(dup.basis, align_signs(oracle_vecs), atol=1e-8)
        np.testing.assert_allclose(dup.basis, base.basis, atol=1e-8)
        # Eigenvalues rescale by the new (n - 1) denominator.
        n = X.shape[0]
        np.testing.assert_allclose(
            dup.eigvals, base.eigvals * 2 * (n - 1) / (2 * n - 1), atol=1e-10
        )

    def test_needs_two_rows(self):
        with pytest.raises(ContractError):
            pca(np.ones((1, 3)))


class TestTaskSubspace:
    def test_rank_two_data(self):
        rng = np.random.default_rng(4)
        coords = rng.standard_normal((60, 2))
        X = coords @ rng.standard_normal((2, 7))
        assert task_subspace(X, 0.99).dim == 2

    def test_threshold_one_gives_numerical_rank(self):
        rng = np.random.default_rng(5)
        coords = rng.standard_normal((60, 3))
        X = coords @ rng.standard_normal((3, 7))
        assert task_subspace(X, 1.0).dim == 3

    def test_isotropic_matches_oracle_spectrum(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((2000, 10))
        space = task_subspace(X, 0.99)
        vals, _ = oracle_pca(X)
        share = np.cumsum(vals) / vals.sum()
        oracle_k = int(np.searchsorted(share, 0.99) + 1)
        assert space.dim == oracle_k
        assert space.dim in (9, 10)


class TestPrincipalAngles:
    def test_identical_subspaces(self):
        rng = np.random.default_rng(7)
        space = pca(rng.standard_normal((30, 6)))
        angles = principal_angles(space, space)
        assert (angles < 1e-8).all()

    def test_orthogonal_planes(self):
        from taskweave.geometry import Subspace

        f = Subspace(basis_vectors(4, 0, 1), np.ones(2), np.zeros(4))
        g = Subspace(basis_vectors(4, 2, 3), np.ones(2), np.zeros(4))
        np.testing.assert_allclose(principal_angles(f, g), np.pi / 2, atol=1e-8)

    def test_shared_axis_and_tilted_plane(self):
        from taskweave.geometry import Subspace

        f = Subspace(basis_vectors(4, 0, 1), np.ones(2), np.zeros(4))
        tilted = np.zeros((4, 2))
        tilted[0, 0] = 1.0
        tilted[1, 1] = tilted[2, 1] = 1.0 / np.sqrt(2.0)
        g = Subspace(tilted, np.ones(2), np.zeros(4))
        np.testing.assert_allclose(principal_angles(f, g), [0.0, np.pi / 4], atol=1e-8)

    def test_nondecreasing_and_bounded(self):
        rng = np.random.default_rng(8)
        f = pca(rng.standard_normal((40, 9)))
        g = pca(rng.standard_normal((40, 9)))
        angles = principal_angles(f, g)
        assert angles.size == min(f.dim, g.dim)
        assert (angles >= 0).all() and (angles <= np.pi / 2 + 1e-12).all()
        assert (np.diff(angles) >= -1e-12).all()

    def test_symmetry(self):
        rng = np.random.default_rng(9)
        f = task_subspace(rng.standard_normal((40, 6)), 0.9)
        g = task_subspace(rng.standard_normal((40, 6)), 0.8)
        np.testing.assert_allclose(
            principal_angles(f, g), principal_angles(g, f), atol=1e-10
        )

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scipy_oracle(self, seed):
        from scipy.linalg import subspace_angles

        rng = np.random.default_rng(seed)
        f = task_subspace(rng.standard_normal((30, 7)), 0.9)
        g = task_subspace(rng.standard_normal((30, 7)), 0.95)
        mine = principal_angles(f, g)
        oracle = np.sort(subspace_angles(f.basis, g.basis))
        np.testing.assert_allclose(mine, oracle, atol=1e-10)

    def test_zero_angle_count_equals_intersection_dim(self):
        from taskweave.geometry import Subspace

        f = Subspace(basis_vectors(5, 0, 1, 2), np.ones(3), np.zeros(5))
        g = Subspace(basis_vectors(5, 0, 1, 3), np.ones(3), np.zeros(5))
        angles = principal_angles(f, g)
        assert int((angles < 1e-8).sum()) == 2

    def test_ambient_mismatch(self):
        from taskweave.geometry import Subspace

        f = Subspace(basis_vectors(4, 0), np.ones(1), np.zeros(4))
        g = Subspace(basis_vectors(5, 0), np.ones(1), np.zeros(5))
        with pytest.raises(ContractError):
            principal_angles(f, g)


class TestLinearTaskProbe:
    def test_distant_clusters_fully_separable(self):
        rng = np.random.default_rng(10)
        centers = 10.0 * np.eye(4)[:, :3]
        X = np.vstack([c + 0.1 * rng.standard_normal((30, 3)) for c in centers])
        labels = np.repeat(np.arange(4), 30)
        mean, std = linear_task_probe(X, labels)
        assert mean == 1.0

    def test_shuffled_labels_at_chance(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((400, 5))
        labels = rng.integers(0, 4, 400)
        mean, _ = linear_task_probe(X, labels)
        assert abs(mean - 0.25) < 0.1

    def test_one_dimensional_overlap_matches_threshold_oracle(self):
        rng = np.random.default_rng(12)
        q = 0.3
        n = 2000
        a = rng.uniform(0.0, 1.0, n)
        b = rng.uniform(1.0 - q, 2.0 - q, n)
        X = np.concatenate([a, b])[:, None]
        labels = np.repeat([0, 1], n)
        mean, _ = linear_task_probe(X, labels)
        # Brute-force optimal threshold on the sampled data.
        thresholds = np.linspace(1.0 - q, 1.0, 200)
        oracle = max(
            ((np.concatenate([a, b]) >= t) == labels).mean() for t in thresholds
        )
        assert abs(mean - oracle) < 0.03
        assert abs(mean - (1 - q / 2)) < 0.03

    def test_requires_fold_count_per_class(self):
        with pytest.raises(ContractError, match="samples"):
            linear_task_probe(np.ones((12, 2)), np.repeat([0, 1], 6), folds=10)


class TestSlidingWindowProbe:
    def make_planted(self, n_tasks=4, per_task=60, dims=10):
        rng = np.random.default_rng(13)
        means = np.zeros((n_tasks, dims))
        means[:, :3] = 3.0 * rng.standard_normal((n_tasks, 3))
        X = np.vstack(
            [m + rng.standard_normal((per_task, dims)) for m in means]
        )
        return X, np.repeat(np.arange(n_tasks), per_task)

    def test_signal_concentrated_in_early_pcs(self):
        X, labels = self.make_planted()
        curve = sliding_window_probe(X, labels, window=3, folds=5)
        assert curve.means[0] > 0.9
        assert curve.means[-1] < 0.45  # chance for 4 tasks is 0.25

    def test_curve_length(self):
        X, labels = self.make_planted(dims=8)
        curve = sliding_window_probe(X, labels, window=3, folds=5)
        assert len(curve) == 8 - 3 + 1
        assert curve.starts == list(range(6))

    def test_full_window_equals_plain_probe(self):
        X, labels = self.make_planted(dims=6)
        curve = sliding_window_probe(X, labels, window=6, folds=5)
        assert len(curve) == 1
        plain_mean, _ = linear_task_probe(X, labels, folds=5)
        assert abs(curve.means[0] - plain_mean) < 0.01

    def test_window_too_large(self):
        X, labels = self.make_planted(dims=6)
        with pytest.raises(ContractError, match="window"):
            sliding_window_probe(X, labels, window=7)


def cosine_auc_eval(genuine_pairs, impostor_pairs):
    def closure(coords):
        normed = coords / np.linalg.norm(coords, axis=1, keepdims=True)
        g = np.einsum("ij,ij->i", normed[genuine_pairs[:, 0]], normed[genuine_pairs[:, 1]])
        i = np.einsum("ij,ij->i", normed[impostor_pairs[:, 0]], normed[impostor_pairs[:, 1]])
        return roc_auc(g, i)

    return closure


class TestCrossTaskProjection:
    def make_target(self, seed=14, n=120, dim=8):
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(10), n // 10)
        centers = rng.standard_normal((10, dim))
        X = centers[labels] + 0.3 * rng.standard_normal((n, dim))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        genuine = np.array([(i, j) for i in range(n) for j in range(i + 1, n) if labels[i] == labels[j]])
        impostor_all = [(i, j) for i in range(n) for j in range(i + 1, n) if labels[i] != labels[j]]
        impostor = np.array(impostor_all[:: max(1, len(impostor_all) // len(genuine))])
        return X, cosine_auc_eval(genuine, impostor)

    def test_full_rank_projection_is_lossless(self):
        rng = np.random.default_rng(15)
        source = rng.standard_normal((100, 8))
        source /= np.linalg.norm(source, axis=1, keepdims=True)
        target, evaluator = self.make_target()
        basis = pca(source, center=False)
        _, delta = cross_task_projection_eval(basis, basis.dim, target, evaluator)
        assert abs(delta) < 1e-10

    def test_one_pc_loses_performance(self):
        rng = np.random.default_rng(16)
        source = rng.standard_normal((100, 8))
        target, evaluator = self.make_target()
        basis = pca(source, center=False)
        full = evaluator(target)
        value, delta = cross_task_projection_eval(basis, 1, target, evaluator)
        assert full > 0.9
        assert delta < -0.05

    def test_sweep_shape_and_final_point(self):
        rng = np.random.default_rng(17)
        source = rng.standard_normal((60, 8))
        target, evaluator = self.make_target()
        basis = pca(source, center=False)
        sweep = projection_sweep(basis, target, evaluator, max_k=basis.dim)
        assert [k for k, _, _ in sweep] == list(range(1, basis.dim + 1))
        assert abs(sweep[-1][2]) < 1e-10

    def test_k_beyond_rank_rejected(self):
        rng = np.random.default_rng(18)
        basis = pca(rng.standard_normal((30, 5)), center=False)
        target, evaluator = self.make_target(dim=5)
        with pytest.raises(ContractError):
            cross_task_projection_eval(basis, basis.dim + 1, target, evaluator)


class TestProbeCurveType:
    def test_len(self):
        curve = ProbeCurve(window=3, starts=[0, 1], means=[0.9, 0.5], stds=[0.01, 0.02])
        assert len(curve) == 2
