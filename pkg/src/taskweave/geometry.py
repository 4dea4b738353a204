"""Embedding-space structure analysis.

Principal components per task, principal angles between task subspaces,
sliding-window linear probes of task identity, and cross-task evaluation of
metrics inside another task's PC subspace.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .errors import ContractError

DEFAULT_VARIANCE_FRACTION = 0.99
_RANK_TOL = 1e-12


@dataclass
class Subspace:
    """Column-orthonormal PC basis with its explained-variance spectrum."""

    basis: np.ndarray  # (ambient, k)
    eigvals: np.ndarray  # (k,), nonincreasing
    mean: np.ndarray  # (ambient,), zero for uncentered bases
    source_task: str = ""

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    def truncated(self, k: int) -> "Subspace":
        if not 1 <= k <= self.dim:
            raise ContractError(f"k = {k} outside the basis rank {self.dim}")
        return Subspace(self.basis[:, :k], self.eigvals[:k], self.mean, self.source_task)


def pca(X: np.ndarray, center: bool = True, source_task: str = "") -> Subspace:
    """Full-rank principal components via SVD.

    Columns follow the sign convention that each one's largest-magnitude
    entry is positive; eigenvalues are squared singular values over (n - 1).
    ``center=False`` decomposes the raw matrix (used for projections that
    must preserve inner products exactly).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ContractError("need a 2-D matrix with at least 2 rows")
    mean = X.mean(axis=0) if center else np.zeros(X.shape[1])
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    basis = vt.T
    flip = basis[np.abs(basis).argmax(axis=0), np.arange(basis.shape[1])] < 0
    basis[:, flip] *= -1.0
    return Subspace(
        basis=basis,
        eigvals=s**2 / (X.shape[0] - 1),
        mean=mean,
        source_task=source_task,
    )


def task_subspace(
    X: np.ndarray,
    variance_fraction: float = DEFAULT_VARIANCE_FRACTION,
    center: bool = True,
    source_task: str = "",
) -> Subspace:
    """PCA truncated at the smallest dimension whose cumulative eigenvalue
    share reaches ``variance_fraction`` (full numerical rank at 1.0)."""
    if not 0.0 < variance_fraction <= 1.0:
        raise ContractError("variance_fraction must lie in (0, 1]")
    full = pca(X, center=center, source_task=source_task)
    total = full.eigvals.sum()
    if total == 0.0:
        return full.truncated(1)
    if variance_fraction >= 1.0:
        k = int((full.eigvals > _RANK_TOL * full.eigvals[0]).sum())
        return full.truncated(max(k, 1))
    share = np.cumsum(full.eigvals) / total
    k = int(np.searchsorted(share, variance_fraction) + 1)
    return full.truncated(min(k, full.dim))


def principal_angles(f: Subspace, g: Subspace) -> np.ndarray:
    """Canonical angles between two subspaces, nondecreasing, in [0, pi/2].

    The cosines are singular values of the cross-Gram matrix of the two
    orthonormal bases, which matches the recursive best-aligned-pair
    definition. Angles below 45 degrees are recovered through the sine of
    the projection residual instead of arccos, which loses half the digits
    near sigma = 1. Zero angles count shared directions; pi/2 orthogonal
    ones.
    """
    if f.ambient_dim != g.ambient_dim:
        raise ContractError("subspaces must share their ambient dimension")
    small, large = (f.basis, g.basis) if f.dim <= g.dim else (g.basis, f.basis)
    sigma = np.linalg.svd(small.T @ large, compute_uv=False)
    from_cos = np.arccos(np.clip(sigma, 0.0, 1.0))
    residual = small - large @ (large.T @ small)
    mu = np.linalg.svd(residual, compute_uv=False)
    from_sin = np.arcsin(np.clip(mu, 0.0, 1.0))[::-1]
    # Both routes are ascending in angle; take each angle from its
    # well-conditioned side.
    return np.where(sigma**2 > 0.5, from_sin, from_cos)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _fit_multinomial(
    X: np.ndarray, y: np.ndarray, n_classes: int, ridge: float, gtol: float
) -> np.ndarray:
    """Multinomial logistic weights (d+1, C) found by L-BFGS on the convex
    cross-entropy objective, run to the gradient-norm tolerance."""
    n, d = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0

    def objective(theta):
        W = theta.reshape(d + 1, n_classes)
        probs = _softmax_rows(Xb @ W)
        loss = -np.log(probs[np.arange(n), y] + 1e-300).mean()
        grad = Xb.T @ (probs - onehot) / n
        if ridge > 0:
            loss += 0.5 * ridge * (W[:-1] ** 2).sum()
            grad[:-1] += ridge * W[:-1]
        return loss, grad.ravel()

    result = minimize(
        objective,
        np.zeros((d + 1) * n_classes),
        jac=True,
        method="L-BFGS-B",
        options={"gtol": gtol, "maxiter": 1000, "ftol": 0.0},
    )
    return result.x.reshape(d + 1, n_classes)


def _stratified_folds(y: np.ndarray, folds: int) -> np.ndarray:
    """Fold id per sample: within each class, samples cycle through folds in
    index order, so splits are deterministic and class-balanced."""
    assignment = np.empty(y.size, dtype=int)
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        assignment[members] = np.arange(members.size) % folds
    return assignment


def linear_task_probe(
    embeddings: np.ndarray,
    task_labels,
    folds: int = 10,
    ridge: float = 0.0,
    gtol: float = 1e-8,
) -> tuple[float, float]:
    """Stratified k-fold CV accuracy of a linear classifier predicting the
    task an embedding came from. Returns (mean, std) across folds."""
    X = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(task_labels)
    if X.shape[0] != labels.size:
        raise ContractError("labels must align with embedding rows")
    classes, y = np.unique(labels, return_inverse=True)
    counts = np.bincount(y)
    if (counts < folds).any():
        raise ContractError(f"every task needs at least {folds} samples")
    fold_of = _stratified_folds(y, folds)
    accs = []
    for f in range(folds):
        held = fold_of == f
        W = _fit_multinomial(X[~held], y[~held], classes.size, ridge, gtol)
        Xb = np.hstack([X[held], np.ones((held.sum(), 1))])
        pred = (Xb @ W).argmax(axis=1)
        accs.append((pred == y[held]).mean())
    return float(np.mean(accs)), float(np.std(accs))


@dataclass
class ProbeCurve:
    """Task-probe accuracy over sliding windows of consecutive PCs."""

    window: int
    starts: list[int]  # 0-based index of the first PC in each window
    means: list[float]
    stds: list[float]

    def __len__(self) -> int:
        return len(self.starts)


def sliding_window_probe(
    embeddings: np.ndarray,
    task_labels,
    window: int = 3,
    folds: int = 10,
    ridge: float = 0.0,
) -> ProbeCurve:
    """Probe task identity from each window of ``window`` consecutive PCs of
    the pooled embeddings, sliding from early to late components."""
    X = np.asarray(embeddings, dtype=np.float64)
    space = pca(X)
    if window < 1 or window > space.dim:
        raise ContractError(f"window must lie in [1, {space.dim}]")
    coords = (X - space.mean) @ space.basis
    starts, means, stds = [], [], []
    for start in range(space.dim - window + 1):
        mean, std = linear_task_probe(
            coords[:, start : start + window], task_labels, folds=folds, ridge=ridge
        )
        starts.append(start)
        means.append(mean)
        stds.append(std)
    return ProbeCurve(window=window, starts=starts, means=means, stds=stds)


def cross_task_projection_eval(
    source: Subspace,
    k: int,
    target_embeddings: np.ndarray,
    target_eval: Callable[[np.ndarray], float],
) -> tuple[float, float]:
    """Evaluate a target-task metric inside the top-k source-task PCs.

    Target embeddings are expressed in the k-dimensional source coordinates
    (centered by the source mean if the source basis was centered) and fed to
    ``target_eval``; returns the metric there and its signed delta from the
    full-space value.
    """
    X = np.asarray(target_embeddings, dtype=np.float64)
    if X.shape[1] != source.ambient_dim:
        raise ContractError("target embeddings must live in the source ambient space")
    sub = source.truncated(k)
    full_value = target_eval(X)
    coords = (X - sub.mean) @ sub.basis
    value = target_eval(coords)
    return float(value), float(value - full_value)


def projection_sweep(
    source: Subspace,
    target_embeddings: np.ndarray,
    target_eval: Callable[[np.ndarray], float],
    max_k: int | None = None,
) -> list[tuple[int, float, float]]:
    """(k, value, delta) for k = 1 .. min(max_k, source rank)."""
    top = source.dim if max_k is None else min(max_k, source.dim)
    return [
        (k, *cross_task_projection_eval(source, k, target_embeddings, target_eval))
        for k in range(1, top + 1)
    ]
