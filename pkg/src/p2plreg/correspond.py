"""Correspondence machinery: hard nearest neighbors, score-driven soft and
hard pointers, reliability weights, and keypoint selection.

Score matrices are the exchange format between external feature pipelines
and this kernel: any caller-supplied (N, M) array of pre-softmax assignment
scores works. Target normal directions are averaged as outer-product
tensors rather than vectors, so randomly flipped normal signs cannot cancel
each other out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from . import eig3
from .cloud import PointCloud
from .geometry import RigidTransform

logger = logging.getLogger(__name__)

# Scores are clamped here before exponentiation to keep weights finite.
SCORE_CLAMP = 80.0
# Top-two eigenvalue gap below which a pointed direction is ill-defined.
DEGENERATE_TENSOR_GAP = 1e-9


@dataclass(frozen=True)
class CorrespondenceSet:
    """Per-source-point target position, target normal, and reliability.

    ``degenerate`` optionally marks indices whose pointed direction came
    from a (numerically) repeated top eigenvalue.
    """

    targets: NDArray[np.float64]  # (N, 3) pointed positions
    normals: NDArray[np.float64]  # (N, 3) pointed unit normals
    weights: NDArray[np.float64]  # (N,) nonnegative reliabilities
    degenerate: NDArray[np.bool_] | None = None

    def __post_init__(self):
        y = np.ascontiguousarray(self.targets, dtype=np.float64)
        n = np.ascontiguousarray(self.normals, dtype=np.float64)
        z = np.ascontiguousarray(self.weights, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != 3 or n.shape != y.shape or z.shape != (y.shape[0],):
            raise ValueError("inconsistent correspondence array shapes")
        if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-9):
            raise ValueError("pointed normals must be unit length")
        if np.any(z < 0.0):
            raise ValueError("reliability weights must be nonnegative")
        if not np.any(z > 0.0):
            raise ValueError("at least one reliability weight must be positive")
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "weights", z)

    def __len__(self) -> int:
        return int(self.targets.shape[0])


def unit_weights(n: int) -> NDArray[np.float64]:
    return np.ones(n)


def nn_correspond(source: PointCloud, target: PointCloud) -> CorrespondenceSet:
    """Euclidean nearest-neighbor correspondences with unit reliabilities.

    Exact ties resolve to the lowest target index.
    """
    normals = target.require_normals()
    tree = cKDTree(target.positions)
    if len(target) == 1:
        idx = np.zeros(len(source), dtype=np.intp)
    else:
        d, idx = tree.query(source.positions, k=2)
        idx = np.asarray(idx)
        tie = d[:, 0] == d[:, 1]
        idx0 = idx[:, 0].copy()
        idx0[tie] = np.minimum(idx[tie, 0], idx[tie, 1])
        idx = idx0
    return CorrespondenceSet(target.positions[idx], normals[idx], unit_weights(len(source)))


def exact_correspond(source: PointCloud, gt: RigidTransform, weights=None) -> CorrespondenceSet:
    """Noise-free correspondences obtained by pushing the source through a
    known transform. Test and benchmark fixture helper."""
    from .geometry import apply_transform

    moved = apply_transform(gt, source)
    w = unit_weights(len(source)) if weights is None else np.asarray(weights, dtype=np.float64)
    return CorrespondenceSet(moved.positions, moved.require_normals(), w)


def match_matrix(
    source: PointCloud,
    target: PointCloud,
    t: RigidTransform,
    alpha: float,
    beta: float,
) -> NDArray[np.float64]:
    """Pre-softmax assignment scores u_ij = -beta |R x_i + t - y_j|^2 + alpha.

    Row softmax of the result gives the normalized soft-assignment weights;
    beta controls hardness and alpha shifts rows without changing them.
    """
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    moved = source.positions @ t.rotation.T + t.translation
    diff = moved[:, None, :] - target.positions[None, :, :]
    return -beta * np.einsum("ijk,ijk->ij", diff, diff) + alpha


def row_softmax(u: NDArray[np.float64]) -> NDArray[np.float64]:
    shifted = u - u.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def soft_pointers(scores: NDArray[np.float64], target: PointCloud) -> CorrespondenceSet:
    """Score-weighted pointers: positions as softmax averages, directions as
    the principal axis of softmax-averaged normal tensors.

    Indices whose top two tensor eigenvalues coincide within
    DEGENERATE_TENSOR_GAP are flagged in ``degenerate``; a deterministic
    eigenvector is still returned for them.
    """
    u = np.asarray(scores, dtype=np.float64)
    normals = target.require_normals()
    if u.ndim != 2 or u.shape[1] != len(target):
        raise ValueError("score matrix columns must match the target size")
    if not np.all(np.isfinite(u)):
        raise ValueError("score matrix must be finite")

    c = row_softmax(u)
    y = c @ target.positions
    tensors = np.einsum("ij,ja,jb->iab", c, normals, normals)
    n, _, gap = eig3.principal_direction(tensors)
    degenerate = gap <= DEGENERATE_TENSOR_GAP
    if np.any(degenerate):
        logger.warning("soft_pointers: %d degenerate normal tensors", int(degenerate.sum()))
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    return CorrespondenceSet(y, n, unit_weights(u.shape[0]), degenerate=degenerate)


def naive_vector_pointers(scores: NDArray[np.float64], target: PointCloud):
    """Softmax average of normal *vectors*; the sign-fragile baseline.

    Returns the unnormalized averages so callers can observe how short the
    resultants become under antipodal normals.
    """
    c = row_softmax(np.asarray(scores, dtype=np.float64))
    return c @ target.require_normals()


def gumbel_hard_weights(
    scores: NDArray[np.float64],
    tau: float,
    seed: int,
    *,
    zero_noise: bool = False,
) -> NDArray[np.float64]:
    """One-hot rows at argmax_j (u_ij + q_ij) with standard Gumbel noise q.

    The temperature only rescales the softmax inside the argmax, so any
    tau > 0 selects the same entries; it is accepted for API parity.
    ``zero_noise`` is a test hook that skips the noise draw.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    u = np.asarray(scores, dtype=np.float64)
    if zero_noise:
        q = np.zeros_like(u)
    else:
        q = np.empty_like(u)
        for i in range(u.shape[0]):
            rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
            draw = rng.random(u.shape[1])
            # Clamp away from 0 and 1 so the double log stays finite.
            draw = np.clip(draw, 1e-12, 1.0 - 1e-12)
            q[i] = -np.log(-np.log(draw))
    pick = np.argmax(u + q, axis=1)
    out = np.zeros_like(u)
    out[np.arange(u.shape[0]), pick] = 1.0
    return out


def reliability_weights(scores: NDArray[np.float64]) -> NDArray[np.float64]:
    """Row sums of exponentiated scores, clamped at SCORE_CLAMP.

    Rows that underflow to zero are kept (and logged); downstream weighted
    solves treat them as zero-confidence pairs.
    """
    u = np.minimum(np.asarray(scores, dtype=np.float64), SCORE_CLAMP)
    zeta = np.exp(u).sum(axis=1)
    dead = zeta == 0.0
    if np.any(dead):
        logger.warning("reliability_weights: %d rows underflowed to zero", int(dead.sum()))
    return zeta


def topk_keypoints(feature_norms, k: int, *, order: str = "asc") -> NDArray[np.intp]:
    """Indices of the k smallest (``asc``) or largest (``desc``) saliencies.

    Stable: equal values keep their original relative order.
    """
    norms = np.asarray(feature_norms, dtype=np.float64).reshape(-1)
    if k > norms.shape[0]:
        raise ValueError("k must not exceed the number of features")
    if order not in ("asc", "desc"):
        raise ValueError("order must be 'asc' or 'desc'")
    key = norms if order == "asc" else -norms
    return np.argsort(key, kind="stable")[:k]


def load_scores_csv(path) -> NDArray[np.float64]:
    """Header-free CSV of N rows and M columns of assignment scores."""
    rows = []
    for i, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rows.append([float(v) for v in raw.split(",")])
        except ValueError:
            raise ValueError(f"scores CSV line {i}: non-numeric value") from None
    u = np.asarray(rows, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError("scores CSV rows have inconsistent lengths")
    return u
