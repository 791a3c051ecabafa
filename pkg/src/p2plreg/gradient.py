"""Closed-form Jacobians of the solved transform with respect to inputs.

The solved transform is treated as the minimizer of the plane energy over
the 12 entries of (rotation, translation), with a quadratic orthogonality
penalty completing the curvature across the rotation-constraint directions.
Differentiating the minimality condition then gives, for every per-pair
input u (target position, target normal, source position, reliability):

    d g* / d u  =  -(d^2 E_hat / d g^2)^{-1} (d^2 E_hat / d u d g)

One 12x12 factorization is shared across all N right-hand sides, so the
backward cost does not depend on how many accumulation rounds produced the
transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .cloud import PointCloud
from .correspond import CorrespondenceSet
from .geometry import RigidTransform, to_gvector

# Penalty-gradient norms below this are treated as exactly orthogonal.
LAMBDA_DENOM_FLOOR = 1e-24
# Penalty weight band used by backward(), relative to the mean data
# curvature: large enough to pin the constraint directions, small enough
# to keep the 12x12 solve well conditioned in double precision.
LAMBDA_REL_FLOOR = 1e6
LAMBDA_REL_CAP = 1e8


class SingularHessian(np.linalg.LinAlgError):
    """Penalized energy Hessian is not invertible (degenerate geometry).

    Callers can retry after solving with damping to regularize the forward
    geometry.
    """


def _as_gvector(g) -> NDArray[np.float64]:
    if isinstance(g, RigidTransform):
        return to_gvector(g)
    arr = np.asarray(g, dtype=np.float64).reshape(-1)
    if arr.shape != (12,):
        raise ValueError("expected a RigidTransform or a 12-vector")
    return arr


def position_lift(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """(N, 12) vectors (x, x, x, 1, 1, 1) pairing positions with g."""
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([np.tile(x, (1, 3)), np.ones((x.shape[0], 3))], axis=1)


def normal_lift(n: NDArray[np.float64]) -> NDArray[np.float64]:
    """(N, 12) vectors (n0,n0,n0, n1,n1,n1, n2,n2,n2, n) pairing normals with g."""
    n = np.asarray(n, dtype=np.float64)
    return np.concatenate([np.repeat(n, 3, axis=1), n], axis=1)


def residual_coeffs(x: NDArray[np.float64], n: NDArray[np.float64]) -> NDArray[np.float64]:
    """Per-pair 12-vectors d with d . g == (R x + t) . n for any g.

    Equal to the elementwise product of the two lifts; rows are the
    gradients of the plane residuals in transform coordinates.
    """
    x = np.asarray(x, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    top = (n[:, :, None] * x[:, None, :]).reshape(x.shape[0], 9)
    return np.concatenate([top, n], axis=1)


def coeff_jacobian_wrt_normal(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """(N, 12, 3) Jacobian of residual_coeffs with respect to the normal."""
    x = np.asarray(x, dtype=np.float64)
    n_pts = x.shape[0]
    out = np.zeros((n_pts, 12, 3))
    for s in range(3):
        out[:, 3 * s : 3 * s + 3, s] = x
        out[:, 9 + s, s] = 1.0
    return out


def rotation_row_matrix(r: NDArray[np.float64]) -> NDArray[np.float64]:
    """9x9 matrix with entry (3p+q, 3u+s) = R[p, s] (rows replicated)."""
    r = np.asarray(r, dtype=np.float64)
    return np.repeat(np.tile(r, (1, 3)), 3, axis=0)


def penalty(r: NDArray[np.float64]) -> float:
    """Orthogonality penalty |R^T R - I|_F^2."""
    r = np.asarray(r, dtype=np.float64)
    c = r.T @ r - np.eye(3)
    return float(np.sum(c * c))


def penalty_gradient(r: NDArray[np.float64]) -> NDArray[np.float64]:
    """Row-major gradient of the orthogonality penalty: 4 R (R^T R - I).

    This is the derivative the penalty Hessian integrates; finite
    differences of ``penalty`` pin the product order.
    """
    r = np.asarray(r, dtype=np.float64)
    return (4.0 * r @ (r.T @ r - np.eye(3))).reshape(9)


def penalty_curvature(r: NDArray[np.float64]) -> NDArray[np.float64]:
    """9x9 second derivative of the orthogonality penalty divided by 4."""
    r = np.asarray(r, dtype=np.float64)
    rhat = rotation_row_matrix(r)
    eye3 = np.eye(3)
    return (
        rhat * rhat.T
        + np.eye(9)
        + np.kron(r @ r.T - eye3, eye3)
        + np.kron(eye3, r.T @ r - eye3)
    )


@dataclass(frozen=True)
class GradWorkspace:
    """Per-pair quantities shared by the backward formulas."""

    coeffs: NDArray[np.float64]  # (N, 12) residual gradients in g
    residuals: NDArray[np.float64]  # (N,) plane residuals at g
    offsets: NDArray[np.float64]  # (N, 3) R x_i + t - y_i
    rotation: NDArray[np.float64]  # (3, 3)
    translation: NDArray[np.float64]  # (3,)
    curvature: NDArray[np.float64]  # (9, 9) penalty curvature block


def build_workspace(
    corr: CorrespondenceSet, source: PointCloud, g
) -> GradWorkspace:
    gv = _as_gvector(g)
    rot = gv[:9].reshape(3, 3)
    trans = gv[9:]
    coeffs = residual_coeffs(source.positions, corr.normals)
    offsets = source.positions @ rot.T + trans - corr.targets
    residuals = np.einsum("ni,ni->n", offsets, corr.normals)
    return GradWorkspace(coeffs, residuals, offsets, rot, trans, penalty_curvature(rot))


def energy_gradient(
    corr: CorrespondenceSet, source: PointCloud, g, lam: float = 0.0
) -> NDArray[np.float64]:
    """Gradient of the penalized energy in the 12 transform coordinates."""
    ws = build_workspace(corr, source, g)
    grad = 2.0 * np.einsum("n,n,nk->k", corr.weights, ws.residuals, ws.coeffs)
    if lam != 0.0:
        grad = grad.copy()
        grad[:9] += lam * penalty_gradient(ws.rotation)
    return grad


def penalty_lambda(corr: CorrespondenceSet, source: PointCloud, g) -> float:
    """Least-squares penalty weight |dP . dE| / (dP . dP) on the rotation
    entries, zero when the rotation is numerically orthogonal (0/0 case)."""
    ws = build_workspace(corr, source, g)
    d_p = penalty_gradient(ws.rotation)
    denom = float(d_p @ d_p)
    if denom < LAMBDA_DENOM_FLOOR:
        return 0.0
    d_e = 2.0 * np.einsum("n,n,nk->k", corr.weights, ws.residuals, ws.coeffs[:, :9])
    return abs(float(d_p @ d_e)) / denom


def _data_hessian(weights, coeffs) -> NDArray[np.float64]:
    # sqrt-weighted Gram product keeps the result symmetric bitwise
    rd = coeffs * np.sqrt(weights)[:, None]
    return 2.0 * rd.T @ rd


def hessian(corr: CorrespondenceSet, source: PointCloud, g, lam: float) -> NDArray[np.float64]:
    """12x12 second derivative of the penalized energy at g."""
    ws = build_workspace(corr, source, g)
    h = _data_hessian(corr.weights, ws.coeffs)
    if lam != 0.0:
        h[:9, :9] += 4.0 * lam * ws.curvature
    return h


@dataclass(frozen=True)
class CrossDerivatives:
    """Per-pair mixed second derivatives of the energy, d(grad_g E)/d(input)."""

    wrt_y: NDArray[np.float64]  # (N, 12, 3)
    wrt_n: NDArray[np.float64]  # (N, 12, 3)
    wrt_x: NDArray[np.float64]  # (N, 12, 3)
    wrt_zeta: NDArray[np.float64]  # (N, 12)


def cross_derivs(corr: CorrespondenceSet, source: PointCloud, g) -> CrossDerivatives:
    ws = build_workspace(corr, source, g)
    zeta = corr.weights
    d = ws.coeffs
    r = ws.residuals
    w = ws.offsets
    n = corr.normals
    x = source.positions

    wrt_y = -2.0 * zeta[:, None, None] * d[:, :, None] * n[:, None, :]
    wrt_n = 2.0 * zeta[:, None, None] * (
        d[:, :, None] * w[:, None, :] + r[:, None, None] * coeff_jacobian_wrt_normal(x)
    )
    rot_n = n @ ws.rotation  # rows (R^T n_i)^T
    pos_jac = np.zeros((len(corr), 12, 3))
    for p in range(3):
        pos_jac[:, 3 * p : 3 * p + 3, :] = n[:, p, None, None] * np.eye(3)
    wrt_x = 2.0 * zeta[:, None, None] * (
        d[:, :, None] * rot_n[:, None, :] + r[:, None, None] * pos_jac
    )
    wrt_zeta = 2.0 * r[:, None] * d
    return CrossDerivatives(wrt_y, wrt_n, wrt_x, wrt_zeta)


@dataclass(frozen=True)
class GradientBundle:
    """Jacobians of the solved transform vector for every per-pair input."""

    d_g_d_x: NDArray[np.float64]  # (N, 12, 3)
    d_g_d_y: NDArray[np.float64]  # (N, 12, 3)
    d_g_d_n: NDArray[np.float64]  # (N, 12, 3)
    d_g_d_zeta: NDArray[np.float64]  # (N, 12)
    lam: float
    hessian: NDArray[np.float64]  # (12, 12)


def backward(corr: CorrespondenceSet, source: PointCloud, g) -> GradientBundle:
    """Assemble all per-pair Jacobians of the solved transform.

    The penalty weight from the least-squares fit is clipped into a band
    relative to the data curvature: the fit degenerates to 0/0 at the
    (numerically orthogonal) rotations the forward solver produces, while
    the constraint directions still need a stiff penalty block for the
    minimizer map to be the one the solver realizes. The clip bounds keep
    the factorization accurate in double precision.
    """
    gv = _as_gvector(g)
    ws = build_workspace(corr, source, gv)
    zeta = corr.weights
    d = ws.coeffs
    r = ws.residuals
    n = corr.normals
    x = source.positions

    h_data = _data_hessian(zeta, d)
    scale = float(np.trace(h_data)) / 12.0
    if not np.isfinite(scale) or scale <= 0.0:
        raise SingularHessian("data curvature vanished; no usable pairs")
    lam = penalty_lambda(corr, source, gv)
    lam = float(np.clip(lam, LAMBDA_REL_FLOOR * scale, LAMBDA_REL_CAP * scale))

    h = h_data
    h[:9, :9] += 4.0 * lam * ws.curvature

    rhs = np.concatenate([np.eye(12), d.T], axis=1)
    try:
        sol = np.linalg.solve(h, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularHessian(f"12x12 Hessian solve failed: {exc}") from None
    h_inv = sol[:, :12]
    hd = sol[:, 12:]  # (12, N) columns H^{-1} d_i

    # d g*/d u = -H^{-1} d(grad_g E)/d u for every input u.
    d_g_d_y = 2.0 * zeta[:, None, None] * hd.T[:, :, None] * n[:, None, :]
    d_g_d_zeta = -2.0 * r[:, None] * hd.T

    h_inv_rot = h_inv[:, :9].reshape(12, 3, 3)
    # Columns of H^{-1} applied to the normal-Jacobian of the coefficients.
    hinv_coeff_n = np.einsum("ksq,iq->iks", h_inv_rot, x) + h_inv[:, 9:][None, :, :]
    d_g_d_n = -2.0 * zeta[:, None, None] * (
        hd.T[:, :, None] * ws.offsets[:, None, :] + r[:, None, None] * hinv_coeff_n
    )

    rot_n = n @ ws.rotation
    hinv_coeff_x = np.einsum("kps,ip->iks", h_inv_rot, n)
    d_g_d_x = -2.0 * zeta[:, None, None] * (
        hd.T[:, :, None] * rot_n[:, None, :] + r[:, None, None] * hinv_coeff_x
    )
    return GradientBundle(d_g_d_x, d_g_d_y, d_g_d_n, d_g_d_zeta, lam, h)


@dataclass(frozen=True)
class PointGradients:
    """Loss gradients chained down to the per-pair inputs."""

    wrt_x: NDArray[np.float64]  # (N, 3)
    wrt_y: NDArray[np.float64]  # (N, 3)
    wrt_n: NDArray[np.float64]  # (N, 3)
    wrt_zeta: NDArray[np.float64]  # (N,)


def chain_loss(d_loss_d_g, bundle: GradientBundle) -> PointGradients:
    """Chain a loss gradient in g through every per-pair Jacobian."""
    v = np.asarray(d_loss_d_g, dtype=np.float64).reshape(12)
    return PointGradients(
        wrt_x=np.einsum("k,nkj->nj", v, bundle.d_g_d_x),
        wrt_y=np.einsum("k,nkj->nj", v, bundle.d_g_d_y),
        wrt_n=np.einsum("k,nkj->nj", v, bundle.d_g_d_n),
        wrt_zeta=bundle.d_g_d_zeta @ v,
    )


def rigid_motion_loss(g, gt: RigidTransform):
    """Rotation/translation supervision loss and its exact gradient in g.

    loss = |R^T R_gt - I|_F^2 + |t - t_gt|^2.
    """
    gv = _as_gvector(g)
    rot = gv[:9].reshape(3, 3)
    trans = gv[9:]
    c = rot.T @ gt.rotation - np.eye(3)
    dt = trans - gt.translation
    loss = float(np.sum(c * c) + dt @ dt)
    grad_rot = 2.0 * gt.rotation @ c.T
    grad = np.concatenate([grad_rot.reshape(9), 2.0 * dt])
    return loss, grad
