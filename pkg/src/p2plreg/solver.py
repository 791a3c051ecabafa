"""Forward registration solvers.

The point-to-plane path linearizes the rotation around the identity, solves
a 6x6 normal system for an axis-angle/translation step, re-maps the step
through the exact rotation formula, and accumulates steps into the running
transform. Correspondences stay fixed for the whole accumulation; the
classic ICP wrapper re-derives them between accumulations.

Everything funnels through one batched kernel so that solving B perturbed
copies of a problem (as the finite-difference oracle does) follows exactly
the same arithmetic as a single solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .cloud import PointCloud
from .correspond import CorrespondenceSet, nn_correspond
from .geometry import (
    RigidTransform,
    apply_transform,
    compose,
    log_rotation,
    rodrigues,
    rodrigues_batch,
)

# Accumulation steps below this magnitude count as converged.
STEP_TOL = 1e-10
# A pivot this far below the largest one marks the system as singular.
PIVOT_RATIO = 1e-14
# Condition estimate beyond this sets the report's warning flag.
CONDITION_LIMIT = 1e12


class SingularSystem(np.linalg.LinAlgError):
    """The 6x6 normal system is rank deficient (degenerate geometry)."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class DegenerateConfiguration(ValueError):
    """Procrustes cross-covariance has rank < 2 (collinear points)."""


@dataclass(frozen=True)
class LinearizedSystem:
    """Normal equations of the linearized plane energy.

    Unknown ordering is (a0, a1, a2, t0, t1, t2) with ``a`` the axis-angle
    part. ``a_matrix`` is symmetric positive semidefinite by construction.
    """

    a_matrix: NDArray[np.float64]  # (6, 6)
    b_vector: NDArray[np.float64]  # (6,)


@dataclass
class SolveReport:
    """Outcome of an accumulation run (or an ICP outer loop)."""

    transform: RigidTransform
    energy_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    condition_warning: bool = False


def _check_sizes(corr: CorrespondenceSet, source: PointCloud) -> None:
    if len(corr) != len(source):
        raise ValueError(
            f"correspondence count {len(corr)} does not match source size {len(source)}"
        )


def energy(corr: CorrespondenceSet, source: PointCloud, t: RigidTransform) -> float:
    """Weighted point-to-plane energy sum zeta_i ((R x_i + t - y_i) . n_i)^2."""
    _check_sizes(corr, source)
    moved = source.positions @ t.rotation.T + t.translation
    res = np.einsum("ni,ni->n", moved - corr.targets, corr.normals)
    return float(np.sum(corr.weights * res * res))


def _system_batch(x, y, n, zeta, out_v=None):
    """A and b of the linearized system for (B, N, 3) inputs.

    ``out_v`` optionally supplies a reusable (B, N, 6) scratch buffer; the
    sqrt-weighted rows make the Gram product symmetric bitwise.
    """
    b_dim, n_dim = x.shape[:2]
    v = out_v if out_v is not None else np.empty((b_dim, n_dim, 6))
    x0, x1, x2 = x[..., 0], x[..., 1], x[..., 2]
    n0, n1, n2 = n[..., 0], n[..., 1], n[..., 2]
    np.subtract(x1 * n2, x2 * n1, out=v[..., 0])
    np.subtract(x2 * n0, x0 * n2, out=v[..., 1])
    np.subtract(x0 * n1, x1 * n0, out=v[..., 2])
    v[..., 3:] = n
    root = np.sqrt(zeta)
    v *= root[..., None]
    vt = v.transpose(0, 2, 1)
    a = vt @ v
    res = (y[..., 0] - x0) * n0 + (y[..., 1] - x1) * n1 + (y[..., 2] - x2) * n2
    b = (vt @ ((root * res)[..., None]))[..., 0]
    return a, b


def assemble(corr: CorrespondenceSet, source: PointCloud) -> LinearizedSystem:
    """Build the 6x6 system for the source positions as given.

    Callers accumulate by transforming the source before re-assembling.
    """
    _check_sizes(corr, source)
    a, b = _system_batch(
        source.positions[None],
        corr.targets[None],
        corr.normals[None],
        corr.weights[None],
    )
    return LinearizedSystem(a[0], b[0])


def _factor_batch(a: NDArray[np.float64], iteration: int | None):
    """Cholesky factor of a batch of 6x6 systems plus a condition flag.

    Raises SingularSystem when any factorization fails or when the smallest
    squared Cholesky pivot falls below PIVOT_RATIO times the largest.
    """
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        bad = 0
        for i in range(a.shape[0]):
            try:
                np.linalg.cholesky(a[i])
            except np.linalg.LinAlgError:
                bad = i
                break
        where = f" at iteration {iteration}" if iteration is not None else ""
        raise SingularSystem(
            f"singular 6x6 system{where} (batch item {bad})", iteration
        ) from None
    d = np.einsum("...ii->...i", chol)
    piv = d * d
    piv_min = piv.min(axis=-1)
    piv_max = piv.max(axis=-1)
    if np.any(piv_min < PIVOT_RATIO * piv_max):
        where = f" at iteration {iteration}" if iteration is not None else ""
        raise SingularSystem(f"singular 6x6 system{where} (tiny pivot)", iteration)
    condition = bool(np.any((piv_max / piv_min) > CONDITION_LIMIT))
    return chol, condition


def solve_step(sys: LinearizedSystem, damping: float = 0.0) -> RigidTransform:
    """Solve the linearized system and re-map through the rotation formula."""
    a = sys.a_matrix + damping * np.eye(6) if damping else sys.a_matrix
    _factor_batch(a[None], None)
    sol = np.linalg.solve(a, sys.b_vector)
    return RigidTransform(rodrigues(sol[:3]), sol[3:])


def _accumulate_batch(
    x0: NDArray[np.float64],
    y: NDArray[np.float64],
    n: NDArray[np.float64],
    zeta: NDArray[np.float64],
    n_iters: int,
    damping: float = 0.0,
    want_trace: bool = False,
):
    """Iterative accumulation over a batch of independent problems.

    Inputs are (B, N, 3) positions/targets/normals and (B, N) weights.
    Returns (rotations (B, 3, 3), translations (B, 3), traces (B, n_iters+1)
    or None, converged (B,), condition_warning bool). Runs exactly
    ``n_iters`` iterations; convergence is informational.
    """
    b_dim = x0.shape[0]
    rot = np.broadcast_to(np.eye(3), (b_dim, 3, 3)).copy()
    trans = np.zeros((b_dim, 3))
    converged = np.zeros(b_dim, dtype=bool)
    condition = False
    x = x0

    trace = None
    if want_trace:
        trace = np.empty((b_dim, n_iters + 1))
        res = np.einsum("bni,bni->bn", x - y, n)
        trace[:, 0] = np.sum(zeta * res * res, axis=1)

    damp_eye = damping * np.eye(6) if damping else None
    scratch = np.empty((b_dim, x.shape[1], 6))
    for k in range(n_iters):
        a_mat, b_vec = _system_batch(x, y, n, zeta, out_v=scratch)
        if damp_eye is not None:
            a_mat = a_mat + damp_eye
        _, cond_k = _factor_batch(a_mat, k)
        condition = condition or cond_k
        sol = np.linalg.solve(a_mat, b_vec[..., None])[..., 0]
        step_rot = rodrigues_batch(sol[:, :3])
        step_trans = sol[:, 3:]

        rot = step_rot @ rot
        trans = (step_rot @ trans[..., None])[..., 0] + step_trans
        x = x0 @ rot.transpose(0, 2, 1) + trans[:, None, :]

        step = np.linalg.norm(sol[:, :3], axis=1) + np.linalg.norm(step_trans, axis=1)
        converged |= step < STEP_TOL
        if want_trace:
            res = np.einsum("bni,bni->bn", x - y, n)
            trace[:, k + 1] = np.sum(zeta * res * res, axis=1)

    return rot, trans, trace, converged, condition


def register_p2pl(
    corr: CorrespondenceSet,
    source: PointCloud,
    n_iters: int = 10,
    damping: float = 0.0,
) -> SolveReport:
    """Point-to-plane registration by iterative accumulation.

    Runs exactly ``n_iters`` assemble/solve/compose rounds on the fixed
    correspondences; ten rounds are enough for the energies this module
    produces, and a fixed count keeps the input-to-transform map smooth for
    the finite-difference oracle.
    """
    _check_sizes(corr, source)
    if n_iters < 1:
        raise ValueError("n_iters must be at least 1")
    rot, trans, trace, converged, condition = _accumulate_batch(
        source.positions[None],
        corr.targets[None],
        corr.normals[None],
        corr.weights[None],
        n_iters,
        damping,
        want_trace=True,
    )
    return SolveReport(
        transform=RigidTransform(rot[0], trans[0]),
        energy_trace=[float(e) for e in trace[0]],
        iterations=n_iters,
        converged=bool(converged[0]),
        condition_warning=condition,
    )


def register_procrustes(corr: CorrespondenceSet, source: PointCloud) -> RigidTransform:
    """Weighted point-to-point alignment via SVD of the cross-covariance.

    Minimizes sum zeta_i |R x_i + t - y_i|^2; the determinant of the
    returned rotation is corrected to +1.
    """
    _check_sizes(corr, source)
    if len(source) < 3:
        raise DegenerateConfiguration("at least 3 pairs are required")
    w = corr.weights / corr.weights.sum()
    cs = w @ source.positions
    ct = w @ corr.targets
    h = (source.positions - cs).T @ ((corr.targets - ct) * w[:, None])
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateConfiguration("cross-covariance rank < 2")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, ct - r @ cs)


def icp(
    source: PointCloud,
    target: PointCloud,
    method: str = "p2pl",
    max_outer: int = 30,
    inner_iters: int = 10,
    damping: float = 0.0,
    source_weights=None,
) -> SolveReport:
    """Classic ICP: alternate nearest-neighbor matching with registration.

    ``method`` selects the per-round estimator: "p2p" (Procrustes) or
    "p2pl" (iterative accumulation with ``inner_iters`` rounds). Stops
    after ``max_outer`` rounds or when the update step drops below the
    convergence threshold. ``source_weights`` optionally fixes per-source
    reliabilities used by every round's estimator.
    """
    if method not in ("p2p", "p2pl"):
        raise ValueError("method must be 'p2p' or 'p2pl'")
    if method == "p2pl":
        target.require_normals()
    if source_weights is not None:
        source_weights = np.asarray(source_weights, dtype=np.float64).reshape(-1)
        if source_weights.shape[0] != len(source):
            raise ValueError("source_weights length must match the source size")

    running = RigidTransform.identity()
    trace: list[float] = []
    converged = False
    condition = False
    iterations = 0

    def matched(moved: PointCloud) -> CorrespondenceSet:
        corr = nn_correspond(moved, target)
        if source_weights is None:
            return corr
        return CorrespondenceSet(corr.targets, corr.normals, source_weights)

    def objective(moved: PointCloud, corr: CorrespondenceSet) -> float:
        if method == "p2pl":
            res = np.einsum("ni,ni->n", moved.positions - corr.targets, corr.normals)
            return float(np.sum(corr.weights * res * res))
        diff = moved.positions - corr.targets
        return float(np.sum(corr.weights * np.einsum("ni,ni->n", diff, diff)))

    moved = source
    corr = matched(moved)
    trace.append(objective(moved, corr))

    for _ in range(max_outer):
        if method == "p2p":
            delta = register_procrustes(corr, moved)
        else:
            inner = register_p2pl(corr, moved, n_iters=inner_iters, damping=damping)
            condition = condition or inner.condition_warning
            delta = inner.transform
        running = compose(delta, running)
        iterations += 1

        moved = apply_transform(running, source)
        corr = matched(moved)
        trace.append(objective(moved, corr))

        step = float(np.linalg.norm(log_rotation(delta.rotation))) + float(
            np.linalg.norm(delta.translation)
        )
        if step < STEP_TOL:
            converged = True
            break

    return SolveReport(
        transform=running,
        energy_trace=trace,
        iterations=iterations,
        converged=converged,
        condition_warning=condition,
    )
