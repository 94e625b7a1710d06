"""Proper orthogonal decomposition bases and discrete empirical interpolation.

Snapshot matrices hold one state per column.  POD modes come from a thin
SVD with a deterministic sign convention (the largest-magnitude entry of
every mode is positive) so bases are reproducible across runs and BLAS
builds that flip signs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    """A dense factorization failed to converge or hit a singular block."""


@dataclass(frozen=True)
class SnapshotSet:
    """Stacked states from a batch of training simulations.

    Columns are ordered realization-major, time-minor: all steps of the
    first trajectory, then all steps of the second, and so on.
    """

    pressures: np.ndarray = field(repr=False)     # (n, L * n_solves)
    saturations: np.ndarray = field(repr=False)   # (n, L * n_steps)
    nonlinearity: np.ndarray = field(repr=False)  # (n, L * n_steps)
    n_realizations: int


def collect_snapshots(trajectories):
    """Stack the recorded states of several trajectories column-wise."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("no trajectories given")
    steps = {t.saturations.shape for t in trajectories}
    if len(steps) != 1:
        raise ValueError(f"trajectories disagree on shape: {sorted(steps)}")
    return SnapshotSet(
        pressures=np.hstack([t.pressures for t in trajectories]),
        saturations=np.hstack([t.saturations for t in trajectories]),
        nonlinearity=np.hstack([t.fractional_flows for t in trajectories]),
        n_realizations=len(trajectories),
    )


def _fix_signs(u):
    flip = u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    return u


@dataclass(frozen=True)
class PODBasis:
    modes: np.ndarray = field(repr=False)  # (n, rank), orthonormal columns
    singular_values: np.ndarray            # full spectrum, descending

    @property
    def rank(self):
        return self.modes.shape[1]

    @property
    def n(self):
        return self.modes.shape[0]


def compute_pod(snapshots, rank):
    """Leading left singular vectors of a snapshot matrix.

    Returns the basis together with the complete singular-value spectrum;
    the spectrum beyond ``rank`` is what `ls_error` and rank selection
    reason about.
    """
    snapshots = np.asarray(snapshots, dtype=np.float64)
    if snapshots.ndim != 2:
        raise ValueError("snapshot matrix must be 2-D")
    max_rank = min(snapshots.shape)
    if not 1 <= rank <= max_rank:
        raise ValueError(f"rank {rank} outside [1, {max_rank}]")
    try:
        u, sigma, _ = np.linalg.svd(snapshots, full_matrices=False)
    except np.linalg.LinAlgError as err:
        raise NumericFailure(f"SVD did not converge: {err}") from err
    return PODBasis(modes=_fix_signs(u[:, :rank].copy()),
                    singular_values=sigma)


def select_rank(singular_values, threshold):
    """Smallest rank whose omitted singular-value mass stays below
    ``threshold``, as a fraction of the total."""
    sigma = np.asarray(singular_values, dtype=np.float64)
    total = sigma.sum()
    if total <= 0:
        raise ValueError("spectrum has no energy; nothing to select")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    omitted = 1.0 - np.cumsum(sigma) / total
    return int(np.argmax(omitted < threshold)) + 1


def ls_project(basis, y):
    """Reduced coordinates of full states (columns or a single vector)."""
    return basis.modes.T @ y


def ls_reconstruct(basis, y_reduced):
    return basis.modes @ y_reduced


def ls_error(basis, y):
    """2-norm (columnwise) of the orthogonal-projection residual."""
    resid = y - basis.modes @ (basis.modes.T @ y)
    return np.linalg.norm(resid, axis=0)


def deim_select_points(modes):
    """Greedy interpolation points for a nonlinearity basis.

    The first point is the largest-magnitude entry of the first mode;
    each later mode is interpolated at the points picked so far and the
    next point lands where that interpolation errs worst.  Requires full
    column rank; ties resolve to the smallest row index via argmax.
    """
    v = np.asarray(modes, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] < 1:
        raise ValueError("need a 2-D basis with at least one column")
    if np.linalg.matrix_rank(v) < v.shape[1]:
        raise ValueError("nonlinearity basis is rank deficient")
    m = v.shape[1]
    points = np.empty(m, dtype=np.int64)
    points[0] = np.argmax(np.abs(v[:, 0]))
    for j in range(1, m):
        coeffs = np.linalg.solve(v[points[:j], :j], v[points[:j], j])
        resid = v[:, j] - v[:, :j] @ coeffs
        points[j] = np.argmax(np.abs(resid))
    return points


@dataclass(frozen=True)
class DEIMOperator:
    """Precomputed pieces of the interpolated nonlinear term.

    ``matrix`` maps sampled nonlinearity values straight into the reduced
    state equation; ``sampled_modes`` reconstructs the sampled entries of
    the state, so evaluating the nonlinearity costs O(m) instead of O(n).
    """

    nonlin_modes: np.ndarray = field(repr=False)  # (n, m)
    points: np.ndarray                            # (m,)
    matrix: np.ndarray = field(repr=False)        # (r, m)
    sampled_modes: np.ndarray = field(repr=False)  # (m, r)


def build_deim_operator(state_modes, transport_matrix, nonlin_modes, points):
    """Assemble the reduced DEIM operator for one velocity window.

    Solves against the point-sampled nonlinearity block rather than
    inverting it; its conditioning is logged because a bad point set
    shows up there first.
    """
    v = np.asarray(nonlin_modes, dtype=np.float64)
    points = np.asarray(points, dtype=np.int64)
    if points.size != v.shape[1]:
        raise ValueError("one interpolation point per mode is required")
    pv = v[points, :]
    cond = np.linalg.cond(pv)
    log.debug("DEIM sampled block: m=%d cond=%.3e", points.size, cond)
    projected = state_modes.T @ (transport_matrix @ v)  # (r, m)
    try:
        matrix = np.linalg.solve(pv.T, projected.T).T
    except np.linalg.LinAlgError as err:
        raise NumericFailure(
            f"sampled nonlinearity block is singular (cond={cond:.3e})"
        ) from err
    return DEIMOperator(nonlin_modes=v, points=points, matrix=matrix,
                        sampled_modes=np.asarray(state_modes)[points, :].copy())
