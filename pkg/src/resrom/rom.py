"""Reduced-order time stepping.

The full transport step is projected onto a POD basis, either by plain
Galerkin projection (the nonlinearity is evaluated at full order and
projected) or with DEIM interpolation (the nonlinearity is sampled at a
few rows, so no O(n) work remains in the step).  Operators are rebuilt at
every pressure refresh from the reconstructed reduced state, mirroring
the full-order mobility lag.

Both operator classes bind the time step at construction and expose
``residual`` / ``vjp_next`` / ``vjp_cur`` on arbitrary leading batch
axes, which is exactly the oracle interface `resrom.drrnn` trains
against; stacked variants batch one operator per training sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import drrnn
from .basis import NumericFailure, build_deim_operator
from .fom import (assemble_pressure, assemble_saturation_operator,
                  compute_velocity, fractional_flow)


@dataclass(frozen=True)
class ReducedPressure:
    matrix: np.ndarray = field(repr=False)  # (r_p, r_p)
    rhs: np.ndarray = field(repr=False)
    modes: np.ndarray = field(repr=False)


def reduce_pressure(system, basis):
    """Galerkin congruence of the pinned pressure system."""
    u = basis.modes
    return ReducedPressure(matrix=u.T @ (system.matrix @ u),
                           rhs=u.T @ system.rhs, modes=u)


def solve_reduced_pressure(reduced):
    """Returns reduced coordinates and the reconstructed pressure."""
    try:
        y_red = np.linalg.solve(reduced.matrix, reduced.rhs)
    except np.linalg.LinAlgError as err:
        raise NumericFailure(f"reduced pressure matrix is singular: {err}") from err
    return y_red, reduced.modes @ y_red


class GalerkinTransportOp:
    """Projected transport residual for one velocity window.

    r(y', y) = y' - y + dt * (U^T B f_w(U y') - U^T d)

    The state is reconstructed at full order to evaluate the fractional
    flow, so stepping still costs O(n) per iteration.
    """

    def __init__(self, reduced_matrix, reduced_source, state_modes, props, dt):
        self.Br = reduced_matrix          # (r, n) or (L, r, n)
        self.d = reduced_source           # matching (r,) or (L, r)
        self.modes = state_modes          # (n, r), shared across any batch
        self.props = props
        self.dt = dt

    @property
    def rank(self):
        return self.modes.shape[1]

    def _flux_term(self, y_next):
        s = y_next @ self.modes.T
        fw, dfw = fractional_flow(s, self.props)
        if self.Br.ndim == 2:
            term = fw @ self.Br.T
        else:
            term = np.einsum("...rn,...n->...r", self.Br, fw)
        return term, dfw

    def residual(self, y_next, y_cur):
        term, _ = self._flux_term(y_next)
        return y_next - y_cur + self.dt * (term - self.d)

    def jacobian(self, y_next):
        """Dense (r, r) Jacobian in y_next; single-state operators only."""
        _, dfw = fractional_flow(y_next @ self.modes.T, self.props)
        return np.eye(self.rank) + self.dt * ((self.Br * dfw) @ self.modes)

    def vjp_next(self, y_next, lam):
        _, dfw = fractional_flow(y_next @ self.modes.T, self.props)
        if self.Br.ndim == 2:
            back = lam @ self.Br
        else:
            back = np.einsum("...r,...rn->...n", lam, self.Br)
        return lam + self.dt * ((back * dfw) @ self.modes)

    def vjp_cur(self, y_next, lam):
        return -lam


class DeimTransportOp:
    """Interpolated transport residual for one velocity window.

    r(y', y) = y' - y + dt * (D f_w(P^T U y') - U^T d)

    Every evaluation touches only the m sampled rows, so cost depends on
    (r, m) but never on the grid size.
    """

    def __init__(self, matrix, sampled_modes, reduced_source, props, dt):
        self.D = matrix                  # (r, m) or (L, r, m)
        self.sampled = sampled_modes     # (m, r), shared across any batch
        self.d = reduced_source
        self.props = props
        self.dt = dt

    @property
    def rank(self):
        return self.sampled.shape[1]

    def residual(self, y_next, y_cur):
        fw, _ = fractional_flow(y_next @ self.sampled.T, self.props)
        if self.D.ndim == 2:
            term = fw @ self.D.T
        else:
            term = np.einsum("...rm,...m->...r", self.D, fw)
        return y_next - y_cur + self.dt * (term - self.d)

    def jacobian(self, y_next):
        _, dfw = fractional_flow(y_next @ self.sampled.T, self.props)
        return np.eye(self.rank) + self.dt * ((self.D * dfw) @ self.sampled)

    def vjp_next(self, y_next, lam):
        _, dfw = fractional_flow(y_next @ self.sampled.T, self.props)
        if self.D.ndim == 2:
            back = lam @ self.D
        else:
            back = np.einsum("...r,...rm->...m", lam, self.D)
        return lam + self.dt * ((back * dfw) @ self.sampled)

    def vjp_cur(self, y_next, lam):
        return -lam


def step_rom_newton(op, y_cur, tol=1e-8, max_iter=20):
    """One implicit reduced step with the same damped Newton as the
    full-order solver.

    Returns ``(y_next, converged, iterations)``.  Iterations continue
    past the nominal tolerance while each one still shrinks the residual
    substantially.  A failed step (stall or singular Jacobian) hands back
    the best iterate seen so that a rollout can keep going and the
    failure be recorded by the caller.
    """
    floor = 1e-14 * np.sqrt(y_cur.size)
    y = np.array(y_cur, dtype=np.float64)
    norm = float(np.linalg.norm(op.residual(y, y_cur)))
    prev_norm = np.inf
    iterations = 0
    while iterations < max_iter and np.isfinite(norm):
        if norm <= tol and (norm <= floor or norm > 0.01 * prev_norm):
            return y, True, iterations
        try:
            delta = np.linalg.solve(op.jacobian(y),
                                    op.residual(y, y_cur))
        except np.linalg.LinAlgError:
            break
        iterations += 1
        prev_norm = norm
        scale, improved = 1.0, False
        while scale > 1e-12:
            trial = y - scale * delta
            norm_t = float(np.linalg.norm(op.residual(trial, y_cur)))
            if np.isfinite(norm_t) and norm_t < norm:
                y, norm = trial, norm_t
                improved = True
                break
            scale *= 0.5
        if not improved:
            break
    return y, bool(norm <= tol), iterations


@dataclass(frozen=True)
class ReducedTrajectory:
    """Rollout of a reduced model, with reconstructed saturations.

    Reconstruction clamps to the mobile window only on output; internally
    the reduced state evolves unclamped.  ``newton_failures`` lists
    (step, residual) pairs for steps that missed the tolerance;
    ``blew_up`` flags a rollout that left finite range, with the
    remaining columns padded with NaN.
    """

    reduced_states: np.ndarray = field(repr=False)      # (r, n_steps)
    saturations: np.ndarray = field(repr=False)         # (n, n_steps)
    reduced_pressures: np.ndarray = field(repr=False)   # (r_p, n_solves)
    newton_failures: tuple
    blew_up: bool
    dt_pvi: float

    @property
    def n_steps(self):
        return self.reduced_states.shape[1]


def _window_operator(grid, perm, src, props, dt, s_state, prev_flux,
                     sat_basis, pres_basis, nonlin_modes, deim_points):
    """Refresh pressure and build the reduced transport operator from the
    current (reconstructed) saturation state."""
    system = assemble_pressure(grid, perm, s_state, src, props, prev_flux)
    y_red_p, y_p = solve_reduced_pressure(reduce_pressure(system, pres_basis))
    v = compute_velocity(y_p, grid, perm, s_state, props, prev_flux)
    full_op = assemble_saturation_operator(v, src, grid, props)
    u = sat_basis.modes
    d_red = u.T @ full_op.d
    if nonlin_modes is None:
        reduced = (full_op.B.T @ u).T  # U^T B without densifying B
        op = GalerkinTransportOp(reduced, d_red, u, props, dt)
    else:
        deim = build_deim_operator(u, full_op.B, nonlin_modes, deim_points)
        op = DeimTransportOp(deim.matrix, deim.sampled_modes, d_red, props, dt)
    return op, v, y_red_p


def _rollout_reduced(perm, grid, props, src, schedule, sat_basis, pres_basis,
                     nonlin_modes, deim_points, advance):
    """Shared window/refresh loop for Newton and surrogate rollouts.

    ``advance(op, y)`` produces the next reduced state plus an optional
    failure record.
    """
    dt = schedule.solver_dt(grid, src)
    u = sat_basis.modes
    s0 = np.full(grid.n, props.s_wc)
    y = u.T @ s0
    low, high = props.mobile_range

    reduced = np.full((u.shape[1], schedule.n_steps), np.nan)
    sats = np.full((grid.n, schedule.n_steps), np.nan)
    pressures = []
    failures = []
    blew_up = False
    prev_flux = None
    op = None
    for t in range(schedule.n_steps):
        if t % schedule.pressure_every == 0:
            s_state = s0 if t == 0 else u @ y
            try:
                op, prev_flux, y_red_p = _window_operator(
                    grid, perm, src, props, dt, s_state, prev_flux,
                    sat_basis, pres_basis, nonlin_modes, deim_points)
            except NumericFailure:
                blew_up = True
                break
            pressures.append(y_red_p)
        y, failure = advance(op, y)
        if failure is not None:
            failures.append((t, failure))
        if not np.all(np.isfinite(y)):
            blew_up = True
            break
        reduced[:, t] = y
        sats[:, t] = np.clip(u @ y, low, high)
    n_p = len(pressures) if pressures else 1
    press = (np.column_stack(pressures) if pressures
             else np.full((pres_basis.rank, n_p), np.nan))
    return ReducedTrajectory(reduced_states=reduced, saturations=sats,
                             reduced_pressures=press,
                             newton_failures=tuple(failures),
                             blew_up=blew_up, dt_pvi=schedule.dt_pvi)


def run_rom(perm, grid, props, src, schedule, sat_basis, pres_basis,
            nonlin_modes=None, deim_points=None,
            newton_tol=1e-8, newton_max_iter=20):
    """Reduced Newton rollout; DEIM variant when a nonlinearity basis and
    point set are given, Galerkin projection otherwise."""

    def advance(op, y):
        y_next, converged, _ = step_rom_newton(op, y, tol=newton_tol,
                                               max_iter=newton_max_iter)
        if converged:
            return y_next, None
        return y_next, float(np.linalg.norm(op.residual(y_next, y)))

    return _rollout_reduced(perm, grid, props, src, schedule, sat_basis,
                            pres_basis, nonlin_modes, deim_points, advance)


def run_drrnn(perm, grid, props, src, schedule, sat_basis, pres_basis,
              params, nonlin_modes=None, deim_points=None):
    """Surrogate rollout: the trained network replaces the Newton loop,
    everything else (operator refresh, reconstruction) matches `run_rom`."""

    def advance(op, y):
        return drrnn.drrnn_step(params, y, op), None

    return _rollout_reduced(perm, grid, props, src, schedule, sat_basis,
                            pres_basis, nonlin_modes, deim_points, advance)


def build_training_set(saturations, perms, grid, props, src, schedule,
                       sat_basis, pres_basis, nonlin_modes=None,
                       deim_points=None):
    """Supervised training data for the surrogate.

    Targets are the LS projections of the full-order saturation matrices,
    one sequence per (matrix, permeability) pair.  The residual operators
    are rebuilt per pressure window from the LS-*reconstructed* reference
    state, the same construction a rollout applies to its own state, so
    a network that tracks the targets sees the same operators it will
    rebuild for itself at prediction time.  Operators of all sequences
    in a window are stacked into one batched oracle.
    """
    saturations = list(saturations)
    perms = list(perms)
    if not saturations:
        raise ValueError("no training trajectories")
    if len(perms) != len(saturations):
        raise ValueError("need one permeability field per trajectory")
    if any(s.shape != (grid.n, schedule.n_steps) for s in saturations):
        raise ValueError("saturation matrices do not match grid/schedule")
    dt = schedule.solver_dt(grid, src)
    u = sat_basis.modes
    n_steps = schedule.n_steps
    window_starts = list(range(0, n_steps, schedule.pressure_every))
    s0 = np.full(grid.n, props.s_wc)
    y0 = np.tile(u.T @ s0, (len(saturations), 1))
    targets = np.stack([(u.T @ s).T for s in saturations])

    per_seq_ops = []
    for i, perm in enumerate(perms):
        prev_flux = None
        ops = []
        for t0 in window_starts:
            s_state = s0 if t0 == 0 else u @ targets[i, t0 - 1]
            op, prev_flux, _ = _window_operator(
                grid, perm, src, props, dt, s_state, prev_flux,
                sat_basis, pres_basis, nonlin_modes, deim_points)
            ops.append(op)
        per_seq_ops.append(ops)

    oracles = []
    for w in range(len(window_starts)):
        ops = [seq[w] for seq in per_seq_ops]
        d = np.stack([op.d for op in ops])
        if nonlin_modes is None:
            stacked = GalerkinTransportOp(np.stack([op.Br for op in ops]),
                                          d, u, props, dt)
        else:
            stacked = DeimTransportOp(np.stack([op.D for op in ops]),
                                      ops[0].sampled, d, props, dt)
        oracles.append(stacked)

    window_of_step = np.repeat(np.arange(len(window_starts)),
                               schedule.pressure_every)[:n_steps]
    return drrnn.TrainingSet(y0=y0, targets=targets, oracles=oracles,
                             window_of_step=window_of_step)
