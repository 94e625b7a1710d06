import numpy as np
import pytest
from scipy.optimize import brentq

from resrom import fom, geo


def homog(grid):
    return geo.PermeabilityField(values=np.ones(grid.n), seed=0)


# fluid model ---------------------------------------------------------------

def test_fluid_props_validation():
    with pytest.raises(ValueError):
        fom.FluidProps(mu_w=0.0)
    with pytest.raises(ValueError):
        fom.FluidProps(s_wc=0.6, s_or=0.5)


def test_fractional_flow_endpoints(props):
    fw, dfw = fom.fractional_flow(np.array([0.2, 0.8]), props)
    assert np.allclose(fw, [0.0, 1.0])
    assert np.allclose(dfw, [0.0, 0.0])
    # clamped outside the mobile window
    fw_out, dfw_out = fom.fractional_flow(np.array([0.05, 0.95]), props)
    assert np.allclose(fw_out, [0.0, 1.0])
    assert np.allclose(dfw_out, [0.0, 0.0])


def test_fractional_flow_midpoint_value(props):
    # se = 0.5, mu ratio 2/3: fw = 0.25 / (0.25 + (2/3) 0.25) = 0.6 and
    # dfw = (2 (2/3) 0.25) / (5/12)^2 / 0.6 = 3.2, worked out by hand
    fw, dfw = fom.fractional_flow(np.array([0.5]), props)
    assert fw[0] == pytest.approx(0.6, abs=1e-12)
    assert dfw[0] == pytest.approx(3.2, abs=1e-12)


def test_fractional_flow_derivative_matches_fd(props):
    s = np.linspace(0.25, 0.75, 11)
    h = 1e-6
    _, dfw = fom.fractional_flow(s, props)
    fd = (fom.fractional_flow(s + h, props)[0]
          - fom.fractional_flow(s - h, props)[0]) / (2 * h)
    assert np.abs(dfw - fd).max() < 1e-6


def test_fractional_flow_monotone(props):
    s = np.linspace(0.2, 0.8, 201)
    fw, _ = fom.fractional_flow(s, props)
    assert (np.diff(fw) >= 0).all()
    assert (fw >= 0).all() and (fw <= 1).all()


def test_mobilities(props):
    lam_w, lam_o = fom.corey_mobilities(np.array([0.2, 0.8]), props)
    assert np.allclose(lam_w, [0.0, 1.0])
    assert np.allclose(lam_o, [1.0 / 1.5, 0.0])


# sources -------------------------------------------------------------------

def test_quarter_five_spot_layout(grid16):
    src = fom.quarter_five_spot(grid16, rate=0.05)
    assert src.q.sum() == pytest.approx(0.0, abs=1e-15)
    assert src.q[0] == pytest.approx(0.05)
    assert src.q[grid16.n - 1] == pytest.approx(-0.05)
    assert src.injection_rate == pytest.approx(0.05)
    assert src.pin_cell == grid16.n - 1


def test_edge_drive_layout():
    g = geo.build_grid(4, 4)
    src = fom.edge_drive(g, rate=0.08)
    assert src.q.sum() == pytest.approx(0.0, abs=1e-15)
    assert len(src.injectors) == 4 and len(src.producers) == 4
    assert src.q[src.injectors] == pytest.approx(0.02)
    assert src.injection_rate == pytest.approx(0.08)


def test_source_validation():
    g = geo.build_grid(2, 2)
    q = np.array([1.0, 0.0, 0.0, -0.5])
    with pytest.raises(ValueError):
        fom.SourceConfig(q=q, injectors=np.array([0]),
                         producers=np.array([3]), pin_cell=3)
    q2 = np.array([1.0, 0.0, 0.0, -1.0])
    with pytest.raises(ValueError):
        fom.SourceConfig(q=q2, injectors=np.array([0]),
                         producers=np.array([3]), pin_cell=0)


# pressure ------------------------------------------------------------------

def test_pressure_system_structure(grid16, props):
    src = fom.quarter_five_spot(grid16)
    s = np.full(grid16.n, 0.2)
    sys = fom.assemble_pressure(grid16, homog(grid16), s, src, props)
    nm = sys.neumann_matrix
    # conservative operator: zero row sums and symmetry
    assert np.abs(nm @ np.ones(grid16.n)).max() < 1e-12
    assert abs(nm - nm.T).max() < 1e-14


def test_pressure_solution_physics(grid16, props):
    src = fom.quarter_five_spot(grid16)
    s = np.full(grid16.n, 0.2)
    sys = fom.assemble_pressure(grid16, homog(grid16), s, src, props)
    y_p = fom.solve_pressure(sys)
    v = fom.compute_velocity(y_p, grid16, homog(grid16), s, props)
    # discrete divergence recovers the sources
    assert np.abs(fom.divergence(v, grid16) - src.q).max() < 1e-10
    # flow runs downhill from injector to producer
    assert y_p[0] > y_p[grid16.n - 1]
    assert y_p[sys.pin_cell] == pytest.approx(0.0, abs=1e-12)


def test_velocity_no_flow_boundary(grid16, props):
    src = fom.quarter_five_spot(grid16)
    s = np.full(grid16.n, 0.2)
    sys = fom.assemble_pressure(grid16, homog(grid16), s, src, props)
    v = fom.compute_velocity(fom.solve_pressure(sys), grid16,
                             homog(grid16), s, props)
    assert np.all(v.vx[:, 0] == 0) and np.all(v.vx[:, -1] == 0)
    assert np.all(v.vy[0, :] == 0) and np.all(v.vy[-1, :] == 0)


# transport -----------------------------------------------------------------

def two_cell_setup():
    g = geo.build_grid(2, 1, porosity=0.2)
    src = fom.quarter_five_spot(g, rate=0.05)
    props = fom.FluidProps()
    s = np.full(2, props.s_wc)
    sys = fom.assemble_pressure(g, homog(g), s, src, props)
    v = fom.compute_velocity(fom.solve_pressure(sys), g, homog(g), s, props)
    op = fom.assemble_saturation_operator(v, src, g, props)
    return g, src, props, op


def test_two_cell_step_matches_scalar_oracle():
    """Injector cell of a 2-cell chain obeys a scalar implicit equation:

        x = s0 + dt * rate/(phi V) * (1 - fw(x)),

    solvable to machine precision with a bracketing root finder that
    knows nothing about the sparse machinery.
    """
    g, src, props, op = two_cell_setup()
    dt = 0.24    # 0.06 PVI at this rate and pore volume
    rs = 0.05 / (g.porosity * g.cell_volume)

    s1 = fom.step_saturation_implicit(op, np.full(2, 0.2), dt)

    def g0(x):
        return x - 0.2 - dt * rs * (1.0 - fom.fractional_flow(x, props)[0])

    x_star = brentq(g0, 0.2, 0.8, xtol=1e-14)
    assert s1[0] == pytest.approx(x_star, abs=1e-9)
    # downstream cell: x1 = s1 + dt rs (fw(x0) - fw(x1))
    fw0 = fom.fractional_flow(s1[0], props)[0]
    r1 = s1[1] - 0.2 + dt * rs * (fom.fractional_flow(s1[1], props)[0] - fw0)
    assert abs(r1) < 1e-9


def test_step_stays_in_mobile_window():
    g, src, props, op = two_cell_setup()
    s = np.full(2, 0.2)
    for _ in range(40):
        s = fom.step_saturation_implicit(op, s, 0.24)
        assert (s >= 0.2 - 1e-12).all() and (s <= 0.8 + 1e-12).all()
    # after 40 steps of 0.06 PVI the injector cell is near flooded
    assert s[0] > 0.7


def test_step_newton_divergence_raises():
    g, src, props, op = two_cell_setup()
    with pytest.raises(fom.NewtonDivergence):
        fom.step_saturation_implicit(op, np.full(2, 0.2), 0.24, max_iter=0)


def test_mass_balance_against_wells(props):
    """Water volume gained per step equals injected minus produced,
    with production weighted by the producing cell's fractional flow."""
    g = geo.build_grid(8, 8)
    src = fom.quarter_five_spot(g)
    sched = fom.Schedule(dt_pvi=0.06, n_steps=12, pressure_every=4)
    traj = fom.run_fom(homog(g), src, g, props, sched)
    dt = sched.solver_dt(g, src)
    vol = g.porosity * g.cell_volume
    prod = g.n - 1
    s_prev = traj.s0
    for t in range(traj.n_steps):
        s_new = traj.saturations[:, t]
        gained = vol * (s_new - s_prev).sum()
        fw_prod = fom.fractional_flow(s_new[prod], props)[0]
        expected = dt * (0.05 - 0.05 * fw_prod)
        assert gained == pytest.approx(expected, abs=1e-10)
        s_prev = s_new


def test_diagonal_symmetry_homogeneous(props):
    """Quarter-five-spot flow on a homogeneous field is symmetric in
    the grid diagonal, a property the discretization must preserve."""
    g = geo.build_grid(8, 8)
    src = fom.quarter_five_spot(g)
    sched = fom.Schedule(dt_pvi=0.06, n_steps=10, pressure_every=5)
    traj = fom.run_fom(homog(g), src, g, props, sched)
    s_grid = traj.saturations[:, -1].reshape(8, 8)
    assert np.abs(s_grid - s_grid.T).max() < 1e-9


def test_time_refinement_converges(props):
    """Halving the transport step must shrink the time error."""
    g = geo.build_grid(4, 4)
    src = fom.quarter_five_spot(g)

    def final_state(n_steps):
        sched = fom.Schedule(dt_pvi=0.6 / n_steps, n_steps=n_steps,
                             pressure_every=1)
        return fom.run_fom(homog(g), src, g, props, sched).saturations[:, -1]

    ref = final_state(40)
    e_coarse = np.linalg.norm(final_state(10) - ref)
    e_fine = np.linalg.norm(final_state(20) - ref)
    assert e_fine < 0.7 * e_coarse


# trajectory bookkeeping ----------------------------------------------------

def test_schedule_validation_and_dt(grid16):
    with pytest.raises(ValueError):
        fom.Schedule(dt_pvi=0.0)
    with pytest.raises(ValueError):
        fom.Schedule(n_steps=0)
    src = fom.quarter_five_spot(grid16, rate=0.05)
    sched = fom.Schedule(dt_pvi=0.015)
    # 0.015 PVI of a 0.2 pore-volume domain at rate 0.05
    assert sched.solver_dt(grid16, src) == pytest.approx(0.06)


def test_run_fom_shapes(grid16, props):
    src = fom.quarter_five_spot(grid16)
    sched = fom.Schedule(dt_pvi=0.03, n_steps=10, pressure_every=4)
    traj = fom.run_fom(homog(grid16), src, grid16, props, sched)
    assert traj.saturations.shape == (grid16.n, 10)
    assert traj.fractional_flows.shape == (grid16.n, 10)
    assert traj.pressures.shape == (grid16.n, 3)   # solves at t = 0, 4, 8
    assert np.allclose(traj.s0, 0.2)
    assert traj.pvi() == pytest.approx(0.03 * np.arange(1, 11))
    fw_expected = fom.fractional_flow(traj.saturations[:, -1], props)[0]
    assert np.allclose(traj.fractional_flows[:, -1], fw_expected)
