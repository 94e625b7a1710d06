import numpy as np
import pytest

from resrom import basis, fom, geo


def snapshot_matrix(rng, n=40, cols=25):
    """Smooth random snapshots with a fast-decaying spectrum."""
    left = rng.standard_normal((n, 8))
    right = rng.standard_normal((8, cols))
    scales = 2.0 ** -np.arange(8)
    return left @ (scales[:, None] * right) + 1e-6 * rng.standard_normal((n, cols))


def test_pod_orthonormality(rng):
    x = snapshot_matrix(rng)
    pod = basis.compute_pod(x, 6)
    gram = pod.modes.T @ pod.modes
    assert np.abs(gram - np.eye(6)).max() < 1e-10
    assert pod.rank == 6 and pod.n == 40
    assert (np.diff(pod.singular_values) <= 1e-12).all()


def test_pod_sign_convention(rng):
    x = snapshot_matrix(rng)
    pod = basis.compute_pod(x, 6)
    peaks = pod.modes[np.argmax(np.abs(pod.modes), axis=0), np.arange(6)]
    assert (peaks > 0).all()
    # flipping snapshot signs must not change the basis
    pod_flipped = basis.compute_pod(-x, 6)
    assert np.allclose(pod.modes, pod_flipped.modes)


def test_pod_ls_identity(rng):
    """Projection residual energy equals the discarded spectrum tail."""
    x = snapshot_matrix(rng)
    for rank in (2, 5, 8):
        pod = basis.compute_pod(x, rank)
        resid = np.linalg.norm(x - pod.modes @ (pod.modes.T @ x), "fro") ** 2
        tail = np.sum(pod.singular_values[rank:] ** 2)
        assert abs(resid - tail) <= 1e-8 * max(tail, 1e-30)


def test_pod_validation(rng):
    x = snapshot_matrix(rng)
    with pytest.raises(ValueError):
        basis.compute_pod(x, 0)
    with pytest.raises(ValueError):
        basis.compute_pod(x, 26)
    with pytest.raises(ValueError):
        basis.compute_pod(x[:, 0], 1)


def test_select_rank_hand_case():
    sigma = [10.0, 5.0, 3.0, 1.0, 0.5]
    # omitted fractions: 0.4871, 0.2308, 0.0769, 0.0256, 0
    assert basis.select_rank(sigma, 0.1) == 3
    assert basis.select_rank(sigma, 0.03) == 4
    assert basis.select_rank(sigma, 0.5) == 1
    with pytest.raises(ValueError):
        basis.select_rank([0.0, 0.0], 0.1)
    with pytest.raises(ValueError):
        basis.select_rank(sigma, 0.0)


def test_project_reconstruct_roundtrip(rng):
    x = snapshot_matrix(rng)
    pod = basis.compute_pod(x, 8)
    y = basis.ls_project(pod, x[:, 3])
    assert y.shape == (8,)
    err = basis.ls_error(pod, x)
    recon = basis.ls_reconstruct(pod, basis.ls_project(pod, x))
    assert np.allclose(err, np.linalg.norm(x - recon, axis=0))


def test_collect_snapshots(grid16, props):
    src = fom.quarter_five_spot(grid16)
    field = geo.PermeabilityField(values=np.ones(grid16.n), seed=0)
    sched = fom.Schedule(dt_pvi=0.06, n_steps=6, pressure_every=3)
    trajs = [fom.run_fom(field, src, grid16, props, sched) for _ in range(2)]
    snaps = basis.collect_snapshots(trajs)
    assert snaps.saturations.shape == (grid16.n, 12)
    assert snaps.pressures.shape == (grid16.n, 4)
    assert snaps.nonlinearity.shape == (grid16.n, 12)
    assert snaps.n_realizations == 2
    with pytest.raises(ValueError):
        basis.collect_snapshots([])


def greedy_oracle(v):
    """Scripted greedy point selection, written independently with plain
    loops: start at the peak of mode 1, then repeatedly interpolate the
    next mode at the chosen points and take the worst-error row."""
    n, m = v.shape
    points = [max(range(n), key=lambda i: abs(v[i, 0]))]
    for j in range(1, m):
        sub = np.array([[v[p, c] for c in range(j)] for p in points])
        rhs = np.array([v[p, j] for p in points])
        coeffs = np.linalg.solve(sub, rhs)
        best_row, best_err = 0, -1.0
        for i in range(n):
            approx = sum(coeffs[c] * v[i, c] for c in range(j))
            err = abs(v[i, j] - approx)
            if err > best_err + 1e-15:
                best_row, best_err = i, err
        points.append(best_row)
    return points


def test_deim_points_match_scripted_oracle(rng):
    for _ in range(5):
        v = rng.standard_normal((6, 3))
        assert list(basis.deim_select_points(v)) == greedy_oracle(v)


def test_deim_points_basic_properties(rng):
    v = np.linalg.qr(rng.standard_normal((30, 8)))[0]
    pts = basis.deim_select_points(v)
    assert len(set(pts.tolist())) == 8
    assert pts[0] == np.argmax(np.abs(v[:, 0]))
    with pytest.raises(ValueError):
        basis.deim_select_points(np.ones((5, 2)))   # rank deficient


def test_deim_interpolation_exact_on_span(rng):
    """With one point per mode, DEIM reproduces any function in the
    span of the modes exactly, so the reduced term matches a direct
    Galerkin projection."""
    n, m, r = 40, 7, 5
    v = np.linalg.qr(rng.standard_normal((n, m)))[0]
    u = np.linalg.qr(rng.standard_normal((n, r)))[0]
    b = rng.standard_normal((n, n))
    pts = basis.deim_select_points(v)
    op = basis.build_deim_operator(u, b, v, pts)
    for _ in range(20):
        f = v @ rng.standard_normal(m)
        direct = u.T @ (b @ f)
        interpolated = op.matrix @ f[pts]
        assert np.abs(interpolated - direct).max() < 1e-8
    assert op.sampled_modes.shape == (m, r)
    assert np.array_equal(op.sampled_modes, u[pts, :])


def test_deim_operator_validation(rng):
    v = np.linalg.qr(rng.standard_normal((20, 4)))[0]
    u = np.linalg.qr(rng.standard_normal((20, 3)))[0]
    with pytest.raises(ValueError):
        basis.build_deim_operator(u, np.eye(20), v, np.array([0, 1]))
