import numpy as np
import pytest
from dataclasses import replace

from resrom import drrnn


class TanhOracle:
    """Synthetic implicit-step residual r(y', y) = y' - y + tanh(y' A^T) + b.

    Nonlinear in the next state so both adjoint paths carry real signal.
    """

    def __init__(self, a, b):
        self.a, self.b = a, b

    def residual(self, y_next, y_cur):
        return y_next - y_cur + np.tanh(y_next @ self.a.T) + self.b

    def vjp_next(self, y_next, lam):
        t = np.tanh(y_next @ self.a.T)
        return lam + ((1.0 - t * t) * lam) @ self.a

    def vjp_cur(self, y_next, lam):
        return -lam


def make_training_set(rng, n_seq=3, n_steps=5, rank=4, n_windows=2):
    oracles = [TanhOracle(0.3 * rng.standard_normal((rank, rank)),
                          0.1 * rng.standard_normal(rank))
               for _ in range(n_windows)]
    window = np.repeat(np.arange(n_windows),
                       -(-n_steps // n_windows))[:n_steps]
    return drrnn.TrainingSet(
        y0=rng.standard_normal((n_seq, rank)),
        targets=0.5 * rng.standard_normal((n_seq, n_steps, rank)),
        oracles=oracles, window_of_step=window)


def test_oracle_vjps_match_fd(rng):
    """The test oracle itself must be consistent before it can vet BPTT."""
    oracle = TanhOracle(0.3 * rng.standard_normal((4, 4)),
                        0.1 * rng.standard_normal(4))
    y, lam = rng.standard_normal(4), rng.standard_normal(4)
    h = 1e-6
    fd = np.empty(4)
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd[i] = (lam @ (oracle.residual(y + e, y) - oracle.residual(y - e, y))
                 / (2 * h))
    assert np.abs(oracle.vjp_next(y, lam) - fd).max() < 1e-8


def test_init_params_ranges_and_determinism():
    p = drrnn.init_params(6, n_layers=4, seed=9)
    q = drrnn.init_params(6, n_layers=4, seed=9)
    assert np.array_equal(p.U, q.U)
    assert ((p.U >= 0.01) & (p.U <= 0.02)).all()
    assert ((p.w >= 0.1) & (p.w <= 0.5)).all()
    assert ((p.eta >= 0.1) & (p.eta <= 0.4)).all()
    assert p.n_layers == 4 and p.rank == 6
    assert not np.array_equal(p.U, drrnn.init_params(6, seed=10).U)
    with pytest.raises(ValueError):
        drrnn.init_params(3, n_layers=0)


def test_step_preserves_fixed_point(rng):
    """Zero residual everywhere means every layer is a no-op."""

    class ZeroOracle:
        def residual(self, y_next, y_cur):
            return np.zeros_like(y_next)

    params = drrnn.init_params(4, seed=1)
    y = rng.standard_normal((2, 4))
    assert np.array_equal(drrnn.drrnn_step(params, y, ZeroOracle()), y)


def test_step_batch_matches_loop(rng):
    params = drrnn.init_params(4, seed=2)
    oracle = TanhOracle(0.3 * rng.standard_normal((4, 4)),
                        0.1 * rng.standard_normal(4))
    batch = rng.standard_normal((5, 4))
    stepped = drrnn.drrnn_step(params, batch, oracle)
    for i in range(5):
        single = drrnn.drrnn_step(params, batch[i], oracle)
        assert np.allclose(stepped[i], single, atol=1e-14)


def test_bptt_loss_matches_rollout(rng):
    params = drrnn.init_params(4, n_layers=3, seed=3)
    ts = make_training_set(rng)
    loss, _ = drrnn.bptt_gradients(params, ts)
    assert loss == pytest.approx(drrnn.rollout_loss(params, ts), rel=1e-12)


def flat_grads(grads):
    return np.concatenate([grads["U"].ravel(), grads["w"], grads["eta"]])


def fd_gradient(params, ts, h=1e-6):
    out = []
    for name in ("U", "w", "eta"):
        base = getattr(params, name)
        g = np.zeros_like(base).ravel()
        flat = base.ravel()
        for i in range(flat.size):
            bump = flat.copy()
            bump[i] = flat[i] + h
            plus = drrnn.rollout_loss(
                replace(params, **{name: bump.reshape(base.shape)}), ts)
            bump[i] = flat[i] - h
            minus = drrnn.rollout_loss(
                replace(params, **{name: bump.reshape(base.shape)}), ts)
            g[i] = (plus - minus) / (2 * h)
        out.append(g)
    return np.concatenate(out)


def test_bptt_matches_finite_differences(rng):
    params = drrnn.init_params(4, n_layers=3, seed=4)
    ts = make_training_set(rng)
    _, grads = drrnn.bptt_gradients(params, ts)
    analytic = flat_grads(grads)
    numeric = fd_gradient(params, ts)
    denom = np.maximum(np.abs(numeric), 1e-8)
    assert (np.abs(analytic - numeric) / denom).max() < 1e-5


def test_adjoint_cap_exact_when_slack(rng):
    """A cap far above any adjoint magnitude must not change anything."""
    params = drrnn.init_params(4, n_layers=3, seed=5)
    ts = make_training_set(rng)
    loss_a, grads_a = drrnn.bptt_gradients(params, ts)
    loss_b, grads_b = drrnn.bptt_gradients(params, ts, adjoint_cap=1e12)
    assert loss_a == loss_b
    for name in ("U", "w", "eta"):
        assert np.array_equal(grads_a[name], grads_b[name])


def test_adjoint_cap_bounds_gradients(rng):
    params = drrnn.init_params(4, n_layers=3, seed=5)
    ts = make_training_set(rng)
    _, grads = drrnn.bptt_gradients(params, ts, adjoint_cap=1e-3)
    assert all(np.isfinite(g).all() for g in grads.values())
    with pytest.raises(ValueError):
        drrnn.bptt_gradients(params, ts, adjoint_cap=0.0)


def test_training_set_validation(rng):
    ts = make_training_set(rng)
    with pytest.raises(ValueError):
        drrnn.TrainingSet(y0=ts.y0[:1], targets=ts.targets,
                          oracles=ts.oracles, window_of_step=ts.window_of_step)
    with pytest.raises(ValueError):
        drrnn.TrainingSet(y0=ts.y0, targets=ts.targets,
                          oracles=ts.oracles[:1],
                          window_of_step=ts.window_of_step)


def test_train_reduces_loss(rng):
    params = drrnn.init_params(4, n_layers=3, seed=6)
    ts = make_training_set(rng)
    start = drrnn.rollout_loss(params, ts)
    result = drrnn.train(params, ts, drrnn.TrainOptions(max_epochs=300))
    assert result.best_loss < 0.5 * start
    assert result.best_loss == pytest.approx(
        drrnn.rollout_loss(result.params, ts), rel=1e-12)
    assert result.history[0] == pytest.approx(start, rel=1e-12)
    assert result.best_loss <= result.history.min() + 1e-15


def test_train_early_stopping(rng):
    params = drrnn.init_params(4, n_layers=3, seed=7)
    ts = make_training_set(rng)
    result = drrnn.train(params, ts,
                         drrnn.TrainOptions(max_epochs=5000, patience=5,
                                            lr=0.0))
    # zero learning rate never improves, so patience cuts it off
    assert result.stopped_early
    assert len(result.history) == 6
    assert result.best_epoch == 0


def test_train_failure_on_nonfinite_loss(rng):
    params = drrnn.init_params(4, n_layers=3, seed=8)
    ts = make_training_set(rng)
    bad = drrnn.TrainingSet(y0=ts.y0,
                            targets=np.full_like(ts.targets, np.nan),
                            oracles=ts.oracles,
                            window_of_step=ts.window_of_step)
    with pytest.raises(drrnn.TrainingFailure) as info:
        drrnn.train(params, bad)
    assert info.value.epoch == 0
