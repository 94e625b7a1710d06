"""Deep residual recurrent network over an implicit-step residual.

One time update stacks K layers that each push the state against the
residual of the implicit time-stepping equation.  Layer 1 takes a learned
step through a tanh gate,

    y(1) = y(0) - w * tanh(U r(y(0))),

and layers 2..K take normalized residual steps whose scale adapts to an
exponential moving average of the squared residual norm,

    G_k = gamma |r(y(k-1))|^2 + zeta G_{k-1},      G_1 = gamma |r(y(0))|^2
    y(k) = y(k-1) - eta_k / sqrt(G_k + eps) * r(y(k-1)).

The residual comes from an *oracle*: any object with

    residual(y_next, y_cur)        the implicit-step residual
    vjp_next(y_next, lam)          transpose-Jacobian product in y_next
    vjp_cur(y_next, lam)           transpose-Jacobian product in y_cur

all broadcasting over leading batch axes (see `resrom.rom` for the
reduced transport operators that implement it).  Training unrolls the
network over a whole trajectory, free running from the initial state, and
backpropagates through every layer, the G recursion, and the oracle
itself; gradients are exact up to roundoff, which the finite-difference
tests pin down.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class TrainingFailure(RuntimeError):
    """Loss left finite range during training."""

    def __init__(self, epoch, history):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch
        self.history = history


@dataclass(frozen=True)
class DrRnnParams:
    """Trainable tensors plus the fixed smoothing constants."""

    U: np.ndarray = field(repr=False)    # (r, r)
    w: np.ndarray = field(repr=False)    # (r,)
    eta: np.ndarray = field(repr=False)  # (K - 1,)
    gamma: float = 0.1
    zeta: float = 0.9
    eps: float = 1e-8

    @property
    def n_layers(self):
        return self.eta.size + 1

    @property
    def rank(self):
        return self.w.size


def init_params(rank, n_layers=6, seed=0, gamma=0.1, zeta=0.9, eps=1e-8):
    """Random initialization in narrow positive ranges.

    Small U keeps the first tanh gate near linear at the start; positive
    eta makes layers 2..K descend the residual from epoch one.
    """
    if n_layers < 1:
        raise ValueError("need at least one layer")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    return DrRnnParams(
        U=rng.uniform(0.01, 0.02, size=(rank, rank)),
        w=rng.uniform(0.1, 0.5, size=rank),
        eta=rng.uniform(0.1, 0.4, size=n_layers - 1),
        gamma=gamma, zeta=zeta, eps=eps)


def _sumsq(x):
    return np.sum(x * x, axis=-1)


def drrnn_step(params, y_t, oracle):
    """Advance one time step; broadcasts over leading batch axes."""
    r1 = oracle.residual(y_t, y_t)
    y = y_t - params.w * np.tanh(r1 @ params.U.T)
    g = params.gamma * _sumsq(r1)
    for k in range(params.eta.size):
        rk = oracle.residual(y, y_t)
        g = params.gamma * _sumsq(rk) + params.zeta * g
        y = y - (params.eta[k] / np.sqrt(g + params.eps))[..., None] * rk
    return y


@dataclass(frozen=True)
class TrainingSet:
    """Unrolled training problem over L sequences of T steps.

    ``oracles[w]`` is a batched residual oracle for pressure window ``w``
    (leading axis L); ``window_of_step[t]`` says which window governs
    step ``t``.  Targets are the reduced reference states at steps 1..T.
    """

    y0: np.ndarray = field(repr=False)       # (L, r)
    targets: np.ndarray = field(repr=False)  # (L, T, r)
    oracles: list
    window_of_step: np.ndarray               # (T,)

    def __post_init__(self):
        L, T, r = self.targets.shape
        if self.y0.shape != (L, r):
            raise ValueError("y0 does not match targets")
        if self.window_of_step.shape != (T,):
            raise ValueError("window map does not match targets")
        if int(self.window_of_step.max()) >= len(self.oracles):
            raise ValueError("window map points past the oracle list")

    @property
    def shape(self):
        return self.targets.shape


def rollout_loss(params, ts):
    """Mean (over sequences) of the summed squared prediction error."""
    y = ts.y0
    total = 0.0
    for t in range(ts.targets.shape[1]):
        y = drrnn_step(params, y, ts.oracles[ts.window_of_step[t]])
        diff = y - ts.targets[:, t]
        total += float(np.sum(diff * diff))
    return total / ts.targets.shape[0]


def _step_with_tape(params, y_t, oracle):
    r1 = oracle.residual(y_t, y_t)
    a1 = r1 @ params.U.T
    h1 = np.tanh(a1)
    y = y_t - params.w * h1
    g = params.gamma * _sumsq(r1)
    inner = []
    for k in range(params.eta.size):
        rk = oracle.residual(y, y_t)
        g = params.gamma * _sumsq(rk) + params.zeta * g
        c = params.eta[k] / np.sqrt(g + params.eps)
        y_prev = y
        y = y - c[..., None] * rk
        inner.append((y_prev, rk, g, c))
    return y, (y_t, r1, h1, inner)


def bptt_gradients(params, ts, adjoint_cap=None):
    """Loss and parameter gradients for one full-batch epoch.

    Reverse pass walks steps last to first; within a step it unwinds the
    normalized layers (including the moving-average recursion, whose
    sensitivity rides along in ``dg_carry``) and then the tanh layer.
    The adjoint of each residual evaluation splits between the layer
    input (``vjp_next``) and the step input (``vjp_cur``), which is how
    the gradient threads backward through time.

    With ``adjoint_cap=None`` the gradients are exact.  Over a long
    unroll the adjoint recursion can amplify without bound (the layer
    normalizers act as gains above 1 wherever residuals are small), and
    a single such epoch poisons any squared-gradient optimizer state for
    hundreds of epochs.  A finite ``adjoint_cap`` clips every carried
    adjoint entry to that magnitude, which bounds each backward chain
    while leaving short-chain contributions untouched.
    """
    if adjoint_cap is not None:
        if adjoint_cap <= 0:
            raise ValueError("adjoint_cap must be positive")

        def carry(x):
            return np.clip(x, -adjoint_cap, adjoint_cap)
    else:
        def carry(x):
            return x

    L, T, _ = ts.targets.shape
    y = ts.y0
    tapes = []
    outputs = []
    loss = 0.0
    for t in range(T):
        y, tape = _step_with_tape(params, y, ts.oracles[ts.window_of_step[t]])
        diff = y - ts.targets[:, t]
        loss += float(np.sum(diff * diff))
        tapes.append(tape)
        outputs.append(y)

    g_U = np.zeros_like(params.U)
    g_w = np.zeros_like(params.w)
    g_eta = np.zeros_like(params.eta)
    lam = np.zeros_like(ts.y0)
    for t in range(T - 1, -1, -1):
        lam = lam + 2.0 * (outputs[t] - ts.targets[:, t])
        oracle = ts.oracles[ts.window_of_step[t]]
        y_in, r1, h1, inner = tapes[t]
        lam_in = np.zeros_like(lam)
        dg_carry = np.zeros(L)
        for k in range(params.eta.size - 1, -1, -1):
            y_prev, rk, g, c = inner[k]
            dc = -np.sum(lam * rk, axis=-1)
            g_eta[k] += float(np.sum(dc / np.sqrt(g + params.eps)))
            dg = -0.5 * dc * c / (g + params.eps) + dg_carry
            lam_rk = -c[..., None] * lam + 2.0 * params.gamma * dg[..., None] * rk
            lam_in = carry(lam_in + oracle.vjp_cur(y_prev, lam_rk))
            lam = carry(lam + oracle.vjp_next(y_prev, lam_rk))
            dg_carry = carry(params.zeta * dg)
        g_w += -np.sum(lam * h1, axis=0)
        da1 = -(lam * params.w) * (1.0 - h1 * h1)
        g_U += da1.T @ r1
        lam_r1 = da1 @ params.U \
            + 2.0 * params.gamma * dg_carry[..., None] * r1
        lam_in = lam_in + oracle.vjp_cur(y_in, lam_r1)
        lam = carry(lam + oracle.vjp_next(y_in, lam_r1) + lam_in)

    scale = 1.0 / L
    grads = {"U": g_U * scale, "w": g_w * scale, "eta": g_eta * scale}
    return loss * scale, grads


@dataclass(frozen=True)
class TrainOptions:
    lr: float = 1e-3
    decay: float = 0.9
    max_epochs: int = 5000
    patience: int = 200
    min_rel_improvement: float = 1e-6
    opt_eps: float = 1e-8
    # long-unroll safeguards; None disables either one
    adjoint_cap: float = 1e3
    grad_clip: float = 10.0


@dataclass(frozen=True)
class TrainResult:
    params: DrRnnParams
    history: np.ndarray  # loss per epoch, before that epoch's update
    best_epoch: int
    best_loss: float
    stopped_early: bool


def train(params, ts, opts=TrainOptions()):
    """Full-batch rmsprop on (U, w, eta).

    Each gradient's squared magnitude feeds a per-entry moving average
    that rescales the update.  Gradients pass through two safeguards
    first: the adjoint cap inside the backward pass and a global-norm
    clip here, so one exploding unroll cannot poison the moving averages
    (an unclipped spike suppresses every later update until the average
    decays back down, which takes hundreds of epochs at decay 0.9).
    Training stops when the best loss has not improved by
    ``min_rel_improvement`` (relatively) for ``patience`` epochs, and
    always hands back the best parameters seen, so the returned loss
    never exceeds the starting one.
    """
    sq = {"U": np.zeros_like(params.U),
          "w": np.zeros_like(params.w),
          "eta": np.zeros_like(params.eta)}
    history = []
    best_loss = np.inf
    best_params = params
    best_epoch = 0
    stall = 0
    stopped_early = False
    for epoch in range(opts.max_epochs):
        loss, grads = bptt_gradients(params, ts, adjoint_cap=opts.adjoint_cap)
        if not np.isfinite(loss):
            raise TrainingFailure(epoch, np.array(history))
        if opts.grad_clip is not None:
            gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if gnorm > opts.grad_clip:
                factor = opts.grad_clip / gnorm
                grads = {name: g * factor for name, g in grads.items()}
        history.append(loss)
        if loss < best_loss * (1.0 - opts.min_rel_improvement):
            best_loss, best_params, best_epoch = loss, params, epoch
            stall = 0
        else:
            stall += 1
            if stall >= opts.patience:
                stopped_early = True
                break
        new = {}
        for name in ("U", "w", "eta"):
            g = grads[name]
            sq[name] = opts.decay * sq[name] + (1.0 - opts.decay) * g * g
            old = getattr(params, name)
            new[name] = old - opts.lr * g / (np.sqrt(sq[name]) + opts.opt_eps)
        params = replace(params, **new)
    return TrainResult(params=best_params, history=np.array(history),
                       best_epoch=best_epoch,
                       best_loss=float(best_loss) if history else np.inf,
                       stopped_early=stopped_early)
