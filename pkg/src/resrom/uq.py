"""Monte-Carlo ensembles, error metrics, and density estimates.

An ensemble is a directory of per-realization saturation matrices (one
column per time step) plus a ``meta.txt`` sidecar.  Realizations are
seeded as ``base_seed + index``, so the bytes on disk are identical no
matter how many worker processes produced them, and post-processing
streams single columns through memory maps instead of loading whole
ensembles.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import matio
from .basis import NumericFailure
from .drrnn import TrainingFailure
from .fom import NewtonDivergence, SolverFailure, run_fom
from .geo import PermeabilityField, sample_field
from .rom import run_drrnn, run_rom

_RECOVERABLE = (NewtonDivergence, SolverFailure, NumericFailure,
                TrainingFailure, np.linalg.LinAlgError, FloatingPointError)


def resolve_workers(requested=None):
    """Worker count for ensemble runs.

    ``requested`` (or the machine's CPU count) is capped by the
    ROM_THREADS environment variable when that is set.
    """
    base = requested if requested else (os.cpu_count() or 1)
    cap = os.environ.get("ROM_THREADS")
    if cap is not None:
        try:
            base = min(base, int(cap))
        except ValueError as err:
            raise ValueError(f"ROM_THREADS must be an integer: {cap!r}") from err
    return max(1, base)


@dataclass(frozen=True)
class SampledFields:
    """Field source that draws realization ``i`` from seed ``base + i``."""

    sampler: object
    base_seed: int

    def get(self, index):
        return sample_field(self.sampler, self.base_seed + index)


@dataclass(frozen=True)
class FileFields:
    """Field source backed by a persisted matrix, one column per
    realization.  Cheap to ship to worker processes."""

    path: str

    def get(self, index):
        return PermeabilityField(values=matio.read_column(self.path, index),
                                 seed=index)


@dataclass(frozen=True)
class FomTask:
    """Full-order simulation of one permeability realization."""

    fields: object
    grid: object
    props: object
    src: object
    schedule: object

    def run(self, index):
        perm = self.fields.get(index)
        traj = run_fom(perm, self.src, self.grid, self.props, self.schedule)
        return traj.saturations, True


@dataclass(frozen=True)
class RomTask:
    """Reduced Newton rollout (Galerkin, or DEIM when modes are given)."""

    fields: object
    grid: object
    props: object
    src: object
    schedule: object
    sat_basis: object
    pres_basis: object
    nonlin_modes: object = None
    deim_points: object = None

    def run(self, index):
        perm = self.fields.get(index)
        rt = run_rom(perm, self.grid, self.props, self.src, self.schedule,
                     self.sat_basis, self.pres_basis,
                     nonlin_modes=self.nonlin_modes,
                     deim_points=self.deim_points)
        return rt.saturations, not rt.blew_up


@dataclass(frozen=True)
class DrrnnTask:
    """Trained-network rollout with the same operator refresh as RomTask."""

    fields: object
    grid: object
    props: object
    src: object
    schedule: object
    sat_basis: object
    pres_basis: object
    params: object
    nonlin_modes: object = None
    deim_points: object = None

    def run(self, index):
        perm = self.fields.get(index)
        rt = run_drrnn(perm, self.grid, self.props, self.src, self.schedule,
                       self.sat_basis, self.pres_basis, self.params,
                       nonlin_modes=self.nonlin_modes,
                       deim_points=self.deim_points)
        return rt.saturations, not rt.blew_up


@dataclass(frozen=True)
class EnsembleResult:
    path: Path
    model: str
    n_realizations: int
    n_cells: int
    n_steps: int
    dt_pvi: float
    base_seed: int
    failed: tuple = ()

    def realization_path(self, index):
        return self.path / f"real_{index:04d}.bin"

    def read_realization(self, index):
        return matio.read_matrix(self.realization_path(index))

    def sat_column(self, index, step):
        return matio.read_column(self.realization_path(index), step)

    @property
    def used(self):
        bad = set(self.failed)
        return tuple(i for i in range(self.n_realizations) if i not in bad)


def _write_meta(result):
    matio.write_meta(result.path / "meta.txt", {
        "model": result.model,
        "n_realizations": result.n_realizations,
        "n_cells": result.n_cells,
        "n_steps": result.n_steps,
        "dt_pvi": repr(result.dt_pvi),
        "base_seed": result.base_seed,
        "failed": ",".join(str(i) for i in result.failed),
    })


def load_ensemble(path):
    path = Path(path)
    meta = matio.read_meta(path / "meta.txt")
    failed = tuple(int(x) for x in meta["failed"].split(",") if x)
    return EnsembleResult(path=path, model=meta["model"],
                          n_realizations=int(meta["n_realizations"]),
                          n_cells=int(meta["n_cells"]),
                          n_steps=int(meta["n_steps"]),
                          dt_pvi=float(meta["dt_pvi"]),
                          base_seed=int(meta["base_seed"]),
                          failed=failed)


_WORKER_TASK = None


def _init_worker(task):
    global _WORKER_TASK
    _WORKER_TASK = task


def _run_one(task, out_dir, index, shape):
    try:
        sats, ok = task.run(index)
    except _RECOVERABLE:
        sats, ok = np.full(shape, np.nan), False
    matio.write_matrix(Path(out_dir) / f"real_{index:04d}.bin", sats)
    return index, ok


def _run_one_pooled(args):
    return _run_one(_WORKER_TASK, *args)


def run_monte_carlo(task, out_dir, model, n_realizations, n_steps,
                    base_seed=0, workers=None):
    """Run an ensemble and persist it under ``out_dir``.

    The task maps a realization index to its result, so output bytes do
    not depend on the worker count.  A realization that fails with a
    solver error is written as an all-NaN matrix and listed under
    ``failed`` in the metadata; bugs (any other exception) propagate.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shape = (task.grid.n, n_steps)
    jobs = [(str(out_dir), i, shape) for i in range(n_realizations)]
    workers = resolve_workers(workers)
    if workers == 1:
        results = [_run_one(task, *job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers,
                                 initializer=_init_worker,
                                 initargs=(task,)) as pool:
            results = list(pool.map(_run_one_pooled, jobs, chunksize=4))
    failed = sorted(index for index, ok in results if not ok)
    result = EnsembleResult(path=out_dir, model=model,
                            n_realizations=n_realizations,
                            n_cells=task.grid.n, n_steps=n_steps,
                            dt_pvi=task.schedule.dt_pvi,
                            base_seed=base_seed, failed=tuple(failed))
    _write_meta(result)
    return result


def project_ensemble(reference, out_dir, basis, model="ls-fit"):
    """Best-approximation baseline: project every reference realization
    onto the basis and reconstruct, without clamping.

    This is the accuracy floor any reduced model on the same basis is
    judged against.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    u = basis.modes
    for i in range(reference.n_realizations):
        sats = reference.read_realization(i)
        matio.write_matrix(out_dir / f"real_{i:04d}.bin", u @ (u.T @ sats))
    result = EnsembleResult(path=out_dir, model=model,
                            n_realizations=reference.n_realizations,
                            n_cells=reference.n_cells,
                            n_steps=reference.n_steps,
                            dt_pvi=reference.dt_pvi,
                            base_seed=reference.base_seed,
                            failed=reference.failed)
    _write_meta(result)
    return result


@dataclass(frozen=True)
class ErrorReport:
    """Per-(realization, step) errors of a candidate against a reference.

    ``l2``/``linf`` are absolute cellwise norms; ``l2_rel`` averages the
    relative L2 error over every used (realization, step) pair and
    ``l2_rel_max`` is the worst such pair.
    """

    l2: np.ndarray = field(repr=False)      # (n_used, n_steps)
    linf: np.ndarray = field(repr=False)    # (n_used, n_steps)
    rel: np.ndarray = field(repr=False)     # (n_used, n_steps)
    l2_rel: float
    l2_rel_max: float
    used: tuple
    excluded: tuple


def relative_error_metrics(reference, candidate):
    """Compare two ensembles realization by realization.

    Realizations failed in either ensemble are excluded from the numbers
    but reported in ``excluded``.  A zero entry anywhere in the reference
    would make the relative error meaningless, so it raises.
    """
    if (reference.n_realizations != candidate.n_realizations
            or reference.n_cells != candidate.n_cells
            or reference.n_steps != candidate.n_steps):
        raise ValueError("ensembles have incompatible shapes")
    bad = set(reference.failed) | set(candidate.failed)
    used = [i for i in range(reference.n_realizations) if i not in bad]
    if not used:
        raise ValueError("no realization survived in both ensembles")
    l2 = np.empty((len(used), reference.n_steps))
    linf = np.empty_like(l2)
    rel = np.empty_like(l2)
    for row, i in enumerate(used):
        ref = reference.read_realization(i)
        cand = candidate.read_realization(i)
        if np.any(ref == 0.0):
            raise ValueError(f"reference realization {i} has zero entries")
        diff = cand - ref
        l2[row] = np.linalg.norm(diff, axis=0)
        linf[row] = np.max(np.abs(diff), axis=0)
        rel[row] = np.linalg.norm(diff / ref, axis=0)
    return ErrorReport(l2=l2, linf=linf, rel=rel,
                       l2_rel=float(rel.mean()),
                       l2_rel_max=float(rel.max()),
                       used=tuple(used), excluded=tuple(sorted(bad)))


def time_error_metrics(reference, candidate, realization, step):
    """Absolute L2 and L-infinity error of one realization at one step."""
    ref = reference.sat_column(realization, step)
    cand = candidate.sat_column(realization, step)
    diff = cand - ref
    return float(np.linalg.norm(diff)), float(np.max(np.abs(diff)))


def ensemble_stats(ensemble, step):
    """Cellwise mean and sample standard deviation at one time step,
    streamed over the used realizations."""
    used = ensemble.used
    if len(used) < 2:
        raise ValueError("need at least two usable realizations")
    total = np.zeros(ensemble.n_cells)
    total_sq = np.zeros(ensemble.n_cells)
    for i in used:
        col = ensemble.sat_column(i, step)
        total += col
        total_sq += col * col
    n = len(used)
    mean = total / n
    var = np.maximum(total_sq - n * mean * mean, 0.0) / (n - 1)
    return mean, np.sqrt(var)


def sample_at(ensemble, cell, step):
    """Values of one cell at one step across the used realizations."""
    return np.array([ensemble.sat_column(i, step)[cell]
                     for i in ensemble.used])


def kde_pdf(samples, points, bandwidth=None):
    """Gaussian kernel density estimate.

    Scott's rule sets the bandwidth from the sample deviation, floored
    at 1e-3 so degenerate (near-constant) samples still yield a curve.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise ValueError("no samples for density estimate")
    if bandwidth is None:
        sd = samples.std(ddof=1) if samples.size > 1 else 0.0
        bandwidth = max(sd * samples.size ** (-1 / 5), 1e-3)
    points = np.asarray(points, dtype=np.float64)
    z = (points[:, None] - samples[None, :]) / bandwidth
    kernel = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return kernel.mean(axis=1) / bandwidth


def step_for_pvi(pvi, dt_pvi, n_steps):
    """Column index of the recorded step closest to a pore-volume time."""
    return int(np.clip(round(pvi / dt_pvi), 1, n_steps)) - 1
