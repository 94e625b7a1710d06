"""Structured grid, log-normal permeability fields, and snapshot clustering.

The domain is the unit square split into nx-by-ny uniform cells.  Cells are
numbered row by row with x running fastest: cell ``i`` sits at
``ix = i % nx``, ``iy = i // nx``.  Every vector quantity in the package
(permeability, pressure, saturation) uses this ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist


class FactorizationError(RuntimeError):
    """Covariance factorization failed or lost too much accuracy."""


@dataclass(frozen=True)
class StructuredGrid:
    nx: int
    ny: int
    porosity: float
    dx: float
    dy: float
    centers: np.ndarray = field(repr=False)  # (n, 2) cell centers

    @property
    def n(self):
        return self.nx * self.ny

    @property
    def cell_volume(self):
        return self.dx * self.dy

    @property
    def pore_volume(self):
        return self.porosity * self.nx * self.ny * self.cell_volume

    def cell_index(self, ix, iy):
        return iy * self.nx + ix

    def cell_at(self, x, y):
        """Index of the cell whose footprint contains the point (x, y)."""
        ix = min(int(x / self.dx), self.nx - 1)
        iy = min(int(y / self.dy), self.ny - 1)
        return self.cell_index(ix, iy)


def build_grid(nx, ny, porosity=0.2):
    """Uniform grid over the unit square.

    Parameters
    ----------
    nx, ny : int
        Cell counts along x and y.
    porosity : float
        Uniform porosity, in (0, 1].
    """
    if nx < 1 or ny < 1:
        raise ValueError("grid needs at least one cell per direction")
    if not 0.0 < porosity <= 1.0:
        raise ValueError(f"porosity {porosity} outside (0, 1]")
    dx, dy = 1.0 / nx, 1.0 / ny
    xs = (np.arange(nx) + 0.5) * dx
    ys = (np.arange(ny) + 0.5) * dy
    gx, gy = np.meshgrid(xs, ys)  # row-major, x fastest
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    return StructuredGrid(nx=nx, ny=ny, porosity=porosity, dx=dx, dy=dy,
                          centers=centers)


def covariance_matrix(grid, sigma, corr_len):
    """Exponential covariance of log-permeability between cell centers."""
    dist = cdist(grid.centers, grid.centers)
    return sigma * np.exp(-dist / corr_len)


@dataclass(frozen=True)
class GaussianFieldSampler:
    """Holds a Cholesky factor of the log-permeability covariance.

    Factorization happens once in `build_sampler`; drawing a field is then
    a single matrix-vector product, cheap enough for thousands of draws.
    """

    grid: StructuredGrid
    sigma: float
    corr_len: float
    seed: int
    factor: np.ndarray = field(repr=False)  # (n, n) lower triangular
    jitter: float = 0.0


@dataclass(frozen=True)
class PermeabilityField:
    values: np.ndarray  # (n,) strictly positive
    seed: int


def build_sampler(grid, sigma=1.0, corr_len=0.1, seed=0):
    """Factorize the covariance for later sampling.

    The exponential kernel is positive definite for distinct points, but
    at large n the smallest eigenvalues sit near roundoff, so a small
    diagonal jitter is escalated until the factorization succeeds.  The
    factor must still reproduce the covariance to 1e-8 in relative
    Frobenius norm; if even the largest admissible jitter cannot deliver
    that, sampling from the factor would be quietly wrong and we raise
    instead.
    """
    if sigma <= 0 or corr_len <= 0:
        raise ValueError("sigma and corr_len must be positive")
    cov = covariance_matrix(grid, sigma, corr_len)
    factor = None
    jitter_used = 0.0
    for scale in (0.0, 1e-10, 1e-9, 1e-8):
        jitter_used = scale * sigma
        try:
            factor = np.linalg.cholesky(cov + jitter_used * np.eye(grid.n))
            break
        except np.linalg.LinAlgError:
            continue
    if factor is None:
        raise FactorizationError(
            f"covariance not factorizable up to jitter {1e-8 * sigma:g}"
        )
    rel = np.linalg.norm(factor @ factor.T - cov) / np.linalg.norm(cov)
    if rel > 1e-8:
        raise FactorizationError(
            f"factor reproduces covariance to {rel:.2e} relative Frobenius, "
            "worse than the 1e-8 budget"
        )
    return GaussianFieldSampler(grid=grid, sigma=sigma, corr_len=corr_len,
                                seed=seed, factor=factor, jitter=jitter_used)


def sample_field(sampler, realization_seed):
    """Draw one log-normal permeability field.

    The stream is keyed on (sampler seed, realization seed) with a
    counter-based generator, so realization ``i`` is the same array no
    matter how many workers the ensemble was split across.
    """
    bits = np.random.Philox(key=np.array(
        [sampler.seed, realization_seed], dtype=np.uint64))
    z = np.random.Generator(bits).standard_normal(sampler.grid.n)
    return PermeabilityField(values=np.exp(sampler.factor @ z),
                             seed=int(realization_seed))


def _kmeans_pp_init(features, n_clusters, rng):
    n = features.shape[0]
    centers = np.empty((n_clusters, features.shape[1]))
    centers[0] = features[rng.integers(n)]
    d2 = np.sum((features - centers[0]) ** 2, axis=1)
    for j in range(1, n_clusters):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center; reuse any point
            centers[j] = features[rng.integers(n)]
            continue
        centers[j] = features[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((features - centers[j]) ** 2, axis=1))
    return centers


def cluster_realizations(fields, n_clusters, seed=0, max_iter=100):
    """Pick representative realizations by k-means on log-permeability.

    Lloyd iterations with k-means++ seeding run on the flattened
    log-permeability vectors.  One member is drawn uniformly (seeded)
    from each non-empty cluster and the chosen indices are returned
    sorted.  Duplicate fields can leave clusters empty, in which case
    fewer than ``n_clusters`` indices come back.
    """
    if not fields:
        raise ValueError("no realizations to cluster")
    if n_clusters < 1 or n_clusters > len(fields):
        raise ValueError(
            f"n_clusters {n_clusters} outside [1, {len(fields)}]")
    features = np.stack([np.log(f.values) for f in fields])
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    centers = _kmeans_pp_init(features, n_clusters, rng)
    labels = np.full(len(fields), -1)
    for _ in range(max_iter):
        d2 = cdist(features, centers, metric="sqeuclidean")
        new_labels = np.argmin(d2, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(n_clusters):
            members = labels == j
            if members.any():  # empty clusters keep their old center
                centers[j] = features[members].mean(axis=0)
    chosen = []
    for j in range(n_clusters):
        members = np.flatnonzero(labels == j)
        if members.size:
            chosen.append(int(rng.choice(members)))
    return sorted(chosen)
