"""Gromov-Wasserstein discrepancies between point sets, exact and sliced.

The exact objective compares a coupling's transported pairwise-distance
structure:

    cost(coupling) = sum_{i,j,k,l} (Dc[i,k] - Dx[j,l])^2 coupling[i,j] coupling[k,l]

with Euclidean distance matrices Dc, Dx and uniform marginals 1/n.  It is
invariant to translating, rotating, or permuting either point set.  The
brute-force solver restricts couplings to permutations and is the oracle the
sliced estimator is validated against.

The sliced estimator projects both sets onto shared random directions and
averages a closed-form 1D cost.  On the line, with uniform weights, the
optimal coupling is one of two monotone matchings (sorted-to-sorted, or
sorted-to-reverse-sorted), and each matching's cost collapses to twice the
population variance of the matched sums/differences:

    cost_ascending  = 2 * var(sort(a) - sort(b))
    cost_descending = 2 * var(sort(a) + reverse(sort(b)))

Analysis functions compute in float64.  ``sliced_gw_t`` rebuilds the same
estimator from recorded tensor ops so it can serve as a training loss; the
sort permutations and the per-direction matching choice are held constant
during backward.
"""

from __future__ import annotations

from itertools import permutations

import numpy as np

from . import tensor as T
from .rng import Rng

_MARGINAL_TOL = 1e-6


def pairwise_dist(points: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix of an (n, d) point set, exact zero diagonal."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("expected (n, d) points, got shape %s" % (p.shape,))
    sq = np.sum(p * p, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (p @ p.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def _check_coupling(coupling: np.ndarray, n: int) -> None:
    if coupling.shape != (n, n):
        raise ValueError("coupling must be (%d, %d), got %s" % (n, n, coupling.shape))
    if np.min(coupling) < -_MARGINAL_TOL:
        raise ValueError("coupling has negative mass")
    target = 1.0 / n
    rows = coupling.sum(axis=1)
    cols = coupling.sum(axis=0)
    if np.max(np.abs(rows - target)) > _MARGINAL_TOL or np.max(np.abs(cols - target)) > _MARGINAL_TOL:
        raise ValueError("coupling marginals are not uniform 1/n within %g" % _MARGINAL_TOL)


def gw_objective(dist_c: np.ndarray, dist_x: np.ndarray, coupling: np.ndarray) -> float:
    """Quadratic transport cost of a coupling between two same-size metric spaces.

    Validates that the coupling is nonnegative with uniform marginals.  The
    quartic sum is evaluated by expanding the square, which needs only matrix
    products.
    """
    dc = np.asarray(dist_c, dtype=np.float64)
    dx = np.asarray(dist_x, dtype=np.float64)
    g = np.asarray(coupling, dtype=np.float64)
    n = dc.shape[0]
    if dc.shape != (n, n) or dx.shape != (n, n):
        raise ValueError("distance matrices must be square and same size")
    _check_coupling(g, n)
    a = g.sum(axis=1)
    b = g.sum(axis=0)
    const = a @ (dc * dc) @ a + b @ (dx * dx) @ b
    cross = np.sum(dc * (g @ dx @ g.T))
    return float(const - 2.0 * cross)


def gw_bruteforce(c_points: np.ndarray, x_points: np.ndarray) -> tuple[float, tuple[int, ...]]:
    """Exact minimum over permutation couplings; only viable for n <= 6.

    Returns (cost, assignment) where assignment[i] is the x-point matched to
    c-point i.
    """
    c = np.asarray(c_points, dtype=np.float64)
    x = np.asarray(x_points, dtype=np.float64)
    if c.shape[0] != x.shape[0]:
        raise ValueError("point sets must have equal size, got %d and %d"
                         % (c.shape[0], x.shape[0]))
    n = c.shape[0]
    if n > 6:
        raise ValueError("brute force is capped at n=6, got n=%d" % n)
    dc = pairwise_dist(c)
    dx = pairwise_dist(x)
    best = np.inf
    best_perm: tuple[int, ...] = tuple(range(n))
    scale = 1.0 / (n * n)
    for perm in permutations(range(n)):
        p = list(perm)
        diff = dc - dx[np.ix_(p, p)]
        cost = scale * float(np.sum(diff * diff))
        if cost < best:
            best = cost
            best_perm = perm
    return best, best_perm


def sample_directions(rng: Rng, count: int, dim: int) -> np.ndarray:
    """(count, dim) unit vectors, Gaussian-normalized."""
    dirs = rng.normals(count * dim).reshape(count, dim)
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    # A zero draw has probability zero; nudge defensively rather than loop.
    norms[norms == 0.0] = 1.0
    return dirs / norms


def project(points: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Scalar projections, shape (n_points, n_directions)."""
    p = np.asarray(points, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    if p.shape[1] != d.shape[1]:
        raise ValueError("points dim %d does not match directions dim %d"
                         % (p.shape[1], d.shape[1]))
    return p @ d.T


def gw_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Closed-form cost on the line: best of the two monotone matchings."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("gw_1d needs two equal-length 1D arrays")
    asc = 2.0 * float(np.var(a - b))
    desc = 2.0 * float(np.var(a + b[::-1]))
    return min(asc, desc)


def sliced_gw(c_points: np.ndarray, x_points: np.ndarray, directions: np.ndarray) -> float:
    """Mean 1D cost over shared projection directions."""
    pc = project(c_points, directions)
    px = project(x_points, directions)
    total = 0.0
    for j in range(directions.shape[0]):
        total += gw_1d(pc[:, j], px[:, j])
    return total / directions.shape[0]


def sliced_wasserstein(a_points: np.ndarray, b_points: np.ndarray,
                       directions: np.ndarray) -> float:
    """Squared 2-Wasserstein between projected sets, averaged over directions.

    On the line with uniform weights this is the mean squared gap between
    sorted projections.
    """
    pa = np.sort(project(a_points, directions), axis=0)
    pb = np.sort(project(b_points, directions), axis=0)
    diff = pa - pb
    return float(np.mean(np.mean(diff * diff, axis=0)))


# ---------------------------------------------------------------------------
# Differentiable estimator.


def _column_variance(m: T.Tensor, n_rows: int) -> T.Tensor:
    """Population variance of each column of an (n, L) tensor, shape (1, L)."""
    ones = T.constant(np.full((1, n_rows), 1.0 / n_rows, dtype=m.data.dtype))
    mean_sq = T.matmul(ones, T.mul(m, m))
    mean_ = T.matmul(ones, m)
    return T.sub(mean_sq, T.mul(mean_, mean_))


def sliced_gw_t(c: T.Tensor, x: T.Tensor, directions: np.ndarray) -> T.Tensor:
    """Sliced cost as a scalar tensor on the tape, for use as a loss term.

    Matches ``sliced_gw`` up to dtype.  Sorting and the per-direction choice
    between the two monotone matchings are decided from forward values and
    treated as constants by backward, so the gradient is that of the active
    closed-form branch.
    """
    if c.ndim != 2 or x.ndim != 2 or c.shape != x.shape:
        raise T.ShapeError(
            "sliced_gw_t needs matching (n, d) tensors, got %s and %s"
            % (c.shape, x.shape))
    n = c.shape[0]
    dirs = T.constant(np.ascontiguousarray(directions.T).astype(c.data.dtype))
    pc = T.matmul(c, dirs)
    px = T.matmul(x, dirs)
    # Stable sort: ties broken by original row index.
    perm_c = np.argsort(pc.data, axis=0, kind="stable")
    perm_x = np.argsort(px.data, axis=0, kind="stable")
    sc = T.col_permute(pc, perm_c)
    sx = T.col_permute(px, perm_x)
    sx_rev = T.col_permute(px, perm_x[::-1])
    var_asc = _column_variance(T.sub(sc, sx), n)
    var_desc = _column_variance(T.add(sc, sx_rev), n)
    take_desc = var_desc.data < var_asc.data
    mask_asc = T.constant((~take_desc).astype(c.data.dtype))
    mask_desc = T.constant(take_desc.astype(c.data.dtype))
    per_direction = T.add(T.mul(var_asc, mask_asc), T.mul(var_desc, mask_desc))
    return T.scalar_mul(T.mean(per_direction), 2.0)
