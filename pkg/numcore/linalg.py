"""Symmetric eigendecomposition by cyclic Jacobi rotations."""

import logging
from functools import lru_cache

import numpy as np

from .errors import ConvergenceError, NotSymmetricError, ShapeError
from .models import DenseMatrix

logger = logging.getLogger(__name__)

SYMMETRY_TOLERANCE = 1e-9
CONVERGENCE_FACTOR = 1e-12
MAX_SWEEPS = 100


@lru_cache(maxsize=16)
def _round_robin(n):
    """
    Pair schedule for one sweep: n-1 rounds (n even) of n/2 disjoint pairs
    covering every (p, q) with p < q exactly once. Odd n gets a dummy index
    that is dropped.
    """
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                pairs.append((min(a, b), max(a, b)))
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1], *players[1:-1]]
    return tuple(rounds)


def _off_norm(a):
    return float(np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0)))


def sym_eig(matrix, max_sweeps=MAX_SWEEPS):
    """
    Eigen-decompose a symmetric matrix.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending and
    eigenvectors as orthonormal columns. Each eigenvector is signed so its
    largest-magnitude entry is non-negative.

    Within a sweep the rotations of each round act on disjoint index pairs, so
    they are applied together as vectorized row/column updates.
    """
    a = np.array(matrix.values if isinstance(matrix, DenseMatrix) else matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError('rank', 2, a.ndim, 'sym_eig')
    if a.shape[0] != a.shape[1]:
        raise ShapeError('cols', a.shape[0], a.shape[1], 'sym_eig')
    n = a.shape[0]
    scale = float(np.max(np.abs(a))) if n else 0.0
    if n and float(np.max(np.abs(a - a.T))) > SYMMETRY_TOLERANCE * max(scale, 1e-300):
        raise NotSymmetricError('sym_eig needs a symmetric matrix')
    a = 0.5 * (a + a.T)
    v = np.eye(n)

    threshold = CONVERGENCE_FACTOR * float(np.linalg.norm(a))
    rounds = _round_robin(n) if n > 1 else ()
    sweep = 0
    while True:
        off = _off_norm(a)
        if off <= threshold:
            break
        if sweep == max_sweeps:
            raise ConvergenceError(f'Jacobi did not converge in {max_sweeps} sweeps', off)
        for p, q in rounds:
            a_pp = a[p, p]
            a_qq = a[q, q]
            a_pq = a[p, q]
            active = a_pq != 0.0
            tau = np.divide(a_qq - a_pp, 2.0 * a_pq, out=np.zeros_like(a_pq), where=active)
            sign = np.where(tau >= 0.0, 1.0, -1.0)
            t = np.where(active, sign / (np.abs(tau) + np.hypot(1.0, tau)), 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c

            col_p = a[:, p]
            col_q = a[:, q]
            a[:, p] = col_p * c - col_q * s
            a[:, q] = col_p * s + col_q * c
            row_p = a[p, :]
            row_q = a[q, :]
            a[p, :] = c[:, None] * row_p - s[:, None] * row_q
            a[q, :] = s[:, None] * row_p + c[:, None] * row_q
            a[p, q] = 0.0
            a[q, p] = 0.0

            vec_p = v[:, p]
            vec_q = v[:, q]
            v[:, p] = vec_p * c - vec_q * s
            v[:, q] = vec_p * s + vec_q * c
        sweep += 1
    logger.debug('sym_eig n=%d converged after %d sweeps', n, sweep)

    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind='stable')
    eigenvalues = eigenvalues[order]
    v = v[:, order]
    if n:
        lead = np.argmax(np.abs(v), axis=0)
        signs = np.sign(v[lead, np.arange(n)])
        signs[signs == 0] = 1.0
        v = v * signs
    return eigenvalues, v
