"""Greedy sparse recovery: Matching Pursuit and Orthogonal Matching Pursuit."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionError, InvalidSizeError


@dataclass
class SparseSolution:
    """Output of a greedy solve.

    Attributes
    ----------
    coefficients : ndarray
        Length-N vector, zero outside ``support``.
    support : list of int
        Atoms in the order they were chosen.
    approximation : ndarray
        ``A @ coefficients`` (length M).
    residual : ndarray
        ``y - approximation``.
    iterations : int
    residual_norms : list of float
        ``||r_i||_2`` for i = 0..iterations.
    rank_deficient : bool
        Set when a least-squares refit hit a rank-deficient atom matrix and
        the minimum-norm solution was used.
    """

    coefficients: np.ndarray
    support: list
    approximation: np.ndarray
    residual: np.ndarray
    iterations: int
    residual_norms: list = field(default_factory=list)
    rank_deficient: bool = False


class _Dictionary:
    """Uniform view of a dense matrix or a linear operator."""

    def __init__(self, A):
        if not hasattr(A, "adjoint"):
            mat = np.asarray(A)
            norms = np.linalg.norm(mat, axis=0)
            if np.any(norms == 0):
                raise ValueError("dictionary has zero columns")
            self.shape = mat.shape
            self.dtype = mat.dtype
            self.correlate = lambda r: mat.conj().T @ r
            self.atom = lambda j: mat[:, j]
            self.active = None
            self.norms = norms
        else:
            self.shape = A.shape
            self.dtype = np.dtype(A.dtype)
            self.correlate = A.adjoint
            self.atom = A.column
            norms = getattr(A, "column_norms", None)
            if getattr(A, "columns_normalized", False):
                norms = np.where(np.isfinite(A.scales), 1.0, 0.0)
            self.norms = norms
            # zero columns (possible for sparse pixel masks) are never selected
            self.active = None if norms is None else norms > 0


def _check(y, A, k):
    d = _Dictionary(A)
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != d.shape[0]:
        raise DimensionError(f"measurements of length {y.shape} do not match {d.shape[0]} rows")
    if k is not None and (k < 0 or k > d.shape[0]):
        raise InvalidSizeError(f"max_atoms must satisfy 0 <= K <= M = {d.shape[0]}, got {k}")
    return y, d


def least_squares(theta, y) -> np.ndarray:
    """Minimizer of ``||y - theta x||_2``; minimum-norm when rank deficient."""
    theta = np.asarray(theta)
    y = np.asarray(y)
    if theta.ndim == 1:
        theta = theta[:, None]
    if theta.shape[0] != y.shape[0]:
        raise DimensionError(f"{theta.shape} system with {y.shape} right-hand side")
    if theta.shape[1] == 0:
        return np.zeros(0, dtype=np.result_type(theta, y))
    x, *_ = np.linalg.lstsq(theta, y, rcond=None)
    return x


def omp(y, A, max_atoms: int | None = None, residual_tol: float = 1e-6) -> SparseSolution:
    """Orthogonal Matching Pursuit.

    Each iteration picks the atom with the largest ``|<r, A_j>|`` among the
    atoms not yet chosen (lowest index on ties), appends it to the atom
    matrix and refits all coefficients by least squares against ``y``. The
    refit is kept as an incrementally updated QR factorization (modified
    Gram-Schmidt, reorthogonalized after heavy cancellation).

    Parameters
    ----------
    y : ndarray
        Measurements, length M.
    A : ndarray or SensingOperator
        M x N dictionary, dense or as an operator with ``adjoint`` and
        ``column``.
    max_atoms : int, optional
        Sparsity K; defaults to M.
    residual_tol : float
        Stop once ``||r||_2 <= residual_tol * ||y||_2``.
    """
    y, d = _check(y, A, max_atoms)
    m, n = d.shape
    k_max = m if max_atoms is None else max_atoms
    dtype = np.result_type(d.dtype, y.dtype, np.float64)
    y = y.astype(dtype, copy=False)
    y_norm = np.linalg.norm(y)
    stop_norm = residual_tol * y_norm

    q = np.zeros((m, min(k_max, n)), dtype=dtype)
    r_mat = np.zeros((min(k_max, n), min(k_max, n)), dtype=dtype)
    qty = np.zeros(min(k_max, n), dtype=dtype)
    support: list[int] = []
    chosen = np.zeros(n, dtype=bool)
    atoms = []
    residual = y.copy()
    approx = np.zeros(m, dtype=dtype)
    norms = [float(y_norm)]
    rank_deficient = False

    while len(support) < k_max and norms[-1] > stop_norm and len(support) < n:
        corr = np.abs(d.correlate(residual))
        corr[chosen] = -1.0
        if d.active is not None:
            corr[~d.active] = -1.0
        j = int(np.argmax(corr))
        if corr[j] < 0:
            break
        atom = np.asarray(d.atom(j), dtype=dtype)
        k = len(support)
        support.append(j)
        chosen[j] = True
        atoms.append(atom)

        if not rank_deficient:
            w = atom.copy()
            atom_norm = np.linalg.norm(atom)
            coeffs = np.zeros(k, dtype=dtype)
            w_norm = atom_norm
            for _ in range(2):
                h = q[:, :k].conj().T @ w
                w -= q[:, :k] @ h
                coeffs += h
                prev, w_norm = w_norm, np.linalg.norm(w)
                # second pass only after heavy cancellation
                if w_norm > prev / np.sqrt(2):
                    break
            if w_norm <= 1e-10 * atom_norm:
                rank_deficient = True
            else:
                q[:, k] = w / w_norm
                r_mat[:k, k] = coeffs
                r_mat[k, k] = w_norm
                qty[k] = q[:, k].conj() @ y

        if rank_deficient:
            theta = np.column_stack(atoms)
            x_sup = least_squares(theta, y)
            approx = theta @ x_sup
        else:
            approx = approx + q[:, k] * qty[k]
        residual = y - approx
        norms.append(float(np.linalg.norm(residual)))

    coef = np.zeros(n, dtype=dtype)
    if support:
        if not rank_deficient:
            kk = len(support)
            x_sup = solve_triangular(r_mat[:kk, :kk], qty[:kk], check_finite=False)
        coef[support] = x_sup
    return SparseSolution(coef, support, approx, residual, len(support), norms, rank_deficient)


def matching_pursuit(y, A, iters: int | None = None, tol: float = 1e-6) -> SparseSolution:
    """Plain Matching Pursuit.

    Picks the atom best aligned with the residual, ``|<r, A_j>| / ||A_j||``,
    and subtracts only that atom's projection; coefficients accumulate
    ``<r, A_j> / ||A_j||^2``. Atoms may be picked repeatedly, so ``support``
    lists distinct atoms and can be shorter than ``iterations``.
    """
    y, d = _check(y, A, None)
    m, n = d.shape
    iters = m if iters is None else iters
    if iters < 0:
        raise InvalidSizeError(f"iters must be >= 0, got {iters}")
    dtype = np.result_type(d.dtype, y.dtype, np.float64)
    residual = y.astype(dtype, copy=True)
    coef = np.zeros(n, dtype=dtype)
    stop_norm = tol * np.linalg.norm(y)
    norms = [float(np.linalg.norm(residual))]
    sq = np.asarray(d.norms, dtype=float) ** 2 if d.norms is not None else None
    support: list[int] = []
    done = 0
    while done < iters and norms[-1] > stop_norm:
        corr = d.correlate(residual)
        if sq is None:
            score = np.abs(corr)
        else:
            score = np.where(sq > 0, np.abs(corr) / np.sqrt(np.where(sq > 0, sq, 1.0)), -1.0)
        j = int(np.argmax(score))
        if score[j] <= 0:
            break
        atom = np.asarray(d.atom(j), dtype=dtype)
        step = corr[j] / (sq[j] if sq is not None else np.vdot(atom, atom).real)
        coef[j] += step
        residual = residual - step * atom
        if j not in support:
            support.append(j)
        done += 1
        norms.append(float(np.linalg.norm(residual)))
    approx = y - residual
    return SparseSolution(coef, support, approx, residual, done, norms)
