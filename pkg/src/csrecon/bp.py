"""l1 recovery: Basis Pursuit and Basis Pursuit De-Noising.

Basis Pursuit, ``min ||x||_1 s.t. Ax = y``, is solved as the linear program
``min sum(u) s.t. -u <= x <= u, Ax = y`` by a primal-dual interior-point
method. BPDN, ``min ||x||_1 s.t. ||Ax - y||_2 <= sigma``, is solved by a
log-barrier method on its second-order-cone form with Newton inner steps.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, cg

from .errors import DimensionError, InfeasibleError, InvalidSizeError
from .transforms import RealEmbedding, min_norm_solution

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BpSettings:
    """Solver settings.

    ``duality_gap_tol`` is relative: the solver stops once the gap is below
    ``duality_gap_tol * max(1, ||y||_2)``.
    """

    max_iterations: int = 100
    duality_gap_tol: float = 1e-6
    constraint_tol: float = 1e-8
    noise_level: float = 0.0
    cg_tol: float = 1e-10
    cg_maxiter: int = 300

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidSizeError("max_iterations must be >= 1")
        if self.duality_gap_tol <= 0 or self.constraint_tol <= 0:
            raise InvalidSizeError("tolerances must be positive")
        if self.noise_level < 0:
            raise InvalidSizeError("noise level must be non-negative")


@dataclass
class BpSolution:
    x: np.ndarray
    gap: float
    iterations: int
    converged: bool
    primal_residual: float
    degenerate: bool = False
    used_cg: bool = False


class _System:
    """Real linear map plus the normal-equation solves the solvers need."""

    def __init__(self, A, settings):
        self.settings = settings
        self.used_cg = False
        self.complex = False
        if hasattr(A, "adjoint"):
            self.complex = np.dtype(A.dtype).kind == "c"
            op = A if np.dtype(A.dtype).kind != "c" else RealEmbedding(A)
            self.op = op
            self.dense = None
            self.shape = op.shape
            self.matvec = op.apply
            self.rmatvec = op.adjoint
            self.selection = _SelectionFactor.maybe(op)
        else:
            mat = np.asarray(A)
            if mat.ndim != 2:
                raise DimensionError("dictionary must be 2-D")
            if np.iscomplexobj(mat):
                self.complex = True
                mat = np.block([[mat.real, -mat.imag], [mat.imag, mat.real]])
            self.op = None
            self.selection = None
            self.dense = mat.astype(float)
            self.shape = mat.shape
            self.matvec = lambda x: self.dense @ x
            self.rmatvec = lambda r: self.dense.T @ r

    def reduce_rank(self, y):
        """Restrict a rank-deficient dense system to its row space."""
        if self.dense is None:
            return y
        u, s, vt = np.linalg.svd(self.dense, full_matrices=False)
        tol = max(self.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
        rank = int(np.sum(s > tol))
        if rank == self.shape[0]:
            return y
        proj = u[:, :rank] @ (u[:, :rank].T @ y)
        if np.linalg.norm(y - proj) > self.settings.constraint_tol * (1 + np.linalg.norm(y)):
            raise InfeasibleError("measurements lie outside the range of the dictionary")
        if rank == 0:
            self.dense = np.zeros((0, self.shape[1]))
            self.shape = self.dense.shape
            return np.zeros(0)
        self.dense = s[:rank, None] * vt[:rank]
        self.shape = self.dense.shape
        return u[:, :rank].T @ y

    def min_norm(self, y):
        if self.dense is not None:
            return np.linalg.lstsq(self.dense, y, rcond=None)[0]
        return min_norm_solution(self.op, y)

    def _cg(self, apply, rhs, diag):
        self.used_cg = True
        n = rhs.shape[0]
        lin = LinearOperator((n, n), matvec=apply, dtype=float)
        precond = None
        if diag is not None:
            inv = 1.0 / np.maximum(diag, 1e-300)
            precond = LinearOperator((n, n), matvec=lambda v: inv * v, dtype=float)
        sol, info = cg(lin, rhs, rtol=self.settings.cg_tol, atol=0.0,
                       maxiter=self.settings.cg_maxiter, M=precond)
        if info > 0:
            log.debug("CG stopped after %d iterations without reaching tolerance", info)
        return sol

    def solve_weighted_normal(self, d, rhs):
        """Solve ``A diag(d) A^T v = rhs``."""
        if self.dense is not None:
            mat = (self.dense * d) @ self.dense.T
            try:
                factor = sla.cho_factor(mat, check_finite=False)
                diag = np.abs(np.diag(factor[0]))
                if diag.min() > 1e-8 * diag.max():
                    return sla.cho_solve(factor, rhs, check_finite=False)
            except (np.linalg.LinAlgError, ValueError):
                pass
            return self._cg(lambda v: mat @ v, rhs, np.diag(mat).copy())
        if self.selection is not None:
            sol = self.selection.solve(d, rhs)
            if sol is not None:
                return sol
        weights = self.op.row_weights(d) if hasattr(self.op, "row_weights") else None
        return self._cg(lambda v: self.matvec(d * self.rmatvec(v)), rhs, weights)

    def solve_barrier_newton(self, sigx, fe, atr, rhs):
        """Solve ``(diag(sigx) - A^T A / fe + atr atr^T / fe^2) dx = rhs``."""
        if self.dense is not None:
            n = self.shape[1]
            mat = -(self.dense.T @ self.dense) / fe + np.outer(atr, atr) / fe**2
            mat[np.diag_indices(n)] += sigx
            try:
                with warnings.catch_warnings():
                    # near the barrier boundary the system is badly scaled but still solvable
                    warnings.simplefilter("ignore", sla.LinAlgWarning)
                    return sla.solve(mat, rhs, assume_a="pos", check_finite=False)
            except (np.linalg.LinAlgError, ValueError):
                return self._cg(lambda v: mat @ v, rhs, np.diag(mat).copy())

        def apply(v):
            return sigx * v - self.rmatvec(self.matvec(v)) / fe + atr * (atr @ v) / fe**2

        gram = getattr(self.op, "gram_diagonal", None)
        diag = sigx - (gram() / fe if gram is not None else 0.0) + atr**2 / fe**2
        return self._cg(apply, rhs, diag)


class _SelectionFactor:
    """Direct solves with ``A diag(d) A^T`` when A = rows of a unitary U.

    ``A diag(d) A^T`` is the observed-rows block of ``B = U diag(d) U^H``,
    and ``B^-1 = U diag(1/d) U^H``. When fewer rows are missing than
    observed, the block inverse is assembled from ``B^-1`` and a Cholesky
    factorization of its missing-rows block (Schur complement), so the dense
    factorization is always of size ``min(M, N - M)``.
    """

    def __init__(self, op, dense_rows):
        self.op = op
        sel = op.selector
        missing = np.flatnonzero(~sel.mask())
        self.complement = len(missing) < sel.count
        if self.complement:
            # columns of U^H at the missing rows
            eye = np.zeros((op.basis.size, len(missing)))
            eye[missing, np.arange(len(missing))] = 1.0
            inner = op.basis.forward if not op.analysis else op.basis.inverse
            self.v = inner(eye) if len(missing) else np.zeros((op.basis.size, 0))
        else:
            self.a = dense_rows()

    @classmethod
    def maybe(cls, op):
        if not hasattr(op, "selector") or getattr(op, "stack_real", True):
            return None
        if op.columns_normalized or np.dtype(op.dtype).kind == "c":
            return None
        from .transforms import materialize_dictionary

        return cls(op, lambda: materialize_dictionary(op)[0])

    def _factor(self, d):
        if self.complement:
            mat = _gram(self.v.T, 1.0 / d) if self.v.shape[1] else None
        else:
            mat = _gram(self.a, d)
        return None if mat is None else sla.cho_factor(mat, lower=True, check_finite=False)

    def _apply_inverse(self, factor, d, rhs):
        if not self.complement:
            return sla.cho_solve(factor, rhs, check_finite=False)
        t = self.op.adjoint(rhs) / d
        out = self.op.apply(t)
        if factor is not None:
            z = sla.cho_solve(factor, self.v.T @ t, check_finite=False)
            out -= self.op.apply((self.v @ z) / d)
        return out

    def solve(self, d, rhs, refinements=2):
        try:
            factor = self._factor(d)
        except (np.linalg.LinAlgError, ValueError):
            return None
        sol = self._apply_inverse(factor, d, rhs)
        for _ in range(refinements):
            res = rhs - self.op.apply(d * self.op.adjoint(sol))
            sol = sol + self._apply_inverse(factor, d, res)
        return sol


def _gram(a, w):
    """``a diag(w) a^T`` via a symmetric rank-k update (lower triangle)."""
    from scipy.linalg.blas import dsyrk

    b = a * np.sqrt(w)
    # b.T is Fortran-ordered, so no copy is made
    return dsyrk(1.0, b.T, trans=1, lower=1)


def _unembed(x, A):
    complex_dict = np.iscomplexobj(A) if not hasattr(A, "adjoint") else np.dtype(A.dtype).kind == "c"
    if complex_dict:
        n = x.shape[0] // 2
        return x[:n] + 1j * x[n:]
    return x


def _real_measurements(y, system):
    y = np.asarray(y)
    if np.iscomplexobj(y):
        y = np.concatenate([y.real, y.imag])
    elif system.complex:
        y = np.concatenate([y, np.zeros_like(y)])
    if y.shape[0] != system.shape[0]:
        raise DimensionError(f"measurement length {y.shape[0]} does not match {system.shape[0]} rows")
    return y.astype(float)


def basis_pursuit(y, A, settings: BpSettings | None = None) -> BpSolution:
    """Minimum-l1 solution of ``A x = y``.

    Parameters
    ----------
    y : ndarray
        Measurements, length M.
    A : ndarray or operator
        M x N dictionary with full row rank. Rank-deficient dense
        dictionaries are reduced to their row space; an ``InfeasibleError``
        is raised if ``y`` is outside the range. Complex dictionaries are
        solved on the stacked real embedding.
    settings : BpSettings, optional

    Returns
    -------
    BpSolution
        ``gap`` is the surrogate duality gap ``-(f1 . lam1 + f2 . lam2)`` at
        the returned iterate. ``converged`` is False if the iteration limit
        or a stalled line search ended the run first; the last iterate is
        returned in that case.
    """
    settings = settings or BpSettings()
    system = _System(A, settings)
    y_r = _real_measurements(y, system)
    y_norm = float(np.linalg.norm(y_r))
    y_r = system.reduce_rank(y_r)
    gap_tol = settings.duality_gap_tol * max(1.0, y_norm)
    x = _l1eq_pd(system, y_r, gap_tol, settings)
    return BpSolution(_unembed(x.x, A), x.gap, x.iterations, x.converged,
                      x.primal_residual, used_cg=system.used_cg)


def _l1eq_pd(system, y, gap_tol, settings) -> BpSolution:
    n = system.shape[1]
    alpha, beta, mu = 0.01, 0.5, 10.0
    x = system.min_norm(y) if system.shape[0] else np.zeros(n)
    if not np.any(x):
        return BpSolution(np.zeros(n), 0.0, 0, True, float(np.linalg.norm(y)))
    u = 0.95 * np.abs(x) + 0.10 * np.abs(x).max()

    fu1, fu2 = x - u, -x - u
    lam1, lam2 = -1.0 / fu1, -1.0 / fu2
    v = -system.matvec(lam1 - lam2)
    atv = system.rmatvec(v)
    rpri = system.matvec(x) - y
    sdg = -(fu1 @ lam1 + fu2 @ lam2)
    tau = mu * 2 * n / sdg

    def residuals(lam1, lam2, atv, fu1, fu2, rpri, tau):
        rcent = np.concatenate([-lam1 * fu1, -lam2 * fu2]) - 1.0 / tau
        rdual = np.concatenate([lam1 - lam2 + atv, 1.0 - lam1 - lam2])
        return math.sqrt(rdual @ rdual + rcent @ rcent + rpri @ rpri)

    resnorm = residuals(lam1, lam2, atv, fu1, fu2, rpri, tau)
    it = 0
    converged = sdg < gap_tol
    while not converged and it < settings.max_iterations:
        it += 1
        w1 = -(1.0 / tau) * (-1.0 / fu1 + 1.0 / fu2) - atv
        w2 = -1.0 - (1.0 / tau) * (1.0 / fu1 + 1.0 / fu2)
        w3 = -rpri
        sig1 = -lam1 / fu1 - lam2 / fu2
        sig2 = lam1 / fu1 - lam2 / fu2
        # sig1 - sig2^2 / sig1 without the cancellation
        sigx = 4.0 * lam1 * lam2 / (fu1 * fu2 * sig1)

        w1p = w3 - system.matvec(w1 / sigx - w2 * sig2 / (sigx * sig1))
        dv = system.solve_weighted_normal(1.0 / sigx, -w1p)
        atdv = system.rmatvec(dv)
        dx = (w1 - w2 * sig2 / sig1 - atdv) / sigx
        adx = system.matvec(dx)
        du = (w2 - sig2 * dx) / sig1
        dlam1 = (lam1 / fu1) * (-dx + du) - lam1 - (1.0 / tau) / fu1
        dlam2 = (lam2 / fu2) * (dx + du) - lam2 - (1.0 / tau) / fu2

        # largest step keeping multipliers positive and the iterate interior
        s = 1.0
        for num, den in ((-lam1, dlam1), (-lam2, dlam2)):
            neg = den < 0
            if neg.any():
                s = min(s, float(np.min(num[neg] / den[neg])))
        for f, d in ((fu1, dx - du), (fu2, -dx - du)):
            pos = d > 0
            if pos.any():
                s = min(s, float(np.min(-f[pos] / d[pos])))
        s *= 0.99

        for _ in range(32):
            xp, up = x + s * dx, u + s * du
            vp, atvp = v + s * dv, atv + s * atdv
            lam1p, lam2p = lam1 + s * dlam1, lam2 + s * dlam2
            fu1p, fu2p = xp - up, -xp - up
            rpp = rpri + s * adx
            if residuals(lam1p, lam2p, atvp, fu1p, fu2p, rpp, tau) <= (1 - alpha * s) * resnorm:
                break
            s *= beta
        else:
            log.debug("line search stalled at iteration %d", it)
            break

        x, u, v, atv = xp, up, vp, atvp
        lam1, lam2, fu1, fu2 = lam1p, lam2p, fu1p, fu2p
        sdg = -(fu1 @ lam1 + fu2 @ lam2)
        tau = mu * 2 * n / sdg
        rpri = rpp
        resnorm = residuals(lam1, lam2, atv, fu1, fu2, rpri, tau)
        converged = sdg < gap_tol

    primal = float(np.linalg.norm(system.matvec(x) - y))
    converged = converged and primal <= settings.constraint_tol * (1 + np.linalg.norm(y))
    return BpSolution(x, float(sdg), it, bool(converged), primal)


def bpdn(y, A, sigma: float, settings: BpSettings | None = None) -> BpSolution:
    """Minimum-l1 solution of ``||A x - y||_2 <= sigma``.

    ``sigma = 0`` is Basis Pursuit. If ``sigma >= ||y||_2`` the zero vector is
    feasible and optimal; it is returned with ``degenerate`` set.
    """
    if sigma < 0:
        raise InvalidSizeError("sigma must be non-negative")
    settings = settings or BpSettings()
    system = _System(A, settings)
    y_r = _real_measurements(y, system)
    y_norm = float(np.linalg.norm(y_r))
    # below the constraint tolerance the noise ball is numerically a point
    if sigma <= settings.constraint_tol * (1 + y_norm):
        return basis_pursuit(y, A, settings)
    n = system.shape[1]
    if sigma >= y_norm:
        out = np.zeros(n)
        return BpSolution(_unembed(out, A), 0.0, 0, True, y_norm, degenerate=True)
    gap_tol = settings.duality_gap_tol * max(1.0, y_norm)
    res = _l1qc_logbarrier(system, y_r, sigma, gap_tol, settings)
    res.x = _unembed(res.x, A)
    res.used_cg = system.used_cg
    return res


def _l1qc_newton(system, x, u, y, sigma, tau, settings, max_newton=50, newton_tol=1e-12):
    alpha, beta = 0.01, 0.5
    r = system.matvec(x) - y
    fu1, fu2 = x - u, -x - u
    fe = 0.5 * (r @ r - sigma**2)

    def barrier(u, fu1, fu2, fe):
        return tau * u.sum() - np.log(-fu1).sum() - np.log(-fu2).sum() - math.log(-fe)

    f = barrier(u, fu1, fu2, fe)
    for _ in range(max_newton):
        atr = system.rmatvec(r)
        gx = -1.0 / fu1 + 1.0 / fu2 - atr / fe
        gu = tau + 1.0 / fu1 + 1.0 / fu2
        sig11 = 1.0 / fu1**2 + 1.0 / fu2**2
        sig12 = -1.0 / fu1**2 + 1.0 / fu2**2
        sigx = sig11 - sig12**2 / sig11
        rhs = -gx + sig12 / sig11 * gu
        dx = system.solve_barrier_newton(sigx, fe, atr, rhs)
        adx = system.matvec(dx)
        du = (-gu - sig12 * dx) / sig11

        smax = 1.0
        for f_, d in ((fu1, dx - du), (fu2, -dx - du)):
            pos = d > 0
            if pos.any():
                smax = min(smax, float(np.min(-f_[pos] / d[pos])))
        aqe, bqe, cqe = adx @ adx, 2 * (r @ adx), r @ r - sigma**2
        if aqe > 0:
            smax = min(smax, (-bqe + math.sqrt(max(bqe**2 - 4 * aqe * cqe, 0.0))) / (2 * aqe))
        s = 0.99 * smax

        slope = gx @ dx + gu @ du
        for _ in range(60):
            xp, up, rp = x + s * dx, u + s * du, r + s * adx
            fu1p, fu2p = xp - up, -xp - up
            fep = 0.5 * (rp @ rp - sigma**2)
            if fu1p.max() < 0 and fu2p.max() < 0 and fep < 0:
                fp = barrier(up, fu1p, fu2p, fep)
                if fp <= f + alpha * s * slope:
                    break
            s *= beta
        else:
            break
        x, u, r, fu1, fu2, fe, f = xp, up, rp, fu1p, fu2p, fep, fp
        if -slope / 2 < newton_tol:
            break
    return x, u


def _l1qc_logbarrier(system, y, sigma, gap_tol, settings) -> BpSolution:
    n = system.shape[1]
    mu = 10.0
    x = system.min_norm(y)
    u = 0.95 * np.abs(x) + 0.10 * np.abs(x).max()
    tau = max((2 * n + 1) / np.abs(x).sum(), 1.0)
    stages = max(1, math.ceil((math.log(2 * n + 1) - math.log(gap_tol) - math.log(tau)) / math.log(mu)) + 1)
    stages = min(stages, settings.max_iterations)
    for _ in range(stages):
        x, u = _l1qc_newton(system, x, u, y, sigma, tau, settings)
        gap = (2 * n + 1) / tau
        if gap < gap_tol:
            break
        tau *= mu
    primal = float(np.linalg.norm(system.matvec(x) - y))
    converged = gap < gap_tol and primal <= sigma * (1 + settings.constraint_tol)
    return BpSolution(x, float(gap), stages, bool(converged), primal)
