"""Total-variation reconstruction of image blocks.

Solves ``min TV(x) s.t. ||A x - y||_2 <= eps`` with isotropic TV, written as
a second-order cone program (one cone ``||D_ij x|| <= t_ij`` per pixel plus
the data cone) and minimized by a log-barrier method with Newton steps.
After eliminating the cone variables ``t`` each Newton system is a sparse
pixel-domain matrix plus the data term. With a pixel mask and ``eps = 0``
the observed pixels are fixed and only the missing ones are optimized.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg, splu

from .errors import DimensionError, InfeasibleError, InvalidSizeError
from .transforms import BasisKind, MeasurementSelector, SensingOperator, build_basis, draw_selector, min_norm_solution

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradientField:
    """Forward differences; ``dx`` runs down rows, ``dy`` along columns."""

    dx: np.ndarray
    dy: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)


@dataclass(frozen=True)
class TvSettings:
    """``epsilon`` is the l2 radius of the data constraint (not its square)."""

    epsilon: float = 0.0
    max_outer_iterations: int = 10
    max_newton_iterations: int = 50
    tolerance: float = 1e-4
    barrier_factor: float = 10.0
    cg_tol: float = 1e-4
    cg_maxiter: int = 500

    def __post_init__(self):
        if self.epsilon < 0:
            raise InvalidSizeError("epsilon must be non-negative")
        if self.tolerance <= 0 or self.max_outer_iterations < 1:
            raise InvalidSizeError("tolerance must be positive and at least one barrier stage allowed")


@dataclass
class TvResult:
    image: np.ndarray
    converged: bool
    stages: int = 0
    newton_iterations: int = 0
    objective_trace: list = field(default_factory=list)
    data_residual: float = 0.0
    gap: float = 0.0


def discrete_gradient(block) -> GradientField:
    block = np.asarray(block, dtype=float)
    if block.ndim != 2 or min(block.shape) < 1:
        raise DimensionError(f"expected a non-empty 2-D block, got shape {block.shape}")
    dx = np.zeros_like(block)
    dy = np.zeros_like(block)
    dx[:-1, :] = block[1:, :] - block[:-1, :]
    dy[:, :-1] = block[:, 1:] - block[:, :-1]
    return GradientField(dx, dy)


def tv_norm(block) -> float:
    """Isotropic total variation, the sum of gradient magnitudes."""
    return float(discrete_gradient(block).magnitude.sum())


def _difference_ops(shape):
    h, w = shape

    def fwd(n):
        if n == 1:
            return sp.csr_matrix((1, 1))
        main = -np.ones(n)
        main[-1] = 0.0
        return sp.diags([main, np.ones(n - 1)], [0, 1], format="csr")

    dx = sp.kron(fwd(h), sp.identity(w), format="csr")
    dy = sp.kron(sp.identity(h), fwd(w), format="csr")
    return dx, dy


def _first_crossing(a, b, c):
    """Smallest s > 0 with a s^2 + b s + c = 0 given c < 0; inf if none."""
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        denom = -b - np.sqrt(np.where(disc >= 0, disc, 0.0))
        root = np.where((disc >= 0) & (denom < 0), 2 * c / denom, np.inf)
    return root


class _Problem:
    """Barrier subproblem data shared across stages."""

    def __init__(self, shape, op, y, eps, free, base, settings):
        self.shape = shape
        self.n = shape[0] * shape[1]
        self.op = op
        self.y = y
        self.eps = eps
        self.free = free            # indices optimized, or None for all pixels
        self.base = base            # full image with fixed pixels set
        self.settings = settings
        self.dx, self.dy = _difference_ops(shape)
        self.d = sp.vstack([self.dx, self.dy], format="csr")
        # the single data cone gets the weight of one cone per pixel so the
        # central path stays clear of the data boundary
        self.data_weight = float(self.n) if eps > 0 else 0.0
        self.mask_data = None
        if eps > 0 and op is not None and op.basis.kind is BasisKind.IDENTITY and not op.stack_real:
            m = np.zeros(self.n)
            m[op.selector.selected] = 1.0
            self.mask_data = m

    def image(self, z):
        if self.free is None:
            return z
        x = self.base.copy()
        x[self.free] = z
        return x

    def residual(self, x):
        return self.op.apply(x) - self.y

    def objective(self, tau, x, t, fe):
        gx, gy = self.dx @ x, self.dy @ x
        f = 0.5 * (gx**2 + gy**2 - t**2)
        if np.any(f >= 0) or (fe is not None and fe >= 0):
            return math.inf
        val = tau * t.sum() - np.log(-f).sum()
        if fe is not None:
            val -= self.data_weight * math.log(-fe)
        return val


def _newton_stage(prob: _Problem, z, t, tau, max_newton):
    """Minimize the barrier function for fixed ``tau``.

    Returns ``(z, t, steps, centered)``; ``centered`` is False when the step
    limit or a failed line search ended the stage early.
    """
    alpha, beta = 0.01, 0.5
    use_data = prob.eps > 0
    x = prob.image(z)
    r = prob.residual(x) if use_data else None
    fe = 0.5 * (r @ r - prob.eps**2) if use_data else None
    fval = prob.objective(tau, x, t, fe)
    steps = 0
    centered = False
    for steps in range(1, max_newton + 1):
        gx, gy = prob.dx @ x, prob.dy @ x
        f = 0.5 * (gx**2 + gy**2 - t**2)
        inv_f = 1.0 / f
        inv_f2 = inv_f**2
        g_t = tau + t * inv_f
        grad_x = -(prob.dx.T @ (gx * inv_f) + prob.dy.T @ (gy * inv_f))
        h_tt = 0.5 * (t**2 + gx**2 + gy**2) * inv_f2
        p = -t * gx * inv_f2
        q = -t * gy * inv_f2
        w11 = gx**2 * inv_f2 - inv_f - p * p / h_tt
        w22 = gy**2 * inv_f2 - inv_f - q * q / h_tt
        w12 = gx * gy * inv_f2 - p * q / h_tt
        weights = sp.bmat([[sp.diags(w11), sp.diags(w12)], [sp.diags(w12), sp.diags(w22)]], format="csr")
        s_mat = (prob.d.T @ weights @ prob.d).tocsc()
        rhs = -grad_x + prob.dx.T @ (p * g_t / h_tt) + prob.dy.T @ (q * g_t / h_tt)

        atr = None
        if use_data:
            atr = prob.op.adjoint(r)
            rhs = rhs + prob.data_weight * atr / fe
        dx_full = _solve_newton(prob, s_mat, rhs, fe, atr)
        if prob.free is not None:
            dz = dx_full
            dx_full = np.zeros(prob.n)
            dx_full[prob.free] = dz
        else:
            dz = dx_full

        dgx, dgy = prob.dx @ dx_full, prob.dy @ dx_full
        dt = (-g_t - p * dgx - q * dgy) / h_tt

        # step to the first cone boundary
        aq = dgx**2 + dgy**2 - dt**2
        bq = 2 * (gx * dgx + gy * dgy - t * dt)
        cq = gx**2 + gy**2 - t**2
        smax = float(np.min(_first_crossing(aq, bq, cq), initial=math.inf))
        adx = None
        if use_data:
            adx = prob.op.apply(dx_full)
            smax = min(smax, float(_first_crossing(adx @ adx, 2 * (r @ adx), r @ r - prob.eps**2)))
        s = min(1.0, 0.99 * smax)

        grad_z = (grad_x - (prob.data_weight * atr / fe if use_data else 0.0))
        grad_z = grad_z[prob.free] if prob.free is not None else grad_z
        slope = float(grad_z @ dz + g_t @ dt)
        if slope >= 0:
            centered = True
            break
        for _ in range(60):
            zp, tp = z + s * dz, t + s * dt
            xp = prob.image(zp)
            rp = r + s * adx if use_data else None
            fep = 0.5 * (rp @ rp - prob.eps**2) if use_data else None
            fp = prob.objective(tau, xp, tp, fep)
            if fp <= fval + alpha * s * slope:
                break
            s *= beta
        else:
            log.debug("TV line search failed at tau=%g", tau)
            break
        z, t, x, r, fe, fval = zp, tp, xp, rp, fep, fp
        if -slope / 2 < 1e-9 * max(1.0, abs(fval)):
            centered = True
            break
    return z, t, steps, centered


def _solve_newton(prob, s_mat, rhs, fe, atr):
    """Solve the reduced Newton system in the optimized pixels."""
    if prob.free is not None:
        s_mat = s_mat[prob.free][:, prob.free]
        rhs = rhs[prob.free]
    if prob.eps == 0:
        return splu(s_mat.tocsc()).solve(rhs)
    # data barrier Hessian: -(w / fe) A^T A + u u^T
    c = -prob.data_weight / fe
    u = math.sqrt(prob.data_weight) * atr / fe
    if prob.mask_data is not None:
        lu = splu((s_mat + sp.diags(c * prob.mask_data)).tocsc())
        a = lu.solve(rhs)
        b = lu.solve(u)
        return a - b * (u @ a) / (1.0 + u @ b)
    # general operator: CG preconditioned by the sparse TV part plus the diagonal of A^T A
    gram = prob.op.gram_diagonal()
    lu = splu((s_mat + sp.diags(c * gram)).tocsc())
    n = rhs.shape[0]

    def matvec(v):
        return s_mat @ v + c * prob.op.adjoint(prob.op.apply(v)) + u * (u @ v)

    lin = LinearOperator((n, n), matvec=matvec, dtype=float)
    pre = LinearOperator((n, n), matvec=lu.solve, dtype=float)
    sol, info = cg(lin, rhs, rtol=prob.settings.cg_tol, atol=0.0, maxiter=prob.settings.cg_maxiter, M=pre)
    if info > 0:
        log.debug("TV Newton CG did not reach tolerance in %d iterations", info)
    return sol


def _initial_cones(x, dx, dy):
    mag = np.hypot(dx @ x, dy @ x)
    floor = 1e-3 * (1.0 + np.abs(x).max())
    return 0.95 * mag + 0.1 * max(mag.max(), floor)


def tv_reconstruct(y, op: SensingOperator, settings: TvSettings | None = None) -> TvResult:
    """Minimum-TV block consistent with the measurements.

    Parameters
    ----------
    y : ndarray
        Measurements of the block under ``op``.
    op : SensingOperator
        Measurement operator acting on the row-major flattened block; either
        a pixel mask (identity basis) or an analysis-form partial transform.
        The block shape is ``op.basis.shape``.
    settings : TvSettings, optional
        ``epsilon`` bounds ``||A x - y||_2``. For operators other than a
        pixel mask an exact constraint is approximated with a radius of
        ``1e-6 * max(1, ||y||)``.
    """
    settings = settings or TvSettings()
    shape = tuple(op.basis.shape)
    if len(shape) != 2:
        raise DimensionError("TV reconstruction needs a 2-D block basis")
    y = np.asarray(y, dtype=float)
    if y.shape != (op.shape[0],):
        raise DimensionError(f"expected {op.shape[0]} measurements, got {y.shape}")
    n = shape[0] * shape[1]
    is_mask = op.basis.kind is BasisKind.IDENTITY and not op.stack_real
    eps = settings.epsilon

    if is_mask:
        base = np.full(n, y.mean() if y.size else 0.0)
        base[op.selector.selected] = y
        if eps == 0:
            free = np.flatnonzero(~op.selector.mask())
            if free.size == 0:
                return TvResult(base.reshape(shape), True)
            prob = _Problem(shape, None, y, 0.0, free, base, settings)
            z = base[free].copy()
        else:
            prob = _Problem(shape, op, y, eps, None, base, settings)
            z = base.copy()
    else:
        if eps == 0:
            eps = 1e-6 * max(1.0, float(np.linalg.norm(y)))
        x0 = min_norm_solution(op, y)
        if np.linalg.norm(op.apply(x0) - y) >= eps:
            raise InfeasibleError("could not find a starting point inside the data constraint")
        prob = _Problem(shape, op, y, eps, None, x0, settings)
        z = x0.copy()

    x = prob.image(z)
    t = _initial_cones(x, prob.dx, prob.dy)
    tv0 = tv_norm(x.reshape(shape))
    ncones = 2 * n + prob.data_weight
    if tv0 <= 1e-12:
        res = float(np.linalg.norm(op.apply(x) - y))
        return TvResult(x.reshape(shape), True, data_residual=res)
    tau = ncones / tv0
    trace = []
    newton_total = 0
    gap = ncones / tau
    converged = False
    stages = 0
    for stages in range(1, settings.max_outer_iterations + 1):
        z, t, steps, centered = _newton_stage(prob, z, t, tau, settings.max_newton_iterations)
        newton_total += steps
        x = prob.image(z)
        tv = tv_norm(x.reshape(shape))
        trace.append(tv)
        gap = ncones / tau
        if gap <= settings.tolerance * max(1.0, tv):
            converged = centered
            break
        tau *= settings.barrier_factor
    res = float(np.linalg.norm(op.apply(x) - y))
    return TvResult(x.reshape(shape), converged, stages, newton_total, trace, res, gap)


def tv_denoise(noisy, epsilon: float, settings: TvSettings | None = None) -> TvResult:
    """Minimum-TV image within l2 distance ``epsilon`` of ``noisy``."""
    noisy = np.asarray(noisy, dtype=float)
    if epsilon < 0:
        raise InvalidSizeError("epsilon must be non-negative")
    if epsilon == 0:
        return TvResult(noisy.copy(), True)
    base = settings or TvSettings()
    settings = TvSettings(epsilon, base.max_outer_iterations, base.max_newton_iterations,
                          base.tolerance, base.barrier_factor, base.cg_tol, base.cg_maxiter)
    n = noisy.size
    op = SensingOperator(build_basis("identity", noisy.shape), draw_selector(n, n, 0))
    return tv_reconstruct(noisy.ravel(), op, settings)


def fourier_measurements(shape, m: int, seed: int, include_dc: bool = False) -> SensingOperator:
    """Random partial 2-D DFT of a real block, stacked as ``[Re; Im]`` rows.

    With ``include_dc`` the zero frequency is always measured and the other
    ``m - 1`` frequencies are drawn from the rest; without it the block mean
    is unobservable whenever frequency 0 is not drawn.
    """
    basis = build_basis("dft", shape)
    if not include_dc:
        return SensingOperator(basis, draw_selector(basis.size, m, seed), analysis=True, stack_real=True)
    if not 1 <= m <= basis.size:
        raise InvalidSizeError(f"need 1 <= m <= {basis.size}, got {m}")
    rest = draw_selector(basis.size - 1, m - 1, seed).selected + 1
    sel = MeasurementSelector(basis.size, np.concatenate([[0], rest]), seed)
    return SensingOperator(basis, sel, analysis=True, stack_real=True)
