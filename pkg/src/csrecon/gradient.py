"""Gradient-based reconstruction of missing samples.

Missing samples are treated as free variables and moved downhill on the
l1 concentration of the transform coefficients. Each iteration estimates
the gradient with a two-sided difference of step ``delta`` at every missing
position (all from the same iterate), subtracts it, and shrinks ``delta``
when consecutive gradients point in nearly opposite directions.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateInputError, DimensionError, InvalidSizeError
from .transforms import TransformBasis

ERROR_FLOOR_DB = -300.0
_CHUNK_ENTRIES = 1 << 22


@dataclass(frozen=True)
class GradientSettings:
    step_reduction_factor: float = 1 / math.sqrt(10)
    angle_threshold: float = math.radians(170.0)
    target_error_dB: float = -60.0
    max_iterations: int = 2000
    # concentration is measured on scale * Psi y; None means sqrt(N), the
    # unnormalized transform. A unitary Psi alone gives steps sqrt(N) too short.
    transform_scale: float | None = None

    def __post_init__(self):
        if not 0 < self.step_reduction_factor < 1:
            raise InvalidSizeError("step_reduction_factor must lie in (0, 1)")
        if not 0 < self.angle_threshold <= math.pi:
            raise InvalidSizeError("angle_threshold must lie in (0, pi]")
        if self.max_iterations < 0:
            raise InvalidSizeError("max_iterations must be non-negative")
        if self.transform_scale is not None and self.transform_scale <= 0:
            raise InvalidSizeError("transform_scale must be positive")


@dataclass
class GradientState:
    """Loop state; ``estimate`` holds the available samples unchanged."""

    estimate: np.ndarray
    delta: float
    gradient: np.ndarray
    previous_gradient: np.ndarray | None = None
    angle: float | None = None
    error_db: float | None = None
    iteration: int = 0


@dataclass
class TraceRow:
    iteration: int
    delta: float
    beta: float
    error_db: float
    mu: float


@dataclass
class GradientResult:
    signal: np.ndarray
    converged: bool
    trace: list = field(default_factory=list)
    reductions: int = 0


def concentration(x) -> float:
    """Sum of coefficient moduli."""
    return float(np.abs(np.asarray(x)).sum())


def zero_fill(f, mask) -> np.ndarray:
    """Place the available samples ``f`` and zeros elsewhere.

    ``mask`` is a boolean array (True = available), flattened row-major.
    """
    mask = np.asarray(mask, dtype=bool).ravel()
    f = np.asarray(f).ravel()
    if f.shape[0] != int(mask.sum()):
        raise DimensionError(f"{f.shape[0]} samples for {int(mask.sum())} available positions")
    y = np.zeros(mask.shape[0], dtype=np.result_type(f.dtype, np.float64))
    y[mask] = f
    return y


def initial_step(y) -> float:
    delta = float(np.max(np.abs(y), initial=0.0))
    if delta == 0:
        raise DegenerateInputError("all samples are zero; nothing to reconstruct")
    return delta


class _Perturbations:
    """Columns of the transform at the missing positions, computed once."""

    def __init__(self, basis: TransformBasis, missing):
        self.basis = basis
        self.missing = np.asarray(missing, dtype=np.intp)
        n = basis.size
        eye = np.zeros((n, self.missing.size))
        eye[self.missing, np.arange(self.missing.size)] = 1.0
        self.columns = basis.forward(eye) if self.missing.size else np.zeros((n, 0))

    def differences(self, coeffs, delta):
        """``mu(X + delta psi_s) - mu(X - delta psi_s)`` for every missing s."""
        out = np.empty(self.missing.size)
        n = coeffs.shape[0]
        step = max(1, _CHUNK_ENTRIES // max(n, 1))
        if not np.iscomplexobj(coeffs) and not np.iscomplexobj(self.columns):
            # |a + b| - |a - b| = 2 sign(a) clip(b, -|a|, |a|) for real a, b
            lim = (np.abs(coeffs) / delta)[:, None]
            sgn = np.sign(coeffs)
            buf = np.empty((n, min(step, self.missing.size)))
            for lo in range(0, self.missing.size, step):
                cols = self.columns[:, lo:lo + step]
                b = buf[:, :cols.shape[1]]
                np.clip(cols, -lim, lim, out=b)
                out[lo:lo + step] = 2 * delta * (sgn @ b)
            return out
        x = coeffs[:, None]
        for lo in range(0, self.missing.size, step):
            cols = delta * self.columns[:, lo:lo + step]
            out[lo:lo + step] = np.abs(x + cols).sum(axis=0) - np.abs(x - cols).sum(axis=0)
        return out


def gradient_vector(state: GradientState, basis: TransformBasis, missing,
                    scale: float = 1.0, _cache=None) -> np.ndarray:
    """Two-sided difference estimate of the concentration gradient.

    ``G(n_s) = (mu(X+) - mu(X-)) / N`` with ``X+- = scale * Psi y+-`` and
    ``y+-`` the estimate with sample ``n_s`` moved by ``+-delta``; zero at
    available positions.
    """
    if state.delta <= 0:
        raise InvalidSizeError("delta must be positive")
    missing = np.asarray(missing, dtype=np.intp)
    n = state.estimate.shape[0]
    g = np.zeros(n)
    if missing.size == 0:
        return g
    pert = _cache if _cache is not None else _Perturbations(basis, missing)
    g[missing] = scale * pert.differences(basis.forward(state.estimate), state.delta) / n
    return g


def apply_update(state: GradientState, g) -> GradientState:
    """Subtract ``g`` from the estimate; ``g`` must vanish at available samples."""
    return replace(state, estimate=state.estimate - g, gradient=g,
                   previous_gradient=state.gradient, iteration=state.iteration + 1)


def gradient_angle(g_prev, g_cur) -> float | None:
    """Angle between two gradients in radians; None if either is zero."""
    a = np.linalg.norm(g_prev)
    b = np.linalg.norm(g_cur)
    if a == 0 or b == 0:
        return None
    ratio = float(np.vdot(g_prev, g_cur).real / (a * b))
    return math.acos(min(1.0, max(-1.0, ratio)))


def iteration_error(y_prev, y_cur, missing) -> float:
    """Relative change on the missing samples in dB, floored at -300."""
    missing = np.asarray(missing, dtype=np.intp)
    if missing.size == 0:
        raise InvalidSizeError("no missing samples")
    num = float(np.sum(np.abs(y_prev[missing] - y_cur[missing]) ** 2))
    den = float(np.sum(np.abs(y_cur[missing]) ** 2))
    if num == 0 or den == 0:
        return ERROR_FLOOR_DB
    return max(ERROR_FLOOR_DB, 10 * math.log10(num / den))


def reconstruct_gradient(f, mask, basis: TransformBasis,
                         settings: GradientSettings | None = None, observer=None) -> GradientResult:
    """Recover the missing samples of a signal sparse in ``basis``.

    Parameters
    ----------
    f : array_like
        Available samples in row-major order of the ``True`` entries of ``mask``.
    mask : array_like of bool
        True where a sample is available.
    basis : TransformBasis
        Sparsifying transform; ``basis.forward`` gives the coefficients.
    settings : GradientSettings, optional
    observer : callable, optional
        Called with the state after every iteration.

    Returns
    -------
    GradientResult
        ``trace`` holds one ``TraceRow`` per iteration with the step used in
        that iteration. The step after ``k`` reductions is
        ``delta0 * factor**k``.
    """
    settings = settings or GradientSettings()
    mask = np.asarray(mask, dtype=bool).ravel()
    if mask.shape[0] != basis.size:
        raise DimensionError(f"mask of {mask.shape[0]} samples for a basis of size {basis.size}")
    y = zero_fill(f, mask)
    missing = np.flatnonzero(~mask)
    if missing.size == 0:
        return GradientResult(y, True)
    delta0 = initial_step(y)
    scale = math.sqrt(basis.size) if settings.transform_scale is None else settings.transform_scale
    pert = _Perturbations(basis, missing)
    state = GradientState(y, delta0, np.zeros_like(y))
    reductions = 0
    trace = []
    converged = False
    for _ in range(settings.max_iterations):
        g = gradient_vector(state, basis, missing, scale, pert)
        beta = gradient_angle(state.gradient, g) if state.iteration > 0 else None
        if not np.any(g):
            converged = True
            break
        new = apply_update(state, g)
        err = iteration_error(state.estimate, new.estimate, missing)
        new.angle, new.error_db = beta, err
        mu = scale * concentration(basis.forward(new.estimate))
        trace.append(TraceRow(new.iteration, state.delta, math.nan if beta is None else beta, err, mu))
        if beta is not None and beta > settings.angle_threshold:
            reductions += 1
            new.delta = delta0 * settings.step_reduction_factor ** reductions
        state = new
        if observer is not None:
            observer(state)
        if err <= settings.target_error_dB:
            converged = True
            break
    return GradientResult(state.estimate, converged, trace, reductions)


def write_trace(trace, path) -> None:
    """Write the per-iteration trace as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "delta", "beta", "error_dB", "mu"])
        for row in trace:
            w.writerow([row.iteration, repr(row.delta), repr(row.beta), repr(row.error_db), repr(row.mu)])
