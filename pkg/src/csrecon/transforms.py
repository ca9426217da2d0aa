"""Transform bases, random row selectors and the sensing operator A = Phi Psi.

Bases are stored by their one-dimensional factors; a basis over a 2-D block is
the Kronecker product of a row factor and a column factor acting on the
row-major flattening of the block. Dense matrices are only built on request.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

from .errors import DimensionError, InvalidSizeError, TooLargeError

#: Default guard for dense dictionaries (entries, not bytes).
MAX_DENSE_ENTRIES = 2**26


class BasisKind(str, Enum):
    DFT = "dft"
    DCT = "dct"
    IDENTITY = "identity"


def dft_matrix(n: int) -> np.ndarray:
    """Unitary DFT matrix, entry (k, j) = exp(-2 pi i jk / n) / sqrt(n)."""
    k = np.arange(n)
    # reduce jk mod n first so large indices keep full phase accuracy
    phase = np.outer(k, k) % n
    return np.exp(-2j * np.pi * phase / n) / math.sqrt(n)


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix, row = frequency, column = sample."""
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * j + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    mat[0] /= math.sqrt(2.0)
    return mat


_FACTORIES = {
    BasisKind.DFT: dft_matrix,
    BasisKind.DCT: dct_matrix,
    BasisKind.IDENTITY: lambda n: np.eye(n),
}


def _apply_separable(mats, shape, x):
    """Apply ``mats[a]`` along axis ``a`` of ``x`` reshaped to ``shape``.

    ``x`` is either a flat vector of length prod(shape) or a 2-D array whose
    columns are such vectors.
    """
    if all(m is None for m in mats):
        return np.array(x, copy=True)
    batched = x.ndim == 2
    k = x.shape[1] if batched else 1
    arr = x.reshape(tuple(shape) + (k,))
    for axis, mat in enumerate(mats):
        if mat is None:
            continue
        arr = np.moveaxis(np.tensordot(mat, arr, axes=(1, axis)), 0, axis)
    out = arr.reshape(-1, k)
    return out if batched else out[:, 0]


@dataclass(frozen=True, eq=False)
class TransformBasis:
    """Unitary transform over a 1-D signal or a row-major flattened block.

    ``forward`` maps samples to transform coefficients (the matrix Psi) and
    ``inverse`` maps coefficients back (Psi^H).
    """

    kind: BasisKind
    shape: tuple
    factors: tuple

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def is_complex(self) -> bool:
        return self.kind is BasisKind.DFT

    @cached_property
    def matrix(self) -> np.ndarray:
        """Dense N x N matrix; row = transform index, column = sample index."""
        if self.size**2 > MAX_DENSE_ENTRIES:
            raise TooLargeError(f"dense {self.size}x{self.size} basis exceeds the memory guard")
        mat = np.ones((1, 1))
        for f in self.factors:
            mat = np.kron(mat, f)
        return mat

    @cached_property
    def _forward_mats(self):
        if self.kind is BasisKind.IDENTITY:
            return (None,) * len(self.factors)
        return self.factors

    @cached_property
    def _inverse_mats(self):
        if self.kind is BasisKind.IDENTITY:
            return (None,) * len(self.factors)
        return tuple(f.conj().T for f in self.factors)

    @cached_property
    def _abs2(self):
        return tuple(np.abs(f) ** 2 for f in self.factors)

    def _check(self, x):
        x = np.asarray(x)
        if x.shape[0] != self.size or x.ndim > 2:
            raise DimensionError(f"expected length {self.size}, got shape {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        return _apply_separable(self._forward_mats, self.shape, self._check(x))

    def inverse(self, c) -> np.ndarray:
        return _apply_separable(self._inverse_mats, self.shape, self._check(c))

    def abs2_forward(self, x) -> np.ndarray:
        """Apply the entrywise squared modulus |Psi|^2 to ``x``."""
        return _apply_separable(self._abs2, self.shape, self._check(x))

    def abs2_adjoint(self, x) -> np.ndarray:
        """Apply (|Psi|^2)^T to ``x``."""
        mats = tuple(m.T for m in self._abs2)
        return _apply_separable(mats, self.shape, self._check(x))


def build_basis(kind, n) -> TransformBasis:
    """Build a unitary basis.

    Parameters
    ----------
    kind : BasisKind or str
        ``"dft"``, ``"dct"`` or ``"identity"``.
    n : int or tuple of int
        Signal length, or block shape for a separable multi-dimensional basis.
    """
    kind = BasisKind(kind)
    shape = (n,) if np.isscalar(n) else tuple(n)
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise InvalidSizeError(f"basis size must be >= 1, got {n!r}")
    factors = tuple(_FACTORIES[kind](s) for s in shape)
    return TransformBasis(kind, shape, factors)


@dataclass(frozen=True, eq=False)
class MeasurementSelector:
    """Sorted, distinct row indices drawn from ``range(total)``."""

    total: int
    selected: np.ndarray
    seed: int | None = None

    @property
    def count(self) -> int:
        return len(self.selected)

    def mask(self) -> np.ndarray:
        out = np.zeros(self.total, dtype=bool)
        out[self.selected] = True
        return out

    @classmethod
    def from_mask(cls, mask, seed=None) -> "MeasurementSelector":
        mask = np.asarray(mask, dtype=bool).ravel()
        sel = np.flatnonzero(mask)
        sel.flags.writeable = False
        return cls(mask.size, sel, seed)


def draw_selector(n: int, m: int, seed: int) -> MeasurementSelector:
    """Draw ``m`` of ``n`` indices uniformly without replacement.

    The draw is a partial Fisher-Yates shuffle on ``range(n)``: step ``i``
    swaps position ``i`` with ``i + u_i`` where ``u_i`` is uniform on
    ``[0, n - i)``. The ``u_i`` come from a PCG64 generator seeded with
    ``seed`` through ``Generator.integers``, whose bounded draws use
    rejection sampling, so there is no modulo bias. The first ``m`` shuffled
    entries, sorted, are the selection.
    """
    if n < 1:
        raise InvalidSizeError(f"n must be >= 1, got {n}")
    if not 1 <= m <= n:
        raise InvalidSizeError(f"measurement count must satisfy 1 <= m <= n, got m={m}, n={n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    offsets = rng.integers(0, n - np.arange(m, dtype=np.int64)).tolist()
    perm = list(range(n))
    for i, off in enumerate(offsets):
        j = i + off
        perm[i], perm[j] = perm[j], perm[i]
    sel = np.sort(np.array(perm[:m], dtype=np.int64))
    sel.flags.writeable = False
    return MeasurementSelector(n, sel, seed)


@dataclass(frozen=True, eq=False)
class SensingOperator:
    """Row-subsampled transform, the dictionary A = Phi Psi.

    In synthesis form (default) the operator maps transform coefficients to
    the selected samples of the inverse transform, ``A x = (Psi^H x)[sel]``.
    In analysis form it maps samples to selected transform coefficients,
    ``A x = (Psi x)[sel]``; this is the random partial DFT measurement used
    for block TV.

    ``stack_real`` exposes a complex-valued operator on real inputs as a real
    operator with rows ``[Re; Im]`` (2M rows). ``columns_normalized`` rescales
    every column to unit norm; columns with zero norm act as zero.
    """

    basis: TransformBasis
    selector: MeasurementSelector
    columns_normalized: bool = False
    analysis: bool = False
    stack_real: bool = False

    def __post_init__(self):
        if self.selector.total != self.basis.size:
            raise DimensionError(
                f"selector over {self.selector.total} positions does not match basis size {self.basis.size}"
            )

    @property
    def n_measurements(self) -> int:
        return self.selector.count

    @property
    def shape(self) -> tuple:
        m = self.selector.count
        return (2 * m if self.stack_real else m, self.basis.size)

    @property
    def dtype(self):
        if self.basis.is_complex and not self.stack_real:
            return np.complex128
        return np.float64

    @cached_property
    def column_norms(self) -> np.ndarray:
        """Euclidean norms of the unnormalized columns."""
        mask = self.selector.mask().astype(float)
        if self.analysis:
            sq = self.basis.abs2_adjoint(mask)
        else:
            sq = self.basis.abs2_forward(mask)
        return np.sqrt(np.maximum(sq, 0.0))

    @cached_property
    def scales(self) -> np.ndarray:
        """Column scale factors; zero-norm columns get ``inf`` so they vanish."""
        norms = self.column_norms
        return np.where(norms > 1e-12, norms, np.inf)

    def _validate(self, x, length):
        x = np.asarray(x)
        if x.ndim not in (1, 2) or x.shape[0] != length:
            raise DimensionError(f"expected leading dimension {length}, got shape {x.shape}")
        return x

    def apply(self, x) -> np.ndarray:
        x = self._validate(x, self.basis.size)
        if self.columns_normalized:
            s = self.scales if x.ndim == 1 else self.scales[:, None]
            x = x / s
        z = self.basis.forward(x) if self.analysis else self.basis.inverse(x)
        z = z[self.selector.selected]
        if self.stack_real:
            return np.concatenate([z.real, z.imag], axis=0)
        return z

    def adjoint(self, r) -> np.ndarray:
        r = self._validate(r, self.shape[0])
        m = self.selector.count
        if self.stack_real:
            r = r[:m] + 1j * r[m:]
        full = np.zeros((self.basis.size,) + r.shape[1:], dtype=np.result_type(r, self.dtype))
        full[self.selector.selected] = r
        out = self.basis.inverse(full) if self.analysis else self.basis.forward(full)
        if self.stack_real:
            out = out.real
        if self.columns_normalized:
            s = self.scales if out.ndim == 1 else self.scales[:, None]
            out = out / s
        return out

    def column(self, j: int) -> np.ndarray:
        e = np.zeros(self.basis.size)
        e[j] = 1.0
        return self.apply(e)

    def gram_diagonal(self) -> np.ndarray:
        """Diagonal of A^T A (squared column norms)."""
        if self.columns_normalized:
            return np.where(np.isfinite(self.scales), 1.0, 0.0)
        return self.column_norms**2

    def row_weights(self, d) -> np.ndarray | None:
        """Diagonal of A diag(d) A^H, or None when not cheaply available."""
        if self.stack_real:
            return None
        d = np.asarray(d, dtype=float)
        if self.columns_normalized:
            d = d / self.scales**2
        if self.analysis:
            full = self.basis.abs2_forward(d)
        else:
            full = self.basis.abs2_adjoint(d)
        return full[self.selector.selected]


class RealEmbedding:
    """Real view of a complex operator acting on ``[Re x; Im x]``.

    Rows are ``[Re(Ax); Im(Ax)]``, so an l1 norm over the embedded variable is
    the sum of |Re| + |Im|, not the complex modulus.
    """

    def __init__(self, op):
        self.op = op
        m, n = op.shape
        self.shape = (2 * m, 2 * n)
        self.dtype = np.float64

    def apply(self, x):
        n = self.op.shape[1]
        z = self.op.apply(x[:n] + 1j * x[n:])
        return np.concatenate([z.real, z.imag], axis=0)

    def adjoint(self, r):
        m = self.op.shape[0]
        w = self.op.adjoint(r[:m] + 1j * r[m:])
        return np.concatenate([w.real, w.imag], axis=0)

    def row_weights(self, d):
        return None


def apply_operator(op: SensingOperator, x) -> np.ndarray:
    """Measurements of coefficient vector ``x`` under ``op``."""
    return op.apply(x)


def materialize_dictionary(op: SensingOperator, normalize: bool = False,
                           max_entries: int = MAX_DENSE_ENTRIES):
    """Dense matrix of ``op`` and the column scale factors.

    Returns ``(matrix, scales)``. If ``normalize`` is set (or the operator is
    already normalized) every nonzero column of ``matrix`` has unit norm, and
    dividing a solution of the normalized system by ``scales`` gives the
    coefficients of the original one.
    """
    rows, cols = op.shape
    if rows * cols > max_entries:
        raise TooLargeError(
            f"{rows}x{cols} dictionary exceeds {max_entries} entries; use the operator form"
        )
    mat = np.empty((rows, cols), dtype=op.dtype)
    chunk = max(1, min(cols, 2**22 // max(cols, 1)))
    for start in range(0, cols, chunk):
        stop = min(cols, start + chunk)
        eye = np.zeros((cols, stop - start))
        eye[np.arange(start, stop), np.arange(stop - start)] = 1.0
        mat[:, start:stop] = op.apply(eye)
    scales = op.scales.copy()
    if normalize and not op.columns_normalized:
        mat = mat / scales
    return mat, scales


def min_norm_solution(op, y, tol: float = 1e-12, maxiter: int = 500) -> np.ndarray:
    """Minimum-norm least-squares solution of ``op x = y`` by CG on A^H A."""
    from scipy.sparse.linalg import LinearOperator, cg

    n = op.shape[1]
    dtype = np.result_type(op.dtype, np.asarray(y).dtype)
    normal = LinearOperator((n, n), matvec=lambda v: op.adjoint(op.apply(v)), dtype=dtype)
    rhs = op.adjoint(y)
    if not np.any(rhs):
        return np.zeros(n, dtype=dtype)
    x, _ = cg(normal, rhs, rtol=tol, atol=0.0, maxiter=maxiter)
    return x
