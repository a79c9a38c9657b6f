"""Sparse-B times dense-A products, Slater matrices and their inverses.

The MO values C_n = A B_n (n = 1..5) are accumulated column by column from
the screened AO block.  Four loop organisations of the same product are
available; they differ only in floating-point summation order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .basis import SparseAoBlock, eval_ao_block

VARIANTS = ("naive", "unroll2_split32", "unroll4_split221", "blocked")
DEFAULT_VARIANT = "blocked"
DEFAULT_K_BLOCK = 128
PIVOT_TOL = 1e-30
ALIGN = 8


class ConfigurationError(ValueError):
    pass


class SingularMatrixError(ArithmeticError):
    pass


def _padded(n: int) -> int:
    return max(ALIGN, -(-n // ALIGN) * ALIGN)


@dataclass
class OpCounters:
    multiply_adds: int = 0
    elements_stored: int = 0
    columns_processed: int = 0

    def add(self, other: "OpCounters") -> None:
        self.multiply_adds += other.multiply_adds
        self.elements_stored += other.elements_stored
        self.columns_processed += other.columns_processed

    def snapshot(self) -> dict:
        return {
            "multiply_adds": self.multiply_adds,
            "elements_stored": self.elements_stored,
            "columns_processed": self.columns_processed,
        }


class MoCoefficients:
    """Dense MO coefficient matrix A (N_orb x N_basis).

    Stored Fortran ordered with the leading dimension padded with zero rows to
    a multiple of 8, so every column of A starts on an aligned boundary.
    """

    def __init__(self, coefficients, dtype=np.float32):
        a = np.asarray(coefficients, dtype=np.float64)
        if a.ndim != 2:
            raise ConfigurationError("MO coefficients must be a matrix")
        if not np.all(np.isfinite(a)):
            raise ConfigurationError("MO coefficients must be finite")
        self.n_orb, self.n_basis = a.shape
        self.data = np.zeros((_padded(self.n_orb), self.n_basis), dtype=dtype, order="F")
        self.data[: self.n_orb] = a

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def matrix(self) -> np.ndarray:
        return self.data[: self.n_orb]


@dataclass
class MoValueBlock:
    """C_1..C_5 for every MO at every electron; ``data[j, i, n]``."""

    n_orb: int
    data: np.ndarray

    @property
    def n_electrons(self) -> int:
        return self.data.shape[1]

    def c(self, n: int) -> np.ndarray:
        """C_{n+1} as an (N_orb, N) view; n=0 values, 1..3 gradients, 4 Laplacians."""
        return self.data[: self.n_orb, :, n]


# --- product kernels -------------------------------------------------------
# Loop bodies follow the Fortran listing: i over electrons, k over retained AOs,
# j (innermost, stride one in A and C) over molecular orbitals.


@numba.njit(cache=True)
def _product_naive(A, idx, nnz, B, C):
    n_orb = A.shape[0]
    for i in range(nnz.shape[0]):
        for k in range(nnz[i]):
            a = idx[k, i]
            b1 = B[0, k, i]
            b2 = B[1, k, i]
            b3 = B[2, k, i]
            b4 = B[3, k, i]
            b5 = B[4, k, i]
            for j in range(n_orb):
                aj = A[j, a]
                C[j, i, 0] += aj * b1
                C[j, i, 1] += aj * b2
                C[j, i, 2] += aj * b3
                C[j, i, 3] += aj * b4
                C[j, i, 4] += aj * b5


@numba.njit(cache=True)
def _product_unroll2_split32(A, idx, nnz, B, C):
    n_orb = A.shape[0]
    for i in range(nnz.shape[0]):
        m = nnz[i]
        k = 0
        while k + 1 < m:
            a0 = idx[k, i]
            a1 = idx[k + 1, i]
            for j in range(n_orb):
                x0 = A[j, a0]
                x1 = A[j, a1]
                C[j, i, 0] += x0 * B[0, k, i] + x1 * B[0, k + 1, i]
                C[j, i, 1] += x0 * B[1, k, i] + x1 * B[1, k + 1, i]
                C[j, i, 2] += x0 * B[2, k, i] + x1 * B[2, k + 1, i]
            for j in range(n_orb):
                x0 = A[j, a0]
                x1 = A[j, a1]
                C[j, i, 3] += x0 * B[3, k, i] + x1 * B[3, k + 1, i]
                C[j, i, 4] += x0 * B[4, k, i] + x1 * B[4, k + 1, i]
            k += 2
        if k < m:
            a0 = idx[k, i]
            for j in range(n_orb):
                x0 = A[j, a0]
                C[j, i, 0] += x0 * B[0, k, i]
                C[j, i, 1] += x0 * B[1, k, i]
                C[j, i, 2] += x0 * B[2, k, i]
            for j in range(n_orb):
                x0 = A[j, a0]
                C[j, i, 3] += x0 * B[3, k, i]
                C[j, i, 4] += x0 * B[4, k, i]


@numba.njit(cache=True)
def _unroll4_column(A, idx, B, C, i, k_begin, k_end):
    n_orb = A.shape[0]
    k = k_begin
    while k + 3 < k_end:
        a0 = idx[k, i]
        a1 = idx[k + 1, i]
        a2 = idx[k + 2, i]
        a3 = idx[k + 3, i]
        for j in range(n_orb):
            x0 = A[j, a0]
            x1 = A[j, a1]
            x2 = A[j, a2]
            x3 = A[j, a3]
            C[j, i, 0] += x0 * B[0, k, i] + x1 * B[0, k + 1, i] + x2 * B[0, k + 2, i] + x3 * B[0, k + 3, i]
            C[j, i, 1] += x0 * B[1, k, i] + x1 * B[1, k + 1, i] + x2 * B[1, k + 2, i] + x3 * B[1, k + 3, i]
        for j in range(n_orb):
            x0 = A[j, a0]
            x1 = A[j, a1]
            x2 = A[j, a2]
            x3 = A[j, a3]
            C[j, i, 2] += x0 * B[2, k, i] + x1 * B[2, k + 1, i] + x2 * B[2, k + 2, i] + x3 * B[2, k + 3, i]
            C[j, i, 3] += x0 * B[3, k, i] + x1 * B[3, k + 1, i] + x2 * B[3, k + 2, i] + x3 * B[3, k + 3, i]
        for j in range(n_orb):
            C[j, i, 4] += (A[j, a0] * B[4, k, i] + A[j, a1] * B[4, k + 1, i]
                           + A[j, a2] * B[4, k + 2, i] + A[j, a3] * B[4, k + 3, i])
        k += 4
    while k < k_end:
        a0 = idx[k, i]
        for j in range(n_orb):
            x0 = A[j, a0]
            C[j, i, 0] += x0 * B[0, k, i]
            C[j, i, 1] += x0 * B[1, k, i]
        for j in range(n_orb):
            x0 = A[j, a0]
            C[j, i, 2] += x0 * B[2, k, i]
            C[j, i, 3] += x0 * B[3, k, i]
        for j in range(n_orb):
            C[j, i, 4] += A[j, a0] * B[4, k, i]
        k += 1


@numba.njit(cache=True)
def _product_unroll4_split221(A, idx, nnz, B, C):
    for i in range(nnz.shape[0]):
        _unroll4_column(A, idx, B, C, i, 0, nnz[i])


@numba.njit(cache=True)
def _product_blocked(A, idx, nnz, B, C, kb):
    n = nnz.shape[0]
    kmax = 0
    for i in range(n):
        if nnz[i] > kmax:
            kmax = nnz[i]
    keys = np.empty(n, dtype=np.int64)
    for k0 in range(0, kmax, kb):
        # electrons reaching this k-block, sorted by their first AO index in it
        m = 0
        for i in range(n):
            if nnz[i] > k0:
                keys[m] = np.int64(idx[k0, i]) * n + i
                m += 1
        order = np.sort(keys[:m])
        for t in range(m):
            i = order[t] % n
            _unroll4_column(A, idx, B, C, i, k0, min(k0 + kb, nnz[i]))


def product_sparse(A: MoCoefficients, block: SparseAoBlock, variant: str = DEFAULT_VARIANT,
                   counters: OpCounters | None = None, k_block: int = DEFAULT_K_BLOCK) -> MoValueBlock:
    """C_n(j, i) = sum_k A(j, indices(k, i)) B_n(k, i) for n = 1..5."""
    if A.n_basis != block.n_basis:
        raise ConfigurationError(
            f"A has {A.n_basis} columns but the AO block has {block.n_basis} basis functions")
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown product variant {variant!r}")
    dtype = A.dtype
    vals = block.values if block.values.dtype == dtype else np.asfortranarray(block.values, dtype=dtype)
    n = block.n_electrons
    C = np.zeros((A.data.shape[0], n, 5), dtype=dtype, order="F")
    if n:
        if variant == "naive":
            _product_naive(A.data, block.indices, block.nnz, vals, C)
        elif variant == "unroll2_split32":
            _product_unroll2_split32(A.data, block.indices, block.nnz, vals, C)
        elif variant == "unroll4_split221":
            _product_unroll4_split221(A.data, block.indices, block.nnz, vals, C)
        else:
            _product_blocked(A.data, block.indices, block.nnz, vals, C, int(k_block))
    if counters is not None:
        counters.multiply_adds += 5 * A.n_orb * int(block.nnz.sum())
        counters.elements_stored += 5 * A.n_orb * n
        counters.columns_processed += n
    return MoValueBlock(A.n_orb, C)


# --- LU inversion ------------------------------------------------------------


@numba.njit(cache=True)
def _lu_inverse_batch(D, tol, inv, sign, logdet, singular, min_pivot):
    nb = D.shape[0]
    n = D.shape[1]
    for w in range(nb):
        a = D[w].copy()
        perm = np.arange(n)
        s = 1.0
        ld = 0.0
        mp = np.inf
        bad = False
        for k in range(n):
            p = k
            best = abs(a[k, k])
            for r in range(k + 1, n):
                if abs(a[r, k]) > best:
                    best = abs(a[r, k])
                    p = r
            if best < mp:
                mp = best
            if best < tol:
                bad = True
                break
            if p != k:
                for c in range(n):
                    tmp = a[k, c]
                    a[k, c] = a[p, c]
                    a[p, c] = tmp
                tp = perm[k]
                perm[k] = perm[p]
                perm[p] = tp
                s = -s
            piv = a[k, k]
            if piv < 0:
                s = -s
            ld += np.log(abs(piv))
            for r in range(k + 1, n):
                f = a[r, k] / piv
                a[r, k] = f
                if f != 0.0:
                    for c in range(k + 1, n):
                        a[r, c] -= f * a[k, c]
        min_pivot[w] = mp
        if bad:
            singular[w] = True
            sign[w] = 0.0
            logdet[w] = -np.inf
            inv[w, :, :] = np.nan
            continue
        singular[w] = False
        sign[w] = s
        logdet[w] = ld
        # X = U^-1 L^-1 P, row operations on the permuted identity
        X = np.zeros((n, n))
        for r in range(n):
            X[r, perm[r]] = 1.0
        for k in range(n):
            for r in range(k + 1, n):
                f = a[r, k]
                if f != 0.0:
                    for c in range(n):
                        X[r, c] -= f * X[k, c]
        for k in range(n - 1, -1, -1):
            for r in range(k + 1, n):
                f = a[k, r]
                if f != 0.0:
                    for c in range(n):
                        X[k, c] -= f * X[r, c]
            piv = a[k, k]
            for c in range(n):
                X[k, c] /= piv
        inv[w] = X


@dataclass
class LuResult:
    inverse: np.ndarray
    sign: np.ndarray
    logdet: np.ndarray
    singular: np.ndarray
    min_pivot: np.ndarray


def lu_inverse(D, tol: float = PIVOT_TOL) -> LuResult:
    """Inverse, det sign and log|det| of a stack (W, n, n) by partially pivoted LU."""
    D = np.ascontiguousarray(D, dtype=np.float64)
    squeeze = D.ndim == 2
    if squeeze:
        D = D[None]
    nb, n = D.shape[0], D.shape[1]
    inv = np.empty_like(D)
    sign = np.ones(nb)
    logdet = np.zeros(nb)
    singular = np.zeros(nb, dtype=np.bool_)
    min_pivot = np.full(nb, np.inf)
    if n:
        _lu_inverse_batch(D, tol, inv, sign, logdet, singular, min_pivot)
    if squeeze:
        return LuResult(inv[0], sign[0], logdet[0], singular[0], min_pivot[0])
    return LuResult(inv, sign, logdet, singular, min_pivot)


def inversion_flops(n: int) -> float:
    """Leading-order LU factorisation cost, (2/3) n^3."""
    return 2.0 * float(n) ** 3 / 3.0


@dataclass
class SlaterState:
    """One determinant factor for a stack of W configurations.

    ``d[w]`` is the Slater matrix D_ij = phi_i(r_j) (orbitals x electrons),
    ``grad[w, l]`` and ``lap[w]`` are the matching derivative matrices.
    """

    orbitals: tuple[int, ...]
    electrons: range
    d: np.ndarray
    grad: np.ndarray
    lap: np.ndarray
    inverse: np.ndarray
    sign: np.ndarray
    logdet: np.ndarray
    singular: np.ndarray
    min_pivot: np.ndarray
    residual: np.ndarray = field(default=None)

    @property
    def size(self) -> int:
        return len(self.orbitals)


def build_slater(cblock: MoValueBlock, orbital_subset, electron_range, n_walkers: int = 1,
                 check_residual: bool = False) -> SlaterState:
    """Assemble D from C_1 rows in ``orbital_subset`` and invert it in float64.

    Columns of ``cblock`` are walker-major: electron ``e`` of walker ``w`` sits
    at column ``w * n_per_walker + e``.
    """
    orbitals = tuple(int(o) for o in orbital_subset)
    electrons = range(electron_range.start, electron_range.stop) if isinstance(electron_range, range) \
        else range(*electron_range)
    if len(orbitals) != len(electrons):
        raise ConfigurationError("orbital subset and electron range sizes differ")
    n_per = cblock.n_electrons // n_walkers
    if n_per * n_walkers != cblock.n_electrons:
        raise ConfigurationError("column count is not a multiple of the walker count")
    n = len(orbitals)
    cols = (np.arange(n_walkers)[:, None] * n_per + np.asarray(electrons, dtype=np.int64)[None, :])
    orb = np.asarray(orbitals, dtype=np.int64)
    data = cblock.data[: cblock.n_orb]
    # (W, n_orb_subset, n_el, 5) gathered then widened
    sub = data[orb[:, None, None], cols[None, :, :], :].astype(np.float64)
    sub = np.moveaxis(sub, 1, 0)
    d = np.ascontiguousarray(sub[..., 0])
    grad = np.ascontiguousarray(np.moveaxis(sub[..., 1:4], -1, 1))
    lap = np.ascontiguousarray(sub[..., 4])
    lu = lu_inverse(d)
    state = SlaterState(orbitals, electrons, d, grad, lap, lu.inverse, lu.sign, lu.logdet,
                        lu.singular, lu.min_pivot)
    if check_residual:
        eye = np.eye(n)
        state.residual = np.abs(d @ lu.inverse - eye).max(axis=(1, 2)) if n else np.zeros(n_walkers)
    return state


def det_ratios(state: SlaterState, allow_singular: bool = False):
    """Gradient and Laplacian of Det divided by Det, per electron of the factor.

    Returns ``grad (W, 3, n)`` and ``lap (W, n)``:
    grad[l, i] = sum_j D1_l[j, i] Dinv[i, j], lap[i] = sum_j D2[j, i] Dinv[i, j].
    """
    if state.singular.any() and not allow_singular:
        raise SingularMatrixError("Slater matrix is singular")
    grad = np.einsum("wlji,wij->wli", state.grad, state.inverse)
    lap = np.einsum("wji,wij->wi", state.lap, state.inverse)
    return grad, lap


# --- scaling probe -----------------------------------------------------------


def fit_exponent(sizes, values) -> float:
    """Least-squares slope of log(values) against log(sizes)."""
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def scaling_probe(sizes, family: str = "chain", variant: str = DEFAULT_VARIANT, seed: int = 0,
                  time_kernels: bool = False) -> list[dict]:
    """Operation counts of the AO->MO product and the inversion along a system family.

    ``chain``: one hydrogen-like centre per electron on a line, so the number
    of AOs seen by each electron stays bounded.  ``dense``: no screening can
    apply (all electrons near a compact cluster).
    """
    import time

    from .systems import synthetic_family

    rows = []
    rng = np.random.default_rng(seed)
    for n in sizes:
        basis, R = synthetic_family(family, int(n), rng)
        block = eval_ao_block(basis, R)
        A = MoCoefficients(rng.standard_normal((int(n), basis.n_basis)))
        counters = OpCounters()
        t0 = time.perf_counter()
        product_sparse(A, block, variant, counters)
        t1 = time.perf_counter()
        row = {
            "N": int(n),
            "n_basis": basis.n_basis,
            "mean_nnz": float(block.nnz.mean()),
            "multiply_adds": counters.multiply_adds,
            "inversion_flops": inversion_flops(int(n)),
        }
        if time_kernels:
            row["product_seconds"] = t1 - t0
        rows.append(row)
    return rows

