"""Gaussian atomic orbitals with distance screening.

Every AO is ``(x-Qx)^nx (y-Qy)^ny (z-Qz)^nz * g(r)`` with the radial part
``g(r) = sum_k c_k exp(-gamma_k |r-Q|^2)``.  An AO is dropped for an electron
when ``|g| < epsilon`` at that electron, and every AO of a nucleus is dropped
when the electron lies beyond the nucleus radius.  The surviving values,
gradients and Laplacians form the five sparse matrices B1..B5.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numba
import numpy as np

MAX_L = 4
DEFAULT_EPSILON = 1e-8
RADIUS_TOL = 1e-3

SHELL_LETTERS = "spdfg"


def cartesian_triplets(l: int) -> list[tuple[int, int, int]]:
    """Cartesian powers of total degree ``l`` in (xx, xy, xz, yy, ...) order."""
    out = []
    for nx in range(l, -1, -1):
        for ny in range(l - nx, -1, -1):
            out.append((nx, ny, l - nx - ny))
    return out


@dataclass(frozen=True)
class GaussianShell:
    """Contracted Gaussian shell; one AO per angular triplet."""

    center: tuple[float, float, float]
    coefficients: tuple[float, ...]
    exponents: tuple[float, ...]
    powers: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if len(self.coefficients) == 0:
            raise ValueError("shell needs at least one primitive")
        if len(self.coefficients) != len(self.exponents):
            raise ValueError("coefficient/exponent count mismatch")
        if any(not g > 0 for g in self.exponents):
            raise ValueError("exponents must be positive")
        if len(self.powers) == 0:
            raise ValueError("shell needs at least one angular triplet")
        for n in self.powers:
            if len(n) != 3 or min(n) < 0 or sum(n) > MAX_L:
                raise ValueError(f"unsupported angular triplet {n}")

    @classmethod
    def from_l(cls, center, l, coefficients, exponents):
        return cls(
            tuple(float(x) for x in center),
            tuple(float(c) for c in coefficients),
            tuple(float(g) for g in exponents),
            tuple(cartesian_triplets(l)),
        )

    @property
    def n_ao(self) -> int:
        return len(self.powers)

    def envelope(self, r: float) -> float:
        return sum(abs(c) * math.exp(-g * r * r) for c, g in zip(self.coefficients, self.exponents))


def eval_radial(shell: GaussianShell, r, cutoff: float | None = None) -> float:
    """Radial part g(r) of ``shell`` at point ``r``.

    Returns exactly 0.0 beyond ``cutoff`` (the parent nucleus radius).  When
    no cutoff is given the shell's own radius at the default epsilon is used.
    """
    d = np.asarray(r, dtype=float) - np.asarray(shell.center)
    r2 = float(d @ d)
    if cutoff is None:
        cutoff = compute_atomic_radius([shell], DEFAULT_EPSILON)
    if r2 > cutoff * cutoff:
        return 0.0
    return float(sum(c * math.exp(-g * r2) for c, g in zip(shell.coefficients, shell.exponents)))


def compute_atomic_radius(shells, epsilon: float = DEFAULT_EPSILON, tol: float = RADIUS_TOL) -> float:
    """Distance beyond which the envelope sum_k |c_k| exp(-gamma_k r^2) of every
    shell stays below ``epsilon``.

    The envelope is monotone decreasing, so plain bisection applies.  The upper
    end of the final bracket is returned so screening stays conservative.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    radius = 0.0
    for shell in shells:
        if shell.envelope(0.0) < epsilon:
            continue
        lo, hi = 0.0, 1.0
        while shell.envelope(hi) >= epsilon:
            lo, hi = hi, 2.0 * hi
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if shell.envelope(mid) >= epsilon:
                lo = mid
            else:
                hi = mid
        radius = max(radius, hi)
    return radius


@dataclass
class AtomicBasis:
    """Shells grouped by nucleus, with one screening radius per nucleus."""

    centers: np.ndarray
    shells: list[list[GaussianShell]]
    epsilon: float = DEFAULT_EPSILON
    radii: np.ndarray = field(init=False)

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64).reshape(-1, 3)
        if len(self.shells) != len(self.centers):
            raise ValueError("one shell list per nucleus expected")
        self.radii = np.array([compute_atomic_radius(s, self.epsilon) for s in self.shells])
        if self.n_basis < 1:
            raise ValueError("basis has no functions")

    @property
    def n_nuclei(self) -> int:
        return len(self.centers)

    @property
    def n_basis(self) -> int:
        return sum(sh.n_ao for shells in self.shells for sh in shells)

    @cached_property
    def _flat(self):
        shell_center, prim_start, coef, expo, ao_start, powers = [], [0], [], [], [0], []
        nuc_start = [0]
        for shells in self.shells:
            for sh in shells:
                shell_center.append(sh.center)
                coef.extend(sh.coefficients)
                expo.extend(sh.exponents)
                prim_start.append(len(coef))
                powers.extend(sh.powers)
                ao_start.append(len(powers))
            nuc_start.append(len(shell_center))
        return (
            np.array(nuc_start, dtype=np.int64),
            np.array(shell_center, dtype=np.float64).reshape(-1, 3),
            np.array(prim_start, dtype=np.int64),
            np.array(coef, dtype=np.float64),
            np.array(expo, dtype=np.float64),
            np.array(ao_start, dtype=np.int64),
            np.array(powers, dtype=np.int64).reshape(-1, 3),
        )


@dataclass
class SparseAoBlock:
    """AO values/gradients/Laplacians for a set of electrons (columns).

    ``indices[k, i]`` is the k-th retained AO of electron ``i`` (ascending);
    ``values[n, k, i]`` holds B_{n+1}: n=0 value, 1..3 x/y/z gradient,
    4 Laplacian.  Both arrays are Fortran ordered so each electron column is
    contiguous.  Entries with ``k >= nnz[i]`` are padding.
    """

    n_basis: int
    nnz: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    @property
    def n_electrons(self) -> int:
        return len(self.nnz)

    @property
    def dtype(self):
        return self.values.dtype

    def dense(self) -> np.ndarray:
        """(5, n_basis, N) dense copy in float64."""
        out = np.zeros((5, self.n_basis, self.n_electrons))
        for i in range(self.n_electrons):
            k = self.nnz[i]
            out[:, self.indices[:k, i], i] = self.values[:, :k, i]
        return out

    @classmethod
    def from_dense(cls, dense: np.ndarray, mask: np.ndarray, dtype=np.float32) -> "SparseAoBlock":
        """Build a block from a dense (5, n_basis, N) array and a (n_basis, N) mask."""
        n_basis, n = mask.shape
        nnz = mask.sum(axis=0).astype(np.int32)
        kmax = max(int(nnz.max(initial=0)), 1)
        indices = np.zeros((kmax, n), dtype=np.int32, order="F")
        values = np.zeros((5, kmax, n), dtype=dtype, order="F")
        for i in range(n):
            rows = np.flatnonzero(mask[:, i])
            indices[: len(rows), i] = rows
            values[:, : len(rows), i] = dense[:, rows, i]
        return cls(n_basis, nnz, indices, values)


@numba.njit(cache=True)
def _axis_terms(u, n, gamma):
    # u^n, d/du, d2/du2 of u^n exp(-gamma u^2) divided by the exponential
    p0 = u**n
    p1 = -2.0 * gamma * u ** (n + 1)
    p2 = -2.0 * gamma * (2 * n + 1) * p0 + 4.0 * gamma * gamma * u ** (n + 2)
    if n >= 1:
        p1 += n * u ** (n - 1)
    if n >= 2:
        p2 += n * (n - 1) * u ** (n - 2)
    return p0, p1, p2


@numba.njit(cache=True)
def _ao_kernel(R, nuc_center, nuc_r2, nuc_start, shell_center, prim_start, coef, expo,
               ao_start, powers, eps, idx, vals, nnz):
    n_el = R.shape[0]
    n_nuc = nuc_center.shape[0]
    for i in range(n_el):
        k = 0
        for a in range(n_nuc):
            dx = R[i, 0] - nuc_center[a, 0]
            dy = R[i, 1] - nuc_center[a, 1]
            dz = R[i, 2] - nuc_center[a, 2]
            if dx * dx + dy * dy + dz * dz > nuc_r2[a]:
                continue
            for s in range(nuc_start[a], nuc_start[a + 1]):
                x = R[i, 0] - shell_center[s, 0]
                y = R[i, 1] - shell_center[s, 1]
                z = R[i, 2] - shell_center[s, 2]
                r2 = x * x + y * y + z * z
                g = 0.0
                for p in range(prim_start[s], prim_start[s + 1]):
                    g += coef[p] * np.exp(-expo[p] * r2)
                if abs(g) < eps:
                    continue
                for ao in range(ao_start[s], ao_start[s + 1]):
                    nx = powers[ao, 0]
                    ny = powers[ao, 1]
                    nz = powers[ao, 2]
                    v = 0.0
                    gx = 0.0
                    gy = 0.0
                    gz = 0.0
                    lap = 0.0
                    for p in range(prim_start[s], prim_start[s + 1]):
                        f = coef[p] * np.exp(-expo[p] * r2)
                        x0, x1, x2 = _axis_terms(x, nx, expo[p])
                        y0, y1, y2 = _axis_terms(y, ny, expo[p])
                        z0, z1, z2 = _axis_terms(z, nz, expo[p])
                        v += f * x0 * y0 * z0
                        gx += f * x1 * y0 * z0
                        gy += f * x0 * y1 * z0
                        gz += f * x0 * y0 * z1
                        lap += f * (x2 * y0 * z0 + x0 * y2 * z0 + x0 * y0 * z2)
                    idx[k, i] = ao
                    vals[0, k, i] = v
                    vals[1, k, i] = gx
                    vals[2, k, i] = gy
                    vals[3, k, i] = gz
                    vals[4, k, i] = lap
                    k += 1
        nnz[i] = k


def eval_ao_block(basis: AtomicBasis, R, dtype=np.float32) -> SparseAoBlock:
    """Screened AO values, gradients and Laplacians at every electron of R.

    ``R`` is (N, 3) or a flat 3N vector.  Arithmetic is float64; the result is
    narrowed to ``dtype`` (float32 unless the double-precision path is asked for).
    """
    R = np.ascontiguousarray(R, dtype=np.float64).reshape(-1, 3)
    n = len(R)
    nuc_start, shell_center, prim_start, coef, expo, ao_start, powers = basis._flat
    nb = basis.n_basis
    idx = np.zeros((nb, n), dtype=np.int32, order="F")
    vals = np.zeros((5, nb, n), dtype=np.float64, order="F")
    nnz = np.zeros(n, dtype=np.int32)
    _ao_kernel(R, basis.centers, basis.radii**2, nuc_start, shell_center, prim_start, coef,
               expo, ao_start, powers, basis.epsilon, idx, vals, nnz)
    kmax = max(int(nnz.max(initial=0)), 1)
    return SparseAoBlock(
        nb,
        nnz,
        np.asfortranarray(idx[:kmax]),
        np.asfortranarray(vals[:, :kmax], dtype=dtype),
    )


def eval_ao_dense(basis: AtomicBasis, R) -> np.ndarray:
    """Unscreened (5, n_basis, N) AO data in float64; reference path for tests."""
    R = np.asarray(R, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((5, basis.n_basis, len(R)))
    ao = 0
    for shells in basis.shells:
        for sh in shells:
            d = R - np.asarray(sh.center)
            r2 = np.einsum("ij,ij->i", d, d)
            for n in sh.powers:
                for c, g in zip(sh.coefficients, sh.exponents):
                    f = c * np.exp(-g * r2)
                    t = [_axis_terms_py(d[:, ax], n[ax], g) for ax in range(3)]
                    out[0, ao] += f * t[0][0] * t[1][0] * t[2][0]
                    out[1, ao] += f * t[0][1] * t[1][0] * t[2][0]
                    out[2, ao] += f * t[0][0] * t[1][1] * t[2][0]
                    out[3, ao] += f * t[0][0] * t[1][0] * t[2][1]
                    out[4, ao] += f * (t[0][2] * t[1][0] * t[2][0] + t[0][0] * t[1][2] * t[2][0]
                                       + t[0][0] * t[1][0] * t[2][2])
                ao += 1
    return out


def _axis_terms_py(u, n, gamma):
    p0 = u**n
    p1 = -2.0 * gamma * u ** (n + 1) + (n * u ** (n - 1) if n >= 1 else 0.0)
    p2 = -2.0 * gamma * (2 * n + 1) * p0 + 4.0 * gamma**2 * u ** (n + 2)
    if n >= 2:
        p2 = p2 + n * (n - 1) * u ** (n - 2)
    return p0, p1, p2


def radial_dense(basis: AtomicBasis, R) -> np.ndarray:
    """Unscreened |g| for every (AO, electron) pair, shape (n_basis, N)."""
    R = np.asarray(R, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((basis.n_basis, len(R)))
    ao = 0
    for shells in basis.shells:
        for sh in shells:
            d = R - np.asarray(sh.center)
            r2 = np.einsum("ij,ij->i", d, d)
            g = sum(c * np.exp(-e * r2) for c, e in zip(sh.coefficients, sh.exponents))
            out[ao:ao + sh.n_ao] = np.abs(g)
            ao += sh.n_ao
    return out


@dataclass
class SparsityStats:
    fraction_nonzero: float
    max_nnz_per_column: int
    mean_nnz: float
    columns: int = 0
    nonzeros: int = 0
    n_basis: int = 0

    def merge(self, other: "SparsityStats") -> "SparsityStats":
        if self.columns == 0:
            return other
        cols = self.columns + other.columns
        nz = self.nonzeros + other.nonzeros
        return SparsityStats(
            nz / (cols * self.n_basis),
            max(self.max_nnz_per_column, other.max_nnz_per_column),
            nz / cols,
            cols,
            nz,
            self.n_basis,
        )


def sparsity_stats(block: SparseAoBlock) -> SparsityStats:
    n = block.n_electrons
    total = int(block.nnz.sum())
    return SparsityStats(
        total / (n * block.n_basis) if n else 0.0,
        int(block.nnz.max(initial=0)),
        total / n if n else 0.0,
        n,
        total,
        block.n_basis,
    )
