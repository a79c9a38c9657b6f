"""Trial wavefunction exp(J) * sum_K c_K Det_up_K Det_down_K and local energy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import AtomicBasis, eval_ao_block
from .slater import (DEFAULT_K_BLOCK, DEFAULT_VARIANT, MoCoefficients, OpCounters, SlaterState,
                     build_slater, det_ratios, product_sparse)

PRECISIONS = {"mixed": np.float32, "double": np.float64}


@dataclass(frozen=True)
class Nucleus:
    symbol: str
    charge: float
    position: tuple[float, float, float]


@dataclass(frozen=True)
class DeterminantTerm:
    coefficient: float
    up: tuple[int, ...]
    down: tuple[int, ...]


@dataclass
class DeterminantExpansion:
    """Determinant terms; orbital indices are 0-based here (1-based on file)."""

    terms: list[DeterminantTerm]

    def check(self, n_orb: int, n_up: int, n_down: int) -> None:
        if not self.terms:
            raise ValueError("determinant expansion has no terms")
        for t, term in enumerate(self.terms, 1):
            for spin, orbs, n in (("up", term.up, n_up), ("down", term.down, n_down)):
                if len(orbs) != n:
                    raise ValueError(f"term {t}: {len(orbs)} {spin} orbitals for {n} {spin} electrons")
                if len(set(orbs)) != len(orbs):
                    raise ValueError(f"term {t}: repeated {spin} orbital")
                for o in orbs:
                    if not 0 <= o < n_orb:
                        raise ValueError(f"term {t}: orbital {o + 1} outside 1..{n_orb}")


@dataclass
class JastrowParams:
    """Pade two-body factor.

    U_ee(r) = a_ee r / (1 + b_ee r) summed over electron pairs and
    U_en(r) = -a r / (1 + b r) summed over electrons and nuclei, with (a, b)
    looked up by nucleus symbol.
    """

    enabled: bool = False
    a_ee: float = 0.0
    b_ee: float = 1.0
    en: dict[str, tuple[float, float]] = field(default_factory=dict)

    def check(self) -> None:
        if not self.enabled:
            return
        if not self.b_ee > 0:
            raise ValueError("jastrow b_ee must be positive")
        for sym, (_, b) in self.en.items():
            if not b > 0:
                raise ValueError(f"jastrow b_en for {sym} must be positive")


@dataclass
class Hamiltonian:
    kind: str = "molecular"
    omega: float = 1.0
    charges: np.ndarray = field(default_factory=lambda: np.zeros(0))
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.charges = np.asarray(self.charges, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if self.kind == "molecular":
            if len(self.charges) < 1:
                raise ValueError("molecular Hamiltonian needs at least one nucleus")
        elif self.kind == "harmonic":
            if not self.omega > 0:
                raise ValueError("harmonic omega must be positive")
        else:
            raise ValueError(f"unknown Hamiltonian kind {self.kind!r}")

    @property
    def nuclear_repulsion(self) -> float:
        if self.kind != "molecular":
            return 0.0
        e = 0.0
        for a in range(len(self.charges)):
            for b in range(a):
                e += self.charges[a] * self.charges[b] / np.linalg.norm(self.positions[a] - self.positions[b])
        return float(e)


@dataclass
class WavefunctionSpec:
    nuclei: list[Nucleus]
    basis: AtomicBasis
    mo: np.ndarray
    expansion: DeterminantExpansion
    n_up: int
    n_down: int
    jastrow: JastrowParams = field(default_factory=JastrowParams)
    hamiltonian: Hamiltonian | None = None

    @property
    def n_electrons(self) -> int:
        return self.n_up + self.n_down

    @property
    def n_orb(self) -> int:
        return self.mo.shape[0]

    def check(self) -> None:
        """Raise ValueError naming the first failing consistency constraint."""
        if self.n_up < 0 or self.n_down < 0 or self.n_electrons < 1:
            raise ValueError("need at least one electron")
        if self.mo.ndim != 2:
            raise ValueError("MO block must be a matrix")
        if self.mo.shape[1] != self.basis.n_basis:
            raise ValueError(f"MO block has {self.mo.shape[1]} columns, basis has {self.basis.n_basis} functions")
        if not np.all(np.isfinite(self.mo)):
            raise ValueError("MO coefficients must be finite")
        self.expansion.check(self.n_orb, self.n_up, self.n_down)
        self.jastrow.check()


def jastrow_terms(params: JastrowParams, R, nuclei_positions=None, nuclei_symbols=()):
    """J, grad J (per electron) and Laplacian of J for configurations R (W, N, 3)."""
    R = np.asarray(R, dtype=np.float64)
    if R.ndim == 2:
        R = R[None]
    W, N, _ = R.shape
    J = np.zeros(W)
    grad = np.zeros((W, N, 3))
    lap = np.zeros((W, N))
    if not params.enabled:
        return J, grad, lap
    if N > 1 and params.a_ee != 0.0:
        d = R[:, :, None, :] - R[:, None, :, :]
        r = np.sqrt(np.einsum("wijk,wijk->wij", d, d))
        off = ~np.eye(N, dtype=bool)
        u, du, d2u = _pade(r, params.a_ee, params.b_ee)
        J += 0.5 * np.where(off, u, 0.0).sum(axis=(1, 2))
        inv_r = np.divide(1.0, r, out=np.zeros_like(r), where=(r > 0) & off)
        grad += np.einsum("wij,wijk->wik", du * inv_r, d)
        lap += np.where(off, d2u + 2.0 * du * inv_r, 0.0).sum(axis=2)
    if nuclei_positions is not None and len(nuclei_positions):
        Q = np.asarray(nuclei_positions, dtype=np.float64).reshape(-1, 3)
        for a, sym in enumerate(nuclei_symbols):
            if sym not in params.en:
                continue
            ea, eb = params.en[sym]
            d = R - Q[a]
            r = np.sqrt(np.einsum("wik,wik->wi", d, d))
            u, du, d2u = _pade(r, -ea, eb)
            inv_r = np.divide(1.0, r, out=np.zeros_like(r), where=r > 0)
            J += u.sum(axis=1)
            grad += (du * inv_r)[..., None] * d
            lap += d2u + 2.0 * du * inv_r
    return J, grad, lap


def _pade(r, a, b):
    den = 1.0 + b * r
    return a * r / den, a / den**2, -2.0 * a * b / den**3


def local_potential(H: Hamiltonian, R) -> np.ndarray:
    """Potential energy per configuration; +inf on coincident charged points."""
    R = np.asarray(R, dtype=np.float64)
    if R.ndim == 2:
        R = R[None]
    W, N, _ = R.shape
    if H.kind == "harmonic":
        return 0.5 * H.omega**2 * np.einsum("wik,wik->w", R, R)
    with np.errstate(divide="ignore"):
        v = np.full(W, H.nuclear_repulsion)
        if N > 1:
            d = R[:, :, None, :] - R[:, None, :, :]
            r = np.sqrt(np.einsum("wijk,wijk->wij", d, d))
            iu = np.triu_indices(N, 1)
            v += (1.0 / r[:, iu[0], iu[1]]).sum(axis=1)
        for a in range(len(H.charges)):
            if H.charges[a] == 0.0:
                continue
            d = R - H.positions[a]
            r = np.sqrt(np.einsum("wik,wik->wi", d, d))
            v -= (H.charges[a] / r).sum(axis=1)
    return v


@dataclass
class PsiState:
    """Wavefunction data for W configurations (leading axis)."""

    R: np.ndarray
    log_psi: np.ndarray
    sign: np.ndarray
    drift: np.ndarray
    local_energy: np.ndarray
    node: np.ndarray
    kinetic: np.ndarray
    potential: np.ndarray
    jastrow: np.ndarray
    det_grad: np.ndarray
    det_lap: np.ndarray
    slater: dict = field(default_factory=dict, repr=False)

    @property
    def n_walkers(self) -> int:
        return len(self.log_psi)

    _ARRAYS = ("R", "log_psi", "sign", "drift", "local_energy", "node", "kinetic", "potential",
               "jastrow", "det_grad", "det_lap")

    def take(self, idx) -> "PsiState":
        return PsiState(**{k: getattr(self, k)[idx] for k in self._ARRAYS})

    def where(self, mask, other: "PsiState") -> "PsiState":
        """Entries of ``other`` where ``mask`` is true, of ``self`` elsewhere."""
        out = {}
        for k in self._ARRAYS:
            a, b = getattr(self, k), getattr(other, k)
            m = mask.reshape(mask.shape + (1,) * (a.ndim - 1))
            out[k] = np.where(m, b, a)
        return PsiState(**out)


def _empty_factor(W: int) -> SlaterState:
    z = np.zeros((W, 0, 0))
    return SlaterState((), range(0), z, np.zeros((W, 3, 0, 0)), z, z, np.ones(W), np.zeros(W),
                       np.zeros(W, dtype=bool), np.full(W, np.inf))


class TrialWavefunction:
    """Evaluator bound to one spec and Hamiltonian.

    ``precision`` selects float32 storage of B and C ("mixed") or float64
    throughout ("double").  Slater inversion and everything downstream is
    float64 either way.
    """

    def __init__(self, spec: WavefunctionSpec, hamiltonian: Hamiltonian | None = None,
                 precision: str = "mixed", variant: str = DEFAULT_VARIANT, k_block: int = DEFAULT_K_BLOCK):
        if precision not in PRECISIONS:
            raise ValueError(f"unknown precision {precision!r}")
        self.spec = spec
        self.hamiltonian = hamiltonian or spec.hamiltonian
        if self.hamiltonian is None:
            raise ValueError("no Hamiltonian given")
        self.precision = precision
        self.dtype = PRECISIONS[precision]
        self.variant = variant
        self.k_block = k_block
        self.counters = OpCounters()
        self.A = MoCoefficients(spec.mo, self.dtype)
        self._nuc_pos = np.array([n.position for n in spec.nuclei], dtype=float).reshape(-1, 3)
        self._nuc_sym = [n.symbol for n in spec.nuclei]
        self._up_sets = sorted({t.up for t in spec.expansion.terms})
        self._down_sets = sorted({t.down for t in spec.expansion.terms})

    def evaluate(self, R, keep_slater: bool = False) -> PsiState:
        spec = self.spec
        R = np.asarray(R, dtype=np.float64)
        R = R.reshape(-1, spec.n_electrons, 3)
        W, N = R.shape[0], spec.n_electrons
        nu = spec.n_up

        block = eval_ao_block(spec.basis, R.reshape(-1, 3), self.dtype)
        cblock = product_sparse(self.A, block, self.variant, self.counters, self.k_block)

        factors = {}
        ratios = {}
        for spin, sets, rng in (("up", self._up_sets, range(0, nu)), ("down", self._down_sets, range(nu, N))):
            for orbs in sets:
                if not orbs:
                    factors[(spin, orbs)] = _empty_factor(W)
                    ratios[(spin, orbs)] = (np.zeros((W, 3, 0)), np.zeros((W, 0)))
                    continue
                st = build_slater(cblock, orbs, rng, W)
                factors[(spin, orbs)] = st
                g, lap = det_ratios(st, allow_singular=True)
                bad = st.singular
                g[bad] = 0.0
                lap[bad] = 0.0
                ratios[(spin, orbs)] = (g, lap)

        terms = spec.expansion.terms
        logs = np.empty((len(terms), W))
        sgn = np.empty((len(terms), W))
        sing = np.empty((len(terms), W), dtype=bool)
        for t, term in enumerate(terms):
            fu, fd = factors[("up", term.up)], factors[("down", term.down)]
            logs[t] = fu.logdet + fd.logdet
            sgn[t] = term.coefficient * fu.sign * fd.sign
            sing[t] = fu.singular | fd.singular
        masked = np.where(sing, -np.inf, logs)
        lmax = masked.max(axis=0)
        finite = np.isfinite(lmax)
        lref = np.where(finite, lmax, 0.0)
        tval = np.where(sing, 0.0, sgn * np.exp(np.where(sing, 0.0, logs - lref)))
        psi = tval.sum(axis=0)
        node = (~finite) | (psi == 0.0)
        safe_psi = np.where(node, 1.0, psi)
        omega = tval / safe_psi

        det_grad = np.zeros((W, N, 3))
        det_lap = np.zeros((W, N))
        for t, term in enumerate(terms):
            gu, lu = ratios[("up", term.up)]
            gd, ld = ratios[("down", term.down)]
            om = omega[t]
            det_grad[:, :nu] += om[:, None, None] * np.moveaxis(gu, 1, 2)
            det_grad[:, nu:] += om[:, None, None] * np.moveaxis(gd, 1, 2)
            det_lap[:, :nu] += om[:, None] * lu
            det_lap[:, nu:] += om[:, None] * ld

        J, gJ, lJ = jastrow_terms(spec.jastrow, R, self._nuc_pos, self._nuc_sym)
        drift = gJ + det_grad
        kin_i = lJ + np.einsum("wik,wik->wi", gJ, gJ) + 2.0 * np.einsum("wik,wik->wi", gJ, det_grad) + det_lap
        kinetic = -0.5 * kin_i.sum(axis=1)
        potential = local_potential(self.hamiltonian, R)
        e_loc = kinetic + potential
        node = node | ~np.isfinite(e_loc) | ~np.all(np.isfinite(drift), axis=(1, 2))
        with np.errstate(divide="ignore"):
            log_psi = lref + np.log(np.abs(safe_psi)) + J
        return PsiState(
            R=R,
            log_psi=np.where(node, -np.inf, log_psi),
            sign=np.where(node, 0.0, np.sign(psi)),
            drift=drift,
            local_energy=e_loc,
            node=node,
            kinetic=kinetic,
            potential=potential,
            jastrow=J,
            det_grad=det_grad,
            det_lap=det_lap,
            slater=factors if keep_slater else {},
        )


def evaluate(spec: WavefunctionSpec, H: Hamiltonian | None, R, precision: str = "mixed",
             variant: str = DEFAULT_VARIANT) -> PsiState:
    """One-shot evaluation; build a TrialWavefunction to reuse across steps."""
    return TrialWavefunction(spec, H, precision, variant).evaluate(R, keep_slater=True)
