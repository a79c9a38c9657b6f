"""Ready-made test systems and synthetic families for kernel probes."""
from __future__ import annotations

import math

import numpy as np

from .basis import AtomicBasis, GaussianShell
from .wavefunction import (DeterminantExpansion, DeterminantTerm, Hamiltonian, JastrowParams, Nucleus,
                           WavefunctionSpec)

# STO-3G hydrogen 1s (zeta = 1.24)
STO3G_H_EXPONENTS = (3.42525091, 0.62391373, 0.16885540)
STO3G_H_COEFFICIENTS = (0.15432897, 0.53532814, 0.44463454)


def normalized_s(exponents, coefficients):
    """Fold primitive s normalization (2a/pi)^(3/4) into the contraction coefficients."""
    return tuple(c * (2.0 * a / math.pi) ** 0.75 for a, c in zip(exponents, coefficients))


def hydrogen_atom(jastrow: JastrowParams | None = None) -> WavefunctionSpec:
    """One electron around a proton, STO-3G 1s trial."""
    nuc = Nucleus("H", 1.0, (0.0, 0.0, 0.0))
    shell = GaussianShell.from_l(nuc.position, 0, normalized_s(STO3G_H_EXPONENTS, STO3G_H_COEFFICIENTS),
                                 STO3G_H_EXPONENTS)
    basis = AtomicBasis([nuc.position], [[shell]])
    H = Hamiltonian("molecular", charges=[1.0], positions=[nuc.position])
    return WavefunctionSpec([nuc], basis, np.ones((1, 1)), DeterminantExpansion([DeterminantTerm(1.0, (0,), ())]),
                            1, 0, jastrow or JastrowParams(), H)


def harmonic_oscillator(omega: float = 1.0, n_up: int = 1, n_down: int = 0) -> WavefunctionSpec:
    """Non-interacting electrons in 0.5 w^2 r^2 with the exact ground-state trial.

    Orbitals are exp(-w r^2 / 2) and x, y, z times it, so up to four electrons
    per spin fit; the exact energy is ``harmonic_energy(omega, n_up, n_down)``.
    """
    if not (0 <= n_up <= 4 and 0 <= n_down <= 4 and n_up + n_down >= 1):
        raise ValueError("harmonic test system holds 1..4 electrons per spin")
    nuc = Nucleus("X", 0.0, (0.0, 0.0, 0.0))
    g = 0.5 * omega
    shells = [GaussianShell.from_l(nuc.position, 0, [1.0], [g]), GaussianShell.from_l(nuc.position, 1, [1.0], [g])]
    basis = AtomicBasis([nuc.position], [shells])
    mo = np.eye(4)
    term = DeterminantTerm(1.0, tuple(range(n_up)), tuple(range(n_down)))
    H = Hamiltonian("harmonic", omega)
    return WavefunctionSpec([nuc], basis, mo, DeterminantExpansion([term]), n_up, n_down, JastrowParams(), H)


def harmonic_energy(omega: float, n_up: int, n_down: int) -> float:
    levels = [1.5, 2.5, 2.5, 2.5]
    return omega * (sum(levels[:n_up]) + sum(levels[:n_down]))


def random_molecule(rng: np.random.Generator, n_nuclei: int = 3, n_up: int = 3, n_down: int = 2,
                    n_orb: int | None = None, n_det: int = 1, jastrow: bool = False,
                    max_l: int = 2) -> WavefunctionSpec:
    """Random compact molecule with s..max_l shells, random MOs and expansion."""
    symbols = ["A", "B", "C"]
    nuclei = []
    shells = []
    for a in range(n_nuclei):
        pos = tuple(rng.uniform(-1.5, 1.5, 3))
        sym = symbols[a % len(symbols)]
        nuclei.append(Nucleus(sym, float(rng.integers(1, 4)), pos))
        sh = []
        for l in range(max_l + 1):
            k = int(rng.integers(1, 3))
            sh.append(GaussianShell.from_l(pos, l, rng.uniform(0.5, 1.5, k), rng.uniform(0.2, 1.5, k)))
        shells.append(sh)
    basis = AtomicBasis([n.position for n in nuclei], shells)
    n_orb = n_orb or max(n_up, n_down) + 3
    mo = rng.standard_normal((n_orb, basis.n_basis))
    terms = []
    for k in range(n_det):
        up = tuple(sorted(rng.choice(n_orb, n_up, replace=False))) if k else tuple(range(n_up))
        down = tuple(sorted(rng.choice(n_orb, n_down, replace=False))) if k else tuple(range(n_down))
        terms.append(DeterminantTerm(float(rng.uniform(0.2, 1.0) * (1 if k == 0 else rng.choice([-1, 1]))),
                                     tuple(int(o) for o in up), tuple(int(o) for o in down)))
    jp = JastrowParams()
    if jastrow:
        jp = JastrowParams(True, 0.5, float(rng.uniform(0.5, 2.0)),
                           {s: (float(rng.uniform(0.1, 1.0)), float(rng.uniform(0.5, 2.0))) for s in symbols[:n_nuclei]})
    H = Hamiltonian("molecular", charges=[n.charge for n in nuclei], positions=[n.position for n in nuclei])
    return WavefunctionSpec(nuclei, basis, mo, DeterminantExpansion(terms), n_up, n_down, jp, H)


def synthetic_family(family: str, n: int, rng: np.random.Generator, spacing: float = 3.0):
    """Basis and electron positions of size ``n`` for scaling probes.

    ``chain``: n identical centres on a ring of constant spacing with one
    electron near each, so the AO count seen per electron does not depend on n.
    ``dense``: the same centres packed into a unit cube, so nothing is screened.
    """
    exps, coefs = (1.2, 0.35), (0.6, 0.4)
    if family == "chain":
        radius = n * spacing / (2.0 * math.pi)
        phi = 2.0 * math.pi * np.arange(n) / n
        centers = np.stack([radius * np.cos(phi), radius * np.sin(phi), np.zeros(n)], axis=1)
    elif family == "dense":
        centers = rng.uniform(0.0, 1.0, (n, 3))
    else:
        raise ValueError(f"unknown system family {family!r}")
    shells = [[GaussianShell.from_l(c, 0, coefs, exps), GaussianShell.from_l(c, 1, [1.0], [0.8])] for c in centers]
    basis = AtomicBasis(centers, shells)
    R = centers + rng.normal(scale=0.2, size=centers.shape)
    return basis, R
