"""Versioned text format for wavefunction files.

Layout (sections in this order, ``#`` starts a comment)::

    qmcdesk-wavefunction 1
    [electrons]
    up 1
    down 0
    [nuclei]
    H 1 0 0 0                      # symbol charge x y z (bohr)
    [basis]
    epsilon 1e-08                  # optional screening threshold
    shell 1 s                      # nucleus (1-based), l letter or nx,ny,nz;...
    0.27693435 3.42525091          # c_k gamma_k, one primitive per line
    [orbitals]
    size 1 1                       # N_orb N_basis
    1                              # one row of A per line
    [determinants]
    1 | 1 |                        # c_K | up orbitals (1-based) | down orbitals
    [jastrow]
    enabled no
    ee 0.5 1
    en H 1 1
    [hamiltonian]
    kind molecular                 # or: kind harmonic + omega <w>

``dump_wavefunction`` writes the canonical form: fixed section order,
single spaces, sorted Jastrow species and every real number as ``%.17g``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .basis import SHELL_LETTERS, AtomicBasis, GaussianShell, cartesian_triplets
from .wavefunction import (DeterminantExpansion, DeterminantTerm, Hamiltonian, JastrowParams, Nucleus,
                           WavefunctionSpec)

MAGIC = "qmcdesk-wavefunction"
VERSION = 1
SECTIONS = ("electrons", "nuclei", "basis", "orbitals", "determinants", "jastrow", "hamiltonian")


class WavefunctionFileError(ValueError):
    pass


def fmt(x: float) -> str:
    return "%.17g" % float(x)


def _tokens(text: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def parse_wavefunction(text: str) -> WavefunctionSpec:
    lines = list(_tokens(text))
    if not lines or lines[0][1].split()[:1] != [MAGIC]:
        raise WavefunctionFileError(f"missing '{MAGIC} <version>' header")
    head = lines[0][1].split()
    if len(head) != 2 or head[1] != str(VERSION):
        raise WavefunctionFileError(f"unsupported format version {' '.join(head[1:])!r}")
    sections: dict[str, list[tuple[int, str]]] = {}
    current = None
    for lineno, line in lines[1:]:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current not in SECTIONS:
                raise WavefunctionFileError(f"line {lineno}: unknown section [{current}]")
            if current in sections:
                raise WavefunctionFileError(f"line {lineno}: duplicate section [{current}]")
            sections[current] = []
        elif current is None:
            raise WavefunctionFileError(f"line {lineno}: content before first section")
        else:
            sections[current].append((lineno, line))
    for name in ("electrons", "nuclei", "basis", "orbitals", "determinants"):
        if name not in sections:
            raise WavefunctionFileError(f"missing section [{name}]")

    def num(tok, lineno, what):
        try:
            return float(tok)
        except ValueError:
            raise WavefunctionFileError(f"line {lineno}: {what} {tok!r} is not a number") from None

    def integer(tok, lineno, what):
        try:
            return int(tok)
        except ValueError:
            raise WavefunctionFileError(f"line {lineno}: {what} {tok!r} is not an integer") from None

    counts = {}
    for lineno, line in sections["electrons"]:
        parts = line.split()
        if len(parts) != 2 or parts[0] not in ("up", "down"):
            raise WavefunctionFileError(f"line {lineno}: expected 'up <n>' or 'down <n>'")
        counts[parts[0]] = integer(parts[1], lineno, "electron count")
    n_up, n_down = counts.get("up", 0), counts.get("down", 0)

    nuclei = []
    for lineno, line in sections["nuclei"]:
        parts = line.split()
        if len(parts) != 5:
            raise WavefunctionFileError(f"line {lineno}: expected 'symbol charge x y z'")
        pos = tuple(num(p, lineno, "coordinate") for p in parts[2:])
        nuclei.append(Nucleus(parts[0], num(parts[1], lineno, "charge"), pos))
    if not nuclei:
        raise WavefunctionFileError("no nuclei given (basis functions need centers)")

    epsilon = 1e-8
    shells: list[list[GaussianShell]] = [[] for _ in nuclei]
    pending = None

    def close(pending):
        if pending is None:
            return
        nuc, powers, prims, lineno = pending
        if not prims:
            raise WavefunctionFileError(f"line {lineno}: shell without primitives")
        try:
            shells[nuc].append(GaussianShell(nuclei[nuc].position, tuple(c for c, _ in prims),
                                             tuple(g for _, g in prims), tuple(powers)))
        except ValueError as exc:
            raise WavefunctionFileError(f"line {lineno}: {exc}") from None

    for lineno, line in sections["basis"]:
        parts = line.split()
        if parts[0] == "epsilon":
            epsilon = num(parts[1], lineno, "epsilon")
            if not epsilon > 0:
                raise WavefunctionFileError(f"line {lineno}: epsilon must be positive")
        elif parts[0] == "shell":
            close(pending)
            if len(parts) != 3:
                raise WavefunctionFileError(f"line {lineno}: expected 'shell <nucleus> <angular>'")
            nuc = integer(parts[1], lineno, "nucleus index") - 1
            if not 0 <= nuc < len(nuclei):
                raise WavefunctionFileError(f"line {lineno}: shell on nucleus {nuc + 1} outside 1..{len(nuclei)}")
            pending = (nuc, _parse_powers(parts[2], lineno), [], lineno)
        else:
            if pending is None or len(parts) != 2:
                raise WavefunctionFileError(f"line {lineno}: expected primitive 'c gamma' inside a shell")
            pending[2].append((num(parts[0], lineno, "coefficient"), num(parts[1], lineno, "exponent")))
    close(pending)
    try:
        basis = AtomicBasis(np.array([n.position for n in nuclei]), shells, epsilon)
    except ValueError as exc:
        raise WavefunctionFileError(str(exc)) from None

    orb_lines = sections["orbitals"]
    if not orb_lines or orb_lines[0][1].split()[0] != "size":
        raise WavefunctionFileError("[orbitals] must start with 'size <n_orb> <n_basis>'")
    lineno, line = orb_lines[0]
    parts = line.split()
    n_orb, n_basis = integer(parts[1], lineno, "n_orb"), integer(parts[2], lineno, "n_basis")
    if n_basis != basis.n_basis:
        raise WavefunctionFileError(
            f"line {lineno}: orbitals declare {n_basis} basis functions, basis defines {basis.n_basis}")
    rows = orb_lines[1:]
    if len(rows) != n_orb:
        raise WavefunctionFileError(f"[orbitals] has {len(rows)} rows, size says {n_orb}")
    mo = np.zeros((n_orb, n_basis))
    for r, (lineno, line) in enumerate(rows):
        vals = line.split()
        if len(vals) != n_basis:
            raise WavefunctionFileError(f"line {lineno}: {len(vals)} coefficients, expected {n_basis}")
        mo[r] = [num(v, lineno, "coefficient") for v in vals]

    terms = []
    for lineno, line in sections["determinants"]:
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 3:
            raise WavefunctionFileError(f"line {lineno}: expected 'c | up orbitals | down orbitals'")
        c = num(parts[0], lineno, "determinant coefficient")
        up = tuple(integer(t, lineno, "orbital index") - 1 for t in parts[1].split())
        down = tuple(integer(t, lineno, "orbital index") - 1 for t in parts[2].split())
        terms.append(DeterminantTerm(c, up, down))

    jastrow = JastrowParams()
    for lineno, line in sections.get("jastrow", []):
        parts = line.split()
        if parts[0] == "enabled" and len(parts) == 2:
            jastrow.enabled = parts[1].lower() in ("yes", "true", "1", "on")
        elif parts[0] == "ee" and len(parts) == 3:
            jastrow.a_ee, jastrow.b_ee = num(parts[1], lineno, "a_ee"), num(parts[2], lineno, "b_ee")
        elif parts[0] == "en" and len(parts) == 4:
            jastrow.en[parts[1]] = (num(parts[2], lineno, "a_en"), num(parts[3], lineno, "b_en"))
        else:
            raise WavefunctionFileError(f"line {lineno}: bad jastrow entry {line!r}")

    kind, omega = "molecular", 1.0
    for lineno, line in sections.get("hamiltonian", []):
        parts = line.split()
        if parts[0] == "kind" and len(parts) == 2:
            kind = parts[1]
        elif parts[0] == "omega" and len(parts) == 2:
            omega = num(parts[1], lineno, "omega")
        else:
            raise WavefunctionFileError(f"line {lineno}: bad hamiltonian entry {line!r}")
    try:
        charged = [n for n in nuclei if kind == "molecular"]
        H = Hamiltonian(kind, omega, [n.charge for n in charged], [n.position for n in charged])
    except ValueError as exc:
        raise WavefunctionFileError(str(exc)) from None

    spec = WavefunctionSpec(nuclei, basis, mo, DeterminantExpansion(terms), n_up, n_down, jastrow, H)
    try:
        spec.check()
    except ValueError as exc:
        raise WavefunctionFileError(str(exc)) from None
    return spec


def _parse_powers(tok: str, lineno: int):
    if tok.lower() in SHELL_LETTERS:
        return cartesian_triplets(SHELL_LETTERS.index(tok.lower()))
    out = []
    for item in tok.split(";"):
        try:
            n = tuple(int(x) for x in item.split(","))
        except ValueError:
            raise WavefunctionFileError(f"line {lineno}: bad angular spec {tok!r}") from None
        if len(n) != 3:
            raise WavefunctionFileError(f"line {lineno}: bad angular triplet {item!r}")
        out.append(n)
    return out


def _dump_powers(powers) -> str:
    l = sum(powers[0])
    if all(sum(p) == l for p in powers) and list(powers) == cartesian_triplets(l):
        return SHELL_LETTERS[l]
    return ";".join(",".join(str(x) for x in p) for p in powers)


def dump_wavefunction(spec: WavefunctionSpec) -> str:
    out = [f"{MAGIC} {VERSION}", "[electrons]", f"up {spec.n_up}", f"down {spec.n_down}", "[nuclei]"]
    for n in spec.nuclei:
        out.append(" ".join([n.symbol, fmt(n.charge)] + [fmt(x) for x in n.position]))
    out += ["[basis]", f"epsilon {fmt(spec.basis.epsilon)}"]
    for a, shells in enumerate(spec.basis.shells, 1):
        for sh in shells:
            out.append(f"shell {a} {_dump_powers(sh.powers)}")
            out += [f"{fmt(c)} {fmt(g)}" for c, g in zip(sh.coefficients, sh.exponents)]
    out += ["[orbitals]", f"size {spec.mo.shape[0]} {spec.mo.shape[1]}"]
    out += [" ".join(fmt(x) for x in row) for row in spec.mo]
    out.append("[determinants]")
    for t in spec.expansion.terms:
        up = " ".join(str(o + 1) for o in t.up)
        down = " ".join(str(o + 1) for o in t.down)
        out.append(f"{fmt(t.coefficient)} | {up} | {down}".replace("  ", " ").rstrip())
    j = spec.jastrow
    out += ["[jastrow]", f"enabled {'yes' if j.enabled else 'no'}", f"ee {fmt(j.a_ee)} {fmt(j.b_ee)}"]
    out += [f"en {sym} {fmt(a)} {fmt(b)}" for sym, (a, b) in sorted(j.en.items())]
    H = spec.hamiltonian or Hamiltonian("molecular", 1.0, [n.charge for n in spec.nuclei],
                                        [n.position for n in spec.nuclei])
    out += ["[hamiltonian]", f"kind {H.kind}"]
    if H.kind == "harmonic":
        out.append(f"omega {fmt(H.omega)}")
    return "\n".join(out) + "\n"


def load_wavefunction(path) -> WavefunctionSpec:
    return parse_wavefunction(Path(path).read_text())


def canonicalize(text: str) -> str:
    """Canonical re-serialization of a wavefunction file's content."""
    return dump_wavefunction(parse_wavefunction(text))
