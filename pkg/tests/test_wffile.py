import numpy as np
import pytest

from harness import WAVEFUNCTIONS
from qmcdesk.systems import harmonic_oscillator, hydrogen_atom, random_molecule
from qmcdesk.wavefunction import TrialWavefunction
from qmcdesk.wffile import (
    WavefunctionFileError,
    canonicalize,
    dump_wavefunction,
    load_wavefunction,
    parse_wavefunction,
)


@pytest.mark.parametrize("seed", range(4))
def test_roundtrip_is_exact(seed):
    rng = np.random.default_rng(seed)
    spec = random_molecule(rng, n_det=1 + seed, jastrow=bool(seed % 2), max_l=3)
    text = dump_wavefunction(spec)
    back = parse_wavefunction(text)
    assert dump_wavefunction(back) == text
    np.testing.assert_array_equal(back.mo, spec.mo)
    R = rng.normal(size=(2, spec.n_electrons, 3))
    a = TrialWavefunction(spec, precision="double").evaluate(R)
    b = TrialWavefunction(back, precision="double").evaluate(R)
    np.testing.assert_array_equal(a.log_psi, b.log_psi)


def test_canonical_form_ignores_comments_and_spacing():
    text = dump_wavefunction(hydrogen_atom())
    noisy = text.replace("[nuclei]", "# a comment\n\n[nuclei]   # trailing\n").replace(" ", "   ")
    assert canonicalize(noisy) == text


def test_shipped_files_parse():
    for name in ("h_atom_sto3g.wf", "harmonic.wf"):
        spec = load_wavefunction(WAVEFUNCTIONS / name)
        spec.check()
    assert dump_wavefunction(harmonic_oscillator()) == (WAVEFUNCTIONS / "harmonic.wf").read_text()


def _break(text, old, new):
    assert old in text
    return text.replace(old, new, 1)


def test_orbital_index_out_of_range_is_rejected():
    text = dump_wavefunction(hydrogen_atom())
    bad = _break(text, "1 | 1 |", "1 | 2 |")
    with pytest.raises(WavefunctionFileError, match="orbital 2 outside 1..1"):
        parse_wavefunction(bad)


def test_orbital_basis_size_mismatch_is_rejected():
    text = dump_wavefunction(harmonic_oscillator())
    with pytest.raises(WavefunctionFileError, match="expected 4"):
        parse_wavefunction(_break(text, "1 0 0 0\n", "1 0 0\n"))
    with pytest.raises(WavefunctionFileError):
        parse_wavefunction(_break(text, "size 4 4", "size 4 5"))


@pytest.mark.parametrize("old,new,msg", [
    ("qmcdesk-wavefunction 1", "qmcdesk-wavefunction 9", "version"),
    ("[jastrow]", "[jastrows]", "unknown section"),
    ("kind molecular", "kind plasma", "Hamiltonian kind"),
    ("shell 1 s", "shell 2 s", "nucleus 2"),
    ("up 1", "up one", "not an integer"),
])
def test_diagnostics(old, new, msg):
    text = dump_wavefunction(hydrogen_atom())
    with pytest.raises(WavefunctionFileError, match=msg):
        parse_wavefunction(_break(text, old, new))


def test_missing_section():
    text = dump_wavefunction(hydrogen_atom())
    head, _, rest = text.partition("[determinants]")
    _, _, tail = rest.partition("[jastrow]")
    with pytest.raises(WavefunctionFileError, match="missing section"):
        parse_wavefunction(head + "[jastrow]" + tail)
    # jastrow and hamiltonian sections are optional
    head, _, _ = text.partition("[jastrow]")
    assert parse_wavefunction(head).hamiltonian.kind == "molecular"
