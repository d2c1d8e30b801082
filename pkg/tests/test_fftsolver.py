import numpy as np
import pytest

from vrnet import microgen as mg
from vrnet.bounds import PhasePair, hashin_shtrikman_moduli
from vrnet.fftsolver import (
    SolverConfig,
    SolverError,
    analytic_laminate,
    envelope,
    homogenize,
    laminate_image,
    reference_stiffness,
    threshold_sweep,
)
from vrnet.mandel import DEFAULT_PHASES, IsotropicPhase, eigh, loewner_leq, plane_strain_stiffness, rel_frobenius

C0 = plane_strain_stiffness(DEFAULT_PHASES[0])
C1 = plane_strain_stiffness(DEFAULT_PHASES[1])


def layered_energy_oracle(cs, weights, normal_axis):
    """Effective stiffness of a laminate by direct energy minimisation.

    Strain components normal to the layers are free per layer subject to
    their mean; the tangential component is uniform. Solved as a KKT system.
    """
    cs, weights = zip(*[(c, w) for c, w in zip(cs, weights) if w > 0.0])
    n = [normal_axis, 2]
    t = 1 - normal_axis
    k = len(cs)
    out = np.zeros((3, 3))
    for load in range(3):
        e = np.eye(3)[load]
        size = 2 * k + 2
        a = np.zeros((size, size))
        b = np.zeros(size)
        for i, (c, w) in enumerate(zip(cs, weights)):
            sl = slice(2 * i, 2 * i + 2)
            a[sl, sl] = w * c[np.ix_(n, n)]
            b[sl] = -w * c[np.ix_(n, [t])][:, 0] * e[t]
            a[sl, 2 * k:] = w * np.eye(2)
            a[2 * k:, sl] = w * np.eye(2)
        b[2 * k:] = e[n]
        x = np.linalg.solve(a, b)
        sig = np.zeros(3)
        for i, (c, w) in enumerate(zip(cs, weights)):
            eps = np.zeros(3)
            eps[n] = x[2 * i:2 * i + 2]
            eps[t] = e[t]
            sig += w * c @ eps
        out[:, load] = sig
    return out


@pytest.mark.parametrize("axis", [0, 1])
@pytest.mark.parametrize("n0", [1, 16, 31])
def test_laminate_matches_closed_form(axis, n0):
    img = laminate_image(32, n0, axis)
    res = homogenize(img, DEFAULT_PHASES)
    assert res.vol0 == pytest.approx(n0 / 32)
    expect = analytic_laminate(DEFAULT_PHASES, n0 / 32, axis)
    assert rel_frobenius(expect, res.cbar) <= 1e-6


@pytest.mark.parametrize("axis", [0, 1])
def test_closed_form_laminate_matches_energy_oracle(axis):
    for c0 in (0.0, 0.2, 0.5, 0.8, 1.0):
        a = analytic_laminate(DEFAULT_PHASES, c0, axis)
        b = layered_energy_oracle([C0, C1], [c0, 1 - c0], axis)
        assert rel_frobenius(b, a) < 1e-12


def test_laminate_trivial_cases():
    np.testing.assert_allclose(analytic_laminate((DEFAULT_PHASES[0],) * 2, 0.3), C0, rtol=1e-13)
    np.testing.assert_allclose(analytic_laminate(DEFAULT_PHASES, 1.0), C0, rtol=1e-13)
    with pytest.raises(ValueError):
        analytic_laminate(DEFAULT_PHASES, 0.5, 2)


def test_laminate_error_under_refinement():
    errs = []
    for n in (8, 16, 32, 64):
        res = homogenize(laminate_image(n, n // 4), DEFAULT_PHASES)
        errs.append(rel_frobenius(analytic_laminate(DEFAULT_PHASES, 0.25), res.cbar))
    assert max(errs) < 1e-10


@pytest.mark.parametrize("value,expect", [(0, C0), (1, C1)])
def test_single_phase_exact(value, expect):
    res = homogenize(np.full((16, 16), value), DEFAULT_PHASES)
    assert rel_frobenius(expect, res.cbar) <= 1e-12
    assert np.all(res.iterations == 0)


def test_checkerboard_inside_hs_bulk_interval():
    n = 64
    img = np.zeros((n, n))
    img[: n // 2, n // 2:] = 1
    img[n // 2:, : n // 2] = 1
    res = homogenize(img, DEFAULT_PHASES)
    c = res.cbar
    d = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    bulk_like = d @ c @ d
    (klo, _), (khi, _) = hashin_shtrikman_moduli(PhasePair(C0, C1, 0.5))
    assert 2 * klo < bulk_like < 2 * khi


def test_random_images_symmetric_and_sandwiched():
    specs = mg.sample_spec(5, (5, 5), 3, 3)
    for s in specs:
        chi = mg.render(s, 48)
        res = homogenize(chi, DEFAULT_PHASES)
        c = res.cbar
        assert np.linalg.norm(c - c.T) <= 1e-9 * np.linalg.norm(c)
        v, r = envelope(DEFAULT_PHASES, res.vol0)
        assert loewner_leq(c, v, 1e-8) and loewner_leq(r, c, 1e-8)


def test_contrast_robustness_100():
    s = mg.sample_spec(2, (7, 7), 1, 1)[0]
    res = homogenize(mg.render(s, 100), DEFAULT_PHASES)
    assert res.converged and np.all(res.iterations < SolverConfig().max_iter)


@pytest.mark.parametrize("kind", ["auto", "mean", "sqrt-minmax"])
def test_reference_media_agree(kind):
    s = mg.sample_spec(9, (3, 3), 1, 1)[0]
    chi = mg.render(s, 32)
    base = homogenize(chi, DEFAULT_PHASES).cbar
    other = homogenize(chi, DEFAULT_PHASES, SolverConfig(tol=1e-10, reference_medium=kind)).cbar
    assert rel_frobenius(base, other) < 1e-6
    ref = reference_stiffness(DEFAULT_PHASES, kind)
    assert np.all(np.linalg.eigvalsh(ref) > 0)


def test_matrix_phases_accepted():
    img = laminate_image(8, 4)
    a = homogenize(img, DEFAULT_PHASES).cbar
    b = homogenize(img, (C0, C1)).cbar
    assert rel_frobenius(a, b) < 1e-10


def test_solver_errors():
    with pytest.raises(ValueError):
        homogenize(np.full((4, 4), 0.5), DEFAULT_PHASES)
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(reference_medium="median")
    s = mg.sample_spec(1, (5, 5), 1, 1)[0]
    with pytest.raises(SolverError):
        homogenize(mg.render(s, 32), DEFAULT_PHASES, SolverConfig(tol=1e-14, max_iter=2))


def test_threshold_sweep_contract():
    a = np.random.default_rng(0).uniform(-1, 1, (3, 3))
    rows = threshold_sweep(a, DEFAULT_PHASES, n_tau=20, resolution=32)
    assert len(rows) == 20
    taus = [r["tau"] for r in rows]
    assert taus == sorted(taus)
    c0 = [r["c0"] for r in rows]
    assert all(x <= y for x, y in zip(c0, c0[1:]))
    # tau = 0 selects every pixel; tau = 1 keeps only the field maximum
    assert rows[0]["degenerate"] and rows[0]["c0"] == 0.0
    assert rows[-1]["c0"] >= 1.0 - 4.0 / 32**2
    for r in rows:
        assert r["converged"]
        w = eigh(r["cbar"])[0]
        wv = eigh(r["voigt"])[0]
        wr = eigh(r["reuss"])[0]
        assert loewner_leq(r["cbar"], r["voigt"], 1e-8) and loewner_leq(r["reuss"], r["cbar"], 1e-8)
        assert w[0] >= wr[0] * (1 - 1e-8) and w[-1] <= wv[-1] * (1 + 1e-8)
    trans = [i for i, r in enumerate(rows) if r["transition"]]
    for i in trans:
        key = ("n0", "n1", "s0", "s1")
        assert [rows[i][k] for k in key] != [rows[i - 1][k] for k in key]
    for i in range(1, len(rows)):
        if (rows[i]["n0"], rows[i]["n1"]) != (rows[i - 1]["n0"], rows[i - 1]["n1"]):
            assert rows[i]["transition"]
    with pytest.raises(ValueError):
        threshold_sweep(a, DEFAULT_PHASES, n_tau=1)


def test_custom_phase_pair():
    phases = (IsotropicPhase(10.0, 0.2), IsotropicPhase(2.0, 0.35))
    res = homogenize(laminate_image(16, 4, 1), phases)
    assert rel_frobenius(analytic_laminate(phases, 0.25, 1), res.cbar) < 1e-10
