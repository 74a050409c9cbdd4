import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spinforge.constants import MU_B
from spinforge.fitting import (
    CONVERGED,
    SINGULAR,
    FitError,
    FitProblem,
    PeakSet,
    central_jacobian,
    esr_resonance_fields,
    extract_peaks,
    fit_spin_params,
    initial_spin_guess,
    least_squares,
    modeled_transitions,
)
from spinforge.spin_core import SpinParams

from oracles import breit_rabi_esr_fields

BETA_GS1 = SpinParams(g_principal=(0.5, 0.5, 1.870), A_principal=(103, 188, 174))
BETA_GS2 = SpinParams(g_principal=(0.5, 0.5, 2.035), A_principal=(0, 0, 257), A_angles=(0, 52, 0))
FIELDS = np.linspace(0, 0.05, 26)


def synthetic_peaks(p, fields=FIELDS):
    rows = [(B, f) for B in fields for f in modeled_transitions(p, B)]
    return np.array(rows)


# -- least squares -----------------------------------------------------------

def test_linear_exact_in_two_iterations():
    x = np.linspace(0, 1, 20)
    y = 3.7 * x
    res = least_squares(FitProblem(lambda p: p[0] * x - y, [0.0]))
    assert res.status == CONVERGED
    assert res.iterations <= 2
    assert res.x[0] == pytest.approx(3.7, abs=1e-12)


def test_rosenbrock():
    res = least_squares(FitProblem(lambda p: np.array([10 * (p[1] - p[0] ** 2), 1 - p[0]]), [-1.2, 1.0]))
    assert res.converged
    np.testing.assert_allclose(res.x, [1, 1], atol=1e-6)


def test_bound_clamps_and_is_active():
    x = np.linspace(0, 1, 10)
    res = least_squares(FitProblem(lambda p: p[0] * x - 2 * x, [0.5], ["k"], [0.0], [1.0]))
    assert res.x[0] == 1.0
    assert res.active == ["k"]
    assert res.ci95[0] == 0.0


def test_bad_bounds_rejected():
    with pytest.raises(FitError):
        FitProblem(lambda p: p, [2.0], lower=[0.0], upper=[1.0])


def test_too_few_residuals():
    with pytest.raises(FitError):
        least_squares(FitProblem(lambda p: np.array([p[0] + p[1]]), [1.0, 1.0]))


def richardson(fun, x, h=1e-2, levels=4):
    """Richardson-extrapolated central differences, column by column."""
    cols = []
    for k in range(x.size):
        table = []
        for i in range(levels):
            hk = h / 2**i
            e = np.zeros_like(x)
            e[k] = hk
            table.append((fun(x + e) - fun(x - e)) / (2 * hk))
        for j in range(1, levels):
            table = [(4**j * table[i + 1] - table[i]) / (4**j - 1) for i in range(len(table) - 1)]
        cols.append(table[0])
    return np.array(cols).T


def test_jacobian_matches_richardson():
    t = np.linspace(0, 3, 40)
    fun = lambda p: p[0] * np.exp(-p[1] * t) * np.sin(p[2] * t + 0.3)
    x = np.array([1.3, 0.7, 2.1])
    J = central_jacobian(fun, x)
    R = richardson(fun, x)
    assert np.max(np.abs(J - R)) <= 1e-6 * np.max(np.abs(R))


def test_jacobian_one_sided_at_bound():
    fun = lambda p: np.array([p[0] ** 3, np.exp(p[0])])
    J = central_jacobian(fun, np.array([1.0]), lower=np.array([1.0]), upper=np.array([5.0]))
    np.testing.assert_allclose(J[:, 0], [3.0, np.e], rtol=1e-8)


def test_cost_history_monotone():
    t = np.linspace(0, 4, 80)
    y = 2.0 * np.exp(-1.3 * t) + 0.5 * np.cos(3 * t)
    res = least_squares(FitProblem(lambda p: p[0] * np.exp(-p[1] * t) + p[2] * np.cos(p[3] * t) - y,
                                   [1.0, 0.5, 1.0, 2.8]))
    assert np.all(np.diff(res.history) <= 0)
    np.testing.assert_allclose(res.x, [2.0, 1.3, 0.5, 3.0], rtol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_argmin_scale_invariant(c):
    rng = np.random.default_rng(4)
    t = np.linspace(0, 2, 30)
    y = 1.5 * np.exp(-0.8 * t) + 0.05 * rng.standard_normal(t.size)
    base = least_squares(FitProblem(lambda p: p[0] * np.exp(-p[1] * t) - y, [1.0, 1.0]))
    scaled = least_squares(FitProblem(lambda p: c * (p[0] * np.exp(-p[1] * t) - y), [1.0, 1.0]))
    np.testing.assert_allclose(scaled.x, base.x, rtol=1e-6)
    assert scaled.cost == pytest.approx(c**2 * base.cost, rel=1e-6)


def test_intervals_symmetric_and_cover_truth():
    rng = np.random.default_rng(11)
    t = np.linspace(0, 2, 200)
    y = 1.5 * np.exp(-0.8 * t) + 0.02 * rng.standard_normal(t.size)
    res = least_squares(FitProblem(lambda p: p[0] * np.exp(-p[1] * t) - y, [1.0, 1.0], ["a", "k"]))
    for n, (lo, hi) in res.intervals.items():
        assert res.params[n] - lo == pytest.approx(hi - res.params[n], rel=1e-12)
    assert res.intervals["a"][0] < 1.5 < res.intervals["a"][1]
    assert res.intervals["k"][0] < 0.8 < res.intervals["k"][1]


def test_singular_status():
    t = np.linspace(0, 1, 10)
    res = least_squares(FitProblem(lambda p: (p[0] + p[1]) * t - t, [0.2, 0.3]))
    assert res.status == SINGULAR
    assert res.x.sum() == pytest.approx(1.0, abs=1e-9)


def test_soft_l1_resists_outlier():
    t = np.linspace(0, 1, 50)
    y = 2.0 * t + 1.0
    y[25] += 50.0
    plain = least_squares(FitProblem(lambda p: p[0] * t + p[1] - y, [1.0, 0.0]))
    robust = least_squares(FitProblem(lambda p: p[0] * t + p[1] - y, [1.0, 0.0], loss="soft_l1", f_scale=0.1))
    assert abs(robust.x[1] - 1.0) < 0.1 * abs(plain.x[1] - 1.0)


def test_deterministic():
    t = np.linspace(0, 3, 60)
    y = np.sin(1.7 * t) * np.exp(-0.2 * t)
    fun = lambda p: np.sin(p[0] * t) * np.exp(-p[1] * t) - y
    a = least_squares(FitProblem(fun, [1.6, 0.3]))
    b = least_squares(FitProblem(fun, [1.6, 0.3]))
    assert np.array_equal(a.x, b.x) and a.history == b.history


# -- peaks -------------------------------------------------------------------

@pytest.mark.parametrize("centre", [0.0, 0.013, 0.37, -0.241])
def test_gaussian_peak_within_tenth_step(centre):
    x = np.linspace(-5, 5, 201)
    step = x[1] - x[0]
    y = np.exp(-0.5 * ((x - centre) / 0.6) ** 2)
    (pk,) = extract_peaks(x, y)
    assert abs(pk.x - centre) <= step / 10
    assert pk.width > 0
    assert x.min() <= pk.x <= x.max()


def test_flat_slice_empty():
    x = np.linspace(0, 1, 50)
    assert len(extract_peaks(x, np.ones((3, 50)))) == 0


def test_two_peaks_ordered():
    x = np.linspace(0, 20, 801)
    fwhm = 1.0
    s = fwhm / 2.3548
    y = np.exp(-0.5 * ((x - 13) / s) ** 2) + 0.6 * np.exp(-0.5 * ((x - 6) / s) ** 2)
    pk = extract_peaks(x, y)
    assert len(pk) == 2
    assert pk[0].x == pytest.approx(6, abs=0.0025) and pk[1].x == pytest.approx(13, abs=0.0025)


def test_plateau_tie_goes_to_lower_x():
    x = np.arange(7.0)
    y = np.array([0, 1, 3, 3, 1, 0, 0], dtype=float)
    (pk,) = extract_peaks(x, y)
    assert pk.x <= 2.5
    assert pk.x >= 2.0


def test_prominence_filter():
    x = np.linspace(0, 10, 501)
    y = np.exp(-0.5 * (x - 5) ** 2) + 0.01 * np.sin(40 * x)
    assert len(extract_peaks(x, y, min_prominence=0.1)) == 1


def test_too_short_slice():
    with pytest.raises(ValueError):
        extract_peaks([0.0, 1.0], [0.0, 1.0])


def test_extract_then_fit_line():
    # a Zeeman-like branch f = c B sampled as Lorentzian rows
    B = np.linspace(0.01, 0.05, 9)
    f = np.linspace(0, 3000, 3001)
    stack = np.array([1 / (1 + ((f - 50000 * b) / 5) ** 2) for b in B])
    pk = extract_peaks(f, stack, slices=B)
    pos = pk.positions()
    slope = np.polyfit(pos[:, 0], pos[:, 1], 1)[0]
    assert slope == pytest.approx(50000, rel=1e-4)


# -- spin fits ---------------------------------------------------------------

@pytest.fixture(scope="module")
def beta_peaks():
    return synthetic_peaks(BETA_GS1)


def test_initial_guess(beta_peaks):
    g, A = initial_spin_guess(beta_peaks[:, 0], beta_peaks[:, 1])
    assert 1.5 < g < 2.3
    assert 20 < A < 400


def test_spin_fit_noiseless(beta_peaks):
    init = BETA_GS1.replace(g_principal=(0.5, 0.5, 1.85), A_principal=(110, 180, 165))
    res, fitted = fit_spin_params(beta_peaks, init)
    truth = {"g_zz": 1.870, "A_xx": 103, "A_yy": 188, "A_zz": 174}
    for k, v in truth.items():
        assert res.params[k] == pytest.approx(v, rel=5e-3)
    assert fitted.A_principal == pytest.approx(tuple(res.x[1:]))


def test_spin_fit_noisy(beta_peaks):
    rng = np.random.default_rng(5)
    noisy = beta_peaks.copy()
    noisy[:, 1] += 0.5 * rng.standard_normal(len(noisy))
    init = BETA_GS1.replace(g_principal=(0.5, 0.5, 1.85), A_principal=(110, 180, 165))
    res, _ = fit_spin_params(noisy, init)
    for k, v in (("A_xx", 103), ("A_yy", 188), ("A_zz", 174)):
        assert abs(res.params[k] - v) < 5.0
    assert res.params["g_zz"] == pytest.approx(1.870, rel=5e-3)


def test_spin_fit_xy_swap(beta_peaks):
    a, _ = fit_spin_params(beta_peaks, BETA_GS1.replace(A_principal=(110, 180, 165)))
    b, _ = fit_spin_params(beta_peaks, BETA_GS1.replace(A_principal=(180, 110, 165)))
    assert b.params["A_xx"] == pytest.approx(a.params["A_yy"], rel=1e-4)
    assert b.params["A_yy"] == pytest.approx(a.params["A_xx"], rel=1e-4)
    assert b.cost == pytest.approx(a.cost, abs=1e-6)


def test_spin_fit_accepts_peakset(beta_peaks):
    from spinforge.fitting import Peak

    ps = PeakSet(Peak(B, f, 1.0, 1.0, 0.1) for B, f in beta_peaks)
    res, _ = fit_spin_params(ps, BETA_GS1, free=("A_zz",))
    assert res.params["A_zz"] == pytest.approx(174, rel=1e-6)


def test_identifiability_warning():
    # at zero field only, g_zz has no influence on the spectrum
    peaks = synthetic_peaks(BETA_GS1, fields=[0.0])
    with pytest.warns(RuntimeWarning, match="identifiable"):
        fit_spin_params(peaks, BETA_GS1, free=("g_zz", "A_zz"))


def test_unknown_parameter():
    with pytest.raises(FitError):
        fit_spin_params(np.array([[0.0, 100.0]]), BETA_GS1, free=("A_ww",))


# -- ESR ---------------------------------------------------------------------

@pytest.mark.parametrize("angle", [0.0, 30.0, 90.0])
def test_esr_isotropic_g2(angle):
    p = SpinParams(g_principal=(2, 2, 2), A_principal=(0, 0, 0), gN_muN=0.0)
    res = esr_resonance_fields(p, 9.7, angle, (0.2, 0.5), n=61)
    assert len(res) == 1
    assert res[0].B_res == pytest.approx(9700 / (2 * MU_B), abs=1e-9)
    assert res[0].B_res * 1e3 == pytest.approx(346.52, abs=0.05)


def test_esr_forbidden_without_perpendicular_g():
    p = SpinParams(g_principal=(0, 0, 1.87), A_principal=(103, 188, 174))
    assert esr_resonance_fields(p, 9.7, 0.0, (0.0, 0.6), n=121) == []


def test_esr_matches_breit_rabi():
    g, A = 2.0, 250.0
    p = SpinParams(g_principal=(g, g, g), A_principal=(A, A, A))
    res = esr_resonance_fields(p, 9.7, 0.0, (0.0, 0.6), n=301)
    ref = breit_rabi_esr_fields(g, A, 9700.0, B_max=0.6)
    assert len(ref) == 8
    strong = sorted((r for r in res if r.intensity > 0.1), key=lambda r: r.B_res)
    got = np.array([r.B_res for r in strong])
    assert got.size == ref.size
    np.testing.assert_allclose(got, ref, atol=1e-5)


def test_esr_beta_sites_visible():
    for p in (BETA_GS1, BETA_GS2):
        res = esr_resonance_fields(p, 9.7, 0.0, (0.0, 1.0), n=201)
        assert len(res) > 0
        assert all(r.intensity > 0 for r in res)


def test_esr_rejects_bad_frequency():
    with pytest.raises(ValueError):
        esr_resonance_fields(BETA_GS1, 0.0)
