"""Optical lineshapes from nearest-neighbour isotope mass configurations."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .fitting import FitProblem, least_squares

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class IsotopeShell:
    """Equivalent neighbour sites of one element.

    ``isotopes`` holds (mass offset in u from the majority isotope, abundance).
    """

    element: str
    n_sites: int
    isotopes: tuple
    shift_per_u: float = 0.0  # GHz/u

    def __post_init__(self):
        iso = tuple((int(m), float(a)) for m, a in self.isotopes)
        object.__setattr__(self, "isotopes", iso)
        if self.n_sites < 0:
            raise ValueError("n_sites must be non-negative")
        ab = np.array([a for _, a in iso])
        if np.any(ab < 0) or np.any(ab > 1):
            raise ValueError(f"{self.element}: abundances must lie in [0, 1]")
        if abs(ab.sum() - 1.0) > 1e-9:
            raise ValueError(f"{self.element}: abundances sum to {ab.sum():.12g}, not 1")

    def with_shift(self, shift):
        return IsotopeShell(self.element, self.n_sites, self.isotopes, float(shift))


# natural abundances as (offset from 12C / 28Si, fraction)
CARBON = ((0, 0.9893), (1, 0.0107))
SILICON = ((0, 0.92223), (1, 0.04685), (2, 0.03092))


def default_shells(shift_c=22.0, shift_si=2.0, n_c=4, n_si=12):
    """Si-substitutional site: 4 carbon neighbours and 12 silicon next neighbours."""
    return [IsotopeShell("C", n_c, CARBON, shift_c), IsotopeShell("Si", n_si, SILICON, shift_si)]


@dataclass(frozen=True)
class IsotopeConfig:
    occupations: tuple  # one tuple of counts per shell, ordered as the shell's isotopes
    total_shift: float  # GHz
    probability: float


def _compositions(n, k):
    """All k-tuples of non-negative ints summing to n, lexicographic ascending."""
    if k == 1:
        yield (n,)
        return
    for first in range(n + 1):
        for rest in _compositions(n - first, k - 1):
            yield (first,) + rest


def _shell_terms(shell: IsotopeShell, prob_floor):
    offsets = [m for m, _ in shell.isotopes]
    ab = [a for _, a in shell.isotopes]
    out = []
    for occ in _compositions(shell.n_sites, len(ab)):
        coef = math.factorial(shell.n_sites)
        for c in occ:
            coef //= math.factorial(c)
        p = float(coef)
        for c, a in zip(occ, ab):
            p *= a**c
        if p > 0 and p >= prob_floor:
            out.append((occ, sum(c * m for c, m in zip(occ, offsets)), p))
    return out


def configuration_distribution(shells, prob_floor=1e-6):
    """Joint multinomial distribution of isotope occupations over all shells.

    Configurations below ``prob_floor`` are dropped without renormalizing the
    rest, so the retained mass is ``sum(c.probability for c in configs)``.
    """
    if not 0 <= prob_floor < 1:
        raise ValueError("prob_floor must lie in [0, 1)")
    per_shell = [_shell_terms(s, prob_floor) for s in shells]
    configs = []
    for combo in itertools.product(*per_shell):
        p = math.prod(t[2] for t in combo)
        if p < prob_floor or p == 0:
            continue
        shift = sum(s.shift_per_u * t[1] for s, t in zip(shells, combo))
        configs.append(IsotopeConfig(tuple(t[0] for t in combo), float(shift), p))
    return configs


def gaussian(x, fwhm):
    s = fwhm * FWHM_TO_SIGMA
    return np.exp(-0.5 * (x / s) ** 2) / (s * math.sqrt(2 * math.pi))


def lorentzian(x, fwhm):
    g = 0.5 * fwhm
    return g / (math.pi * (x * x + g * g))


def pseudo_voigt(x, fwhm, eta=0.5):
    return eta * lorentzian(x, fwhm) + (1 - eta) * gaussian(x, fwhm)


PROFILES = {"gaussian": gaussian, "lorentzian": lorentzian, "pseudo_voigt": pseudo_voigt}


def profile(name, x, fwhm, eta=0.5):
    """Unit-area line profile."""
    if not fwhm > 0:
        raise ValueError("fwhm must be positive")
    try:
        fn = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
    return fn(x, fwhm, eta) if name == "pseudo_voigt" else fn(x, fwhm)


@dataclass
class SpectrumTrace:
    """Gridded (x, y) data. ``axis`` names the x quantity, ``unit`` its unit."""

    x: np.ndarray
    y: np.ndarray
    axis: str = "frequency"
    unit: str = "GHz"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ValueError("x and y must be 1-D arrays of equal length")
        if self.x.size and np.any(np.diff(self.x) <= 0):
            raise ValueError("x must be strictly increasing")

    def integral(self):
        return float(trapezoid(self.y, self.x))


def isotope_lineshape(f0, shells, intrinsic_fwhm, grid, profile_name="gaussian", eta=0.5,
                      prob_floor=1e-6, renormalize=True, configs=None):
    """Sum of isotope-shifted profiles, one per configuration, weighted by probability.

    With ``renormalize`` the retained configuration weights are rescaled to
    unit total so the trace integrates to one over a covering grid.
    """
    x = np.asarray(grid, dtype=float)
    if x.size == 0:
        raise ValueError("empty grid")
    if configs is None:
        configs = configuration_distribution(shells, prob_floor)
    shifts = np.array([c.total_shift for c in configs])
    probs = np.array([c.probability for c in configs])
    if renormalize:
        probs = probs / probs.sum()
    # one profile per distinct shift
    uniq, inv = np.unique(np.round(shifts, 12), return_inverse=True)
    w = np.bincount(inv, weights=probs)
    y = np.zeros_like(x)
    for s, wk in zip(uniq, w):
        y += wk * profile(profile_name, x - f0 - s, intrinsic_fwhm, eta)
    return SpectrumTrace(x, y, "frequency", "GHz",
                         {"f0": f0, "fwhm": intrinsic_fwhm, "profile": profile_name,
                          "retained_mass": float(sum(c.probability for c in configs))})


ISOTOPE_PARAMS = ("f0", "shift_c", "shift_si", "fwhm", "amplitude")


def isotope_model(x, params, shells, profile_name="gaussian", prob_floor=1e-6):
    """amplitude * lineshape for params (f0, carbon shift, silicon shift, fwhm, amplitude).

    The first two shells receive the two shifts; any further shells keep theirs.
    """
    f0, sc, ssi, fwhm, amp = params
    sh = list(shells)
    sh[0] = sh[0].with_shift(sc)
    sh[1] = sh[1].with_shift(ssi)
    return amp * isotope_lineshape(f0, sh, fwhm, x, profile_name, prob_floor=prob_floor).y


def fit_isotope_model(trace: SpectrumTrace, shells=None, init=None, bounds=None,
                      profile_name="gaussian", prob_floor=1e-6):
    """Least-squares fit of centre, per-u shifts, intrinsic width and amplitude.

    Abundances and site counts come from ``shells`` and are held fixed.
    """
    shells = default_shells() if shells is None else list(shells)
    x, y = trace.x, trace.y
    start = {
        "f0": float(x[np.argmax(y)]),
        "shift_c": 20.0,
        "shift_si": 2.0,
        "fwhm": 2.0,
        "amplitude": float(trapezoid(y, x)) or 1.0,
    }
    start.update(init or {})
    span = float(np.ptp(x))
    lim = {
        "f0": (float(x.min()), float(x.max())),
        "shift_c": (-span, span),
        "shift_si": (-span / 4, span / 4),
        "fwhm": (1e-3 * span / max(x.size, 1), span),
        "amplitude": (0.0, np.inf),
    }
    lim.update(bounds or {})
    names = list(ISOTOPE_PARAMS)

    def residual(p):
        return isotope_model(x, p, shells, profile_name, prob_floor) - y

    problem = FitProblem(residual, [start[n] for n in names], names,
                         [lim[n][0] for n in names], [lim[n][1] for n in names], model="isotope")
    return least_squares(problem)
