"""Bounded Levenberg-Marquardt least squares and spectroscopy fit drivers."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import brentq
from scipy.signal import peak_prominences, peak_widths

from .constants import MU_B
from .spin_core import SpinParams, axis_vector, field_sweep, solve, transition_arrays

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max-iter"
SINGULAR = "singular"

# finite-difference columns carry roundoff noise well above eps; sqrt(eps) is the usual rank cut
SINGULAR_RTOL = float(np.sqrt(np.finfo(float).eps))


class FitError(RuntimeError):
    """Raised when a fit cannot be set up or evaluated."""


@dataclass
class FitProblem:
    """Residual function with named, bounded parameters.

    ``residual(x)`` returns the residual vector. ``loss`` is ``"linear"``
    (plain squares) or ``"soft_l1"`` with transition scale ``f_scale``.
    """

    residual: Callable[[np.ndarray], np.ndarray]
    x0: Sequence[float]
    names: Sequence[str] | None = None
    lower: Sequence[float] | None = None
    upper: Sequence[float] | None = None
    loss: str = "linear"
    f_scale: float = 1.0
    model: str = ""
    jac: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        n = self.x0.size
        if self.names is None:
            self.names = [f"p{k}" for k in range(n)]
        self.names = list(self.names)
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if not (len(self.names) == self.lower.size == self.upper.size == n):
            raise FitError("names, bounds and x0 must have the same length")
        if np.any(self.lower > self.x0) or np.any(self.x0 > self.upper):
            bad = [nm for nm, lo, x, hi in zip(self.names, self.lower, self.x0, self.upper)
                   if not lo <= x <= hi]
            raise FitError(f"initial values outside bounds: {bad}")
        if self.loss not in ("linear", "soft_l1"):
            raise FitError(f"unknown loss {self.loss!r}")
        if self.f_scale <= 0:
            raise FitError("f_scale must be positive")


@dataclass
class FitResult:
    names: list
    x: np.ndarray
    ci95: np.ndarray  # half-widths; interval is x +/- ci95
    covariance: np.ndarray
    rms: float
    cost: float
    status: str
    iterations: int
    nfev: int
    active: list = field(default_factory=list)
    history: list = field(default_factory=list)
    singular_values: np.ndarray | None = None
    message: str = ""
    residuals: np.ndarray | None = None

    @property
    def params(self):
        return dict(zip(self.names, self.x.tolist()))

    @property
    def intervals(self):
        return {n: (x - c, x + c) for n, x, c in zip(self.names, self.x, self.ci95)}

    @property
    def converged(self):
        return self.status == CONVERGED

    def to_dict(self):
        return {
            "status": self.status,
            "iterations": self.iterations,
            "nfev": self.nfev,
            "cost": self.cost,
            "rms": self.rms,
            "estimates": self.params,
            "ci95": {n: float(c) for n, c in zip(self.names, self.ci95)},
            "intervals": {n: [float(a), float(b)] for n, (a, b) in self.intervals.items()},
            "active_bounds": list(self.active),
            "message": self.message,
        }


def _soft_l1(r, s):
    u = r / s
    return s * np.sign(u) * np.sqrt(2.0 * (np.sqrt(1.0 + u * u) - 1.0))


def central_jacobian(fun, x, f0=None, lower=None, upper=None, rel_step=None):
    """Central-difference Jacobian, one-sided second order next to bounds."""
    x = np.asarray(x, dtype=float)
    if f0 is None:
        f0 = np.asarray(fun(x), dtype=float)
    lower = np.full(x.size, -np.inf) if lower is None else lower
    upper = np.full(x.size, np.inf) if upper is None else upper
    eps = np.finfo(float).eps ** (1 / 3) if rel_step is None else rel_step
    J = np.empty((f0.size, x.size))
    for k in range(x.size):
        h = eps * max(abs(x[k]), 1.0)
        xp, xm = x.copy(), x.copy()
        if x[k] + h <= upper[k] and x[k] - h >= lower[k]:
            xp[k] += h
            xm[k] -= h
            J[:, k] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2 * h)
        else:
            sgn = 1.0 if x[k] + 2 * h <= upper[k] else -1.0
            x1, x2 = x.copy(), x.copy()
            x1[k] += sgn * h
            x2[k] += 2 * sgn * h
            J[:, k] = sgn * (-3 * f0 + 4 * np.asarray(fun(x1)) - np.asarray(fun(x2))) / (2 * h)
    return J


def least_squares(problem: FitProblem, max_iter=500, ftol=1e-10, gtol=1e-8, tau=1e-9) -> FitResult:
    """Minimize half the sum of squared residuals inside box bounds.

    Levenberg-Marquardt with Marquardt diagonal scaling and gain-ratio damping
    updates; steps are projected onto the bounds and parameters pinned at a
    bound by the gradient are frozen for that step. Stops when the relative
    cost decrease falls below ``ftol``, when the largest cosine between the
    residual and a free Jacobian column falls below ``gtol``, or after
    ``max_iter`` accepted steps.
    """
    lo, hi = problem.lower, problem.upper
    nfev = 0

    def fun(x):
        nonlocal nfev
        nfev += 1
        r = np.asarray(problem.residual(x), dtype=float).ravel()
        if not np.all(np.isfinite(r)):
            raise FitError(f"non-finite residuals at {dict(zip(problem.names, x))}")
        if problem.loss == "soft_l1":
            r = _soft_l1(r, problem.f_scale)
        return r

    def jac(x, r):
        if problem.jac is not None:
            J = np.asarray(problem.jac(x), dtype=float)
            if problem.loss == "soft_l1":
                raise FitError("analytic Jacobian not supported with soft_l1 loss")
            return J
        return central_jacobian(fun, x, r, lo, hi)

    x = np.clip(problem.x0, lo, hi)
    r = fun(x)
    if r.size < x.size:
        raise FitError(f"{r.size} residuals for {x.size} parameters")
    J = jac(x, r)
    F = 0.5 * r @ r
    A = J.T @ J
    g = J.T @ r
    mu = tau * max(np.max(np.diag(A)), 1e-300)
    nu = 2.0
    history = [F]
    status = MAX_ITER
    message = "iteration limit reached"
    it = 0

    def free_mask(x, g):
        at_lo = (x <= lo) & (g > 0)
        at_hi = (x >= hi) & (g < 0)
        return ~(at_lo | at_hi)

    while it < max_iter:
        free = free_mask(x, g)
        # cosine between residual and each Jacobian column: invariant to residual scaling
        scale = np.linalg.norm(J, axis=0) * np.sqrt(2 * F)
        gcos = np.abs(g) / np.where(scale > 0, scale, 1.0)
        gnorm = np.max(gcos[free]) if free.any() else 0.0
        if gnorm < gtol or F == 0.0:
            status, message = CONVERGED, "gradient norm below tolerance"
            break
        Af = A[np.ix_(free, free)]
        d = np.maximum(np.diag(Af), 1e-12 * max(np.diag(Af).max(), 1e-300))
        try:
            hf = np.linalg.solve(Af + mu * np.diag(d), -g[free])
        except np.linalg.LinAlgError:
            mu *= nu
            nu *= 2
            continue
        h = np.zeros_like(x)
        h[free] = hf
        x_new = np.clip(x + h, lo, hi)
        step = x_new - x
        if np.linalg.norm(step) <= 1e-15 * (np.linalg.norm(x) + 1e-15):
            status, message = CONVERGED, "step below machine precision"
            break
        r_new = fun(x_new)
        F_new = 0.5 * r_new @ r_new
        predicted = -(step @ g) - 0.5 * step @ A @ step
        rho = (F - F_new) / predicted if predicted > 0 else -1.0
        if rho > 0 and F_new <= F:
            rel = (F - F_new) / F if F > 0 else 0.0
            x, r, F = x_new, r_new, F_new
            J = jac(x, r)
            A = J.T @ J
            g = J.T @ r
            mu *= max(1 / 3, 1 - (2 * rho - 1) ** 3)
            nu = 2.0
            it += 1
            history.append(F)
            if rel < ftol:
                status, message = CONVERGED, "relative cost change below tolerance"
                break
        else:
            mu *= nu
            nu *= 2
            if mu > 1e20 * max(np.max(np.diag(A)), 1e-300):
                status, message = CONVERGED, "no further decrease possible"
                break

    free = free_mask(x, g)
    active = [n for n, f in zip(problem.names, free) if not f]
    raw = np.asarray(problem.residual(x), dtype=float).ravel()
    nfev += 1
    m, n_free = raw.size, int(free.sum())
    Jf = J[:, free]
    norms = np.linalg.norm(Jf, axis=0)
    sv = np.linalg.svd(Jf / np.where(norms > 0, norms, 1.0), compute_uv=False) if n_free else np.zeros(0)
    cov = np.full((x.size, x.size), np.nan)
    ci = np.full(x.size, np.nan)
    if n_free and (norms.min() == 0 or sv.min() < SINGULAR_RTOL * sv.max()):
        status = SINGULAR
        message = "Jacobian is rank deficient at the solution"
    dof = m - n_free
    if n_free and dof > 0:
        s2 = 2 * F / dof
        cf = s2 * np.linalg.pinv(Jf.T @ Jf)
        cov[np.ix_(free, free)] = cf
        ci[free] = stats.t.ppf(0.975, dof) * np.sqrt(np.clip(np.diag(cf), 0, None))
    for k, f in enumerate(free):
        if not f:
            ci[k] = 0.0
    return FitResult(
        names=list(problem.names), x=x, ci95=ci, covariance=cov,
        rms=float(np.sqrt(np.mean(raw**2))), cost=float(F), status=status,
        iterations=it, nfev=nfev, active=active, history=history,
        singular_values=sv, message=message, residuals=raw,
    )


# -- peak extraction -----------------------------------------------------------

@dataclass(frozen=True)
class Peak:
    slice_value: float  # e.g. field of the sweep slice
    x: float
    height: float
    width: float  # FWHM, same units as x
    uncertainty: float


class PeakSet(list):
    """List of :class:`Peak`, ordered by slice then x."""

    def positions(self):
        return np.array([[p.slice_value, p.x] for p in self]).reshape(-1, 2)


def _slice_peaks(x, y, min_prominence):
    n = y.size
    if n < 3:
        raise ValueError("need at least 3 points per slice")
    # strict rise on the left, non-strict fall on the right: plateaus resolve to the lower x
    idx = np.nonzero((y[1:-1] > y[:-2]) & (y[1:-1] >= y[2:]))[0] + 1
    if idx.size == 0:
        return []
    prom = peak_prominences(y, idx)[0]
    keep = prom >= min_prominence
    idx, prom = idx[keep], prom[keep]
    if idx.size == 0:
        return []
    widths = peak_widths(y, idx, rel_height=0.5, prominence_data=peak_prominences(y, idx))[0]
    out = []
    for k, w in zip(idx, widths):
        y0, y1, y2 = y[k - 1], y[k], y[k + 1]
        dx = 0.5 * (x[k + 1] - x[k - 1])
        denom = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
        shift = float(np.clip(shift, -0.5, 0.5))
        xp = x[k] + shift * dx
        height = y1 - 0.25 * (y0 - y2) * shift
        out.append((float(xp), float(height), float(max(w * dx, dx * 1e-12)), float(dx / np.sqrt(12))))
    return out


def extract_peaks(x, stack, min_prominence=0.0, slices=None):
    """Local maxima of each row of ``stack`` sampled on ``x``.

    Peak positions are refined by a parabola through the three samples around
    each maximum. ``slices`` labels the rows (e.g. the field of each ODMR
    trace); defaults to the row index.
    """
    x = np.asarray(x, dtype=float)
    stack = np.atleast_2d(np.asarray(stack, dtype=float))
    if stack.shape[1] != x.size:
        raise ValueError("stack rows must match the x grid")
    if slices is None:
        slices = np.arange(stack.shape[0], dtype=float)
    peaks = PeakSet()
    for s, row in zip(slices, stack):
        for xp, hgt, w, u in _slice_peaks(x, row, min_prominence):
            peaks.append(Peak(float(s), xp, hgt, w, u))
    return peaks


# -- spin Hamiltonian fits -----------------------------------------------------

SPIN_FIELDS = {
    "g_xx": ("g_principal", 0), "g_yy": ("g_principal", 1), "g_zz": ("g_principal", 2),
    "A_xx": ("A_principal", 0), "A_yy": ("A_principal", 1), "A_zz": ("A_principal", 2),
    "theta_xx": ("A_angles", 0), "theta_yy": ("A_angles", 1), "theta_zz": ("A_angles", 2),
}


def spin_vector(p: SpinParams, names):
    return np.array([getattr(p, SPIN_FIELDS[n][0])[SPIN_FIELDS[n][1]] for n in names], dtype=float)


def with_values(p: SpinParams, names, values):
    groups = {}
    for n, v in zip(names, values):
        attr, k = SPIN_FIELDS[n]
        groups.setdefault(attr, list(getattr(p, attr)))[k] = float(v)
    return p.replace(**{a: tuple(v) for a, v in groups.items()})


def modeled_transitions(p: SpinParams, B, axis="z", geometry="par", floor=1e-3, nuclear=True):
    """Frequencies (MHz) of transitions visible in a drive geometry at field B (T)."""
    u = axis_vector(axis)
    es = solve(p, B * u)
    t = transition_arrays(es, p, nuclear=nuclear)
    w = t["par"] if geometry == "par" else t["perp"]
    if w.max() <= 0:
        return np.zeros(0)
    keep = (w >= floor * w.max()) & (t["freq"] > 0)
    return np.sort(t["freq"][keep])


def spin_peak_residuals(p, names, values, fields, freqs, axis="z", geometry="par", floor=1e-3):
    q = with_values(p, names, values)
    res = np.empty(len(freqs))
    cache = {}
    for k, (B, f) in enumerate(zip(fields, freqs)):
        if B not in cache:
            cache[B] = modeled_transitions(q, B, axis, geometry, floor)
        model = cache[B]
        res[k] = f - model[np.argmin(np.abs(model - f))] if model.size else f
    return res


def initial_spin_guess(fields, freqs, I=3.5):
    """Heuristic start: g_zz from the high-field slope, A_zz from the zero-field spread."""
    fields = np.asarray(fields, dtype=float)
    freqs = np.asarray(freqs, dtype=float)
    hi = fields >= np.quantile(fields, 0.8)
    lo = fields <= np.quantile(fields, 0.2)
    top = []
    for B in np.unique(fields[hi]):
        top.append((B, freqs[fields == B].max()))
    top = np.array(top)
    slope = np.polyfit(top[:, 0], top[:, 1], 1)[0] if len(top) > 1 else 2 * MU_B
    g_zz = abs(slope) / MU_B
    spread = np.ptp(freqs[lo]) if lo.any() else 100.0
    A_zz = max(spread / (I + 0.5), 1.0)
    return g_zz, A_zz


def fit_spin_params(peaks, init: SpinParams, free=("g_zz", "A_xx", "A_yy", "A_zz"), axis="z",
                    geometry="par", floor=1e-3, bounds=None, identifiability_rtol=1e-6):
    """Fit Hamiltonian parameters to observed peak positions.

    ``peaks`` is a :class:`PeakSet` whose ``slice_value`` is the field in tesla
    and ``x`` the frequency in MHz, or an (N, 2) array of (B, f). Each observed
    peak is paired with the nearest modeled transition whose strength in the
    drive geometry exceeds ``floor`` of the strongest one.

    Returns ``(FitResult, SpinParams)``.
    """
    data = peaks.positions() if isinstance(peaks, PeakSet) else np.asarray(peaks, dtype=float)
    fields, freqs = data[:, 0], data[:, 1]
    names = list(free)
    for n in names:
        if n not in SPIN_FIELDS:
            raise FitError(f"unknown spin parameter {n!r}")
    x0 = spin_vector(init, names)
    lower, upper = [], []
    for n, v in zip(names, x0):
        if bounds and n in bounds:
            a, b = bounds[n]
        elif n.startswith("g_"):
            a, b = 0.0, 4.0
        elif n.startswith("theta"):
            a, b = 0.0, 180.0
        else:
            a, b = -2000.0, 2000.0
        lower.append(a)
        upper.append(b)
    problem = FitProblem(
        residual=lambda x: spin_peak_residuals(init, names, x, fields, freqs, axis, geometry, floor),
        x0=x0, names=names, lower=lower, upper=upper, model="spin")
    result = least_squares(problem)
    sv = result.singular_values
    if sv is not None and sv.size and sv.min() < identifiability_rtol * sv.max():
        warnings.warn("spin fit is poorly identifiable: Jacobian singular values span "
                      f"{sv.max() / max(sv.min(), 1e-300):.3g}", RuntimeWarning, stacklevel=2)
    return result, with_values(init, names, result.x)


# -- ESR ---------------------------------------------------------------------

@dataclass(frozen=True)
class Resonance:
    B_res: float  # T
    intensity: float
    pairs: tuple = ()


def esr_direction(angle_from_c, azimuth=0.0):
    t, f = np.deg2rad(angle_from_c), np.deg2rad(azimuth)
    return np.array([np.sin(t) * np.cos(f), np.sin(t) * np.sin(f), np.cos(t)])


def esr_resonance_fields(p: SpinParams, f_mw_ghz, angle_from_c=0.0, B_range=(0.0, 1.0), n=401,
                         azimuth=0.0, floor=1e-3, merge_tol=1e-7, nuclear=True):
    """Resonance fields of a fixed-frequency ESR experiment.

    The field points ``angle_from_c`` degrees away from c (in the plane at
    ``azimuth`` from x). The microwave field is taken perpendicular to B0,
    averaged over that plane. Coincident resonances are merged with summed
    intensity. Transitions weaker than ``floor`` (in Bohr magnetons squared)
    are dropped.
    """
    if not f_mw_ghz > 0:
        raise ValueError("microwave frequency must be positive")
    f_mw = f_mw_ghz * 1e3
    u = esr_direction(angle_from_c, azimuth)
    sweep = field_sweep(p, u, B_range, n, warn_overlap=0.0)
    found = []
    for a in range(p.dim):
        for b in range(a + 1, p.dim):
            f = np.abs(sweep.levels[:, b] - sweep.levels[:, a]) - f_mw
            for k in np.nonzero(np.sign(f[:-1]) * np.sign(f[1:]) <= 0)[0]:
                if f[k] == 0 and k > 0:
                    continue

                def g(B, kr=k):
                    e = sweep.energies_at(B, kr)
                    return abs(e[b] - e[a]) - f_mw

                try:
                    Bres = brentq(g, sweep.fields[k], sweep.fields[k + 1], xtol=1e-12)
                except ValueError:
                    continue
                es = solve(p, Bres * u, sweep.nuclear_zeeman)
                e = sweep.energies_at(Bres, k)
                ia = int(np.argmin(np.abs(es.levels - e[a])))
                ib = int(np.argmin(np.abs(es.levels - e[b])))
                t = transition_arrays(es, p, nuclear=nuclear, drive=("plane", u))
                # degenerate partners: share the subspace total so merged sums stay basis-free
                da = np.abs(es.levels - es.levels[ia]) < 1e-6
                db = np.abs(es.levels - es.levels[ib]) < 1e-6
                sel = (da[t["i"]] & db[t["j"]]) | (db[t["i"]] & da[t["j"]])
                strength = float(t["drive"][sel].sum()) / (da.sum() * db.sum())
                if strength >= floor:
                    found.append((Bres, strength, (a, b)))
    found.sort()
    merged = []
    for Bres, s, pair in found:
        if merged and abs(Bres - merged[-1][0]) < merge_tol:
            B0, s0, pairs = merged[-1]
            merged[-1] = (B0, s0 + s, pairs + (pair,))
        else:
            merged.append((Bres, s, (pair,)))
    return [Resonance(float(B), float(s), pr) for B, s, pr in merged]
