"""Closed-form time-domain signals: Rabi driving, g2(tau), exponential decays.

Angular quantities (Rabi frequency, detuning) are in rad/us and times in us,
so a detuning of ``df`` MHz is ``2*pi*df`` rad/us.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .fitting import FitProblem, least_squares
from .lineshape import SpectrumTrace


class QuadratureWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class RabiParams:
    omega_R: float  # rad/us
    delta: float = 0.0  # rad/us, centre detuning
    gamma: float = 0.0  # 1/us
    detuning_sigma: float = 0.0  # rad/us
    drive_sigma: float = 0.0  # fractional std-dev of omega_R

    def __post_init__(self):
        if self.omega_R < 0 or self.gamma < 0:
            raise ValueError("omega_R and gamma must be non-negative")
        if self.detuning_sigma < 0 or self.drive_sigma < 0:
            raise ValueError("inhomogeneous widths must be non-negative")


@dataclass(frozen=True)
class G2Params:
    a: float
    b: float
    tau1: float  # us
    tau2: float  # us

    def __post_init__(self):
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise ValueError("tau1 and tau2 must be positive")


@dataclass(frozen=True)
class DecayParams:
    amplitude: float
    tau: float
    baseline: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def _rabi(t, delta, omega, gamma, form):
    if form == "printed":
        eff = np.sqrt((delta + gamma) ** 2 + omega**2)
    elif form == "symmetric":
        eff = np.sqrt(delta**2 + gamma**2 + omega**2)
    else:
        raise ValueError(f"unknown Rabi form {form!r}")
    denom = delta**2 + omega**2 + gamma**2
    amp = np.divide(omega**2, denom, out=np.zeros(np.broadcast(omega, denom).shape), where=denom > 0)
    return amp * np.sin(0.5 * t * eff) ** 2 * np.exp(-gamma * t)


def rabi_signal(t, p: RabiParams, form="printed"):
    """Damped Rabi population transfer.

    ``form="printed"`` uses (delta + gamma)^2 inside the generalized Rabi
    frequency; ``form="symmetric"`` uses delta^2 + gamma^2.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be non-negative")
    return _rabi(t, p.delta, p.omega_R, p.gamma, form)


@lru_cache(maxsize=None)
def _normal_rule(n, half_width=8.0):
    """Trapezoid nodes/weights for a standard normal average over +/- half_width sigma."""
    x = np.linspace(-half_width, half_width, n)
    w = np.exp(-0.5 * x * x)
    w /= w.sum()
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def _average(t, delta0, p, form, n):
    """Ensemble average at matching arrays ``t`` and ``delta0``."""
    xd, wd = _normal_rule(n) if p.detuning_sigma > 0 else (np.zeros(1), np.ones(1))
    xf, wf = _normal_rule(n) if p.drive_sigma > 0 else (np.zeros(1), np.ones(1))
    dd = (p.detuning_sigma * xd)[:, None]
    om = (p.omega_R * np.clip(1.0 + p.drive_sigma * xf, 0.0, None))[None, :]
    W = wd[:, None] * wf[None, :]
    out = np.empty(t.size)
    chunk = max(1, int(4e6 // W.size))
    for s in range(0, t.size, chunk):
        tt = t[s:s + chunk, None, None]
        dl = delta0[s:s + chunk, None, None] + dd[None]
        out[s:s + chunk] = np.einsum("kij,ij->k", _rabi(tt, dl, om[None], p.gamma, form), W)
    return out


def rabi_inhomogeneous(t, p: RabiParams, form="printed", n_min=32, n_max=8192, atol=1e-4,
                       delta0=None, n_nodes=None):
    """Rabi signal averaged over Gaussian detuning and Gaussian fractional drive spread.

    The average uses a truncated-normal trapezoid rule of ``n`` nodes per
    dimension; ``n`` grows fourfold until two successive rules agree within
    ``atol``. A :class:`QuadratureWarning` is issued if ``n_max`` is reached
    first. A fixed ``n_nodes`` skips the refinement.
    """
    y, _ = _ensemble(t, p, form, n_min, n_max, atol, delta0, n_nodes)
    return y


def _ensemble(t, p, form="printed", n_min=32, n_max=8192, atol=1e-4, delta0=None, n_nodes=None):
    t = np.asarray(t, dtype=float)
    shape = t.shape
    tf = t.ravel()
    if np.any(tf < 0):
        raise ValueError("time must be non-negative")
    d0 = np.full(tf.size, p.delta) if delta0 is None else np.broadcast_to(delta0, shape).ravel().astype(float)
    if p.detuning_sigma == 0 and p.drive_sigma == 0:
        return _rabi(tf, d0, p.omega_R, p.gamma, form).reshape(shape), 1
    if n_nodes is not None:
        return _average(tf, d0, p, form, int(n_nodes)).reshape(shape), int(n_nodes)
    two_d = p.detuning_sigma > 0 and p.drive_sigma > 0
    cap = min(n_max, 1024) if two_d else n_max
    n = n_min
    prev = _average(tf, d0, p, form, n)
    while True:
        n4 = 4 * n
        cur = _average(tf, d0, p, form, n4)
        err = np.max(np.abs(cur - prev)) if cur.size else 0.0
        if err < atol:
            # the coarser rule already met the tolerance; report it as sufficient
            return cur.reshape(shape), n
        if 4 * n4 > cap:
            warnings.warn(f"Rabi ensemble average not converged: change {err:.2e} at {n4} nodes",
                          QuadratureWarning, stacklevel=3)
            return cur.reshape(shape), n4
        n, prev = n4, cur


def pulsed_odmr_spectrum(freqs_mhz, f0_mhz, p: RabiParams, t_pi, form="printed"):
    """Population transfer after a pulse of length ``t_pi`` (us) versus drive frequency."""
    if not t_pi > 0:
        raise ValueError("t_pi must be positive")
    f = np.asarray(freqs_mhz, dtype=float)
    delta = 2 * np.pi * (f - f0_mhz) + p.delta
    y = rabi_inhomogeneous(np.full(f.shape, float(t_pi)), p, form, delta0=delta)
    return SpectrumTrace(f, y, "drive frequency", "MHz", {"f0": f0_mhz, "t_pi": t_pi})


def g2_model(tau, p: G2Params):
    """1 - a exp(-|tau|/tau1) + b exp(-|tau|/tau2)."""
    tau = np.abs(np.asarray(tau, dtype=float))
    return 1.0 - p.a * np.exp(-tau / p.tau1) + p.b * np.exp(-tau / p.tau2)


def correct_dark_counts(g2_raw, dark_fraction):
    """Remove uncorrelated background from a normalized g2.

    With signal fraction rho = 1 - dark_fraction, g2 = (g2_raw - (1 - rho^2)) / rho^2.
    """
    if not 0 <= dark_fraction < 1:
        raise ValueError("dark_fraction must lie in [0, 1)")
    rho = 1.0 - dark_fraction
    return (np.asarray(g2_raw, dtype=float) - (1 - rho**2)) / rho**2


def exp_decay(t, p: DecayParams):
    t = np.asarray(t, dtype=float)
    return p.baseline + p.amplitude * np.exp(-t / p.tau)


# -- fits -------------------------------------------------------------------

def fit_decay(t, y, init=None, bounds=None):
    """Fit baseline + amplitude * exp(-t / tau)."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    base = float(np.median(y[-max(1, y.size // 10):]))
    amp = float(y[0] - base)
    target = base + amp / np.e
    k = int(np.argmin(np.abs(y - target)))
    start = {"amplitude": amp, "tau": float(max(t[k] - t[0], np.ptp(t) / 20)), "baseline": base}
    start.update(init or {})
    lim = {"amplitude": (-np.inf, np.inf), "tau": (1e-12, np.inf), "baseline": (-np.inf, np.inf)}
    lim.update(bounds or {})
    names = ["amplitude", "tau", "baseline"]
    problem = FitProblem(lambda q: exp_decay(t, DecayParams(q[0], q[1], q[2])) - y,
                         [start[n] for n in names], names,
                         [lim[n][0] for n in names], [lim[n][1] for n in names], model="decay")
    return least_squares(problem)


def fit_g2(tau, g2, init=None, bounds=None):
    """Fit the antibunching/bunching model to a normalized autocorrelation."""
    tau = np.asarray(tau, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    span = float(np.ptp(tau))
    start = {"a": 1.0, "b": 0.1, "tau1": span / 100, "tau2": span / 5}
    start.update(init or {})
    lim = {"a": (0.0, 2.0), "b": (0.0, 2.0), "tau1": (1e-9, span), "tau2": (1e-9, 10 * span)}
    lim.update(bounds or {})
    names = ["a", "b", "tau1", "tau2"]
    problem = FitProblem(lambda q: g2_model(tau, G2Params(*q)) - g2, [start[n] for n in names], names,
                         [lim[n][0] for n in names], [lim[n][1] for n in names], model="g2")
    return least_squares(problem)


RABI_FIT_PARAMS = ("omega_R", "delta", "gamma", "contrast")


def fit_rabi(t, y, init, bounds=None, form="printed", scale=True, free=None):
    """Fit omega_R, delta, gamma (and an overall contrast when ``scale``) to a Rabi trace.

    Inhomogeneous widths in ``init`` are held fixed, as are parameters left
    out of ``free``. With the contrast free, a homogeneous trace cannot
    separate delta from omega_R and the contrast, so hold delta in that case.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    base = init if isinstance(init, RabiParams) else RabiParams(**init)
    start = {"omega_R": base.omega_R, "delta": base.delta, "gamma": base.gamma,
             "contrast": float(np.ptp(y)) or 1.0}
    names = [n for n in RABI_FIT_PARAMS if (scale or n != "contrast") and (free is None or n in free)]
    if free is not None and set(free) - set(RABI_FIT_PARAMS):
        raise ValueError(f"unknown Rabi parameter(s) {sorted(set(free) - set(RABI_FIT_PARAMS))}")
    lim = {"omega_R": (0.0, np.inf), "delta": (-np.inf, np.inf), "gamma": (0.0, np.inf),
           "contrast": (-np.inf, np.inf)}
    lim.update(bounds or {})

    # settle the quadrature once at the start; re-refining on every evaluation is wasteful
    _, n_nodes = _ensemble(t, base, form)

    def unpack(q):
        v = dict(start)
        v.update(zip(names, q))
        return v

    def residual(q):
        v = unpack(q)
        p = replace(base, omega_R=v["omega_R"], delta=v["delta"], gamma=v["gamma"])
        c = v["contrast"] if scale else 1.0
        return c * rabi_inhomogeneous(t, p, form, n_nodes=n_nodes) - y

    problem = FitProblem(residual, [start[n] for n in names], names,
                         [lim[n][0] for n in names], [lim[n][1] for n in names], model="rabi")
    return least_squares(problem)
