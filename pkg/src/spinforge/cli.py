"""spinforge command line: site table, simulations and fits, emitting CSV/JSON.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O or data error.
"""

from __future__ import annotations

import argparse
import json
import re
import sys

import numpy as np

from . import __version__
from . import dynamics as dyn
from . import io
from . import lineshape as ls
from .fitting import FitError, esr_resonance_fields, extract_peaks, fit_spin_params
from .sites import ORBITALS, Provenance, UnknownSiteError, load_database, lookup, spin_params
from .spin_core import axis_vector, clock_transitions, field_sweep, solve, transition_arrays

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

UNITS = {
    "field": ("T", {"T": 1.0, "mT": 1e-3, "G": 1e-4}),
    "freq": ("MHz", {"Hz": 1e-6, "kHz": 1e-3, "MHz": 1.0, "GHz": 1e3}),
    "time": ("us", {"ns": 1e-3, "us": 1.0, "µs": 1.0, "ms": 1e3}),
    "angle": ("deg", {"deg": 1.0}),
}


class UsageError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


_PART = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-zµ]*)\s*$")


def parse_range(text, kind, default_unit=None):
    """``start:stop[unit]:n`` -> (start, stop, n) in the base unit of ``kind``.

    A unit on either bound applies to both unless each has its own.
    """
    base, table = UNITS[kind]
    parts = str(text).split(":")
    if len(parts) != 3:
        raise UsageError(f"range {text!r} must look like start:stop[unit]:n")
    vals, units = [], []
    for p in parts[:2]:
        m = _PART.match(p)
        if not m:
            raise UsageError(f"bad range bound {p!r} in {text!r}")
        vals.append(float(m[1]))
        units.append(m[2] or None)
    shared = units[1] or units[0] or default_unit or base
    scale = []
    for u in units:
        u = u or shared
        if u not in table:
            raise UsageError(f"unknown unit {u!r} for {kind}; use one of {', '.join(table)}")
        scale.append(table[u])
    try:
        n = int(parts[2])
    except ValueError:
        raise UsageError(f"point count in {text!r} must be an integer") from None
    lo, hi = vals[0] * scale[0], vals[1] * scale[1]
    if n < 2:
        raise UsageError(f"range {text!r} needs at least 2 points")
    if not hi > lo:
        raise UsageError(f"range {text!r} is empty or reversed")
    return lo, hi, n


def grid(text, kind, default_unit=None):
    lo, hi, n = parse_range(text, kind, default_unit)
    return np.linspace(lo, hi, n)


def parse_overrides(items):
    """``KEY=v`` or ``KEY=v1,v2,v3`` pairs -> dict of floats / float tuples."""
    out = {}
    for item in items or ():
        if isinstance(item, dict):
            out.update(item)
            continue
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            vals = tuple(float(x) for x in v.split(","))
        except ValueError:
            raise UsageError(f"--set {k}: values must be numbers") from None
        out[k.strip()] = vals[0] if len(vals) == 1 else vals
    allowed = {"g_perp", "g_zz", "g", "A", "A_signs", "theta", "gN_muN"}
    bad = set(out) - allowed
    if bad:
        raise UsageError(f"unknown spin override(s) {sorted(bad)}; allowed {sorted(allowed)}")
    for k in ("g", "A", "A_signs", "theta"):
        if k in out and len(np.atleast_1d(out[k])) != 3:
            raise UsageError(f"override {k} needs three values")
    return out


def _site_params(args, orbital=None):
    db = load_database(args.db)
    rec = lookup(db, args.site)
    p, notes = spin_params(rec, orbital or args.orbital, parse_overrides(args.set), warn=False)
    _print_notes(rec, orbital or args.orbital, notes)
    return rec, p


def _print_notes(rec, orbital, notes):
    for n in notes:
        sys.stderr.write(f"warning: {rec.key} {orbital}: {n}\n")


def _config(args):
    skip = {"out", "config", "func", "db"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _emit(args, text):
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        io.atomic_write(args.out, text)


def _csv(args, columns, rows, units, meta=None):
    _emit(args, io.render_csv(columns, rows, units, _config(args), meta))


# -- sites ---------------------------------------------------------------------

def _fmt_q(q):
    tag = {Provenance.LITERATURE: " [literature]", Provenance.PARTIAL: " [partial]",
           Provenance.UNRESOLVED: " [unresolved]", Provenance.BOUNDED: " [bounded]",
           Provenance.UPPER_BOUND: " [upper bound]"}.get(q.provenance, "")
    return q.raw + tag


def cmd_sites(args):
    db = load_database(args.db)
    if args.action == "list":
        lines = [f"{'key':9s} {'site':5s} {'assign':7s} {'ES1-GS1 nm':12s} {'GS2-GS1 GHz':12s} tau ns"]
        for r in db.values():
            lines.append(f"{r.key:9s} {r.site:5s} {r.assignment:7s} {r.es1_gs1_nm.raw:12s} "
                         f"{r.gs2_gs1_ghz.raw:12s} {r.lifetime_ns.raw}")
        _emit(args, "\n".join(lines) + "\n")
        return EXIT_OK
    if not args.name:
        raise UsageError("sites show needs a site, e.g. 'sites show 4H beta'")
    rec = lookup(db, args.name if len(args.name) > 1 else args.name[0])
    if args.json:
        _emit(args, io.dump_json(rec.to_dict()))
        return EXIT_OK
    lines = [f"{rec.polytype}-SiC {rec.site} ({rec.key}), assignment {rec.assignment}",
             f"  ES1 - GS1: {_fmt_q(rec.es1_gs1_nm)} nm  ({rec.zpl_ghz:.3f} GHz)",
             f"  GS2 - GS1: {_fmt_q(rec.gs2_gs1_ghz)} GHz",
             f"  ES2 - ES1: {_fmt_q(rec.es2_es1_ghz)} GHz",
             f"  ES3 - ES2: {_fmt_q(rec.es3_es2_ghz)} GHz",
             f"  DW: {_fmt_q(rec.dw_percent)} %",
             f"  lifetime: {_fmt_q(rec.lifetime_ns)} ns"]
    for name in ORBITALS:
        orb = rec.orbitals[name]
        if not orb.resolved:
            lines.append(f"  {name}: unresolved")
            continue
        lines.append(f"  {name}: g_perp = {_fmt_q(orb.g_perp)}, g_zz = {_fmt_q(orb.g_zz)}")
        lines.append(f"  {name}: A (xx, yy, zz) = ({', '.join(_fmt_q(q) for q in orb.A)}) MHz")
        if orb.theta is not None:
            lines.append(f"  {name}: theta (xx, yy, zz) = ({', '.join(_fmt_q(q) for q in orb.theta)}) deg")
    _emit(args, "\n".join(lines) + "\n")
    return EXIT_OK


# -- simulations ---------------------------------------------------------------

def cmd_levels(args):
    _, p = _site_params(args)
    lo, hi, n = parse_range(args.b_range, "field", "mT")
    sw = field_sweep(p, args.b_axis, (lo, hi), n)
    d = p.dim
    cols = ["B_mT"] + [f"level_{k:02d}" for k in range(d)] + [f"label_{k:02d}" for k in range(d)]
    rows = ([B * 1e3, *lev, *lab] for B, lev, lab in zip(sw.fields, sw.levels, sw.labels))
    units = {"B_mT": "mT", **{c: "MHz" for c in cols[1:d + 1]}}
    _csv(args, cols, rows, units, {"site": args.site, "orbital": args.orbital, "axis": args.b_axis,
                                   "labels": "energy-sorted index of each tracked level"})
    return EXIT_OK


def odmr_map(p, fields, freqs, axis="z", geometry="par", linewidth=5.0, temperature=None, nuclear=False):
    """Sum of unit-area Lorentzians at each transition, weighted by strength x thermal weight.

    The drive couples to the electron moment only unless ``nuclear`` is set.
    """
    u = axis_vector(axis)
    key = {"par": "par", "perp": "perp"}[geometry]
    g = 0.5 * linewidth
    out = np.zeros((len(fields), len(freqs)))
    for k, B in enumerate(fields):
        t = transition_arrays(solve(p, B * u), p, temperature, nuclear=nuclear)
        w = t[key] * t["thermal"]
        out[k] = (w[None, :] * g / (np.pi * ((freqs[:, None] - t["freq"][None, :]) ** 2 + g * g))).sum(axis=1)
    return out


def cmd_odmr(args):
    _, p = _site_params(args)
    fields = grid(args.b_range, "field", "mT")
    freqs = grid(args.f_range, "freq", "MHz")
    if not args.linewidth > 0:
        raise UsageError("--linewidth must be positive")
    m = odmr_map(p, fields, freqs, args.b_axis, args.geometry, args.linewidth, args.temperature,
                 args.nuclear_drive)
    rows = ([B * 1e3, f, v] for B, row in zip(fields, m) for f, v in zip(freqs, row))
    _csv(args, ["B_mT", "f_MHz", "intensity"], rows, {"B_mT": "mT", "f_MHz": "MHz", "intensity": "1/MHz"},
         {"site": args.site, "orbital": args.orbital, "geometry": args.geometry})
    return EXIT_OK


def cmd_esr(args):
    db = load_database(args.db)
    rec = lookup(db, args.site)
    lo, hi, n = parse_range(args.b_range, "field", "T")
    angles = grid(args.angles, "angle", "deg")
    rows = []
    for orb in args.orbitals.split(","):
        p, notes = spin_params(rec, orb.strip(), parse_overrides(args.set), warn=False)
        _print_notes(rec, orb.strip(), notes)
        for a in angles:
            for r in esr_resonance_fields(p, args.f_mw, float(a), (lo, hi), n, floor=args.floor):
                rows.append([float(a), orb.strip(), r.B_res * 1e3, r.intensity])
    _csv(args, ["angle_deg", "orbital", "B_res_mT", "intensity"], rows,
         {"angle_deg": "deg", "B_res_mT": "mT", "intensity": "muB^2"},
         {"site": args.site, "f_mw_GHz": args.f_mw})
    return EXIT_OK


def cmd_lineshape(args):
    f0 = args.f0
    if args.site:
        f0 = lookup(load_database(args.db), args.site).zpl_ghz
    x = grid(args.grid, "freq", "GHz") / 1e3  # GHz, relative to f0
    shells = ls.default_shells(args.shift_c, args.shift_si, args.n_c, args.n_si)
    tr = ls.isotope_lineshape(0.0, shells, args.fwhm, x, args.profile, args.eta, args.prob_floor)
    rows = ([f0 + xi, xi, yi] for xi, yi in zip(tr.x, tr.y))
    _csv(args, ["f_GHz", "detuning_GHz", "intensity"], rows,
         {"f_GHz": "GHz", "detuning_GHz": "GHz", "intensity": "1/GHz"},
         {"f0_GHz": format(f0, ".12g"), "retained_mass": format(tr.meta["retained_mass"], ".12g")})
    return EXIT_OK


def cmd_clock(args):
    _, p = _site_params(args)
    lo, hi, n = parse_range(args.b_range, "field", "mT")
    found = clock_transitions(p, axis=args.b_axis, B_range=(lo, hi), n=n, tol=args.tol)
    rows = ([c.a, c.b, c.B_clock * 1e3, c.freq, c.curvature * 1e-6, c.slope * 1e-3] for c in found)
    _csv(args, ["level_a", "level_b", "B_clock_mT", "freq_MHz", "curvature_MHz_per_mT2", "slope_MHz_per_mT"],
         rows, {"B_clock_mT": "mT", "freq_MHz": "MHz"}, {"site": args.site, "orbital": args.orbital})
    return EXIT_OK


def _noise(args, y):
    if args.noise:
        if args.seed is None:
            raise UsageError("--noise needs --seed")
        rng = np.random.default_rng(args.seed)
        y = y + args.noise * rng.standard_normal(y.shape)
    return y


def _rabi_params(args):
    two_pi = 2 * np.pi
    return dyn.RabiParams(two_pi * args.omega_r, two_pi * args.delta, args.gamma,
                          two_pi * args.detuning_sigma, args.drive_sigma)


def cmd_dynamics(args):
    kind = args.kind
    meta = {"model": kind}
    if kind == "rabi":
        t = grid(args.t_range or "0:3us:301", "time", "us")
        y = dyn.rabi_inhomogeneous(t, _rabi_params(args), args.form)
        cols, units, x = ["t_us", "signal"], {"t_us": "us"}, t
    elif kind == "podmr":
        p = _rabi_params(args)
        f = grid(args.f_range or "-10:10MHz:401", "freq", "MHz")
        t_pi = args.t_pi if args.t_pi else np.pi / p.omega_R
        y = dyn.pulsed_odmr_spectrum(f, args.f0, p, t_pi, args.form).y
        cols, units, x = ["f_MHz", "signal"], {"f_MHz": "MHz"}, f
        meta["t_pi_us"] = format(t_pi, ".12g")
    elif kind == "g2":
        tau = grid(args.t_range or "0:12us:1201", "time", "us")
        y = dyn.g2_model(tau, dyn.G2Params(args.a, args.b, args.tau1, args.tau2))
        cols, units, x = ["tau_us", "g2"], {"tau_us": "us"}, tau
    elif kind == "decay":
        t = grid(args.t_range or "0:1000ns:501", "time", "ns") * 1e3  # ns
        y = dyn.exp_decay(t, dyn.DecayParams(args.amplitude, args.tau, args.baseline))
        cols, units, x = ["t_ns", "signal"], {"t_ns": "ns"}, t
    else:
        raise UsageError(f"unknown dynamics model {kind!r}")
    y = _noise(args, y)
    _csv(args, cols, zip(x, y), units, meta)
    return EXIT_OK


# -- fits ----------------------------------------------------------------------

SCHEMAS = {
    "g2": ("tau_us", "g2"),
    "decay": ("t_ns", "signal"),
    "rabi": ("t_us", "signal"),
    "isotope": ("detuning_GHz", "intensity"),
    "spin": ("B_mT", "f_MHz"),
}


def _bounds(args):
    if not args.bounds:
        return None
    raw = io.load_yaml(args.bounds)
    try:
        return {k: (float(v[0]), float(v[1])) for k, v in raw.items()}
    except (TypeError, ValueError, IndexError):
        raise io.SchemaError(f"{args.bounds}: bounds must map names to [lower, upper]") from None


def _free(args, default):
    if not args.free:
        return default
    return tuple(s.strip() for s in args.free.split(",") if s.strip())


def cmd_fit(args):
    cols = SCHEMAS[args.model]
    data = io.read_csv(args.data, required=cols)
    x, y = data[cols[0]], data[cols[1]]
    init = io.load_yaml(args.init) if args.init else {}
    bounds = _bounds(args)
    extra = {}
    with np.errstate(all="ignore"):
        if args.model == "g2":
            res = dyn.fit_g2(x, y, init, bounds)
        elif args.model == "decay":
            res = dyn.fit_decay(x, y, init, bounds)
        elif args.model == "rabi":
            two_pi = 2 * np.pi
            if "omega_R" not in init:
                spec = np.abs(np.fft.rfft(y - y.mean()))
                fr = np.fft.rfftfreq(y.size, x[1] - x[0])
                init["omega_R"] = float(fr[np.argmax(spec[1:]) + 1])
            start = dyn.RabiParams(two_pi * init.get("omega_R"), two_pi * init.get("delta", 0.0),
                                   init.get("gamma", 0.0), two_pi * init.get("detuning_sigma", 0.0),
                                   init.get("drive_sigma", 0.0))
            free = _free(args, ("omega_R", "gamma", "contrast"))
            res = dyn.fit_rabi(x, y, start, bounds, args.form, free=free)
            extra["omega_R_MHz"] = res.params["omega_R"] / two_pi
        elif args.model == "isotope":
            tr = ls.SpectrumTrace(x, y)
            res = ls.fit_isotope_model(tr, init=init or None, bounds=bounds)
        else:
            _, p = _site_params(args)
            B = x * 1e-3
            if "intensity" in data:
                # an ODMR map: one slice per field value
                fields = np.unique(B)
                freqs = np.unique(y)
                stack = np.zeros((fields.size, freqs.size))
                stack[np.searchsorted(fields, B), np.searchsorted(freqs, y)] = data["intensity"]
                peaks = extract_peaks(freqs, stack, args.min_prominence, slices=fields)
            else:
                peaks = np.column_stack([B, y])
            free = _free(args, ("g_zz", "A_xx", "A_yy", "A_zz"))
            res, _ = fit_spin_params(peaks, p, free, args.b_axis, args.geometry, bounds=bounds)
    out = {"model": args.model, "tool_version": __version__, "config_hash": io.config_hash(_config(args)),
           **res.to_dict()}
    if extra:
        out["derived"] = extra
    _emit(args, io.dump_json(out))
    if not res.converged:
        raise NumericalError(f"fit ended with status {res.status}: {res.message}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _common(p, site=True):
    p.add_argument("--out", "-o", help="output file (default stdout); written atomically")
    p.add_argument("--config", help="YAML file of option defaults (keys are option names)")
    p.add_argument("--db", help="site database file (default: bundled, or $SPINFORGE_DB)")
    p.add_argument("--seed", type=int, help="RNG seed, required for any noise")
    if site:
        p.add_argument("--site", default="4H:beta", help="site key such as 4H:beta")
        p.add_argument("--orbital", default="GS1", choices=ORBITALS)
        p.add_argument("--set", action="append", metavar="KEY=VAL",
                       help="spin override: g_perp, g_zz, g, A, A_signs, theta, gN_muN (lists comma separated)")
        p.add_argument("--b-axis", default="z", help="field direction: x, y, z or 'a,b,c'")


def build_parser():
    ap = argparse.ArgumentParser(prog="spinforge", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"spinforge {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("sites", help="list or show site records")
    p.add_argument("action", choices=("list", "show"))
    p.add_argument("name", nargs="*", help="e.g. '4H beta' or 4H:beta")
    p.add_argument("--json", action="store_true")
    _common(p, site=False)
    p.set_defaults(func=cmd_sites)
    subs["sites"] = p

    p = sub.add_parser("levels", help="tracked energy levels vs field")
    _common(p)
    p.add_argument("--b-range", default="0:50mT:501")
    p.set_defaults(func=cmd_levels)
    subs["levels"] = p

    p = sub.add_parser("odmr", help="ODMR map vs field and drive frequency")
    _common(p)
    p.add_argument("--b-range", default="0:50mT:51")
    p.add_argument("--f-range", default="0:1500MHz:751")
    p.add_argument("--geometry", choices=("par", "perp"), default="par")
    p.add_argument("--linewidth", type=float, default=5.0, help="Lorentzian FWHM, MHz")
    p.add_argument("--temperature", type=float, help="K; weights by population difference")
    p.add_argument("--nuclear-drive", action="store_true", help="include the nuclear moment in the drive")
    p.set_defaults(func=cmd_odmr)
    subs["odmr"] = p

    p = sub.add_parser("esr", help="X-band ESR resonance fields vs angle from c")
    _common(p)
    p.add_argument("--f-mw", type=float, default=9.7, help="GHz")
    p.add_argument("--angles", default="0:90deg:10")
    p.add_argument("--b-range", default="0:1T:401")
    p.add_argument("--orbitals", default="GS1,GS2")
    p.add_argument("--floor", type=float, default=1e-3)
    p.set_defaults(func=cmd_esr)
    subs["esr"] = p

    p = sub.add_parser("lineshape", help="isotope-configuration optical lineshape")
    _common(p, site=False)
    p.add_argument("--site", help="take f0 from this site's ES1-GS1 line")
    p.add_argument("--f0", type=float, default=0.0, help="GHz")
    p.add_argument("--grid", default="-15:70GHz:1701", help="detuning grid")
    p.add_argument("--fwhm", type=float, default=2.0, help="intrinsic FWHM, GHz")
    p.add_argument("--shift-c", type=float, default=22.0, help="GHz per u")
    p.add_argument("--shift-si", type=float, default=2.0, help="GHz per u")
    p.add_argument("--n-c", type=int, default=4)
    p.add_argument("--n-si", type=int, default=12)
    p.add_argument("--profile", choices=sorted(ls.PROFILES), default="gaussian")
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--prob-floor", type=float, default=1e-6)
    p.set_defaults(func=cmd_lineshape)
    subs["lineshape"] = p

    p = sub.add_parser("clock", help="clock transitions (df/dB = 0)")
    _common(p)
    p.add_argument("--b-range", default="0:50mT:501")
    p.add_argument("--tol", type=float, default=0.1, help="MHz/mT")
    p.set_defaults(func=cmd_clock)
    subs["clock"] = p

    p = sub.add_parser("dynamics", help="time-domain model traces")
    p.add_argument("kind", choices=("rabi", "podmr", "g2", "decay"))
    _common(p, site=False)
    p.add_argument("--t-range", help="time grid, e.g. 0:3us:301")
    p.add_argument("--f-range", help="podmr drive grid, e.g. -10:10MHz:401")
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise std-dev")
    p.add_argument("--omega-r", type=float, default=2.0, help="Rabi frequency, MHz")
    p.add_argument("--delta", type=float, default=0.0, help="detuning, MHz")
    p.add_argument("--gamma", type=float, default=0.5, help="decay rate, 1/us")
    p.add_argument("--detuning-sigma", type=float, default=0.0, help="MHz")
    p.add_argument("--drive-sigma", type=float, default=0.0, help="fractional")
    p.add_argument("--form", choices=("printed", "symmetric"), default="printed")
    p.add_argument("--f0", type=float, default=0.0, help="podmr resonance, MHz")
    p.add_argument("--t-pi", type=float, help="podmr pulse length, us (default pi/omega)")
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--b", type=float, default=0.1)
    p.add_argument("--tau1", type=float, default=0.07, help="us")
    p.add_argument("--tau2", type=float, default=2.0, help="us")
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=167.0, help="ns")
    p.add_argument("--baseline", type=float, default=0.0)
    p.set_defaults(func=cmd_dynamics)
    subs["dynamics"] = p

    p = sub.add_parser("fit", help="fit a model to a CSV dataset; writes FitResult JSON")
    p.add_argument("model", choices=sorted(SCHEMAS))
    p.add_argument("--data", required=True, help="CSV; columns: " + "; ".join(
        f"{k}: {', '.join(v)}" for k, v in SCHEMAS.items()))
    p.add_argument("--init", help="YAML of initial values")
    p.add_argument("--bounds", help="YAML of name: [lower, upper]")
    p.add_argument("--form", choices=("printed", "symmetric"), default="printed")
    p.add_argument("--free", help="free parameters, comma separated (rabi: omega_R,gamma,contrast; "
                   "spin: g_zz,A_xx,A_yy,A_zz)")
    p.add_argument("--geometry", choices=("par", "perp"), default="par")
    p.add_argument("--min-prominence", type=float, default=0.0)
    _common(p)
    p.set_defaults(func=cmd_fit)
    subs["fit"] = p
    return ap, subs


def _glue_negative(argv):
    """Attach values like ``-15:70:1701`` to the preceding option.

    argparse reads a token with a leading '-' as an option, which breaks
    ranges and vectors that start below zero.
    """
    out = []
    for tok in argv:
        if (out and out[-1].startswith("--") and "=" not in out[-1]
                and len(tok) > 1 and tok[0] == "-" and (tok[1].isdigit() or tok[1] == ".")):
            out[-1] = f"{out[-1]}={tok}"
        else:
            out.append(tok)
    return out


def parse_args(argv=None):
    ap, subs = build_parser()
    args = ap.parse_args(_glue_negative(sys.argv[1:] if argv is None else list(argv)))
    if getattr(args, "config", None):
        conf = io.load_yaml(args.config)
        sp = subs[args.command]
        dests = {a.dest for a in sp._actions}
        defaults = {}
        for k, v in conf.items():
            d = k.replace("-", "_")
            if d not in dests or d in ("config", "func"):
                sp.error(f"unknown key {k!r} in {args.config}")
            if d == "set" and isinstance(v, dict):
                v = [v]
            defaults[d] = v
        sp.set_defaults(**defaults)
        args = ap.parse_args(argv)
    return args


def _diagnostic(kind, msg, code):
    sys.stderr.write(json.dumps({"error": kind, "message": str(msg), "exit_code": code}) + "\n")
    return code


def main(argv=None):
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except (OSError, io.SchemaError) as e:
        return _diagnostic("io", e, EXIT_IO)
    try:
        return args.func(args)
    except UnknownSiteError as e:
        return _diagnostic("unknown-site", e, EXIT_USAGE)
    except (UsageError, KeyError) as e:
        return _diagnostic("usage", e.args[0] if e.args else e, EXIT_USAGE)
    except (OSError, io.SchemaError) as e:
        return _diagnostic("io", e, EXIT_IO)
    except (FitError, NumericalError, np.linalg.LinAlgError, FloatingPointError) as e:
        return _diagnostic("numerical", e, EXIT_NUMERIC)
    except ValueError as e:
        return _diagnostic("usage", e, EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
