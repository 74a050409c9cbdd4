"""Bundled optical/spin parameters of V4+ sites in SiC.

Table cells are stored verbatim and parsed into :class:`Quantity` objects that
keep the provenance marker. Nothing is defaulted at load time; partially
resolved entries are filled in only by :func:`spin_params`, which warns.
"""

from __future__ import annotations

import difflib
import enum
import os
import re
import warnings
from dataclasses import dataclass, field
from importlib import resources

import yaml

from .constants import nm_to_ghz
from .spin_core import SpinParams

DB_ENV = "SPINFORGE_DB"
ORBITALS = ("GS1", "GS2", "ES1")
GREEK = {"alpha": "α", "beta": "β", "gamma": "γ"}
LATIN = {v: k for k, v in GREEK.items()}
SCALAR_FIELDS = ("es1_gs1_nm", "gs2_gs1_ghz", "es2_es1_ghz", "es3_es2_ghz", "dw_percent", "lifetime_ns")


class Provenance(str, enum.Enum):
    MEASURED = "measured"
    LITERATURE = "literature"  # "*"
    PARTIAL = "partial"  # "**", resolved by comparison with other sites
    UNRESOLVED = "unresolved"  # "-"
    BOUNDED = "bounded"  # "0 < g < 1"
    UPPER_BOUND = "upper-bound"  # "≤ 25"


class SiteDefaultWarning(UserWarning):
    """A partially resolved table entry was replaced by a default for simulation."""


class UnknownSiteError(KeyError):
    def __init__(self, key, suggestions):
        self.key = key
        self.suggestions = list(suggestions)
        hint = f"; did you mean {', '.join(self.suggestions)}?" if self.suggestions else ""
        super().__init__(f"unknown site {key!r}{hint}")

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class Quantity:
    raw: str
    value: float | None = None
    uncertainty: float | None = None
    provenance: Provenance = Provenance.MEASURED
    lower: float | None = None
    upper: float | None = None

    @property
    def resolved(self):
        return self.value is not None

    def to_dict(self):
        d = {"raw": self.raw, "value": self.value, "provenance": self.provenance.value}
        if self.uncertainty is not None:
            d["uncertainty"] = self.uncertainty
        if self.lower is not None or self.upper is not None:
            d["lower"], d["upper"] = self.lower, self.upper
        return d


_NUM = r"[-+]?\d+(?:\.\d+)?"
_VALUE = re.compile(rf"^({_NUM})(?:\((\d+)\))?(\*{{1,2}})?$")
_RANGE = re.compile(rf"^({_NUM})\s*<\s*\w+\s*<\s*({_NUM})$")
_UPPER = re.compile(rf"^(?:≤|<=)\s*({_NUM})$")


def parse_quantity(token: str) -> Quantity:
    """Parse one table token such as ``174(5)``, ``1.748*``, ``-``, ``0 < g < 1`` or ``≤ 25``."""
    s = token.strip()
    if s in ("-", "–", "−"):
        return Quantity(s, provenance=Provenance.UNRESOLVED)
    m = _RANGE.match(s)
    if m:
        return Quantity(s, provenance=Provenance.BOUNDED, lower=float(m[1]), upper=float(m[2]))
    m = _UPPER.match(s)
    if m:
        return Quantity(s, provenance=Provenance.UPPER_BOUND, upper=float(m[1]))
    m = _VALUE.match(s)
    if not m:
        raise ValueError(f"cannot parse table entry {token!r}")
    num, unc, stars = m.groups()
    u = None
    if unc is not None:
        decimals = len(num.split(".")[1]) if "." in num else 0
        u = int(unc) / 10**decimals
    prov = {None: Provenance.MEASURED, "*": Provenance.LITERATURE, "**": Provenance.PARTIAL}[stars]
    return Quantity(s, float(num), u, prov)


def parse_cell(cell: str):
    """Comma-separated cell -> tuple of quantities."""
    return tuple(parse_quantity(t) for t in str(cell).split(","))


@dataclass(frozen=True)
class OrbitalRecord:
    name: str
    g_perp: Quantity
    g_zz: Quantity
    A: tuple  # (xx, yy, zz) quantities; xx and yy share one quantity when the table lists two values
    theta: tuple | None
    raw: dict = field(default_factory=dict)

    @property
    def resolved(self):
        return any(q.resolved for q in self.A) or self.g_zz.resolved


def _orbital(name, cells):
    raw = {k: str(v) for k, v in cells.items()}
    unresolved = Quantity("-", provenance=Provenance.UNRESOLVED)
    g = parse_cell(raw["g"])
    g_perp, g_zz = (g[0], g[1]) if len(g) == 2 else (unresolved, g[0] if g[0].resolved else unresolved)
    a = parse_cell(raw["A"])
    if len(a) == 3:
        A = a
    elif len(a) == 2:
        A = (a[0], a[0], a[1])
    elif len(a) == 1 and not a[0].resolved:
        A = (unresolved,) * 3
    else:
        raise ValueError(f"{name}: unexpected hyperfine cell {raw['A']!r}")
    theta = None
    if "theta" in raw:
        t = parse_cell(raw["theta"])
        theta = t if len(t) == 3 else None
    return OrbitalRecord(name, g_perp, g_zz, A, theta, raw)


@dataclass(frozen=True)
class SiteRecord:
    polytype: str
    site: str  # Greek letter
    assignment: str
    es1_gs1_nm: Quantity
    gs2_gs1_ghz: Quantity
    es2_es1_ghz: Quantity
    es3_es2_ghz: Quantity
    dw_percent: Quantity
    lifetime_ns: Quantity
    orbitals: dict
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def key(self):
        return f"{self.polytype}:{LATIN[self.site]}"

    @property
    def zpl_ghz(self):
        return nm_to_ghz(self.es1_gs1_nm.value)

    def orbital(self, name):
        name = name.upper()
        if name not in self.orbitals:
            raise KeyError(f"unknown orbital {name!r}; choose from {', '.join(ORBITALS)}")
        return self.orbitals[name]

    def to_dict(self):
        out = {"key": self.key, "polytype": self.polytype, "site": self.site, "assignment": self.assignment}
        for f in SCALAR_FIELDS:
            out[f] = getattr(self, f).to_dict()
        for name, orb in self.orbitals.items():
            d = {"g_perp": orb.g_perp.to_dict(), "g_zz": orb.g_zz.to_dict(),
                 "A": [q.to_dict() for q in orb.A]}
            if orb.theta is not None:
                d["theta"] = [q.to_dict() for q in orb.theta]
            out[name] = d
        return out


def _record(entry):
    orbitals = {name: _orbital(name, entry[name]) for name in ORBITALS if name in entry}
    rec = SiteRecord(
        polytype=str(entry["polytype"]), site=str(entry["site"]), assignment=str(entry["assignment"]),
        orbitals=orbitals, raw=entry,
        **{f: parse_quantity(str(entry[f])) for f in SCALAR_FIELDS},
    )
    if rec.polytype not in ("4H", "6H"):
        raise ValueError(f"polytype must be 4H or 6H, got {rec.polytype!r}")
    if rec.site not in LATIN:
        raise ValueError(f"site label must be one of α, β, γ, got {rec.site!r}")
    if not 1200 <= rec.es1_gs1_nm.value <= 1500:
        raise ValueError(f"{rec.key}: wavelength {rec.es1_gs1_nm.raw} outside [1200, 1500] nm")
    if not rec.lifetime_ns.value > 0:
        raise ValueError(f"{rec.key}: lifetime must be positive")
    return rec


def database_path(path=None):
    if path is not None:
        return os.fspath(path)
    env = os.environ.get(DB_ENV)
    if env:
        return env
    return str(resources.files("spinforge").joinpath("data", "sites.yaml"))


def load_database(path=None):
    """Site records keyed ``"4H:beta"`` etc., in file order."""
    with open(database_path(path), encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    recs = [_record(e) for e in data["sites"]]
    return {r.key: r for r in recs}


def normalize_key(key):
    """Accept ``4H:beta``, ``4h:β``, ``4H β`` or a (polytype, site) pair."""
    if isinstance(key, (tuple, list)):
        poly, site = key
    else:
        parts = re.split(r"[:\s/]+", str(key).strip())
        if len(parts) != 2:
            return str(key)
        poly, site = parts
    site = str(site).strip().lower()
    site = LATIN.get(site, site)
    return f"{str(poly).strip().upper()}:{site}"


def lookup(db, key):
    k = normalize_key(key)
    if k in db:
        return db[k]
    raise UnknownSiteError(key, difflib.get_close_matches(k, list(db), n=3, cutoff=0.4) or list(db))


def _warn(msg):
    warnings.warn(msg, SiteDefaultWarning, stacklevel=3)


def spin_params(record: SiteRecord, orbital="GS1", overrides=None, warn=True):
    """SpinParams for one orbital, filling partially resolved entries with defaults.

    ``0 < g < 1`` becomes the interval midpoint and an unresolved g_perp takes
    the orbital's g_zz. Literature and partially resolved values are used as
    given. Hyperfine components are taken positive unless ``overrides`` carries
    ``A_signs``. Other override keys: ``g_perp``, ``g_zz``, ``g`` (3 values),
    ``A`` (3 values), ``theta`` (3 values, degrees), ``gN_muN``.

    Returns ``(SpinParams, notes)`` where notes lists every default applied.
    """
    orb = record.orbital(orbital)
    overrides = dict(overrides or {})
    notes = []
    where = f"{record.key} {orb.name}"

    def note(msg):
        notes.append(msg)
        if warn:
            _warn(f"{where}: {msg}")

    if not orb.resolved and "A" not in overrides:
        raise KeyError(f"{where}: no spin parameters resolved for this orbital")

    g_zz = orb.g_zz.value
    if g_zz is None and "g_zz" not in overrides and "g" not in overrides:
        raise KeyError(f"{where}: g_zz unresolved")
    gp = orb.g_perp
    if gp.provenance is Provenance.BOUNDED:
        g_perp = 0.5 * (gp.lower + gp.upper)
        if "g_perp" not in overrides and "g" not in overrides:
            note(f"g_perp given as '{gp.raw}', using {g_perp:g}")
    elif gp.provenance is Provenance.UNRESOLVED:
        g_perp = g_zz
        if "g_perp" not in overrides and "g" not in overrides:
            note(f"g_perp unresolved, using g_zz = {g_zz:g}")
    else:
        g_perp = gp.value
    for label, q in (("g_perp", gp), ("g_zz", orb.g_zz)):
        if q.provenance in (Provenance.LITERATURE, Provenance.PARTIAL):
            note(f"{label} = {q.raw} is a {q.provenance.value} value")
    g_zz = overrides.get("g_zz", g_zz)
    g_perp = overrides.get("g_perp", g_perp)
    g = tuple(overrides.get("g", (g_perp, g_perp, g_zz)))

    A = []
    for comp, q in zip(("xx", "yy", "zz"), orb.A):
        if q.value is None:
            if "A" not in overrides:
                note(f"A_{comp} unresolved, using 0")
            A.append(0.0)
        else:
            if q.provenance is Provenance.PARTIAL:
                note(f"A_{comp} = {q.raw} is a partial value")
            A.append(q.value)
    A = list(overrides.get("A", A))
    signs = overrides.get("A_signs", (1, 1, 1))
    A = tuple(float(s) * abs(float(a)) for s, a in zip(signs, A))

    theta = (0.0, 0.0, 0.0)
    if orb.theta is not None:
        theta = tuple(q.value if q.value is not None else 0.0 for q in orb.theta)
    theta = tuple(overrides.get("theta", theta))
    extra = {"gN_muN": overrides["gN_muN"]} if "gN_muN" in overrides else {}
    return SpinParams(g_principal=g, A_principal=A, A_angles=theta, **extra), notes


def table_rows(db):
    """Re-render the database as table text rows (label + one cell per site)."""
    recs = list(db.values())

    def join(cells):
        return "\t".join(cells)

    rows = [join(["Name", "4H-SiC", "", "6H-SiC", "", ""]), join([""] + [r.site for r in recs]),
            join(["Site assignment"] + [r.assignment for r in recs])]
    labels = {
        "es1_gs1_nm": "ES1 - GS1 (nm)", "gs2_gs1_ghz": "GS2 - GS1 (GHz)", "es2_es1_ghz": "ES2 - ES1 (GHz)",
        "es3_es2_ghz": "ES3 - ES2 (GHz)", "dw_percent": "DW (%)", "lifetime_ns": "τ (ns)",
    }
    for f, lab in labels.items():
        rows.append(join([lab] + [r.raw[f] for r in recs]))
    for orb, part in (("GS1", "g"), ("GS1", "A"), ("GS2", "g"), ("GS2", "A"), ("GS2", "theta"),
                      ("ES1", "g"), ("ES1", "A")):
        rows.append(join([f"{orb}:{part}"] + [r.raw[orb][part] for r in recs]))
    return rows
