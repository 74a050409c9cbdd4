"""Electron-nuclear spin Hamiltonian: construction, diagonalization, sweeps.

All energies are frequencies in MHz, fields in tesla. The Hilbert space is
ordered as S (x) I with both projections descending, so basis index
``k = a * (2I+1) + b`` is ``|m_S = S - a, m_I = I - b>``.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .constants import GN_MUN_V51, K_B, MU_B

log = logging.getLogger(__name__)

HERMITIAN_RTOL = 1e-10


def _check_half_integer(j):
    two_j = 2 * j
    if not np.isfinite(two_j) or two_j < 0 or abs(two_j - round(two_j)) > 1e-12:
        raise ValueError(f"spin must be a non-negative integer or half-integer, got {j!r}")
    return round(two_j) / 2


@lru_cache(maxsize=None)
def _spin_matrices(j):
    m = np.arange(j, -j - 1, -1)
    # <m+1|J+|m> on the first superdiagonal
    jplus = np.diag(np.sqrt(j * (j + 1) - m[1:] * (m[1:] + 1)), 1).astype(complex)
    jminus = jplus.conj().T
    jx = 0.5 * (jplus + jminus)
    jy = -0.5j * (jplus - jminus)
    jz = np.diag(m).astype(complex)
    for a in (jx, jy, jz):
        a.setflags(write=False)
    return jx, jy, jz


def spin_matrices(j):
    """Return ``(Jx, Jy, Jz)`` for angular momentum ``j`` in the descending |m> basis."""
    j = _check_half_integer(j)
    return tuple(a.copy() for a in _spin_matrices(j))


def rotation_x(theta_deg):
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def tilt_rotation(angles):
    """Rotation taking principal axes to the lab frame for a set of tilt angles.

    Only one tilt is ever resolved per tensor, so the angles are read as a
    single rotation about the lab x axis by the largest of them.
    """
    angles = np.asarray(angles, dtype=float)
    if angles.shape != (3,) or not np.all(np.isfinite(angles)):
        raise ValueError(f"expected three finite angles, got {angles!r}")
    theta = angles[np.argmax(np.abs(angles))]
    return rotation_x(theta)


def rotate_tensor(principal, angles=(0.0, 0.0, 0.0), rotation=None):
    """Lab-frame 3x3 tensor ``R diag(principal) R^T``.

    ``rotation`` overrides the angle convention with an explicit matrix whose
    columns are the principal axes in lab coordinates.
    """
    principal = np.asarray(principal, dtype=float)
    if principal.shape != (3,) or not np.all(np.isfinite(principal)):
        raise ValueError(f"expected three finite principal values, got {principal!r}")
    if rotation is None:
        R = tilt_rotation(angles)
    else:
        R = np.asarray(rotation, dtype=float)
        if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be an orthogonal 3x3 matrix")
    T = R @ np.diag(principal) @ R.T
    return 0.5 * (T + T.T)


@dataclass(frozen=True)
class SpinParams:
    """Spin model of one orbital state."""

    S: float = 0.5
    I: float = 3.5
    g_principal: tuple = (2.0, 2.0, 2.0)
    g_angles: tuple = (0.0, 0.0, 0.0)
    A_principal: tuple = (0.0, 0.0, 0.0)  # MHz
    A_angles: tuple = (0.0, 0.0, 0.0)  # degrees
    gN_muN: float = GN_MUN_V51  # MHz/T
    g_rotation: tuple | None = None
    A_rotation: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "S", _check_half_integer(self.S))
        object.__setattr__(self, "I", _check_half_integer(self.I))
        if self.S <= 0 or self.I <= 0:
            raise ValueError("S and I must be positive")
        for name in ("g_principal", "g_angles", "A_principal", "A_angles"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3 or not all(np.isfinite(v)):
                raise ValueError(f"{name} must hold three finite numbers")
            object.__setattr__(self, name, v)
        for name in ("g_angles", "A_angles"):
            if any(not (0.0 <= a <= 180.0) for a in getattr(self, name)):
                raise ValueError(f"{name} must lie in [0, 180] degrees")
        if not np.isfinite(self.gN_muN):
            raise ValueError("gN_muN must be finite")
        object.__setattr__(self, "gN_muN", float(self.gN_muN))
        for name in ("g_rotation", "A_rotation"):
            R = getattr(self, name)
            if R is not None:
                object.__setattr__(self, name, tuple(tuple(float(x) for x in row) for row in R))

    @property
    def dim(self):
        return int(round((2 * self.S + 1) * (2 * self.I + 1)))

    def g_tensor(self):
        return rotate_tensor(self.g_principal, self.g_angles, self.g_rotation)

    def A_tensor(self):
        return rotate_tensor(self.A_principal, self.A_angles, self.A_rotation)

    def replace(self, **changes):
        return replace(self, **changes)


def as_field(B0):
    """Validate a static field 3-vector (tesla, z along the c-axis)."""
    B = np.asarray(B0, dtype=float)
    if B.shape != (3,) or not np.all(np.isfinite(B)):
        raise ValueError(f"field must be a finite 3-vector, got {B0!r}")
    return B


def axis_vector(axis):
    """Unit vector from 'x'/'y'/'z' or a 3-sequence."""
    if isinstance(axis, str):
        key = axis.strip().lower()
        if key in ("x", "y", "z"):
            return np.eye(3)["xyz".index(key)]
        axis = [float(v) for v in key.split(",")]
    v = as_field(axis)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("field axis must be nonzero")
    return v / n


@lru_cache(maxsize=None)
def _operators(S, I):
    """Product-space spin operators: (S_k (x) 1, 1 (x) I_k, S_i (x) I_j)."""
    s = _spin_matrices(S)
    i_ = _spin_matrices(I)
    nS, nI = s[0].shape[0], i_[0].shape[0]
    S_ops = np.array([np.kron(a, np.eye(nI)) for a in s])
    I_ops = np.array([np.kron(np.eye(nS), b) for b in i_])
    SI = np.array([[np.kron(a, b) for b in i_] for a in s])
    for arr in (S_ops, I_ops, SI):
        arr.setflags(write=False)
    return S_ops, I_ops, SI


def build_hamiltonian(p: SpinParams, B0, nuclear_zeeman=True):
    """Zeeman plus hyperfine Hamiltonian in MHz for field ``B0`` (tesla)."""
    B = as_field(B0)
    S_ops, I_ops, SI = _operators(p.S, p.I)
    g = p.g_tensor()
    A = p.A_tensor()
    H = MU_B * np.einsum("i,ij,jab->ab", B, g, S_ops)
    if nuclear_zeeman:
        H = H - p.gN_muN * np.einsum("i,iab->ab", B, I_ops)
    H = H + np.einsum("ij,ijab->ab", A, SI)
    return 0.5 * (H + H.conj().T)


def dipole_operators(p: SpinParams, nuclear=True):
    """Magnetic-dipole operator components (V_x, V_y, V_z) in Bohr magnetons."""
    S_ops, I_ops, _ = _operators(p.S, p.I)
    V = np.einsum("ij,jab->iab", p.g_tensor(), S_ops)
    if nuclear:
        V = V - (p.gN_muN / MU_B) * I_ops
    return V


@dataclass
class EigenSystem:
    levels: np.ndarray  # (dim,) MHz, ascending
    states: np.ndarray  # (dim, dim), column k is the state of levels[k]
    field: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def dim(self):
        return self.levels.size


def eigensystem(H, B0=None):
    """Diagonalize a Hermitian Hamiltonian into ascending levels and eigenvectors."""
    H = np.asarray(H, dtype=complex)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("Hamiltonian must be a square matrix")
    scale = max(np.abs(H).max(), 1.0)
    if np.abs(H - H.conj().T).max() > HERMITIAN_RTOL * scale:
        raise ValueError("Hamiltonian is not Hermitian")
    levels, states = np.linalg.eigh(0.5 * (H + H.conj().T))
    f = np.zeros(3) if B0 is None else as_field(B0)
    return EigenSystem(levels=levels, states=states, field=f)


def solve(p: SpinParams, B0, nuclear_zeeman=True):
    return eigensystem(build_hamiltonian(p, B0, nuclear_zeeman), B0)


@dataclass(frozen=True)
class Transition:
    i: int
    j: int
    freq: float  # MHz
    intensity_parallel: float
    intensity_perp: float
    thermal_weight: float = 1.0


def populations(levels, temperature):
    """Boltzmann populations of levels (MHz) at ``temperature`` kelvin."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    e = np.asarray(levels, dtype=float)
    w = np.exp(-(e - e.min()) / (K_B * temperature))
    return w / w.sum()


def transition_arrays(es: EigenSystem, p: SpinParams, temperature=None, nuclear=True,
                      drive=None):
    """Vectorized transition table over all pairs i < j.

    Returns a dict of arrays ``i, j, freq, par, perp, thermal`` and, when a
    ``drive`` direction is given, ``drive`` with the strength for B1 along it.
    """
    if es.dim != p.dim:
        raise ValueError(f"eigensystem dimension {es.dim} does not match params ({p.dim})")
    V = dipole_operators(p, nuclear)
    U = es.states
    M = np.einsum("ka,xkl,lb->xab", U.conj(), V, U)
    iu, ju = np.triu_indices(es.dim, k=1)
    Mij = M[:, iu, ju]
    out = {
        "i": iu,
        "j": ju,
        "freq": np.abs(es.levels[ju] - es.levels[iu]),
        "par": np.abs(Mij[2]) ** 2,
        "perp": 0.5 * (np.abs(Mij[0]) ** 2 + np.abs(Mij[1]) ** 2),
    }
    if temperature is None:
        out["thermal"] = np.ones(iu.size)
    else:
        pop = populations(es.levels, temperature)
        out["thermal"] = np.abs(pop[iu] - pop[ju])
    if drive is not None:
        out["drive"] = drive_strength(Mij, drive)
    return out


def drive_strength(Mij, drive):
    """|<i|V.n|j>|^2 for a unit drive vector, or the mean over a plane.

    ``drive`` is either a unit 3-vector or ``("plane", normal)``: the average of
    the two orthogonal drive directions perpendicular to ``normal``.
    """
    if isinstance(drive, tuple) and len(drive) == 2 and drive[0] == "plane":
        n = axis_vector(drive[1])
        a = np.cross(n, [1.0, 0.0, 0.0])
        if np.linalg.norm(a) < 1e-8:
            a = np.cross(n, [0.0, 1.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(n, a)
        return 0.5 * (np.abs(np.einsum("x,xk->k", a, Mij)) ** 2
                      + np.abs(np.einsum("x,xk->k", b, Mij)) ** 2)
    n = axis_vector(drive)
    return np.abs(np.einsum("x,xk->k", n, Mij)) ** 2


def transition_table(es: EigenSystem, p: SpinParams, temperature=None, nuclear=True):
    """All transitions i < j with dipole strengths for B1 parallel and perpendicular to c."""
    t = transition_arrays(es, p, temperature, nuclear)
    return [
        Transition(int(a), int(b), float(f), float(ip), float(iq), float(w))
        for a, b, f, ip, iq, w in zip(t["i"], t["j"], t["freq"], t["par"], t["perp"], t["thermal"])
    ]


# -- level tracking ---------------------------------------------------------

def _overlap_weights(prev_levels, prev_states, new_states, degeneracy_tol):
    """Weight of each new eigenvector inside each previous level's degenerate subspace."""
    O = np.abs(prev_states.conj().T @ new_states) ** 2
    # group previous levels that are degenerate; sum overlaps across the group
    W = O.copy()
    start = 0
    n = prev_levels.size
    while start < n:
        stop = start + 1
        while stop < n and prev_levels[stop] - prev_levels[stop - 1] < degeneracy_tol:
            stop += 1
        if stop - start > 1:
            W[start:stop] = O[start:stop].sum(axis=0)
        start = stop
    return W


def match_states(prev_levels, prev_states, new_levels, new_states, degeneracy_tol=1e-7):
    """Greedy overlap matching.

    Returns ``(perm, best)`` where ``perm[k]`` is the index into the new
    eigensystem continuing previous level ``k`` and ``best[k]`` its overlap.
    """
    W = _overlap_weights(prev_levels, prev_states, new_states, degeneracy_tol)
    n = W.shape[0]
    order = np.argsort(-W, axis=None, kind="stable")
    perm = np.full(n, -1)
    taken = np.zeros(n, dtype=bool)
    best = np.zeros(n)
    assigned = 0
    for flat in order:
        r, c = divmod(int(flat), n)
        if perm[r] >= 0 or taken[c]:
            continue
        perm[r] = c
        taken[c] = True
        best[r] = W[r, c]
        assigned += 1
        if assigned == n:
            break
    return perm, best


@dataclass
class FieldSweep:
    """Eigensystems along a field line with continuity labels.

    ``labels[k, l]`` is the energy-sorted index at point ``k`` of tracked level
    ``l``; ``levels[k, l]`` is its energy. Tracked levels are numbered by their
    energy order at the first field point.
    """

    params: SpinParams
    axis: np.ndarray
    fields: np.ndarray  # (n,) tesla, signed magnitude along axis
    systems: list
    labels: np.ndarray
    levels: np.ndarray
    min_overlap: np.ndarray  # (n-1,)
    nuclear_zeeman: bool = True

    def tracked_states(self, k):
        return self.systems[k].states[:, self.labels[k]]

    def energies_at(self, B, k_ref=None):
        """Energies in tracked-label order at an off-grid field value."""
        if k_ref is None:
            k_ref = int(np.argmin(np.abs(self.fields - B)))
        es = solve(self.params, B * self.axis, self.nuclear_zeeman)
        ref_levels = self.levels[k_ref]
        order = np.argsort(ref_levels, kind="stable")
        perm, _ = match_states(ref_levels[order], self.tracked_states(k_ref)[:, order],
                               es.levels, es.states)
        out = np.empty(es.dim)
        out[order] = es.levels[perm]
        return out


def field_sweep(p: SpinParams, axis="z", B_range=(0.0, 0.05), n=501, nuclear_zeeman=True,
                warn_overlap=0.5):
    """Diagonalize along ``B_range`` (tesla) and follow levels by eigenvector overlap."""
    if n < 2:
        raise ValueError("field sweep needs n >= 2")
    lo, hi = float(B_range[0]), float(B_range[1])
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
        raise ValueError(f"B_range must be increasing, got {B_range!r}")
    u = axis_vector(axis)
    fields = np.linspace(lo, hi, n)
    systems = [solve(p, B * u, nuclear_zeeman) for B in fields]
    dim = p.dim
    labels = np.empty((n, dim), dtype=int)
    labels[0] = np.arange(dim)
    min_overlap = np.ones(n - 1)
    for k in range(1, n):
        prev, new = systems[k - 1], systems[k]
        prev_idx = labels[k - 1]
        # match in the previous point's energy order so degenerate groups are contiguous
        perm, best = match_states(prev.levels, prev.states, new.levels, new.states)
        labels[k] = perm[prev_idx]
        min_overlap[k - 1] = best.min()
    if min_overlap.min() < warn_overlap:
        k = int(np.argmin(min_overlap))
        warnings.warn(
            f"level tracking overlap {min_overlap[k]:.3f} between B={fields[k]:.6g} T and "
            f"B={fields[k + 1]:.6g} T; the field grid may be too coarse",
            RuntimeWarning, stacklevel=2)
    levels = np.take_along_axis(np.array([s.levels for s in systems]), labels, axis=1)
    return FieldSweep(p, u, fields, systems, labels, levels, min_overlap, nuclear_zeeman)


# -- clock transitions --------------------------------------------------------

@dataclass(frozen=True)
class ClockTransition:
    a: int  # tracked level labels
    b: int
    B_clock: float  # T
    freq: float  # MHz
    curvature: float  # MHz/T^2
    slope: float  # MHz/T at B_clock


def clock_transitions(p: SpinParams, pair=None, axis="z", B_range=(0.0, 0.05), n=501,
                      tol=0.1, nuclear_zeeman=True, sweep=None):
    """Fields where a transition frequency is stationary in B.

    ``pair`` is a tuple of tracked level labels or ``None`` for every pair.
    ``tol`` bounds |df/dB| at the returned point, in MHz/mT.
    """
    if sweep is None:
        sweep = field_sweep(p, axis, B_range, n, nuclear_zeeman)
    B = sweep.fields
    step = B[1] - B[0]
    h = max(step * 1e-3, 1e-7)
    h2 = max(step * 0.1, 1e-6)
    tol_T = tol * 1e3
    pairs = [tuple(pair)] if pair is not None else list(itertools.combinations(range(p.dim), 2))
    found = []
    for a, b in pairs:
        f = sweep.levels[:, b] - sweep.levels[:, a]
        slope = np.diff(f)
        sgn = np.sign(slope)
        for k in np.nonzero(sgn[:-1] * sgn[1:] < 0)[0]:
            lo, hi = B[k], B[k + 2]

            def freq(x, kr=k + 1):
                e = sweep.energies_at(x, kr)
                return e[b] - e[a]

            def dfdb(x):
                return (freq(x + h) - freq(x - h)) / (2 * h)

            try:
                d_lo, d_hi = dfdb(lo + h), dfdb(hi - h)
                if d_lo * d_hi > 0:
                    continue
                Bc = brentq(dfdb, lo + h, hi - h, xtol=1e-12)
            except ValueError:
                continue
            d = dfdb(Bc)
            if abs(d) >= tol_T:
                continue
            f0 = freq(Bc)
            curv = (freq(Bc + h2) - 2 * f0 + freq(Bc - h2)) / h2**2
            found.append(ClockTransition(a, b, float(Bc), float(abs(f0)), float(curv), float(d)))
    found.sort(key=lambda c: (c.B_clock, c.a, c.b))
    return found


def boltzmann_weights(splittings_ghz, T):
    """Thermal populations of states at energies ``splittings_ghz`` above a reference."""
    if not T > 0:
        raise ValueError("temperature must be positive")
    d = np.atleast_1d(np.asarray(splittings_ghz, dtype=float))
    kT = K_B * T / 1e3  # GHz
    w = np.exp(-(d - d.min()) / kT)
    return w / w.sum()
