"""Interaction-picture Hamiltonians and their unitary / Lindblad propagation.

Every Hamiltonian here is a finite sum of tones,
``H(t) = sum_w exp(i w t) K_w``, which is what :class:`TonalOperator`
stores.  Without a qubit-frequency error the Hamiltonian has the form
``sum_j sigma_y^(j) (x) M_j(t)``; in the joint sigma_y eigenbasis it is then
block diagonal, one motional Hamiltonian ``H_s = sum_j s_j M_j`` per spin
sector ``s``.  The simulators use that structure whenever they can.
"""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .drive import DriveProgram, Variant
from .errors import CutoffTooSmallError, InvalidArgumentError
from .fockspace import (
    SIGMA_MINUS, SIGMA_PLUS, SIGMA_Y, SIGMA_Y_EIGVECS, SIGMA_Z, FockSpace, SystemSpec,
    annihilation, displacement_block, kron_all, mode_operator, spin_operator,
)

log = logging.getLogger(__name__)


class HamiltonianLevel(str, Enum):
    EXACT_SERIES = "exact"          # full displacement series on every driven sideband
    SELECTED_SIDEBANDS = "selected"  # only k=1 on the central mode and k=2 on all modes
    CUBIC_TRUNCATION = "cubic"      # series truncated at third order in eta


@dataclass(frozen=True)
class NoiseSpec:
    gamma_minus: np.ndarray
    gamma_plus: np.ndarray
    gamma_dephasing: np.ndarray

    def __post_init__(self):
        for name in ("gamma_minus", "gamma_plus", "gamma_dephasing"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"{name} must be finite and non-negative")
            object.__setattr__(self, name, arr)

    @classmethod
    def uniform(cls, gamma: float, n_modes: int) -> "NoiseSpec":
        """Loss, gain and dephasing all at rate ``gamma`` on every mode."""
        g = np.full(n_modes, float(gamma))
        return cls(g, g.copy(), g.copy())

    @classmethod
    def none(cls, n_modes: int) -> "NoiseSpec":
        return cls.uniform(0.0, n_modes)

    def is_zero(self) -> bool:
        return not (np.any(self.gamma_minus) or np.any(self.gamma_plus) or np.any(self.gamma_dephasing))

    def max_rate(self) -> float:
        return float(max(self.gamma_minus.max(), self.gamma_plus.max(), self.gamma_dephasing.max()))

    def scaled(self, factor: float) -> "NoiseSpec":
        return NoiseSpec(self.gamma_minus * factor, self.gamma_plus * factor, self.gamma_dephasing * factor)


@dataclass(frozen=True)
class ErrorShift:
    """Static mode-frequency shifts (per mode) and a common qubit-frequency shift."""

    eps_nu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eps_omega: float = 0.0

    def __post_init__(self):
        arr = np.atleast_1d(np.asarray(self.eps_nu, dtype=float))
        object.__setattr__(self, "eps_nu", arr)
        if np.any(np.abs(arr) > 0.1) or abs(self.eps_omega) > 0.1:
            warnings.warn("frequency shifts above 0.1 nu are outside the small-error model",
                          RuntimeWarning, stacklevel=2)

    def nu(self, mode: int) -> float:
        if self.eps_nu.size == 0:
            return 0.0
        if self.eps_nu.size == 1:
            return float(self.eps_nu[0])
        return float(self.eps_nu[mode])

    def is_zero(self) -> bool:
        return not np.any(self.eps_nu) and self.eps_omega == 0


NO_SHIFT = ErrorShift()


# ------------------------------------------------------------ tonal operators

@dataclass
class TonalOperator:
    """``H(t) = sum_i exp(i freqs[i] t) ops[i]``."""

    freqs: np.ndarray
    ops: list
    dim: int

    @classmethod
    def from_terms(cls, terms, dim: int, tol: float = 1e-12) -> "TonalOperator":
        merged: dict[float, object] = {}
        keys: dict[float, float] = {}
        for w, op in terms:
            key = round(float(w), 11)
            if key in merged:
                merged[key] = merged[key] + op
            else:
                merged[key] = op
                keys[key] = float(w)
        freqs, ops = [], []
        for key in sorted(merged):
            op = merged[key]
            if sp.issparse(op):
                op = op.tocsr()
                op.eliminate_zeros()
                if op.nnz == 0 or np.max(np.abs(op.data)) < tol:
                    continue
            freqs.append(keys[key])
            ops.append(op)
        return cls(np.array(freqs, dtype=float), ops, dim)

    def at(self, t: float):
        if not self.ops:
            return sp.csr_matrix((self.dim, self.dim), dtype=complex)
        out = self.ops[0] * np.exp(1j * self.freqs[0] * t)
        for w, op in zip(self.freqs[1:], self.ops[1:]):
            out = out + op * np.exp(1j * w * t)
        return out

    def norm_bound(self) -> float:
        total = 0.0
        for op in self.ops:
            total += float(abs(op).sum(axis=1).max()) if op.shape[0] else 0.0
        return total

    def max_frequency(self) -> float:
        return float(np.max(np.abs(self.freqs))) if self.freqs.size else 0.0

    def is_zero(self) -> bool:
        return not self.ops


# ---------------------------------------------------------------- assembly

def _truncated_series(k: int, eta: float, levels: np.ndarray, max_power: int):
    """Terms (power, operator) of D_k(eta) with eta-power <= max_power."""
    a = annihilation(levels)
    ad = a.T.tocsr()
    out = []
    n = 0
    while 2 * n + k <= max_power:
        coeff = (1j * eta) ** (2 * n + k) / (math.factorial(n + k) * math.factorial(n))
        op = sp.identity(levels.size, dtype=complex, format="csr")
        for _ in range(n):
            op = a @ op
        for _ in range(n + k):
            op = ad @ op
        out.append((2 * n + k, coeff * op.tocsr()))
        n += 1
    return out


def sideband_operator(system: SystemSpec, space: FockSpace, ion: int, mode: int, order: int,
                      level: HamiltonianLevel = HamiltonianLevel.EXACT_SERIES) -> sp.csr_matrix:
    """Motional operator multiplying ``F[ion, mode, order]``:
    ``D_{mode,order}(eta) prod_{l' != mode} D_{l',0}(eta) / eta`` on the
    motional part of ``space``."""
    level = HamiltonianLevel(level)
    eta_row = system.eta[ion]
    eta = eta_row[mode]
    if eta == 0:
        raise InvalidArgumentError(f"eta[{ion},{mode}] = 0: sideband term undefined")
    if level is not HamiltonianLevel.CUBIC_TRUNCATION:
        factors = {l: displacement_block(order if l == mode else 0, eta_row[l], space.levels(l))
                   for l in range(space.n_modes)}
        return (mode_operator(space, factors) / eta).tocsr()
    # leading power of each sideband plus the first eta^2 correction
    max_power = order + 2 if order > 0 else 3
    partial = [(0, None)]
    for l in range(space.n_modes):
        k = order if l == mode else 0
        terms = _truncated_series(k, eta_row[l], space.levels(l), max_power)
        nxt = []
        for p0, ops0 in partial:
            for p1, op1 in terms:
                if p0 + p1 <= max_power:
                    nxt.append((p0 + p1, [op1] if ops0 is None else ops0 + [op1]))
        partial = nxt
    total = None
    for p, ops in partial:
        if p < order:
            continue
        term = kron_all(ops) if len(ops) > 1 else ops[0]
        total = term if total is None else total + term
    return (total / eta).tocsr()


def _program_terms(program: DriveProgram, level: HamiltonianLevel):
    level = HamiltonianLevel(level)
    central = program.target.central_mode if program.target is not None else 0
    for (j, l, k), tones in sorted(program.entries.items()):
        if level is HamiltonianLevel.SELECTED_SIDEBANDS and not ((k == 1 and l == central) or k == 2):
            continue
        yield j, l, k, tones


def drive_components(program: DriveProgram, system: SystemSpec, space: FockSpace,
                     level=HamiltonianLevel.EXACT_SERIES, shifts: ErrorShift = NO_SHIFT):
    """Per-ion blue-sideband parts ``G_j(t) = sum F[j,l,k] P_{jlk} e^{i k eps_l t}``
    as lists of (frequency, motional operator)."""
    out: dict[int, list] = {}
    cache = {}
    for j, l, k, tones in _program_terms(program, level):
        if system.eta[j, l] == 0:
            continue
        key = (j, l, k)
        if key not in cache:
            cache[key] = sideband_operator(system, space, j, l, k, level)
        op = cache[key]
        shift = k * shifts.nu(l)
        for tone in tones:
            if tone.amplitude == 0:
                continue
            out.setdefault(j, []).append((tone.frequency + shift, tone.amplitude * op))
    return out


def spin_sectors(n_spins: int) -> list[tuple[int, ...]]:
    """Joint sigma_y eigenvalues, ordered like the tensor-product basis of
    :data:`SIGMA_Y_EIGVECS` columns (+1 before -1, spin 0 slowest)."""
    return [tuple(1 - 2 * b for b in bits) for bits in itertools.product((0, 1), repeat=n_spins)]


def sector_hamiltonians(program: DriveProgram, system: SystemSpec, space: FockSpace,
                        level=HamiltonianLevel.EXACT_SERIES, shifts: ErrorShift = NO_SHIFT,
                        ions: Sequence[int] | None = None) -> dict[tuple[int, ...], TonalOperator]:
    """Motional Hamiltonians ``H_s`` for each sigma_y sector of ``ions``.

    Only valid without a qubit-frequency shift.
    """
    if shifts.eps_omega != 0:
        raise InvalidArgumentError("sigma_y sectors require eps_omega = 0")
    ions = list(program.ions if ions is None else ions)
    comps = drive_components(program, system, space, level, shifts)
    dim = space.motional_dim
    out = {}
    for s in spin_sectors(len(ions)):
        terms = []
        for sign, j in zip(s, ions):
            for w, op in comps.get(j, []):
                terms.append((w, sign * op))
                terms.append((-w, sign * op.conj().T))
        out[s] = TonalOperator.from_terms(terms, dim)
    return out


def full_hamiltonian(program: DriveProgram, system: SystemSpec, space: FockSpace,
                     level=HamiltonianLevel.EXACT_SERIES, shifts: ErrorShift = NO_SHIFT) -> TonalOperator:
    """Hamiltonian on spins (x) motion, tone by tone."""
    comps = drive_components(program, system, space, level, shifts)
    eps = shifts.eps_omega
    n = space.n_ions
    terms = []
    for j, items in comps.items():
        if j >= n:
            raise InvalidArgumentError(f"program drives ion {j} outside space of {n} ions")
        if eps == 0:
            sy = spin_operator(n, {j: SIGMA_Y})
            for w, op in items:
                terms.append((w, sp.kron(sy, op, format="csr")))
                terms.append((-w, sp.kron(sy, op.conj().T, format="csr")))
            continue
        splus = spin_operator(n, {j: SIGMA_PLUS})
        sminus = spin_operator(n, {j: SIGMA_MINUS})
        for w, op in items:
            opd = op.conj().T
            terms += [(w + eps, sp.kron(splus, -1j * op, format="csr")),
                      (-w + eps, sp.kron(splus, -1j * opd, format="csr")),
                      (-w - eps, sp.kron(sminus, 1j * opd, format="csr")),
                      (w - eps, sp.kron(sminus, 1j * op, format="csr"))]
    return TonalOperator.from_terms(terms, space.total_dim)


def hamiltonian(t: float, program: DriveProgram, system: SystemSpec, space: FockSpace,
                level=HamiltonianLevel.EXACT_SERIES, shifts: ErrorShift = NO_SHIFT) -> sp.csr_matrix:
    """H(t) on the full space."""
    level = HamiltonianLevel(level)
    needed = max((k for (_, _, k) in program.entries), default=0)
    if any(c < needed for c in space.cutoffs):
        raise InvalidArgumentError(f"cutoff below driven sideband order {needed}")
    return full_hamiltonian(program, system, space, level, shifts).at(t).tocsr()


# --------------------------------------------------------------- integrators

_SQ3 = math.sqrt(3.0)
_CF4_C = (0.5 - _SQ3 / 6.0, 0.5 + _SQ3 / 6.0)
_CF4_A = (0.25 - _SQ3 / 6.0, 0.25 + _SQ3 / 6.0)


def expm_apply(op, v: np.ndarray, scale: complex, tol: float = 1e-16, max_terms: int = 200) -> np.ndarray:
    """exp(scale * op) @ v by Taylor series; intended for |scale| ||op|| of order one."""
    out = v.copy()
    term = v
    ref = np.linalg.norm(v)
    for k in range(1, max_terms):
        term = (op @ term) * (scale / k)
        out += term
        tn = np.linalg.norm(term)
        if tn <= tol * max(ref, np.linalg.norm(out)):
            return out
    raise RuntimeError("Taylor series for the step exponential did not converge; use more steps")


def auto_steps(ham: TonalOperator, t_final: float, per_radian: float = 12.0, minimum: int = 64) -> int:
    rate = max(ham.max_frequency(), 0.5 * ham.norm_bound(), 1e-12)
    return max(minimum, int(math.ceil(rate * t_final * per_radian / (2 * math.pi))) * 4)


def evolve_states(ham: TonalOperator, psi0: np.ndarray, t_final: float, steps: int | None = None,
                  method: str = "cf4", observer: Callable | None = None) -> np.ndarray:
    """Propagate state vector(s) (columns) under ``ham`` from 0 to ``t_final``.

    ``method='cf4'`` is the fourth-order commutator-free Magnus scheme (two
    exponentials per step at the Gauss points); ``'midpoint'`` is the
    second-order exponential midpoint rule.  ``observer(t, psi)`` is called
    after every step.
    """
    psi = np.array(psi0, dtype=complex, copy=True)
    if ham.is_zero():
        if observer is not None:
            observer(t_final, psi)
        return psi
    if steps is None:
        steps = auto_steps(ham, t_final)
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    dt = t_final / steps
    for n in range(steps):
        t0 = n * dt
        if method == "midpoint":
            psi = expm_apply(ham.at(t0 + 0.5 * dt), psi, -1j * dt)
        elif method == "cf4":
            h1 = ham.at(t0 + _CF4_C[0] * dt)
            h2 = ham.at(t0 + _CF4_C[1] * dt)
            psi = expm_apply(_CF4_A[1] * h1 + _CF4_A[0] * h2, psi, -1j * dt)
            psi = expm_apply(_CF4_A[0] * h1 + _CF4_A[1] * h2, psi, -1j * dt)
        else:
            raise InvalidArgumentError(f"unknown integrator {method!r}")
        if observer is not None:
            observer(t0 + dt, psi)
    return psi


def propagate_unitary(program: DriveProgram, system: SystemSpec, space: FockSpace,
                      level=HamiltonianLevel.EXACT_SERIES, shifts: ErrorShift = NO_SHIFT,
                      steps: int | None = None, method: str = "cf4", t_final: float | None = None) -> np.ndarray:
    """Dense time-ordered propagator U(T) on the full space (small spaces only)."""
    ham = full_hamiltonian(program, system, space, level, shifts)
    t_final = program.gate_time if t_final is None else t_final
    return evolve_states(ham, np.eye(space.total_dim, dtype=complex), t_final, steps, method)


def spin_frame_correction(n_ions: int, eps_omega: float, t: float) -> np.ndarray:
    """exp(-i eps t sum_j sigma_z^(j) / 2): maps the shifted-frame state back to
    the nominal rotating frame."""
    phase = np.diag(np.exp(-0.5j * eps_omega * t * np.diag(SIGMA_Z)))
    out = np.eye(1)
    for _ in range(n_ions):
        out = np.kron(out, phase)
    return out


# --------------------------------------------------------------- leakage

def edge_population(psi: np.ndarray, space: FockSpace, width: int = 2) -> float:
    """Largest population in the outermost ``width`` levels of any mode window.

    ``psi`` is a motional vector (or columns of them).  The lower edge only
    counts when the window does not start at zero.
    """
    dims = tuple(space.mode_dims)
    arr = np.abs(np.asarray(psi)) ** 2
    total = float(arr.sum())
    if total == 0:
        return 0.0
    arr = arr.reshape(dims + arr.shape[1:])
    worst = 0.0
    for l, d in enumerate(dims):
        moved = np.moveaxis(arr, l, 0)
        worst = max(worst, float(moved[max(0, d - width):].sum()) / total)
        if space.floors[l] > 0:
            worst = max(worst, float(moved[:width].sum()) / total)
    return worst


class LeakageMonitor:
    def __init__(self, space: FockSpace, every: int = 8):
        self.space = space
        self.every = every
        self.count = 0
        self.worst = 0.0

    def __call__(self, t, psi):
        self.count += 1
        if self.count % self.every == 0:
            self.worst = max(self.worst, edge_population(psi, self.space))


# --------------------------------------------------------------- channels

def sector_phases(target_phi: float, sectors) -> np.ndarray:
    """Phases theta_s of the ideal gate exp(i phi s_a s_b) on each sector."""
    return np.array([target_phi * s[0] * s[1] for s in sectors])


def unitary_sector_channel(program: DriveProgram, system: SystemSpec, space: FockSpace,
                           n_init: Sequence[int], level=HamiltonianLevel.EXACT_SERIES,
                           shifts: ErrorShift = NO_SHIFT, steps: int | None = None,
                           method: str = "cf4") -> tuple[dict, np.ndarray, float]:
    """Evolve |n_init> under every sector Hamiltonian.

    Returns ``(sector -> final motional vector, overlap matrix c, leakage)``
    where ``c[s, s'] = <psi_s'|psi_s>`` is the spin channel in the sigma_y
    basis: ``E(|s><s'|) = c[s, s'] |s><s'|``.
    """
    hams = sector_hamiltonians(program, system, space, level, shifts)
    psi0 = space.motion_only().fock_vector(n_init) if space.n_ions else space.fock_vector(n_init)
    finals = {}
    worst = 0.0
    if steps is None:
        steps = max(auto_steps(h, program.gate_time) for h in hams.values())
    for s, ham in hams.items():
        mon = LeakageMonitor(space)
        finals[s] = evolve_states(ham, psi0, program.gate_time, steps, method, observer=mon)
        worst = max(worst, mon.worst, edge_population(finals[s], space))
    sectors = list(hams)
    mat = np.array([[np.vdot(finals[sp_], finals[s]) for sp_ in sectors] for s in sectors])
    return finals, mat, worst


def full_space_channel(program: DriveProgram, system: SystemSpec, space: FockSpace,
                       n_init: Sequence[int], level=HamiltonianLevel.EXACT_SERIES,
                       shifts: ErrorShift = NO_SHIFT, steps: int | None = None,
                       method: str = "cf4") -> tuple[Callable, float]:
    """Spin channel obtained by evolving |alpha>|n_init> on the full space.

    Returns ``(channel, leakage)`` with ``channel(dyad)`` giving the reduced
    output operator of the driven ions, expressed in the nominal frame.
    """
    ions = program.ions
    n_spins = space.n_ions
    if ions != list(range(n_spins)):
        raise InvalidArgumentError("full-space channel needs a space holding exactly the driven ions")
    ham = full_hamiltonian(program, system, space, level, shifts)
    d = space.spin_dim
    dm = space.motional_dim
    motion0 = space.motion_only().fock_vector(n_init)
    psi0 = np.zeros((space.total_dim, d), dtype=complex)
    for a in range(d):
        psi0[a * dm:(a + 1) * dm, a] = motion0
    mon_space = space.motion_only()
    worst = [0.0]

    def observer(t, psi):
        worst[0] = max(worst[0], edge_population(psi.reshape(d, dm, d).transpose(1, 0, 2).reshape(dm, -1),
                                                 mon_space))
    psi = evolve_states(ham, psi0, program.gate_time, steps, method, observer=observer)
    frame = spin_frame_correction(n_spins, shifts.eps_omega, program.gate_time)
    # psi[:, a] = |out_a>, reshape to (spin, motion)
    outs = [frame @ psi[:, a].reshape(d, dm) for a in range(d)]

    def channel(dyad: np.ndarray) -> np.ndarray:
        dyad = np.asarray(dyad)
        res = np.zeros((d, d), dtype=complex)
        for a in range(d):
            for b in range(d):
                if dyad[a, b] != 0:
                    res += dyad[a, b] * (outs[a] @ outs[b].conj().T)
        return res
    return channel, worst[0]


# --------------------------------------------------------------- Lindblad

def jump_operators(space: FockSpace, noise: NoiseSpec) -> list[tuple[float, sp.csr_matrix]]:
    """(rate, operator) pairs on the motional space: a_l, a_l^dag and n_l per mode."""
    mspace = space.motion_only()
    out = []
    for l in range(space.n_modes):
        a = mode_operator(mspace, {l: annihilation(space.levels(l))})
        ops = (a, a.conj().T.tocsr(), (a.conj().T @ a).tocsr())
        for rates, op in zip((noise.gamma_minus, noise.gamma_plus, noise.gamma_dephasing), ops):
            g = float(np.broadcast_to(rates, (space.n_modes,))[l])
            if g:
                out.append((g, op))
    return out


class Dissipator:
    """Loss, gain and dephasing per mode, applied to density matrices on
    ``spin (x) motion`` (``n_spin_dim`` may be 1) by index shifting."""

    def __init__(self, space: FockSpace, noise: NoiseSpec, n_spin_dim: int = 1):
        self.dims = ((n_spin_dim,) if n_spin_dim > 1 else ()) + tuple(space.mode_dims)
        off = len(self.dims) - space.n_modes
        nd = len(self.dims)
        self.dim = int(np.prod(self.dims))
        rates = [np.broadcast_to(g, (space.n_modes,)) for g in
                 (noise.gamma_minus, noise.gamma_plus, noise.gamma_dephasing)]
        decay = np.zeros((self.dim, self.dim))
        self.terms = []  # (axis, gamma_minus, gamma_plus, sqrt factors)
        self.max_rate = 0.0
        for l in range(space.n_modes):
            gm, gp, gn = (float(r[l]) for r in rates)
            if gm == gp == gn == 0:
                continue
            a = annihilation(space.levels(l)).toarray()
            num_1 = np.real(np.diag(a.conj().T @ a))
            aad_1 = np.real(np.diag(a @ a.conj().T))
            shape = [1] * nd
            shape[off + l] = num_1.size
            num = np.broadcast_to(num_1.reshape(shape), self.dims).ravel()
            aad = np.broadcast_to(aad_1.reshape(shape), self.dims).ravel()
            decay -= 0.5 * gm * (num[:, None] + num[None, :])
            decay -= 0.5 * gp * (aad[:, None] + aad[None, :])
            decay -= 0.5 * gn * (num[:, None] - num[None, :]) ** 2
            self.max_rate = max(self.max_rate, 0.5 * gn * float(num.max()) ** 2 + (gm + gp) * float(aad.max()))
            self.terms.append(self._shift_term(off + l, gm, gp, np.diag(a, 1).real))
        self.decay = decay

    def _shift_term(self, axis, gm, gp, sq):
        """Slices and weights for ``gm a rho a^dag + gp a^dag rho a`` along ``axis``."""
        nd = len(self.dims)
        d = self.dims[axis]
        lo = [slice(None)] * (2 * nd)
        hi = [slice(None)] * (2 * nd)
        lo[axis] = lo[nd + axis] = slice(0, d - 1)
        hi[axis] = hi[nd + axis] = slice(1, d)
        shp_r = [1] * (2 * nd)
        shp_r[axis] = d - 1
        shp_c = [1] * (2 * nd)
        shp_c[nd + axis] = d - 1
        w = sq.reshape(shp_r) * sq.reshape(shp_c)
        return tuple(lo), tuple(hi), gm * w, gp * w

    def __bool__(self):
        return bool(self.terms)

    def apply(self, rho: np.ndarray) -> np.ndarray:
        out = self.decay * rho
        if not self.terms:
            return out
        shape = self.dims + self.dims
        r = rho.reshape(shape)
        o = out.reshape(shape)
        for lo, hi, wm, wp in self.terms:
            if wm.any():  # a rho a^dag
                o[lo] += wm * r[hi]
            if wp.any():  # a^dag rho a
                o[hi] += wp * r[lo]
        return out


def evolve_blocks(blocks: dict, hams: dict, dissipator: Dissipator | None, t_final: float, steps: int,
                  observer: Callable | None = None) -> dict:
    """RK4 integration of independent density-matrix blocks.

    ``blocks[(s, s')]`` evolves under ``-i(H_s rho - rho H_s') + D(rho)``.
    """
    keys = list(blocks)
    dt = t_final / steps

    def rhs(t, state):
        hs = {s: h.at(t).tocsr() for s, h in hams.items()}
        hts = {s: h.T.tocsr() for s, h in hs.items()}
        out = []
        for (s, s2), rho in zip(keys, state):
            # rho H = (H^T rho^T)^T
            drho = -1j * (hs[s] @ rho - (hts[s2] @ rho.T).T)
            if dissipator:
                drho += dissipator.apply(rho)
            out.append(drho)
        return out

    state = [np.array(blocks[k], dtype=complex) for k in keys]
    for n in range(steps):
        t = n * dt
        k1 = rhs(t, state)
        k2 = rhs(t + 0.5 * dt, [x + 0.5 * dt * y for x, y in zip(state, k1)])
        k3 = rhs(t + 0.5 * dt, [x + 0.5 * dt * y for x, y in zip(state, k2)])
        k4 = rhs(t + dt, [x + dt * y for x, y in zip(state, k3)])
        state = [x + dt / 6.0 * (a + 2 * b + 2 * c + d) for x, a, b, c, d in zip(state, k1, k2, k3, k4)]
        if observer is not None:
            observer(t + dt, dict(zip(keys, state)))
    return dict(zip(keys, state))


def lindblad_steps(hams: dict, dissipator: Dissipator, t_final: float, per_radian: float = 6.0) -> int:
    """RK4 steps: ``per_radian`` per radian of the fastest rate (tone, norm or decay)."""
    rate = max(max(h.max_frequency(), h.norm_bound()) for h in hams.values())
    rate = max(rate, dissipator.max_rate)
    return max(64, int(math.ceil(rate * t_final * per_radian)))


def lindblad_sector_channel(program: DriveProgram, system: SystemSpec, space: FockSpace,
                            noise: NoiseSpec, rho_m: np.ndarray, level=HamiltonianLevel.EXACT_SERIES,
                            shifts: ErrorShift = NO_SHIFT, steps: int | None = None):
    """Spin channel under the master equation, in the sigma_y basis.

    ``rho_m`` is the initial motional density matrix.  Returns ``(c, leakage)``
    with ``E(|s><s'|) = c[s, s'] |s><s'|``.
    """
    hams = sector_hamiltonians(program, system, space, level, shifts)
    sectors = list(hams)
    jumps = Dissipator(space, noise)
    # sectors sharing a Hamiltonian share their blocks
    classes = _hamiltonian_classes(hams)
    reps = {k: hams[s] for s, k in zip(sectors, classes)}
    n_cls = len(reps)
    blocks = {(a, b): rho_m for a in range(n_cls) for b in range(a, n_cls)}
    if steps is None:
        steps = lindblad_steps(hams, jumps, program.gate_time)
    mspace = space.motion_only()
    worst = [0.0]

    def observer(t, state):
        for (a, b), rho in state.items():
            if a == b:
                worst[0] = max(worst[0], _edge_population_dm(rho, mspace))

    final = evolve_blocks(blocks, reps, jumps, program.gate_time, steps, observer)
    c = np.zeros((len(sectors), len(sectors)), dtype=complex)
    for i, a in enumerate(classes):
        for k, b in enumerate(classes):
            c[i, k] = np.trace(final[(a, b)]) if a <= b else np.conj(np.trace(final[(b, a)]))
    return c, worst[0]


def _hamiltonian_classes(hams: dict) -> list[int]:
    """Class index per sector; sectors with identical tonal operators share one."""
    reps: list[TonalOperator] = []
    out = []
    for ham in hams.values():
        for k, rep in enumerate(reps):
            if _same_operator(ham, rep):
                out.append(k)
                break
        else:
            reps.append(ham)
            out.append(len(reps) - 1)
    return out


def _same_operator(a: TonalOperator, b: TonalOperator) -> bool:
    if a.freqs.shape != b.freqs.shape or not np.array_equal(a.freqs, b.freqs):
        return False
    return all(abs(x - y).max() == 0 if x.shape[0] else True for x, y in zip(a.ops, b.ops))


def _edge_population_dm(rho: np.ndarray, space: FockSpace, width: int = 2) -> float:
    diag = np.real(np.diag(rho)).clip(min=0)
    return edge_population(np.sqrt(diag), space, width)


def _ybasis(n_spins: int) -> np.ndarray:
    w = np.eye(1)
    for _ in range(n_spins):
        w = np.kron(w, SIGMA_Y_EIGVECS)
    return w


def propagate_lindblad(program: DriveProgram, system: SystemSpec, space: FockSpace, noise: NoiseSpec,
                       rho0: np.ndarray, level=HamiltonianLevel.EXACT_SERIES,
                       shifts: ErrorShift = NO_SHIFT, steps: int | None = None) -> np.ndarray:
    """rho(T) for the master equation with loss, gain and dephasing jumps per mode."""
    rho0 = np.asarray(rho0, dtype=complex)
    dim = space.total_dim
    if rho0.shape != (dim, dim):
        raise InvalidArgumentError(f"rho0 must be {dim}x{dim}")
    if not np.allclose(rho0, rho0.conj().T, atol=1e-10) or abs(np.trace(rho0) - 1) > 1e-8:
        raise InvalidArgumentError("rho0 must be Hermitian with unit trace")
    if np.min(np.linalg.eigvalsh(rho0)) < -1e-10:
        raise InvalidArgumentError("rho0 must be positive semidefinite")
    d = space.spin_dim
    dm = space.motional_dim
    jumps = Dissipator(space, noise)
    if shifts.eps_omega != 0:
        ham = full_hamiltonian(program, system, space, level, shifts)
        hams = {0: ham}
        jumps = Dissipator(space, noise, n_spin_dim=d)
        if steps is None:
            steps = lindblad_steps(hams, jumps, program.gate_time)
        out = evolve_blocks({(0, 0): rho0}, hams, jumps, program.gate_time, steps)[(0, 0)]
        frame = np.kron(spin_frame_correction(space.n_ions, shifts.eps_omega, program.gate_time),
                        np.eye(dm))
        return frame @ out @ frame.conj().T
    hams = sector_hamiltonians(program, system, space, level, shifts, ions=range(space.n_ions))
    sectors = list(hams)
    w = np.kron(_ybasis(space.n_ions), np.eye(dm))
    ry = w.conj().T @ rho0 @ w
    blocks = {(s, s2): ry[i * dm:(i + 1) * dm, k * dm:(k + 1) * dm]
              for i, s in enumerate(sectors) for k, s2 in enumerate(sectors)}
    if steps is None:
        steps = lindblad_steps(hams, jumps, program.gate_time)
    final = evolve_blocks(blocks, hams, jumps, program.gate_time, steps)
    out = np.zeros_like(ry)
    for i, s in enumerate(sectors):
        for k, s2 in enumerate(sectors):
            out[i * dm:(i + 1) * dm, k * dm:(k + 1) * dm] = final[(s, s2)]
    return w @ out @ w.conj().T


# ------------------------------------------------------- rotated-frame noise

@dataclass
class DissipationMap:
    """First-order spin perturbation ``Delta rho_S`` as a sigma_y-basis mask.

    ``Delta rho_S = sum_{s,s'} coeffs[s,s'] <s|rho_S|s'> |s><s'|`` in the joint
    sigma_y eigenbasis of ``ions``; the callable form works in the
    computational basis.
    """

    coeffs: np.ndarray
    ions: tuple[int, ...]

    def __call__(self, rho_s: np.ndarray) -> np.ndarray:
        w = _ybasis(len(self.ions))
        ry = w.conj().T @ np.asarray(rho_s) @ w
        return w @ (self.coeffs * ry) @ w.conj().T


def perturbative_dissipation(program: DriveProgram, system: SystemSpec, space: FockSpace,
                             noise: NoiseSpec, rho_m: np.ndarray,
                             level=HamiltonianLevel.EXACT_SERIES, steps: int | None = None) -> DissipationMap:
    """Integrate the rotated-frame dissipator to first order in the rates.

    The jump operators are conjugated numerically, C~(t) = U(t)^dag C U(t),
    with U(t) cached on the integration grid, and
    ``Delta rho_S = tr_M int_0^T L~(t)[rho_S (x) rho_M] dt`` is evaluated by
    Simpson quadrature over that grid.
    """
    if noise.max_rate() * program.gate_time > 0.3:
        warnings.warn("gamma T above 0.3: first-order dissipation is unreliable", RuntimeWarning,
                      stacklevel=2)
    hams = sector_hamiltonians(program, system, space, level)
    sectors = list(hams)
    ions = tuple(program.ions)
    ns = len(sectors)
    if noise.is_zero():
        return DissipationMap(np.zeros((ns, ns), dtype=complex), ions)
    rho_m = np.asarray(rho_m, dtype=complex)
    evals, evecs = np.linalg.eigh(rho_m)
    keep = evals > 1e-14
    weights, vecs = evals[keep], evecs[:, keep]
    jumps = jump_operators(space, noise)
    if steps is None:
        steps = max(auto_steps(h, program.gate_time) for h in hams.values())
    steps += steps % 2
    dm = space.motional_dim
    dt = program.gate_time / steps
    # U_s(t) on the grid, stored as dense matrices
    grids = {}
    for s, ham in hams.items():
        mats = [np.eye(dm, dtype=complex)]
        if ham.is_zero():
            grids[s] = mats * (steps + 1)
            continue

        def keep_state(t, psi, mats=mats):
            mats.append(psi.copy())
        evolve_states(ham, np.eye(dm, dtype=complex), program.gate_time, steps, observer=keep_state)
        grids[s] = mats
    simpson = np.ones(steps + 1)
    simpson[1:-1:2] = 4.0
    simpson[2:-1:2] = 2.0
    simpson *= dt / 3.0
    coeffs = np.zeros((ns, ns), dtype=complex)
    for n in range(steps + 1):
        psi = {s: grids[s][n] @ vecs for s in sectors}  # columns: evolved eigenvectors
        for g, c_op in jumps:
            cpsi = {s: c_op @ psi[s] for s in sectors}
            norms = {s: np.real(np.sum(np.abs(cpsi[s]) ** 2 * weights[None, :])) for s in sectors}
            back = {s: grids[s][n].conj().T @ cpsi[s] for s in sectors}  # U_s^dag C U_s |v>
            for i, s in enumerate(sectors):
                for k, s2 in enumerate(sectors):
                    jump = np.sum(weights * np.sum(back[s2].conj() * back[s], axis=0))
                    coeffs[i, k] += simpson[n] * g * (jump - 0.5 * norms[s] - 0.5 * norms[s2])
    return DissipationMap(coeffs, ions)


# --------------------------------------------------------------- targets

def ms_reference_unitary(phi: float, n_ions: int, pair: tuple[int, int] | str = "all") -> np.ndarray:
    """exp(i phi sum_{pairs} sigma_y sigma_y) on the spin space; ``pair='all'``
    sums over every unordered pair."""
    pairs = [(a, b) for a in range(n_ions) for b in range(a + 1, n_ions)] if pair == "all" else [tuple(pair)]
    gen = np.zeros((2**n_ions, 2**n_ions), dtype=complex)
    for a, b in pairs:
        gen += spin_operator(n_ions, {a: SIGMA_Y, b: SIGMA_Y}).toarray()
    return scipy.linalg.expm(1j * phi * gen)
