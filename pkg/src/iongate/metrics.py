"""Gate fidelity, thermal averaging, process matrices and heating cost functionals."""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.integrate
import scipy.interpolate
import scipy.optimize

from .drive import DriveProgram, Tone, fourier_constraint_residual
from .dynamics import (
    NO_SHIFT, ErrorShift, HamiltonianLevel, NoiseSpec, _ybasis, full_space_channel,
    lindblad_sector_channel, ms_reference_unitary, sector_phases, spin_sectors,
    unitary_sector_channel,
)
from .errors import (
    CutoffTooSmallError, InfeasibleTargetError, InvalidArgumentError, ModelMismatchWarning,
    NeedsMoreStatesError,
)
from .fockspace import SIGMA_Y, FockSpace, SystemSpec, default_cutoff, spin_operator, thermal_weights

log = logging.getLogger(__name__)

LEAKAGE_TOL = 1e-8


# ------------------------------------------------------------------ fidelity

def gate_fidelity(channel: Callable[[np.ndarray], np.ndarray], target: np.ndarray, d: int | None = None,
                  return_imag: bool = False):
    """Average of ``<a|U^dag E(|a><b|) U|b>`` over all basis dyads.

    ``channel`` maps a ``d x d`` dyad to the reduced output spin operator.
    The real part is returned; with ``return_imag`` the discarded imaginary
    residue comes back as a second value.
    """
    target = np.asarray(target)
    d = target.shape[0] if d is None else d
    total = 0j
    eye = np.eye(d)
    for a in range(d):
        for b in range(d):
            out = np.asarray(channel(np.outer(eye[a], eye[b])))
            total += target[:, a].conj() @ out @ target[:, b]
    f = total / d**2
    if abs(f.imag) > 1e-8:
        log.warning("fidelity has imaginary residue %.2e", f.imag)
    return (float(f.real), float(f.imag)) if return_imag else float(f.real)


def sector_channel(c: np.ndarray, n_spins: int) -> Callable[[np.ndarray], np.ndarray]:
    """Channel ``|s><s'| -> c[s,s'] |s><s'|`` (sigma_y basis) in the computational basis."""
    w = _ybasis(n_spins)

    def channel(rho):
        return w @ (c * (w.conj().T @ rho @ w)) @ w.conj().T
    return channel


def sector_fidelity(c: np.ndarray, phi: float, sectors) -> float:
    """Fidelity of a sigma_y-diagonal channel against ``exp(i phi s_a s_b)``."""
    th = sector_phases(phi, sectors)
    d = len(sectors)
    return float(np.real(np.sum(c * np.exp(-1j * (th[:, None] - th[None, :])))) / d**2)


def thermal_fidelity(per_fock: Mapping[tuple, float], weights: Mapping[tuple, float],
                     min_mass: float = 1 - 1e-6) -> float:
    """Weighted Fock-state average renormalized by the captured probability."""
    captured = 0.0
    acc = 0.0
    for n, p in weights.items():
        if n in per_fock:
            captured += p
            acc += p * per_fock[n]
    total = float(sum(weights.values()))
    if captured < min_mass * total:
        missing = sorted(((p, n) for n, p in weights.items() if n not in per_fock), reverse=True)[:10]
        raise NeedsMoreStatesError(f"table covers only {captured:.8f} of the thermal mass",
                                   missing_mass=[(n, p) for p, n in missing])
    return acc / captured


def product_weights(per_mode: Sequence[np.ndarray]) -> dict:
    """Joint Fock weights ``P(n) = prod_l p_l(n_l)`` as a dict keyed by n."""
    out = {}
    for n in itertools.product(*[range(len(p)) for p in per_mode]):
        out[n] = float(np.prod([p[k] for p, k in zip(per_mode, n)]))
    return out


def interpolate_table(samples: Mapping[tuple, float], cutoffs: Sequence[int]) -> dict:
    """Fill a Fock table on ``0..cutoff`` per mode from values on a rectilinear grid.

    Infidelities are interpolated linearly in each mode.  The grid must cover
    the corners of the requested box.
    """
    keys = list(samples)
    n_modes = len(cutoffs)
    axes = [np.array(sorted({k[l] for k in keys}), dtype=float) for l in range(n_modes)]
    values = np.empty([a.size for a in axes])
    for idx in itertools.product(*[range(a.size) for a in axes]):
        key = tuple(int(axes[l][i]) for l, i in enumerate(idx))
        if key not in samples:
            raise InvalidArgumentError(f"sample grid is not rectilinear: missing {key}")
        values[idx] = 1.0 - samples[key]
    for l, c in enumerate(cutoffs):
        if axes[l][0] > 0 or axes[l][-1] < c:
            raise InvalidArgumentError("sample grid does not span the requested cutoffs")
    interp = scipy.interpolate.RegularGridInterpolator(axes, values)
    pts = np.array(list(itertools.product(*[range(c + 1) for c in cutoffs])), dtype=float)
    infid = interp(pts)
    return {tuple(int(x) for x in p): 1.0 - float(v) for p, v in zip(pts, infid)}


# ------------------------------------------------------------ simulation

def _target_phi(program: DriveProgram) -> float:
    if program.target is None:
        raise InvalidArgumentError("program has no gate target")
    return program.target.phi


def fock_space_for(program: DriveProgram, system: SystemSpec, n_init: Sequence[int], margin: int = 15,
                   window: bool | None = None) -> FockSpace:
    """Space holding only the driven spins, sized by the default cutoff policy."""
    n_init = tuple(int(n) for n in n_init)
    if window is None:
        window = max(n_init) > 2 * margin
    return FockSpace.for_fock_state(len(program.ions), n_init, system.coupling, margin=margin, window=window)


def _restricted(program: DriveProgram, system: SystemSpec):
    """Program and system re-indexed onto the driven ions only."""
    ions = program.ions
    sub = SystemSpec(len(ions), system.mode_ratios, system.mode_coeffs[ions], system.coupling)
    if ions == list(range(len(ions))):
        return program, sub
    remap = {j: i for i, j in enumerate(ions)}
    entries = {(remap[j], l, k): v for (j, l, k), v in program.entries.items()}
    target = program.target
    if target is not None:
        target = type(target)(target.variant, target.phi, (0, 1), target.central_mode)
    prog = DriveProgram(entries, program.gate_time, program.rabi, program.delta, target, program.warnings)
    return prog, sub


def fock_fidelity(program: DriveProgram, system: SystemSpec, n_init: Sequence[int],
                  noise: NoiseSpec | None = None, shifts: ErrorShift = NO_SHIFT,
                  level=HamiltonianLevel.EXACT_SERIES, steps: int | None = None,
                  margin: int = 15, retries: int = 4, space: FockSpace | None = None) -> tuple[float, dict]:
    """Gate fidelity for the motional Fock state ``n_init``.

    Picks the cheapest exact path: sigma_y sectors (unitary or master
    equation) unless a qubit-frequency shift forces the full space.  The
    phonon window grows by 1.5x (up to ``retries`` times; large
    Fock numbers need several) while more than
    1e-8 of the population reaches its edge.
    """
    prog, sub = _restricted(program, system)
    phi = _target_phi(prog)
    n_init = tuple(int(n) for n in n_init)
    space = fock_space_for(prog, sub, n_init, margin) if space is None else space
    for attempt in range(retries + 1):
        if noise is not None and not noise.is_zero():
            if shifts.eps_omega != 0:
                raise InvalidArgumentError("master-equation runs with a qubit shift are not supported here")
            rho_m = np.diag(space.motion_only().fock_vector(n_init)).astype(complex)
            c, leak = lindblad_sector_channel(prog, sub, space, noise, rho_m, level, shifts, steps)
            fid = sector_fidelity(c, phi, spin_sectors(space.n_ions))
        elif shifts.eps_omega != 0:
            channel, leak = full_space_channel(prog, sub, space, n_init, level, shifts, steps)
            target = ms_reference_unitary(phi, space.n_ions, (0, 1))
            fid = gate_fidelity(channel, target)
        else:
            _, c, leak = unitary_sector_channel(prog, sub, space, n_init, level, shifts, steps)
            fid = sector_fidelity(c, phi, spin_sectors(space.n_ions))
        if leak <= LEAKAGE_TOL:
            return fid, {"leakage": leak, "cutoffs": list(space.cutoffs), "floors": list(space.floors)}
        if attempt < retries:
            log.info("edge population %.2e at cutoffs %s; enlarging", leak, space.cutoffs)
            space = space.with_margin_scaled(n_init, 1.5)
    raise CutoffTooSmallError(f"edge population {leak:.2e} above {LEAKAGE_TOL} at cutoffs {space.cutoffs}",
                              leakage=leak)


def thermal_grid(cutoff: int, points: int = 9) -> list[int]:
    """Sample levels for thermal tables: dense near zero, sparser at the tail."""
    raw = np.unique(np.round(cutoff * (np.linspace(0, 1, points) ** 2)).astype(int))
    return sorted(set(raw.tolist()) | {0, cutoff})


def thermal_cutoffs(nbar: Sequence[float], tol: float = 1e-8) -> list[int]:
    out = []
    for nb in nbar:
        c = 0
        if nb > 0:
            q = nb / (nb + 1.0)
            c = int(math.ceil(math.log(tol) / math.log(q)))
        out.append(c)
    return out


def thermal_gate_fidelity(program: DriveProgram, system: SystemSpec, nbar: Sequence[float],
                          points: int = 9, tol: float = 1e-8, cache: dict | None = None,
                          **kwargs) -> tuple[float, dict]:
    """Thermal-state fidelity from Fock fidelities sampled on a grid and
    interpolated over the full support (tail mass below ``tol``)."""
    nbar = [float(x) for x in np.broadcast_to(np.asarray(nbar, dtype=float), (system.n_modes,))]
    cutoffs = thermal_cutoffs(nbar, tol)
    weights = product_weights([thermal_weights(nb, c, tol=tol) for nb, c in zip(nbar, cutoffs)])
    grids = [thermal_grid(c, points) if c > 0 else [0] for c in cutoffs]
    cache = {} if cache is None else cache
    samples = {}
    for n in itertools.product(*grids):
        if n not in cache:
            cache[n] = fock_fidelity(program, system, n, **kwargs)[0]
        samples[n] = cache[n]
    table = interpolate_table(samples, cutoffs) if len(samples) > 1 else samples
    fid = thermal_fidelity(table, weights)
    return fid, {"cutoffs": cutoffs, "sampled": len(samples)}


@dataclass
class GateReport:
    fidelity: float
    per_fock: dict = field(default_factory=dict)
    chi: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not -1e-9 <= self.fidelity <= 1 + 1e-9:
            raise InvalidArgumentError(f"fidelity {self.fidelity} outside [0, 1]")
        if self.chi is not None and np.max(np.abs(self.chi - self.chi.conj().T)) > 1e-9:
            warnings.warn("process matrix is not Hermitian", ModelMismatchWarning, stacklevel=2)

    @property
    def infidelity(self) -> float:
        return 1.0 - self.fidelity

    def to_dict(self) -> dict:
        out = {"fidelity": self.fidelity, "infidelity": self.infidelity,
               "per_fock": {",".join(map(str, k)): v for k, v in self.per_fock.items()},
               "diagnostics": self.diagnostics}
        if self.chi is not None:
            out["chi_real"] = np.real(self.chi).tolist()
            out["chi_imag"] = np.imag(self.chi).tolist()
        return out


# ------------------------------------------------------------ process matrix

def process_basis() -> list[np.ndarray]:
    """``1, sigma_y^(1), sigma_y^(2), sigma_y^(1) sigma_y^(2)`` on two spins."""
    return [np.eye(4, dtype=complex),
            spin_operator(2, {0: SIGMA_Y}).toarray(),
            spin_operator(2, {1: SIGMA_Y}).toarray(),
            spin_operator(2, {0: SIGMA_Y, 1: SIGMA_Y}).toarray()]


def process_matrix(delta_rho_map: Callable[[np.ndarray], np.ndarray], tol: float = 1e-8) -> np.ndarray:
    """chi with ``Delta rho = sum_mn chi_mn A_m rho A_n^dag`` fitted over all dyads."""
    basis = process_basis()
    rows, rhs = [], []
    eye = np.eye(4)
    for a in range(4):
        for b in range(4):
            dyad = np.outer(eye[a], eye[b])
            rows.append(np.array([(am @ dyad @ an.conj().T).ravel() for am in basis for an in basis]).T)
            rhs.append(np.asarray(delta_rho_map(dyad)).ravel())
    mat = np.vstack(rows)
    vec = np.concatenate(rhs)
    sol, *_ = np.linalg.lstsq(mat, vec, rcond=None)
    resid = float(np.linalg.norm(mat @ sol - vec))
    if resid > tol:
        warnings.warn(f"process-matrix fit residual {resid:.2e}", ModelMismatchWarning, stacklevel=2)
    return sol.reshape(4, 4)


# ------------------------------------------------------------ heating costs

class TrigPoly:
    """Finite sum ``sum_w c_w exp(i w t)``."""

    __slots__ = ("terms",)

    def __init__(self, terms: Mapping[float, complex] | None = None):
        self.terms = {}
        for w, c in (terms or {}).items():
            self._add(w, c)

    def _add(self, w, c):
        key = round(float(w), 12)
        self.terms[key] = self.terms.get(key, 0) + c

    @classmethod
    def from_tones(cls, tones: Sequence[Tone]) -> "TrigPoly":
        out = cls()
        for t in tones:
            out._add(t.frequency, complex(t.amplitude))
        return out

    def __mul__(self, other: "TrigPoly") -> "TrigPoly":
        out = TrigPoly()
        for w1, c1 in self.terms.items():
            for w2, c2 in other.terms.items():
                out._add(w1 + w2, c1 * c2)
        return out

    def conj(self) -> "TrigPoly":
        return TrigPoly({-w: np.conj(c) for w, c in self.terms.items()})

    def antiderivative(self) -> "TrigPoly":
        """Integral from 0 to t; raises for a zero-frequency term."""
        out = TrigPoly()
        for w, c in self.terms.items():
            if w == 0:
                raise InvalidArgumentError("zero-frequency tone has no closed-form antiderivative here")
            out._add(w, c / (1j * w))
            out._add(0.0, -c / (1j * w))
        return out

    def integral(self, t: float) -> complex:
        total = 0j
        for w, c in self.terms.items():
            total += c * t if w == 0 else c * (np.exp(1j * w * t) - 1) / (1j * w)
        return total

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return sum(c * np.exp(1j * w * t) for w, c in self.terms.items()) + 0 * t


COST_NAMES = tuple(f"c{i}" for i in range(1, 10))


def _cost_integrands(alpha: Sequence) -> dict:
    """Integrands (as callables or TrigPolys) for each functional and index choice."""
    n = len(alpha)
    single = range(n)
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    ac = [a.conj() for a in alpha]
    return {
        "c1": [alpha[i] for i in single],
        "c2": [alpha[i] * alpha[i] for i in single],
        "c3": [alpha[i] * alpha[j] for i, j in pairs],
        "c4": [alpha[i] * ac[i] * alpha[j] for i, j in pairs],
        "c5": [alpha[i] * alpha[i] * ac[j] * ac[j] for i, j in pairs],
        "c6": [alpha[i] * ac[i] for i in single],
        "c7": [alpha[i] * ac[j] for i, j in pairs],
        "c8": [alpha[i] * ac[i] * alpha[j] * ac[j] for i, j in pairs],
        "c9": [alpha[i] * alpha[i] * ac[j] for i, j in pairs],
    }


class _Numeric:
    """Pointwise-evaluated function supporting the products used by the costs."""

    def __init__(self, f):
        self.f = f

    def __mul__(self, other):
        return _Numeric(lambda t, a=self.f, b=other.f: a(t) * b(t))

    def conj(self):
        return _Numeric(lambda t, a=self.f: np.conj(a(t)))

    def __call__(self, t):
        return self.f(t)


def _quad_complex(f, t_final: float) -> complex:
    opts = dict(limit=400, epsabs=1e-14, epsrel=1e-13)
    with warnings.catch_warnings():
        # cancelling integrands trip the roundoff detector near zero
        warnings.simplefilter("ignore", scipy.integrate.IntegrationWarning)
        re = scipy.integrate.quad(lambda t: float(np.real(f(t))), 0.0, t_final, **opts)[0]
        im = scipy.integrate.quad(lambda t: float(np.imag(f(t))), 0.0, t_final, **opts)[0]
    return re + 1j * im


@dataclass
class CostVector:
    values: dict

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    @property
    def scalar(self) -> float:
        return max(self.values["c6"], self.values["c8"])

    def as_list(self) -> list[float]:
        return [self.values[n] for n in COST_NAMES]


def heating_costs(tones_per_ion: Sequence[Sequence[Tone]], t_final: float,
                  method: str = "closed") -> CostVector:
    """The nine first-order heating functionals at ``t_final``.

    ``alpha_j(t)`` is the running integral of ion ``j``'s central-mode
    first-sideband drive; products are formed pointwise and integrated to
    ``t_final``.  Set-valued entries report the largest magnitude over index
    choices.  ``method`` is ``'closed'`` (tone algebra), ``'quad'`` (adaptive
    quadrature) or ``'auto'`` (closed form unless a zero-frequency tone is
    present).
    """
    if method not in ("closed", "quad", "auto"):
        raise InvalidArgumentError(f"unknown method {method!r}")
    has_zero = any(t.frequency == 0 and t.amplitude != 0 for tones in tones_per_ion for t in tones)
    if method == "auto":
        method = "quad" if has_zero else "closed"
    if method == "closed":
        alpha = [TrigPoly.from_tones(tones).antiderivative() for tones in tones_per_ion]
        integrate = lambda f: f.integral(t_final)  # noqa: E731
    else:
        def make_alpha(tones):
            def a(t):
                total = 0j
                for tone in tones:
                    w, c = tone.frequency, tone.amplitude
                    total += c * t if w == 0 else c * (np.exp(1j * w * t) - 1) / (1j * w)
                return total
            return _Numeric(a)
        alpha = [make_alpha(tones) for tones in tones_per_ion]
        integrate = lambda f: _quad_complex(f, t_final)  # noqa: E731
    values = {}
    for name, items in _cost_integrands(alpha).items():
        values[name] = max((abs(integrate(f)) for f in items), default=0.0)
    return CostVector(values)


def entangling_phase(tones: Sequence[Tone], t_final: float) -> float:
    """``int_0^T Im(f conj(alpha)) dt`` for a single-mode drive ``f`` with
    running integral ``alpha``: the spin-spin phase is twice this per unit
    coupling when both ions see the same drive."""
    f = TrigPoly.from_tones(tones)
    prod = f * f.antiderivative().conj()
    return float(np.imag(prod.integral(t_final)))


@dataclass
class MinimizerResult:
    amplitudes: np.ndarray
    frequencies: np.ndarray
    cost: float
    costs: CostVector
    seed_index: int


def _amplitudes_from_params(params: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    m = freqs.size
    amps = np.zeros(m, dtype=complex)
    amps[0] = 1.0
    if m > 2:
        amps[1:m - 1] = params[0::2] + 1j * params[1::2]
    # Fourier constraint: sum_m A_m / a_m = 0 fixes the last amplitude
    amps[m - 1] = -freqs[m - 1] * np.sum(amps[: m - 1] / freqs[: m - 1])
    return amps


def minimize_heating_cost(frequencies: Sequence[float], phi: float, t_final: float, coupling: float = 1.0,
                          seeds: int = 8, rng_seed: int = 0) -> MinimizerResult:
    """Amplitudes on fixed tone frequencies minimizing ``max(c6, c8)``.

    The Fourier constraint is eliminated analytically (last amplitude); the
    overall scale is fixed by requiring the spin-spin phase
    ``2 coupling^2 |Theta|`` to equal ``phi``.  Remaining complex ratios are
    searched by Nelder-Mead from ``seeds`` deterministic starts.
    """
    freqs = np.asarray(frequencies, dtype=float)
    if freqs.size < 2:
        raise InfeasibleTargetError("a single tone cannot satisfy the Fourier constraint with nonzero amplitude")
    if np.any(freqs == 0):
        raise InvalidArgumentError("tone frequencies must be nonzero")

    def scaled(params):
        amps = _amplitudes_from_params(params, freqs)
        theta = entangling_phase([Tone(a, w) for a, w in zip(amps, freqs)], t_final)
        if abs(theta) < 1e-300:
            return None
        return amps * math.sqrt(phi / (2 * coupling**2 * abs(theta)))

    def objective(params):
        amps = scaled(params)
        if amps is None or not np.all(np.isfinite(amps)):
            return np.inf
        tones = [Tone(a, w) for a, w in zip(amps, freqs)]
        return heating_costs([tones, tones], t_final).scalar

    n_free = 2 * max(0, freqs.size - 2)
    rng = np.random.default_rng(rng_seed)
    starts = [np.zeros(n_free)] + [rng.normal(scale=1.0, size=n_free) for _ in range(seeds - 1)]
    best = None
    for k, x0 in enumerate(starts):
        if n_free:
            res = scipy.optimize.minimize(objective, x0, method="Nelder-Mead",
                                          options=dict(xatol=1e-10, fatol=1e-14, maxiter=4000))
            x, val = res.x, res.fun
        else:
            x, val = x0, objective(x0)
        if np.isfinite(val) and (best is None or val < best[1] - 1e-15):
            best = (x, val, k)
        if not n_free:
            break
    if best is None:
        raise InfeasibleTargetError("no tone amplitudes reach the requested phase")
    amps = scaled(best[0])
    tones = [Tone(a, w) for a, w in zip(amps, freqs)]
    if fourier_constraint_residual(tones) > 1e-9 * max(1.0, float(np.max(np.abs(amps)))):
        raise InfeasibleTargetError("Fourier constraint violated by the optimum")
    costs = heating_costs([tones, tones], t_final)
    return MinimizerResult(amps, freqs, costs.scalar, costs, best[2])
