"""Driving programs for sideband-addressed entangling gates.

A program stores the slowly varying sideband amplitudes
``F[j, l, k](t) = sum_m A_m exp(i a_m t)`` for ion ``j``, mode ``l`` and blue
sideband order ``k >= 1``.  Red sidebands are never stored; they follow from
``F[j, l, -k] = (-1)^k conj(F[j, l, k])``.

Phase convention: the target gate is ``exp(i phi_T sigma_y^(a) sigma_y^(b))``
for the addressed pair ``(a, b)``, i.e. ``phi_T`` is the coefficient of the
two-qubit generator.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import InfeasibleTargetError, InvalidArgumentError
from .fockspace import SystemSpec


class Variant(str, Enum):
    ROBUST = "robust"
    MONOCHROMATIC = "monochromatic"
    MS_SINGLE_MODE = "ms_single_mode"
    MS_ALL_MODES = "ms_all_modes"


@dataclass(frozen=True)
class Tone:
    amplitude: complex
    frequency: float

    def __post_init__(self):
        if not (np.isfinite(self.amplitude) and np.isfinite(self.frequency)):
            raise InvalidArgumentError("tone amplitude and frequency must be finite")


@dataclass(frozen=True)
class GateTarget:
    variant: Variant = Variant.ROBUST
    phi: float = math.pi / 4
    pair: tuple[int, int] = (0, 1)
    central_mode: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        a, b = self.pair
        if a == b:
            raise InvalidArgumentError("pair indices must be distinct")
        if not 0 <= self.phi <= math.pi / 2:
            raise InvalidArgumentError(f"phi_T={self.phi} outside (0, pi/2]")

    def check(self, system: SystemSpec):
        if max(self.pair) >= system.n_ions or min(self.pair) < 0:
            raise InvalidArgumentError(f"pair {self.pair} outside chain of {system.n_ions} ions")
        if not 0 <= self.central_mode < system.n_modes:
            raise InvalidArgumentError(f"no mode {self.central_mode}")


@dataclass(frozen=True)
class DriveProgram:
    entries: dict = field(default_factory=dict)  # (j, l, k>=1) -> tuple[Tone, ...]
    gate_time: float = 2 * math.pi
    rabi: float = 0.0
    delta: float = 1.0
    target: GateTarget | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        clean = {}
        for (j, l, k), tones in self.entries.items():
            if k < 1:
                raise InvalidArgumentError("only blue sidebands (k >= 1) are stored")
            clean[(int(j), int(l), int(k))] = tuple(tones)
        object.__setattr__(self, "entries", clean)

    def tones(self, j: int, l: int, k: int) -> tuple[Tone, ...]:
        """Tones of ``F[j, l, k]``; red sidebands are derived on the fly."""
        if k > 0:
            return self.entries.get((j, l, k), ())
        if k == 0:
            return ()
        sign = (-1) ** (-k)
        return tuple(Tone(sign * np.conj(t.amplitude), -t.frequency)
                     for t in self.entries.get((j, l, -k), ()))

    def evaluate(self, j: int, l: int, k: int, t):
        return evaluate(self, j, l, k, t)

    @property
    def ions(self) -> list[int]:
        return sorted({j for j, _, _ in self.entries})

    def is_empty(self) -> bool:
        return not any(abs(t.amplitude) > 0 for tones in self.entries.values() for t in tones)

    def to_dict(self) -> dict:
        return {
            "gate_time": self.gate_time,
            "rabi": self.rabi,
            "delta": self.delta,
            "target": None if self.target is None else {
                "variant": self.target.variant.value, "phi": self.target.phi,
                "pair": list(self.target.pair), "central_mode": self.target.central_mode},
            "entries": [
                {"ion": j, "mode": l, "order": k,
                 "tones": [[t.amplitude.real, t.amplitude.imag, t.frequency] for t in tones]}
                for (j, l, k), tones in sorted(self.entries.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DriveProgram":
        entries = {
            (e["ion"], e["mode"], e["order"]): tuple(Tone(complex(re, im), fr) for re, im, fr in e["tones"])
            for e in d["entries"]}
        tgt = d.get("target")
        target = None if tgt is None else GateTarget(
            Variant(tgt["variant"]), tgt["phi"], tuple(tgt["pair"]), tgt["central_mode"])
        return cls(entries, d["gate_time"], d.get("rabi", 0.0), d.get("delta", 1.0), target)


def evaluate(program: DriveProgram, j: int, l: int, k: int, t):
    """Value of ``F[j, l, k](t)``; an absent sideband evaluates to zero."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape, dtype=complex)
    for tone in program.tones(j, l, k):
        out = out + tone.amplitude * np.exp(1j * tone.frequency * t)
    return out if out.ndim else complex(out)


# ------------------------------------------------------------ Rabi amplitude

_CONDITIONS = {
    # variant: (quartic coefficient, phase right-hand side / phi_T)
    Variant.ROBUST: (6.0, 2.0 / (5.0 * math.pi)),
    Variant.MONOCHROMATIC: (3.0, 1.0 / math.pi),
}


def entangling_residual(x: float, eta_pair: np.ndarray, phi: float, variant=Variant.ROBUST,
                        central_mode: int = 0) -> float:
    """Left minus right side of the entangling condition at ``x = (Omega/delta)^2``."""
    quart, rhs = _CONDITIONS[Variant(variant)]
    s1 = float(np.sum(eta_pair[:, central_mode] ** 2))
    s = float(np.sum(eta_pair**2))
    return -quart * x**2 * s1 + x * (2.0 + s) - rhs * phi


def solve_rabi(delta: float, eta_pair, phi: float, variant=Variant.ROBUST,
               central_mode: int = 0) -> float:
    """Rabi amplitude reaching entangling phase ``phi`` at gate time 2 pi / delta.

    ``eta_pair`` is the Lamb-Dicke matrix restricted to the addressed ions
    (rows) and all modes (columns).  For the two sideband-corrected variants
    the smallest positive root of the quadratic in ``x = (Omega/delta)^2`` is
    taken; the MS variants use the closed-loop single-tone relation.
    """
    variant = Variant(variant)
    if delta <= 0:
        raise InvalidArgumentError("delta must be positive")
    if phi < 0:
        raise InvalidArgumentError("phi must be non-negative")
    if phi == 0:
        return 0.0
    eta_pair = np.atleast_2d(np.asarray(eta_pair, dtype=float))
    if variant is Variant.MS_SINGLE_MODE:
        return delta * math.sqrt(phi / (4.0 * math.pi))
    if variant is Variant.MS_ALL_MODES:
        raise InvalidArgumentError("use ms_all_modes_amplitudes for the multi-mode MS gate")
    quart, rhs = _CONDITIONS[variant]
    a = quart * float(np.sum(eta_pair[:, central_mode] ** 2))
    b = 2.0 + float(np.sum(eta_pair**2))
    c = rhs * phi
    disc = b * b - 4.0 * a * c
    if disc < 0:
        max_phi = b * b / (4.0 * a) / rhs
        raise InfeasibleTargetError(
            f"entangling phase {phi:.6g} unreachable; maximum is {max_phi:.6g}", max_phi=max_phi)
    x = 2.0 * c / (b + math.sqrt(disc))
    return delta * math.sqrt(x)


def ms_all_modes_amplitudes(delta: float, n_modes: int, phi: float) -> np.ndarray:
    """Per-mode amplitudes for one tone per mode at detunings d * delta.

    Mode ``d`` (tone at ``(d+1) delta``) contributes the phase
    ``4 pi Omega_d^2 / ((d+1) delta^2)``; each mode carries an equal share.
    """
    if n_modes < 1:
        raise InfeasibleTargetError("no modes to drive")
    d = np.arange(1, n_modes + 1)
    return delta * np.sqrt(d * phi / (4.0 * math.pi * n_modes))


# ----------------------------------------------------------------- synthesis

def _pair_eta(system: SystemSpec, target: GateTarget) -> np.ndarray:
    target.check(system)
    return system.eta[list(target.pair), :]


def _second_sidebands(system, target, rabi, delta, prefactor):
    eta = system.eta
    a, b = target.pair
    entries, notes = {}, []
    for l in range(system.n_modes):
        eta_t = prefactor * math.sqrt(eta[a, l] ** 2 + eta[b, l] ** 2)
        sign = 1.0 if eta[a, l] >= 0 else -1.0
        for j in target.pair:
            if eta[j, l] == 0:
                msg = f"eta[{j},{l}] = 0: second sideband of mode {l} on ion {j} dropped"
                warnings.warn(msg, RuntimeWarning, stacklevel=3)
                notes.append(msg)
                continue
            entries[(j, l, 2)] = (Tone(sign * rabi * eta_t / eta[j, l], delta),)
    return entries, notes


def synthesize_robust(system: SystemSpec, target: GateTarget, delta: float) -> DriveProgram:
    """Bichromatic first sideband on the central mode plus monochromatic
    second sidebands on every mode."""
    if Variant(target.variant) is not Variant.ROBUST:
        raise InvalidArgumentError("target variant must be robust")
    eta_pair = _pair_eta(system, target)
    rabi = solve_rabi(delta, eta_pair, target.phi, Variant.ROBUST, target.central_mode)
    c = target.central_mode
    entries = {(j, c, 1): (Tone(rabi, 2 * delta), Tone(-1.5 * rabi, 3 * delta))
               for j in target.pair}
    extra, notes = _second_sidebands(system, target, rabi, delta, math.sqrt(5.0) / 2.0)
    entries.update(extra)
    return DriveProgram(entries, 2 * math.pi / delta, rabi, delta, target, tuple(notes))


def synthesize_monochromatic(system: SystemSpec, target: GateTarget, delta: float) -> DriveProgram:
    if Variant(target.variant) is not Variant.MONOCHROMATIC:
        raise InvalidArgumentError("target variant must be monochromatic")
    eta_pair = _pair_eta(system, target)
    rabi = solve_rabi(delta, eta_pair, target.phi, Variant.MONOCHROMATIC, target.central_mode)
    c = target.central_mode
    entries = {(j, c, 1): (Tone(rabi, 2 * delta),) for j in target.pair}
    extra, notes = _second_sidebands(system, target, rabi, delta, math.sqrt(2.0) / 2.0)
    entries.update(extra)
    return DriveProgram(entries, 2 * math.pi / delta, rabi, delta, target, tuple(notes))


def synthesize_ms(system: SystemSpec, target: GateTarget, delta: float) -> DriveProgram:
    """First-sideband-only Molmer-Sorensen drive, identical on both ions."""
    variant = Variant(target.variant)
    target.check(system)
    if variant is Variant.MS_SINGLE_MODE:
        rabi = solve_rabi(delta, None, target.phi, variant)
        entries = {(j, target.central_mode, 1): (Tone(rabi, delta),) for j in target.pair}
    elif variant is Variant.MS_ALL_MODES:
        amps = ms_all_modes_amplitudes(delta, system.n_modes, target.phi)
        rabi = float(amps[0])
        entries = {(j, l, 1): (Tone(amps[l], (l + 1) * delta),)
                   for j in target.pair for l in range(system.n_modes)}
    else:
        raise InvalidArgumentError("target variant must be ms_single_mode or ms_all_modes")
    return DriveProgram(entries, 2 * math.pi / delta, rabi, delta, target)


def synthesize(system: SystemSpec, target: GateTarget, delta: float) -> DriveProgram:
    variant = Variant(target.variant)
    if variant is Variant.ROBUST:
        return synthesize_robust(system, target, delta)
    if variant is Variant.MONOCHROMATIC:
        return synthesize_monochromatic(system, target, delta)
    return synthesize_ms(system, target, delta)


def all_pairs(n_ions: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(n_ions) for b in range(a + 1, n_ions)]


# ---------------------------------------------------------------- diagnostics

def fourier_constraint_residual(tones: Sequence) -> float:
    """|sum_m A_m prod_{k != m} a_k| for tones given as (A, a) pairs or Tones."""
    pairs = [(t.amplitude, t.frequency) if isinstance(t, Tone) else (complex(t[0]), float(t[1]))
             for t in tones]
    if not pairs:
        raise InvalidArgumentError("need at least one tone")
    freqs = [a for _, a in pairs]
    if len(set(freqs)) != len(freqs):
        raise InvalidArgumentError("repeated tone frequencies; merge tones first")
    total = 0j
    for m, (amp, _) in enumerate(pairs):
        total += amp * math.prod(a for k, a in enumerate(freqs) if k != m)
    return abs(total)


def peak_rabi(program: DriveProgram, system: SystemSpec, ion: int, samples: int = 2048) -> float:
    """max_t sum_{l,k} |F[ion,l,k](t) / eta[ion,l]|: the peak physical drive strength."""
    t = np.linspace(0.0, program.gate_time, samples)
    total = np.zeros_like(t)
    for (j, l, k), _ in program.entries.items():
        if j != ion:
            continue
        eta = system.eta[j, l]
        if eta == 0:
            continue
        total += np.abs(evaluate(program, j, l, k, t) / eta)
    return float(np.max(total)) if total.size else 0.0


def amplitude_cap_ratio(program: DriveProgram, reference: DriveProgram, system: SystemSpec) -> float:
    """Peak drive of ``program`` relative to ``reference`` (e.g. the MS gate)."""
    ions = sorted(set(program.ions) | set(reference.ions))
    peak = max(peak_rabi(program, system, j) for j in ions)
    ref = max(peak_rabi(reference, system, j) for j in ions)
    return peak / ref if ref > 0 else math.inf


def scale_time(program: DriveProgram, factor: float) -> DriveProgram:
    """Slow the program down by ``factor`` (frequencies and amplitudes divided).

    In the rotating frame the gate is unchanged; only the duration and the
    peak drive strength change.  Used to equalise peak drive strengths.
    """
    entries = {key: tuple(Tone(t.amplitude / factor, t.frequency / factor) for t in tones)
               for key, tones in program.entries.items()}
    return DriveProgram(entries, program.gate_time * factor, program.rabi / factor,
                        program.delta / factor, program.target, program.warnings)


def iter_tones(program: DriveProgram) -> Iterable[tuple[tuple[int, int, int], Tone]]:
    for key, tones in sorted(program.entries.items()):
        for tone in tones:
            yield key, tone
