"""Fourth-order Magnus expansion of the gate propagator and monomial fits of generators.

The Magnus terms are obtained from the time-ordered (Dyson) integrals
``P_k = int_{t1>...>tk} A(t1)...A(tk)`` with ``A = -iH``: since ``P_k`` and
``Omega_k`` are both homogeneous of degree ``k`` in ``A``, grading
``log(1 + P1 + P2 + ...)`` by degree reproduces the nested-commutator terms
exactly.  The ``P_k`` satisfy ``P_k' = A P_{k-1}``, a nilpotent block system
that the commutator-free fourth-order scheme integrates with a terminating
exponential series.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .drive import DriveProgram
from .dynamics import (
    _CF4_A, _CF4_C, HamiltonianLevel, TonalOperator, auto_steps, _ybasis, sector_hamiltonians,
)
from .errors import InvalidArgumentError, PrecisionError
from .fockspace import FockSpace, SystemSpec, annihilation

MAX_ORDER = 4
MAX_GRID = 1 << 14


def dyson_terms(ham: TonalOperator, t_final: float, order: int, steps: int) -> list[np.ndarray]:
    """``[P_1, ..., P_order]`` for ``A(t) = -i H(t)`` on ``[0, t_final]``."""
    dim = ham.dim
    eye = np.eye(dim, dtype=complex)
    terms = [eye] + [np.zeros((dim, dim), dtype=complex) for _ in range(order)]
    dt = t_final / steps

    def apply(x, terms):
        # exp(S (x) X) on (P_0..P_order), S the lower shift; the series stops at X^order
        out = [t.copy() for t in terms]
        powers = {0: terms}
        for m in range(1, order + 1):
            prev = powers[m - 1]
            powers[m] = [None] * (order + 1)
            for j in range(order + 1 - m):
                powers[m][j] = (x @ prev[j]) / m
            for j in range(order + 1 - m):
                out[j + m] += powers[m][j]
        return out

    dense = dim <= 400  # BLAS beats sparse products on small blocks
    for n in range(steps):
        t0 = n * dt
        h1 = ham.at(t0 + _CF4_C[0] * dt)
        h2 = ham.at(t0 + _CF4_C[1] * dt)
        if dense:
            h1, h2 = h1.toarray(), h2.toarray()
        terms = apply(-1j * dt * (_CF4_A[1] * h1 + _CF4_A[0] * h2), terms)
        terms = apply(-1j * dt * (_CF4_A[0] * h1 + _CF4_A[1] * h2), terms)
    return terms[1:]


def magnus_from_dyson(p: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Degree-graded logarithm of ``1 + P1 + P2 + ...`` (up to four terms)."""
    order = len(p)
    if order > MAX_ORDER:
        raise InvalidArgumentError(f"order must be <= {MAX_ORDER}")
    p = list(p) + [None] * (MAX_ORDER - order)
    p1, p2, p3, p4 = p
    out = [p1]
    if order >= 2:
        out.append(p2 - 0.5 * p1 @ p1)
    if order >= 3:
        out.append(p3 - 0.5 * (p1 @ p2 + p2 @ p1) + (p1 @ p1 @ p1) / 3.0)
    if order >= 4:
        p11 = p1 @ p1
        out.append(p4 - 0.5 * (p1 @ p3 + p3 @ p1 + p2 @ p2)
                   + (p11 @ p2 + p1 @ p2 @ p1 + p2 @ p11) / 3.0 - 0.25 * (p11 @ p11))
    return out


@dataclass
class MagnusResult:
    """Magnus terms per sigma_y sector.

    ``blocks[s][i]`` is the motional block of term ``i+1`` in sector ``s``;
    ``errors[i]`` is the largest change of term ``i+1`` under grid doubling.
    """

    blocks: dict
    errors: np.ndarray
    sectors: list
    space: FockSpace
    steps: int

    @property
    def order(self) -> int:
        return len(self.errors)

    def generator(self, sector, upto: int | None = None) -> np.ndarray:
        upto = self.order if upto is None else upto
        return sum(self.blocks[sector][:upto])

    def term(self, i: int) -> np.ndarray:
        """Term ``i`` (1-based) on the full space, computational spin basis."""
        return self._full([self.blocks[s][i - 1] for s in self.sectors])

    def combined(self) -> np.ndarray:
        return self._full([self.generator(s) for s in self.sectors])

    def _full(self, blocks) -> np.ndarray:
        dm = blocks[0].shape[0]
        n_spins = len(self.sectors[0])
        big = scipy.linalg.block_diag(*blocks)
        w = np.kron(_ybasis(n_spins), np.eye(dm))
        return w @ big @ w.conj().T

    def propagator(self, sector) -> np.ndarray:
        return scipy.linalg.expm(self.generator(sector))

    def antihermiticity_defect(self) -> float:
        return max(float(np.max(np.abs(b + b.conj().T))) for s in self.sectors for b in self.blocks[s])


def magnus_terms(program: DriveProgram, system: SystemSpec, space: FockSpace,
                 level=HamiltonianLevel.EXACT_SERIES, order: int = MAX_ORDER,
                 grid: int | None = None, tol: float = 1e-8) -> MagnusResult:
    """Magnus terms up to ``order`` for each sector Hamiltonian of ``program``.

    ``grid`` is the number of integration steps.  The terms are recomputed
    on a doubled grid and Richardson-extrapolated; the reported error per
    term is the size of that correction, which must stay below ``tol``
    relative to the term size.  Without an explicit ``grid`` the grid is
    doubled until that holds.
    """
    if not 1 <= order <= MAX_ORDER:
        raise InvalidArgumentError(f"order must be in 1..{MAX_ORDER}")
    hams = sector_hamiltonians(program, system, space, level)
    refine = grid is None
    if grid is None:
        grid = max(auto_steps(h, program.gate_time, per_radian=8.0) for h in hams.values())
    while True:
        blocks, errors = _extrapolated_terms(hams, program.gate_time, order, grid)
        scale = max(1.0, max(float(np.max(np.abs(b[0]))) for b in blocks.values()))
        if np.max(errors) <= tol * scale:
            break
        if not refine or grid >= MAX_GRID:
            raise PrecisionError(f"Magnus terms not converged on a {grid}-step grid",
                                 estimates=errors)
        grid *= 2
    return MagnusResult(blocks, errors, list(hams), space.motion_only(), 2 * grid)


def _extrapolated_terms(hams: dict, t_final: float, order: int, grid: int):
    blocks = {}
    errors = np.zeros(order)
    for s, ham in hams.items():
        coarse = magnus_from_dyson(dyson_terms(ham, t_final, order, grid))
        fine = magnus_from_dyson(dyson_terms(ham, t_final, order, 2 * grid))
        extrapolated = []
        for i, (a, b) in enumerate(zip(coarse, fine)):
            corr = (b - a) / 15.0
            errors[i] = max(errors[i], float(np.max(np.abs(corr))))
            extrapolated.append(b + corr)
        blocks[s] = extrapolated
    return blocks, errors


# ------------------------------------------------------------ decomposition

@dataclass
class GeneratorDecomposition:
    """Coefficients ``g[(p, q, r)]`` of ``prod_l a_l^dag^{p_l} a_l^{q_l}`` times
    ``prod_j (sigma_y^(j))^{r_j}``; ``p``, ``q``, ``r`` are tuples."""

    coefficients: dict
    residual: float
    n_modes: int
    n_spins: int
    fit_cutoff: int
    basis_keys: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.coefficients.get(key, 0.0)

    def entangling(self, pair: tuple[int, int] = (0, 1)) -> complex:
        r = tuple(1 if j in pair else 0 for j in range(self.n_spins))
        zero = (0,) * self.n_modes
        return self.coefficients.get((zero, zero, r), 0.0)

    def spin_motion_terms(self) -> dict:
        """Coefficients with motional operators and nontrivial spin dependence."""
        return {k: v for k, v in self.coefficients.items() if (any(k[0]) or any(k[1])) and any(k[2])}

    def max_spin_motion(self) -> float:
        terms = self.spin_motion_terms()
        return max((abs(v) for v in terms.values()), default=0.0)


def _mode_monomials(max_power: int):
    return [(p, q) for p in range(max_power + 1) for q in range(max_power + 1 - p)]


def _monomial_blocks(fit_cutoff: int, max_power: int):
    """Per-mode monomial matrices restricted to levels 0..fit_cutoff, built on a
    larger space so that the restriction carries no truncation artefacts."""
    big = fit_cutoff + max_power + 1
    a = annihilation(np.arange(big + 1)).toarray()
    ad = a.conj().T
    out = {}
    for p, q in _mode_monomials(max_power):
        m = np.linalg.matrix_power(ad, p) @ np.linalg.matrix_power(a, q)
        out[(p, q)] = m[: fit_cutoff + 1, : fit_cutoff + 1]
    return out


def _restrict(block: np.ndarray, space: FockSpace, fit_cutoff: int) -> np.ndarray:
    if any(f != 0 for f in space.floors):
        raise InvalidArgumentError("decomposition needs windows starting at level zero")
    if any(c < fit_cutoff for c in space.cutoffs):
        raise InvalidArgumentError("fit_cutoff exceeds the space cutoff")
    idx = [np.arange(fit_cutoff + 1)] * space.n_modes
    dims = space.mode_dims
    flat = np.ravel_multi_index(np.meshgrid(*idx, indexing="ij"), dims).ravel()
    return block[np.ix_(flat, flat)]


def decompose_sector_generators(gens: dict, space: FockSpace, max_power: int = 4,
                                fit_cutoff: int | None = None) -> GeneratorDecomposition:
    """Fit sector-resolved generators ``gens[s]`` (motional blocks, one per
    sigma_y sector ``s``) onto spin-power times motional-monomial products."""
    sectors = list(gens)
    n_spins = len(sectors[0])
    n_modes = space.n_modes
    if fit_cutoff is None:
        fit_cutoff = min(space.cutoffs)
    mono = _monomial_blocks(fit_cutoff, max_power)
    keys = list(itertools.product(_mode_monomials(max_power), repeat=n_modes))
    basis = []
    for combo in keys:
        m = np.eye(1)
        for pq in combo:
            m = np.kron(m, mono[pq])
        basis.append(m.ravel())
    basis = np.array(basis).T
    gram = basis.conj().T @ basis
    try:
        chol = scipy.linalg.cho_factor(gram)
    except np.linalg.LinAlgError:
        raise InvalidArgumentError("monomial Gram matrix is singular: fit_cutoff too small") from None
    if np.linalg.cond(gram) > 1e14:
        raise InvalidArgumentError("monomial Gram matrix is rank deficient: fit_cutoff too small")
    coeffs = {}
    resid_sq = 0.0
    norm_sq = 0.0
    spin_powers = list(itertools.product((0, 1), repeat=n_spins))
    restricted = {s: _restrict(np.asarray(g), space, fit_cutoff) for s, g in gens.items()}
    for r in spin_powers:
        comp = sum(np.prod([sj**rj for sj, rj in zip(s, r)]) * restricted[s] for s in sectors) / len(sectors)
        vec = comp.ravel()
        g = scipy.linalg.cho_solve(chol, basis.conj().T @ vec)
        # residual of this spin component, weighted like the full operator norm
        resid_sq += len(sectors) * float(np.sum(np.abs(vec - basis @ g) ** 2))
        norm_sq += len(sectors) * float(np.sum(np.abs(vec) ** 2))
        for combo, val in zip(keys, g):
            p = tuple(pq[0] for pq in combo)
            q = tuple(pq[1] for pq in combo)
            coeffs[(p, q, r)] = complex(val)
    residual = math.sqrt(resid_sq)
    return GeneratorDecomposition(coeffs, residual, n_modes, n_spins, fit_cutoff,
                                  [(tuple(pq[0] for pq in c), tuple(pq[1] for pq in c)) for c in keys])


def decompose_generator(gen: np.ndarray, space: FockSpace, max_power: int = 4,
                        fit_cutoff: int | None = None) -> GeneratorDecomposition:
    """Least-squares coefficients of a full-space operator (spins (x) motion) in
    the basis of sigma_y powers times normal-ordered motional monomials.

    Spin components outside the sigma_y algebra count toward the residual.
    """
    gen = np.asarray(gen)
    dm = space.motional_dim
    if gen.shape != (space.total_dim, space.total_dim):
        raise InvalidArgumentError("generator shape does not match the space")
    w = np.kron(_ybasis(space.n_ions), np.eye(dm))
    gy = w.conj().T @ gen @ w
    sectors = [tuple(1 - 2 * b for b in bits) for bits in itertools.product((0, 1), repeat=space.n_ions)]
    gens = {s: gy[i * dm:(i + 1) * dm, i * dm:(i + 1) * dm] for i, s in enumerate(sectors)}
    off = gy.copy()
    for i in range(len(sectors)):
        off[i * dm:(i + 1) * dm, i * dm:(i + 1) * dm] = 0
    dec = decompose_sector_generators(gens, space.motion_only(), max_power, fit_cutoff)
    dec.residual = math.hypot(dec.residual, float(np.linalg.norm(
        _restrict_full(off, space, dec.fit_cutoff))))
    return dec


def _restrict_full(op: np.ndarray, space: FockSpace, fit_cutoff: int) -> np.ndarray:
    dm = space.motional_dim
    d = space.spin_dim
    blocks = [[_restrict(op[i * dm:(i + 1) * dm, k * dm:(k + 1) * dm], space.motion_only(), fit_cutoff)
               for k in range(d)] for i in range(d)]
    return np.block(blocks)


def reconstruct(dec: GeneratorDecomposition, space: FockSpace) -> dict:
    """Sector blocks (restricted to the fit window) rebuilt from the coefficients."""
    mono = _monomial_blocks(dec.fit_cutoff, max(max(p) + max(q) for p, q, _ in dec.coefficients))
    sectors = [tuple(1 - 2 * b for b in bits) for bits in itertools.product((0, 1), repeat=dec.n_spins)]
    out = {}
    for s in sectors:
        total = 0
        for (p, q, r), g in dec.coefficients.items():
            if g == 0:
                continue
            m = np.eye(1)
            for pl, ql in zip(p, q):
                m = np.kron(m, mono[(pl, ql)])
            total = total + g * np.prod([sj**rj for sj, rj in zip(s, r)]) * m
        out[s] = total
    return out
