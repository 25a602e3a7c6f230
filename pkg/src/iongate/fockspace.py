"""Truncated spin-boson Hilbert space for an ion chain.

Basis ordering is fixed: the spins come first (ion 0 is the slowest index),
followed by the motional modes (mode 0 next).  Within each mode the phonon
index runs upwards from the window floor, so the full basis is
``kron(spin_0, ..., spin_{N-1}, mode_0, ..., mode_{M-1})``.  Spin state
``|0>`` is spin-down; ``sigma_+`` maps ``|0>`` to ``|1>``.

Units: hbar = 1 and the trap frequency nu = 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np
import scipy.optimize
import scipy.sparse as sp

from .errors import CutoffTooSmallError, InvalidArgumentError

SIGMA_Y = np.array([[0.0, 1.0j], [-1.0j, 0.0]])  # i(sigma_- - sigma_+)
SIGMA_Z = np.array([[-1.0, 0.0], [0.0, 1.0]])
SIGMA_PLUS = np.array([[0.0, 0.0], [1.0, 0.0]])
SIGMA_MINUS = SIGMA_PLUS.T.copy()

# sigma_y eigenvectors, columns ordered (+1, -1)
SIGMA_Y_EIGVECS = np.array([[1.0, 1.0], [-1.0j, 1.0j]]) / math.sqrt(2.0)


def normal_modes(n_ions: int) -> tuple[np.ndarray, np.ndarray]:
    """Axial normal modes of an equal-mass linear Coulomb crystal.

    Returns ``(kappa, chi)`` where ``kappa[l]`` is the frequency of mode ``l``
    in units of the trap frequency (ascending, ``kappa[0] == 1`` for the
    centre-of-mass mode) and ``chi[j, l]`` the participation of ion ``j``.
    Each column of ``chi`` has its first nonzero entry positive.
    """
    if int(n_ions) != n_ions or n_ions < 1:
        raise InvalidArgumentError(f"n_ions must be a positive integer, got {n_ions!r}")
    n_ions = int(n_ions)
    if n_ions == 1:
        return np.ones(1), np.ones((1, 1))

    def energy(u):
        d = u[:, None] - u[None, :]
        iu = np.triu_indices(n_ions, 1)
        return 0.5 * np.sum(u**2) + np.sum(1.0 / np.abs(d[iu]))

    def grad(u):
        d = u[:, None] - u[None, :]
        np.fill_diagonal(d, np.inf)
        return u - np.sum(np.sign(d) / d**2, axis=1)

    u0 = np.linspace(-1.0, 1.0, n_ions) * n_ions**0.6
    res = scipy.optimize.minimize(energy, u0, jac=grad, method="BFGS",
                                  options={"gtol": 1e-13, "maxiter": 10000})
    u = np.sort(res.x)
    d = np.abs(u[:, None] - u[None, :])
    np.fill_diagonal(d, np.inf)
    hess = -2.0 / d**3
    np.fill_diagonal(hess, 1.0 + 2.0 * np.sum(1.0 / d**3, axis=1))
    evals, evecs = np.linalg.eigh(hess)
    order = np.argsort(evals)
    kappa = np.sqrt(evals[order])
    chi = evecs[:, order]
    for l in range(n_ions):
        col = chi[:, l]
        first = col[np.flatnonzero(np.abs(col) > 1e-12)[0]]
        if first < 0:
            chi[:, l] = -col
    return kappa, chi


@dataclass(frozen=True)
class SystemSpec:
    """Ion chain parameters: mode frequency ratios, mode participation
    coefficients ``mode_coeffs[j, l]`` and the coupling factor."""

    n_ions: int
    mode_ratios: np.ndarray
    mode_coeffs: np.ndarray
    coupling: float
    trap_freq: float = 1.0

    def __post_init__(self):
        kappa = np.asarray(self.mode_ratios, dtype=float).reshape(-1)
        chi = np.asarray(self.mode_coeffs, dtype=float)
        if chi.ndim != 2 or chi.shape != (self.n_ions, kappa.size):
            raise InvalidArgumentError(
                f"mode_coeffs must have shape ({self.n_ions}, {kappa.size}), got {chi.shape}")
        if np.any(kappa <= 0):
            raise InvalidArgumentError("mode frequency ratios must be positive")
        if self.coupling < 0 or not np.isfinite(self.coupling):
            raise InvalidArgumentError("coupling must be finite and non-negative")
        if np.any(np.abs(chi) > 1 + 1e-12):
            raise InvalidArgumentError("|mode_coeffs| must not exceed 1")
        object.__setattr__(self, "mode_ratios", kappa)
        object.__setattr__(self, "mode_coeffs", chi)

    @classmethod
    def chain(cls, n_ions: int, coupling: float) -> "SystemSpec":
        kappa, chi = normal_modes(n_ions)
        return cls(n_ions, kappa, chi, float(coupling))

    @classmethod
    def from_eta(cls, eta, mode_ratios) -> "SystemSpec":
        """Build from an explicit Lamb-Dicke matrix (e.g. mixed species)."""
        eta = np.asarray(eta, dtype=float)
        lam = float(np.max(np.abs(eta))) if eta.size else 0.0
        chi = eta / lam if lam > 0 else np.zeros_like(eta)
        return cls(eta.shape[0], np.asarray(mode_ratios, float), chi, lam)

    @property
    def n_modes(self) -> int:
        return self.mode_ratios.size

    @property
    def eta(self) -> np.ndarray:
        return self.mode_coeffs * self.coupling

    def with_coupling(self, coupling: float) -> "SystemSpec":
        return SystemSpec(self.n_ions, self.mode_ratios, self.mode_coeffs, float(coupling))

    def orthonormality_defect(self) -> float:
        chi = self.mode_coeffs
        return float(np.max(np.abs(chi.T @ chi - np.eye(chi.shape[1]))))


def default_cutoff(n_init: int, coupling: float, margin: int = 15) -> int:
    """Phonon cutoff for a mode initially holding ``n_init`` quanta."""
    return int(n_init) + max(int(margin), math.ceil(10.0 * coupling * math.sqrt(n_init + 1)))


@dataclass(frozen=True)
class FockSpace:
    """Spins times truncated modes.  Mode ``l`` keeps phonon numbers
    ``floors[l] .. cutoffs[l]`` inclusive (floors default to zero)."""

    n_ions: int
    cutoffs: tuple[int, ...]
    floors: tuple[int, ...] = field(default=None)

    def __post_init__(self):
        cutoffs = tuple(int(c) for c in self.cutoffs)
        floors = tuple(0 for _ in cutoffs) if self.floors is None else tuple(int(f) for f in self.floors)
        if len(floors) != len(cutoffs):
            raise InvalidArgumentError("floors and cutoffs differ in length")
        if any(f < 0 or c < f for f, c in zip(floors, cutoffs)):
            raise InvalidArgumentError(f"invalid phonon window floors={floors} cutoffs={cutoffs}")
        if self.n_ions < 0:
            raise InvalidArgumentError("n_ions must be non-negative")
        object.__setattr__(self, "cutoffs", cutoffs)
        object.__setattr__(self, "floors", floors)

    @classmethod
    def for_fock_state(cls, n_ions: int, n_init: Sequence[int], coupling: float,
                       margin: int = 15, window: bool = False) -> "FockSpace":
        """Apply the cutoff policy to an initial Fock state.  With
        ``window=True`` the ladder is also cut from below by the same margin."""
        cut = [default_cutoff(n, coupling, margin) for n in n_init]
        floors = [max(0, 2 * n - c) for n, c in zip(n_init, cut)] if window else None
        return cls(n_ions, tuple(cut), None if floors is None else tuple(floors))

    @property
    def n_modes(self) -> int:
        return len(self.cutoffs)

    @property
    def mode_dims(self) -> tuple[int, ...]:
        return tuple(c - f + 1 for f, c in zip(self.floors, self.cutoffs))

    @property
    def spin_dim(self) -> int:
        return 2**self.n_ions

    @property
    def motional_dim(self) -> int:
        return int(np.prod(self.mode_dims, dtype=np.int64)) if self.mode_dims else 1

    @property
    def total_dim(self) -> int:
        return self.spin_dim * self.motional_dim

    @property
    def dims(self) -> tuple[int, ...]:
        return (2,) * self.n_ions + self.mode_dims

    def levels(self, mode: int) -> np.ndarray:
        return np.arange(self.floors[mode], self.cutoffs[mode] + 1)

    def motional_index(self, n: Sequence[int]) -> int:
        idx = 0
        for l, (nl, dim) in enumerate(zip(n, self.mode_dims)):
            k = nl - self.floors[l]
            if not 0 <= k < dim:
                raise CutoffTooSmallError(f"phonon number {nl} outside window of mode {l}")
            idx = idx * dim + k
        return idx

    def fock_vector(self, n: Sequence[int]) -> np.ndarray:
        v = np.zeros(self.motional_dim, dtype=complex)
        v[self.motional_index(n)] = 1.0
        return v

    def spin_only(self) -> "FockSpace":
        return FockSpace(self.n_ions, ())

    def motion_only(self) -> "FockSpace":
        return FockSpace(0, self.cutoffs, self.floors)

    def with_margin_scaled(self, n_init: Sequence[int], factor: float) -> "FockSpace":
        cut = [n + math.ceil(factor * (c - n)) for n, c in zip(n_init, self.cutoffs)]
        floors = [max(0, n - math.ceil(factor * (n - f))) for n, f in zip(n_init, self.floors)]
        return FockSpace(self.n_ions, tuple(cut), tuple(floors))


# ----------------------------------------------------------------- operators

def annihilation(levels: np.ndarray) -> sp.csr_matrix:
    levels = np.asarray(levels)
    vals = np.sqrt(levels[1:].astype(float))
    return sp.diags(vals, 1, shape=(levels.size, levels.size), format="csr", dtype=complex)


def creation(levels: np.ndarray) -> sp.csr_matrix:
    return annihilation(levels).T.tocsr()


def number(levels: np.ndarray) -> sp.csr_matrix:
    return sp.diags(np.asarray(levels, float), 0, format="csr", dtype=complex)


def displacement_elements(k: int, eta: float, m: np.ndarray) -> np.ndarray:
    """Matrix elements <m+k| D_k(eta) |m> for k >= 0.

    D_k(eta) = sum_n (i eta)^(2n+k) a^dag^(n+k) a^n / ((n+k)! n!), summed
    until the next term is below 1e-16 of the running sum.
    """
    m = np.asarray(m, dtype=np.int64)
    lg = np.array([math.lgamma(x + k + 1) - math.lgamma(x + 1) for x in m])
    term = (1j * eta) ** k * np.exp(0.5 * lg) / math.factorial(k)
    total = term.copy()
    x = -(eta**2)
    n = 0
    while True:
        active = m > n
        if not np.any(active):
            break
        term = term * np.where(active, x * (m - n) / ((n + k + 1) * (n + 1)), 0.0)
        total = total + term
        n += 1
        if np.all(np.abs(term) <= 1e-16 * np.maximum(np.abs(total), 1e-300)):
            break
    return total


def displacement_block(order: int, eta: float, levels) -> sp.csr_matrix:
    """Single-mode sideband operator D_{order}(eta) on a phonon window.

    ``levels`` is either an integer cutoff (window ``0..cutoff``) or an
    explicit array of consecutive phonon numbers.  Negative orders use
    D_{-k} = (-1)^k D_k^dag.
    """
    if np.isscalar(levels):
        levels = np.arange(int(levels) + 1)
    levels = np.asarray(levels)
    k = int(order)
    if levels[-1] < abs(k):
        raise InvalidArgumentError(f"cutoff {levels[-1]} below sideband order |{k}|")
    if k < 0:
        return ((-1) ** (-k) * displacement_block(-k, eta, levels).conj().T).tocsr()
    dim = levels.size
    if k >= dim:
        return sp.csr_matrix((dim, dim), dtype=complex)
    vals = displacement_elements(k, eta, levels[: dim - k])
    return sp.diags(vals, -k, shape=(dim, dim), format="csr", dtype=complex)


def embed(block, subsystem: tuple[str, int], space: FockSpace) -> sp.csr_matrix:
    """Tensor ``block`` into ``space`` acting on ``("spin", j)`` or ``("mode", l)``."""
    kind, idx = subsystem
    if kind == "spin":
        pos = idx
        if not 0 <= idx < space.n_ions:
            raise InvalidArgumentError(f"no spin {idx}")
    elif kind == "mode":
        pos = space.n_ions + idx
        if not 0 <= idx < space.n_modes:
            raise InvalidArgumentError(f"no mode {idx}")
    else:
        raise InvalidArgumentError(f"unknown subsystem kind {kind!r}")
    dims = space.dims
    block = sp.csr_matrix(block)
    if block.shape != (dims[pos], dims[pos]):
        raise InvalidArgumentError(
            f"block shape {block.shape} does not match subsystem dimension {dims[pos]}")
    left = int(np.prod(dims[:pos], dtype=np.int64))
    right = int(np.prod(dims[pos + 1:], dtype=np.int64))
    out = block
    if left > 1:
        out = sp.kron(sp.identity(left, dtype=complex, format="csr"), out, format="csr")
    if right > 1:
        out = sp.kron(out, sp.identity(right, dtype=complex, format="csr"), format="csr")
    return out.tocsr()


def kron_all(blocks) -> sp.csr_matrix:
    return reduce(lambda a, b: sp.kron(a, b, format="csr"), blocks).tocsr()


def mode_operator(space: FockSpace, factors: dict[int, sp.spmatrix]) -> sp.csr_matrix:
    """Motional operator with single-mode ``factors`` (identity elsewhere)."""
    blocks = [factors.get(l, sp.identity(d, dtype=complex, format="csr"))
              for l, d in enumerate(space.mode_dims)]
    if not blocks:
        return sp.identity(1, dtype=complex, format="csr")
    return kron_all(blocks)


def spin_operator(n_ions: int, factors: dict[int, np.ndarray]) -> sp.csr_matrix:
    blocks = [sp.csr_matrix(factors.get(j, np.eye(2))) for j in range(n_ions)]
    if not blocks:
        return sp.identity(1, dtype=complex, format="csr")
    return kron_all(blocks)


def is_hermitian(op, tol: float = 1e-10) -> bool:
    diff = op - op.conj().T
    return _maxabs(diff) <= tol


def is_unitary(op, tol: float = 1e-10) -> bool:
    prod = op.conj().T @ op
    eye = sp.identity(op.shape[0]) if sp.issparse(prod) else np.eye(op.shape[0])
    return _maxabs(prod - eye) <= tol


def _maxabs(x) -> float:
    if sp.issparse(x):
        return float(np.max(np.abs(x.data))) if x.nnz else 0.0
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


# ------------------------------------------------------------- thermal states

def thermal_weights(nbar: float, cutoff: int, tol: float = 1e-8) -> np.ndarray:
    """Geometric phonon distribution on ``0..cutoff``, renormalised."""
    if nbar < 0:
        raise InvalidArgumentError("mean occupation must be non-negative")
    n = np.arange(cutoff + 1)
    if nbar == 0:
        p = (n == 0).astype(float)
        return p
    r = nbar / (1.0 + nbar)
    tail = r ** (cutoff + 1)
    if tail > tol:
        raise CutoffTooSmallError(
            f"thermal tail mass {tail:.3g} above {tol:g} at cutoff {cutoff}", leakage=tail)
    p = (1.0 - r) * r**n
    return p / p.sum()


def thermal_cutoff(nbar: float, tol: float = 1e-8) -> int:
    """Smallest cutoff whose discarded geometric tail is below ``tol``."""
    if nbar <= 0:
        return 0
    r = nbar / (1.0 + nbar)
    return max(0, math.ceil(math.log(tol) / math.log(r)) - 1)


@dataclass(frozen=True)
class ThermalState:
    per_mode: tuple[np.ndarray, ...]

    @property
    def joint(self) -> np.ndarray:
        return reduce(np.multiply.outer, self.per_mode)

    def mean(self) -> np.ndarray:
        return np.array([np.dot(np.arange(p.size), p) for p in self.per_mode])


def thermal_state(nbar, space: FockSpace, tol: float = 1e-8) -> ThermalState:
    nbars = np.broadcast_to(np.asarray(nbar, float), (space.n_modes,))
    if any(f != 0 for f in space.floors):
        raise InvalidArgumentError("thermal states need phonon windows starting at zero")
    return ThermalState(tuple(thermal_weights(nb, c, tol) for nb, c in zip(nbars, space.cutoffs)))
