import math

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from iongate.drive import GateTarget, synthesize
from iongate.dynamics import TonalOperator, evolve_states, sector_hamiltonians
from iongate.errors import InvalidArgumentError, PrecisionError
from iongate.fockspace import SIGMA_Y, FockSpace, SystemSpec, annihilation
from iongate.magnus import (
    GeneratorDecomposition, decompose_generator, decompose_sector_generators, dyson_terms,
    magnus_from_dyson, magnus_terms, reconstruct,
)


def random_matrix(rng, n):
    return rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))


class TestDysonLog:
    def test_constant_generator(self):
        rng = np.random.default_rng(1)
        a = random_matrix(rng, 4) * 0.1
        p = [np.linalg.matrix_power(a, k) / math.factorial(k) for k in range(1, 5)]
        om = magnus_from_dyson(p)
        np.testing.assert_allclose(om[0], a, atol=1e-15)
        for term in om[1:]:
            assert np.max(np.abs(term)) < 1e-15

    def test_matches_matrix_log(self):
        # two constant pieces: exp(eB) exp(eA); the truncated series misses O(e^5)
        rng = np.random.default_rng(2)
        a, b = random_matrix(rng, 3), random_matrix(rng, 3)
        errs = []
        eps_values = [0.04, 0.02, 0.01]
        for eps in eps_values:
            pa = [np.linalg.matrix_power(eps * a, k) / math.factorial(k) for k in range(5)]
            pb = [np.linalg.matrix_power(eps * b, k) / math.factorial(k) for k in range(5)]
            # time-ordered product: later factor (b) on the left
            p = [sum(pb[i] @ pa[k - i] for i in range(k + 1)) for k in range(1, 5)]
            series = sum(magnus_from_dyson(p))
            exact = scipy.linalg.logm(scipy.linalg.expm(eps * b) @ scipy.linalg.expm(eps * a))
            errs.append(np.max(np.abs(series - exact)))
        slope = np.polyfit(np.log(eps_values), np.log(errs), 1)[0]
        assert slope > 4.7

    def test_dyson_constant_hamiltonian(self):
        h = sp.csr_matrix(np.array([[0.3, 0.1], [0.1, -0.2]], dtype=complex))
        ham = TonalOperator.from_terms([(0.0, h)], 2)
        p = dyson_terms(ham, 2.0, 3, 20)
        a = -2j * h.toarray()
        for k, pk in enumerate(p, start=1):
            np.testing.assert_allclose(pk, np.linalg.matrix_power(a, k) / math.factorial(k), atol=1e-12)


@pytest.fixture(scope="module")
def ms_magnus():
    system = SystemSpec.chain(2, 0.02)
    prog = synthesize(system, GateTarget("ms_single_mode"), 0.1)
    space = FockSpace(2, (12, 4))
    return system, prog, space, magnus_terms(prog, system, space)


class TestMagnusTerms:
    def test_first_term_vanishes_for_closed_loop(self, ms_magnus):
        *_, res = ms_magnus
        for s in res.sectors:
            assert np.max(np.abs(res.blocks[s][0])) < 1e-10

    def test_anti_hermitian(self, ms_magnus):
        *_, res = ms_magnus
        assert res.antihermiticity_defect() < 1e-10

    def test_matches_direct_propagation(self, ms_magnus):
        system, prog, space, res = ms_magnus
        hams = sector_hamiltonians(prog, system, space)
        v = space.motion_only().fock_vector((0, 0))
        for s in res.sectors:
            direct = evolve_states(hams[s], v, prog.gate_time, 800)
            # what remains is the truncation of the series after four terms
            assert np.linalg.norm(res.propagator(s) @ v - direct) < 1e-5

    def test_entangling_phase(self, ms_magnus):
        _, _, space, res = ms_magnus
        dec = decompose_generator(res.combined(), space, max_power=2, fit_cutoff=4)
        # phase falls short by the Debye-Waller reduction, O(eta^2) for the MS drive
        eta_sq = float(np.sum(SystemSpec.chain(2, 0.02).eta[0] ** 2))
        assert dec.entangling() == pytest.approx(1j * math.pi / 4, abs=2 * eta_sq)
        # the MS phase depends on the phonon number at O(eta^2)
        assert 0.25 * eta_sq < dec.max_spin_motion() < 2 * eta_sq

    def test_full_space_layout(self, ms_magnus):
        _, _, space, res = ms_magnus
        assert res.term(2).shape == (space.total_dim, space.total_dim)

    def test_bad_order(self, ms_magnus):
        system, prog, space, _ = ms_magnus
        with pytest.raises(InvalidArgumentError):
            magnus_terms(prog, system, space, order=5)

    def test_precision_error_on_coarse_grid(self, ms_magnus):
        system, prog, space, _ = ms_magnus
        with pytest.raises(PrecisionError) as err:
            magnus_terms(prog, system, space, grid=4, tol=1e-12)
        assert err.value.estimates is not None


class TestDecomposition:
    def test_roundtrip_known_operator(self):
        space = FockSpace(2, (8, 8))
        dm = space.motional_dim
        a0 = np.kron(annihilation(space.levels(0)).toarray(), np.eye(9))
        a1 = np.kron(np.eye(9), annihilation(space.levels(1)).toarray())
        y1, y2 = np.kron(SIGMA_Y, np.eye(2)), np.kron(np.eye(2), SIGMA_Y)
        motion = 0.02 * (a0.T @ a0.T) + 0.05 * (a1.T @ a0)
        gen = (0.7j * np.kron(y1 @ y2, np.eye(dm)) + np.kron(y1, motion)
               + 0.01j * np.kron(np.eye(4), a0.T @ a0))
        dec = decompose_generator(gen, space, max_power=3, fit_cutoff=4)
        assert dec.entangling() == pytest.approx(0.7j, abs=1e-12)
        assert dec[((2, 0), (0, 0), (1, 0))] == pytest.approx(0.02, abs=1e-12)
        assert dec[((0, 1), (1, 0), (1, 0))] == pytest.approx(0.05, abs=1e-12)
        assert dec[((1, 0), (1, 0), (0, 0))] == pytest.approx(0.01j, abs=1e-12)
        assert dec.residual < 1e-10
        assert dec.max_spin_motion() == pytest.approx(0.05, abs=1e-12)

    def test_non_y_spin_part_goes_to_residual(self):
        space = FockSpace(1, (3,))
        y = np.kron(SIGMA_Y, np.eye(4))
        x = np.kron(np.array([[0, 1.0], [1.0, 0]]), np.eye(4))
        assert decompose_generator(y, space, 1, 2).residual < 1e-12
        assert decompose_generator(x, space, 1, 2).residual > 1.0

    @settings(max_examples=15, deadline=None)
    @given(st.lists(st.complex_numbers(max_magnitude=1, allow_nan=False, allow_infinity=False),
                    min_size=6, max_size=6))
    def test_reconstruct_inverts_fit(self, vals):
        space = FockSpace(0, (6,))
        keys = [((0,), (0,)), ((1,), (0,)), ((0,), (1,)), ((1,), (1,)), ((2,), (0,)), ((0,), (2,))]
        coeffs = {(p, q, (1, 0)): v for (p, q), v in zip(keys, vals)}
        dec = GeneratorDecomposition(coeffs, 0.0, 1, 2, 4)
        blocks = reconstruct(dec, space)
        padded = {}
        for s, b in blocks.items():
            full = np.zeros((7, 7), dtype=complex)
            full[:5, :5] = b
            padded[s] = full
        again = decompose_sector_generators(padded, space, max_power=2, fit_cutoff=4)
        for key, v in coeffs.items():
            assert again[key] == pytest.approx(v, abs=1e-10)

    def test_fit_cutoff_too_large(self):
        space = FockSpace(0, (3,))
        with pytest.raises(InvalidArgumentError):
            decompose_sector_generators({(1,): np.eye(4), (-1,): np.eye(4)}, space, 2, 5)
