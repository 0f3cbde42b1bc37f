import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from ghzsource.polarization import DensityMatrix, fidelity, ghz_state, random_density_matrix, random_unitary
from ghzsource.tomography import (
    ANALYZER_ANGLES,
    CountRecord,
    MeasurementSetting,
    MonteCarloError,
    ReconstructionResult,
    analyzer_matrices,
    calibrate_efficiencies,
    design_matrix,
    dump_records,
    estimate,
    expected_probabilities,
    load_records,
    lre_reconstruct,
    mle_project,
    monte_carlo_errors,
    outcome_bits,
    outcome_projector,
    project_eigenvalues,
    reconstruct,
    settings,
    settings_97,
    simulate_dataset,
)

from oracles import nearest_density_matrix_bruteforce


def noiseless_records(rho, n):
    return [CountRecord(s, expected_probabilities(rho, s)) for s in settings(n)]


def random_hermitian_trace_one(rng, d):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    h = (a + a.conj().T) / 2
    return h - (np.trace(h).real - 1) / d * np.eye(d)


class TestSettings:
    def test_count(self):
        s = settings_97()
        assert len(s) == 97
        assert s[80].labels == ("Z",) * 4 and s[81].labels == ("Z",) * 4

    def test_analyzer_projects_onto_basis(self):
        # outcome 0 of each label is the + eigenvector of the matching Pauli
        paulis = {"X": [[0, 1], [1, 0]], "Y": [[0, -1j], [1j, 0]], "Z": [[1, 0], [0, -1]], "-Z": [[-1, 0], [0, 1]]}
        for lab, (h, q) in ANALYZER_ANGLES.items():
            m = analyzer_matrices(h, q)
            plus = m[0].conj()
            assert np.allclose(np.array(paulis[lab]) @ plus, plus, atol=1e-12)

    def test_projectors_complete(self):
        s = MeasurementSetting.from_labels(("X", "Y", "-Z"))
        total = sum(outcome_projector(s, o) for o in range(8))
        assert np.allclose(total, np.eye(8), atol=1e-12)

    def test_outcome_bits(self):
        assert outcome_bits(0b1010, 4) == (1, 0, 1, 0)
        with pytest.raises(ValueError):
            outcome_bits(16, 4)

    def test_unknown_label(self):
        with pytest.raises(ValueError):
            MeasurementSetting.from_labels(("X", "Q"))


class TestRecords:
    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        recs = simulate_dataset(ghz_state(3).density_matrix(), 200, seed=rng)
        recs[0] = CountRecord(recs[0].setting, recs[0].counts, 2.5, np.arange(12).reshape(3, 4))
        jittered = MeasurementSetting(recs[1].setting.labels, ((0.01, 0.0),) * 3)
        recs[1] = CountRecord(jittered, recs[1].counts)
        text = dump_records(recs)
        again = load_records(text)
        assert dump_records(again) == text
        assert again[1].setting.angles == jittered.angles
        assert np.array_equal(again[0].fivefold, recs[0].fivefold)

    def test_fractional_counts_survive(self):
        r = CountRecord(MeasurementSetting.from_labels("ZZ"), [0.5, 1, 2, 3], fivefold=[[0.25, 1], [0, 2]])
        again = CountRecord.from_json(r.to_json())
        assert np.array_equal(again.counts, r.counts) and np.array_equal(again.fivefold, r.fivefold)

    def test_validation(self):
        s = MeasurementSetting.from_labels("ZZ")
        with pytest.raises(ValueError):
            CountRecord(s, [1, 2, 3])
        with pytest.raises(ValueError):
            CountRecord(s, [1, 2, 3, -1])
        with pytest.raises(ValueError):
            CountRecord(s, [1, 2, 3, 4], fivefold=np.zeros((2, 3)))


class TestLre:
    def test_noiseless_round_trip(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            rho = random_density_matrix(rng, 4)
            assert np.abs(lre_reconstruct(noiseless_records(rho, 4)) - rho).max() < 1e-10

    def test_with_efficiencies(self):
        rng = np.random.default_rng(2)
        rho = random_density_matrix(rng, 3)
        eff = np.array([[1.0, 0.7], [0.9, 1.1], [1.0, 0.5]])
        recs = simulate_dataset(rho, 1e12, efficiencies=eff, seed=3)
        assert np.abs(lre_reconstruct(recs, eff) - rho).max() < 1e-5

    def test_trace_one_and_hermitian(self):
        recs = simulate_dataset(ghz_state(3).density_matrix(), 50, seed=4)
        h = lre_reconstruct(recs)
        assert np.trace(h).real == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(h, h.conj().T)

    def test_negative_eigenvalues_at_low_counts(self):
        rng = np.random.default_rng(5)
        hits = sum(
            np.linalg.eigvalsh(lre_reconstruct(simulate_dataset(ghz_state(4).density_matrix(), 100, seed=rng))).min()
            < 0
            for _ in range(10)
        )
        assert hits >= 9

    def test_rank_deficient(self):
        recs = [CountRecord(MeasurementSetting.from_labels(("Z", "Z")), [1, 0, 0, 1])] * 3
        with pytest.raises(ValueError, match="rank-deficient"):
            lre_reconstruct(recs)

    def test_design_matrix_shape(self):
        ang = np.array([s.angles for s in settings(2)], dtype=float)
        assert design_matrix(ang).shape == (13 * 4, 16)

    def test_zero_count_setting_is_masked(self):
        rho = ghz_state(3).density_matrix()
        recs = noiseless_records(rho, 3)
        recs[-1] = CountRecord(recs[-1].setting, np.zeros(8))
        assert np.abs(lre_reconstruct(recs) - rho.matrix).max() < 1e-10


class TestMle:
    def test_eigenvalue_examples(self):
        assert np.allclose(project_eigenvalues([0.6, 0.5, -0.1]), [0.55, 0.45, 0.0])
        assert np.allclose(project_eigenvalues([0.7, 0.2, 0.1]), [0.7, 0.2, 0.1])
        assert np.allclose(project_eigenvalues([1.5, -0.1, -0.4]), [1.0, 0.0, 0.0])

    @pytest.mark.parametrize("d", [2, 4])
    def test_matches_bruteforce(self, d):
        rng = np.random.default_rng(d)
        for _ in range(200):
            h = random_hermitian_trace_one(rng, d)
            assert np.abs(mle_project(h).matrix - nearest_density_matrix_bruteforce(h)).max() < 1e-8

    def test_matches_convex_solver(self):
        cp = pytest.importorskip("cvxpy")
        rng = np.random.default_rng(12)
        for _ in range(5):
            h = random_hermitian_trace_one(rng, 4)
            x = cp.Variable((4, 4), hermitian=True)
            cp.Problem(cp.Minimize(cp.sum_squares(x - h)), [x >> 0, cp.real(cp.trace(x)) == 1]).solve()
            assert np.abs(mle_project(h).matrix - x.value).max() < 1e-4

    def test_fuzz_invariants(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            d = 2 ** rng.integers(1, 4)
            h = random_hermitian_trace_one(rng, d)
            rho = mle_project(h).matrix
            assert np.trace(rho).real == pytest.approx(1.0, abs=1e-12)
            assert np.linalg.eigvalsh(rho).min() > -1e-12
            assert np.abs(mle_project(rho).matrix - rho).max() < 1e-12

    def test_physical_input_unchanged(self):
        rho = random_density_matrix(np.random.default_rng(7), 3)
        assert np.abs(mle_project(rho).matrix - rho).max() < 1e-12


class TestEfficiencies:
    def test_recovers_port_ratio(self):
        rho = ghz_state(4).density_matrix()
        eff = np.array([1.0, 0.5, 1.0, 1.0])
        recs = simulate_dataset(rho, 2e4, efficiencies=eff, seed=8)
        cal = calibrate_efficiencies(recs)
        assert cal[:, 1] / cal[:, 0] == pytest.approx(eff, rel=0.02)

    def test_exact_on_expected_counts(self):
        rng = np.random.default_rng(9)
        rho = random_density_matrix(rng, 4)
        eff = rng.uniform(0.5, 1.0, (4, 2))
        recs = simulate_dataset(rho, 1e14, efficiencies=eff, seed=10)
        cal = calibrate_efficiencies(recs)
        assert cal[:, 1] / cal[:, 0] == pytest.approx(eff[:, 1] / eff[:, 0], rel=1e-5)
        assert np.allclose(cal.mean(axis=1), 1.0)

    def test_needs_zz_block(self):
        recs = simulate_dataset(ghz_state(2).density_matrix(), 100, seed=0)[:9]
        with pytest.raises(ValueError):
            calibrate_efficiencies(recs)


class TestPipeline:
    def test_high_count_fidelity(self):
        rng = np.random.default_rng(11)
        for _ in range(3):
            psi = np.linalg.qr(rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16)))[0][:, 0]
            rho = 0.95 * np.outer(psi, psi.conj()) + 0.05 * np.eye(16) / 16
            rho_hat, _, _ = estimate(simulate_dataset(rho, 1e4, seed=rng), efficiencies=None)
            assert fidelity(rho_hat, psi) >= 0.99 * fidelity(rho, psi)

    def test_reconstruct_result_json(self):
        recs = simulate_dataset(ghz_state(4).density_matrix(), 1000, seed=12)
        res = reconstruct(recs)
        d = res.to_json()
        assert d["fidelity_to_ghz"] == res.fidelity_to_ghz
        assert np.array_equal(ReconstructionResult.rho_from_json(d).matrix, res.rho.matrix)
        assert res.fidelity_to_ghz > 0.9

    def test_unknown_efficiency_mode(self):
        recs = simulate_dataset(ghz_state(2).density_matrix(), 100, seed=0)
        with pytest.raises(ValueError):
            estimate(recs, efficiencies="guess")


@pytest.fixture(scope="module")
def recs():
    return simulate_dataset(ghz_state(4).density_matrix(), 1000, seed=13)


class TestMonteCarlo:
    def test_independent_of_workers(self, recs):
        a = monte_carlo_errors(recs, 20, seed=5, workers=1)
        b = monte_carlo_errors(recs, 20, seed=5, workers=3)
        assert a == b

    def test_seed_sequences_with_spawn_keys_differ(self, recs):
        s1, s2 = np.random.SeedSequence(1).spawn(2)
        assert monte_carlo_errors(recs, 10, seed=s1) != monte_carlo_errors(recs, 10, seed=s2)
        assert monte_carlo_errors(recs, 10, seed=s1) == monte_carlo_errors(recs, 10, seed=s1)

    def test_std_scales_with_counts(self, recs):
        _, s_low, _ = monte_carlo_errors(recs, 30, seed=1)
        many = simulate_dataset(ghz_state(4).density_matrix(), 16000, seed=14)
        _, s_high, _ = monte_carlo_errors(many, 30, seed=1)
        assert s_high < s_low / 2

    def test_failures_raise(self):
        s = MeasurementSetting.from_labels(("Z", "Z"))
        recs = [CountRecord(s, [10, 0, 0, 10])] * 4
        with pytest.raises(MonteCarloError):
            monte_carlo_errors(recs, 5, efficiencies=None)

    def test_needs_two_samples(self, recs):
        with pytest.raises(ValueError):
            monte_carlo_errors(recs, 1)


@hsettings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_noiseless_lre_is_exact_for_any_state(seed):
    rng = np.random.default_rng(seed)
    rho = random_density_matrix(rng, 2, rank=int(rng.integers(1, 5)))
    assert np.abs(lre_reconstruct(noiseless_records(rho, 2)) - rho).max() < 1e-10


@hsettings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_local_rotation_commutes_with_probabilities(seed):
    rng = np.random.default_rng(seed)
    rho = DensityMatrix(2, random_density_matrix(rng, 2))
    s = MeasurementSetting.from_labels(("X", "Y"))
    p = expected_probabilities(rho, s)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    u = np.kron(random_unitary(rng), random_unitary(rng))
    rotated = u @ rho.matrix @ u.conj().T
    assert expected_probabilities(rotated, s).sum() == pytest.approx(1.0, abs=1e-12)
