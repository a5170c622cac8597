import numpy as np
import pytest

from jumploss import analysis, gaussian, model, trajectory
from jumploss.errors import ContractError, SteadyStateError


def wall(x, beta, center, amplitude=0.5, offset=0.5):
    return offset - amplitude * np.tanh(beta * (x - center))


def make_result(times, occupations):
    return gaussian.GaussianEnsembleResult(
        times=np.asarray(times, dtype=float),
        occupations=np.asarray(occupations, dtype=float),
        entropies={},
        method="QT2",
        n_traj=len(occupations),
    )


class TestOccupationProfile:
    def test_validation(self):
        with pytest.raises(ContractError):
            analysis.OccupationProfile(n=[0.5, 0.5], stderr=[0.0], L=2)
        with pytest.raises(ContractError):
            analysis.OccupationProfile(
                n=[0.5, 1.4], stderr=[0.0, 0.0], L=2
            )

    def test_window_reduction(self):
        times = [0.0, 1.0, 2.0, 3.0]
        occ = np.zeros((2, 4, 2))
        occ[0, :, 0] = [0.0, 0.2, 0.4, 0.6]
        occ[1, :, 0] = [0.0, 0.4, 0.6, 0.8]
        occ[:, :, 1] = 1.0 - occ[:, :, 0]
        res = make_result(times, occ)
        prof = analysis.occupation_profile(res, (1.0, 3.0))
        a, b = np.mean([0.2, 0.4, 0.6]), np.mean([0.4, 0.6, 0.8])
        want = np.mean([a, b])
        assert abs(prof.n[0] - want) < 1e-15
        want_err = np.std([a, b], ddof=1) / np.sqrt(2)
        assert abs(prof.stderr[0] - want_err) < 1e-15
        assert prof.n_traj == 2 and prof.window == (1.0, 3.0)

    def test_dead_trajectory_excluded(self):
        times = [0.0, 1.0]
        occ = np.zeros((2, 2, 1))
        occ[0, :, 0] = [0.3, 0.5]
        occ[1, :, 0] = [0.3, np.nan]
        prof = analysis.occupation_profile(make_result(times, occ), (0, 1))
        assert prof.n_traj == 1
        assert abs(prof.n[0] - 0.4) < 1e-15

    def test_window_errors(self):
        res = make_result([0.0, 1.0], np.full((1, 2, 1), 0.5))
        with pytest.raises(ContractError):
            analysis.occupation_profile(res, (5.0, 6.0))
        with pytest.raises(ContractError):
            analysis.occupation_profile(res, (1.0, 0.0))

    def test_particle_number_closure(self):
        spec = model.build_skin_chain(6, 1.0, 0.4, 0.6)
        cfg = trajectory.TrajectoryConfig(T=2.0, n_traj=12, record_stride=20)
        res = gaussian.run_gaussian_ensemble(
            spec, gaussian.alternating_frame(6), cfg
        )
        prof = analysis.occupation_profile(res, (1.0, 2.0))
        total_err = np.sqrt(np.sum(prof.stderr**2))
        assert abs(prof.n.sum() - 3.0) <= max(2 * total_err, 1e-10)


class TestFitTanh:
    def test_uniform_is_flat(self):
        prof = analysis.OccupationProfile(
            n=np.full(20, 0.5), stderr=np.zeros(20), L=20
        )
        fit = analysis.fit_tanh(prof)
        assert fit.beta == 0.0 and fit.side == 0
        assert fit.residual < 1e-15 and not fit.free_form

    def test_recovers_synthetic_wall(self):
        L = 100
        x = np.arange(1, L + 1, dtype=float)
        n = wall(x, 0.04, (L + 1) / 2)
        prof = analysis.OccupationProfile(
            n=n, stderr=np.zeros(L), L=L
        )
        fit = analysis.fit_tanh(prof)
        assert abs(fit.beta - 0.04) < 1e-6
        assert fit.side == 1 and not fit.free_form
        assert fit.residual < 1e-9

    def test_reflection_flips_side_not_beta(self):
        L = 50
        x = np.arange(1, L + 1, dtype=float)
        n = wall(x, 0.07, (L + 1) / 2)
        a = analysis.fit_tanh(analysis.OccupationProfile(
            n=n, stderr=np.zeros(L), L=L
        ))
        b = analysis.fit_tanh(analysis.OccupationProfile(
            n=n[::-1].copy(), stderr=np.zeros(L), L=L
        ))
        assert abs(a.beta - b.beta) < 1e-8
        assert a.side == 1 and b.side == -1

    def test_free_form_for_non_half_filling(self):
        L = 60
        x = np.arange(1, L + 1, dtype=float)
        n = wall(x, 0.1, (L + 1) / 2, amplitude=0.3, offset=0.4)
        fit = analysis.fit_tanh(analysis.OccupationProfile(
            n=n, stderr=np.zeros(L), L=L
        ))
        assert fit.free_form
        assert abs(fit.beta - 0.1) < 1e-6
        assert abs(fit.amplitude - 0.3) < 1e-6
        assert abs(fit.offset - 0.4) < 1e-6

    def test_short_chain_rejected(self):
        prof = analysis.OccupationProfile(
            n=np.full(3, 0.5), stderr=np.zeros(3), L=3
        )
        with pytest.raises(ContractError):
            analysis.fit_tanh(prof)


class TestCurrentExpectation:
    def test_product_state_zero(self):
        assert analysis.current_expectation(
            gaussian.alternating_frame(6)
        ) == 0.0

    def test_two_site_example(self):
        q = np.array([[1.0], [1j]], dtype=complex) / np.sqrt(2)
        state = gaussian.GaussianState(q)
        got = analysis.current_expectation(state)
        assert abs(got - (-1.0)) < 1e-12
        ops = trajectory.jw_annihilation_operators(2)
        j1 = -1j * (
            ops[1].conj().T @ ops[0] - ops[0].conj().T @ ops[1]
        )
        psi = trajectory.embed_gaussian_frame(state.q)
        assert abs(got - np.vdot(psi, j1 @ psi).real) < 1e-12

    def test_fock_oracle(self):
        rng = np.random.default_rng(30)
        a = rng.normal(size=(6, 3)) + 1j * rng.normal(size=(6, 3))
        state = gaussian.GaussianState(np.linalg.qr(a)[0])
        ops = trajectory.jw_annihilation_operators(6)
        total = sum(
            -1j * (
                ops[l + 1].conj().T @ ops[l]
                - ops[l].conj().T @ ops[l + 1]
            )
            for l in range(5)
        )
        psi = trajectory.embed_gaussian_frame(state.q)
        want = np.vdot(psi, total @ psi).real
        assert abs(analysis.current_expectation(state) - want) < 1e-10

    def test_loss_sum_identity(self):
        # sum_mu gamma_mu <L'L> = gamma (<N> + <sum j>/2) on the skin chain
        spec = model.build_skin_chain(8, 1.0, 0.7, 0.6)
        rng = np.random.default_rng(31)
        a = rng.normal(size=(8, 4)) + 1j * rng.normal(size=(8, 4))
        state = gaussian.GaussianState(np.linalg.qr(a)[0])
        total = sum(
            ch.rate * gaussian.jump_expectation(
                state, np.asarray(ch.operator)
            )
            for ch in spec.channels
        )
        want = 0.7 * (4.0 + 0.5 * analysis.current_expectation(state))
        assert abs(total - want) < 1e-10

    def test_requires_gaussian_state(self):
        with pytest.raises(ContractError):
            analysis.current_expectation(np.eye(4))


class TestTaee:
    def test_product_snapshots_zero(self):
        snaps = [gaussian.alternating_frame(8) for _ in range(5)]
        rec = analysis.taee(snaps, 4, 2)
        assert rec.S < 1e-8 and rec.stderr < 1e-8
        assert rec.n_traj == 5 and rec.x_c == 4 and rec.delta == 2

    def test_gauge_invariance(self):
        rng = np.random.default_rng(32)
        a = rng.normal(size=(8, 4)) + 1j * rng.normal(size=(8, 4))
        q = np.linalg.qr(a)[0]
        u = np.linalg.qr(
            rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        )[0]
        r1 = analysis.taee([gaussian.GaussianState(q)], 3, 3)
        r2 = analysis.taee([gaussian.GaussianState(q @ u)], 3, 3)
        assert abs(r1.S - r2.S) < 1e-12

    def test_record_array_path(self):
        arr = np.array([[1.0, 3.0], [2.0, 4.0], [np.nan, 5.0]])
        rec = analysis.taee(arr, 10, 5, window=(27.0, 30.0))
        assert rec.n_traj == 2
        assert abs(rec.S - 2.5) < 1e-15
        want_err = np.std([2.0, 3.0], ddof=1) / np.sqrt(2)
        assert abs(rec.stderr - want_err) < 1e-15
        assert rec.window == (27.0, 30.0)

    def test_validation(self):
        with pytest.raises(ContractError):
            analysis.taee(np.ones(4), 1, 1)
        with pytest.raises(ContractError):
            analysis.taee(np.full((2, 2), np.nan), 1, 1)
        with pytest.raises(ContractError):
            analysis.taee([gaussian.alternating_frame(4)], 3, 5)


class TestDetectSteadyState:
    def test_constant_reached_immediately(self):
        times = np.arange(10.0)
        rep = analysis.detect_steady_state(
            times, np.ones(10), window=4, tol=0.0
        )
        assert rep.reached and rep.t_onset == 0.0

    def test_ramp_not_reached(self):
        times = np.arange(10.0)
        rep = analysis.detect_steady_state(
            times, np.linspace(0, 1, 10), window=4, tol=1e-6
        )
        assert not rep.reached and rep.t_onset is None

    def test_stderr_based_tolerance(self):
        times = np.arange(8.0)
        values = np.array([0.0, 0.5, 0.9, 1.0, 1.01, 0.99, 1.0, 1.0])
        stderr = np.full(8, 0.02)
        rep = analysis.detect_steady_state(
            times, {"n": values}, window=4, stderr={"n": stderr}
        )
        assert rep.reached
        assert rep.t_onset == 3.0
        assert rep.drifts["n"] <= 0.04

    def test_validation(self):
        times = np.arange(5.0)
        with pytest.raises(ContractError):
            analysis.detect_steady_state(times, np.ones(5), window=1, tol=0)
        with pytest.raises(ContractError):
            analysis.detect_steady_state(times, np.ones(5), window=8, tol=0)
        with pytest.raises(ContractError):
            analysis.detect_steady_state(times, np.ones(4), window=2, tol=0)
        with pytest.raises(ContractError):
            analysis.detect_steady_state(times, np.ones(5), window=2)


class TestLogDeltaGrid:
    def test_grid_shape(self):
        grid = analysis.log_delta_grid(50, n_points=10)
        assert grid[0] == 1 and grid[-1] == 25
        assert grid == sorted(set(grid))
        assert all(isinstance(v, int) for v in grid)

    def test_small_chain(self):
        assert analysis.log_delta_grid(2) == [1]
        with pytest.raises(ContractError):
            analysis.log_delta_grid(1)


class TestBetaGammaScan:
    def test_validation(self):
        with pytest.raises(ContractError):
            analysis.beta_gamma_scan([0.2, 0.4], 0.6, 16)
        with pytest.raises(ContractError):
            analysis.beta_gamma_scan([0.2, 0.4, -0.1], 0.6, 16)

    def test_small_scan_is_linear(self):
        cfg = trajectory.TrajectoryConfig(
            T=60.0, n_traj=10, master_seed=11, record_stride=400
        )
        out = analysis.beta_gamma_scan(
            [0.3, 0.5, 0.7], 0.6, 16, config=cfg, window=(48.0, 60.0)
        )
        assert out["k"] > 0
        assert 0.0 < out["r_squared"] <= 1.0
        assert len(out["fits"]) == 3
        assert all(f.side == 1 for f in out["fits"])
        assert np.all(np.diff(out["betas"]) > 0)

    def test_transient_window_raises(self):
        cfg = trajectory.TrajectoryConfig(
            T=3.0, n_traj=8, master_seed=12, record_stride=20
        )
        with pytest.raises(SteadyStateError, match="gamma=0.3"):
            analysis.beta_gamma_scan(
                [0.3, 0.5, 0.7], 0.6, 16, config=cfg, window=(0.0, 3.0)
            )


class TestCsvWriters:
    def test_profile_csv(self, tmp_path):
        prof = analysis.OccupationProfile(
            n=[0.25, 0.75], stderr=[0.01, 0.02], L=2
        )
        path = tmp_path / "profile.csv"
        analysis.profile_to_csv(prof, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "site,n,stderr"
        assert lines[1].startswith("1,0.25,")
        assert len(lines) == 3

    def test_fits_csv(self, tmp_path):
        fit = analysis.TanhFit(beta=0.04, residual=0.01, side=1)
        path = tmp_path / "fits.csv"
        analysis.fits_to_csv([(0.4, 0.6, 50, fit)], path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "gamma,eta,L,beta,residual,side"
        row = lines[1].split(",")
        assert [float(v) for v in row] == [0.4, 0.6, 50, 0.04, 0.01, 1]

    def test_entropy_csv(self, tmp_path):
        rec = analysis.EntropyRecord(
            x_c=25, delta=10, S=1.5, stderr=0.1, n_traj=60
        )
        path = tmp_path / "entropy.csv"
        analysis.entropy_records_to_csv([rec], path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "x_c,delta,S,stderr,n_traj"
        row = lines[1].split(",")
        assert [float(v) for v in row] == [25, 10, 1.5, 0.1, 60]
