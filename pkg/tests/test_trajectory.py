import numpy as np
import pytest
import scipy.linalg

from jumploss import master_eq, model, trajectory
from jumploss.errors import (
    CapacityError,
    ContractError,
    DimensionError,
    EmptyEnsembleError,
)


def local_jw_ops(L):
    """Independent Jordan-Wigner construction (site 1 = first factor)."""
    a = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
    sz = np.diag([1.0, -1.0]).astype(complex)
    eye = np.eye(2, dtype=complex)
    ops = []
    for site in range(L):
        factors = [sz] * site + [a] + [eye] * (L - site - 1)
        out = factors[0]
        for f in factors[1:]:
            out = np.kron(out, f)
        ops.append(out)
    return ops


class TestJordanWigner:
    def test_anticommutation_relations(self):
        L = 3
        ops = trajectory.jw_annihilation_operators(L)
        eye = np.eye(2**L)
        for i in range(L):
            for j in range(L):
                acomm = ops[i] @ ops[j].conj().T + ops[j].conj().T @ ops[i]
                expected = eye if i == j else 0.0
                assert np.max(np.abs(acomm - expected)) < 1e-14
                anti = ops[i] @ ops[j] + ops[j] @ ops[i]
                assert np.max(np.abs(anti)) < 1e-14

    def test_matches_local_construction(self):
        ops = trajectory.jw_annihilation_operators(3)
        local = local_jw_ops(3)
        for got, want in zip(ops, local):
            assert np.array_equal(got, want)

    def test_cached_and_readonly(self):
        a = trajectory.jw_annihilation_operators(2)
        b = trajectory.jw_annihilation_operators(2)
        assert a[0] is b[0]
        with pytest.raises(ValueError):
            a[0][0, 0] = 1.0


class TestBasisStates:
    def test_fock_basis_indexing(self):
        assert trajectory.fock_basis_state([1, 0])[2] == 1.0
        assert trajectory.fock_basis_state([0, 1])[1] == 1.0
        assert trajectory.fock_basis_state([1, 1])[3] == 1.0
        assert trajectory.fock_basis_state([0, 0])[0] == 1.0

    def test_fock_basis_validation(self):
        with pytest.raises(ContractError):
            trajectory.fock_basis_state([0, 2])
        with pytest.raises(CapacityError):
            trajectory.fock_basis_state([0] * 13)

    def test_frame_single_column(self):
        q = np.array([[1.0], [0.0]], dtype=complex)
        psi = trajectory.embed_gaussian_frame(q)
        assert np.max(np.abs(psi - trajectory.fock_basis_state([1, 0]))) < 1e-14

    def test_frame_two_columns(self):
        q = np.eye(2, dtype=complex)
        psi = trajectory.embed_gaussian_frame(q)
        assert abs(abs(psi[3]) - 1.0) < 1e-14

    def test_frame_superposition_mode(self):
        q = np.array([[1.0], [1.0j]]) / np.sqrt(2)
        psi = trajectory.embed_gaussian_frame(q)
        want = (
            trajectory.fock_basis_state([1, 0])
            + 1j * trajectory.fock_basis_state([0, 1])
        ) / np.sqrt(2)
        assert np.max(np.abs(psi - want)) < 1e-14

    def test_frame_dependent_columns(self):
        q = np.array([[1.0, 1.0], [0.0, 0.0]], dtype=complex)
        with pytest.raises(ContractError):
            trajectory.embed_gaussian_frame(q)


class TestFockEmbed:
    def test_total_number_operator(self):
        spec = trajectory.fock_embed(
            model.build_monitored_chain(2, 1.0, 0.4, 0.5, boundary="open")
        )
        total = sum(np.asarray(ch.operator) for ch in spec.channels)
        assert np.max(np.abs(total - np.diag([0.0, 1.0, 1.0, 2.0]))) < 1e-14

    def test_bond_mode_number_eigenvalues(self):
        spec = trajectory.fock_embed(model.build_skin_chain(2, 1.0, 0.4, 0.5))
        n_d = np.asarray(spec.channels[1].operator)
        assert np.max(np.abs(n_d - n_d.conj().T)) < 1e-14
        assert np.max(np.abs(n_d @ n_d - n_d)) < 1e-13
        eigs = np.sort(np.linalg.eigvalsh(n_d))
        assert np.max(np.abs(eigs - [0.0, 0.0, 1.0, 1.0])) < 1e-13

    def test_hamiltonian_embedding(self):
        chain = model.build_monitored_chain(2, 1.3, 0.4, 0.5, boundary="open")
        spec = trajectory.fock_embed(chain)
        ops = local_jw_ops(2)
        want = sum(
            chain.hamiltonian[i, j] * ops[i].conj().T @ ops[j]
            for i in range(2)
            for j in range(2)
        )
        assert np.max(np.abs(spec.hamiltonian - want)) < 1e-14

    def test_provenance(self):
        spec = trajectory.fock_embed(model.build_skin_chain(3, 1.0, 0.4, 0.5))
        assert spec.builder == "fock-embed"
        assert spec.params["source"] == "skin-chain"
        assert spec.representation == model.FEW_LEVEL

    def test_non_quadratic_rejected(self):
        with pytest.raises(ContractError):
            trajectory.fock_embed(model.build_two_level_atom(1.0, 0.5, 0.2))

    def test_capacity(self):
        with pytest.raises(CapacityError):
            trajectory.fock_embed(model.build_monitored_chain(13, 1.0, 0.4, 0.5))


class TestConfig:
    def test_defaults(self):
        cfg = trajectory.TrajectoryConfig()
        assert cfg.dt == 0.005 and cfg.method == "QT2"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"dt": 0.0},
            {"T": -1.0},
            {"n_traj": 0},
            {"method": "QT3"},
            {"record_stride": 0},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ContractError):
            trajectory.TrajectoryConfig(**kwargs)


class TestChildRng:
    def test_reproducible(self):
        a = trajectory.child_rng(7, 3).random(5)
        b = trajectory.child_rng(7, 3).random(5)
        assert np.array_equal(a, b)

    def test_streams_differ(self):
        a = trajectory.child_rng(7, 0).random(5)
        b = trajectory.child_rng(7, 1).random(5)
        assert not np.array_equal(a, b)


class TestStepContracts:
    def test_atom_jump_probability(self):
        spec = model.build_two_level_atom(1.0, 0.5, 0.6)
        psi = np.array([1.0, 0.0], dtype=complex)
        dp = trajectory.jump_probabilities(spec, psi, 0.005)
        assert np.max(np.abs(dp - [0.0025])) < 1e-15

    def test_skin_jump_probabilities(self):
        spec = model.build_skin_chain(2, 1.0, 0.4, 0.6)
        psi = trajectory.fock_basis_state([1, 0])
        dp = trajectory.jump_probabilities(spec, psi, 0.005)
        want = [0.4 * 0.005 * 0.5, 0.4 * 0.005 * 0.5, 0.0]
        assert np.max(np.abs(dp - want)) < 1e-15

    def test_large_dp_warns(self):
        spec = model.build_two_level_atom(1.0, 50.0, 0.0)
        psi = np.array([1.0, 0.0], dtype=complex)
        rng = trajectory.child_rng(0, 0)
        with pytest.warns(UserWarning, match="jump probability"):
            trajectory.step_qt2(spec, psi, rng, dt=0.01)


class TestDeterministicLimits:
    def test_eta_one_qt2_matches_split_step_oracle(self):
        J, gamma, dt, n_steps = 1.0, 0.5, 0.005, 2000
        spec = model.build_two_level_atom(J, gamma, 1.0)
        cache = trajectory.make_step_cache(spec, dt)
        rng = trajectory.child_rng(11, 0)
        psi = np.array([1.0, 0.0], dtype=complex)
        nojump = scipy.linalg.expm(-0.5 * gamma * dt * np.diag([1.0, 0.0]))
        h_step = scipy.linalg.expm(-1j * spec.hamiltonian * dt)
        ref = psi.copy()
        for _ in range(n_steps):
            psi = trajectory.step_qt2(spec, psi, rng, dt=dt, cache=cache)
            ref = h_step @ (nojump @ ref)
            ref = ref / np.linalg.norm(ref)
        phase = np.vdot(ref, psi)
        phase /= abs(phase)
        assert np.max(np.abs(psi - phase * ref)) < 1e-10

    def test_eta_one_qt2_agrees_with_density_engine(self):
        spec = model.build_two_level_atom(1.0, 0.5, 1.0)
        cfg = trajectory.TrajectoryConfig(T=10.0, n_traj=2, record_stride=200)
        est = trajectory.run_ensemble(
            spec, np.array([1.0, 0.0], dtype=complex), cfg
        )
        res = master_eq.evolve_nlme(
            spec, np.diag([1.0, 0.0]).astype(complex), T=10.0, dt=0.005,
            record_stride=200,
        )
        assert np.max(np.abs(est.means["pop_0"] - res.observables["pop_0"])) < 0.03

    def test_eta_one_fused_matches_effective_hamiltonian_flow(self):
        spec = model.build_skin_chain(4, 1.0, 0.4, 1.0)
        heff = model.effective_hamiltonian(spec, "full-gamma").matrix
        T = 2.0
        cfg = trajectory.TrajectoryConfig(T=T, n_traj=2, record_stride=400)
        psi0 = trajectory.fock_basis_state([1, 0, 0, 0])
        est = trajectory.run_ensemble(spec, psi0, cfg)
        v = scipy.linalg.expm(-1j * heff * T) @ np.eye(4)[:, 0]
        occ = np.abs(v) ** 2 / np.vdot(v, v).real
        got = np.array([est.means[f"n_{l + 1}"][-1] for l in range(4)])
        assert np.max(np.abs(got - occ)) < 1e-8
        assert max(np.max(est.stderrs[f"n_{l + 1}"]) for l in range(4)) == 0.0


class TestQt1:
    def test_eta_zero_never_discards(self):
        spec = model.build_monitored_chain(3, 1.0, 0.4, 0.0)
        psi0 = trajectory.fock_basis_state([1, 1, 0])
        cfg = trajectory.TrajectoryConfig(
            T=1.0, n_traj=20, method="QT1", record_stride=20
        )
        est = trajectory.run_ensemble(spec, psi0, cfg)
        assert np.all(est.survival_fraction == 1.0)
        assert np.all(np.isfinite(est.means["n_1"]))

    def test_eta_one_survivors_are_jump_free(self):
        gamma, dt = 0.5, 0.005
        spec = model.build_two_level_atom(1.0, gamma, 1.0)
        cfg = trajectory.TrajectoryConfig(
            T=5.0, n_traj=40, method="QT1", master_seed=3, record_stride=100
        )
        est = trajectory.run_ensemble(
            spec, np.array([1.0, 0.0], dtype=complex), cfg
        )
        assert 0.0 < est.survival_fraction[-1] < 1.0
        assert np.all(np.diff(est.survival_fraction) <= 1e-12)
        # all survivors follow the same no-jump path
        assert np.max(est.stderrs["pop_0"]) < 1e-12
        nojump = scipy.linalg.expm(-0.5 * gamma * dt * np.diag([1.0, 0.0]))
        h_step = scipy.linalg.expm(-1j * spec.hamiltonian * dt)
        ref = np.array([1.0, 0.0], dtype=complex)
        path = [1.0]
        for step in range(1000):
            ref = h_step @ (nojump @ ref)
            ref = ref / np.linalg.norm(ref)
            if (step + 1) % 100 == 0:
                path.append(np.abs(ref[0]) ** 2)
        assert np.max(np.abs(est.means["pop_0"] - path)) < 1e-10

    def test_all_discarded_raises(self):
        spec = model.build_two_level_atom(1.0, 8.0, 1.0)
        cfg = trajectory.TrajectoryConfig(
            T=10.0, n_traj=10, method="QT1", record_stride=200
        )
        with pytest.raises(EmptyEnsembleError):
            trajectory.run_ensemble(spec, np.array([1.0, 0.0], dtype=complex), cfg)


class TestEnsembleReduction:
    def test_scalar_matches_ensemble_qt2_literal(self):
        spec = model.build_two_level_atom(1.0, 0.5, 0.6)
        n_traj, n_steps, stride = 5, 100, 10
        cfg = trajectory.TrajectoryConfig(
            dt=0.005, T=0.5, n_traj=n_traj, master_seed=21, record_stride=stride
        )
        psi0 = np.array([1.0, 0.0], dtype=complex)
        est = trajectory.run_ensemble(spec, psi0, cfg)
        cache = trajectory.make_step_cache(spec, 0.005)
        proj = np.diag([1.0, 0.0])
        records = np.empty((n_traj, n_steps // stride + 1))
        for i in range(n_traj):
            rng = trajectory.child_rng(21, i)
            psi = psi0.copy()
            rec = []
            for step in range(n_steps + 1):
                if step % stride == 0:
                    rec.append(np.vdot(psi, proj @ psi).real)
                if step < n_steps:
                    psi = trajectory.step_qt2(spec, psi, rng, cache=cache)
            records[i] = rec
        assert np.max(np.abs(est.means["pop_0"] - records.mean(axis=0))) < 1e-10
        want_stderr = records.std(axis=0, ddof=1) / np.sqrt(n_traj)
        assert np.max(np.abs(est.stderrs["pop_0"] - want_stderr)) < 1e-10

    def test_scalar_matches_ensemble_qt1_fused(self):
        spec = model.build_monitored_chain(3, 1.0, 0.6, 0.7)
        n_traj, n_steps, stride = 8, 200, 20
        cfg = trajectory.TrajectoryConfig(
            dt=0.005, T=1.0, n_traj=n_traj, method="QT1",
            master_seed=5, record_stride=stride,
        )
        psi0 = trajectory.fock_basis_state([1, 1, 0])
        est = trajectory.run_ensemble(spec, psi0, cfg)
        cache = trajectory.make_step_cache(spec, 0.005)
        ops = trajectory.jw_annihilation_operators(3)
        n_1 = ops[0].conj().T @ ops[0]
        records = np.full((n_traj, n_steps // stride + 1), np.nan)
        for i in range(n_traj):
            rng = trajectory.child_rng(5, i)
            psi = psi0.copy()
            for step in range(n_steps + 1):
                if step % stride == 0:
                    records[i, step // stride] = np.vdot(psi, n_1 @ psi).real
                if step < n_steps:
                    psi = trajectory.step_qt1(spec, psi, rng, cache=cache)
                    if psi is None:
                        break
        survival = np.mean(~np.isnan(records), axis=0)
        assert np.array_equal(est.survival_fraction, survival)
        want = np.nanmean(records, axis=0)
        assert np.max(np.abs(est.means["n_1"] - want)) < 1e-10

    def test_repeat_runs_bit_identical(self):
        spec = model.build_monitored_chain(3, 1.0, 0.4, 0.5)
        psi0 = trajectory.fock_basis_state([1, 0, 1])
        cfg = trajectory.TrajectoryConfig(T=0.5, n_traj=10, record_stride=10)
        a = trajectory.run_ensemble(spec, psi0, cfg)
        b = trajectory.run_ensemble(spec, psi0, cfg)
        for name in a.means:
            assert np.array_equal(a.means[name], b.means[name])
            assert np.array_equal(a.stderrs[name], b.stderrs[name])

    def test_seed_changes_results(self):
        spec = model.build_two_level_atom(1.0, 0.5, 0.3)
        psi0 = np.array([1.0, 0.0], dtype=complex)
        a = trajectory.run_ensemble(
            spec, psi0, trajectory.TrajectoryConfig(T=2.0, n_traj=10, master_seed=1)
        )
        b = trajectory.run_ensemble(
            spec, psi0, trajectory.TrajectoryConfig(T=2.0, n_traj=10, master_seed=2)
        )
        assert not np.array_equal(a.means["pop_0"], b.means["pop_0"])

    def test_single_trajectory_zero_stderr(self):
        spec = model.build_two_level_atom(1.0, 0.5, 0.3)
        est = trajectory.run_ensemble(
            spec,
            np.array([1.0, 0.0], dtype=complex),
            trajectory.TrajectoryConfig(T=1.0, n_traj=1),
        )
        assert np.all(est.stderrs["pop_0"] == 0.0)

    def test_input_validation(self):
        spec = model.build_two_level_atom(1.0, 0.5, 0.3)
        cfg = trajectory.TrajectoryConfig(T=1.0, n_traj=2)
        with pytest.raises(DimensionError):
            trajectory.run_ensemble(spec, np.ones(3, dtype=complex), cfg)
        with pytest.raises(ContractError):
            trajectory.run_ensemble(spec, np.array([1.0, 1.0]), cfg)
        with pytest.raises(ContractError):
            trajectory.run_ensemble(
                spec,
                np.array([1.0, 0.0]),
                trajectory.TrajectoryConfig(T=1.0, dt=0.3, n_traj=2),
            )

    def test_user_observables_quadratic(self):
        spec = model.build_monitored_chain(3, 1.0, 0.4, 0.5)
        psi0 = trajectory.fock_basis_state([1, 1, 0])
        m = np.zeros((3, 3), dtype=complex)
        m[0, 0] = 1.0
        est = trajectory.run_ensemble(
            spec,
            psi0,
            trajectory.TrajectoryConfig(T=0.2, n_traj=4, record_stride=40),
            observables={"left_site": m},
        )
        assert set(est.means) == {"left_site"}
        assert abs(est.means["left_site"][0] - 1.0) < 1e-14

    def test_csv_export(self, tmp_path):
        spec = model.build_two_level_atom(1.0, 0.5, 0.6)
        cfg = trajectory.TrajectoryConfig(
            T=0.5, n_traj=5, method="QT1", record_stride=25
        )
        est = trajectory.run_ensemble(spec, np.array([1.0, 0.0], dtype=complex), cfg)
        path = tmp_path / "ens.csv"
        est.to_csv(path)
        lines = path.read_text().strip().splitlines()
        header = lines[0].split(",")
        assert header[0] == "time"
        assert "mean_pop_0" in header and "stderr_pop_0" in header
        assert header[-1] == "survival_fraction"
        assert len(lines) == 1 + len(est.times)


class TestStatisticalAgreement:
    def test_atom_qt2_matches_lindblad(self):
        spec = model.build_two_level_atom(1.0, 0.5, 0.0)
        cfg = trajectory.TrajectoryConfig(
            T=5.0, n_traj=300, master_seed=9, record_stride=100
        )
        est = trajectory.run_ensemble(spec, np.array([1.0, 0.0], dtype=complex), cfg)
        liou = master_eq.lme_liouvillian(spec)
        rho0 = np.diag([1.0, 0.0]).astype(complex)
        for k, t in enumerate(est.times):
            rho = master_eq.unvec(
                scipy.linalg.expm(liou * t) @ master_eq.vec(rho0), 2
            )
            tol = max(4.0 * est.stderrs["pop_0"][k], 0.01)
            assert abs(est.means["pop_0"][k] - rho[0, 0].real) < tol

    def test_atom_qt1_matches_nlme(self):
        spec = model.build_two_level_atom(1.0, 0.5, 0.6)
        cfg = trajectory.TrajectoryConfig(
            T=4.0, n_traj=400, method="QT1", master_seed=17, record_stride=100
        )
        est = trajectory.run_ensemble(spec, np.array([1.0, 0.0], dtype=complex), cfg)
        res = master_eq.evolve_nlme(
            spec, np.diag([1.0, 0.0]).astype(complex), T=4.0, dt=0.005,
            record_stride=100,
        )
        assert est.survival_fraction[-1] > 0.3
        for k in range(len(est.times)):
            tol = max(4.0 * est.stderrs["pop_0"][k], 0.02)
            assert abs(est.means["pop_0"][k] - res.observables["pop_0"][k]) < tol

    def test_chain_qt2_matches_nlme(self):
        chain = model.build_monitored_chain(3, 1.0, 0.4, 0.5)
        psi0 = trajectory.fock_basis_state([1, 1, 0])
        cfg = trajectory.TrajectoryConfig(
            T=3.0, n_traj=300, master_seed=13, record_stride=100
        )
        est = trajectory.run_ensemble(chain, psi0, cfg)
        spec = trajectory.fock_embed(chain)
        ops = trajectory.jw_annihilation_operators(3)
        res = master_eq.evolve_nlme(
            spec,
            np.outer(psi0, psi0.conj()),
            T=3.0,
            dt=0.005,
            record_stride=100,
            observables={"n_1": ops[0].conj().T @ ops[0]},
        )
        for k in range(len(est.times)):
            tol = max(4.0 * est.stderrs["n_1"][k], 0.02)
            assert abs(est.means["n_1"][k] - res.observables["n_1"][k]) < tol
