"""Named experiment pipelines.

Each pipeline takes the typed parameter dict from `config`, builds its
model, runs the matching engine, writes delimited outputs (plus figures
unless disabled) into the output directory, and returns the written file
names, a summary block, and the child-seed record for the manifest.
`run_experiment` wraps a pipeline with wall-clock timing, warning capture,
and the atomic manifest write.
"""

import os
import time
import warnings

import numpy as np

from . import analysis, config, gaussian, master_eq, model, reporting, trajectory
from .errors import ConfigError, SteadyStateError

EXCITED_PROJECTOR = np.diag([1.0, 0.0]).astype(complex)


def _atom_initial_state():
    # basis (|e>, |g|>): start in the excited state
    rho0 = np.zeros((2, 2), dtype=complex)
    rho0[0, 0] = 1.0
    return rho0


def _resolve_window(params, T):
    ws, we = params["window_start"], params["window_end"]
    window = (ws if ws >= 0 else 0.9 * T, we if we >= 0 else T)
    if not 0 <= window[0] < window[1] <= T:
        raise ConfigError(
            f"window [{window[0]}, {window[1]}] must satisfy "
            f"0 <= start < end <= T = {T}"
        )
    return window


def _steady_or_warn(result, window, gamma):
    try:
        analysis._require_steady(result, window, gamma)
    except SteadyStateError as exc:
        warnings.warn(str(exc))
        return str(exc)
    return None


def run_atom_purity(params, out_dir, figures):
    rho0 = _atom_initial_state()
    by_eta, times = {}, None
    for eta in params["etas"]:
        spec = model.build_two_level_atom(params["J"], params["gamma"], eta)
        res = master_eq.evolve_nlme(
            spec, rho0, params["T"], params["dt"], params["record_stride"]
        )
        times = res.times
        by_eta[eta] = {
            "P_e": res.observables["pop_0"],
            "purity": res.observables["purity"],
        }
    rows = []
    for eta, series in by_eta.items():
        for k, t in enumerate(times):
            rows.append(
                (eta, float(t), float(series["P_e"][k]),
                 float(series["purity"][k]))
            )
    files = ["atom_purity.csv"]
    reporting.write_csv(
        os.path.join(out_dir, files[0]),
        ["eta", "time", "P_e", "purity"],
        rows,
    )
    if figures:
        from . import plots

        plots.plot_atom_purity(
            times, by_eta, os.path.join(out_dir, "atom_purity.png")
        )
        files.append("atom_purity.png")
    summary = {
        "time_averaged_purity": {
            f"{eta:g}": float(np.mean(series["purity"]))
            for eta, series in by_eta.items()
        }
    }
    return files, summary, None


def run_atom_method_compare(params, out_dir, figures):
    spec = model.build_two_level_atom(
        params["J"], params["gamma"], params["eta"]
    )
    rho0 = _atom_initial_state()
    nlme = master_eq.evolve_nlme(
        spec, rho0, params["T"], params["dt"], params["record_stride"]
    )
    psi0 = np.array([1.0, 0.0], dtype=complex)
    obs = {"P_e": EXCITED_PROJECTOR}
    qt2 = trajectory.run_ensemble(
        spec,
        psi0,
        trajectory.TrajectoryConfig(
            dt=params["dt"], T=params["T"], n_traj=params["n_traj"],
            method="QT2", master_seed=params["master_seed"],
            record_stride=params["record_stride"],
        ),
        observables=obs,
    )
    qt1 = trajectory.run_ensemble(
        spec,
        psi0,
        trajectory.TrajectoryConfig(
            dt=params["dt"], T=params["T"], n_traj=params["qt1_n_traj"],
            method="QT1", master_seed=params["master_seed"],
            record_stride=params["record_stride"],
        ),
        observables=obs,
    )
    ref = nlme.observables["pop_0"]
    rows = [
        (
            float(nlme.times[k]), float(ref[k]),
            float(qt2.means["P_e"][k]), float(qt2.stderrs["P_e"][k]),
            float(qt1.means["P_e"][k]), float(qt1.stderrs["P_e"][k]),
            float(qt1.survival_fraction[k]),
        )
        for k in range(len(nlme.times))
    ]
    files = ["method_compare.csv"]
    reporting.write_csv(
        os.path.join(out_dir, files[0]),
        ["time", "P_e_nlme", "P_e_qt2", "stderr_qt2", "P_e_qt1",
         "stderr_qt1", "survival_qt1"],
        rows,
    )
    if figures:
        from . import plots

        plots.plot_method_compare(
            nlme.times,
            {
                "NLME": (ref, None),
                "QT2": (qt2.means["P_e"], qt2.stderrs["P_e"]),
                "QT1": (qt1.means["P_e"], qt1.stderrs["P_e"]),
            },
            os.path.join(out_dir, "method_compare.png"),
        )
        files.append("method_compare.png")
    summary = {
        "max_abs_dev_qt2": float(np.max(np.abs(qt2.means["P_e"] - ref))),
        "max_abs_dev_qt1": float(np.max(np.abs(qt1.means["P_e"] - ref))),
        "qt1_surviving": int(round(
            qt1.survival_fraction[-1] * params["qt1_n_traj"]
        )),
    }
    seeds = {
        "qt2": reporting.child_seed_table(
            params["master_seed"], params["n_traj"]
        ),
        "qt1": reporting.child_seed_table(
            params["master_seed"], params["qt1_n_traj"]
        ),
    }
    return files, summary, seeds


def run_trivial_chain(params, out_dir, figures):
    L = params["L"]
    filling = params["filling"]
    if len(filling) != L:
        raise ConfigError(
            f"filling {filling!r} has {len(filling)} sites, L = {L}"
        )
    spec_q = model.build_monitored_chain(
        L, params["J"], params["gamma"], params["eta"],
        boundary=params["boundary"],
    )
    spec = trajectory.fock_embed(spec_q)
    psi = trajectory.fock_basis_state([int(c) for c in filling])
    rho0 = np.outer(psi, psi.conj())
    report = master_eq.trivial_class_check(spec, rho0)
    reduced = model.OpenSystemSpec(
        spec.hamiltonian,
        tuple(
            model.JumpChannel(
                ch.operator, (1.0 - ch.efficiency) * ch.rate, 0.0, ch.label
            )
            for ch in spec.channels
        ),
        model.FEW_LEVEL,
    )
    kw = dict(record_stride=params["record_stride"], record_states=True)
    a = master_eq.evolve_nlme(spec, rho0, params["T"], params["dt"], **kw)
    b = master_eq.evolve_nlme(reduced, rho0, params["T"], params["dt"], **kw)
    deviation = np.max(np.abs(a.states - b.states), axis=(1, 2))
    files = ["deviation.csv", "trivial_class.json"]
    reporting.write_csv(
        os.path.join(out_dir, files[0]),
        ["time", "max_deviation"],
        [(float(t), float(d)) for t, d in zip(a.times, deviation)],
    )
    reporting.write_json_atomic(
        {
            "is_trivial": report.is_trivial,
            "per_channel_ok": report.per_channel_ok,
            "translational_ok": report.translational_ok,
            "channel_eigenvalues": list(report.channel_eigenvalues),
            "translational_eigenvalue": report.translational_eigenvalue,
            "witnesses": list(report.witnesses),
        },
        os.path.join(out_dir, files[1]),
    )
    if not report.is_trivial:
        warnings.warn(
            "spec/state pair is outside the trivial class: "
            + "; ".join(report.witnesses)
        )
    if figures:
        from . import plots

        plots.plot_deviation(
            a.times, deviation, os.path.join(out_dir, "deviation.png")
        )
        files.append("deviation.png")
    summary = {
        "max_deviation": float(deviation.max()),
        "is_trivial": report.is_trivial,
    }
    return files, summary, None


def _tanh_curve(fit, L):
    x = np.linspace(1.0, float(L), 200)
    center = (L + 1) / 2
    n = fit.offset - fit.amplitude * np.tanh(fit.side * fit.beta * (x - center))
    return x, n


def run_skin_steady_state(params, out_dir, figures):
    L = params["L"]
    spec = model.build_skin_chain(
        L, params["J"], params["gamma"], params["eta"]
    )
    cfg = trajectory.TrajectoryConfig(
        dt=params["dt"], T=params["T"], n_traj=params["n_traj"],
        method=params["method"], master_seed=params["master_seed"],
        record_stride=params["record_stride"],
    )
    intervals = [(1, L // 2)] if L >= 2 else []
    result = gaussian.run_gaussian_ensemble(
        spec, gaussian.alternating_frame(L), cfg,
        entropy_intervals=intervals,
        threads=config.resolve_threads(params),
    )
    window = _resolve_window(params, params["T"])
    steady_warning = _steady_or_warn(result, window, params["gamma"])
    profile = analysis.occupation_profile(
        result, window, gamma=params["gamma"], eta=params["eta"]
    )
    fit = analysis.fit_tanh(profile)
    files = ["occupations.csv", "profile.csv", "fit.json"]
    result.occupations_to_csv(os.path.join(out_dir, files[0]))
    analysis.profile_to_csv(profile, os.path.join(out_dir, files[1]))
    reporting.write_json_atomic(
        {
            "beta": fit.beta,
            "residual": fit.residual,
            "side": fit.side,
            "amplitude": fit.amplitude,
            "offset": fit.offset,
            "free_form": fit.free_form,
            "gamma": params["gamma"],
            "eta": params["eta"],
            "L": L,
            "n_traj": profile.n_traj,
            "window": list(window),
            "steady_state_warning": steady_warning,
        },
        os.path.join(out_dir, files[2]),
    )
    if intervals:
        files.append("entropies.csv")
        result.entropies_to_csv(os.path.join(out_dir, files[-1]))
    if figures:
        from . import plots

        plots.plot_profile(
            profile, _tanh_curve(fit, L),
            os.path.join(out_dir, "profile.png"),
        )
        files.append("profile.png")
    summary = {
        "beta": fit.beta,
        "residual": fit.residual,
        "side": fit.side,
        "surviving": profile.n_traj,
    }
    seeds = {
        "trajectories": reporting.child_seed_table(
            params["master_seed"], params["n_traj"]
        )
    }
    return files, summary, seeds


def run_beta_scan(params, out_dir, figures):
    window = _resolve_window(params, params["T"])
    cfg = trajectory.TrajectoryConfig(
        dt=params["dt"], T=params["T"], n_traj=params["n_traj"],
        method="QT2", master_seed=params["master_seed"],
        record_stride=params["record_stride"],
    )
    out = analysis.beta_gamma_scan(
        params["gammas"], params["eta"], params["L"], J=params["J"],
        config=cfg, window=window,
        threads=config.resolve_threads(params),
    )
    files = ["fits.csv", "scan.json"]
    analysis.fits_to_csv(
        [
            (g, params["eta"], params["L"], fit)
            for g, fit in zip(out["gammas"], out["fits"])
        ],
        os.path.join(out_dir, files[0]),
    )
    reporting.write_json_atomic(
        {
            "k": out["k"],
            "intercept": out["intercept"],
            "r_squared": out["r_squared"],
            "gammas": list(out["gammas"]),
            "betas": list(out["betas"]),
            "eta": params["eta"],
            "L": params["L"],
            "n_traj": params["n_traj"],
            "window": list(window),
        },
        os.path.join(out_dir, files[1]),
    )
    for g, profile in zip(out["gammas"], out["profiles"]):
        name = f"profile_gamma_{g:g}.csv"
        analysis.profile_to_csv(profile, os.path.join(out_dir, name))
        files.append(name)
    if figures:
        from . import plots

        plots.plot_beta_scan(
            out["gammas"], out["betas"], out["k"], out["intercept"],
            os.path.join(out_dir, "beta_scan.png"),
        )
        files.append("beta_scan.png")
    summary = {
        "k": out["k"],
        "intercept": out["intercept"],
        "r_squared": out["r_squared"],
    }
    seeds = {
        "trajectories_per_gamma": reporting.child_seed_table(
            params["master_seed"], params["n_traj"]
        )
    }
    return files, summary, seeds


def run_entropy_scan(params, out_dir, figures):
    L = params["L"]
    x_c = L // 2
    deltas = params["deltas"] or analysis.log_delta_grid(L)
    bad = [d for d in deltas if x_c + d > L]
    if bad:
        raise ConfigError(
            f"delta(s) {bad} place the interval end beyond L = {L} "
            f"(anchor x_c = {x_c})"
        )
    intervals = [(x_c, x_c + d) for d in deltas]
    window = _resolve_window(params, params["T"])
    threads = config.resolve_threads(params)
    records_by_label = {}
    rows = []
    steady_warnings = {}
    for gamma in params["gammas"]:
        for eta in params["etas"]:
            spec = model.build_skin_chain(L, params["J"], gamma, eta)
            cfg = trajectory.TrajectoryConfig(
                dt=params["dt"], T=params["T"], n_traj=params["n_traj"],
                method="QT2", master_seed=params["master_seed"],
                record_stride=params["record_stride"],
            )
            result = gaussian.run_gaussian_ensemble(
                spec, gaussian.alternating_frame(L), cfg,
                entropy_intervals=intervals, threads=threads,
            )
            label = f"gamma={gamma:g}, eta={eta:g}"
            warning = _steady_or_warn(result, window, gamma)
            if warning:
                steady_warnings[label] = warning
            mask = (result.times >= window[0]) & (result.times <= window[1])
            records = [
                analysis.taee(
                    result.entropies[(x_c, x_c + d)][:, mask],
                    x_c, d, window=window,
                )
                for d in deltas
            ]
            records_by_label[label] = records
            rows.extend(
                (gamma, eta, L, r.x_c, r.delta, r.S, r.stderr, r.n_traj)
                for r in records
            )
    files = ["entropy_scan.csv"]
    reporting.write_csv(
        os.path.join(out_dir, files[0]),
        ["gamma", "eta", "L", "x_c", "delta", "S", "stderr", "n_traj"],
        [
            (float(g), float(e), int(l), int(x), int(d), float(s),
             float(err), int(n))
            for g, e, l, x, d, s, err, n in rows
        ],
    )
    if figures:
        from . import plots

        plots.plot_entropy_scan(
            records_by_label, os.path.join(out_dir, "entropy_scan.png")
        )
        files.append("entropy_scan.png")
    summary = {
        "largest_interval_S": {
            label: records[-1].S
            for label, records in records_by_label.items()
        },
        "steady_state_warnings": steady_warnings,
    }
    seeds = {
        "trajectories_per_run": reporting.child_seed_table(
            params["master_seed"], params["n_traj"]
        )
    }
    return files, summary, seeds


EXPERIMENTS = {
    "atom-purity": run_atom_purity,
    "atom-method-compare": run_atom_method_compare,
    "trivial-chain": run_trivial_chain,
    "skin-steady-state": run_skin_steady_state,
    "beta-scan": run_beta_scan,
    "entropy-scan": run_entropy_scan,
}


def run_experiment(experiment, params, output_dir, figures=True):
    """Execute one named pipeline and write its manifest; returns the
    manifest dict. Captured warnings become the invariant log."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {experiment!r}; expected one of "
            f"{', '.join(EXPERIMENTS)}"
        )
    os.makedirs(output_dir, exist_ok=True)
    start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        files, summary, seeds = EXPERIMENTS[experiment](
            params, output_dir, figures
        )
    manifest = reporting.build_manifest(
        experiment,
        params,
        output_dir,
        files,
        wall_clock=time.perf_counter() - start,
        warnings_log=[str(w.message) for w in caught],
        seeds=seeds,
        summary=summary,
    )
    reporting.write_manifest(manifest, output_dir)
    return manifest
