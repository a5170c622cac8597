"""Post-processing: steady-state detection, profile fits, currents, TAEE.

Reduces raw ensemble records to the quantities the chain experiments
report: time-window occupation profiles, the one-parameter domain-wall fit
and its slope across loss rates, trajectory-averaged entanglement entropy,
and the total current that feeds the normalization term.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from . import gaussian, model
from .errors import ContractError, SteadyStateError
from .trajectory import TrajectoryConfig

PROFILE_TOL = 1e-9


@dataclass(frozen=True)
class OccupationProfile:
    """Window-averaged site occupations with ensemble standard errors."""

    n: np.ndarray
    stderr: np.ndarray
    L: int
    gamma: float = None
    eta: float = None
    window: tuple = None
    n_traj: int = None

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float)
        err = np.asarray(self.stderr, dtype=float)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "stderr", err)
        if n.shape != (self.L,) or err.shape != (self.L,):
            raise ContractError(
                f"profile arrays must have shape ({self.L},), got "
                f"{n.shape} and {err.shape}"
            )
        if np.any(n < -PROFILE_TOL) or np.any(n > 1 + PROFILE_TOL):
            raise ContractError("occupations must lie in [0, 1]")


@dataclass(frozen=True)
class TanhFit:
    """Domain-wall fit n(x) = offset - amplitude * tanh(beta (x - c)).

    beta >= 0; side is +1 when occupation accumulates below the chain
    center, -1 above it, 0 for a flat fit. free_form marks profiles away
    from half filling, where amplitude and offset were fit instead of
    pinned to 1/2.
    """

    beta: float
    residual: float
    side: int
    amplitude: float = 0.5
    offset: float = 0.5
    free_form: bool = False
    k: float = None


@dataclass(frozen=True)
class EntropyRecord:
    """Trajectory-averaged entanglement entropy of [x_c, x_c + delta]."""

    x_c: int
    delta: int
    S: float
    stderr: float
    n_traj: int
    window: tuple = None


@dataclass(frozen=True)
class SteadyStateReport:
    reached: bool
    t_onset: float
    drifts: dict


def _window_slice(times, window):
    t0, t1 = float(window[0]), float(window[1])
    if t1 < t0:
        raise ContractError(f"window [{t0}, {t1}] is reversed")
    eps = 1e-9 * max(1.0, abs(t1))
    mask = (times >= t0 - eps) & (times <= t1 + eps)
    if not np.any(mask):
        raise ContractError(
            f"window [{t0}, {t1}] contains no recorded times"
        )
    return mask


def occupation_profile(result, window, gamma=None, eta=None):
    """Reduce ensemble occupation records over a time window.

    Each trajectory is averaged over the window first, then averaged
    across trajectories; trajectories discarded inside the window are
    excluded. window is (t_start, t_end) in evolution time.
    """
    mask = _window_slice(np.asarray(result.times), window)
    data = result.occupations[:, mask, :]
    alive = ~np.isnan(data).any(axis=(1, 2))
    if not np.any(alive):
        raise ContractError("no trajectory survives the whole window")
    per_traj = data[alive].mean(axis=1)
    n_alive = per_traj.shape[0]
    mean = per_traj.mean(axis=0)
    if n_alive >= 2:
        stderr = per_traj.std(axis=0, ddof=1) / np.sqrt(n_alive)
    else:
        stderr = np.zeros_like(mean)
    return OccupationProfile(
        n=np.clip(mean, 0.0, 1.0),
        stderr=stderr,
        L=mean.shape[0],
        gamma=gamma,
        eta=eta,
        window=(float(window[0]), float(window[1])),
        n_traj=int(n_alive),
    )


def _wall_residual(x, n, b, center, amplitude, offset):
    m = offset - amplitude * np.tanh(b * (x - center))
    return float(np.sqrt(np.mean((m - n) ** 2)))


def _free_coeffs(x, n, b, center):
    """Least-squares (offset, amplitude) for a given wall steepness."""
    t = np.tanh(b * (x - center))
    basis = np.column_stack([np.ones_like(t), -t])
    sol, _, _, _ = np.linalg.lstsq(basis, n, rcond=None)
    return float(sol[0]), float(sol[1])


def fit_tanh(profile, half_filling_tol=0.01):
    """One-parameter domain-wall fit of an occupation profile.

    The wall model is n(x) = 1/2 - (1/2) tanh(beta (x - (L+1)/2)); the
    signed steepness is found by a coarse scan plus bounded scalar
    minimization, and reported as beta = |b| with the accumulation side.
    Profiles whose mean occupation is not 1/2 within half_filling_tol get
    amplitude and offset fit as well and are flagged free_form.
    """
    if profile.L < 4:
        raise ContractError("wall fits need at least 4 sites")
    x = np.arange(1, profile.L + 1, dtype=float)
    n = profile.n
    center = (profile.L + 1) / 2.0
    free = abs(float(n.mean()) - 0.5) > half_filling_tol

    if free:
        def cost(b):
            ofs, amp = _free_coeffs(x, n, b, center)
            return _wall_residual(x, n, b, center, amp, ofs)
    else:
        def cost(b):
            return _wall_residual(x, n, b, center, 0.5, 0.5)

    grid = np.linspace(-2.0, 2.0, 81)
    seed = grid[int(np.argmin([cost(b) for b in grid]))]
    span = grid[1] - grid[0]
    res = minimize_scalar(
        cost,
        bounds=(seed - 2 * span, seed + 2 * span),
        method="bounded",
        options={"xatol": 1e-10},
    )
    b = float(res.x)
    residual = cost(b)
    # a flat profile leaves b at numerical noise; snap it to zero
    if residual >= cost(0.0) - 1e-15:
        b = 0.0
        residual = cost(0.0)
    if free:
        offset, amplitude = _free_coeffs(x, n, b, center)
    else:
        offset, amplitude = 0.5, 0.5
    side = 0 if b == 0.0 else (1 if b > 0 else -1)
    return TanhFit(
        beta=abs(b),
        residual=residual,
        side=side,
        amplitude=amplitude,
        offset=offset,
        free_form=free,
    )


def current_expectation(state):
    """<sum_l j_l> with j_l = -i (a'_{l+1} a_l - a'_l a_{l+1}).

    Equal to -2 sum_l Im C_{l,l+1}; the sign convention makes positive
    values carry particles toward larger site indices.
    """
    if not isinstance(state, gaussian.GaussianState):
        raise ContractError("current_expectation needs a GaussianState")
    q = state.q
    adj = np.einsum("ln,ln->l", q[:-1].conj(), q[1:])
    return float(-2.0 * np.sum(adj.imag))


def taee(snapshots, x_c, delta, window=None):
    """Trajectory-averaged entanglement entropy of [x_c, x_c + delta].

    snapshots is either an iterable of GaussianState (one steady-state
    snapshot per trajectory) or an (n_traj, n_records) array of entropies
    already evaluated on the interval; in the latter case each trajectory
    is window-averaged before the ensemble mean.
    """
    x_c, delta = int(x_c), int(delta)
    if delta < 0:
        raise ContractError("delta must be >= 0")
    snaps = list(snapshots) if not isinstance(snapshots, np.ndarray) else None
    if snaps is not None and snaps and isinstance(
        snaps[0], gaussian.GaussianState
    ):
        vals = np.array([
            gaussian.entanglement_entropy(s, (x_c, x_c + delta))
            for s in snaps
        ])
    else:
        arr = np.asarray(snapshots, dtype=float)
        if arr.ndim != 2:
            raise ContractError(
                "entropy records must be (n_traj, n_records)"
            )
        keep = ~np.isnan(arr).any(axis=1)
        if not np.any(keep):
            raise ContractError("no trajectory survives the whole window")
        vals = arr[keep].mean(axis=1)
    n_traj = vals.shape[0]
    mean = float(vals.mean())
    stderr = (
        float(vals.std(ddof=1) / np.sqrt(n_traj)) if n_traj >= 2 else 0.0
    )
    return EntropyRecord(
        x_c=x_c,
        delta=delta,
        S=mean,
        stderr=stderr,
        n_traj=n_traj,
        window=window,
    )


def detect_steady_state(times, series, window, stderr=None, tol=None):
    """Windowed drift test over one or more named time series.

    A window of `window` consecutive records passes when, for every
    series, |mean(second half) - mean(first half)| <= tolerance. The
    tolerance is `tol` when given, otherwise twice the windowed mean of
    that series' standard error. Returns the verdict for the final window
    plus the earliest passing window start.
    """
    times = np.asarray(times, dtype=float)
    if isinstance(series, np.ndarray) or not isinstance(series, dict):
        series = {"series": np.asarray(series, dtype=float)}
    window = int(window)
    if window < 2:
        raise ContractError("window must cover >= 2 records")
    n = times.shape[0]
    if n < window:
        raise ContractError(
            f"need >= {window} records, got {n}"
        )
    if tol is None and stderr is None:
        raise ContractError("give tol or per-series stderr arrays")
    if stderr is not None and not isinstance(stderr, dict):
        stderr = {"series": np.asarray(stderr, dtype=float)}

    def window_passes(s):
        drifts = {}
        ok = True
        half = window // 2
        for name, values in series.items():
            values = np.asarray(values, dtype=float)
            if values.shape != times.shape:
                raise ContractError(
                    f"series {name!r} length does not match times"
                )
            first = values[s : s + half].mean()
            second = values[s + half : s + window].mean()
            drift = abs(second - first)
            if tol is not None:
                bound = float(tol)
            else:
                bound = 2.0 * float(
                    np.asarray(stderr[name])[s : s + window].mean()
                )
            drifts[name] = drift
            ok = ok and drift <= bound
        return ok, drifts

    reached, final_drifts = window_passes(n - window)
    t_onset = None
    for s in range(n - window + 1):
        ok, _ = window_passes(s)
        if ok:
            t_onset = float(times[s])
            break
    return SteadyStateReport(
        reached=bool(reached), t_onset=t_onset, drifts=final_drifts
    )


def _default_scan_config():
    return TrajectoryConfig(T=300.0, dt=0.005, n_traj=60, record_stride=200)


def beta_gamma_scan(gammas, eta, L, J=1.0, config=None, window=None,
                    threads=1):
    """Wall steepness against loss rate on half-filled skin chains.

    Runs one QT2 ensemble per gamma, verifies the window is steady, fits
    the wall, and regresses beta on gamma by ordinary least squares.
    Returns a dict with k (slope), intercept, r_squared, and the per-gamma
    profiles and fits.
    """
    gammas = [float(g) for g in gammas]
    if len(gammas) < 3:
        raise ContractError("scan needs at least 3 gamma values")
    if any(g <= 0 for g in gammas):
        raise ContractError("gamma values must be > 0")
    config = config if config is not None else _default_scan_config()
    if window is None:
        window = (0.9 * config.T, config.T)
    profiles, fits = [], []
    for g in gammas:
        spec = model.build_skin_chain(L, J, g, eta)
        result = gaussian.run_gaussian_ensemble(
            spec, gaussian.alternating_frame(L), config, threads=threads
        )
        _require_steady(result, window, g)
        profile = occupation_profile(result, window, gamma=g, eta=eta)
        profiles.append(profile)
        fits.append(fit_tanh(profile))
    betas = np.array([f.beta for f in fits])
    garr = np.array(gammas)
    k, intercept = np.polyfit(garr, betas, 1)
    pred = k * garr + intercept
    ss_res = float(np.sum((betas - pred) ** 2))
    ss_tot = float(np.sum((betas - betas.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {
        "k": float(k),
        "intercept": float(intercept),
        "r_squared": float(r_squared),
        "gammas": gammas,
        "betas": betas.tolist(),
        "fits": fits,
        "profiles": profiles,
    }


def _require_steady(result, window, gamma):
    """Steady-state gate for scan constituents: center of mass drift."""
    times = np.asarray(result.times)
    mask = _window_slice(times, window)
    idx = np.nonzero(mask)[0]
    if idx.size < 2:
        raise SteadyStateError(
            f"gamma={gamma:g}: window holds {idx.size} record(s), need >= 2"
        )
    occ = result.occupations
    sites = np.arange(1, occ.shape[2] + 1, dtype=float)
    com = (occ * sites).sum(axis=2) / occ.sum(axis=2)
    com_mean = np.nanmean(com, axis=0)
    n_alive = (~np.isnan(com)).sum(axis=0)
    com_err = np.nanstd(com, axis=0, ddof=1) / np.sqrt(
        np.maximum(n_alive, 1)
    )
    report = detect_steady_state(
        times[mask],
        {"center_of_mass": com_mean[mask]},
        window=idx.size,
        stderr={"center_of_mass": com_err[mask]},
    )
    if not report.reached:
        raise SteadyStateError(
            f"gamma={gamma:g}: center of mass still drifts "
            f"{report.drifts['center_of_mass']:.3g} over the fit window"
        )
    return report


def log_delta_grid(L, n_points=10):
    """Logarithmic interval lengths 1 .. L//2 (unique integers)."""
    if L < 2:
        raise ContractError("need L >= 2")
    raw = np.geomspace(1, L // 2, num=max(int(n_points), 1))
    return sorted(set(int(round(v)) for v in raw))


def profile_to_csv(profile, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site", "n", "stderr"])
        for i in range(profile.L):
            writer.writerow([
                str(i + 1),
                f"{profile.n[i]:.17g}",
                f"{profile.stderr[i]:.17g}",
            ])


def fits_to_csv(entries, path):
    """entries: iterable of (gamma, eta, L, TanhFit)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gamma", "eta", "L", "beta", "residual", "side"])
        for gamma, eta, L, fit in entries:
            writer.writerow([
                f"{gamma:.17g}",
                f"{eta:.17g}",
                str(L),
                f"{fit.beta:.17g}",
                f"{fit.residual:.17g}",
                str(fit.side),
            ])


def entropy_records_to_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_c", "delta", "S", "stderr", "n_traj"])
        for r in records:
            writer.writerow([
                str(r.x_c),
                str(r.delta),
                f"{r.S:.17g}",
                f"{r.stderr:.17g}",
                str(r.n_traj),
            ])
