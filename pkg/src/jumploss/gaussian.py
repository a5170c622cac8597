"""Slater-determinant trajectory engine for quadratic-fermion specs.

A free-fermion pure state is stored as an L x N frame Q with orthonormal
columns, |Q> = prod_n (sum_i Q_in a'_i)|0>. Quadratic exponentials act
exactly on the frame, number-operator jumps are null-space projections,
and every observable derives from the correlation matrix C = Q* Q^T with
C_ij = <a'_i a_j>. Cost per step is polynomial in L, so chains far beyond
the Fock capacity are reachable.
"""

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import blas as _scipy_blas

from . import model
from .errors import (
    ContractError,
    DegenerateStateError,
    DimensionError,
    EmptyEnsembleError,
    ZeroAmplitudeError,
)
from .linalg import matrix_exponential, qr_decompose
from .trajectory import DP_WARN, TrajectoryConfig, _record_steps, child_rng

FRAME_TOL = 1e-10
FRAME_REORTH = 1e-12
AMP_TOL = 1e-10

_TRSM = _scipy_blas.get_blas_funcs("trsm", dtype=np.complex128)


@dataclass
class GaussianState:
    """Orthonormal L x N frame; mutate only through the module operations."""

    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=complex)
        if q.ndim != 2:
            raise DimensionError(f"frame must be a matrix, got shape {q.shape}")
        L, N = q.shape
        if N > L:
            raise DimensionError(f"more particles than sites: {N} > {L}")
        drift = np.max(np.abs(q.conj().T @ q - np.eye(N))) if N else 0.0
        if drift > FRAME_TOL:
            raise ContractError(f"frame columns not orthonormal: drift {drift:.3e}")
        if drift > FRAME_REORTH:
            q, _, rank = qr_decompose(q)
            if rank < N:
                raise DegenerateStateError("frame columns are linearly dependent")
        self.q = q

    @property
    def n_sites(self):
        return self.q.shape[0]

    @property
    def n_particles(self):
        return self.q.shape[1]


def basis_frame(L, occupied_sites):
    """Product-state frame with the given 1-based sites occupied."""
    sites = [int(s) for s in occupied_sites]
    if len(set(sites)) != len(sites):
        raise ContractError("occupied sites must be distinct")
    if any(s < 1 or s > L for s in sites):
        raise ContractError(f"sites must lie in 1..{L}")
    q = np.zeros((L, len(sites)), dtype=complex)
    for n, s in enumerate(sorted(sites)):
        q[s - 1, n] = 1.0
    return GaussianState(q)


def alternating_frame(L):
    """Half-filled product state with site 1 occupied (1010... pattern)."""
    return basis_frame(L, range(1, L + 1, 2))


def correlation_matrix(state):
    """C = Q* Q^T, C_ij = <a'_i a_j>."""
    q = state.q
    return q.conj() @ q.T


def occupations(state):
    """Site densities diag(C) as a real vector."""
    q = state.q
    return np.einsum("in,in->i", q.conj(), q).real


def entanglement_entropy(state, interval):
    """Von Neumann entropy of the sites interval [a, b] (1-based, inclusive).

    Eigenvalues of the truncated correlation matrix are clipped to
    [1e-12, 1 - 1e-12] before the logs, so product states report ~0.
    """
    a, b = int(interval[0]), int(interval[1])
    L = state.n_sites
    if not 1 <= a <= b <= L:
        raise ContractError(f"interval [{a}, {b}] out of range for L = {L}")
    sub = state.q[a - 1 : b]
    c = sub.conj() @ sub.T
    lam = np.linalg.eigvalsh((c + c.conj().T) / 2)
    lam = np.clip(lam, 1e-12, 1.0 - 1e-12)
    return float(-np.sum(lam * np.log(lam) + (1 - lam) * np.log(1 - lam)))


def _orth_frame(q):
    """Re-orthonormalize a frame in place of a Householder QR.

    Cholesky of the overlap is much cheaper and exact up to gauge; QR is
    kept as a fallback for ill-conditioned overlaps.
    """
    s = q.conj().T @ q
    try:
        lc = np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        new, _, rank = qr_decompose(q)
        if rank < q.shape[1]:
            raise DegenerateStateError(
                "frame rank collapsed under the exponential"
            )
        return new
    return np.linalg.solve(lc, q.conj().T).conj().T


def _apply_matrix(q, e):
    return _orth_frame(e @ q)


def _orth_stack(qs):
    """_orth_frame over a stack of frames (T, L, N)."""
    s = np.matmul(qs.conj().transpose(0, 2, 1), qs)
    try:
        lc = np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        return np.stack([_orth_frame(q) for q in qs])
    out = np.empty_like(qs)
    for t in range(qs.shape[0]):
        out[t] = _TRSM(1.0, lc[t], qs[t].conj().T, side=0, lower=1).conj().T
    return out


def apply_quadratic_exponential(state, m):
    """Exact action of the quadratic exponential: |Q> -> normalize(e^m Q)."""
    m = np.asarray(m, dtype=complex)
    L = state.n_sites
    if m.shape != (L, L):
        raise DimensionError(f"generator must be {L}x{L}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError("generator has non-finite entries")
    return GaussianState(_apply_matrix(state.q, matrix_exponential(m)))


def jump_expectation(state, alpha):
    """<d'_a d_a> = ||Q' alpha||^2 for the mode with creation coefficients alpha."""
    alpha = np.asarray(alpha, dtype=complex)
    if alpha.shape != (state.n_sites,):
        raise DimensionError("mode vector length must match the site count")
    w = state.q.conj().T @ alpha
    return float(np.real(np.vdot(w, w)))


def _jump(q, alpha):
    """Frame after d'd: the jumped mode adjoined to col(Q) cut to alpha's
    orthocomplement.

    A vector Qc lies in col(Q) and orthogonal to alpha iff c is orthogonal
    to the overlap vector w = Q'alpha, so the surviving block is Q applied
    to a Householder basis of w's orthocomplement; the result is orthonormal
    by construction, no re-factorization needed.
    """
    L, N = q.shape
    if N == L:
        raise DegenerateStateError(
            "jump on a completely filled frame is not defined (ker Q' is empty)"
        )
    ahat = np.asarray(alpha, dtype=complex)
    ahat = ahat / np.linalg.norm(ahat)
    w = q.conj().T @ ahat
    norm_w = np.linalg.norm(w)
    if norm_w == 0.0:
        raise ZeroAmplitudeError("mode has no overlap with the frame")
    v = w / norm_w
    sign = v[0] / abs(v[0]) if abs(v[0]) > 0 else 1.0
    v = v.copy()
    v[0] += sign
    h = np.eye(N, dtype=complex) - (2.0 / np.vdot(v, v).real) * np.outer(
        v, v.conj()
    )
    return np.column_stack([ahat, q @ h[:, 1:]])


def apply_number_jump(state, alpha):
    """Normalized action of d'_a d_a on the frame.

    The surviving (N-1)-particle block is the part of col(Q) orthogonal to
    alpha, computed as ker((alpha adjoined ker(Q'))'); the jumped mode alpha
    is then prepended and the frame re-orthonormalized.
    """
    alpha = np.asarray(alpha, dtype=complex)
    amp = jump_expectation(state, alpha)
    if amp <= AMP_TOL:
        raise ZeroAmplitudeError(f"jump amplitude {amp:.3e} is numerically zero")
    return GaussianState(_jump(state.q, alpha))


@dataclass
class GaussianStepCache:
    """Per-step constants: mode matrix and the fused no-jump exponential.

    shrink is a floating-point-safe lower bound on how much one no-jump
    step can reduce the smallest overlap eigenvalue (sigma_min(e_full)^2,
    which is <= 1 because the loss matrix is positive semidefinite);
    pair_table holds per-channel site indices and coefficients when every
    mode lives on at most two adjacent sites, enabling cheap jump
    detection without the full mode-overlap product.
    """

    dt: float
    rates: np.ndarray
    etas: np.ndarray
    alphas: np.ndarray
    m_base: np.ndarray
    e_full: np.ndarray
    shrink: float
    pair_table: tuple
    e_jumped: dict = field(default_factory=dict)


def _pair_table(alphas):
    L, M = alphas.shape
    i1 = np.zeros(M, dtype=int)
    i2 = np.zeros(M, dtype=int)
    c11 = np.zeros(M)
    c22 = np.zeros(M)
    c12 = np.zeros(M, dtype=complex)
    for mu in range(M):
        nz = np.nonzero(np.abs(alphas[:, mu]) > 0)[0]
        if nz.size == 1:
            i1[mu] = i2[mu] = nz[0]
            c11[mu] = np.abs(alphas[nz[0], mu]) ** 2
        elif nz.size == 2 and nz[1] == nz[0] + 1:
            i1[mu], i2[mu] = nz
            c11[mu] = np.abs(alphas[nz[0], mu]) ** 2
            c22[mu] = np.abs(alphas[nz[1], mu]) ** 2
            c12[mu] = np.conj(alphas[nz[0], mu]) * alphas[nz[1], mu]
        elif nz.size > 0:
            return None
    adj_idx = np.minimum(i1, max(L - 2, 0))
    return i1, i2, c11, c22, c12, adj_idx


def _dp_stack(cache, qs):
    """<d'd> per channel for a stack of frames, (T, M)."""
    tab = cache.pair_table
    if tab is None:
        w = np.matmul(qs.conj().transpose(0, 2, 1), cache.alphas)
        return (np.abs(w) ** 2).sum(axis=1)
    i1, i2, c11, c22, c12, adj_idx = tab
    n = np.einsum("tln,tln->tl", qs.conj(), qs).real
    adj = (qs[:, :-1, :].conj() * qs[:, 1:, :]).sum(axis=2)
    dp = n[:, i1] * c11 + n[:, i2] * c22
    if adj.shape[1]:
        dp += 2.0 * (np.conj(c12) * adj[:, adj_idx]).real
    return dp


def make_gaussian_cache(spec, dt):
    if spec.representation != model.QUADRATIC:
        raise ContractError("gaussian engine needs a quadratic-fermion spec")
    if dt <= 0:
        raise ContractError("dt must be > 0")
    alphas = np.column_stack([np.asarray(ch.operator) for ch in spec.channels])
    rates = np.array([ch.rate for ch in spec.channels])
    etas = np.array([ch.efficiency for ch in spec.channels])
    m_base = -1j * dt * spec.hamiltonian - 0.5 * dt * model.quadratic_loss_matrix(
        spec, "full-gamma"
    )
    e_full = matrix_exponential(m_base)
    sigma_min = np.linalg.svd(e_full, compute_uv=False)[-1]
    shrink = float(max(min(sigma_min**2, 1.0) * (1.0 - 1e-10), 1e-8))
    return GaussianStepCache(
        dt=dt,
        rates=rates,
        etas=etas,
        alphas=alphas,
        m_base=m_base,
        e_full=e_full,
        shrink=shrink,
        pair_table=_pair_table(alphas),
    )


def _scan_channels(cache, q, occ, detect):
    """Sequential jump decisions; mutated frame feeds later channels.

    Returns (q, jumped indices, discarded). Decisions are still channel by
    channel, but each contiguous no-jump stretch is evaluated in a single
    product because non-jumps leave the frame untouched.
    """
    jumped = []
    n_ch = len(cache.rates)
    mu = 0
    while mu < n_ch:
        w = q.conj().T @ cache.alphas[:, mu:]
        dp = cache.rates[mu:] * cache.dt * (np.abs(w) ** 2).sum(axis=0)
        if detect is None:
            takes = occ[mu:] < (1.0 - cache.etas[mu:]) * dp
        else:
            takes = occ[mu:] < dp
        idx = np.nonzero(takes)[0]
        scanned = dp[: idx[0] + 1] if idx.size else dp
        for val in scanned[scanned > DP_WARN]:
            warnings.warn(
                f"jump probability {val:.3g} exceeds {DP_WARN}; reduce dt",
                stacklevel=4,
            )
        if idx.size == 0:
            break
        j = mu + int(idx[0])
        if detect is not None and detect[j] < cache.etas[j]:
            return q, jumped, True
        q = _jump(q, cache.alphas[:, j])
        jumped.append(j)
        mu = j + 1
    return q, jumped, False


def _finish_step(cache, q, jumped):
    if jumped:
        key = tuple(jumped)
        e = cache.e_jumped.get(key)
        if e is None:
            m = cache.m_base.copy()
            for mu in jumped:
                alpha = cache.alphas[:, mu]
                m += (
                    0.5 * cache.rates[mu] * cache.dt
                    * np.outer(alpha, alpha.conj())
                )
            e = matrix_exponential(m)
            cache.e_jumped[key] = e
        return _apply_matrix(q, e)
    return _apply_matrix(q, cache.e_full)


def step_gaussian(spec, state, rng, dt=0.005, cache=None, method="QT2"):
    """One trajectory step mirroring the Fock engine's fused semantics.

    QT2 draws one uniform per channel and jumps with probability
    (1 - eta) dp; QT1 draws an occurrence/detection pair per channel and
    returns None when a detected jump discards the record.
    """
    cache = cache if cache is not None else make_gaussian_cache(spec, dt)
    n_ch = len(cache.rates)
    if method == "QT2":
        occ, detect = rng.random(n_ch), None
    elif method == "QT1":
        draws = rng.random((n_ch, 2))
        occ, detect = draws[:, 0], draws[:, 1]
    else:
        raise ContractError(f"method must be QT1 or QT2, got {method!r}")
    q, jumped, discarded = _scan_channels(cache, state.q, occ, detect)
    if discarded:
        return None
    return GaussianState(_finish_step(cache, q, jumped))


@dataclass
class GaussianEnsembleResult:
    """Raw per-trajectory records; analysis reduces windows and profiles.

    occupations has shape (n_traj, n_rec, L); each entry of entropies maps
    an (a, b) interval to an (n_traj, n_rec) array. Discarded QT1
    trajectories hold NaN from the discarding step onward.
    """

    times: np.ndarray
    occupations: np.ndarray
    entropies: dict
    method: str
    n_traj: int
    survival_fraction: np.ndarray = None

    def mean_occupations(self):
        """Alive-trajectory mean and standard error, (n_rec, L) each."""
        n = (~np.isnan(self.occupations[:, :, 0])).sum(axis=0)
        data = np.ma.masked_invalid(self.occupations)
        mean = np.asarray(data.mean(axis=0).filled(np.nan))
        if self.n_traj >= 2:
            std = np.asarray(data.std(axis=0, ddof=1).filled(0.0))
        else:
            std = np.zeros_like(mean)
        return mean, std / np.sqrt(np.maximum(n, 1))[:, None]

    def mean_entropy(self, interval):
        raw = self.entropies[tuple(interval)]
        n = (~np.isnan(raw)).sum(axis=0)
        data = np.ma.masked_invalid(raw)
        mean = np.asarray(data.mean(axis=0).filled(np.nan))
        if self.n_traj >= 2:
            std = np.asarray(data.std(axis=0, ddof=1).filled(0.0))
        else:
            std = np.zeros_like(mean)
        return mean, std / np.sqrt(np.maximum(n, 1))

    def occupations_to_csv(self, path):
        mean, stderr = self.mean_occupations()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["time", "site", "mean_n", "stderr_n"]
            if self.survival_fraction is not None:
                header.append("survival_fraction")
            writer.writerow(header)
            for k, t in enumerate(self.times):
                for site in range(mean.shape[1]):
                    row = [
                        f"{t:.17g}",
                        str(site + 1),
                        f"{mean[k, site]:.17g}",
                        f"{stderr[k, site]:.17g}",
                    ]
                    if self.survival_fraction is not None:
                        row.append(f"{self.survival_fraction[k]:.17g}")
                    writer.writerow(row)

    def entropies_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["time", "interval_start", "interval_end", "mean_S", "stderr_S"]
            )
            for (a, b) in self.entropies:
                mean, stderr = self.mean_entropy((a, b))
                for k, t in enumerate(self.times):
                    writer.writerow(
                        [
                            f"{t:.17g}",
                            str(a),
                            str(b),
                            f"{mean[k]:.17g}",
                            f"{stderr[k]:.17g}",
                        ]
                    )


_CHUNK_STEPS = 512


def _record_stack(qs, alive, intervals, occ_rec, ent_rec, rec_ptr):
    idx = np.nonzero(alive)[0]
    if idx.size == 0:
        return
    sub = qs[idx]
    occ_rec[idx, rec_ptr] = np.einsum("tin,tin->ti", sub.conj(), sub).real
    for a, b in intervals:
        blk = sub[:, a - 1 : b, :]
        c = np.matmul(blk.conj(), blk.transpose(0, 2, 1))
        lam = np.clip(
            np.linalg.eigvalsh((c + c.conj().transpose(0, 2, 1)) / 2),
            1e-12,
            1.0 - 1e-12,
        )
        ent_rec[(a, b)][idx, rec_ptr] = -np.sum(
            lam * np.log(lam) + (1 - lam) * np.log(1 - lam), axis=1
        )


_ORTH_EVERY = 16
_DP_GUARD = 1.0 + 1e-12


def _run_block(cache, q0, n_steps, rec_steps, intervals, seed, indices, qt1):
    """Advance a block of trajectories in lockstep.

    No-occurrence steps (the vast majority) advance the whole stack with one
    batched multiply, deferring re-orthonormalization for up to _ORTH_EVERY
    steps; because e_full is contractive, deferral can only shrink the raw
    jump expectations, so inflating them by shrink^-k gives a rigorous
    occurrence test. Any trajectory whose draws cross an inflated threshold
    is replayed through the scalar per-channel scan from its orthonormalized
    pre-step frame with the same draws, where the exact expectations decide.
    A spurious detection replays into a plain no-jump step, so the block
    path stays draw-for-draw compatible with scalar step_gaussian.
    """
    n_ch = len(cache.rates)
    dps = n_ch * (2 if qt1 else 1)
    n_blk = len(indices)
    L, N = q0.shape
    rngs = [child_rng(seed, i) for i in indices]
    if qt1:
        thresholds = cache.rates * cache.dt
    else:
        thresholds = (1.0 - cache.etas) * cache.rates * cache.dt
    n_rec = len(rec_steps)
    occ_rec = np.full((n_blk, n_rec, L), np.nan)
    ent_rec = {iv: np.full((n_blk, n_rec), np.nan) for iv in intervals}
    qs = np.broadcast_to(q0, (n_blk, L, N)).copy()
    alive = np.ones(n_blk, dtype=bool)
    rec_ptr = 0
    draws = None
    since_orth = 0
    # defer at most until the detection inflation reaches 25%
    orth_every = _ORTH_EVERY
    if cache.shrink < 1.0:
        orth_every = int(np.clip(
            np.log(1.25) / -np.log(cache.shrink), 1, _ORTH_EVERY
        ))
    for step in range(n_steps + 1):
        due_record = rec_ptr < n_rec and rec_steps[rec_ptr] == step
        if since_orth and (due_record or since_orth >= orth_every):
            qs = _orth_stack(qs)
            if not alive.all():
                # park discarded frames on the initial state so the stacked
                # factorizations stay well conditioned
                qs[~alive] = q0
            since_orth = 0
        if due_record:
            _record_stack(qs, alive, intervals, occ_rec, ent_rec, rec_ptr)
            rec_ptr += 1
        if step == n_steps:
            break
        k = step % _CHUNK_STEPS
        if k == 0:
            m = min(_CHUNK_STEPS, n_steps - step)
            draws = np.stack([rng.random((m, dps)) for rng in rngs])
        u = draws[:, k, :]
        if qt1:
            pairs = u.reshape(n_blk, n_ch, 2)
            occ_u, detect_u = pairs[:, :, 0], pairs[:, :, 1]
        else:
            occ_u, detect_u = u, None
        dp_scale = _dp_stack(cache, qs)
        bound = _DP_GUARD / cache.shrink**since_orth
        hits = np.any(occ_u < thresholds * (dp_scale * bound), axis=1) & alive
        hit_idx = np.nonzero(hits)[0]
        saved = [_orth_frame(qs[t]) for t in hit_idx]
        qs = np.matmul(cache.e_full, qs)
        since_orth += 1
        for t, q_pre in zip(hit_idx, saved):
            q2, jumped, discarded = _scan_channels(
                cache,
                q_pre,
                occ_u[t],
                None if detect_u is None else detect_u[t],
            )
            if discarded:
                alive[t] = False
                qs[t] = q0
                continue
            qs[t] = _finish_step(cache, q2, jumped)
    return occ_rec, ent_rec


def run_gaussian_ensemble(
    spec, state0, config, entropy_intervals=None, threads=1
):
    """Seeded Gaussian trajectory ensemble.

    Same RNG contract as the Fock engine: trajectory i consumes the stream
    of child_rng(master_seed, i) in channel-major order, so scalar
    step_gaussian replays are bit-compatible. entropy_intervals is a list
    of 1-based inclusive (a, b) pairs recorded alongside the occupations;
    threads > 1 distributes contiguous trajectory blocks over a thread pool
    without changing any output.
    """
    if not isinstance(config, TrajectoryConfig):
        raise ContractError("config must be a TrajectoryConfig")
    cache = make_gaussian_cache(spec, config.dt)
    state0 = state0 if isinstance(state0, GaussianState) else GaussianState(state0)
    if state0.n_sites != spec.dimension:
        raise DimensionError(
            f"frame has {state0.n_sites} sites, spec has {spec.dimension}"
        )
    intervals = [tuple(int(x) for x in iv) for iv in (entropy_intervals or [])]
    L = state0.n_sites
    for a, b in intervals:
        if not 1 <= a <= b <= L:
            raise ContractError(f"interval [{a}, {b}] out of range for L = {L}")
    n_steps = int(round(config.T / config.dt))
    if abs(n_steps * config.dt - config.T) > 1e-9 * max(1.0, config.T):
        raise ContractError("T must be an integer multiple of dt")
    rec_steps = _record_steps(n_steps, config.record_stride)
    times = rec_steps * config.dt
    qt1 = config.method == "QT1"

    def job(indices):
        return _run_block(
            cache, state0.q, n_steps, rec_steps, intervals,
            config.master_seed, indices, qt1,
        )

    blocks = np.array_split(np.arange(config.n_traj), max(1, int(threads)))
    blocks = [b for b in blocks if b.size]
    if len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            results = list(pool.map(job, blocks))
    else:
        results = [job(blocks[0])]

    occupations = np.concatenate([r[0] for r in results])
    entropies = {
        iv: np.concatenate([r[1][iv] for r in results]) for iv in intervals
    }
    survival = None
    if qt1:
        alive_mask = ~np.isnan(occupations[:, :, 0])
        alive_count = alive_mask.sum(axis=0)
        if np.any(alive_count == 0):
            first = times[np.argmax(alive_count == 0)]
            raise EmptyEnsembleError(
                f"all {config.n_traj} trajectories discarded by t = {first:g}; "
                "use QT2 or a shorter horizon"
            )
        survival = alive_count / config.n_traj
        if np.any(np.diff(survival) > 1e-12):
            raise ContractError("survival fraction increased in time")
    return GaussianEnsembleResult(
        times=times,
        occupations=occupations,
        entropies=entropies,
        method=config.method,
        n_traj=config.n_traj,
        survival_fraction=survival,
    )
