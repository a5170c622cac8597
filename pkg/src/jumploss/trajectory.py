"""Monte Carlo wave-function engines on the exact Fock space.

Two unravelings of the partially monitored master equation:

* QT1, faithful postselection: a jump occurs with probability
  delta_p = gamma dt <L'L>; each occurred jump is detected with probability
  eta and detection discards the trajectory. Averages run over survivors.
* QT2, reweighted: jump probabilities are rescaled to (1 - eta) delta_p and
  nothing is discarded.

Few-level specs use the literal per-channel branching: in ascending channel
order each channel either jumps or applies its exact no-jump factor
exp(-(1/2) gamma dt L'L), and e^{-iH dt} closes the step. Specs embedded
from quadratic-fermion systems instead fuse the surviving channels' no-jump
generators with the Hamiltonian into a single exponential per step, which is
exactly what the gaussian-module engine does; because L = d'd is quadratic,
the fused Fock generator is the second-quantized image of the gaussian
single-particle generator and the two engines agree trajectory for
trajectory (up to a global phase), not merely to O(dt^2).

RNG contract: trajectory i draws from PCG64 seeded by
SeedSequence(entropy=master_seed, spawn_key=(i,)). Each step consumes one
uniform per channel (QT2) or two per channel (QT1: occurrence then
detection, both consumed regardless of branch), in ascending channel order;
block pre-draws consume the stream identically to scalar draws.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import model
from .errors import CapacityError, ContractError, DimensionError, EmptyEnsembleError
from .linalg import matrix_exponential

FOCK_CAPACITY = 12
DP_WARN = 0.1

_jw_cache = {}


def jw_annihilation_operators(L):
    """Dense Jordan-Wigner annihilation operators a_1..a_L.

    Occupation basis indexed with site 1 as the most significant bit, so the
    basis order at L=2 is (00, 01, 10, 11).
    """
    if L in _jw_cache:
        return _jw_cache[L]
    if L > FOCK_CAPACITY:
        raise CapacityError(
            f"Fock space limited to L <= {FOCK_CAPACITY} sites, got {L}"
        )
    sz = np.diag([1.0, -1.0]).astype(complex)
    a = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
    eye = np.eye(2, dtype=complex)
    ops = []
    for l in range(L):
        out = np.array([[1.0 + 0j]])
        for k in range(L):
            out = np.kron(out, sz if k < l else (a if k == l else eye))
        out.setflags(write=False)
        ops.append(out)
    ops = tuple(ops)
    _verify_car(ops, L)
    _jw_cache[L] = ops
    return ops


def _verify_car(ops, L):
    """Canonical anticommutation relations to 1e-12 at build time.

    Dense pairwise products up to d = 256; beyond that (L <= 12) the
    relations are certified by action on seeded random vectors, since dense
    d = 4096 products would dominate any realistic use.
    """
    d = 2**L
    if d <= 256:
        for i in range(L):
            for j in range(i, L):
                acc = ops[i] @ ops[j] + ops[j] @ ops[i]
                if np.max(np.abs(acc)) > 1e-12:
                    raise ContractError(f"{{a_{i + 1}, a_{j + 1}}} != 0")
                acc = ops[i] @ ops[j].conj().T + ops[j].conj().T @ ops[i]
                target = np.eye(d) if i == j else 0.0
                if np.max(np.abs(acc - target)) > 1e-12:
                    raise ContractError(f"{{a_{i + 1}, a'_{j + 1}}} != delta")
    else:
        rng = np.random.default_rng(0)
        v = rng.normal(size=(d, 3)) + 1j * rng.normal(size=(d, 3))
        v /= np.linalg.norm(v, axis=0)
        for i in range(L):
            for j in range(i, L):
                acc = ops[i] @ (ops[j] @ v) + ops[j] @ (ops[i] @ v)
                if np.max(np.abs(acc)) > 1e-12:
                    raise ContractError(f"{{a_{i + 1}, a_{j + 1}}} != 0")
                adj = ops[j].conj().T
                acc = ops[i] @ (adj @ v) + adj @ (ops[i] @ v)
                target = v if i == j else 0.0
                if np.max(np.abs(acc - target)) > 1e-12:
                    raise ContractError(f"{{a_{i + 1}, a'_{j + 1}}} != delta")


def fock_basis_state(occupations):
    """Fock basis vector |n_1 n_2 ... n_L> (site 1 = most significant bit)."""
    bits = [int(b) for b in occupations]
    if any(b not in (0, 1) for b in bits):
        raise ContractError("occupations must be 0/1")
    L = len(bits)
    if L > FOCK_CAPACITY:
        raise CapacityError(f"Fock space limited to L <= {FOCK_CAPACITY} sites")
    idx = 0
    for b in bits:
        idx = (idx << 1) | b
    psi = np.zeros(2**L, dtype=complex)
    psi[idx] = 1.0
    return psi


def embed_gaussian_frame(q):
    """Fock vector of the Slater determinant with frame columns q_n.

    Applies d'_{q_n} = sum_i q[i, n] a'_i to the vacuum in column order and
    normalizes; matches the gaussian module's state up to a global phase.
    """
    q = np.asarray(q, dtype=complex)
    L, N = q.shape
    ops = jw_annihilation_operators(L)
    psi = np.zeros(2**L, dtype=complex)
    psi[0] = 1.0
    for n in range(N):
        creator = sum(q[i, n] * ops[i].conj().T for i in range(L))
        psi = creator @ psi
    norm = np.linalg.norm(psi)
    if norm < 1e-12:
        raise ContractError("frame columns are linearly dependent")
    return psi / norm


def fock_embed(spec):
    """Lift a quadratic-fermion spec to the occupation basis (d = 2^L).

    Channels L = d'_alpha d_alpha become dense number operators of the mode;
    the Hamiltonian becomes sum_ij H_ij a'_i a_j. Anticommutation relations
    are verified at build time. Capacity guard: L <= 12.
    """
    if spec.representation != model.QUADRATIC:
        raise ContractError("fock_embed expects a quadratic-fermion spec")
    L = spec.dimension
    if L > FOCK_CAPACITY:
        raise CapacityError(
            f"Fock space limited to L <= {FOCK_CAPACITY} sites, got {L}"
        )
    ops = jw_annihilation_operators(L)
    h = embed_single_particle(spec.hamiltonian, ops)
    channels = []
    for ch in spec.channels:
        d_op = sum(np.conj(ch.operator[i]) * ops[i] for i in range(L))
        channels.append(
            model.JumpChannel(d_op.conj().T @ d_op, ch.rate, ch.efficiency, ch.label)
        )
    return model.OpenSystemSpec(
        h,
        tuple(channels),
        model.FEW_LEVEL,
        builder="fock-embed",
        params=dict(spec.params, source=spec.builder or "custom"),
    )


def embed_single_particle(m, ops):
    """Second-quantized image sum_ij M_ij a'_i a_j of a coefficient matrix."""
    m = np.asarray(m, dtype=complex)
    L = len(ops)
    d = ops[0].shape[0]
    out = np.zeros((d, d), dtype=complex)
    for i in range(L):
        row = np.zeros_like(ops[0])
        for j in range(L):
            if m[i, j] != 0.0:
                row += m[i, j] * ops[j]
        if np.any(row):
            out += ops[i].conj().T @ row
    return out


@dataclass(frozen=True)
class TrajectoryConfig:
    """Ensemble parameters; defaults follow the reference runs (dt = 0.005)."""

    dt: float = 0.005
    T: float = 10.0
    n_traj: int = 60
    method: str = "QT2"
    master_seed: int = 1
    record_stride: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise ContractError("dt must be > 0")
        if self.T < 0:
            raise ContractError("T must be >= 0")
        if self.n_traj < 1:
            raise ContractError("n_traj must be >= 1")
        if self.method not in ("QT1", "QT2"):
            raise ContractError(f"method must be QT1 or QT2, got {self.method!r}")
        if self.record_stride < 1:
            raise ContractError("record_stride must be >= 1")


@dataclass
class EnsembleEstimate:
    """Ensemble means with standard errors; QT1 adds survival fractions."""

    times: np.ndarray
    means: dict
    stderrs: dict
    n_traj: int
    method: str
    survival_fraction: np.ndarray = None

    def to_csv(self, path):
        import csv

        names = list(self.means)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["time"]
            for name in names:
                header += [f"mean_{name}", f"stderr_{name}"]
            if self.survival_fraction is not None:
                header.append("survival_fraction")
            writer.writerow(header)
            for k, t in enumerate(self.times):
                row = [f"{t:.17g}"]
                for name in names:
                    row += [
                        f"{self.means[name][k]:.17g}",
                        f"{self.stderrs[name][k]:.17g}",
                    ]
                if self.survival_fraction is not None:
                    row.append(f"{self.survival_fraction[k]:.17g}")
                writer.writerow(row)


def child_rng(master_seed, index):
    """Per-trajectory generator: PCG64(SeedSequence(master_seed, spawn_key=(i,)))."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))
    return np.random.Generator(np.random.PCG64(ss))


def _uses_fused(spec):
    return spec.representation == model.QUADRATIC or spec.builder == "fock-embed"


@dataclass
class StepCache:
    """State-independent per-step operators (exponentials are cached here)."""

    kind: str
    dt: float
    rates: np.ndarray
    etas: np.ndarray
    # few-level: per-channel jump ops, L'L, and exact no-jump factors
    jump_ops: list = None
    ldl_ops: list = None
    nojump_ops: list = None
    h_step: np.ndarray = None
    # fused: number operators N_l, full generator and its exponential
    n_ops: list = None
    g_full: np.ndarray = None
    e_full: np.ndarray = None
    contribs: list = None


def make_step_cache(spec, dt):
    """Precompute the per-step operator set for step_qt1/step_qt2."""
    if dt <= 0:
        raise ContractError("dt must be > 0")
    fused = _uses_fused(spec)
    espec = fock_embed(spec) if spec.representation == model.QUADRATIC else spec
    rates = np.array([ch.rate for ch in espec.channels])
    etas = np.array([ch.efficiency for ch in espec.channels])
    if fused:
        n_ops = [np.asarray(ch.operator) for ch in espec.channels]
        g_full = -1j * espec.hamiltonian * dt
        contribs = []
        for rate, n_op in zip(rates, n_ops):
            contrib = 0.5 * rate * dt * n_op
            g_full = g_full - contrib
            contribs.append(contrib)
        return StepCache(
            kind="fused",
            dt=dt,
            rates=rates,
            etas=etas,
            n_ops=n_ops,
            g_full=g_full,
            e_full=matrix_exponential(g_full),
            contribs=contribs,
        )
    jump_ops, ldl_ops, nojump_ops = [], [], []
    for ch in espec.channels:
        lop = np.asarray(ch.operator)
        ldl = lop.conj().T @ lop
        jump_ops.append(lop)
        ldl_ops.append(ldl)
        nojump_ops.append(matrix_exponential(-0.5 * ch.rate * dt * ldl))
    return StepCache(
        kind="few-level",
        dt=dt,
        rates=rates,
        etas=etas,
        jump_ops=jump_ops,
        ldl_ops=ldl_ops,
        nojump_ops=nojump_ops,
        h_step=matrix_exponential(-1j * espec.hamiltonian * dt),
    )


def jump_probabilities(spec, psi, dt, cache=None):
    """Per-channel first-order jump probabilities gamma_mu dt <L'L>."""
    cache = cache if cache is not None else make_step_cache(spec, dt)
    psi = np.asarray(psi, dtype=complex)
    ops = cache.ldl_ops if cache.kind == "few-level" else cache.n_ops
    out = np.empty(len(ops))
    for mu, op in enumerate(ops):
        out[mu] = cache.rates[mu] * cache.dt * np.vdot(psi, op @ psi).real
    return out


def _normalize(psi):
    norm = np.linalg.norm(psi)
    if norm < 1e-300:
        raise ContractError("state norm collapsed to zero")
    return psi / norm


def _warn_dp(dp):
    if dp > DP_WARN:
        warnings.warn(
            f"jump probability {dp:.3g} exceeds {DP_WARN}; reduce dt",
            stacklevel=3,
        )


def _step_few_level(cache, psi, uniforms, detect=None):
    """Literal per-channel branching. Returns (psi, discarded)."""
    for mu in range(len(cache.rates)):
        dp = cache.rates[mu] * cache.dt * np.vdot(psi, cache.ldl_ops[mu] @ psi).real
        _warn_dp(dp)
        if detect is None:
            if uniforms[mu] < (1.0 - cache.etas[mu]) * dp:
                psi = _normalize(cache.jump_ops[mu] @ psi)
            else:
                psi = _normalize(cache.nojump_ops[mu] @ psi)
        else:
            if uniforms[mu] < dp:
                if detect[mu] < cache.etas[mu]:
                    return psi, True
                psi = _normalize(cache.jump_ops[mu] @ psi)
            else:
                psi = _normalize(cache.nojump_ops[mu] @ psi)
    return _normalize(cache.h_step @ psi), False


def _step_fused(cache, psi, uniforms, detect=None):
    """Jump scan with on-demand probabilities, then one fused exponential.

    Mirrors the gaussian engine: channels that jump drop their no-jump
    generator from the fused exponential for that step.
    """
    jumped = []
    for mu in range(len(cache.rates)):
        dp = cache.rates[mu] * cache.dt * np.vdot(psi, cache.n_ops[mu] @ psi).real
        _warn_dp(dp)
        if detect is None:
            take = uniforms[mu] < (1.0 - cache.etas[mu]) * dp
        else:
            take = uniforms[mu] < dp
            if take and detect[mu] < cache.etas[mu]:
                return psi, True
        if take:
            psi = _normalize(cache.n_ops[mu] @ psi)
            jumped.append(mu)
    if jumped:
        g = cache.g_full.copy()
        for mu in jumped:
            g += cache.contribs[mu]
        return _normalize(matrix_exponential(g) @ psi), False
    return _normalize(cache.e_full @ psi), False


def step_qt2(spec, psi, rng, dt=0.005, cache=None):
    """One reweighted-unraveling step; never discards."""
    cache = cache if cache is not None else make_step_cache(spec, dt)
    psi = np.asarray(psi, dtype=complex)
    uniforms = rng.random(len(cache.rates))
    step = _step_fused if cache.kind == "fused" else _step_few_level
    psi, _ = step(cache, psi, uniforms)
    return psi


def step_qt1(spec, psi, rng, dt=0.005, cache=None):
    """One faithful-postselection step; returns None when discarded."""
    cache = cache if cache is not None else make_step_cache(spec, dt)
    psi = np.asarray(psi, dtype=complex)
    draws = rng.random((len(cache.rates), 2))
    step = _step_fused if cache.kind == "fused" else _step_few_level
    psi, discarded = step(cache, psi, draws[:, 0], detect=draws[:, 1])
    return None if discarded else psi


def _record_steps(n_steps, stride):
    steps = list(range(0, n_steps + 1, stride))
    if steps[-1] != n_steps:
        steps.append(n_steps)
    return np.array(steps)


def _resolve_observables(spec, espec, observables):
    """Named Fock-space observable matrices.

    For quadratic source specs, user observables are single-particle
    coefficient matrices and defaults are the site occupations n_l; for
    few-level specs they are full matrices and defaults are the basis-state
    populations.
    """
    d = espec.dimension
    if _uses_fused(spec) and spec.representation == model.QUADRATIC:
        L = spec.dimension
        ops = jw_annihilation_operators(L)
        if observables is None:
            return {
                f"n_{l + 1}": ops[l].conj().T @ ops[l] for l in range(L)
            }
        return {
            name: embed_single_particle(m, ops) for name, m in observables.items()
        }
    if observables is None:
        observables = {
            f"pop_{i}": np.diag(np.eye(d)[i]).astype(complex) for i in range(d)
        }
    out = {}
    for name, m in observables.items():
        m = np.asarray(m, dtype=complex)
        if m.shape != (d, d):
            raise DimensionError(f"observable {name!r} must be {d}x{d}")
        out[name] = m
    return out


def run_ensemble(spec, psi0, config, observables=None):
    """Seeded trajectory ensemble with index-ordered reduction.

    Trajectory i uses child_rng(master_seed, i); observable records are
    accumulated per trajectory and reduced over the full trajectory axis in
    one pass, so results are independent of internal batching and
    bit-reproducible for identical inputs. QT1 averages run over the
    trajectories still alive at each record time.
    """
    cache = make_step_cache(spec, config.dt)
    espec = fock_embed(spec) if spec.representation == model.QUADRATIC else spec
    obs = _resolve_observables(spec, espec, observables)
    names = list(obs)
    obs_mats = [obs[name] for name in names]
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.shape != (espec.dimension,):
        raise DimensionError(
            f"psi0 must have dimension {espec.dimension}, got {psi0.shape}"
        )
    if abs(np.linalg.norm(psi0) - 1.0) > 1e-10:
        raise ContractError("psi0 must be normalized")
    n_steps = int(round(config.T / config.dt))
    if abs(n_steps * config.dt - config.T) > 1e-9 * max(1.0, config.T):
        raise ContractError("T must be an integer multiple of dt")
    rec_steps = _record_steps(n_steps, config.record_stride)
    times = rec_steps * config.dt
    n_rec = len(rec_steps)
    n_traj = config.n_traj
    qt1 = config.method == "QT1"

    records = np.empty((n_traj, n_rec, len(names)))
    alive_count = np.zeros(n_rec, dtype=int)

    d = espec.dimension
    draws_total = len(cache.rates) * (2 if qt1 else 1) * max(1, n_steps)
    chunk = max(1, min(n_traj, (1 << 16) // d, (1 << 23) // draws_total))
    for start in range(0, n_traj, chunk):
        idx = range(start, min(start + chunk, n_traj))
        block = np.empty((d, len(idx)), dtype=complex)
        block[:] = psi0[:, None]
        draws_per_step = len(cache.rates) * (2 if qt1 else 1)
        uniforms = np.stack(  # (n_steps, draws_per_step, chunk)
            [
                child_rng(config.master_seed, i).random((n_steps, draws_per_step))
                for i in idx
            ],
            axis=2,
        )
        alive = np.ones(len(idx), dtype=bool)
        rec_ptr = 0
        for step in range(n_steps + 1):
            if rec_ptr < n_rec and rec_steps[rec_ptr] == step:
                _record_block(block, obs_mats, records, start, rec_ptr, alive)
                alive_count[rec_ptr] += int(np.sum(alive))
                rec_ptr += 1
            if step == n_steps:
                break
            block, alive = _advance_block(
                cache, block, uniforms[step], alive, qt1
            )
    if qt1:
        if np.any(alive_count == 0):
            first = times[np.argmax(alive_count == 0)]
            raise EmptyEnsembleError(
                f"all {n_traj} trajectories discarded by t = {first:g}; "
                "use QT2 or a shorter horizon"
            )
        alive_mask = ~np.isnan(records[:, :, 0])
        means, stderrs = {}, {}
        for k, name in enumerate(names):
            data = np.ma.masked_invalid(records[:, :, k])
            n_alive = alive_mask.sum(axis=0)
            mean = data.mean(axis=0).filled(np.nan)
            if n_traj >= 2:
                std = data.std(axis=0, ddof=1).filled(0.0)
            else:
                std = np.zeros(n_rec)
            means[name] = mean
            stderrs[name] = np.where(n_alive > 0, std / np.sqrt(n_alive), 0.0)
        survival = alive_count / n_traj
        if np.any(np.diff(survival) > 1e-12):
            raise ContractError("survival fraction increased in time")
        return EnsembleEstimate(times, means, stderrs, n_traj, "QT1", survival)
    means, stderrs = {}, {}
    for k, name in enumerate(names):
        data = records[:, :, k]
        means[name] = data.mean(axis=0)
        if n_traj >= 2:
            stderrs[name] = data.std(axis=0, ddof=1) / np.sqrt(n_traj)
        else:
            stderrs[name] = np.zeros(n_rec)
    return EnsembleEstimate(times, means, stderrs, n_traj, "QT2")


def _record_block(block, obs_mats, records, start, rec_ptr, alive):
    n = block.shape[1]
    for k, mat in enumerate(obs_mats):
        vals = np.einsum("in,in->n", block.conj(), mat @ block).real
        vals = np.where(alive, vals, np.nan)
        records[start : start + n, rec_ptr, k] = vals


def _advance_block(cache, block, uniforms, alive, qt1):
    """Advance all alive columns by one step.

    Fast path: decide jumps from pre-step expectations for every column;
    any column whose scan would mutate mid-step (a jump, or a QT1 discard)
    is replayed exactly in scalar form, which recomputes the later channels'
    probabilities from the mutated state. Columns without jumps are advanced
    with the shared cached exponentials, identical to the scalar path.
    """
    n_ch = len(cache.rates)
    cols = np.where(alive)[0]
    if cols.size == 0:
        return block, alive
    sub = block[:, cols]
    if qt1:
        occ = uniforms.reshape(n_ch, 2, -1)[:, 0, :][:, cols]
        thresholds = np.ones(n_ch)
    else:
        occ = uniforms.reshape(n_ch, -1)[:, cols]
        thresholds = 1.0 - cache.etas
    ops = cache.n_ops if cache.kind == "fused" else cache.ldl_ops
    touched = np.zeros(cols.size, dtype=bool)
    if cache.kind == "fused":
        for mu in range(n_ch):
            exp = np.einsum("in,in->n", sub.conj(), ops[mu] @ sub).real
            dp = cache.rates[mu] * cache.dt * exp
            if np.any(dp > DP_WARN):
                _warn_dp(float(np.max(dp)))
            touched |= occ[mu] < thresholds[mu] * dp
        clean = ~touched
        if np.any(clean):
            block[:, cols[clean]] = _normalize_cols(cache.e_full @ sub[:, clean])
    else:
        # literal engine mutates per channel, so the vectorized path applies
        # the same per-channel branching to all columns in lockstep
        new = sub.copy()
        for mu in range(n_ch):
            exp = np.einsum("in,in->n", new.conj(), ops[mu] @ new).real
            dp = cache.rates[mu] * cache.dt * exp
            if np.any(dp > DP_WARN):
                _warn_dp(float(np.max(dp)))
            jump = occ[mu] < thresholds[mu] * dp
            if qt1:
                detect = uniforms.reshape(n_ch, 2, -1)[mu, 1, cols]
                touched |= jump & (detect < cache.etas[mu])
                jump &= detect >= cache.etas[mu]
            if np.any(jump):
                new[:, jump] = _normalize_cols(cache.jump_ops[mu] @ new[:, jump])
            if np.any(~jump):
                new[:, ~jump] = _normalize_cols(cache.nojump_ops[mu] @ new[:, ~jump])
        new = _normalize_cols(cache.h_step @ new)
        if qt1:
            keep = ~touched
            block[:, cols[keep]] = new[:, keep]
            alive = alive.copy()
            alive[cols[touched]] = False
            return block, alive
        block[:, cols] = new
        return block, alive
    # replay touched fused columns exactly in scalar form
    if np.any(touched):
        alive = alive.copy()
        for j in np.where(touched)[0]:
            col = cols[j]
            if qt1:
                draws = uniforms.reshape(n_ch, 2, -1)[:, :, col]
                psi, discarded = _step_fused(
                    cache, block[:, col], draws[:, 0], detect=draws[:, 1]
                )
                if discarded:
                    alive[col] = False
                else:
                    block[:, col] = psi
            else:
                draws = uniforms.reshape(n_ch, -1)[:, col]
                psi, _ = _step_fused(cache, block[:, col], draws)
                block[:, col] = psi
    return block, alive


def _normalize_cols(block):
    norms = np.linalg.norm(block, axis=0)
    if np.any(norms < 1e-300):
        raise ContractError("state norm collapsed to zero")
    return block / norms
