"""Density-matrix evolution for the partially monitored master equation.

    drho/dt = -i[H, rho] + sum_mu gamma_mu ( -(1/2){L'_mu L_mu, rho}
              + (1 - eta_mu) L_mu rho L'_mu + eta_mu <L'_mu L_mu> rho )

with <L'L> = Tr(L'L rho). eta = 0 for every channel recovers the Lindblad
equation; eta = 1 is normalized non-Hermitian evolution. The trace obeys
d/dt Tr rho = sum_mu eta_mu gamma_mu (Tr rho - 1) <L'L>, so the flow is
trace-preserving exactly on the Tr rho = 1 manifold.

Density matrices are bare complex ndarrays; vectorized Liouvillians use
column stacking, vec(A X B) = (B^T kron A) vec(X).
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import model
from .errors import (
    CapacityError,
    ContractError,
    DimensionError,
    IntegrationDivergedError,
)
from .linalg import kron

LIOUVILLIAN_CAPACITY = 64
COMMUTATOR_TOL = 1e-10


def vec(rho):
    """Column-stack a matrix into a vector."""
    return np.asarray(rho, dtype=complex).reshape(-1, order="F")


def unvec(v, d):
    """Inverse of vec."""
    return np.asarray(v, dtype=complex).reshape((d, d), order="F")


def purity(rho):
    return float(np.trace(rho @ rho).real)


def check_density_matrix(rho, herm_tol=1e-10, trace_tol=1e-8, eig_tol=1e-8):
    """Validate Hermiticity, unit trace, and positivity (to tolerance)."""
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise DimensionError(f"density matrix must be square, got {rho.shape}")
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > herm_tol:
        raise ContractError(f"density matrix not Hermitian: {herm:.3e}")
    tr = np.trace(rho)
    if abs(tr - 1.0) > trace_tol:
        raise ContractError(f"density matrix trace {tr:.10g} != 1")
    low = np.min(np.linalg.eigvalsh((rho + rho.conj().T) / 2))
    if low < -eig_tol:
        raise ContractError(f"density matrix has eigenvalue {low:.3e} < 0")
    return rho


def _few_level(spec):
    if spec.representation != model.FEW_LEVEL:
        raise ContractError(
            "density-matrix engine needs a few-level spec; lift quadratic "
            "specs with trajectory.fock_embed first"
        )


def _channel_terms(spec):
    out = []
    for ch in spec.channels:
        lop = np.asarray(ch.operator)
        out.append((lop, lop.conj().T @ lop, ch.rate, ch.efficiency))
    return out


def lme_liouvillian(spec):
    """Linear part of the generator as a d^2 x d^2 matrix (column stacking).

    drho/dt = unvec(liou @ vec(rho)) + sum_mu eta_mu gamma_mu <L'L> rho
    reproduces the full nonlinear equation; the recycling term carries the
    (1 - eta) detection-loss factor.
    """
    _few_level(spec)
    d = spec.dimension
    if d > LIOUVILLIAN_CAPACITY:
        raise CapacityError(
            f"dense Liouvillian limited to d <= {LIOUVILLIAN_CAPACITY}; use the "
            "trajectory or gaussian engines for larger systems"
        )
    eye = np.eye(d, dtype=complex)
    h = spec.hamiltonian
    liou = -1j * (kron(eye, h) - kron(h.T, eye))
    for lop, ldl, rate, eta in _channel_terms(spec):
        liou += rate * (
            -0.5 * (kron(eye, ldl) + kron(ldl.T, eye))
            + (1.0 - eta) * kron(lop.conj(), lop)
        )
    return liou


def nlme_rhs(spec, rho):
    """Right-hand side of the nonlinear master equation.

    Pure formula, valid at any trace; the nonlinear term uses the
    unnormalized expectation <L'L> = Tr(L'L rho), which is what makes the
    trace drift vanish exactly at Tr rho = 1.
    """
    _few_level(spec)
    rho = np.asarray(rho, dtype=complex)
    d = spec.dimension
    if rho.shape != (d, d):
        raise DimensionError(f"rho must be {d}x{d}, got {rho.shape}")
    h = spec.hamiltonian
    out = -1j * (h @ rho - rho @ h)
    for lop, ldl, rate, eta in _channel_terms(spec):
        ldl_rho = ldl @ rho
        out += rate * (
            -0.5 * (ldl_rho + rho @ ldl)
            + (1.0 - eta) * (lop @ rho @ lop.conj().T)
            + eta * np.trace(ldl_rho) * rho
        )
    return out


@dataclass
class EvolutionResult:
    """Recorded density-matrix evolution with per-record diagnostics."""

    times: np.ndarray
    observables: dict
    trace_residual: np.ndarray
    min_eigenvalue: np.ndarray
    states: np.ndarray = None
    renorm_count: int = 0
    max_trace_correction: float = 0.0

    def to_csv(self, path):
        names = list(self.observables)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", *names, "trace_residual", "min_eigenvalue"])
            for k, t in enumerate(self.times):
                row = [f"{t:.17g}"]
                row += [f"{self.observables[n][k]:.17g}" for n in names]
                row += [
                    f"{self.trace_residual[k]:.17g}",
                    f"{self.min_eigenvalue[k]:.17g}",
                ]
                writer.writerow(row)


def _record_steps(n_steps, stride):
    steps = list(range(0, n_steps + 1, stride))
    if steps[-1] != n_steps:
        steps.append(n_steps)
    return np.array(steps)


def evolve_nlme(
    spec,
    rho0,
    T,
    dt,
    record_stride=1,
    observables=None,
    record_states=False,
):
    """Classic fixed-step RK4 on the nonlinear master equation.

    After each step the state is Hermitian-symmetrized, and the trace is
    renormalized whenever |Tr rho - 1| > 1e-12 (corrections are counted and
    the largest one kept). Any Hermiticity or trace drift beyond 1e-6, or a
    non-finite entry, aborts with the offending step. Purity and basis
    populations are always recorded; `observables` adds named Hermitian
    matrices recorded as Tr(O rho).
    """
    _few_level(spec)
    if dt <= 0:
        raise ContractError("dt must be > 0")
    if T < 0:
        raise ContractError("T must be >= 0")
    rho = check_density_matrix(rho0).copy()
    d = spec.dimension
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ContractError("T must be an integer multiple of dt")
    rec_steps = _record_steps(n_steps, record_stride)
    times = rec_steps * dt
    n_rec = len(rec_steps)

    observables = observables or {}
    names = ["purity"] + [f"pop_{i}" for i in range(d)] + list(observables)
    obs_mats = list(observables.values())
    series = {name: np.empty(n_rec) for name in names}
    trace_residual = np.empty(n_rec)
    min_eigenvalue = np.empty(n_rec)
    states = np.empty((n_rec, d, d), dtype=complex) if record_states else None

    terms = _channel_terms(spec)
    h = spec.hamiltonian

    def rhs(r):
        out = -1j * (h @ r - r @ h)
        for lop, ldl, rate, eta in terms:
            ldl_r = ldl @ r
            out += rate * (
                -0.5 * (ldl_r + r @ ldl)
                + (1.0 - eta) * (lop @ r @ lop.conj().T)
                + eta * np.trace(ldl_r) * r
            )
        return out

    renorm_count = 0
    max_corr = 0.0
    residual = 0.0
    rec_ptr = 0
    for step in range(n_steps + 1):
        if rec_ptr < n_rec and rec_steps[rec_ptr] == step:
            series["purity"][rec_ptr] = purity(rho)
            diag = np.diagonal(rho).real
            for i in range(d):
                series[f"pop_{i}"][rec_ptr] = diag[i]
            for name, mat in zip(list(observables), obs_mats):
                series[name][rec_ptr] = np.trace(mat @ rho).real
            trace_residual[rec_ptr] = residual
            min_eigenvalue[rec_ptr] = np.min(
                np.linalg.eigvalsh((rho + rho.conj().T) / 2)
            )
            if record_states:
                states[rec_ptr] = rho
            rec_ptr += 1
        if step == n_steps:
            break
        k1 = rhs(rho)
        k2 = rhs(rho + 0.5 * dt * k1)
        k3 = rhs(rho + 0.5 * dt * k2)
        k4 = rhs(rho + dt * k3)
        rho = rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(rho)):
            raise IntegrationDivergedError(f"non-finite state at step {step + 1}")
        herm_drift = np.max(np.abs(rho - rho.conj().T))
        if herm_drift > 1e-6:
            raise IntegrationDivergedError(
                f"Hermiticity drift {herm_drift:.3e} at step {step + 1}"
            )
        rho = (rho + rho.conj().T) / 2
        tr = np.trace(rho).real
        residual = abs(tr - 1.0)
        if residual > 1e-6:
            raise IntegrationDivergedError(
                f"trace drift {residual:.3e} at step {step + 1}"
            )
        if residual > 1e-12:
            rho = rho / tr
            renorm_count += 1
            max_corr = max(max_corr, residual)
    return EvolutionResult(
        times=times,
        observables=series,
        trace_residual=trace_residual,
        min_eigenvalue=min_eigenvalue,
        states=states,
        renorm_count=renorm_count,
        max_trace_correction=max_corr,
    )


def single_site_occupation(t, n0, gamma, eta):
    """Closed-form density decay of one monitored site.

    n(t) = 1 / (1 + (1/n0 - 1) e^{eta gamma t}); n0 = 1 stays at 1.
    """
    if not 0.0 < n0 <= 1.0:
        raise ContractError(f"initial filling must lie in (0, 1], got {n0}")
    t = np.asarray(t, dtype=float)
    out = 1.0 / (1.0 + (1.0 / n0 - 1.0) * np.exp(eta * gamma * t))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class TrivialClassReport:
    """Outcome of the sufficient trivial-class conditions.

    per_channel_ok: every channel with eta gamma > 0 satisfies
    L'L rho0 = lambda rho0 and [L'L, H] = [L'L, L_k] = 0 for all k.
    translational_ok: the same with Gamma = sum over those channels of
    L'_mu L_mu, which requires a uniform eta gamma weight across them.
    Either route makes the nonlinear equation equivalent to a Lindblad
    equation with gamma -> (1 - eta) gamma. Channels with eta gamma = 0
    contribute no nonlinear term and impose no condition of their own.
    """

    is_trivial: bool
    per_channel_ok: bool
    translational_ok: bool
    channel_eigenvalues: tuple
    translational_eigenvalue: float
    witnesses: tuple


def trivial_class_check(spec, rho0, tol=COMMUTATOR_TOL):
    """Check the sufficient conditions for NLME/LME equivalence."""
    _few_level(spec)
    rho0 = np.asarray(rho0, dtype=complex)
    h = spec.hamiltonian
    terms = _channel_terms(spec)
    tr0 = np.trace(rho0)
    witnesses = []

    def _conditions(op, tag):
        lam = (np.trace(op @ rho0) / tr0).real
        fails = []
        r_eig = np.max(np.abs(op @ rho0 - lam * rho0))
        if r_eig > tol:
            fails.append(f"{tag}: eigen-matrix residual {r_eig:.3e}")
        r_h = np.max(np.abs(op @ h - h @ op))
        if r_h > tol:
            fails.append(f"{tag}: [op, H] residual {r_h:.3e}")
        for k, (lk, _, _, _) in enumerate(terms):
            r_l = np.max(np.abs(op @ lk - lk @ op))
            if r_l > tol:
                fails.append(f"{tag}: [op, L_{k}] residual {r_l:.3e}")
        return lam, fails

    active = [mu for mu, (_, _, rate, eta) in enumerate(terms) if eta * rate > 0]
    eigenvalues = []
    per_channel_ok = True
    for mu, (_, ldl, _, _) in enumerate(terms):
        lam = (np.trace(ldl @ rho0) / tr0).real
        eigenvalues.append(lam)
        if mu in active:
            _, fails = _conditions(ldl, f"channel {mu}")
            if fails:
                per_channel_ok = False
                witnesses.extend(fails)

    d = spec.dimension
    gamma_op = sum(
        (terms[mu][1] for mu in active), np.zeros((d, d), dtype=complex)
    )
    trans_lam, trans_fails = _conditions(gamma_op, "translational Gamma")
    weights = {terms[mu][2] * terms[mu][3] for mu in active}
    if len(weights) > 1:
        trans_fails.append(
            "translational Gamma: non-uniform eta*gamma weights "
            f"{sorted(weights)}"
        )
    translational_ok = not trans_fails
    witnesses.extend(trans_fails)

    return TrivialClassReport(
        is_trivial=per_channel_ok or translational_ok,
        per_channel_ok=per_channel_ok,
        translational_ok=translational_ok,
        channel_eigenvalues=tuple(eigenvalues),
        translational_eigenvalue=trans_lam,
        witnesses=tuple(witnesses),
    )


def reduced_lme_equivalence(spec, rho0, T, dt, record_stride=10):
    """Max deviation between the NLME and the rate-rescaled LME.

    On the trivial class the nonlinear equation equals the plain Lindblad
    equation with gamma_mu -> (1 - eta_mu) gamma_mu; both are integrated on
    the same RK4 grid and compared at the recorded times.
    """
    report = trivial_class_check(spec, rho0)
    if not report.is_trivial:
        raise ContractError(
            "spec/state pair is not in the trivial class: "
            + "; ".join(report.witnesses)
        )
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
    a = evolve_nlme(spec, rho0, T, dt, record_stride, record_states=True)
    b = evolve_nlme(reduced, rho0, T, dt, record_stride, record_states=True)
    return float(np.max(np.abs(a.states - b.states)))


def symmetry_drift_rate(spec, rho, observable):
    """Conservation-breaking rate of a strong symmetry.

    For [O, H] = [O, L_mu] = 0, the nonlinear flow gives
    d/dt Tr(O rho) = sum_mu eta_mu gamma_mu (<L'L> Tr(O rho) - Tr(O L'L rho)),
    which vanishes for every eta when rho lies in an O-eigensector and
    reduces to the trace drift for O = I.
    """
    _few_level(spec)
    rho = np.asarray(rho, dtype=complex)
    obs = np.asarray(observable, dtype=complex)
    d = spec.dimension
    if obs.shape != (d, d) or rho.shape != (d, d):
        raise DimensionError("observable/state dimension mismatch")
    h = spec.hamiltonian
    r_h = np.max(np.abs(obs @ h - h @ obs))
    if r_h > COMMUTATOR_TOL:
        raise ContractError(f"[O, H] residual {r_h:.3e} breaks strong symmetry")
    terms = _channel_terms(spec)
    for mu, (lop, _, _, _) in enumerate(terms):
        r_l = np.max(np.abs(obs @ lop - lop @ obs))
        if r_l > COMMUTATOR_TOL:
            raise ContractError(
                f"[O, L_{mu}] residual {r_l:.3e} breaks strong symmetry"
            )
    rate = 0.0
    tr_o = np.trace(obs @ rho)
    for _, ldl, gamma, eta in terms:
        if eta == 0.0 or gamma == 0.0:
            continue
        rate += eta * gamma * (np.trace(ldl @ rho) * tr_o - np.trace(obs @ ldl @ rho))
    return float(np.real(rate))
