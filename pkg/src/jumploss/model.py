"""Declarative open-system specifications.

An OpenSystemSpec bundles a Hamiltonian with jump channels, each carrying a
rate gamma_mu >= 0 and a detection efficiency eta_mu in [0, 1] (the fraction
of that channel's jumps whose records are used for postselection). Builders
cover the three systems studied here: a monitored two-level atom, a fermion
chain under local density monitoring, and an open chain whose monitored bond
modes generate a postselection-induced skin effect.

Conventions fixed here and relied on everywhere else:

* two-level basis order is (|e>, |g>);
* chain sites are numbered 1..L left to right;
* a quadratic-fermion channel stores a normalized mode vector alpha of
  creation coefficients, d'_alpha = sum_i alpha_i c'_i, so the annihilation
  expansion is d_alpha = sum_i conj(alpha_i) c_i and the jump operator is
  L = d'_alpha d_alpha with single-particle coefficient matrix alpha alpha'.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

FEW_LEVEL = "few-level"
QUADRATIC = "quadratic-fermion"

HERMITICITY_TOL = 1e-12
_SCALINGS = ("full-gamma", "eta-gamma")


def _frozen_array(a):
    out = np.array(a, dtype=complex)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class JumpChannel:
    """One monitored decay channel: operator L_mu, rate, detection efficiency.

    For few-level systems `operator` is the full d x d jump matrix; for
    quadratic-fermion systems it is the length-L mode vector alpha (creation
    coefficients) defining L = d'_alpha d_alpha.
    """

    operator: np.ndarray
    rate: float
    efficiency: float
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "operator", _frozen_array(self.operator))
        if self.rate < 0:
            raise ContractError(f"channel rate must be >= 0, got {self.rate}")
        if not 0.0 <= self.efficiency <= 1.0:
            raise ContractError(
                f"channel efficiency must lie in [0, 1], got {self.efficiency}"
            )


@dataclass(frozen=True)
class OpenSystemSpec:
    """Hamiltonian plus jump channels, immutable after construction."""

    hamiltonian: np.ndarray
    channels: tuple
    representation: str
    builder: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        h = _frozen_array(self.hamiltonian)
        object.__setattr__(self, "hamiltonian", h)
        object.__setattr__(self, "channels", tuple(self.channels))
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ContractError(f"hamiltonian must be square, got {h.shape}")
        if np.max(np.abs(h - h.conj().T)) > HERMITICITY_TOL:
            raise ContractError("hamiltonian is not Hermitian to 1e-12")
        if self.representation not in (FEW_LEVEL, QUADRATIC):
            raise ContractError(f"unknown representation {self.representation!r}")
        d = h.shape[0]
        for ch in self.channels:
            op = ch.operator
            if self.representation == FEW_LEVEL:
                if op.shape != (d, d):
                    raise ContractError(
                        f"few-level channel operator must be {d}x{d}, got {op.shape}"
                    )
            else:
                if op.shape != (d,):
                    raise ContractError(
                        f"quadratic channel needs a length-{d} mode vector, got {op.shape}"
                    )
                if abs(np.linalg.norm(op) - 1.0) > 1e-10:
                    raise ContractError("quadratic mode vectors must be normalized")

    @property
    def dimension(self):
        """Hilbert-space dimension (few-level) or lattice length (quadratic)."""
        return self.hamiltonian.shape[0]


@dataclass(frozen=True)
class EffectiveHamiltonian:
    """Non-Hermitian generator H - (i/2) sum_mu s_mu L'_mu L_mu."""

    matrix: np.ndarray
    scaling: str
    representation: str

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen_array(self.matrix))


def build_two_level_atom(J, gamma, eta):
    """Two-level atom with monitored spontaneous emission.

    H = J(|e><g| + |g><e|), jump L = |g><e|, in the fixed basis (|e>, |g>).
    """
    h = np.array([[0.0, J], [J, 0.0]], dtype=complex)
    lower = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)
    channel = JumpChannel(lower, float(gamma), float(eta), label="emission")
    return OpenSystemSpec(
        h,
        (channel,),
        FEW_LEVEL,
        builder="two-level-atom",
        params={"J": float(J), "gamma": float(gamma), "eta": float(eta)},
    )


def _hopping_matrix(L, J, boundary):
    h = np.zeros((L, L), dtype=complex)
    for l in range(L - 1):
        h[l, l + 1] = J
        h[l + 1, l] = J
    if boundary == "periodic" and L >= 3:
        h[0, L - 1] = J
        h[L - 1, 0] = J
    return h


def build_monitored_chain(L, J, gamma, eta, boundary="periodic"):
    """Fermion chain with continuous density monitoring on every site.

    H = J sum_l (a'_l a_{l+1} + h.c.), channels L_l = n_l with uniform rate
    and efficiency. Periodic wrapping is applied for L >= 3; at L <= 2 the
    wrap bond would duplicate an existing one and is dropped.
    """
    if L < 1:
        raise ContractError(f"chain length must be >= 1, got {L}")
    if boundary not in ("periodic", "open"):
        raise ContractError(f"boundary must be periodic or open, got {boundary!r}")
    h = _hopping_matrix(L, J, boundary)
    channels = []
    for l in range(L):
        alpha = np.zeros(L, dtype=complex)
        alpha[l] = 1.0
        channels.append(JumpChannel(alpha, float(gamma), float(eta), label=f"n_{l + 1}"))
    return OpenSystemSpec(
        h,
        tuple(channels),
        QUADRATIC,
        builder="monitored-chain",
        params={
            "L": int(L),
            "J": float(J),
            "gamma": float(gamma),
            "eta": float(eta),
            "boundary": boundary,
        },
    )


def build_skin_chain(L, J, gamma, eta):
    """Open chain whose monitored bond modes induce a postselected skin effect.

    Interior channels L_l = d'_l d_l with d_l = (a_l + i a_{l+1})/sqrt(2) and
    rate gamma for l = 1..L-1; boundary channels L_0 = n_1 and L_L = n_L with
    rate gamma/2. Stored mode vectors are creation coefficients, so the
    interior ones are (e_l - i e_{l+1})/sqrt(2).
    """
    if L < 2:
        raise ContractError(f"skin chain needs L >= 2, got {L}")
    if gamma > J:
        warnings.warn(f"gamma = {gamma} exceeds J = {J}; outside the usual regime")
    h = _hopping_matrix(L, J, "open")
    channels = []
    left = np.zeros(L, dtype=complex)
    left[0] = 1.0
    channels.append(JumpChannel(left, float(gamma) / 2, float(eta), label="n_1"))
    for l in range(L - 1):
        alpha = np.zeros(L, dtype=complex)
        alpha[l] = 1.0 / np.sqrt(2)
        alpha[l + 1] = -1j / np.sqrt(2)
        channels.append(JumpChannel(alpha, float(gamma), float(eta), label=f"d_{l + 1}"))
    right = np.zeros(L, dtype=complex)
    right[L - 1] = 1.0
    channels.append(JumpChannel(right, float(gamma) / 2, float(eta), label=f"n_{L}"))
    return OpenSystemSpec(
        h,
        tuple(channels),
        QUADRATIC,
        builder="skin-chain",
        params={"L": int(L), "J": float(J), "gamma": float(gamma), "eta": float(eta)},
    )


def _channel_scale(channel, scaling):
    if scaling == "full-gamma":
        return channel.rate
    if scaling == "eta-gamma":
        return channel.rate * channel.efficiency
    raise ContractError(f"scaling must be one of {_SCALINGS}, got {scaling!r}")


def quadratic_loss_matrix(spec, scaling):
    """Single-particle coefficient matrix of sum_mu s_mu L'_mu L_mu.

    For quadratic channels L = d'd the coefficient matrix of L'L = d'd is the
    rank-one projector alpha alpha'; the weighted sum is Hermitian positive
    semidefinite.
    """
    if spec.representation != QUADRATIC:
        raise ContractError("quadratic_loss_matrix needs a quadratic-fermion spec")
    L = spec.dimension
    k = np.zeros((L, L), dtype=complex)
    for ch in spec.channels:
        s = _channel_scale(ch, scaling)
        if s != 0.0:
            k += s * np.outer(ch.operator, ch.operator.conj())
    return k


def effective_hamiltonian(spec, scaling):
    """Non-Hermitian H_eff = H - (i/2) sum_mu s_mu L'_mu L_mu.

    `scaling` selects s_mu = gamma_mu ("full-gamma", governing no-jump decay)
    or s_mu = eta_mu gamma_mu ("eta-gamma", governing the postselected
    drift). For quadratic specs the result is the single-particle matrix:
    asymmetric hoppings J -+ (eta gamma)/4 plus the uniform diagonal decay
    -(i/2) eta gamma on the skin chain.
    """
    if scaling not in _SCALINGS:
        raise ContractError(f"scaling must be one of {_SCALINGS}, got {scaling!r}")
    if spec.representation == QUADRATIC:
        m = spec.hamiltonian - 0.5j * quadratic_loss_matrix(spec, scaling)
    else:
        loss = np.zeros_like(spec.hamiltonian)
        for ch in spec.channels:
            s = _channel_scale(ch, scaling)
            if s != 0.0:
                loss += s * (ch.operator.conj().T @ ch.operator)
        m = spec.hamiltonian - 0.5j * loss
    eff = EffectiveHamiltonian(m, scaling, spec.representation)
    if scaling == "full-gamma":
        anti = (eff.matrix - eff.matrix.conj().T) / 2j
        if np.max(np.linalg.eigvalsh((anti + anti.conj().T) / 2)) > 1e-10:
            raise ContractError("effective Hamiltonian gained an amplifying part")
    return eff


def remove_uniform_decay(matrix):
    """Subtract the uniform diagonal (trace/d) I, exposing the traceless part.

    On the skin chain this recovers the pure asymmetric-hopping form of the
    postselected generator; trajectory normalization absorbs the removed
    constant exactly, so both forms produce identical normalized dynamics.
    """
    m = np.asarray(matrix, dtype=complex)
    return m - (np.trace(m) / m.shape[0]) * np.eye(m.shape[0])


_BUILDERS = {
    "two-level-atom": build_two_level_atom,
    "monitored-chain": build_monitored_chain,
    "skin-chain": build_skin_chain,
}


def spec_to_config(spec):
    """Flat key-value form of a builder-produced spec."""
    if not spec.builder:
        raise ContractError("only builder-produced specs have a config form")
    out = {"system": spec.builder}
    out.update(spec.params)
    return out


def spec_from_config(cfg):
    """Rebuild a spec from the flat form produced by spec_to_config."""
    cfg = dict(cfg)
    try:
        name = cfg.pop("system")
    except KeyError:
        raise ContractError("config lacks the 'system' key") from None
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ContractError(
            f"unknown system {name!r}; expected one of {sorted(_BUILDERS)}"
        ) from None
    return builder(**cfg)


def spec_to_json(spec):
    """Canonical JSON form for provenance logging (stable key order)."""
    if spec.builder:
        payload = spec_to_config(spec)
    else:
        payload = {
            "system": "custom",
            "representation": spec.representation,
            "hamiltonian_re": spec.hamiltonian.real.tolist(),
            "hamiltonian_im": spec.hamiltonian.imag.tolist(),
            "channels": [
                {
                    "operator_re": np.asarray(ch.operator).real.tolist(),
                    "operator_im": np.asarray(ch.operator).imag.tolist(),
                    "rate": ch.rate,
                    "efficiency": ch.efficiency,
                    "label": ch.label,
                }
                for ch in spec.channels
            ],
        }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))
