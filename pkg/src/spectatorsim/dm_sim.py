"""Density-matrix Monte-Carlo simulator of emulated entanglement generation.

Each entanglement attempt prepares the electron in an (unbalanced)
superposition, waits t_e plus a stochastic reset delay, and reinitializes
the electron incoherently (coherences dropped, conditional nuclear
evolution kept).  The always-on hyperfine coupling turns the stochastic
electron trajectory into correlated dephasing of the nuclear register,
which the measurement-based or gate-based spectator protocol then
partially reverts.

Representation
--------------
States are density matrices over (nuclear spins x electron), electron as
the least-significant qubit, nuclear spins in register order (spectators
first, memory last in the standard layout).  A qubit with phase phi is
(|0> + exp(i phi)|1>)/sqrt(2); Rz(beta) adds beta to phi.

Electron-conditioned dynamics per nuclear spin (frequencies in kHz, times
in seconds, phases 2*pi*f*t):

    electron |0>:  H0 = 2*pi * omega_l * Iz
    electron |1>:  H1 = 2*pi * [(omega_l - A_par) Iz + A_perp Ix]

All reported quantities live in each spin's rotating frame at the average
conditional frequency f_r = omega_l - A_par/2; the frame rotation (with
echo sign bookkeeping) is applied when entering a protocol or reading out.

Trajectories are independent; the only stochastic elements are the reset
delay tau ~ Exp(tau_d) censored at t_i and the spectator readout outcomes.
The batched engine evolves all trajectories of an ensemble in lock-step
with vectorized linear algebra.
"""

from __future__ import annotations

import cmath
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import phase_dist
from .phase_dist import PhaseGrid, SpectatorMeasurement

log = logging.getLogger(__name__)

KHZ = 1e3
US = 1e-6
NS = 1e-9

ROLES = ("memory", "spectator", "idle")

_HERMITIZE_EVERY = 100   # symmetrize rho to arrest floating-point drift
_MIN_EIGENVALUE = -1e-9  # positivity audit threshold at protocol boundaries

_PAULI_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
_PAULI_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
_PAULI_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
_P_PLUS_Y = 0.5 * np.array([[1.0, -1.0j], [1.0j, 1.0]], dtype=complex)
_P_MINUS_Y = 0.5 * np.array([[1.0, 1.0j], [-1.0j, 1.0]], dtype=complex)

_QUBIT_STATES = {
    "+x": 0.5 * np.array([[1.0, 1.0], [1.0, 1.0]], dtype=complex),
    "-x": 0.5 * np.array([[1.0, -1.0], [-1.0, 1.0]], dtype=complex),
    "+y": 0.5 * np.array([[1.0, -1.0j], [1.0j, 1.0]], dtype=complex),
    "-y": 0.5 * np.array([[1.0, 1.0j], [-1.0j, 1.0]], dtype=complex),
    "0": np.array([[1.0, 0.0], [0.0, 0.0]], dtype=complex),
    "1": np.array([[0.0, 0.0], [0.0, 1.0]], dtype=complex),
}
_QUBIT_STATES["+z"] = _QUBIT_STATES["0"]
_QUBIT_STATES["-z"] = _QUBIT_STATES["1"]


class CorruptedStateError(RuntimeError):
    """A density matrix violated its trace/Hermiticity/positivity invariants."""


# ---------------------------------------------------------------------------
# Configuration types


@dataclass(frozen=True)
class NuclearSpinSpec:
    """One nuclear spin: label, hyperfine couplings (kHz), and role."""

    label: str
    a_par_khz: float
    a_perp_khz: float
    role: str = "spectator"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")


@dataclass(frozen=True)
class Register:
    """Ordered nuclear-spin register; spectator order is readout order.

    Capped at 3 nuclei (total dimension 16 with the electron) unless
    ``max_nuclei`` is raised, up to 5 (dimension 64, ~16x the cost).
    """

    spins: tuple[NuclearSpinSpec, ...]
    max_nuclei: int = 3

    def __post_init__(self):
        spins = tuple(self.spins)
        object.__setattr__(self, "spins", spins)
        labels = [s.label for s in spins]
        if len(set(labels)) != len(labels):
            raise ValueError("spin labels must be unique")
        if self.max_nuclei > 5:
            raise ValueError("register is limited to 5 nuclei (dimension 64)")
        if not 1 <= len(spins) <= self.max_nuclei:
            raise ValueError(f"register must hold 1..{self.max_nuclei} spins")
        if sum(s.role == "memory" for s in spins) != 1:
            raise ValueError("register must contain exactly one memory spin")

    @property
    def n_spins(self) -> int:
        return len(self.spins)

    @property
    def dim(self) -> int:
        return 2 ** self.n_spins

    @property
    def memory_index(self) -> int:
        return next(i for i, s in enumerate(self.spins) if s.role == "memory")

    @property
    def memory(self) -> NuclearSpinSpec:
        return self.spins[self.memory_index]

    @property
    def spectator_indices(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.spins) if s.role == "spectator")

    @property
    def idle_indices(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.spins) if s.role == "idle")

    def g_of(self, index: int) -> float:
        """Hyperfine ratio A_par(spin)/A_par(memory), signed."""
        return self.spins[index].a_par_khz / self.memory.a_par_khz

    def index_of(self, label: str) -> int:
        return next(i for i, s in enumerate(self.spins) if s.label == label)


def standard_register(max_nuclei: int = 3) -> Register:
    """C0 memory with C1/C2 spectators ({24.4, 24.8}, {-36.3, 26.6},
    {20.6, 41.5} kHz), spectators listed first in readout order."""
    return Register(spins=(
        NuclearSpinSpec("C1", -36.3, 26.6, "spectator"),
        NuclearSpinSpec("C2", 20.6, 41.5, "spectator"),
        NuclearSpinSpec("C0", 24.4, 24.8, "memory"),
    ), max_nuclei=max_nuclei)


@dataclass(frozen=True)
class SequenceConfig:
    """Timing and electron parameters of one emulated entanglement attempt.

    tau_d_ns = 0 degenerates to a deterministic, instantaneous reset.
    alpha is the electron |0> amplitude of the post-pulse superposition;
    |alpha|^2 = 1/2 corresponds to the balanced pi/2 pulse.
    """

    t_e_us: float
    t_i_us: float = 0.5
    tau_d_ns: float = 92.0
    omega_l_khz: float = 432.0  # placeholder from the ~2.3 us period; configurable
    alpha: complex = 1.0 / math.sqrt(2.0)
    echo_at_half: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.t_e_us > 0.0 or not self.t_i_us > 0.0:
            raise ValueError("t_e_us and t_i_us must be positive")
        if self.tau_d_ns < 0.0:
            raise ValueError("tau_d_ns must be nonnegative")
        if abs(self.alpha) > 1.0 + 1e-12:
            raise ValueError("|alpha| must be <= 1")

    @property
    def t_e_s(self) -> float:
        return self.t_e_us * US

    @property
    def t_i_s(self) -> float:
        return self.t_i_us * US

    @property
    def tau_d_s(self) -> float:
        return self.tau_d_ns * NS

    @property
    def p0(self) -> float:
        return abs(self.alpha) ** 2


@dataclass(frozen=True)
class ReadoutModel:
    """Single-shot readout fidelity matrix, column-normalized.

    f_ij is the probability of reporting outcome j when the projected
    state was i (0 = bright = +Y = electron m_s 0).  With
    ``spinflip_dephases`` the misread contributions are completely
    dephased on the nuclear register (off-diagonals dropped), modeling the
    unknown phase imparted by electron spin flips during a long readout.
    """

    f00: float = 1.0
    f01: float = 0.0
    f10: float = 0.0
    f11: float = 1.0
    spinflip_dephases: bool = False

    def __post_init__(self):
        for v in (self.f00, self.f01, self.f10, self.f11):
            if not 0.0 <= v <= 1.0:
                raise ValueError("readout fidelities must lie in [0, 1]")
        if abs(self.f00 + self.f01 - 1.0) > 1e-12 or abs(self.f10 + self.f11 - 1.0) > 1e-12:
            raise ValueError("readout matrix columns must sum to 1")

    @property
    def is_ideal(self) -> bool:
        return self.f00 == 1.0 and self.f11 == 1.0


IDEAL_READOUT = ReadoutModel()
LOW_POWER_SSRO = ReadoutModel(f00=0.88, f01=0.12, f10=0.0, f11=1.0)


@dataclass(frozen=True)
class Protocol:
    """What happens after the entanglement attempts.

    kind "none" reads the memory directly; "measurement" reads k
    spectators via the electron with Bayesian basis choice and optional
    feedforward; "gate" maps each spectator to the electron with a
    controlled flip and rephases during calibrated waits delta_t.
    """

    kind: str = "none"
    k: int = 0
    readout: ReadoutModel = IDEAL_READOUT
    feedforward: bool = True
    policy: str = "perpendicular"
    delta_ts_s: tuple[float, ...] | None = None
    flip_branches: tuple[int, ...] | None = None
    idle_echo: bool = True

    def __post_init__(self):
        if self.kind not in ("none", "measurement", "gate"):
            raise ValueError(f"unknown protocol kind {self.kind!r}")
        if self.kind == "none" and self.k != 0:
            raise ValueError("protocol 'none' cannot use spectators")
        if self.k < 0:
            raise ValueError("k must be nonnegative")

    @classmethod
    def none(cls) -> "Protocol":
        return cls()

    @classmethod
    def measurement(cls, k: int, readout: ReadoutModel = IDEAL_READOUT,
                    feedforward: bool = True, policy: str = "perpendicular") -> "Protocol":
        return cls(kind="measurement", k=k, readout=readout,
                   feedforward=feedforward, policy=policy)

    @classmethod
    def gate(cls, k: int, delta_ts_s=None, flip_branches=None,
             idle_echo: bool = True) -> "Protocol":
        return cls(kind="gate", k=k,
                   delta_ts_s=None if delta_ts_s is None else tuple(delta_ts_s),
                   flip_branches=None if flip_branches is None else tuple(flip_branches),
                   idle_echo=idle_echo)


# ---------------------------------------------------------------------------
# Timing helpers: censored-exponential reset moments and effective dephasing


def reset_time_moments(cfg: SequenceConfig) -> tuple[float, float]:
    """(mean, variance) of tau = min(Exp(tau_d), t_i) in seconds."""
    td, ti = cfg.tau_d_s, cfg.t_i_s
    if td == 0.0:
        return 0.0, 0.0
    decay = math.exp(-ti / td)
    m1 = td * (1.0 - decay)
    m2 = 2.0 * td * td - decay * (2.0 * ti * td + 2.0 * td * td)
    return m1, m2 - m1 * m1


def effective_a_par_te(a_par_khz: float, cfg: SequenceConfig) -> float:
    """Per-attempt phase standard deviation seen by a spin with coupling A_par.

    The electron projection contributes +-pi*A*(t_e + tau) and the random
    reset delay shifts the deterministic tail by -pi*A*tau, so the
    per-attempt variance is (pi A)^2 [(t_e + E[tau])^2 + 2 Var(tau)].
    """
    m1, var = reset_time_moments(cfg)
    a_hz = abs(a_par_khz) * KHZ
    return math.pi * a_hz * math.sqrt((cfg.t_e_s + m1) ** 2 + 2.0 * var)


def te_us_for_step(a_par_khz: float, step: float, t_i_us: float = 0.5,
                   tau_d_ns: float = 92.0) -> float:
    """Wait t_e (us) giving the target effective per-attempt step."""
    probe = SequenceConfig(t_e_us=1.0, t_i_us=t_i_us, tau_d_ns=tau_d_ns)
    m1, var = reset_time_moments(probe)
    a_hz = abs(a_par_khz) * KHZ
    inner = (step / (math.pi * a_hz)) ** 2 - 2.0 * var
    if inner <= m1 * m1:
        raise ValueError("target step is below the reset-noise floor for this coupling")
    return (math.sqrt(inner) - m1) / US


def predicted_prior_params(register: Register, cfg: SequenceConfig,
                           n_rea: int) -> tuple[float, float]:
    """(mean, sigma) of the memory-phase distribution the protocol assumes.

    With the echo at n_rea//2 the deterministic reset phase cancels except
    for an odd leftover attempt; the width grows as sqrt(n_rea) times the
    effective per-attempt step.
    """
    mem = register.memory
    a_hz = mem.a_par_khz * KHZ
    m1, _ = reset_time_moments(cfg)
    sigma = math.sqrt(n_rea) * effective_a_par_te(mem.a_par_khz, cfg)
    unbalanced = (n_rea - 2 * (n_rea // 2)) if cfg.echo_at_half else n_rea
    mu = unbalanced * math.pi * a_hz * (cfg.t_i_s - m1)
    return mu, sigma


# ---------------------------------------------------------------------------
# Low-level linear algebra on batched nuclear density matrices (B, dn, dn)


def _bit_vector(n_spins: int, pos: int) -> np.ndarray:
    """bit of spin `pos` (0 = first/most significant) for each basis index."""
    idx = np.arange(2 ** n_spins)
    return (idx >> (n_spins - 1 - pos)) & 1


def _embed_1q(op: np.ndarray, n_spins: int, pos: int) -> np.ndarray:
    mats = [np.eye(2, dtype=complex)] * n_spins
    mats[pos] = op
    out = mats[0]
    for m in mats[1:]:
        out = np.kron(out, m)
    return out


def _apply_diag(rho: np.ndarray, d: np.ndarray) -> np.ndarray:
    """U rho U^dag for diagonal U; d broadcasts over the batch axis."""
    d = np.asarray(d)
    if d.ndim == 1:
        return rho * np.outer(d, d.conj())
    return rho * (d[:, :, None] * d.conj()[:, None, :])


def _apply_full(rho: np.ndarray, u: np.ndarray) -> np.ndarray:
    return u @ rho @ np.swapaxes(u, -1, -2).conj()


def _apply_x(rho: np.ndarray, n_spins: int, positions) -> np.ndarray:
    """Pi pulse about X on the given spins: a basis permutation."""
    mask = 0
    for pos in positions:
        mask |= 1 << (n_spins - 1 - pos)
    perm = np.arange(2 ** n_spins) ^ mask
    return rho[..., perm, :][..., :, perm]


def _rz_diag(n_spins: int, pos: int, angle) -> np.ndarray:
    """Diagonal of Rz(angle) on one spin: adds `angle` to its phase.

    angle may be scalar or a batch vector; returns (dn,) or (B, dn).
    """
    bit = _bit_vector(n_spins, pos)
    angle = np.asarray(angle, dtype=float)
    return np.exp(1j * angle[..., None] * bit)


def _dephase(rho: np.ndarray) -> np.ndarray:
    """Complete dephasing of the nuclear register: keep the diagonal."""
    eye = np.eye(rho.shape[-1])
    return rho * eye


def _hermitize(rho: np.ndarray) -> np.ndarray:
    return 0.5 * (rho + np.swapaxes(rho, -1, -2).conj())


def _z_sum(n_spins: int) -> np.ndarray:
    """Sum over spins of (+1 for bit 0, -1 for bit 1), per basis index."""
    total = np.zeros(2 ** n_spins)
    for pos in range(n_spins):
        total += 1.0 - 2.0 * _bit_vector(n_spins, pos)
    return total


# ---------------------------------------------------------------------------
# Propagators


def build_propagators(spin: NuclearSpinSpec, omega_l_khz: float, t_s):
    """Single-spin conditional propagators (U0, U1) for duration t_s.

    U0 = exp(-i 2 pi omega_l t Iz); U1 = exp(-i 2 pi [(omega_l - A_par) Iz
    + A_perp Ix] t).  t_s may be a scalar or an array (batched in the
    leading axes); 2x2 Pauli exponentials, exactly unitary.
    """
    t = np.asarray(t_s, dtype=float)
    if np.any(t < 0):
        raise ValueError("duration must be nonnegative")
    w = omega_l_khz * KHZ
    phase0 = math.pi * w * t
    u0 = np.zeros(t.shape + (2, 2), dtype=complex)
    u0[..., 0, 0] = np.exp(-1j * phase0)
    u0[..., 1, 1] = np.exp(1j * phase0)

    f1 = (omega_l_khz - spin.a_par_khz) * KHZ
    b = spin.a_perp_khz * KHZ
    omega = math.hypot(f1, b)
    theta = math.pi * omega * t
    nz = f1 / omega if omega > 0 else 0.0
    nx = b / omega if omega > 0 else 0.0
    c, s = np.cos(theta), np.sin(theta)
    u1 = np.zeros(t.shape + (2, 2), dtype=complex)
    u1[..., 0, 0] = c - 1j * s * nz
    u1[..., 1, 1] = c + 1j * s * nz
    u1[..., 0, 1] = -1j * s * nx
    u1[..., 1, 0] = -1j * s * nx
    if np.ndim(t_s) == 0:
        return u0[()], u1[()]
    return u0, u1


def precession_tilt_deg(spin: NuclearSpinSpec, omega_l_khz: float) -> float:
    """Tilt of the electron-|1> precession axis away from Z, in degrees."""
    return math.degrees(math.atan2(abs(spin.a_perp_khz),
                                   abs(omega_l_khz - spin.a_par_khz)))


class _RegisterKinematics:
    """Precomputed index machinery and propagator builders for a register."""

    def __init__(self, register: Register, omega_l_khz: float):
        self.register = register
        self.omega_l_khz = omega_l_khz
        self.n = register.n_spins
        self.dn = register.dim
        self.z_sum = _z_sum(self.n)
        self.bit = [_bit_vector(self.n, pos) for pos in range(self.n)]
        self.all_perp_zero = all(s.a_perp_khz == 0.0 for s in register.spins)
        self.f_r_hz = np.array([(omega_l_khz - s.a_par_khz / 2.0) * KHZ
                                for s in register.spins])

    def u0_diag(self, t_s) -> np.ndarray:
        """Diagonal of the all-|0>-electron register propagator."""
        t = np.asarray(t_s, dtype=float)
        w = self.omega_l_khz * KHZ
        return np.exp(-1j * math.pi * w * t[..., None] * self.z_sum)

    def u1_register(self, t_s):
        """('diag', (B, dn)) when every A_perp is 0, else ('full', (B, dn, dn))."""
        t = np.atleast_1d(np.asarray(t_s, dtype=float))
        if self.all_perp_zero:
            phases = np.zeros(t.shape + (self.dn,))
            for pos, spin in enumerate(self.register.spins):
                f1 = (self.omega_l_khz - spin.a_par_khz) * KHZ
                sign = 1.0 - 2.0 * self.bit[pos]
                phases += math.pi * f1 * t[..., None] * sign
            return "diag", np.exp(-1j * phases)
        out = None
        for spin in self.register.spins:
            _, u1 = build_propagators(spin, self.omega_l_khz, t)
            out = u1 if out is None else np.einsum("tab,tcd->tacbd", out, u1).reshape(
                t.size, out.shape[-1] * 2, out.shape[-1] * 2)
        return "full", out

    def frame_diag(self, frame_tau: np.ndarray) -> np.ndarray:
        """Diagonal Rz absorbing the frame phases 2 pi f_r tau per spin."""
        angles = -2.0 * math.pi * self.f_r_hz * frame_tau
        total = np.zeros(self.dn)
        for pos in range(self.n):
            total = total + angles[pos] * self.bit[pos]
        return np.exp(1j * total)


def _attempt_block(rho: np.ndarray, kin: _RegisterKinematics, cfg: SequenceConfig,
                   tau_s: np.ndarray) -> np.ndarray:
    """One entanglement attempt on a batch of nuclear density matrices.

    Evolve T = t_e + tau in electron superposition, drop electron
    coherences at the reset (populations p0 / 1-p0 propagated under the
    two conditional propagators), then evolve T0 = t_i - tau with the
    electron back in |0>.
    """
    t_total = cfg.t_e_s + tau_s
    t_rest = cfg.t_i_s - tau_s
    p0 = cfg.p0
    branch0 = _apply_diag(rho, kin.u0_diag(t_total))
    kind, u1 = kin.u1_register(t_total)
    if kind == "diag":
        branch1 = _apply_diag(rho, u1)
    else:
        branch1 = _apply_full(rho, u1)
    mixed = p0 * branch0 + (1.0 - p0) * branch1
    return _apply_diag(mixed, kin.u0_diag(t_rest))


# ---------------------------------------------------------------------------
# Public single-trajectory state and operations


@dataclass(frozen=True)
class DensityState:
    """Joint density matrix of the register plus electron (dim 2^(n+1)).

    frame_tau_s holds each spin's signed elapsed time pending frame
    removal; x_parity counts echo pi-pulses.  Both are bookkeeping for the
    rotating-frame transform applied at readout.
    """

    matrix: np.ndarray
    register: Register
    omega_l_khz: float
    frame_tau_s: np.ndarray = field(default=None)
    x_parity: np.ndarray = field(default=None)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        dim = 2 * self.register.dim
        if m.shape != (dim, dim):
            raise ValueError(f"matrix must be {dim}x{dim}")
        object.__setattr__(self, "matrix", m)
        n = self.register.n_spins
        ft = np.zeros(n) if self.frame_tau_s is None else np.asarray(self.frame_tau_s, float)
        xp = np.zeros(n, int) if self.x_parity is None else np.asarray(self.x_parity, int)
        object.__setattr__(self, "frame_tau_s", ft)
        object.__setattr__(self, "x_parity", xp)

    def validate(self, tol: float = 1e-10) -> None:
        m = self.matrix
        if abs(np.trace(m) - 1.0) > tol:
            raise CorruptedStateError(f"trace drifted to {np.trace(m)!r}")
        if np.max(np.abs(m - m.conj().T)) > tol:
            raise CorruptedStateError("matrix is not Hermitian")

    def check_positivity(self, tol: float = -_MIN_EIGENVALUE) -> None:
        lo = float(np.linalg.eigvalsh(self.matrix)[0])
        if lo < -tol:
            raise CorruptedStateError(f"negative eigenvalue {lo!r}")

    def nuclear_matrix(self) -> np.ndarray:
        """Nuclear-only block, requiring the electron in |0><0|."""
        pop1 = float(np.trace(self.matrix[1::2, 1::2]).real)
        if pop1 > 1e-9:
            raise CorruptedStateError(f"electron not reset: |1> population {pop1!r}")
        return np.array(self.matrix[::2, ::2])

    def electron_population(self) -> float:
        return float(np.trace(self.matrix[1::2, 1::2]).real)


def _attach_electron(rho_n: np.ndarray) -> np.ndarray:
    dn = rho_n.shape[-1]
    out = np.zeros(rho_n.shape[:-2] + (2 * dn, 2 * dn), dtype=complex)
    out[..., ::2, ::2] = rho_n
    return out


def _trace_out_electron(rho_j: np.ndarray) -> np.ndarray:
    return rho_j[..., ::2, ::2] + rho_j[..., 1::2, 1::2]


def initial_state(register: Register, cfg: SequenceConfig,
                  initial_states: Mapping[str, str] | None = None) -> DensityState:
    """Product state of the register (default all |+X>) with electron |0>."""
    overrides = {k.lower(): v for k, v in (initial_states or {}).items()}
    rho = None
    for spin in register.spins:
        name = overrides.get(spin.label.lower(), "+x").lower()
        if name not in _QUBIT_STATES:
            raise ValueError(f"unknown qubit state {name!r}")
        q = _QUBIT_STATES[name]
        rho = q if rho is None else np.kron(rho, q)
    return DensityState(matrix=_attach_electron(rho), register=register,
                        omega_l_khz=cfg.omega_l_khz)


def rotate_z(state: DensityState, index: int, angle: float) -> DensityState:
    """Rz on one nuclear spin (adds `angle` to its phase)."""
    d = _rz_diag(state.register.n_spins, index, angle)
    d_joint = np.repeat(d, 2)
    return replace(state, matrix=_apply_diag(state.matrix, d_joint))


def absorb_frame(state: DensityState) -> DensityState:
    """Apply the pending rotating-frame Rz on every spin and clear it."""
    kin = _RegisterKinematics(state.register, state.omega_l_khz)
    d = kin.frame_diag(state.frame_tau_s)
    m = _apply_diag(state.matrix, np.repeat(d, 2))
    return replace(state, matrix=m, frame_tau_s=np.zeros(state.register.n_spins))


def entanglement_attempt(state: DensityState, cfg: SequenceConfig, rng) -> DensityState:
    """One emulated entanglement attempt (pulse, wait, stochastic reset)."""
    state.validate()
    rho_n = state.nuclear_matrix()[None]
    kin = _RegisterKinematics(state.register, cfg.omega_l_khz)
    if cfg.tau_d_s > 0.0:
        tau = np.minimum(np.asarray(rng.exponential(cfg.tau_d_s, size=1)), cfg.t_i_s)
    else:
        tau = np.zeros(1)
    rho_n = _attempt_block(rho_n, kin, cfg, tau)
    return replace(state, matrix=_attach_electron(rho_n[0]),
                   frame_tau_s=state.frame_tau_s + (cfg.t_e_s + cfg.t_i_s))


def _measure_batch(rho: np.ndarray, n_spins: int, pos: int, model: ReadoutModel,
                   uniforms: np.ndarray):
    """Y-basis readout of one spin with the error model; returns (outcomes, rho)."""
    p_plus = _embed_1q(_P_PLUS_Y, n_spins, pos)
    p_minus = _embed_1q(_P_MINUS_Y, n_spins, pos)
    rho_b = _apply_full(rho, p_plus[None])
    rho_d = _apply_full(rho, p_minus[None])
    pb = np.einsum("bii->b", rho_b).real
    pd = np.einsum("bii->b", rho_d).real
    if model.spinflip_dephases:
        mis_b, mis_d = _dephase(rho_d), _dephase(rho_b)
    else:
        mis_b, mis_d = rho_d, rho_b
    num_bright = model.f00 * rho_b + model.f10 * mis_b
    num_dark = model.f11 * rho_d + model.f01 * mis_d
    q_bright = model.f00 * pb + model.f10 * pd
    q_dark = model.f01 * pb + model.f11 * pd
    if np.any(q_bright < 1e-15) or np.any(q_dark < 1e-15):
        log.warning("spectator outcome with ~zero probability; forcing the opposite")
    outcomes = (uniforms >= q_bright).astype(int)
    sel = outcomes[:, None, None]
    numer = np.where(sel == 0, num_bright, num_dark)
    denom = np.where(outcomes == 0, np.maximum(q_bright, 1e-300),
                     np.maximum(q_dark, 1e-300))
    return outcomes, numer / denom[:, None, None]


def measure_spectator(state: DensityState, k: int, model: ReadoutModel,
                      rng) -> tuple[int, DensityState]:
    """Read out spectator k (already rotated into the Y basis) via the electron."""
    state.validate()
    rho_n = state.nuclear_matrix()[None]
    u = np.asarray(rng.random(size=1))
    outcomes, rho_n = _measure_batch(rho_n, state.register.n_spins, k, model, u)
    return int(outcomes[0]), replace(state, matrix=_attach_electron(rho_n[0]))


def _gate_step_batch(rho_n: np.ndarray, kin: _RegisterKinematics, pos: int,
                     delta_t_s: float, flip_branch: int, idle_echo: bool):
    """Controlled flip on spectator `pos`, conditional wait, electron reset.

    The wait is reported in the electron-|0> conditioned frame (the known
    deterministic rotation is absorbed here), so the unflipped branch
    stays put and the flipped branch carries the full conditional phase
    g_i * phi_c with phi_c = -2 pi A_par,mem delta_t.  Idle spins echoed
    at delta_t/2 decouple entirely and need no frame correction.
    """
    if flip_branch not in (+1, -1):
        raise ValueError("flip_branch must be +1 (flip on -Y) or -1 (flip on +Y)")
    n, dn = kin.n, kin.dn
    ctrl = _P_MINUS_Y if flip_branch == +1 else _P_PLUS_Y
    p_ctrl = _embed_1q(ctrl, n, pos)
    cnot = (np.kron(p_ctrl, _PAULI_X) + np.kron(np.eye(dn) - p_ctrl, np.eye(2)))
    rho_j = _attach_electron(rho_n)
    rho_j = _apply_full(rho_j, cnot[None])

    idles = kin.register.idle_indices if idle_echo else ()
    segments = [delta_t_s / 2.0, delta_t_s / 2.0] if idles else [delta_t_s]
    for seg_index, seg in enumerate(segments):
        if seg > 0.0:
            d0 = kin.u0_diag(np.asarray(seg))
            kind, u1 = kin.u1_register(seg)
            if kind == "diag":
                diag_joint = np.empty(2 * dn, dtype=complex)
                diag_joint[::2] = d0
                diag_joint[1::2] = u1[0]
                rho_j = _apply_diag(rho_j, diag_joint)
            else:
                u_joint = np.zeros((2 * dn, 2 * dn), dtype=complex)
                u_joint[::2, ::2] = np.diag(d0)
                u_joint[1::2, 1::2] = u1[0]
                rho_j = _apply_full(rho_j, u_joint[None])
        if idles and seg_index == 0:
            # echo acts on the nuclear spins only; electron bit untouched
            mask = 0
            for p in idles:
                mask |= 1 << (n - p)  # +1 shift: electron occupies the LSB
            perm = np.arange(2 * dn) ^ mask
            rho_j = rho_j[..., perm, :][..., :, perm]
    rho_n_out = _trace_out_electron(rho_j)
    # absorb the deterministic |0>-branch rotation 2 pi omega_l dt
    angles = np.zeros(n)
    for p in range(n):
        if p not in idles:
            angles[p] = -2.0 * math.pi * kin.omega_l_khz * KHZ * delta_t_s
    diag = np.ones(dn, dtype=complex)
    for p in range(n):
        if angles[p] != 0.0:
            diag = diag * np.exp(1j * angles[p] * kin.bit[p])
    return _apply_diag(rho_n_out, diag)


def gate_based_step(state: DensityState, k: int, delta_t_s: float,
                    flip_branch: int, idle_echo: bool = True) -> DensityState:
    """One gate-based spectator use: map phase to electron, rephase, reset."""
    state.validate()
    if delta_t_s < 0.0:
        raise ValueError("delta_t_s must be nonnegative")
    kin = _RegisterKinematics(state.register, state.omega_l_khz)
    rho_n = state.nuclear_matrix()[None]
    rho_n = _gate_step_batch(rho_n, kin, k, delta_t_s, flip_branch, idle_echo)
    parity = state.x_parity.copy()
    if idle_echo:
        for pos in state.register.idle_indices:
            parity[pos] += 1
    return replace(state, matrix=_attach_electron(rho_n[0]), x_parity=parity)


def bloch_of_memory(state: DensityState) -> tuple[float, float, float, float, float]:
    """(x, y, z, BVL, fidelity) of the memory qubit in its rotating frame."""
    reg = state.register
    pos = reg.memory_index
    n_q = reg.n_spins + 1  # electron included as the last qubit
    x = float(np.trace(state.matrix @ _embed_1q(_PAULI_X, n_q, pos)).real)
    y = float(np.trace(state.matrix @ _embed_1q(_PAULI_Y, n_q, pos)).real)
    z = float(np.trace(state.matrix @ _embed_1q(_PAULI_Z, n_q, pos)).real)
    f_r = (state.omega_l_khz - reg.memory.a_par_khz / 2.0) * KHZ
    coherence = (x + 1j * y) * cmath.exp(-1j * 2.0 * math.pi * f_r * state.frame_tau_s[pos])
    x, y = coherence.real, coherence.imag
    if state.x_parity[pos] % 2:
        y, z = -y, -z
    bvl = math.sqrt(x * x + y * y + z * z)
    return x, y, z, bvl, 0.5 * bvl + 0.5


# ---------------------------------------------------------------------------
# Protocol plans (model-side, trajectory independent)


def _model_prior(register: Register, cfg: SequenceConfig, n_rea: int) -> PhaseGrid:
    mu, sigma = predicted_prior_params(register, cfg, n_rea)
    return phase_dist.gaussian_prior(max(sigma, 1e-6), mean=mu)


@dataclass(frozen=True)
class MeasurementPlan:
    """Per-history readout angles and feedforward rotations for K readouts."""

    spin_indices: tuple[int, ...]
    g_values: tuple[float, ...]
    thetas: tuple[np.ndarray, ...]       # level j: shape (2**j,)
    phi_cs: tuple[np.ndarray, ...]       # level j: shape (2**j, 2)


def measurement_plan(register: Register, cfg: SequenceConfig, n_rea: int,
                     k: int, policy: str = "perpendicular",
                     feedforward: bool = True) -> MeasurementPlan:
    """Walk the outcome tree on the Bayesian grid model.

    Readout angles follow the configured policy on the running posterior;
    after each outcome the model grid is shifted by the applied
    compensation so later angles are computed in the corrected frame.
    """
    spect = register.spectator_indices
    if k > len(spect):
        raise ValueError(f"protocol requests {k} spectators, register has {len(spect)}")
    indices = spect[:k]
    gs = tuple(register.g_of(i) for i in indices)
    grids = {(): _model_prior(register, cfg, n_rea)}
    thetas, phi_cs = [], []
    for level, g in enumerate(gs):
        t_level = np.zeros(2 ** level)
        c_level = np.zeros((2 ** level, 2))
        next_grids = {}
        for hist, grid in grids.items():
            theta = phase_dist.policy_angle(grid, g, policy)
            comp = phase_dist.optimal_compensation(grid, theta, g) if feedforward else (0.0, 0.0)
            h_int = int("".join(map(str, hist)), 2) if hist else 0
            t_level[h_int] = theta
            c_level[h_int] = comp
            for outcome in (0, 1):
                try:
                    post, _ = phase_dist.bayes_update(
                        grid, SpectatorMeasurement(g, theta, outcome))
                except phase_dist.ImpossibleOutcomeError:
                    post = grid
                if feedforward:
                    post = phase_dist.shift_grid(post, comp[outcome])
                next_grids[hist + (outcome,)] = post
        grids = next_grids
        thetas.append(t_level)
        phi_cs.append(c_level)
    return MeasurementPlan(spin_indices=indices, g_values=gs,
                           thetas=tuple(thetas), phi_cs=tuple(phi_cs))


@dataclass(frozen=True)
class GatePlan:
    spin_indices: tuple[int, ...]
    g_values: tuple[float, ...]
    delta_ts_s: tuple[float, ...]
    flip_branches: tuple[int, ...]
    phi_cs: tuple[float, ...]  # memory-phase shift per step, -2 pi A_mem dt


def _calibrate_delta_t(grid: PhaseGrid, g_k: float, a_mem_hz: float,
                       flip_branch: int) -> float:
    """Scan the wait time for maximal posterior sharpness, then refine."""

    def sharp(dt):
        phi_c = -2.0 * math.pi * a_mem_hz * dt
        return phase_dist.phase_stats(
            phase_dist.gate_posterior(grid, g_k, phi_c, flip_branch)).sharpness

    dt_max = 0.5 / abs(a_mem_hz)  # memory-phase gap of pi
    dts = np.linspace(0.0, dt_max, 129)
    values = [sharp(dt) for dt in dts]
    best = int(np.argmax(values))
    lo = dts[max(best - 1, 0)]
    hi = dts[min(best + 1, len(dts) - 1)]
    inv_gr = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - inv_gr * (hi - lo)
    d = lo + inv_gr * (hi - lo)
    fc, fd = sharp(c), sharp(d)
    while hi - lo > 1e-12 + 1e-6 * dt_max:
        if fc > fd:
            hi, d, fd = d, c, fc
            c = hi - inv_gr * (hi - lo)
            fc = sharp(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + inv_gr * (hi - lo)
            fd = sharp(d)
    return 0.5 * (lo + hi)


def gate_plan(register: Register, cfg: SequenceConfig, n_rea: int, k: int,
              delta_ts_s=None, flip_branches=None) -> GatePlan:
    """Per-spectator calibrated waits for the gate-based protocol.

    The wait sign convention ties the memory-phase shift to
    phi_c = -2 pi A_par,mem delta_t, so the rephasing flip branch is +Y
    (k+) for positive memory coupling and -Y (k-) for negative.
    """
    spect = register.spectator_indices
    if k > len(spect):
        raise ValueError(f"protocol requests {k} spectators, register has {len(spect)}")
    indices = spect[:k]
    gs = tuple(register.g_of(i) for i in indices)
    a_mem_hz = register.memory.a_par_khz * KHZ
    default_branch = -1 if a_mem_hz > 0 else +1
    grid = _model_prior(register, cfg, n_rea)
    dts, branches, phis = [], [], []
    for j, (idx, g) in enumerate(zip(indices, gs)):
        branch = (flip_branches[j] if flip_branches is not None else default_branch)
        if delta_ts_s is not None:
            dt = float(delta_ts_s[j])
        else:
            dt = _calibrate_delta_t(grid, g, a_mem_hz, branch)
        phi_c = -2.0 * math.pi * a_mem_hz * dt
        grid = phase_dist.gate_posterior(grid, g, phi_c, branch)
        dts.append(dt)
        branches.append(branch)
        phis.append(phi_c)
    return GatePlan(spin_indices=indices, g_values=gs, delta_ts_s=tuple(dts),
                    flip_branches=tuple(branches), phi_cs=tuple(phis))


# ---------------------------------------------------------------------------
# Sequence runner


@dataclass(frozen=True)
class ProtocolOutcome:
    """Record of one trajectory: syndrome, memory Bloch data, corrections."""

    syndrome: tuple[int, ...]
    bloch: tuple[float, float, float]
    bvl: float
    fidelity: float
    applied_corrections: tuple[float, ...]


@dataclass(frozen=True)
class EnsembleOutcome:
    """Trajectory-averaged Bloch components with standard errors.

    BVL and fidelity are computed from the averaged Bloch vector, matching
    how ensemble expectation values are measured.
    """

    bloch: tuple[float, float, float]
    stderr: tuple[float, float, float]
    bvl: float
    fidelity: float
    n_traj: int
    seed: int
    by_syndrome: dict[tuple[int, ...], tuple[int, float, float, float]] | None = None


def _memory_bloch_batch(rho_n: np.ndarray, kin: _RegisterKinematics,
                        frame_tau: np.ndarray, parity: np.ndarray, pos: int):
    x_op = _embed_1q(_PAULI_X, kin.n, pos)
    y_op = _embed_1q(_PAULI_Y, kin.n, pos)
    z_op = _embed_1q(_PAULI_Z, kin.n, pos)
    x = np.einsum("bij,ji->b", rho_n, x_op).real
    y = np.einsum("bij,ji->b", rho_n, y_op).real
    z = np.einsum("bij,ji->b", rho_n, z_op).real
    coh = (x + 1j * y) * cmath.exp(-1j * 2.0 * math.pi * kin.f_r_hz[pos] * frame_tau[pos])
    x, y = coh.real, coh.imag
    if parity[pos] % 2:
        y, z = -y, -z
    return x, y, z


def _run_batch(register: Register, cfg: SequenceConfig, n_rea: int,
               protocol: Protocol, n_traj: int, rng,
               initial_states: Mapping[str, str] | None = None,
               audit_positivity: bool = True):
    """Evolve n_traj trajectories in lock-step and execute the protocol."""
    if n_rea < 0:
        raise ValueError("n_rea must be nonnegative")
    kin = _RegisterKinematics(register, cfg.omega_l_khz)
    state0 = initial_state(register, cfg, initial_states)
    rho = np.broadcast_to(state0.nuclear_matrix(), (n_traj, kin.dn, kin.dn)).copy()
    frame_tau = np.zeros(register.n_spins)
    parity = np.zeros(register.n_spins, dtype=int)
    echoed = tuple(range(register.n_spins))  # echo acts on all initialized spins

    echo_after = n_rea // 2
    for attempt in range(n_rea):
        if cfg.echo_at_half and attempt == echo_after:
            rho = _apply_x(rho, kin.n, echoed)
            frame_tau = -frame_tau
            parity = parity + 1
        if cfg.tau_d_s > 0.0:
            tau = np.minimum(np.asarray(rng.exponential(cfg.tau_d_s, size=n_traj)),
                             cfg.t_i_s)
        else:
            tau = np.zeros(n_traj)
        rho = _attempt_block(rho, kin, cfg, tau)
        frame_tau = frame_tau + (cfg.t_e_s + cfg.t_i_s)
        if (attempt + 1) % _HERMITIZE_EVERY == 0:
            rho = _hermitize(rho)

    # Enter the logical frame before the protocol: absorb pending frame
    # phase and undo the echo flips in software.
    rho = _apply_diag(rho, kin.frame_diag(frame_tau))
    frame_tau = np.zeros(register.n_spins)
    odd = [p for p in range(register.n_spins) if parity[p] % 2]
    if odd:
        rho = _apply_x(rho, kin.n, odd)
        parity = np.zeros(register.n_spins, dtype=int)
    if audit_positivity:
        lo = np.linalg.eigvalsh(rho).min()
        if lo < _MIN_EIGENVALUE:
            raise CorruptedStateError(f"negative eigenvalue {lo!r} entering protocol")

    syndrome = np.zeros((n_traj, 0), dtype=int)
    corrections = np.zeros((n_traj, 0))

    if protocol.kind == "measurement" and protocol.k > 0:
        plan = measurement_plan(register, cfg, n_rea, protocol.k,
                                protocol.policy, protocol.feedforward)
        syndrome = np.zeros((n_traj, protocol.k), dtype=int)
        corrections = np.zeros((n_traj, protocol.k))
        hist = np.zeros(n_traj, dtype=int)
        measured = []
        for j, (pos, g) in enumerate(zip(plan.spin_indices, plan.g_values)):
            theta = plan.thetas[j][hist]
            rho = _apply_diag(rho, _rz_diag(kin.n, pos, math.pi / 2.0 - theta))
            outcomes, rho = _measure_batch(rho, kin.n, pos, protocol.readout,
                                           np.asarray(rng.random(size=n_traj)))
            syndrome[:, j] = outcomes
            measured.append(pos)
            if protocol.feedforward:
                phi_c = plan.phi_cs[j][hist, outcomes]
                corrections[:, j] = phi_c
                for tgt in range(register.n_spins):
                    if tgt in measured or tgt in register.idle_indices:
                        continue
                    scale = register.g_of(tgt)
                    rho = _apply_diag(rho, _rz_diag(kin.n, tgt, scale * phi_c))
            hist = hist * 2 + outcomes
    elif protocol.kind == "gate" and protocol.k > 0:
        plan = gate_plan(register, cfg, n_rea, protocol.k,
                         protocol.delta_ts_s, protocol.flip_branches)
        corrections = np.broadcast_to(np.asarray(plan.phi_cs),
                                      (n_traj, protocol.k)).copy()
        for j, pos in enumerate(plan.spin_indices):
            rho = _gate_step_batch(rho, kin, pos, plan.delta_ts_s[j],
                                   plan.flip_branches[j], protocol.idle_echo)
            frame_tau = frame_tau + plan.delta_ts_s[j]
            if protocol.idle_echo:
                for p in register.idle_indices:
                    frame_tau[p] -= plan.delta_ts_s[j]  # echoed halves cancel
                    parity[p] += 1
        rho = _apply_diag(rho, kin.frame_diag(frame_tau))
        frame_tau = np.zeros(register.n_spins)

    if audit_positivity:
        lo = np.linalg.eigvalsh(rho).min()
        if lo < _MIN_EIGENVALUE:
            raise CorruptedStateError(f"negative eigenvalue {lo!r} after protocol")

    x, y, z = _memory_bloch_batch(rho, kin, frame_tau, parity, register.memory_index)
    return {"x": x, "y": y, "z": z, "syndrome": syndrome, "corrections": corrections}


def _as_rng(rng_or_seed) -> np.random.Generator:
    if rng_or_seed is None:
        return np.random.Generator(np.random.Philox(key=0))
    if isinstance(rng_or_seed, (int, np.integer)):
        return np.random.Generator(np.random.Philox(key=int(rng_or_seed)))
    return rng_or_seed


def run_sequence(register: Register, cfg: SequenceConfig, n_rea: int,
                 protocol: Protocol, rng=None,
                 initial_states: Mapping[str, str] | None = None) -> ProtocolOutcome:
    """One trajectory: n_rea attempts (echo at half), then the protocol."""
    rng = _as_rng(cfg.seed if rng is None else rng)
    raw = _run_batch(register, cfg, n_rea, protocol, 1, rng, initial_states)
    x, y, z = float(raw["x"][0]), float(raw["y"][0]), float(raw["z"][0])
    bvl = math.sqrt(x * x + y * y + z * z)
    return ProtocolOutcome(syndrome=tuple(int(v) for v in raw["syndrome"][0]),
                           bloch=(x, y, z), bvl=bvl, fidelity=0.5 * bvl + 0.5,
                           applied_corrections=tuple(float(v) for v in raw["corrections"][0]))


def ensemble_run(register: Register, cfg: SequenceConfig, n_rea: int,
                 protocol: Protocol, n_traj: int, seed: int | None = None,
                 initial_states: Mapping[str, str] | None = None,
                 group_by_syndrome: bool = False) -> EnsembleOutcome:
    """Average n_traj trajectories; reproducible from the seed alone.

    Trajectory draws come from a counter-based Philox stream keyed by the
    seed, trajectory j occupying column j of each batched draw, so the
    result is independent of execution order.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    use_seed = cfg.seed if seed is None else seed
    rng = np.random.Generator(np.random.Philox(key=use_seed))
    raw = _run_batch(register, cfg, n_rea, protocol, n_traj, rng, initial_states)
    x, y, z = raw["x"], raw["y"], raw["z"]
    mx, my, mz = float(x.mean()), float(y.mean()), float(z.mean())
    if n_traj > 1:
        se = tuple(float(v.std(ddof=1) / math.sqrt(n_traj)) for v in (x, y, z))
    else:
        se = (0.0, 0.0, 0.0)
    bvl = math.sqrt(mx * mx + my * my + mz * mz)
    by_syndrome = None
    if group_by_syndrome and raw["syndrome"].shape[1] > 0:
        by_syndrome = {}
        keys = [tuple(int(v) for v in row) for row in raw["syndrome"]]
        for key in sorted(set(keys)):
            mask = np.array([kk == key for kk in keys])
            by_syndrome[key] = (int(mask.sum()), float(x[mask].mean()),
                                float(y[mask].mean()), float(z[mask].mean()))
    return EnsembleOutcome(bloch=(mx, my, mz), stderr=se, bvl=bvl,
                           fidelity=0.5 * bvl + 0.5, n_traj=n_traj,
                           seed=use_seed, by_syndrome=by_syndrome)
