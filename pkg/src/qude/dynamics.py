"""Baseline and augmented equations of motion, and their RK4 integration.

Units: time in microseconds throughout. Device frequencies are entered in
GHz, drive amplitudes in MHz (both ordinary frequencies); they are scaled by
2*pi internally so the assembled Hamiltonian is in rad/us. With an in-phase
amplitude p (MHz) and a resonant rotating frame this pins the Rabi period of
the ground-to-excited population to 1/(2p) us.

Integration runs in the coefficient space of the elementary Hermitian basis:
a Hermitian state maps to a real vector x with rho = sum_i x_i H_i, and the
right-hand side becomes a real linear map A x (baseline and
structure-preserving sources) or A x + net(x) (network sources). The
classic four-stage Runge-Kutta step for the linear case collapses to a
constant step matrix R = sum_{m<=4} (h A)^m / m!, which both engines below
share with the training code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import qcore

TWO_PI = 2.0 * np.pi

BASE_LVN = "lvn"
BASE_LINDBLAD = "lindblad"

DEFAULT_DT_INTERNAL_NS = 4.0


class DivergenceError(RuntimeError):
    """Trajectory left the finite range during integration."""

    def __init__(self, message: str, time_us: float, experiment_id: str | None = None):
        if experiment_id:
            message = f"{message} (experiment {experiment_id})"
        super().__init__(f"{message} at t = {time_us:.6g} us")
        self.time_us = time_us
        self.experiment_id = experiment_id


@dataclass(frozen=True)
class DeviceModel:
    """Baseline physics of one qubit/qudit.

    ``omega_rot_GHz`` defaults to the transition frequency (resonant frame),
    which makes the drift term of the Hamiltonian vanish.
    """

    omega01_GHz: float
    T1_us: float
    T2_us: float
    base_kind: str = BASE_LINDBLAD
    omega_rot_GHz: Optional[float] = None
    dim: int = 2

    def __post_init__(self):
        if self.base_kind not in (BASE_LVN, BASE_LINDBLAD):
            raise ValueError(f"base_kind must be '{BASE_LVN}' or '{BASE_LINDBLAD}', got {self.base_kind!r}")
        if self.base_kind == BASE_LINDBLAD and (self.T1_us <= 0 or self.T2_us <= 0):
            raise ValueError("Lindblad base model requires T1 > 0 and T2 > 0")
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.omega_rot_GHz is None:
            object.__setattr__(self, "omega_rot_GHz", self.omega01_GHz)

    @property
    def tau1(self) -> float:
        """Energy decay rate 1/T1 in 1/us (zero for the LvN base)."""
        return 1.0 / self.T1_us if self.base_kind == BASE_LINDBLAD else 0.0

    @property
    def tau2(self) -> float:
        """Dephasing rate 1/T2 in 1/us (zero for the LvN base)."""
        return 1.0 / self.T2_us if self.base_kind == BASE_LINDBLAD else 0.0


@dataclass(frozen=True, eq=False)
class Experiment:
    """One control setting: a constant square pulse and its sample grid."""

    id: str
    amplitude_p_MHz: float
    duration_us: float
    sample_dt_ns: float
    amplitude_q_MHz: float = 0.0
    initial_state: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.duration_us <= 0:
            raise ValueError("duration_us must be positive")
        if self.sample_dt_ns <= 0:
            raise ValueError("sample_dt_ns must be positive")
        ratio = self.duration_us / (self.sample_dt_ns * 1e-3)
        if abs(ratio - round(ratio)) > 1e-6:
            raise ValueError(
                f"duration ({self.duration_us} us) is not an integer number of "
                f"samples at {self.sample_dt_ns} ns"
            )

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_us / (self.sample_dt_ns * 1e-3)))

    def times_us(self, include_t0: bool = False) -> np.ndarray:
        """Output grid; starts at sample_dt unless t=0 is requested."""
        start = 0 if include_t0 else 1
        return np.arange(start, self.n_samples + 1) * (self.sample_dt_ns * 1e-3)

    def initial_density(self, dim: int) -> np.ndarray:
        if self.initial_state is None:
            return qcore.ground_state(dim)
        rho0 = np.asarray(self.initial_state, dtype=complex)
        if rho0.shape != (dim, dim):
            raise ValueError(f"initial state shape {rho0.shape} does not match dim {dim}")
        return rho0


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States recorded on the output grid."""

    times_us: np.ndarray
    states: np.ndarray  # (n_times, dim, dim) complex

    def __len__(self) -> int:
        return len(self.times_us)


def lowering_operator(dim: int) -> np.ndarray:
    """Truncated annihilation operator; [[0, 1], [0, 0]] for dim=2."""
    a = np.zeros((dim, dim), dtype=complex)
    for k in range(dim - 1):
        a[k, k + 1] = np.sqrt(k + 1.0)
    return a


def number_operator(dim: int) -> np.ndarray:
    return np.diag(np.arange(dim, dtype=float)).astype(complex)


def hamiltonian(dev: DeviceModel, exp: Experiment) -> np.ndarray:
    """Rotating-frame Hamiltonian in rad/us.

    H = 2*pi*(omega01 - omega_rot) a^dag a + 2*pi*p (a + a^dag)
        + 2*pi*q i(a - a^dag), detuning in MHz, amplitudes in MHz.
    Time-independent because the shipped pulses are constant.
    """
    a = lowering_operator(dev.dim)
    ad = qcore.dagger(a)
    detuning_MHz = (dev.omega01_GHz - dev.omega_rot_GHz) * 1e3
    h = TWO_PI * detuning_MHz * (ad @ a)
    h = h + TWO_PI * exp.amplitude_p_MHz * (a + ad)
    h = h + TWO_PI * exp.amplitude_q_MHz * 1j * (a - ad)
    return h


def dissipator(jump: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """D[L](rho) = L rho L^dag - (L^dag L rho + rho L^dag L) / 2."""
    ld = qcore.dagger(jump)
    ldl = ld @ jump
    return jump @ rho @ ld - 0.5 * (ldl @ rho + rho @ ldl)


def lindblad_dissipator(dev: DeviceModel, rho: np.ndarray) -> np.ndarray:
    """Baseline decoherence: tau1 D[a] + tau2 D[a^dag a]; zero for LvN."""
    if dev.base_kind == BASE_LVN:
        return np.zeros((dev.dim, dev.dim), dtype=complex)
    a = lowering_operator(dev.dim)
    n = number_operator(dev.dim)
    return dev.tau1 * dissipator(a, rho) + dev.tau2 * dissipator(n, rho)


def rhs(dev: DeviceModel, exp: Experiment, source, rho: np.ndarray, t_us: float = 0.0) -> np.ndarray:
    """Time derivative of rho under the (possibly augmented) master equation.

    ``source`` is None for the base model, or any object from qude.models. A
    structure-preserving source folds its Hermitian part into the commutator
    and adds its dissipator; network sources add their output directly. Both
    are expressed through the source protocol ``hermitian_shift()`` /
    ``residual_term(rho)``.
    """
    qcore.assert_hermitian(rho, 1e-9, "rhs() state")
    h = hamiltonian(dev, exp)
    if source is not None:
        shift = source.hermitian_shift()
        if shift is not None:
            h = h + shift
    out = -1j * (h @ rho - rho @ h) + lindblad_dissipator(dev, rho)
    if source is not None:
        out = out + source.residual_term(rho)
    return out


# -- coefficient-space engines ------------------------------------------------

def base_generator(dev: DeviceModel, exp: Experiment) -> np.ndarray:
    """Real matrix A with d(x)/dt = A x for the baseline model.

    Columns are the Hermitian-basis coefficients of the baseline right-hand
    side applied to each basis element, so the matrix and the matrix-space
    ``rhs`` agree by construction.
    """
    basis = qcore.hermitian_basis(dev.dim)
    cols = []
    for el in basis.elements:
        cols.append(qcore.expand(rhs(dev, exp, None, el), basis, check=False))
    return np.stack(cols, axis=1)


def rk4_step_matrix(a: np.ndarray, h_us: float) -> np.ndarray:
    """One RK4 step of a constant-coefficient linear system as a matrix."""
    n = a.shape[0]
    r = np.eye(n)
    term = np.eye(n)
    for m in range(1, 5):
        term = (h_us / m) * (term @ a)
        r = r + term
    return r


def integration_steps(exp: Experiment, dt_internal_ns: float) -> tuple[int, float]:
    """Validate the internal step and return (substeps per sample, h in us)."""
    if dt_internal_ns <= 0:
        raise ValueError("dt_internal_ns must be positive")
    ratio = exp.sample_dt_ns / dt_internal_ns
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ValueError(
            f"internal step {dt_internal_ns} ns does not evenly divide "
            f"sample step {exp.sample_dt_ns} ns"
        )
    return int(round(ratio)), dt_internal_ns * 1e-3


def _propagate_linear(
    r_step: np.ndarray, x0: np.ndarray, n_samples: int, n_sub: int
) -> np.ndarray:
    """Iterate x -> R x, recording after every n_sub steps; returns (n_samples, k)."""
    out = np.empty((n_samples, x0.size))
    x = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(n_samples):
            for _ in range(n_sub):
                x = r_step @ x
            out[j] = x
    return out


def _propagate_network(
    a_base: np.ndarray,
    source,
    x0: np.ndarray,
    h_us: float,
    n_samples: int,
    n_sub: int,
) -> np.ndarray:
    """Stage-by-stage RK4 for x' = A x + net(x); returns (n_samples, k)."""

    def f(x):
        return a_base @ x + source.coeff_forward(x)

    out = np.empty((n_samples, x0.size))
    x = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(n_samples):
            for _ in range(n_sub):
                k1 = f(x)
                k2 = f(x + 0.5 * h_us * k1)
                k3 = f(x + 0.5 * h_us * k2)
                k4 = f(x + h_us * k3)
                x = x + (h_us / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
            out[j] = x
    return out


def integrate_rk4(
    dev: DeviceModel,
    exp: Experiment,
    source=None,
    dt_internal_ns: float = DEFAULT_DT_INTERNAL_NS,
    include_t0: bool = False,
) -> Trajectory:
    """Fixed-step RK4 from t=0, recording states at every sample instant.

    Deterministic given its inputs. Raises DivergenceError (with the time
    reached) if the state leaves the finite range, and ValueError if the
    internal step does not divide the sample step.
    """
    n_sub, h_us = integration_steps(exp, dt_internal_ns)
    basis = qcore.hermitian_basis(dev.dim)
    rho0 = exp.initial_density(dev.dim)
    x0 = qcore.expand(rho0, basis, check=False)
    a_base = base_generator(dev, exp)

    if source is None or source.is_linear:
        a = a_base if source is None else a_base + source.coeff_generator()
        r_step = rk4_step_matrix(a, h_us)
        xs = _propagate_linear(r_step, x0, exp.n_samples, n_sub)
    else:
        xs = _propagate_network(a_base, source, x0, h_us, exp.n_samples, n_sub)

    times = exp.times_us(include_t0=False)
    if not np.all(np.isfinite(xs)):
        bad = int(np.argmax(~np.all(np.isfinite(xs), axis=1)))
        raise DivergenceError("state became non-finite", float(times[bad]), exp.id)

    states = qcore.reconstruct_many(xs, basis)
    if include_t0:
        times = np.concatenate(([0.0], times))
        states = np.concatenate((rho0[None, :, :], states))
    return Trajectory(times_us=times, states=states)
