"""Master-equation right-hand sides and fixed-step propagation.

Two generators are available:

``measurement``
    ``drho/dt = -i[H, rho] - k [Q_S, [Q_S, rho]]`` with ``k = k_S + k_T``.
    Trace preserving; the pair is continuously measured but never lost.
``haberkorn``
    ``drho/dt = -i[H, rho] - k_S {Q_S, rho} - k_T {Q_T, rho}``.
    The trace decays and the lost weight is the recombined fraction.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import simpson

from .errors import PropagationError
from .models import RipModel
from .spin import Matrix


class Variant(str, enum.Enum):
    MEASUREMENT = "measurement"
    HABERKORN = "haberkorn"


def as_variant(v) -> Variant:
    try:
        return Variant(v)
    except ValueError:
        raise ValueError(f"unknown equation variant {v!r}; expected one of {[x.value for x in Variant]}") from None


def _check_dims(rho, model: RipModel) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (model.dim, model.dim):
        raise ValueError(f"density matrix shape {rho.shape} does not match model dimension {model.dim}")
    return rho


def commutator(a, b):
    return a @ b - b @ a


def dissipator(b, rho) -> Matrix:
    """``D[B] rho = B†B rho + rho B†B - 2 B rho B†``.

    Enters the master equation with a minus sign and the prefactor ``k``.
    """
    b = np.asarray(b, dtype=complex)
    rho = np.asarray(rho, dtype=complex)
    if b.shape != rho.shape:
        raise ValueError(f"shape mismatch: B {b.shape} vs rho {rho.shape}")
    bd = b.conj().T
    bdb = bd @ b
    return bdb @ rho + rho @ bdb - 2 * b @ rho @ bd


def rhs_measurement(rho, model: RipModel) -> Matrix:
    rho = _check_dims(rho, model)
    q = model.q_s
    return -1j * commutator(model.hamiltonian, rho) - model.k * commutator(q, commutator(q, rho))


def rhs_haberkorn(rho, model: RipModel) -> Matrix:
    rho = _check_dims(rho, model)
    out = -1j * commutator(model.hamiltonian, rho)
    out -= model.k_s * (rho @ model.q_s + model.q_s @ rho)
    if model.k_t:
        out -= model.k_t * (rho @ model.q_t + model.q_t @ rho)
    return out


def rhs(rho, model: RipModel, variant) -> Matrix:
    if as_variant(variant) is Variant.MEASUREMENT:
        return rhs_measurement(rho, model)
    return rhs_haberkorn(rho, model)


def singlet_probability(rho, model: RipModel) -> float:
    s = np.trace(np.asarray(rho) @ model.q_s)
    if abs(s.imag) > 1e-10:
        raise ValueError(f"Tr(rho Q_S) has imaginary part {s.imag:.3e}; rho is not Hermitian")
    return float(s.real)


def max_step(model: RipModel) -> float:
    """Largest internal step allowed by the step rule, ``0.05 / (||H||_2 + 2k)``."""
    scale = np.linalg.norm(model.hamiltonian, 2) + 2 * model.k
    return math.inf if scale == 0 else 0.05 / scale


@dataclass(frozen=True, eq=False)
class PropagationResult:
    times: NDArray[np.float64]
    states: NDArray[np.complex128]
    singlet_prob: NDArray[np.float64]
    variant: Variant
    model: RipModel = field(repr=False)
    step: float = math.nan
    error_estimate: float = 0.0

    @property
    def trace(self) -> NDArray[np.float64]:
        return np.einsum("tii->t", self.states).real

    @property
    def purity(self) -> NDArray[np.float64]:
        return np.einsum("tij,tji->t", self.states, self.states).real

    @property
    def triplet_prob(self) -> NDArray[np.float64]:
        return np.einsum("tij,ji->t", self.states, self.model.q_t).real


def _rk4_step(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_step_matrix(model: RipModel, variant, h: float) -> NDArray[np.complex128]:
    """Matrix of one classical RK4 step acting on row-stacked ``vec(rho)``.

    The generator is linear and time independent, so the RK4 update is a
    fixed linear map; it is assembled column by column by stepping each
    basis matrix once.
    """
    d = model.dim
    f = lambda r: rhs(r, model, variant)  # noqa: E731
    cols = np.empty((d * d, d * d), dtype=complex)
    for idx in range(d * d):
        e = np.zeros(d * d, dtype=complex)
        e[idx] = 1.0
        cols[:, idx] = _rk4_step(f, e.reshape(d, d), h).reshape(-1)
    return cols


def _integrate(model, variant, rho0, times, h_max):
    """RK4 with an integer number of equal steps per output interval."""
    d = model.dim
    interval = times[1] - times[0]
    n_sub = max(1, math.ceil(interval / h_max - 1e-9))
    h = interval / n_sub
    stride = np.linalg.matrix_power(rk4_step_matrix(model, variant, h), n_sub)
    out = np.empty((len(times), d * d), dtype=complex)
    out[0] = rho0.reshape(-1)
    for i in range(1, len(times)):
        out[i] = stride @ out[i - 1]
    return out.reshape(len(times), d, d), h


def propagate(
    model: RipModel,
    variant,
    rho0,
    t_max: float,
    dt_hint: float | None = None,
    n_points: int = 1000,
    rtol: float = 1e-7,
    max_halvings: int = 12,
) -> PropagationResult:
    """Integrate the chosen master equation on a uniform output grid.

    The internal step starts at ``min(dt_hint, max_step(model))`` and is
    halved until two runs at ``h`` and ``h/2`` agree on ``Tr(rho Q_S)`` to
    ``rtol`` per unit time (relative to ``max(S, 1e-3)``). The finer run is
    returned. Raises ``PropagationError`` when the halving budget runs out
    or a state invariant is violated.
    """
    variant = as_variant(variant)
    rho0 = _check_dims(rho0, model)
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    if dt_hint is not None and not dt_hint > 0:
        raise ValueError("dt_hint must be positive")
    if max_halvings < 1:
        raise ValueError("max_halvings must be at least 1")
    times = np.linspace(0.0, float(t_max), int(n_points))
    h = min(dt_hint if dt_hint is not None else math.inf, max_step(model), times[1])

    def s_of(states):
        return np.einsum("tij,ji->t", states, model.q_s).real

    coarse, h_used = _integrate(model, variant, rho0, times, h)
    s_coarse = s_of(coarse)
    for _ in range(max_halvings):
        fine, h_fine = _integrate(model, variant, rho0, times, h_used / 2)
        s_fine = s_of(fine)
        err = np.abs(s_fine - s_coarse)
        allowed = rtol * np.maximum(times, h_used) * np.maximum(np.abs(s_fine), 1e-3) + 1e-13
        if np.all(err <= allowed):
            break
        coarse, s_coarse, h_used = fine, s_fine, h_fine
    else:
        worst = float(np.max(err / allowed))
        raise PropagationError(
            f"step-halving check failed after {max_halvings} halvings "
            f"(h={h_used:.3e}, error/allowed={worst:.2f}); dt_hint {dt_hint} too large "
            f"or problem too stiff for k={model.k}, ||H||={np.linalg.norm(model.hamiltonian, 2):.3g}"
        )

    result = PropagationResult(
        times=times,
        states=fine,
        singlet_prob=s_fine,
        variant=variant,
        model=model,
        step=h_fine,
        error_estimate=float(err.max()),
    )
    _check_invariants(result, rho0)
    return result


def _check_invariants(result: PropagationResult, rho0) -> None:
    states = result.states
    herm = np.abs(states - states.conj().transpose(0, 2, 1)).max()
    if herm > 1e-10:
        raise PropagationError(f"Hermiticity lost during propagation (deviation {herm:.2e})")
    tr = result.trace
    tr0 = np.trace(rho0).real
    if result.variant is Variant.MEASUREMENT:
        drift = np.abs(tr - tr0).max()
        if drift > 1e-9:
            raise PropagationError(f"trace drifted by {drift:.2e} under the trace-preserving generator")
    elif tr.max() > tr0 + 1e-9:
        raise PropagationError("trace grew under the recombination generator")
    min_eig = np.linalg.eigvalsh(states).min()
    if min_eig < -1e-8:
        raise PropagationError(f"positivity lost during propagation (min eigenvalue {min_eig:.2e})")


def recombination_yields(result: PropagationResult, model: RipModel | None = None) -> tuple[float, float]:
    """Singlet and triplet product yields over the propagation window.

    ``y_s = ∫ 2 k_S Tr(rho Q_S) dt`` and ``y_t = ∫ 2 k_T Tr(rho Q_T) dt`` by
    Simpson quadrature on the output grid. Only meaningful for the
    Haberkorn generator, whose trace loss is the recombined fraction.
    """
    model = model or result.model
    if result.variant is not Variant.HABERKORN:
        raise ValueError("yields are defined only for Haberkorn propagation; the measurement equation preserves trace")
    y_s = 2 * model.k_s * simpson(result.singlet_prob, x=result.times)
    y_t = 2 * model.k_t * simpson(result.triplet_prob, x=result.times)
    return float(y_s), float(y_t)
