"""Radical-ion-pair model construction.

Two models are provided:

- the two-level toy pair in the ordered basis ``(|S>, |T>)`` with
  ``H = [[omega, Omega], [Omega, 0]]`` and ``Q_S = diag(1, 0)``;
- the minimal realistic pair of two electrons and one spin-1/2 nucleus
  (dimension 8) with ``H = a s1.I + b (s1z + s2z)``.

All couplings and rates are angular frequencies in one user-chosen unit
(hbar = 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .spin import HilbertSpace, Matrix, singlet_projector, spin_vector

STRUCTURE_ATOL = 1e-12


def _check_rates(**rates: float) -> None:
    for name, value in rates.items():
        if not np.isfinite(value) or value < 0:
            raise ValueError(f"{name} must be a finite non-negative rate, got {value!r}")


@dataclass(frozen=True)
class ToyModelParams:
    omega: float = 1.0
    Omega: float = 1.0
    k_S: float = 1.0
    k_T: float = 0.0

    def __post_init__(self):
        _check_rates(Omega=self.Omega, k_S=self.k_S, k_T=self.k_T)
        if not np.isfinite(self.omega):
            raise ValueError("omega must be finite")


@dataclass(frozen=True)
class MultispinModelParams:
    hyperfine_a: float = 1.0
    zeeman_b: float = 0.0
    k_S: float = 1.0
    k_T: float = 0.0

    def __post_init__(self):
        _check_rates(k_S=self.k_S, k_T=self.k_T)
        if not (np.isfinite(self.hyperfine_a) and np.isfinite(self.zeeman_b)):
            raise ValueError("hyperfine_a and zeeman_b must be finite")


@dataclass(frozen=True, eq=False)
class RipModel:
    """A ready-to-simulate pair: Hamiltonian, channel projectors and rates.

    ``k`` is the total measurement rate ``k_s + k_t``; it is the only rate
    entering the measurement master equation, while the phenomenological
    equation uses the two channel rates separately.
    """

    space: HilbertSpace
    hamiltonian: Matrix
    q_s: Matrix
    q_t: Matrix
    k_s: float
    k_t: float
    label: str = ""
    params: object = field(default=None, repr=False)

    def __post_init__(self):
        d = self.space.total_dim
        for name in ("hamiltonian", "q_s", "q_t"):
            m = getattr(self, name)
            if m.shape != (d, d):
                raise ValueError(f"{name} has shape {m.shape}, expected {(d, d)}")
            m.setflags(write=False)
        _check_rates(k_s=self.k_s, k_t=self.k_t)
        if np.abs(self.hamiltonian - self.hamiltonian.conj().T).max() > STRUCTURE_ATOL:
            raise ValueError("Hamiltonian is not Hermitian")
        eye = np.eye(d)
        if np.abs(self.q_s + self.q_t - eye).max() > STRUCTURE_ATOL:
            raise ValueError("q_s + q_t must equal the identity")
        if np.abs(self.q_s @ self.q_t).max() > STRUCTURE_ATOL:
            raise ValueError("q_s and q_t must be orthogonal")

    @property
    def k(self) -> float:
        return self.k_s + self.k_t

    @property
    def dim(self) -> int:
        return self.space.total_dim

    def with_rate(self, k: float) -> "RipModel":
        """Same model with total rate ``k``, keeping the channel split.

        A model with both rates zero is treated as singlet-only.
        """
        _check_rates(k=k)
        total = self.k
        frac_t = self.k_t / total if total > 0 else 0.0
        return replace(self, k_s=k * (1.0 - frac_t), k_t=k * frac_t)

    def singlet_state(self) -> Matrix:
        """Normalized singlet density matrix ``Q_S / Tr Q_S``."""
        return self.q_s / np.trace(self.q_s).real


def build_toy_model(p: ToyModelParams) -> RipModel:
    space = HilbertSpace((2,))
    h = np.array([[p.omega, p.Omega], [p.Omega, 0.0]], dtype=complex)
    q_s = np.diag([1.0, 0.0]).astype(complex)
    q_t = np.diag([0.0, 1.0]).astype(complex)
    return RipModel(space, h, q_s, q_t, float(p.k_S), float(p.k_T), label="toy", params=p)


def build_multispin_model(p: MultispinModelParams) -> RipModel:
    # slots: electron 1, electron 2, nucleus
    space = HilbertSpace((2, 2, 2))
    s1 = spin_vector(space, 0)
    s2 = spin_vector(space, 1)
    nuc = spin_vector(space, 2)
    h = p.hyperfine_a * sum(a @ b for a, b in zip(s1, nuc))
    h = h + p.zeeman_b * (s1[2] + s2[2])
    q_s = singlet_projector(space, (0, 1))
    q_t = space.identity() - q_s
    return RipModel(space, h, q_s, q_t, float(p.k_S), float(p.k_T), label="multispin", params=p)


def build_model(kind: str, **params) -> RipModel:
    if kind == "toy":
        return build_toy_model(ToyModelParams(**params))
    if kind == "multispin":
        return build_multispin_model(MultispinModelParams(**params))
    raise ValueError(f"unknown model kind {kind!r} (expected 'toy' or 'multispin')")
