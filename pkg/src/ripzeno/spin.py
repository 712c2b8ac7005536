"""Dense spin-1/2 operator algebra on composite Hilbert spaces.

Operators are plain complex ``numpy`` arrays. Subsystems are ordered as in
``HilbertSpace.subsystem_dims`` and composed left to right with ``np.kron``,
so slot 0 is the most significant index of the product basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from math import prod

import numpy as np
from numpy.typing import NDArray

Matrix = NDArray[np.complex128]


@dataclass(frozen=True)
class HilbertSpace:
    subsystem_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.subsystem_dims)
        if not dims:
            raise ValueError("a Hilbert space needs at least one subsystem")
        if any(d < 2 for d in dims):
            raise ValueError(f"every subsystem dimension must be >= 2, got {dims}")
        object.__setattr__(self, "subsystem_dims", dims)

    @property
    def total_dim(self) -> int:
        return prod(self.subsystem_dims)

    @property
    def n_subsystems(self) -> int:
        return len(self.subsystem_dims)

    def identity(self) -> Matrix:
        return np.eye(self.total_dim, dtype=complex)


def kron(a, b) -> Matrix:
    """Kronecker product ``a ⊗ b`` with ``(a⊗b)[i*n+k, j*n+l] = a[i,j] b[k,l]``."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise ValueError("kron expects two square matrices")
    return np.kron(a, b)


def spin_half_operators() -> tuple[Matrix, Matrix, Matrix]:
    """Return ``(sx, sy, sz)``, half the Pauli matrices."""
    sx = np.array([[0, 1], [1, 0]], dtype=complex) / 2
    sy = np.array([[0, -1j], [1j, 0]], dtype=complex) / 2
    sz = np.array([[1, 0], [0, -1]], dtype=complex) / 2
    return sx, sy, sz


def embed(op, slot: int, space: HilbertSpace) -> Matrix:
    """Lift a single-subsystem operator to the full space (identity elsewhere)."""
    op = np.asarray(op, dtype=complex)
    if not 0 <= slot < space.n_subsystems:
        raise IndexError(f"slot {slot} out of range for {space.n_subsystems} subsystems")
    dim = space.subsystem_dims[slot]
    if op.shape != (dim, dim):
        raise ValueError(f"operator shape {op.shape} does not match subsystem dimension {dim}")
    factors = [op if i == slot else np.eye(d, dtype=complex) for i, d in enumerate(space.subsystem_dims)]
    return reduce(np.kron, factors)


def spin_vector(space: HilbertSpace, slot: int) -> tuple[Matrix, Matrix, Matrix]:
    """Embedded ``(sx, sy, sz)`` of the spin-1/2 living in ``slot``."""
    return tuple(embed(s, slot, space) for s in spin_half_operators())


def _check_electron_slots(space: HilbertSpace, electron_slots) -> tuple[int, int]:
    i, j = (int(s) for s in electron_slots)
    if i == j:
        raise ValueError("electron slots must be distinct")
    for s in (i, j):
        if not 0 <= s < space.n_subsystems:
            raise IndexError(f"electron slot {s} out of range")
        if space.subsystem_dims[s] != 2:
            raise ValueError(f"slot {s} is not a spin-1/2 subsystem")
    return i, j


def singlet_projector(space: HilbertSpace, electron_slots=(0, 1)) -> Matrix:
    """Q_S = 1/4 - s1.s2 for the two electron spins in ``electron_slots``."""
    i, j = _check_electron_slots(space, electron_slots)
    s1 = spin_vector(space, i)
    s2 = spin_vector(space, j)
    return 0.25 * space.identity() - sum(a @ b for a, b in zip(s1, s2))


def triplet_projector(space: HilbertSpace, electron_slots=(0, 1)) -> Matrix:
    return space.identity() - singlet_projector(space, electron_slots)
