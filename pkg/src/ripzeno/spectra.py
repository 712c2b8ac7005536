"""Liouvillian superoperators, their spectra and the Zeno-mode analysis.

Density matrices are vectorized by row stacking,
``vec(rho) = (rho_00, rho_01, ..., rho_10, ...)``, so for the toy model the
vector is ``(rho_SS, rho_ST, rho_TS, rho_TT)`` and
``vec(X rho Y) = (X ⊗ Y^T) vec(rho)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from .dynamics import Variant, as_variant
from .errors import SpectrumError
from .models import RipModel

STATIONARY = "stationary"
ZENO = "zeno"
NORMAL = "normal"
AMBIGUOUS = "ambiguous"


def vec(rho) -> NDArray[np.complex128]:
    return np.asarray(rho, dtype=complex).reshape(-1)


def unvec(v, d: int | None = None) -> NDArray[np.complex128]:
    v = np.asarray(v, dtype=complex)
    if d is None:
        d = math.isqrt(v.size)
    if d * d != v.size:
        raise ValueError(f"vector of length {v.size} is not a vectorized {d}x{d} matrix")
    return v.reshape(d, d)


@dataclass(frozen=True, eq=False)
class Superoperator:
    matrix: NDArray[np.complex128]
    variant: Variant
    model: RipModel = field(repr=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, rho) -> NDArray[np.complex128]:
        return unvec(self.matrix @ vec(rho), self.model.dim)


def build_superoperator(model: RipModel, variant) -> Superoperator:
    variant = as_variant(variant)
    h, eye = model.hamiltonian, np.eye(model.dim)
    a = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    if variant is Variant.MEASUREMENT:
        q = model.q_s
        q2 = q @ q
        a -= model.k * (np.kron(q2, eye) + np.kron(eye, q2.T) - 2 * np.kron(q, q.T))
    else:
        for rate, q in ((model.k_s, model.q_s), (model.k_t, model.q_t)):
            if rate:
                a -= rate * (np.kron(q, eye) + np.kron(eye, q.T))
    return Superoperator(a, variant, model)


@dataclass(frozen=True, eq=False)
class SpectralMode:
    """One eigenpair of the Liouvillian, eigenvalue ``-lam + 1j*omega_e``."""

    lam: float
    omega_e: float
    right_eigenvector: NDArray[np.complex128] = field(repr=False)
    classification: str = ""

    @property
    def eigenvalue(self) -> complex:
        return complex(-self.lam, self.omega_e)


def _zero_tol(norm_a: float) -> float:
    return 1e-9 * max(1.0, norm_a)


def spectrum(a) -> list[SpectralMode]:
    """All eigenpairs of ``a``, sorted by decay rate then frequency.

    Every eigenpair is residual-checked:
    ``||A v - mu v|| < 1e-9 ||A||_2`` with unit ``v``.
    """
    mat = a.matrix if isinstance(a, Superoperator) else np.asarray(a, dtype=complex)
    if not np.all(np.isfinite(mat)):
        raise SpectrumError("superoperator contains non-finite entries")
    try:
        w, v = scipy.linalg.eig(mat)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SpectrumError(f"eigensolver failed: {exc}") from exc
    norm_a = np.linalg.norm(mat, 2)
    v = v / np.linalg.norm(v, axis=0)
    residual = np.linalg.norm(mat @ v - v * w, axis=0)
    if norm_a > 0 and np.any(residual >= 1e-9 * norm_a):
        raise SpectrumError(f"eigenpair residual {residual.max():.2e} exceeds 1e-9 ||A|| = {1e-9 * norm_a:.2e}")
    lam = -w.real
    if lam.min() < -_zero_tol(norm_a):
        raise SpectrumError(f"growing mode found (decay rate {lam.min():.3e})")
    # clean solver noise around exact zeros so sorting and signs are reproducible
    tol = 1e-12 * max(1.0, norm_a)
    lam = np.where(np.abs(lam) < tol, 0.0, lam)
    om = np.where(np.abs(w.imag) < tol, 0.0, w.imag)
    order = np.lexsort((om, lam))
    return [SpectralMode(float(lam[i]), float(om[i]), v[:, i]) for i in order]


def classify_modes(modes: Sequence[SpectralMode], zero_tol: float | None = None, tie_tol: float = 1e-8) -> list[SpectralMode]:
    """Tag modes as stationary, zeno, normal or ambiguous.

    Stationary modes have ``lam`` and ``omega_e`` both zero within
    ``zero_tol``. The zeno mode is the one with the smallest strictly
    positive decay rate; the two members of a complex-conjugate pair share
    their rate and count as one mode. If a different mode ties with it
    within ``tie_tol`` all tied modes are tagged ``ambiguous``.
    """
    if zero_tol is None:
        zero_tol = _zero_tol(max((abs(m.eigenvalue) for m in modes), default=0.0))
    positive = [m for m in modes if m.lam > zero_tol]
    zeno_ids: set[int] = set()
    tag = ZENO
    if positive:
        lam_min = min(m.lam for m in positive)
        tied = [m for m in positive if m.lam - lam_min <= tie_tol * max(1.0, lam_min)]
        ref = tied[0]
        if any(abs(abs(m.omega_e) - abs(ref.omega_e)) > tie_tol * max(1.0, abs(ref.omega_e)) for m in tied):
            tag = AMBIGUOUS
        else:
            # conjugate partners only; a real eigenvalue with multiplicity > 1 is still a tie
            n_pos = sum(1 for m in tied if m.omega_e > 0)
            n_neg = sum(1 for m in tied if m.omega_e < 0)
            n_real = len(tied) - n_pos - n_neg
            if n_real > 1 or n_pos > 1 or n_neg > 1 or (n_real and (n_pos or n_neg)):
                tag = AMBIGUOUS
        zeno_ids = {id(m) for m in tied}
    out = []
    for m in modes:
        if abs(m.lam) <= zero_tol and abs(m.omega_e) <= zero_tol:
            c = STATIONARY
        elif id(m) in zeno_ids:
            c = tag
        else:
            c = NORMAL
        out.append(replace(m, classification=c))
    return out


def min_nonzero_rate(modes: Sequence[SpectralMode], zero_tol: float | None = None) -> float:
    """Smallest strictly positive decay rate, or 0 when every rate vanishes."""
    if zero_tol is None:
        zero_tol = _zero_tol(max((abs(m.eigenvalue) for m in modes), default=0.0))
    rates = [m.lam for m in modes if m.lam > zero_tol]
    return min(rates) if rates else 0.0


@dataclass(frozen=True, eq=False)
class ZenoScan:
    k_values: NDArray[np.float64]
    modes_per_k: list[list[SpectralMode]]
    lambda_qz_per_k: NDArray[np.float64]
    variant: Variant

    def zeno_frequency(self) -> NDArray[np.float64]:
        out = []
        for modes in self.modes_per_k:
            z = [abs(m.omega_e) for m in modes if m.classification in (ZENO, AMBIGUOUS)]
            out.append(min(z) if z else math.nan)
        return np.array(out)

    def normal_rates(self) -> list[list[float]]:
        return [[m.lam for m in modes if m.classification == NORMAL] for modes in self.modes_per_k]


def zeno_scan(model_family, variant, k_grid, threads: int = 1) -> ZenoScan:
    """Spectra across a grid of total measurement rates.

    ``model_family`` is either a ``RipModel`` (rescaled with
    ``RipModel.with_rate``) or a callable ``k -> RipModel``. Results are
    independent of ``threads``.
    """
    variant = as_variant(variant)
    ks = np.asarray(k_grid, dtype=float)
    if ks.ndim != 1 or ks.size == 0:
        raise ValueError("k_grid must be a non-empty 1-d sequence")
    if np.any(ks < 0) or np.any(np.diff(ks) <= 0):
        raise ValueError("k_grid must be non-negative and strictly increasing")
    make: Callable[[float], RipModel]
    make = model_family.with_rate if isinstance(model_family, RipModel) else model_family

    def one(k):
        return classify_modes(spectrum(build_superoperator(make(float(k)), variant)))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            modes_per_k = list(pool.map(one, ks))
    else:
        modes_per_k = [one(k) for k in ks]
    lam_qz = np.array([min_nonzero_rate(m) for m in modes_per_k])
    return ZenoScan(ks, modes_per_k, lam_qz, variant)


@dataclass(frozen=True)
class ZenoTime:
    inverse_zeno_time: float
    predicted_rate: float

    @property
    def zeno_time(self) -> float:
        return math.inf if self.inverse_zeno_time == 0 else 1.0 / self.inverse_zeno_time


def zeno_time(model: RipModel) -> ZenoTime:
    """Energy spread of the singlet state and the heuristic Zeno rate.

    ``1/tau_Z = sqrt(<H^2>_S - <H>_S^2)`` evaluated in ``Q_S / Tr Q_S``
    (the pure ``|S>`` for the toy model), and ``predicted_rate = tau / tau_Z^2``
    with ``tau = 1/k``. The high-k decay rate of the Liouvillian is four
    times larger than this heuristic for the toy model.
    """
    rho = model.singlet_state()
    h = model.hamiltonian
    var = np.trace(rho @ h @ h).real - np.trace(rho @ h).real ** 2
    inv = math.sqrt(max(var, 0.0))
    pred = math.inf if model.k == 0 else inv**2 / model.k
    return ZenoTime(inv, pred)


def matrix_exponential(a, tau: float) -> NDArray[np.complex128]:
    """``exp(A tau)`` by Padé scaling and squaring."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    mat = a.matrix if isinstance(a, Superoperator) else np.asarray(a, dtype=complex)
    out = scipy.linalg.expm(mat * tau)
    if not np.all(np.isfinite(out)):
        raise SpectrumError(f"matrix exponential overflowed at tau={tau}, ||A||={np.linalg.norm(mat, 2):.3g}")
    return out


def stationary_state(model: RipModel, variant=Variant.MEASUREMENT) -> NDArray[np.complex128]:
    """Unique trace-one stationary density matrix; raises if not unique."""
    sop = build_superoperator(model, variant)
    modes = spectrum(sop)
    norm_a = np.linalg.norm(sop.matrix, 2)
    null = [m for m in modes if abs(m.eigenvalue) <= _zero_tol(norm_a)]
    if len(null) != 1:
        raise SpectrumError(f"stationary state is not unique ({len(null)} zero modes)")
    rho = unvec(null[0].right_eigenvector, model.dim)
    rho = rho / np.trace(rho)
    return 0.5 * (rho + rho.conj().T)


def dominant_frequency(times, series, pad: int = 16) -> float:
    """Angular frequency of the largest peak in the spectrum of ``series``.

    The mean is removed, the series zero padded by ``pad`` and the peak
    refined by parabolic interpolation of the log magnitude.
    """
    t = np.asarray(times, dtype=float)
    x = np.asarray(series, dtype=float)
    dt = t[1] - t[0]
    if not np.allclose(np.diff(t), dt, rtol=1e-9, atol=0):
        raise ValueError("dominant_frequency needs a uniform time grid")
    x = x - x.mean()
    n = len(x) * pad
    mag = np.abs(np.fft.rfft(x, n=n))
    i = int(np.argmax(mag[1:])) + 1
    shift = 0.0
    if 1 <= i < len(mag) - 1:
        y0, y1, y2 = np.log(mag[i - 1 : i + 2] + 1e-300)
        denom = y0 - 2 * y1 + y2
        if denom != 0:
            shift = 0.5 * (y0 - y2) / denom
    return 2 * math.pi * (i + shift) / (n * dt)
