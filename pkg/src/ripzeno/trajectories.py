"""Quantum-jump unraveling of the measurement master equation.

Each step of length ``dt`` draws one uniform number ``u`` per trajectory.
A jump maps the state onto the singlet subspace, ``psi -> Q_S psi``
(normalized); between jumps the state follows the non-Hermitian drift
generated by ``H_eff = H - i k Q_S``. Two discretizations are offered:

``first_order``
    With ``q = <psi|Q_S|psi>`` before the step, a jump fires when
    ``u < 2 k q dt``; otherwise ``psi - i dt H psi - k dt (Q_S - q) psi``.
    The state is renormalized after every step. Local error ``O(dt^2)``.
``midpoint``
    The no-jump probability is ``||exp(-i H_eff dt) psi||^2`` and a jump
    happens halfway through the step,
    ``exp(-i H_eff dt/2) Q_S exp(-i H_eff dt/2) psi``. A second jump may
    follow in the remaining half step, so jump counts carry no ``O(dt)``
    bias either. Ensemble averages converge at second order in ``dt``;
    this is the default.

Averaging ``|psi><psi|`` over trajectories reproduces the master equation
``-i[H, rho] - k [Q_S, [Q_S, rho]]``.

Random numbers come from one Philox stream per trajectory keyed by its
seed, consumed one draw per step, so draw ``j`` of trajectory ``i`` depends
only on ``(master_seed, i, j)``. Trajectories are simulated in fixed-size
batches and reduced in batch order, which makes ensemble results
bit-identical for any thread count.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from .dynamics import Variant
from .errors import TrajectoryError
from .models import RipModel
from .spectra import build_superoperator, matrix_exponential, stationary_state, unvec, vec

BATCH_SIZE = 500
SCHEMES = ("first_order", "midpoint")
_DRAW_CHUNK = 1024


def trajectory_seed(master_seed: int, index: int) -> int:
    """Seed of trajectory ``index`` in an ensemble started from ``master_seed``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def _stream(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def check_dt(model: RipModel, dt: float) -> None:
    """Reject steps that make the first-order jump sampling inaccurate."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    k = model.k
    if k > 0 and dt > 0.01 / (2 * k) * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds 0.01/(2k)={0.01 / (2 * k):.3e}; jump probability per step must stay <= 1%")
    h_norm = np.linalg.norm(model.hamiltonian, 2)
    if h_norm > 0 and dt > 0.02 / h_norm * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds 0.02/||H||={0.02 / h_norm:.3e}")


def _n_steps(t_max: float, dt: float) -> int:
    n = round(t_max / dt)
    if n < 1 or abs(n * dt - t_max) > 1e-9 * max(1.0, t_max):
        raise ValueError(f"t_max={t_max} is not an integer multiple of dt={dt}")
    return n


def _normalize_psi(psi0, model: RipModel) -> NDArray[np.complex128]:
    psi = np.asarray(psi0, dtype=complex).reshape(-1)
    if psi.size != model.dim:
        raise ValueError(f"state has {psi.size} amplitudes, model dimension is {model.dim}")
    norm = np.linalg.norm(psi)
    if abs(norm - 1) > 1e-9:
        raise ValueError(f"psi0 must be normalized (norm {norm})")
    return psi


def expect_qs(psi, model: RipModel) -> NDArray[np.float64]:
    """Row-wise ``<psi|Q_S|psi>`` for a single state or a batch of states."""
    psi = np.atleast_2d(psi)
    return np.einsum("ni,ni->n", psi.conj(), psi @ model.q_s.T).real


def jump_step(psi, model: RipModel, dt: float, rng_draw: float, scheme: str = "first_order"):
    """One step of the unraveling for a single state.

    Returns ``(new_psi, jumped)``. With the default first-order scheme the
    jump fires when ``rng_draw < 2 k <Q_S> dt`` on the pre-step state.
    """
    check_dt(model, dt)
    psi = np.asarray(psi, dtype=complex)
    stepper = _Stepper(model, dt, scheme)
    new, count = stepper.step(psi[None, :], np.array([rng_draw]))
    return new[0], bool(count[0])


class _Stepper:
    """Batched single-step update for the two discretization schemes.

    ``first_order``: jump with probability ``2 k q dt`` from the pre-step
    state, Euler no-jump drift.
    ``midpoint``: jump with probability ``1 - ||exp(-i H_eff dt) psi||^2``
    (the exact chance of at least one jump in the step) where
    ``H_eff = H - i k Q_S``; the projection acts at mid-step,
    ``exp(-i H_eff dt/2) Q_S exp(-i H_eff dt/2) psi``, and the no-jump branch
    is the normalized exact no-jump propagation. Given a jump, ``u / p`` is
    again uniform and decides a second jump within the remaining half step
    (projected at its midpoint). Both schemes reduce to the same continuum
    process; the midpoint scheme is second order in ``dt``.

    ``step`` returns the new states and the number of jumps per state.
    """

    def __init__(self, model: RipModel, dt: float, scheme: str):
        if scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
        self.scheme = scheme
        self.k = model.k
        self.dt = dt
        self.qT = model.q_s.T.copy()
        self.hT = model.hamiltonian.T.copy()
        if scheme == "midpoint":
            h_eff = model.hamiltonian - 1j * model.k * model.q_s
            self.full = scipy.linalg.expm(-1j * dt * h_eff).T
            self.half = scipy.linalg.expm(-0.5j * dt * h_eff).T
            self.quarter = scipy.linalg.expm(-0.25j * dt * h_eff).T

    def expect(self, psi):
        return np.einsum("ni,ni->n", psi.conj(), psi @ self.qT).real

    def step(self, psi, u, q=None):
        if self.scheme == "first_order":
            if q is None:
                q = self.expect(psi)
            qpsi = psi @ self.qT
            new = psi - 1j * self.dt * (psi @ self.hT) - self.k * self.dt * (qpsi - q[:, None] * psi)
            p = 2 * self.k * q * self.dt
        else:
            new = psi @ self.full
            p = 1.0 - np.einsum("ni,ni->n", new.conj(), new).real
        jumped = u < p
        count = jumped.astype(np.int64)
        if np.any(jumped):
            if self.scheme == "first_order":
                post = qpsi[jumped]
            else:
                mid = (psi[jumped] @ self.half) @ self.qT
                mid_norm = np.linalg.norm(mid, axis=1)
                if np.any(mid_norm <= 1e-150):
                    raise TrajectoryError("jump attempted from a state with <Q_S> = 0; dt too coarse")
                mid /= mid_norm[:, None]
                post = mid @ self.half
                p2 = 1.0 - np.einsum("ni,ni->n", post.conj(), post).real
                again = u[jumped] / p[jumped] < p2
                if np.any(again):
                    post[again] = ((mid[again] @ self.quarter) @ self.qT) @ self.quarter
                    count[np.flatnonzero(jumped)[again]] += 1
            norms = np.linalg.norm(post, axis=1)
            if np.any(norms <= 1e-150):
                raise TrajectoryError("jump attempted from a state with <Q_S> = 0; dt too coarse")
            new[jumped] = post
        new /= np.linalg.norm(new, axis=1)[:, None]
        return new, count


class _Draws:
    """Per-trajectory uniform streams served one column (step) at a time."""

    def __init__(self, seeds):
        self.gens = [_stream(s) for s in seeds]
        self.buf = np.empty((len(seeds), 0))
        self.pos = 0

    def next(self) -> NDArray[np.float64]:
        if self.pos == self.buf.shape[1]:
            self.buf = np.stack([g.random(_DRAW_CHUNK) for g in self.gens])
            self.pos = 0
        col = self.buf[:, self.pos]
        self.pos += 1
        return col


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    seed: int
    times: NDArray[np.float64]
    qs_expect: NDArray[np.float64]
    jump_times: NDArray[np.float64]
    rc_samples: NDArray[np.float64]
    absorbed: bool = False


@dataclass(frozen=True, eq=False)
class EnsembleResult:
    """Ensemble statistics on the record grid.

    ``mean_jump_rate[i]`` is the jump rate in the bin ``[times[i], times[i+1])``.
    In absorbing mode ``mean_qs`` averages over surviving trajectories and
    ``survival`` is the fraction that has not yet jumped.
    """

    n_traj: int
    master_seed: int
    times: NDArray[np.float64]
    mean_qs: NDArray[np.float64]
    qs_stderr: NDArray[np.float64]
    mean_jump_rate: NDArray[np.float64]
    jump_rate_stderr: NDArray[np.float64]
    rho_estimate: NDArray[np.complex128] = field(repr=False)
    rho_stderr: NDArray[np.float64] = field(repr=False)
    jump_counts: NDArray[np.int64] = field(repr=False)
    survival: NDArray[np.float64] = field(repr=False)
    absorbing: bool = False
    k: float = 0.0
    records: list[TrajectoryRecord] | None = field(default=None, repr=False)

    @property
    def mean_rc(self) -> NDArray[np.float64]:
        return self.k * self.mean_qs


def _run_batch(model, psi0, dt, n_steps, record_every, seeds, absorbing, scheme, keep_records):
    n = len(seeds)
    d = model.dim
    n_rec = n_steps // record_every + 1
    stepper = _Stepper(model, dt, scheme)
    draws = _Draws(seeds)
    psi = np.repeat(psi0[None, :], n, axis=0)
    alive = np.ones(n, dtype=bool)

    qs = np.full((n, n_rec), np.nan)
    bin_counts = np.zeros((n, n_rec - 1), dtype=np.int64)
    rho_sum = np.zeros((n_rec, d, d), dtype=complex)
    rho_sq = np.zeros((n_rec, d, d))
    alive_rec = np.zeros(n_rec, dtype=np.int64)
    jump_steps: list[list[int]] | None = [[] for _ in range(n)] if keep_records else None

    def record(r, q):
        qs[alive, r] = q[alive]
        live = psi[alive]
        outer = live[:, :, None] * live[:, None, :].conj()
        rho_sum[r] = outer.sum(axis=0)
        rho_sq[r] = (np.abs(outer) ** 2).sum(axis=0)
        alive_rec[r] = alive.sum()

    q = stepper.expect(psi)
    record(0, q)
    for j in range(n_steps):
        u = draws.next()
        new, count = stepper.step(psi, u, q)
        count[~alive] = 0
        if absorbing:
            # recombination ends the trajectory at its first jump
            np.minimum(count, 1, out=count)
            new[~alive] = psi[~alive]
        psi = new
        jumped = count > 0
        if np.any(jumped):
            bin_counts[:, j // record_every] += count
            if jump_steps is not None:
                for i in np.flatnonzero(jumped):
                    jump_steps[i].extend([j + 1] * int(count[i]))
            if absorbing:
                alive &= ~jumped
        q = stepper.expect(psi)
        if (j + 1) % record_every == 0:
            record((j + 1) // record_every, q)

    return dict(
        qs=qs,
        bin_counts=bin_counts,
        rho_sum=rho_sum,
        rho_sq=rho_sq,
        alive_rec=alive_rec,
        jump_steps=jump_steps,
    )


def _batches(n_traj: int):
    return [(start, min(start + BATCH_SIZE, n_traj)) for start in range(0, n_traj, BATCH_SIZE)]


def _map_ordered(fn, items, threads: int):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def simulate_trajectory(
    model: RipModel,
    psi0,
    t_max: float,
    dt: float,
    seed: int,
    record_every: int = 1,
    absorbing: bool = False,
    scheme: str = "midpoint",
) -> TrajectoryRecord:
    """Single quantum-jump realization, deterministic in ``(seed, dt, t_max)``.

    With ``absorbing=True`` the trajectory ends at its first jump
    (irreversible recombination); later samples are NaN.
    """
    check_dt(model, dt)
    psi0 = _normalize_psi(psi0, model)
    n_steps = _n_steps(t_max, dt)
    if n_steps % record_every:
        raise ValueError("record_every must divide the number of steps")
    out = _run_batch(model, psi0, dt, n_steps, record_every, [seed], absorbing, scheme, True)
    times = np.arange(n_steps // record_every + 1) * (record_every * dt)
    qs = out["qs"][0]
    return TrajectoryRecord(
        seed=int(seed),
        times=times,
        qs_expect=qs,
        jump_times=np.array(out["jump_steps"][0], dtype=float) * dt,
        rc_samples=model.k * qs,
        absorbed=bool(absorbing and out["jump_steps"][0]),
    )


def ensemble_average(
    model: RipModel,
    psi0,
    t_max: float,
    dt: float,
    n_traj: int,
    master_seed: int,
    record_every: int = 1,
    absorbing: bool = False,
    scheme: str = "midpoint",
    threads: int = 1,
    keep_records: bool = False,
) -> EnsembleResult:
    """Average ``n_traj`` trajectories seeded by ``trajectory_seed(master_seed, i)``."""
    check_dt(model, dt)
    psi0 = _normalize_psi(psi0, model)
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    n_steps = _n_steps(t_max, dt)
    if n_steps % record_every:
        raise ValueError("record_every must divide the number of steps")
    seeds = [trajectory_seed(master_seed, i) for i in range(n_traj)]

    def work(span):
        a, b = span
        return _run_batch(model, psi0, dt, n_steps, record_every, seeds[a:b], absorbing, scheme, keep_records)

    parts = _map_ordered(work, _batches(n_traj), threads)

    n_rec = n_steps // record_every + 1
    times = np.arange(n_rec) * (record_every * dt)
    bin_width = record_every * dt
    qs_sum = np.zeros(n_rec)
    qs_sq = np.zeros(n_rec)
    cnt_sum = np.zeros(n_rec - 1)
    cnt_sq = np.zeros(n_rec - 1)
    rho_sum = np.zeros((n_rec, model.dim, model.dim), dtype=complex)
    rho_sq = np.zeros((n_rec, model.dim, model.dim))
    alive = np.zeros(n_rec)
    counts = []
    records = [] if keep_records else None
    for part, (a, _) in zip(parts, _batches(n_traj)):
        q = np.nan_to_num(part["qs"], nan=0.0)
        qs_sum += q.sum(axis=0)
        qs_sq += (q**2).sum(axis=0)
        c = part["bin_counts"]
        cnt_sum += c.sum(axis=0)
        cnt_sq += (c.astype(float) ** 2).sum(axis=0)
        rho_sum += part["rho_sum"]
        rho_sq += part["rho_sq"]
        alive += part["alive_rec"]
        counts.append(c.sum(axis=1))
        if records is not None:
            for i, steps in enumerate(part["jump_steps"]):
                qi = part["qs"][i]
                records.append(
                    TrajectoryRecord(
                        seed=seeds[a + i],
                        times=times,
                        qs_expect=qi,
                        jump_times=np.array(steps, dtype=float) * dt,
                        rc_samples=model.k * qi,
                        absorbed=bool(absorbing and steps),
                    )
                )

    with np.errstate(invalid="ignore", divide="ignore"):
        mean_qs = qs_sum / alive
        var_qs = qs_sq / alive - mean_qs**2
        qs_se = np.sqrt(np.maximum(var_qs, 0.0) / (alive - 1)) if n_traj > 1 else np.full(n_rec, np.nan)
        rate = cnt_sum / n_traj / bin_width
        var_c = cnt_sq / n_traj - (cnt_sum / n_traj) ** 2
        rate_se = np.sqrt(np.maximum(var_c, 0.0) / (n_traj - 1)) / bin_width if n_traj > 1 else np.full(n_rec - 1, np.nan)
        rho_mean = rho_sum / alive[:, None, None]
        var_rho = rho_sq / alive[:, None, None] - np.abs(rho_mean) ** 2
        rho_se = np.sqrt(np.maximum(var_rho, 0.0).sum(axis=(1, 2)) / (alive - 1)) if n_traj > 1 else np.full(n_rec, np.nan)

    return EnsembleResult(
        n_traj=n_traj,
        master_seed=int(master_seed),
        times=times,
        mean_qs=mean_qs,
        qs_stderr=qs_se,
        mean_jump_rate=rate,
        jump_rate_stderr=rate_se,
        rho_estimate=rho_mean,
        rho_stderr=rho_se,
        jump_counts=np.concatenate(counts),
        survival=alive / n_traj,
        absorbing=absorbing,
        records=records,
        k=model.k,
    )


@dataclass(frozen=True, eq=False)
class CorrelationAnalytic:
    """Two-time recombination-current correlation from the Liouvillian.

    ``literal`` is ``k^2 (Tr exp(A tau) rho_s - S_inf^2)`` as printed; it is
    constant in ``tau`` because the generator preserves trace. ``projected``
    inserts ``Q_S`` before the trace,
    ``k^2 (Tr Q_S exp(A tau) rho_s - S_inf^2)``, with ``rho_s = Q_S rho_inf Q_S``
    and ``S_inf = Tr Q_S rho_inf``.
    """

    tau: NDArray[np.float64]
    literal: NDArray[np.float64]
    projected: NDArray[np.float64]
    long_time_limit: float
    rho_inf: NDArray[np.complex128] = field(repr=False)


def correlation_analytic(model: RipModel, tau_grid, rho_inf=None) -> CorrelationAnalytic:
    tau = np.asarray(tau_grid, dtype=float)
    if np.any(tau < 0):
        raise ValueError("tau values must be non-negative")
    if rho_inf is None:
        # without measurement nothing recombines and any state gives G = 0
        rho_inf = np.eye(model.dim) / model.dim if model.k == 0 else stationary_state(model, Variant.MEASUREMENT)
    rho_inf = np.asarray(rho_inf, dtype=complex)
    q = model.q_s
    k = model.k
    s_inf = np.trace(q @ rho_inf).real
    rho_s = q @ rho_inf @ q
    sop = build_superoperator(model, Variant.MEASUREMENT)
    v0 = vec(rho_s)
    lit, proj = [], []
    for t in tau:
        r = unvec(matrix_exponential(sop, t) @ v0, model.dim)
        lit.append(np.trace(r).real)
        proj.append(np.trace(q @ r).real)
    lit = k**2 * (np.array(lit) - s_inf**2)
    proj = k**2 * (np.array(proj) - s_inf**2)
    # exp(A tau) rho_s -> Tr(rho_s) rho_inf as tau -> infinity
    limit = k**2 * (np.trace(rho_s).real * s_inf - s_inf**2)
    return CorrelationAnalytic(tau, lit, proj, float(limit), rho_inf)


@dataclass(frozen=True, eq=False)
class CorrelationMC:
    """Monte Carlo estimate of the projected correlation function.

    The realized current ``dN/(2 dt)`` (normalized so its mean is
    ``k <Q_S>``) at time ``t`` is paired with its conditional mean
    ``k <Q_S>`` at ``t + tau``; by the tower property this has the same
    expectation as the current-current product for ``tau > 0`` with far
    less variance. Mean current squared is subtracted and errors use the
    delta method over independent trajectories.
    """

    tau: NDArray[np.float64]
    g: NDArray[np.float64]
    stderr: NDArray[np.float64]
    mean_rc: float
    mean_rc_stderr: float
    drift_z: float
    stationary: bool
    n_traj: int


def correlation_mc(
    model: RipModel,
    t_burn: float,
    t_max: float,
    dt: float,
    n_traj: int,
    tau_grid,
    master_seed: int,
    psi0=None,
    scheme: str = "midpoint",
    threads: int = 1,
) -> CorrelationMC:
    """Estimate ``G(tau)`` from jump records after a burn-in of ``t_burn``.

    ``t_max`` is the length of the averaging window that follows the
    burn-in. ``psi0`` defaults to the first singlet basis state. A drift
    test compares mean current between the two window halves; a shift of
    more than four standard errors marks the run non-stationary and warns.
    """
    check_dt(model, dt)
    if n_traj < 2:
        raise ValueError("n_traj must be at least 2")
    if psi0 is None:
        w, v = np.linalg.eigh(model.q_s)
        psi0 = v[:, -1]
    psi0 = _normalize_psi(psi0, model)
    tau = np.asarray(tau_grid, dtype=float)
    shifts = np.rint(tau / dt).astype(int)
    if np.any(shifts < 0) or np.any(np.abs(shifts * dt - tau) > 1e-9 * np.maximum(1.0, tau)):
        raise ValueError("tau grid must contain non-negative multiples of dt")
    n_burn = _n_steps(t_burn, dt) if t_burn > 0 else 0
    n_win = _n_steps(t_max, dt)
    if n_win < 2:
        raise ValueError("averaging window too short")
    max_s = int(shifts.max())
    n_total = n_burn + n_win + max_s
    k = model.k
    t_win = n_win * dt
    seeds = [trajectory_seed(master_seed, i) for i in range(n_traj)]

    def work(span):
        a, b = span
        n = b - a
        stepper = _Stepper(model, dt, scheme)
        draws = _Draws(seeds[a:b])
        psi = np.repeat(psi0[None, :], n, axis=0)
        ring = max_s + 1
        flags = np.zeros((n, ring), dtype=np.int64)
        acc = np.zeros((n, len(shifts)))
        q_first = np.zeros(n)
        q_second = np.zeros(n)
        half = n_burn + n_win // 2
        lag0 = shifts == 0
        q_prev = None
        for m in range(n_total + 1):
            q = stepper.expect(psi)
            if m >= n_burn:
                # a jump flagged at step f happened near (f - 1/2) dt; for tau > 0
                # pair it with <Q_S> interpolated to (f - 1/2) dt + tau
                q_lag = q if q_prev is None else 0.5 * (q + q_prev)
                past = flags[:, (m - shifts) % ring]
                acc += past * np.where(lag0[None, :], q[:, None], q_lag[:, None])
                if m < n_burn + n_win:
                    if m < half:
                        q_first += q
                    else:
                        q_second += q
            # flag slot m + 1 is reused from m + 1 - ring, clear it first
            flags[:, (m + 1) % ring] = 0
            if m == n_total:
                break
            u = draws.next()
            q_prev = q
            psi, count = stepper.step(psi, u, q)
            if n_burn <= m + 1 < n_burn + n_win:
                flags[:, (m + 1) % ring] = count
        return acc, q_first, q_second

    parts = _map_ordered(work, _batches(n_traj), threads)
    acc = np.concatenate([p[0] for p in parts])
    q_first = np.concatenate([p[1] for p in parts])
    q_second = np.concatenate([p[2] for p in parts])

    n_half1 = n_win // 2
    n_half2 = n_win - n_half1
    qbar_i = (q_first + q_second) / n_win
    qbar = qbar_i.mean()
    x_i = (k / 2.0) * acc / t_win
    g = x_i.mean(axis=0) - (k * qbar) ** 2
    y_i = x_i - 2 * k**2 * qbar * qbar_i[:, None]
    se = y_i.std(axis=0, ddof=1) / math.sqrt(n_traj)

    d_i = k * (q_first / n_half1 - q_second / n_half2)
    d_se = d_i.std(ddof=1) / math.sqrt(n_traj)
    drift_z = float(d_i.mean() / d_se) if d_se > 0 else 0.0
    stationary = abs(drift_z) <= 4.0
    if not stationary:
        warnings.warn(
            f"mean recombination current drifts across the averaging window (z={drift_z:.1f}); increase t_burn",
            RuntimeWarning,
            stacklevel=2,
        )
    return CorrelationMC(
        tau=tau,
        g=g,
        stderr=se,
        mean_rc=float(k * qbar),
        mean_rc_stderr=float(k * qbar_i.std(ddof=1) / math.sqrt(n_traj)),
        drift_z=drift_z,
        stationary=stationary,
        n_traj=n_traj,
    )
