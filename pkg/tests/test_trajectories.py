import math

import numpy as np
import pytest
import scipy.linalg
from scipy.integrate import trapezoid

from ripzeno.dynamics import propagate
from ripzeno.models import RipModel, ToyModelParams, build_toy_model
from ripzeno.trajectories import (
    BATCH_SIZE,
    check_dt,
    correlation_analytic,
    correlation_mc,
    ensemble_average,
    expect_qs,
    jump_step,
    simulate_trajectory,
    trajectory_seed,
)

S = np.array([1.0, 0.0], dtype=complex)


def test_trajectory_seed_deterministic_and_distinct():
    assert trajectory_seed(5, 3) == trajectory_seed(5, 3)
    seeds = {trajectory_seed(5, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert trajectory_seed(5, 0) != trajectory_seed(6, 0)


def test_check_dt(toy):
    check_dt(toy, 0.005)
    with pytest.raises(ValueError, match="0.01/\\(2k\\)"):
        check_dt(toy.with_rate(10.0), 0.005)
    big_h = build_toy_model(ToyModelParams(omega=0.0, Omega=10.0, k_S=0.1))
    with pytest.raises(ValueError, match="\\|\\|H\\|\\|"):
        check_dt(big_h, 0.005)
    with pytest.raises(ValueError):
        check_dt(toy, 0.0)


def test_expect_qs_batch(toy):
    psi = np.array([[1, 0], [0.6, 0.8], [0, 1]], dtype=complex)
    assert np.allclose(expect_qs(psi, toy), [1.0, 0.36, 0.0])


@pytest.mark.parametrize("scheme", ["first_order", "midpoint"])
def test_jump_and_no_jump_branches(scheme, toy):
    psi = np.array([0.6, 0.8j])
    jumped_state, jumped = jump_step(psi, toy, 0.005, 0.0, scheme=scheme)
    assert jumped
    assert np.linalg.norm(jumped_state) == pytest.approx(1.0)
    if scheme == "first_order":
        assert np.allclose(jumped_state, [1.0, 0.0])
    stay, jumped = jump_step(psi, toy, 0.005, 0.999, scheme=scheme)
    assert not jumped
    assert np.linalg.norm(stay) == pytest.approx(1.0)


def test_first_order_rule(toy):
    psi = np.array([0.6, 0.8], dtype=complex)
    dt = 0.004
    q = 0.36
    p = 2 * toy.k * q * dt
    assert jump_step(psi, toy, dt, p * (1 - 1e-9))[1]
    assert not jump_step(psi, toy, dt, p * (1 + 1e-9))[1]
    new, _ = jump_step(psi, toy, dt, 0.5)
    h, qs = toy.hamiltonian, toy.q_s
    drift = psi - 1j * dt * h @ psi - toy.k * dt * (qs @ psi - q * psi)
    assert np.allclose(new, drift / np.linalg.norm(drift))


def test_midpoint_rule(toy):
    psi = np.array([0.6, 0.8], dtype=complex)
    dt = 0.004
    u = scipy.linalg.expm(-1j * dt * (toy.hamiltonian - 1j * toy.k * toy.q_s))
    p = 1 - np.linalg.norm(u @ psi) ** 2
    assert jump_step(psi, toy, dt, p * (1 - 1e-9), scheme="midpoint")[1]
    new, jumped = jump_step(psi, toy, dt, p * (1 + 1e-9), scheme="midpoint")
    assert not jumped
    assert np.allclose(new, u @ psi / np.linalg.norm(u @ psi))


def test_unknown_scheme(toy):
    with pytest.raises(ValueError, match="scheme"):
        jump_step(S, toy, 0.001, 0.5, scheme="euler")


def test_simulate_trajectory_reproducible(toy):
    a = simulate_trajectory(toy, S, 5.0, 0.005, seed=42)
    b = simulate_trajectory(toy, S, 5.0, 0.005, seed=42)
    c = simulate_trajectory(toy, S, 5.0, 0.005, seed=43)
    assert np.array_equal(a.qs_expect, b.qs_expect)
    assert np.array_equal(a.jump_times, b.jump_times)
    assert not np.array_equal(a.qs_expect, c.qs_expect)
    assert np.array_equal(a.rc_samples, toy.k * a.qs_expect)
    assert a.times[-1] == pytest.approx(5.0)


def test_trajectory_after_jump_is_singlet(toy):
    rec = simulate_trajectory(toy, S, 5.0, 0.005, seed=1, scheme="first_order")
    assert len(rec.jump_times) > 0
    idx = np.rint(rec.jump_times / 0.005).astype(int)
    assert np.allclose(rec.qs_expect[idx], 1.0)


def test_input_validation(toy):
    with pytest.raises(ValueError, match="normalized"):
        simulate_trajectory(toy, np.array([1.0, 1.0]), 1.0, 0.005, seed=0)
    with pytest.raises(ValueError, match="multiple"):
        ensemble_average(toy, S, 1.0012, 0.005, 10, 0)
    with pytest.raises(ValueError):
        ensemble_average(toy, S, 1.0, 0.005, 0, 0)
    with pytest.raises(ValueError, match="record_every"):
        ensemble_average(toy, S, 1.0, 0.005, 4, 0, record_every=3)


def test_ensemble_records_match_single_trajectories(toy):
    ens = ensemble_average(toy, S, 2.0, 0.005, 3, master_seed=9, keep_records=True)
    for i, rec in enumerate(ens.records):
        assert rec.seed == trajectory_seed(9, i)
        single = simulate_trajectory(toy, S, 2.0, 0.005, seed=rec.seed)
        # batch width changes BLAS rounding, never the random draws
        assert np.allclose(single.qs_expect, rec.qs_expect, rtol=0, atol=1e-12)
        assert np.array_equal(single.jump_times, rec.jump_times)


def test_single_trajectory_ensemble(toy):
    ens = ensemble_average(toy, S, 1.0, 0.005, 1, master_seed=2, keep_records=True)
    assert np.array_equal(ens.mean_qs, ens.records[0].qs_expect)
    assert np.all(np.isnan(ens.qs_stderr))


def test_thread_count_does_not_change_results(toy):
    n = BATCH_SIZE + 37
    a = ensemble_average(toy, S, 1.0, 0.005, n, master_seed=4, record_every=10, threads=1)
    b = ensemble_average(toy, S, 1.0, 0.005, n, master_seed=4, record_every=10, threads=3)
    for name in ("mean_qs", "qs_stderr", "mean_jump_rate", "jump_rate_stderr", "rho_estimate", "jump_counts"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


@pytest.mark.parametrize("scheme", ["midpoint", "first_order"])
def test_ensemble_reproduces_master_equation(scheme, toy):
    dt, t_max = 0.005, 3.0
    ens = ensemble_average(toy, S, t_max, dt, 3000, master_seed=11, record_every=10, scheme=scheme)
    ref = propagate(toy, "measurement", toy.singlet_state(), t_max, n_points=len(ens.times))
    dev = np.abs(ens.mean_qs - ref.singlet_prob)
    assert np.all(dev[1:] < 5 * ens.qs_stderr[1:])
    rho_dev = np.linalg.norm(ens.rho_estimate - ref.states, axis=(1, 2))
    assert np.all(rho_dev[1:] < 5 * ens.rho_stderr[1:] + 1e-12)


def test_ensemble_jump_rate_matches_flux(toy):
    dt, t_max = 0.005, 2.0
    ens = ensemble_average(toy, S, t_max, dt, 3000, master_seed=3, record_every=20)
    ref = propagate(toy, "measurement", toy.singlet_state(), t_max, n_points=len(ens.times))
    # bin average of 2 k <Q_S>, trapezoid on the fine grid
    fine = propagate(toy, "measurement", toy.singlet_state(), t_max, n_points=401)
    flux = 2 * toy.k * fine.singlet_prob
    expect = np.array([trapezoid(flux[i * 20 : (i + 1) * 20 + 1], fine.times[i * 20 : (i + 1) * 20 + 1]) for i in range(len(ref.times) - 1)]) / (20 * dt)
    z = (ens.mean_jump_rate - expect) / ens.jump_rate_stderr
    assert np.all(np.abs(z) < 5)


def test_absorbing_survival_matches_haberkorn_trace(toy):
    dt, t_max = 0.005, 3.0
    ens = ensemble_average(toy, S, t_max, dt, 4000, master_seed=5, record_every=20, absorbing=True)
    hab_model = RipModel(toy.space, toy.hamiltonian, toy.q_s, toy.q_t, toy.k, 0.0)
    ref = propagate(hab_model, "haberkorn", toy.singlet_state(), t_max, n_points=len(ens.times))
    se = np.sqrt(ref.trace * (1 - ref.trace) / ens.n_traj)
    assert np.all(np.abs(ens.survival - ref.trace)[1:] < 5 * se[1:])
    assert np.all(ens.jump_counts <= 1)


def test_constant_singlet_jump_count_mean():
    m = build_toy_model(ToyModelParams(omega=1.0, Omega=0.0, k_S=2.0))
    ens = ensemble_average(m, S, 2.0, 0.0025, 2000, master_seed=8, record_every=800)
    counts = ens.jump_counts
    mean, se = counts.mean(), counts.std(ddof=1) / math.sqrt(len(counts))
    assert abs(mean - 2 * 2.0 * 2.0) < 4 * se
    assert counts.var(ddof=1) == pytest.approx(8.0, rel=0.15)


def test_correlation_analytic_toy(toy):
    tau = np.linspace(0, 6, 61)
    ca = correlation_analytic(toy, tau)
    assert np.allclose(ca.rho_inf, np.eye(2) / 2)
    assert np.ptp(ca.literal) < 1e-12
    assert ca.literal[0] == pytest.approx(toy.k**2 / 4)
    assert ca.projected[0] == pytest.approx(toy.k**2 / 4)
    assert ca.long_time_limit == pytest.approx(0.0, abs=1e-14)
    # rho_s = |S><S| / 2, so G(tau) = k^2 (<Q_S>_S(tau) / 2 - 1/4)
    ref = propagate(toy, "measurement", toy.singlet_state(), 6.0, n_points=61)
    assert np.allclose(ca.projected, toy.k**2 * (ref.singlet_prob / 2 - 0.25), atol=1e-8)


def test_correlation_analytic_without_measurement():
    m = build_toy_model(ToyModelParams(k_S=0.0))
    ca = correlation_analytic(m, [0.0, 1.0])
    assert np.all(ca.literal == 0) and np.all(ca.projected == 0)
    with pytest.raises(ValueError):
        correlation_analytic(m, [-1.0])


def test_correlation_mc_small(toy):
    tau = np.arange(0, 21) * 0.1
    kw = dict(t_burn=5.0, t_max=10.0, dt=0.005, n_traj=600, tau_grid=tau, master_seed=3)
    a = correlation_mc(toy, threads=1, **kw)
    b = correlation_mc(toy, threads=2, **kw)
    assert np.array_equal(a.g, b.g) and np.array_equal(a.stderr, b.stderr)
    ca = correlation_analytic(toy, tau)
    z = (a.g - ca.projected) / a.stderr
    assert np.mean(np.abs(z) < 5) >= 0.95
    assert a.mean_rc == pytest.approx(toy.k / 2, abs=5 * a.mean_rc_stderr)
    assert a.stationary


def test_correlation_mc_validation(toy):
    with pytest.raises(ValueError, match="multiples"):
        correlation_mc(toy, 1.0, 2.0, 0.005, 10, [0.0123], master_seed=1)
    with pytest.raises(ValueError):
        correlation_mc(toy, 1.0, 2.0, 0.005, 1, [0.0], master_seed=1)


def test_correlation_mc_flags_short_burn_in():
    m = build_toy_model(ToyModelParams(omega=1.0, Omega=0.3, k_S=0.2))
    with pytest.warns(RuntimeWarning, match="t_burn"):
        r = correlation_mc(m, 0.0, 10.0, 0.01, 2000, [0.0], master_seed=2)
    assert not r.stationary


def test_midpoint_second_jump_in_step():
    from ripzeno.trajectories import _Stepper

    m = build_toy_model(ToyModelParams(omega=0.0, Omega=0.0, k_S=2.0))
    dt = 0.0025
    st = _Stepper(m, dt, "midpoint")
    psi = np.array([[1.0, 0.0]], dtype=complex)
    p1 = 1 - math.exp(-2 * m.k * dt)
    p2 = 1 - math.exp(-m.k * dt)
    # u / p1 < p2 triggers the second jump in the remaining half step
    assert st.step(psi, np.array([0.5 * p1 * p2]))[1][0] == 2
    assert st.step(psi, np.array([p1 * (p2 + 1e-6)]))[1][0] == 1
    assert st.step(psi, np.array([p1 * 1.0001]))[1][0] == 0


def test_absorbing_counts_at_most_one():
    m = build_toy_model(ToyModelParams(omega=0.0, Omega=0.0, k_S=2.0))
    ens = ensemble_average(m, S, 1.0, 0.0025, 500, master_seed=1, absorbing=True, keep_records=True)
    assert ens.jump_counts.max() == 1
    assert all(len(r.jump_times) <= 1 for r in ens.records)
