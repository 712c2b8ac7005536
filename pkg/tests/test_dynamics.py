import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_density
from ripzeno.dynamics import (
    Variant,
    as_variant,
    dissipator,
    max_step,
    propagate,
    recombination_yields,
    rhs,
    rhs_haberkorn,
    rhs_measurement,
    rk4_step_matrix,
    singlet_probability,
)
from ripzeno.errors import PropagationError
from ripzeno.models import MultispinModelParams, ToyModelParams, build_multispin_model, build_toy_model


def test_variant_parsing():
    assert as_variant("measurement") is Variant.MEASUREMENT
    assert as_variant(Variant.HABERKORN) is Variant.HABERKORN
    with pytest.raises(ValueError):
        as_variant("lindblad")


def test_dissipator_of_projector_is_double_commutator(rng, multispin):
    rho = random_density(rng, 8)
    q = multispin.q_s
    dc = q @ (q @ rho - rho @ q) - (q @ rho - rho @ q) @ q
    assert np.allclose(dissipator(q, rho), dc)


def test_measurement_rhs_toy_by_hand():
    m = build_toy_model(ToyModelParams(omega=0.7, Omega=1.3, k_S=2.0, k_T=0.5))
    rho = np.array([[0.6, 0.1 + 0.2j], [0.1 - 0.2j, 0.4]])
    h = m.hamiltonian
    expect = -1j * (h @ rho - rho @ h)
    # [Q,[Q,rho]] only touches the coherences
    expect[0, 1] -= 2.5 * rho[0, 1]
    expect[1, 0] -= 2.5 * rho[1, 0]
    assert np.allclose(rhs_measurement(rho, m), expect)


def test_haberkorn_rhs_toy_by_hand():
    m = build_toy_model(ToyModelParams(omega=0.0, Omega=0.0, k_S=2.0, k_T=0.5))
    rho = np.array([[0.6, 0.1 + 0.2j], [0.1 - 0.2j, 0.4]])
    expect = np.array([[-2 * 2.0 * 0.6, -(2.0 + 0.5) * rho[0, 1]], [-(2.0 + 0.5) * rho[1, 0], -2 * 0.5 * 0.4]])
    assert np.allclose(rhs_haberkorn(rho, m), expect)


def test_rhs_rejects_wrong_shape(toy):
    with pytest.raises(ValueError):
        rhs(np.eye(3), toy, "measurement")


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(0, 3), st.floats(0, 50), st.floats(0, 5), st.integers(0, 2**32 - 1))
def test_measurement_rhs_traceless_and_hermitian(omega, big_omega, k_s, k_t, seed):
    m = build_toy_model(ToyModelParams(omega, big_omega, k_s, k_t))
    rho = random_density(np.random.default_rng(seed), 2)
    d = rhs_measurement(rho, m)
    assert abs(np.trace(d)) < 1e-10 * (1 + k_s + k_t)
    assert np.allclose(d, d.conj().T)


def test_haberkorn_trace_loss_is_recombination_flux(rng):
    m = build_multispin_model(MultispinModelParams(hyperfine_a=1.0, zeeman_b=0.4, k_S=1.3, k_T=0.7))
    rho = random_density(rng, 8)
    d = rhs_haberkorn(rho, m)
    flux = 2 * m.k_s * np.trace(rho @ m.q_s) + 2 * m.k_t * np.trace(rho @ m.q_t)
    assert np.isclose(np.trace(d), -flux)


def test_rk4_step_matrix_matches_taylor(toy):
    h = 0.01
    step = rk4_step_matrix(toy, "measurement", h)
    d = toy.dim
    # row-stacked generator assembled from the rhs itself
    gen = np.column_stack([rhs(np.eye(d * d)[i].reshape(d, d), toy, "measurement").reshape(-1) for i in range(d * d)])
    # for a linear generator one RK4 step is the 4th-order Taylor polynomial
    taylor = sum(np.linalg.matrix_power(h * gen, n) / math.factorial(n) for n in range(5))
    assert np.allclose(step, taylor, atol=1e-15)
    assert np.abs(step - scipy.linalg.expm(h * gen)).max() < 1e-10


@pytest.mark.parametrize("variant", ["measurement", "haberkorn"])
def test_propagate_against_matrix_exponential(variant):
    m = build_toy_model(ToyModelParams(omega=0.8, Omega=1.1, k_S=1.7, k_T=0.4))
    rho0 = np.array([[0.7, 0.2j], [-0.2j, 0.3]])
    res = propagate(m, variant, rho0, 6.0, n_points=61)
    d = m.dim
    gen = np.column_stack([rhs(np.eye(d * d)[i].reshape(d, d), m, variant).reshape(-1) for i in range(d * d)])
    for t, state in zip(res.times[::10], res.states[::10]):
        exact = (scipy.linalg.expm(gen * t) @ rho0.reshape(-1)).reshape(d, d)
        assert np.abs(state - exact).max() < 1e-8


def test_propagate_result_fields(toy):
    res = propagate(toy, "measurement", toy.singlet_state(), 3.0, n_points=31)
    assert res.times.shape == (31,)
    assert res.states.shape == (31, 2, 2)
    assert res.times[-1] == 3.0
    assert res.step <= max_step(toy)
    assert np.allclose(res.singlet_prob + res.triplet_prob, res.trace)
    assert res.purity[0] == pytest.approx(1.0)
    assert singlet_probability(res.states[0], toy) == 1.0


def test_unmeasured_toy_rabi_oscillation():
    # omega = 0, k = 0: <Q_S>(t) = cos^2(Omega t)
    m = build_toy_model(ToyModelParams(omega=0.0, Omega=1.0, k_S=0.0))
    res = propagate(m, "measurement", m.singlet_state(), 10.0, n_points=201)
    assert np.abs(res.singlet_prob - np.cos(res.times) ** 2).max() < 1e-8
    assert np.abs(res.purity - 1).max() < 1e-8


def test_propagate_argument_errors(toy):
    with pytest.raises(ValueError):
        propagate(toy, "measurement", toy.singlet_state(), -1.0)
    with pytest.raises(ValueError):
        propagate(toy, "measurement", toy.singlet_state(), 1.0, n_points=1)
    with pytest.raises(ValueError):
        propagate(toy, "measurement", toy.singlet_state(), 1.0, dt_hint=0.0)
    with pytest.raises(ValueError):
        propagate(toy, "measurement", np.eye(3) / 3, 1.0)


def test_step_halving_budget_exhausted(toy):
    with pytest.raises(PropagationError, match="halving"):
        propagate(toy, "measurement", toy.singlet_state(), 5.0, n_points=11, rtol=1e-30, max_halvings=2)


def test_invariant_violation_reported(toy):
    # a non-positive initial "state" trips the positivity guard
    with pytest.raises(PropagationError, match="positivity"):
        propagate(toy, "measurement", np.diag([1.5, -0.5]).astype(complex), 1.0, n_points=11)


def test_yields_sum_to_lost_trace():
    m = build_multispin_model(MultispinModelParams(hyperfine_a=1.0, zeeman_b=0.3, k_S=0.6, k_T=0.2))
    res = propagate(m, "haberkorn", m.singlet_state(), 30.0, n_points=3001)
    y_s, y_t = recombination_yields(res)
    assert y_s > 0 and y_t > 0
    assert y_s + y_t + res.trace[-1] == pytest.approx(1.0, abs=1e-6)


def test_yields_need_haberkorn(toy):
    res = propagate(toy, "measurement", toy.singlet_state(), 1.0, n_points=11)
    with pytest.raises(ValueError):
        recombination_yields(res)


def test_haberkorn_singlet_only_decays_at_2k():
    # Omega = 0, no mixing: a pure singlet population decays as exp(-2 k_S t)
    m = build_toy_model(ToyModelParams(omega=0.5, Omega=0.0, k_S=3.0))
    res = propagate(m, "haberkorn", m.singlet_state(), 1.0, n_points=101)
    assert np.allclose(res.singlet_prob, np.exp(-6.0 * res.times), rtol=1e-8)
