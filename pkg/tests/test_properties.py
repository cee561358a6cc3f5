"""Randomized invariants checked with hypothesis."""
import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gosh import autodiff as ad
from gosh.optim import discretize
from gosh.schedulers import ObjectiveSpec, objective_score
from gosh.sim import WAITING, ClusterState, jain_index, nearest_rank_percentile
from gosh.surrogate import ExplorationState, update_exploration

unit = st.floats(0.0, 1.0, allow_nan=False)
finite = st.floats(-1e3, 1e3, allow_nan=False)


@st.composite
def clusters(draw):
    n, m = draw(st.integers(1, 4)), draw(st.integers(1, 6))
    active = np.array(draw(st.lists(st.booleans(), min_size=m, max_size=m)))
    ram = np.array(draw(st.lists(st.floats(0.0, 50.0), min_size=m, max_size=m))) * active
    host_ram = np.array(draw(st.lists(st.floats(0.0, 100.0), min_size=n, max_size=n)))
    ids = draw(st.permutations(range(m)))
    state = ClusterState(0, np.zeros((n, 4)), np.zeros((m, 4)), active, np.full(m, WAITING),
                         ram, host_ram, list(ids))
    phi = draw(arrays(float, (m, n), elements=finite))
    return state, phi


@settings(max_examples=200, deadline=None)
@given(clusters())
def test_discretize_feasible_one_hot_and_idempotent(case):
    state, phi = case
    D = discretize(phi, state)
    assert set(np.unique(D)) <= {0.0, 1.0}
    assert np.all(D.sum(axis=1) <= 1)
    assert not D[~state.active].any()
    assert np.all((D * state.ram_demand[:, None]).sum(axis=0) <= state.host_ram + 1e-9)
    assert np.array_equal(discretize(D, state), D)


@given(st.lists(st.floats(0.0, 1e6), min_size=1, max_size=50))
def test_jain_index_bounds(xs):
    j = jain_index(xs)
    assert 1.0 / len(xs) - 1e-12 <= j <= 1.0 + 1e-12


@given(st.lists(finite, min_size=1, max_size=60), st.floats(0.0, 100.0), st.floats(0.0, 100.0))
def test_percentile_is_a_sample_and_monotone(xs, q1, q2):
    lo, hi = sorted((q1, q2))
    a, b = nearest_rank_percentile(xs, lo), nearest_rank_percentile(xs, hi)
    assert a in xs and b in xs and a <= b


@given(unit, unit, unit)
def test_objective_is_convex_mix(aec, art_norm, alpha):
    spec = ObjectiveSpec(alpha, 1.0 - alpha)
    o = objective_score(type("M", (), {"aec": aec, "art_norm": art_norm, "art": 0.0})(), spec)
    assert min(aec, art_norm) - 1e-12 <= o <= max(aec, art_norm) + 1e-12


@given(st.floats(0.01, 100.0), st.floats(0.0, 10.0), st.floats(0.0, 10.0), unit)
def test_exploration_scales_k_by_known_factors(k, ma, xi, psi):
    st_ = update_exploration(ExplorationState(k=k, xi_ma=ma, psi=psi), xi)
    assert any(abs(st_.k - k * f) <= 1e-12 * k for f in (0.9, 1.0, 1.1))
    assert min(ma, xi) - 1e-12 <= st_.xi_ma <= max(ma, xi) + 1e-12


@given(arrays(float, (3, 4), elements=finite), arrays(float, (4,), elements=finite))
def test_broadcast_add_gradient_sums_over_batch(a, b):
    ta, tb = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
    ga, gb = ad.grad(ad.tsum(ad.add(ta, tb)), [ta, tb])
    assert np.array_equal(ga.data, np.ones((3, 4)))
    assert np.array_equal(gb.data, np.full(4, 3.0))


@given(arrays(float, (2, 3), elements=st.floats(-5, 5)), arrays(float, (3, 2), elements=st.floats(-5, 5)))
def test_matmul_gradient_matches_closed_form(a, b):
    ta, tb = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
    ga, gb = ad.grad(ad.tsum(ad.matmul(ta, tb)), [ta, tb])
    np.testing.assert_allclose(ga.data, np.ones((2, 2)) @ b.T, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gb.data, a.T @ np.ones((2, 2)), rtol=1e-12, atol=1e-12)
