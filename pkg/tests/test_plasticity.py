import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import spearmanr

from gateon import numerics as nx
from gateon.errors import ContractViolation
from gateon.network import GatedNetwork
from gateon.plasticity import (
    Availability,
    ObstructedOptimizer,
    RelevanceVariant,
    availability_update,
    compute_relevance,
    normalize_relevance,
    recovery_time,
    relevance_n_grad,
    write_availability_csv,
)

from helpers import neuron_zeroing_oracle, parameter_zeroing_oracle

finite_mu = arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 1e6))


# -- normalization ------------------------------------------------------------

def test_normalize_examples():
    assert np.allclose(normalize_relevance([1.0, 1.0, 2.0]), [0.75, 0.75, 1.5])
    assert np.allclose(normalize_relevance([0.0, 0.0]), [0.0, 0.0])
    assert np.allclose(normalize_relevance([3.0, 1.0], unit_count=10), [7.5, 2.5])


def test_normalize_rejects_negative():
    with pytest.raises(ContractViolation):
        normalize_relevance([1.0, -0.1])


@given(finite_mu, st.floats(1e-3, 1e3))
def test_normalize_scale_invariant(mu, c):
    assert np.allclose(normalize_relevance(mu), normalize_relevance(mu * c), rtol=1e-9, atol=1e-9)


@given(finite_mu)
def test_normalize_conserves_count(mu):
    norm = normalize_relevance(mu)
    if mu.sum() > 0:
        assert np.isclose(norm.sum(), mu.size)
        assert np.all(norm <= mu.size + 1e-9)
    else:
        assert np.all(norm == 0)


# -- availability -------------------------------------------------------------

def test_availability_update_examples():
    assert np.isclose(availability_update(np.array([1.0]), np.array([2.0]), 0.01, 0.0)[0], 0.98)
    assert np.isclose(availability_update(np.array([0.5]), np.array([0.0]), 0.1, 1.0)[0], 0.55)
    assert availability_update(np.array([0.99]), np.array([0.0]), 0.5, 1.0)[0] == 1.0
    assert availability_update(np.array([0.5]), np.array([300.0]), 0.01, 0.0)[0] == 0.0


def test_availability_update_rejects_negative_rate():
    with pytest.raises(ContractViolation):
        availability_update(np.ones(2), np.ones(2), -0.1, 0.0)


@given(arrays(np.float64, 10, elements=st.floats(0, 1)),
       arrays(np.float64, 10, elements=st.floats(0, 50)),
       st.floats(0, 0.1), st.floats(0, 1))
def test_availability_stays_in_unit_interval(A, mu, eta, eps):
    out = availability_update(A, mu, eta, eps)
    assert np.all((out >= 0) & (out <= 1))


@given(arrays(np.float64, 10, elements=st.floats(0, 1)),
       arrays(np.float64, 10, elements=st.floats(0, 50)), st.floats(0, 0.1))
def test_epsilon_zero_never_increases(A, mu, eta):
    assert np.all(availability_update(A, mu, eta, 0.0) <= A)


@given(arrays(np.float64, 10, elements=st.floats(0, 50)), st.floats(0, 0.1), st.floats(0, 1))
def test_zero_is_a_fixed_point(mu, eta, eps):
    assert np.all(availability_update(np.zeros(10), mu, eta, eps) == 0)


@given(arrays(np.float64, 10, elements=st.floats(0, 0.99)), st.floats(1e-4, 0.1))
def test_one_is_a_fixed_point_below_threshold(mu, eta):
    assert np.all(availability_update(np.ones(10), mu, eta, 1.0) == 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(1.5, 20), st.floats(1e-3, 0.05))
def test_fixed_points_are_attracting(a0, mu, eta):
    n_down = int(math.ceil(20 / (eta * (mu - 1)))) + 1
    n_up = int(math.ceil(math.log(1 / a0) / math.log1p(eta))) + 1
    down = np.full(n_down, np.nan)
    A = np.array([a0])
    for t in range(n_down):
        A = availability_update(A, np.array([mu]), eta, 1.0)
        down[t] = A[0]
    assert np.all(np.diff(down) <= 0) and down[-1] < 1e-6
    A = np.array([a0])
    for _ in range(n_up):
        A = availability_update(A, np.array([0.0]), eta, 1.0)
    assert A[0] == 1.0


def test_recovery_time_example():
    T = recovery_time(100, 2.0, 0.0, 1.0, 0.01)
    assert np.isclose(T, -100 * math.log(0.99) / math.log(1.01))
    assert 100 < T < 102


def test_recovery_time_preconditions():
    with pytest.raises(ContractViolation):
        recovery_time(10, 0.5, 0.0, 1.0, 0.01)
    with pytest.raises(ContractViolation):
        recovery_time(10, 500.0, 0.0, 1.0, 0.01)


def simulate_recovery(T: int, a: float, b: float, eps: float, eta: float, a0: float = 0.5) -> int:
    A = np.array([a0])
    for _ in range(T):
        A = availability_update(A, np.array([a]), eta, eps)
    n = 0
    while A[0] < a0 * (1 - 1e-12):
        A = availability_update(A, np.array([b]), eta, eps)
        n += 1
    return n


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.floats(1.05, 5), st.floats(0, 0.95), st.floats(1e-3, 0.05))
def test_simulated_recovery_matches_closed_form(T, a, b, eta):
    eps = 1.0
    assume(b < eps < a)
    assert abs(simulate_recovery(T, a, b, eps, eta) - recovery_time(T, a, b, eps, eta)) <= 1


def _net(batch_norm=False, gate_output=False):
    net = GatedNetwork.mlp([6, 5, 4, 3], batch_norm=batch_norm, gate_output=gate_output, seed=7)
    net.allocate_context()
    return net


def _batch(n_in=6, n_out=3, n=16, seed=0):
    r = nx.Rng(seed)
    return r.normal((n, n_in)), r.integers(0, n_out, n)


def test_availability_shapes_by_granularity():
    net = _net(batch_norm=True)
    neuron = Availability(net, "neuron")
    assert [a.shape for a in neuron.A] == [(5,), (4,), (3,)]
    param = Availability(net, "parameter")
    assert set(param.A[0]) == {"w", "b", "gamma", "beta"}
    assert param.unit_count(0) == 5 * 6 + 5 + 5 + 5
    with pytest.raises(ContractViolation):
        Availability(net, "synapse")


def test_relevance_shapes_and_non_negativity():
    net = _net(batch_norm=True)
    x, y = _batch()
    net.loss_and_grad(x, y, 0)
    for variant in RelevanceVariant:
        rel = compute_relevance(net, variant)
        assert len(rel) == len(net.unit_layers)
        for r, layer in zip(rel, net.unit_layers):
            if variant.per_parameter:
                assert all(r[n].shape == layer.params[n].shape for n in r)
                assert all(np.all(v >= 0) for v in r.values())
            else:
                assert r.shape == (layer.n_units,) and np.all(r >= 0)


def test_gated_off_neuron_has_zero_relevance():
    net = _net()
    net.layers[0].params["v"][2, 0] = -1.0
    x, y = _batch()
    net.loss_and_grad(x, y, 0)
    for variant in ("n_grad", "n_layerwise", "n_activity"):
        assert compute_relevance(net, variant)[0][2] == 0.0


def test_n_activity_value():
    net = GatedNetwork.mlp([2, 1, 2], seed=0)
    net.allocate_context()
    layer = net.layers[0]
    layer.params["w"][:] = [[1.0, 0.0]]
    layer.params["b"][:] = 0.0
    layer.params["v"][0, 0] = 20.0
    net.loss_and_grad(np.array([[1.5, 0.0], [0.5, 0.0]]), np.array([0, 1]), 0)
    assert np.isclose(compute_relevance(net, "n_activity")[0][0], (1.5 ** 2 + 0.5 ** 2) / 2)


def test_n_layerwise_last_layer_falls_back_to_n_grad():
    net = _net()
    x, y = _batch()
    net.loss_and_grad(x, y, 0)
    assert np.allclose(compute_relevance(net, "n_layerwise")[-1], relevance_n_grad(net)[-1])


def test_n_layerwise_value():
    net = _net()
    x, y = _batch()
    net.loss_and_grad(x, y, 0)
    w_next = net.layers[1].params["w"]
    x0 = net.layers[0].cache["out"]
    expect = (w_next ** 2).sum(axis=0) / w_next.shape[0] * (x0 ** 2).mean(axis=0)
    assert np.allclose(compute_relevance(net, "n_layerwise")[0], expect)


def test_relevance_on_convnet():
    net = GatedNetwork.convnet(channels=(2, 3), hidden=(5,), seed=1)
    net.allocate_context()
    x, y = _batch(784, 10, 4)
    net.loss_and_grad(x, y, 0)
    for variant in RelevanceVariant:
        rel = compute_relevance(net, variant)
        assert len(rel) == 4
    assert compute_relevance(net, "n_layerwise")[1].shape == (3,)


def test_taylor_relevance_tracks_zeroing_oracle():
    rng = nx.Rng(3)
    net = GatedNetwork.mlp([10, 12, 4], seed=2)
    net.allocate_context()
    teacher = GatedNetwork.mlp([10, 12, 4], seed=99, use_gates=False)
    teacher.allocate_context()
    x = rng.normal((128, 10))
    y = teacher.predict(x, 0)
    t, o = parameter_zeroing_oracle(net, x, y, 0)
    assert spearmanr(t, o)[0] > 0.8
    t, o = neuron_zeroing_oracle(net, x, y, 0)
    assert spearmanr(t, o)[0] > 0.8


def test_frozen_parameters_do_not_move():
    net = _net()
    avail = Availability(net, "neuron")
    avail.fill(0.0)
    avail.A[0][1] = 1.0
    opt = ObstructedOptimizer(net)
    w0 = [l.params["w"].copy() for l in net.unit_layers]
    v0 = net.layers[0].params["v"].copy()
    x, y = _batch()
    for _ in range(3):
        net.loss_and_grad(x, y, 0)
        opt.step(avail)
    changed = ~np.isclose(net.layers[0].params["w"], w0[0]).all(axis=1)
    assert list(np.flatnonzero(changed)) in ([1], [])
    assert np.array_equal(net.layers[1].params["w"], w0[1])
    assert np.array_equal(net.layers[2].params["w"], w0[2])
    # gating weights are never obstructed
    assert not np.array_equal(net.layers[0].params["v"], v0)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_full_availability_equals_plain_optimizer(kind):
    a, b = _net(), _net()
    avail = Availability(a, "parameter")
    oa, ob = ObstructedOptimizer(a, kind=kind, lr=0.01), ObstructedOptimizer(b, kind=kind, lr=0.01)
    x, y = _batch()
    for _ in range(3):
        a.loss_and_grad(x, y, 0)
        oa.step(avail)
        b.loss_and_grad(x, y, 0)
        ob.step(None)
    for (_, _, p), (_, _, q) in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p, q)


def test_sgd_step_is_lr_times_availability_times_gradient():
    net = _net()
    avail = Availability(net, "neuron")
    avail.A[0][:] = 0.25
    x, y = _batch()
    net.loss_and_grad(x, y, 0)
    w = net.layers[0].params["w"].copy()
    g = net.layers[0].grads["w"].copy()
    ObstructedOptimizer(net, lr=0.1, kind="sgd").step(avail)
    assert np.allclose(net.layers[0].params["w"], w - 0.1 * 0.25 * g)


def test_optimizer_reset_clears_moments():
    net = _net()
    opt = ObstructedOptimizer(net)
    x, y = _batch()
    net.loss_and_grad(x, y, 0)
    opt.step()
    assert opt.m and opt.t == 1
    opt.reset()
    assert not opt.m and opt.t == 0


def test_optimizer_skips_v_without_gates():
    net = GatedNetwork.mlp([6, 5, 3], use_gates=False)
    net.allocate_context()
    v0 = net.layers[0].params["v"].copy()
    x, y = _batch()
    net.loss_and_grad(x, y, 0)
    ObstructedOptimizer(net).step()
    assert np.array_equal(net.layers[0].params["v"], v0)


def test_optimizer_validation():
    with pytest.raises(ContractViolation):
        ObstructedOptimizer(_net(), kind="rmsprop")
    with pytest.raises(ContractViolation):
        ObstructedOptimizer(_net(), modulate="both")


def test_availability_update_in_network_and_csv(tmp_path):
    net = _net()
    avail = Availability(net, "neuron", eta_A=0.1)
    x, y = _batch()
    net.loss_and_grad(x, y, 0)
    norms = avail.update(compute_relevance(net, "n_grad"))
    assert all(np.isclose(n.sum(), n.size) or n.sum() == 0 for n in norms)
    assert avail.mean() < 1.0
    rows = list(avail.snapshot_rows(1))
    assert len(rows) == 5 + 4 + 3
    write_availability_csv(tmp_path / "a.csv", rows)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "layer,unit,A,step"


def test_parameter_granularity_update():
    net = _net()
    avail = Availability(net, "parameter", eta_A=0.05)
    x, y = _batch()
    net.loss_and_grad(x, y, 0)
    norms = avail.update(compute_relevance(net, "p_taylor"))
    total = sum(v.sum() for v in norms[0].values())
    assert np.isclose(total, avail.unit_count(0))
    assert avail.A[0]["w"].min() < 1.0


def test_conv_layers_use_their_own_rate():
    net = GatedNetwork.convnet(channels=(2,), hidden=(4,), seed=0)
    net.allocate_context()
    avail = Availability(net, eta_A=0.01, eta_A_conv=0.004)
    assert avail.eta_A == [0.004, 0.01, 0.01]
