import math

import numpy as np
import pytest

from hflsim.flcore import (
    BackupMissingError,
    DeviceState,
    DivergenceError,
    HyperParams,
    LocalUpdate,
    MisroutedUpdateError,
    ServerState,
    TheoryConstants,
    aggregation_weights,
    async_merge,
    compensate_gradient,
    estimate_dissimilarity,
    fedavg_round,
    lambda_at,
    local_train,
    lr_bound_check,
    lr_schedule,
    membership,
    normalize_weights,
    sample_devices,
    sync_aggregate,
    tau_sampling_weights,
)
from hflsim.workloads import Dataset, LogisticRegression


def make_devices(rng, taus, m=30, d=4, c=3):
    devs = []
    for i, tau in enumerate(taus):
        shard = Dataset(rng.standard_normal((m + 5 * i, d)), rng.integers(0, c, m + 5 * i), c)
        devs.append(DeviceState(i, shard, float(len(shard)), tau))
    normalize_weights(devs)
    return devs


def upd(i, new, issued_round=0, arrival_round=0, g=None):
    new = np.asarray(new, dtype=float)
    g = np.zeros_like(new) if g is None else np.asarray(g, dtype=float)
    return LocalUpdate(i, issued_round, arrival_round, np.zeros_like(new), new, g, 0.1)


# ---------------------------------------------------------------- schedules

def test_lr_schedule_values():
    assert lr_schedule(0) == 0.1
    assert lr_schedule(9) == pytest.approx(0.01)
    assert lr_schedule(199, 0.1) == pytest.approx(0.1 / 200)
    assert lr_schedule(50, 0.3, "constant") == 0.3
    with pytest.raises(ValueError):
        lr_schedule(-1)


def test_lambda_at_values():
    assert lambda_at(0.5, 3, 3) == 0.5
    assert lambda_at(0.5, 5, 2) == pytest.approx(0.5 * math.exp(-3))
    assert lambda_at(0.5, 5, 2, rate=0.0) == 0.5
    assert lambda_at(0.5, 5, 2, rate=0.1) == pytest.approx(0.5 * math.exp(-0.3))
    assert lambda_at(0.5, 10**6, 0) == 0.0
    with pytest.raises(ValueError):
        lambda_at(0.5, 2, 3)


def test_hyperparams_validation():
    assert HyperParams().eta(4) == pytest.approx(0.02)
    for bad in (dict(lambda0=1.0), dict(lambda0=0.0), dict(E=0), dict(eta0=-1), dict(decay="cosine")):
        with pytest.raises(ValueError):
            HyperParams(**bad)


def test_membership_and_psi():
    rng = np.random.default_rng(0)
    devs = make_devices(rng, [0, 2, 0, 5])
    s1, s2, p1, p2 = membership(devs)
    assert s1 == [0, 2] and s2 == [1, 3]
    assert p1 + p2 == pytest.approx(1.0)
    assert p1 == pytest.approx((devs[0].weight + devs[2].weight))


# ---------------------------------------------------------------- local training

def sgd_oracle(workload, shard, w0, eta, epochs, bs, rng, mu=0.0):
    w = w0.copy()
    grads = []
    for _ in range(epochs):
        order = rng.permutation(len(shard))
        for lo in range(0, len(shard), bs):
            sub = shard.subset(order[lo : lo + bs])
            g = workload.gradient(w, sub) + mu * (w - w0)
            grads.append(g)
            w = w - eta * g
    return w, grads


def test_local_train_matches_plain_sgd_and_local_step_relation():
    rng = np.random.default_rng(1)
    dev = make_devices(rng, [0])[0]
    wl = LogisticRegression(4, 3)
    w0 = rng.standard_normal(wl.dim)
    u = local_train(dev, wl, w0, 0.05, 3, 8, np.random.default_rng(7), issued_round=4)
    w_ref, grads = sgd_oracle(wl, dev.shard, w0, 0.05, 3, 8, np.random.default_rng(7))
    np.testing.assert_allclose(u.new_params, w_ref, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(u.accum_gradient, np.sum(grads, axis=0), rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(u.new_params, w0 - u.eta * u.accum_gradient, atol=1e-10)
    np.testing.assert_allclose(u.last_gradient, grads[-1], rtol=1e-12)
    assert (u.issued_round, u.arrival_round, u.tau) == (4, 4, 0)
    np.testing.assert_array_equal(u.issued_params, w0)


def test_local_train_prox_term():
    rng = np.random.default_rng(2)
    dev = make_devices(rng, [3])[0]
    wl = LogisticRegression(4, 3)
    w0 = rng.standard_normal(wl.dim)
    u = local_train(dev, wl, w0, 0.05, 2, 16, np.random.default_rng(3), mu_prox=0.5)
    w_ref, _ = sgd_oracle(wl, dev.shard, w0, 0.05, 2, 16, np.random.default_rng(3), mu=0.5)
    np.testing.assert_allclose(u.new_params, w_ref, rtol=1e-12, atol=1e-14)
    assert u.arrival_round == 3
    plain = local_train(dev, wl, w0, 0.05, 2, 16, np.random.default_rng(3), mu_prox=0.0)
    assert not np.allclose(plain.new_params, u.new_params)


def test_local_train_zero_eta_and_errors():
    rng = np.random.default_rng(2)
    dev = make_devices(rng, [0])[0]
    wl = LogisticRegression(4, 3)
    u = local_train(dev, wl, np.ones(wl.dim), 0.0, 1, 8, rng)
    np.testing.assert_array_equal(u.new_params, np.ones(wl.dim))
    np.testing.assert_array_equal(u.accum_gradient, 0.0)
    with pytest.raises(ValueError):
        local_train(dev, wl, np.ones(wl.dim), 0.1, 1, 8, rng, mu_prox=-1)


# ---------------------------------------------------------------- aggregation

def test_sync_aggregate_weighted_mean_renormalized():
    weights = {0: 0.1, 1: 0.3, 2: 0.6}
    ups = [upd(2, [3.0, 0.0]), upd(0, [1.0, 1.0])]
    # reporters 0 and 2: weights 0.1/0.7 and 0.6/0.7
    expected = (0.1 * np.array([1.0, 1.0]) + 0.6 * np.array([3.0, 0.0])) / 0.7
    np.testing.assert_allclose(sync_aggregate(ups, weights), expected, rtol=1e-15)
    assert aggregation_weights([upd(1, [0.0])], weights) == [1.0]
    with pytest.raises(ValueError):
        sync_aggregate([], weights)


def test_sync_aggregate_order_independent():
    weights = {i: w for i, w in enumerate([0.2, 0.3, 0.5])}
    ups = [upd(i, np.random.default_rng(i).standard_normal(5)) for i in range(3)]
    a = sync_aggregate(ups, weights)
    b = sync_aggregate(ups[::-1], weights)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- compensation and merge

def test_compensate_gradient_dense_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(1, 40))
        g = rng.standard_normal(n)
        now, then = rng.standard_normal(n), rng.standard_normal(n)
        u = upd(0, np.zeros(n), g=g)
        expected = g + np.outer(g, g) @ (now - then)
        np.testing.assert_allclose(compensate_gradient(u, now, then), expected, rtol=1e-12, atol=1e-12)
        f = rng.standard_normal(n)
        np.testing.assert_allclose(
            compensate_gradient(u, now, then, factor=f), g + np.outer(f, f) @ (now - then), rtol=1e-12, atol=1e-12
        )


def test_compensate_without_displacement_is_identity():
    g = np.array([1.0, -2.0])
    w = np.array([0.3, 0.4])
    np.testing.assert_array_equal(compensate_gradient(upd(0, [0, 0], g=g), w, w), g)


def test_compensate_missing_backup():
    with pytest.raises(BackupMissingError):
        compensate_gradient(upd(0, [0.0]), np.zeros(1), None)


def _server(joint, hyper=None, weights=None, merge_mode="per_arrival"):
    weights = weights or {0: 0.5, 1: 0.25, 2: 0.25}
    return ServerState(
        joint=np.asarray(joint, dtype=float), weights=weights, s1=frozenset({0}), s2=frozenset({1, 2}),
        hyper=hyper or HyperParams(tau_max=10), merge_mode=merge_mode,
    )


def test_async_merge_hand_example():
    hp = HyperParams(eta0=0.1, lambda0=0.5, tau_max=10)
    srv = _server([1.0, 2.0], hp)
    srv.snapshot(1)  # the model issued to the straggler at round 1
    srv.joint = np.array([1.5, 1.0])
    srv.round = 4
    g = np.array([1.0, 2.0])
    u = LocalUpdate(1, 1, 4, np.array([1.0, 2.0]), np.array([0.9, 1.8]), g, 0.05)
    async_merge(srv, u)
    # displacement (0.5, -1); g.disp = -1.5; g_hat = g - 1.5 g = (-0.5, -1)
    g_hat = np.array([-0.5, -1.0])
    eta = 0.1 / 5
    lam = 0.5 * math.exp(-(4 - 3))
    expected = (1 - lam) * np.array([1.5, 1.0]) + lam * (np.array([0.9, 1.8]) - eta * g_hat)
    np.testing.assert_allclose(srv.joint, expected, rtol=1e-14)
    assert srv.lambdas == [pytest.approx(lam)]
    assert srv.merges == 1


def test_async_merge_normalized_mode_scales_lambda():
    hp = HyperParams(lambda0=0.5)
    srv = _server([0.0], hp, merge_mode="normalized")
    srv.snapshot(0)
    u = LocalUpdate(2, 0, 2, np.zeros(1), np.array([1.0]), np.zeros(1), 0.1)
    srv.round = 2
    async_merge(srv, u)
    lam = 0.5 * math.exp(-0) * 0.25 / 0.5
    np.testing.assert_allclose(srv.joint, [lam * 1.0])


def test_async_merge_rejects_normal_device_and_missing_backup():
    srv = _server([0.0])
    srv.snapshot(0)
    with pytest.raises(MisroutedUpdateError):
        async_merge(srv, LocalUpdate(0, 0, 0, np.zeros(1), np.zeros(1), np.zeros(1), 0.1))
    srv.round = 5
    with pytest.raises(BackupMissingError):
        async_merge(srv, LocalUpdate(1, 3, 5, np.zeros(1), np.zeros(1), np.zeros(1), 0.1))


def test_async_merge_divergence_detected():
    srv = _server([1e200], HyperParams(eta0=1.0))
    srv.snapshot(0)
    srv.joint = np.array([-1e200])
    srv.round = 1
    u = LocalUpdate(1, 0, 1, np.zeros(1), np.zeros(1), np.array([1e200]), 1.0)
    with pytest.raises(DivergenceError):
        async_merge(srv, u)


def test_backup_eviction_window():
    srv = _server([0.0], HyperParams(tau_max=3))
    for t in range(8):
        srv.joint = np.array([float(t)])
        srv.snapshot(t)
    assert sorted(srv.backup) == [4, 5, 6, 7]
    assert srv.recall(3) is None
    assert srv.recall(5)[0] == 5.0


# ---------------------------------------------------------------- sampling and FedAvg

def test_sample_devices_uniform_frequencies():
    rng = np.random.default_rng(0)
    ids = list(range(10))
    counts = np.zeros(10)
    trials = 4000
    for _ in range(trials):
        s = sample_devices(ids, 3, [1.0] * 10, rng)
        assert s == sorted(set(s)) and len(s) == 3
        counts[s] += 1
    # each id appears with probability 3/10; binomial sd ~ 29
    np.testing.assert_allclose(counts / trials, 0.3, atol=0.03)


def test_tau_weighted_single_draw_frequencies():
    rng = np.random.default_rng(1)
    devs = make_devices(rng, [0, 1, 3])
    w = tau_sampling_weights(devs)
    np.testing.assert_allclose(w, [1 / 7, 2 / 7, 4 / 7])
    counts = np.zeros(3)
    for _ in range(7000):
        counts[sample_devices([0, 1, 2], 1, w, rng)] += 1
    np.testing.assert_allclose(counts / 7000, w, atol=0.02)


def test_sample_devices_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_devices([0, 1], 3, [1, 1], rng)
    with pytest.raises(ValueError):
        sample_devices([0, 1], 0, [1, 1], rng)


def test_fedavg_round_cost_and_partial_work():
    rng = np.random.default_rng(3)
    devs = make_devices(rng, [0, 4, 2])
    wl = LogisticRegression(4, 3)
    hp = HyperParams(E=2, batch_size=8)
    rngs = {d.id: np.random.default_rng(d.id) for d in devs}
    r = fedavg_round(np.zeros(wl.dim), devs, wl, hp, 0, 3, [1, 1, 1], np.random.default_rng(0), rngs)
    assert r.sampled == [0, 1, 2] and r.cost == 4
    r2 = fedavg_round(
        np.zeros(wl.dim), devs, wl, hp, 0, 3, [1, 1, 1], np.random.default_rng(0),
        {d.id: np.random.default_rng(d.id) for d in devs}, partial_work=lambda s: {1: 1},
    )
    assert r2.cost == 2
    np.testing.assert_allclose(r.params, sync_aggregate(r.updates, {d.id: d.weight for d in devs}))


# ---------------------------------------------------------------- dissimilarity and bounds

def test_dissimilarity_identical_shards_is_one():
    rng = np.random.default_rng(4)
    shard = Dataset(rng.standard_normal((20, 3)), rng.integers(0, 2, 20), 2)
    devs = [DeviceState(i, shard, 1 / 3) for i in range(3)]
    wl = LogisticRegression(3, 2)
    assert estimate_dissimilarity(devs, wl, rng.standard_normal(wl.dim)) == pytest.approx(1.0)


def test_dissimilarity_vanishing_gradient():
    x = np.array([[1.0], [1.0]])
    devs = [DeviceState(0, Dataset(x, np.array([0, 1]), 2), 1.0)]
    wl = LogisticRegression(1, 2)
    with pytest.raises(ZeroDivisionError):
        estimate_dissimilarity(devs, wl, np.zeros(wl.dim))


def test_lr_bound_check_hand_scan():
    c = TheoryConstants(L=1, mu=1, B=1)
    rep = lr_bound_check(c, 0.5, 0.5, 200, eta0=0.1)
    ratios = {t: (0.1 / (1 + t)) / (1 / (t * 0.25)) for t in range(1, 201)}
    t_star = max(ratios, key=ratios.get)
    assert rep.tightest_t == t_star == 200
    assert rep.tightest_ratio == pytest.approx(ratios[200])
    assert rep.convex_bounds[1] == pytest.approx(4.0)
    assert rep.convex_bounds[200] == pytest.approx(0.02)
    assert rep.convex_ok is True
    # non-convex bound: (2/L) sqrt(psi1 * B^4 psi1 psi2 / psi2) = 2 * 0.5
    assert rep.nonconvex_bound == pytest.approx(1.0)
    assert rep.satisfied is True


def test_lr_bound_check_violation_and_missing_constants():
    rep = lr_bound_check(TheoryConstants(L=1, mu=1, B=2), 0.5, 0.5, 200, eta0=0.1)
    # bound_t = 1 / (4 t); eta_t / bound_t = 0.4 t / (1 + t) stays < 1
    assert rep.convex_ok is True
    rep = lr_bound_check(TheoryConstants(L=1, mu=1, B=3), 0.5, 0.5, 200, eta0=0.1)
    assert rep.convex_ok is False and rep.satisfied is False
    rep = lr_bound_check(TheoryConstants(), 0.5, 0.5, 10)
    assert rep.available is False and rep.satisfied is None and rep.reason
    assert lr_bound_check(TheoryConstants(L=1, B=1), 1.0, 0.0, 10).available is False
    with pytest.raises(ValueError):
        TheoryConstants(L=-1)
