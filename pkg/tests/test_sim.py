import numpy as np
import pytest

from hflsim.flcore import DeviceState, HyperParams, normalize_weights
from hflsim.sim import (
    Evaluator,
    assign_delays,
    draw_delays,
    run_baseline,
    run_fedavg,
    run_hfl,
    run_ssgd,
)
from hflsim.streams import Streams
from hflsim.workloads import Dataset, LogisticRegression


def make_devices(taus, seed=0, d=5, c=3):
    rng = np.random.default_rng(seed)
    devs = []
    for i, tau in enumerate(taus):
        m = 20 + 7 * i
        devs.append(DeviceState(i, Dataset(rng.standard_normal((m, d)), rng.integers(0, c, m), c), float(m), tau))
    normalize_weights(devs)
    test = Dataset(rng.standard_normal((50, d)), rng.integers(0, c, 50), c)
    return devs, test, LogisticRegression(d, c)


HP = HyperParams(E=2, T=12, batch_size=8, tau_max=4)


def logs_equal(a, b):
    assert len(a.logs) == len(b.logs)
    for x, y in zip(a.logs, b.logs):
        assert (x.round, x.train_loss, x.test_acc, x.eta) == (y.round, y.train_loss, y.test_acc, y.eta)
    np.testing.assert_array_equal(a.final_params, b.final_params)


def test_draw_delays_count_and_range():
    taus = draw_delays(20, 10, 0.5, np.random.default_rng(0))
    assert (taus > 0).sum() == 10
    assert taus.max() <= 10 and taus[taus > 0].min() >= 1
    assert draw_delays(7, 10, 0.0, np.random.default_rng(0)).sum() == 0
    with pytest.raises(ValueError):
        draw_delays(5, 10, 1.5, np.random.default_rng(0))


def test_draw_delays_uniform_over_range():
    rng = np.random.default_rng(3)
    taus = np.concatenate([draw_delays(100, 4, 1.0, rng) for _ in range(200)])
    freq = np.bincount(taus, minlength=5)[1:] / taus.size
    np.testing.assert_allclose(freq, 0.25, atol=0.01)


def test_assign_delays_keeps_weights():
    devs, *_ = make_devices([0, 0, 0])
    out = assign_delays(devs, 3, 1.0, np.random.default_rng(0))
    assert [d.weight for d in out] == [d.weight for d in devs]
    assert all(d.tau >= 1 for d in out)


def test_hfl_is_deterministic():
    devs, test, wl = make_devices([0, 2, 0, 3])
    a = run_hfl(devs, wl, HP, Streams(4), test)
    b = run_hfl(devs, wl, HP, Streams(4), test)
    logs_equal(a, b)
    assert [r.lambda_values for r in a.logs] == [r.lambda_values for r in b.logs]


def test_hfl_task_conservation_and_schedule():
    devs, test, wl = make_devices([0, 2, 0, 3])
    res = run_hfl(devs, wl, HP, Streams(1), test)
    # tau=2 device dispatched at 0, 3, 6, 9 (arrives 2, 5, 8, 11)
    # tau=3 device dispatched at 0, 4, 8 (arrives 3, 7, 11)
    assert res.dispatched == 7 and res.arrived == 7 and res.dropped == 0
    merges = {r.round: r.num_async_merges for r in res.logs if r.num_async_merges}
    assert merges == {2: 1, 3: 1, 5: 1, 7: 1, 8: 1, 11: 2}
    assert all(r.num_sync_updates == 2 for r in res.logs)
    # lambda = lambda0 * exp(-(t - tau)) with t - tau the issue round
    assert res.logs[3].lambda_values == [pytest.approx(0.5)]
    assert res.logs[11].lambda_values == [pytest.approx(0.5 * np.exp(-9)), pytest.approx(0.5 * np.exp(-8))]


def test_hfl_counts_dropped_tasks():
    devs, test, wl = make_devices([0, 4])
    res = run_hfl(devs, wl, HyperParams(E=1, T=6, batch_size=8, tau_max=4), Streams(0), test)
    # dispatched at 0 (arrives 4) and 5 (would arrive 9)
    assert (res.dispatched, res.arrived, res.dropped) == (2, 1, 1)


def test_hfl_without_stragglers_equals_full_fedavg():
    devs, test, wl = make_devices([0, 0, 0, 0])
    h = run_hfl(devs, wl, HP, Streams(2), test)
    f = run_fedavg(devs, wl, HP, Streams(2), test, K=4)
    logs_equal(h, f)


def test_fedprox_zero_mu_equals_fedavg():
    devs, test, wl = make_devices([0, 1, 0, 3])
    f = run_fedavg(devs, wl, HP, Streams(3), test, K=2)
    p = run_baseline("fedprox", devs, wl, HP, Streams(3), test, K=2, mu_prox=0.0, straggler_mode=False)
    logs_equal(f, p)


def test_single_device_hfl_equals_ssgd():
    devs, test, wl = make_devices([0])
    devs[0].weight = 1.0
    h = run_hfl(devs, wl, HP, Streams(5), test)
    s = run_ssgd(devs[0].shard, wl, HP, Streams(5), test)
    logs_equal(h, s)


def test_fedavg_waits_for_slowest_device():
    devs, test, wl = make_devices([0, 3])
    res = run_fedavg(devs, wl, HyperParams(E=1, T=10, batch_size=8), Streams(0), test, K=2)
    updates = [r.round for r in res.logs if r.num_sync_updates]
    assert updates == [3, 7]
    assert [r.round for r in res.logs] == list(range(10))
    # rounds 8, 9 belong to a round that cannot finish before T
    assert res.dropped == 2 and res.arrived == 4
    # model is unchanged while waiting
    assert res.logs[0].train_loss == res.logs[1].train_loss == res.logs[2].train_loss


def test_fedavg_without_delay_charging():
    devs, test, wl = make_devices([0, 3])
    res = run_fedavg(devs, wl, HyperParams(E=1, T=5, batch_size=8), Streams(0), test, K=2, charge_delay=False)
    assert all(r.num_sync_updates == 2 for r in res.logs)


def test_fedprox_straggler_mode_runs_and_differs():
    devs, test, wl = make_devices([0, 1, 2, 3])
    a = run_baseline("fedprox", devs, wl, HP, Streams(3), test, K=3)
    b = run_baseline("fedprox", devs, wl, HP, Streams(3), test, K=3, straggler_mode=True)
    assert not np.array_equal(a.final_params, b.final_params)


def test_run_baseline_unknown():
    devs, test, wl = make_devices([0])
    with pytest.raises(ValueError):
        run_baseline("scaffold", devs, wl, HP, Streams(0), test)


def test_eval_every_skips_rounds_but_keeps_last():
    devs, test, wl = make_devices([0, 2])
    res = run_hfl(devs, wl, HP, Streams(0), test, eval_every=5)
    evaluated = [r.round for r in res.logs if r.train_loss is not None]
    assert evaluated == [0, 5, 10, 11]


def test_evaluator_without_test_set():
    devs, _, wl = make_devices([0])
    loss, acc = Evaluator(wl, devs[0].shard, None)(0, np.zeros(wl.dim))
    assert acc is None and loss == pytest.approx(np.log(3), rel=1e-3)


def test_initial_loss_recorded():
    devs, test, wl = make_devices([0, 1])
    res = run_hfl(devs, wl, HP, Streams(0), test)
    assert res.initial_loss == pytest.approx(np.log(3))


def test_draw_delays_forced_and_invalid():
    np.testing.assert_array_equal(draw_delays(6, 1, 1.0, np.random.default_rng(0)), 1)
    with pytest.raises(ValueError):
        draw_delays(6, 0, 0.5, np.random.default_rng(0))
