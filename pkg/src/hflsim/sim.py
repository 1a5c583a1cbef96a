"""Deterministic round-based simulation of HFL and the baselines.

Time is a sequence of logical rounds. A normal device dispatched at round t
reports at round t; a straggler with delay tau reports at round t + tau and is
redispatched at the following round. Within one round the server first runs
the synchronous kernel, then merges matured straggler updates in ascending
device id.

Synchronous baselines (FedAvg, FedProx) wait for the slowest device they
sampled: a round that includes a device with delay tau occupies tau + 1
logical rounds, during which the joint model does not change. This keeps all
algorithms on one time axis.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .flcore import (
    DeviceState,
    HyperParams,
    LocalUpdate,
    ProtocolError,
    ServerState,
    async_merge,
    fedavg_round,
    local_train,
    membership,
    sync_aggregate,
    tau_sampling_weights,
)
from .streams import Streams
from .workloads import Dataset

ALGOS = ("hfl", "fedavg", "fedprox", "ssgd")


@dataclass
class RoundLog:
    round: int
    algo: str
    train_loss: float | None
    test_acc: float | None
    eta: float
    num_sync_updates: int = 0
    num_async_merges: int = 0
    lambda_values: list[float] = field(default_factory=list)

    @property
    def lambda_mean(self) -> float | None:
        if not self.lambda_values:
            return None
        return math.fsum(self.lambda_values) / len(self.lambda_values)


@dataclass
class PendingArrival:
    arrival_round: int
    device_id: int
    update: LocalUpdate = field(compare=False)

    def __lt__(self, other: "PendingArrival") -> bool:
        return (self.arrival_round, self.device_id) < (other.arrival_round, other.device_id)


@dataclass
class SimResult:
    algo: str
    logs: list[RoundLog]
    final_params: np.ndarray
    dispatched: int = 0
    arrived: int = 0
    dropped: int = 0
    initial_loss: float | None = None

    @property
    def final(self) -> RoundLog:
        return self.logs[-1]


def draw_delays(num_devices: int, tau_max: int, straggler_fraction: float, rng) -> np.ndarray:
    """Pick floor(fraction * N) stragglers uniformly; their delays ~ U{1..tau_max}."""
    if not 0.0 <= straggler_fraction <= 1.0:
        raise ValueError("straggler_fraction must lie in [0, 1]")
    k = int(math.floor(straggler_fraction * num_devices + 1e-9))
    taus = np.zeros(num_devices, dtype=np.int64)
    if k == 0:
        return taus
    if tau_max < 1:
        raise ValueError("tau_max must be >= 1 when there are stragglers")
    chosen = np.sort(rng.choice(num_devices, size=k, replace=False))
    taus[chosen] = rng.integers(1, tau_max + 1, size=k)
    return taus


def assign_delays(devices: Sequence[DeviceState], tau_max: int, straggler_fraction: float, rng):
    taus = draw_delays(len(devices), tau_max, straggler_fraction, rng)
    out = []
    for d, tau in zip(devices, taus):
        out.append(DeviceState(d.id, d.shard, d.weight, int(tau)))
    return out


class Evaluator:
    def __init__(self, workload, train: Dataset, test: Dataset | None, every: int = 1, T: int = 1):
        self.workload = workload
        self.train = train
        self.test = test
        self.every = max(1, every)
        self.T = T

    def initial(self, params) -> float:
        return self.workload.loss(params, self.train)

    def __call__(self, t: int, params) -> tuple[float | None, float | None]:
        if t % self.every and t != self.T - 1:
            return None, None
        loss = self.workload.loss(params, self.train)
        acc = None
        if self.test is not None and len(self.test):
            acc = self.workload.accuracy(params, self.test)
        return loss, acc


def _device_rngs(streams: Streams, devices) -> dict[int, np.random.Generator]:
    return {d.id: streams.device("shuffle", d.id) for d in devices}


def run_hfl(
    devices: Sequence[DeviceState],
    workload,
    hyper: HyperParams,
    streams: Streams,
    test: Dataset | None = None,
    *,
    init_params=None,
    eval_every: int = 1,
    merge_mode: str = "per_arrival",
    factor_mode: str = "accumulated",
    on_update=None,
    algo: str = "hfl",
) -> SimResult:
    """Drive HFL for ``hyper.T`` rounds.

    ``on_update`` is called with every LocalUpdate as it is produced (used by
    tests to audit the local-step relation).
    """
    devices = sorted(devices, key=lambda d: d.id)
    if init_params is None:
        init_params = workload.init_params(streams.get("init"))
    s1, s2, _, _ = membership(devices)
    weights = {d.id: d.weight for d in devices}
    server = ServerState(
        joint=np.array(init_params, dtype=np.float64),
        weights=weights,
        s1=frozenset(s1),
        s2=frozenset(s2),
        hyper=hyper,
        merge_mode=merge_mode,
        factor_mode=factor_mode,
    )
    rngs = _device_rngs(streams, devices)
    evaluate = Evaluator(workload, Dataset.concat([d.shard for d in devices]), test, eval_every, hyper.T)
    initial = evaluate.initial(init_params)
    pending: list[PendingArrival] = []
    busy: set[int] = set()
    logs: list[RoundLog] = []
    dispatched = arrived = 0

    for t in range(hyper.T):
        server.round = t
        server.snapshot(t)
        eta = hyper.eta(t)
        issued = server.joint
        sync_updates = []
        for d in devices:
            if d.id in busy:
                continue
            upd = local_train(d, workload, issued, eta, hyper.E, hyper.batch_size, rngs[d.id], issued_round=t)
            if on_update is not None:
                on_update(upd)
            if d.tau == 0:
                sync_updates.append(upd)
            else:
                heapq.heappush(pending, PendingArrival(upd.arrival_round, d.id, upd))
                busy.add(d.id)
                dispatched += 1
        if sync_updates:
            server.joint = sync_aggregate(sync_updates, weights)

        server.lambdas = []
        merges_before = server.merges
        while pending and pending[0].arrival_round == t:
            arrival = heapq.heappop(pending)
            if server.recall(arrival.update.issued_round) is None:
                raise ProtocolError(
                    f"round {t}: backup of round {arrival.update.issued_round} was evicted"
                )
            async_merge(server, arrival.update)
            busy.discard(arrival.device_id)
            arrived += 1
        if pending and pending[0].arrival_round < t:
            raise ProtocolError(f"round {t}: an arrival from round {pending[0].arrival_round} was skipped")

        loss, acc = evaluate(t, server.joint)
        logs.append(
            RoundLog(
                round=t,
                algo=algo,
                train_loss=loss,
                test_acc=acc,
                eta=eta,
                num_sync_updates=len(sync_updates),
                num_async_merges=server.merges - merges_before,
                lambda_values=list(server.lambdas),
            )
        )
    return SimResult(algo, logs, server.joint, dispatched, arrived, len(pending), initial)


def run_fedavg(
    devices: Sequence[DeviceState],
    workload,
    hyper: HyperParams,
    streams: Streams,
    test: Dataset | None = None,
    *,
    K: int = 10,
    sampling_weights=None,
    mu_prox: float = 0.0,
    straggler_mode: bool = False,
    straggler_share: float = 0.9,
    charge_delay: bool = True,
    init_params=None,
    eval_every: int = 1,
    on_update=None,
    algo: str = "fedavg",
) -> SimResult:
    """Synchronous FedAvg / FedProx on the shared round axis.

    In ``straggler_mode`` (FedProx) a ``straggler_share`` fraction of each
    sampled set runs a uniformly random epoch count in [1, E) and reports
    without being waited for.
    """
    devices = sorted(devices, key=lambda d: d.id)
    if init_params is None:
        init_params = workload.init_params(streams.get("init"))
    if sampling_weights is None:
        sampling_weights = tau_sampling_weights(devices)
    w = np.array(init_params, dtype=np.float64)
    rngs = _device_rngs(streams, devices)
    sample_rng = streams.get("sampling")
    partial_rng = streams.get("fedprox.partial")
    evaluate = Evaluator(workload, Dataset.concat([d.shard for d in devices]), test, eval_every, hyper.T)
    initial = evaluate.initial(init_params)
    logs: list[RoundLog] = []
    dispatched = arrived = dropped = 0
    partial_work = None
    if straggler_mode and hyper.E > 1:
        def partial_work(sampled):
            share = partial_rng.random(len(sampled))
            epochs = partial_rng.integers(1, hyper.E, size=len(sampled))
            return {i: int(e) for i, s, e in zip(sampled, share, epochs) if s < straggler_share}

    t = 0
    while t < hyper.T:
        rnd = fedavg_round(
            w, devices, workload, hyper, t, K, sampling_weights, sample_rng, rngs,
            mu_prox=mu_prox, partial_work=partial_work,
        )
        if on_update is not None:
            for u in rnd.updates:
                on_update(u)
        dispatched += len(rnd.sampled)
        done = t + (rnd.cost if charge_delay else 0)
        for wait_t in range(t, min(done, hyper.T)):
            loss, acc = evaluate(wait_t, w)
            logs.append(RoundLog(wait_t, algo, loss, acc, hyper.eta(wait_t)))
        if done >= hyper.T:
            dropped += len(rnd.sampled)
            break
        w = rnd.params
        arrived += len(rnd.sampled)
        loss, acc = evaluate(done, w)
        logs.append(RoundLog(done, algo, loss, acc, hyper.eta(done), num_sync_updates=len(rnd.sampled)))
        t = done + 1
    return SimResult(algo, logs, w, dispatched, arrived, dropped, initial)


def run_ssgd(
    pooled: Dataset,
    workload,
    hyper: HyperParams,
    streams: Streams,
    test: Dataset | None = None,
    *,
    init_params=None,
    eval_every: int = 1,
    algo: str = "ssgd",
) -> SimResult:
    """Centralized minibatch SGD; one round is E epochs over the pooled data.

    Uses the shuffle stream of device 0, so a one-device HFL run over the same
    data follows the identical trajectory.
    """
    if init_params is None:
        init_params = workload.init_params(streams.get("init"))
    device = DeviceState(0, pooled, 1.0, 0)
    rng = streams.device("shuffle", 0)
    evaluate = Evaluator(workload, pooled, test, eval_every, hyper.T)
    initial = evaluate.initial(init_params)
    w = np.array(init_params, dtype=np.float64)
    logs = []
    for t in range(hyper.T):
        eta = hyper.eta(t)
        w = local_train(device, workload, w, eta, hyper.E, hyper.batch_size, rng, issued_round=t).new_params
        loss, acc = evaluate(t, w)
        logs.append(RoundLog(t, algo, loss, acc, eta, num_sync_updates=1))
    return SimResult(algo, logs, w, hyper.T, hyper.T, 0, initial)


def run_baseline(algo: str, devices, workload, hyper, streams, test=None, **kw) -> SimResult:
    if algo == "fedavg":
        kw.pop("mu_prox", None)
        kw.pop("straggler_mode", None)
        return run_fedavg(devices, workload, hyper, streams, test, algo="fedavg", **kw)
    if algo == "fedprox":
        kw.setdefault("mu_prox", 0.01)
        return run_fedavg(devices, workload, hyper, streams, test, algo="fedprox", **kw)
    if algo == "ssgd":
        pooled = Dataset.concat([d.shard for d in sorted(devices, key=lambda d: d.id)])
        allowed = {"init_params", "eval_every"}
        return run_ssgd(pooled, workload, hyper, streams, test, **{k: v for k, v in kw.items() if k in allowed})
    raise ValueError(f"unknown algorithm {algo!r}; expected one of {ALGOS}")
