"""Hybrid FL protocol core.

Device side: ``local_train`` runs E epochs of minibatch SGD from the model the
server issued and reports the new local model together with the accumulated
gradient ``g = (issued - new) / eta``.

Server side: ``sync_aggregate`` is the synchronous kernel over normal devices;
``compensate_gradient`` + ``async_merge`` fold one delayed straggler update
into the joint model. Baseline helpers (client sampling for FedAvg/FedProx)
and two diagnostics (empirical dissimilarity, learning-rate bounds) live here
too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .linalg import RankOneMatrix, as_vector, rank_one_matvec
from .workloads import Dataset


class ProtocolError(RuntimeError):
    """The simulated protocol reached a state its invariants forbid."""


class BackupMissingError(ProtocolError):
    pass


class MisroutedUpdateError(ProtocolError):
    pass


class DivergenceError(ProtocolError):
    pass


@dataclass(frozen=True)
class HyperParams:
    E: int = 5
    T: int = 200
    eta0: float = 0.1
    batch_size: int = 64
    lambda0: float = 0.5
    tau_max: int = 10
    decay: str = "inverse"
    lambda_rate: float = 1.0

    def __post_init__(self):
        if self.E < 1 or self.T < 1 or self.batch_size < 1:
            raise ValueError("E, T and batch_size must all be >= 1")
        if not 0.0 < self.lambda0 < 1.0:
            raise ValueError("lambda0 must lie in (0, 1)")
        if self.eta0 < 0:
            raise ValueError("eta0 must be >= 0")
        if self.tau_max < 0:
            raise ValueError("tau_max must be >= 0")
        if self.decay not in ("inverse", "constant"):
            raise ValueError(f"unknown decay rule {self.decay!r}")

    def eta(self, t: int) -> float:
        return lr_schedule(t, self.eta0, self.decay)


def lr_schedule(t: int, eta0: float = 0.1, decay: str = "inverse") -> float:
    """``eta0 / (1 + t)``; ``decay="constant"`` keeps eta0."""
    if t < 0:
        raise ValueError("round index must be >= 0")
    if decay == "constant":
        return eta0
    return eta0 / (1.0 + t)


@dataclass
class DeviceState:
    id: int
    shard: Dataset
    weight: float
    tau: int = 0

    @property
    def is_straggler(self) -> bool:
        return self.tau > 0


def normalize_weights(devices: Sequence[DeviceState]) -> None:
    total = math.fsum(d.weight for d in devices)
    if total <= 0:
        raise ValueError("device weights must have positive mass")
    for d in devices:
        d.weight = d.weight / total


def membership(devices: Sequence[DeviceState]) -> tuple[list[int], list[int], float, float]:
    """Return (S1 ids, S2 ids, psi1, psi2)."""
    s1 = [d.id for d in devices if d.tau == 0]
    s2 = [d.id for d in devices if d.tau > 0]
    psi1 = math.fsum(d.weight for d in devices if d.tau == 0)
    psi2 = math.fsum(d.weight for d in devices if d.tau > 0)
    return s1, s2, psi1, psi2


@dataclass
class LocalUpdate:
    device_id: int
    issued_round: int
    arrival_round: int
    issued_params: np.ndarray
    new_params: np.ndarray
    accum_gradient: np.ndarray
    eta: float
    last_gradient: np.ndarray | None = None

    @property
    def tau(self) -> int:
        return self.arrival_round - self.issued_round


def local_train(
    device: DeviceState,
    workload,
    issued_params,
    eta: float,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    *,
    issued_round: int = 0,
    mu_prox: float = 0.0,
) -> LocalUpdate:
    """Minibatch SGD on the device shard, reshuffled every epoch.

    With ``mu_prox > 0`` each step also descends ``(mu/2) ||w - issued||^2``
    (the FedProx local objective).
    """
    shard = device.shard
    m = len(shard)
    if m == 0:
        raise ValueError(f"device {device.id} has an empty shard")
    if mu_prox < 0:
        raise ValueError("mu_prox must be >= 0")
    start = as_vector(issued_params).copy()
    w = start.copy()
    last = None
    for _ in range(epochs):
        order = rng.permutation(m)
        for lo in range(0, m, batch_size):
            idx = order[lo : lo + batch_size]
            g = workload.gradient(w, shard, idx)
            if mu_prox:
                g = g + mu_prox * (w - start)
            last = g
            w = w - eta * g
    if eta == 0:
        accum = np.zeros_like(w)
    else:
        accum = (start - w) / eta
    return LocalUpdate(
        device_id=device.id,
        issued_round=issued_round,
        arrival_round=issued_round + device.tau,
        issued_params=start,
        new_params=w,
        accum_gradient=accum,
        eta=eta,
        last_gradient=last,
    )


def fedprox_local_train(device, workload, issued_params, eta, epochs, batch_size, rng, mu_prox=0.01, **kw):
    return local_train(device, workload, issued_params, eta, epochs, batch_size, rng, mu_prox=mu_prox, **kw)


def aggregation_weights(updates: Sequence[LocalUpdate], weights: Mapping[int, float]) -> list[float]:
    """Weights of the reporting devices, renormalized to sum to one."""
    if not updates:
        raise ValueError("no updates to aggregate")
    raw = [weights[u.device_id] for u in updates]
    total = math.fsum(raw)
    if total <= 0:
        raise ValueError("reporting devices carry no aggregation weight")
    return [r / total for r in raw]


def sync_aggregate(updates: Sequence[LocalUpdate], weights: Mapping[int, float]) -> np.ndarray:
    """Weighted mean of the reported local models, in ascending device id."""
    ordered = sorted(updates, key=lambda u: u.device_id)
    ws = aggregation_weights(ordered, weights)
    out = np.zeros_like(ordered[0].new_params)
    for w, u in zip(ws, ordered):
        out += w * u.new_params
    return out


def lambda_at(lambda0: float, t: int, tau: int, rate: float = 1.0) -> float:
    """Merge weight ``lambda0 * exp(-rate * (t - tau))``, clamped to [0, 1]."""
    if t < tau:
        raise ValueError(f"round {t} precedes delay {tau}")
    if tau < 0:
        raise ValueError("delay must be >= 0")
    # math.exp underflows quietly to 0.0 for very negative arguments.
    value = lambda0 * math.exp(-rate * (t - tau))
    return min(1.0, max(0.0, value))


def compensate_gradient(
    update: LocalUpdate,
    current_joint,
    backup_joint,
    factor=None,
) -> np.ndarray:
    """First-order correction of a stale gradient.

    ``g_hat = g + R (w_now - w_then)`` with ``R = f f^T``; ``f`` defaults to
    the update's accumulated gradient. ``backup_joint`` is the joint model the
    server issued at ``update.issued_round``.
    """
    if backup_joint is None:
        raise BackupMissingError(
            f"no backup of round {update.issued_round} for device {update.device_id}"
        )
    g = update.accum_gradient
    f = g if factor is None else factor
    displacement = as_vector(current_joint) - as_vector(backup_joint)
    with np.errstate(over="ignore", invalid="ignore"):
        return g + rank_one_matvec(RankOneMatrix(f), displacement)


@dataclass
class ServerState:
    joint: np.ndarray
    weights: dict[int, float]
    s1: frozenset[int]
    s2: frozenset[int]
    hyper: HyperParams
    round: int = 0
    backup: dict[int, np.ndarray] = field(default_factory=dict)
    merge_mode: str = "per_arrival"
    factor_mode: str = "accumulated"
    lambdas: list[float] = field(default_factory=list)
    merges: int = 0

    @property
    def lambda0(self) -> float:
        return self.hyper.lambda0

    @property
    def psi1(self) -> float:
        return math.fsum(self.weights[i] for i in self.s1)

    @property
    def psi2(self) -> float:
        return math.fsum(self.weights[i] for i in self.s2)

    def snapshot(self, t: int) -> None:
        self.backup[t] = self.joint.copy()
        for r in [r for r in self.backup if r < t - self.hyper.tau_max]:
            del self.backup[r]

    def recall(self, r: int) -> np.ndarray | None:
        return self.backup.get(r)


def async_merge(server: ServerState, update: LocalUpdate) -> ServerState:
    """Fold one matured straggler update into ``server.joint`` (in place).

    ``w <- (1 - lam) w + lam (w_i - eta_t g_hat)`` where ``w_i`` is the
    straggler's returned local model. In ``"normalized"`` merge mode the
    weight becomes ``lam * p_i / psi2``.
    """
    if update.device_id not in server.s2:
        raise MisroutedUpdateError(f"device {update.device_id} is not a straggler")
    t = server.round
    backup = server.recall(update.issued_round)
    factor = update.last_gradient if server.factor_mode == "last_batch" else None
    g_hat = compensate_gradient(update, server.joint, backup, factor=factor)
    lam = lambda_at(server.hyper.lambda0, t, update.tau, server.hyper.lambda_rate)
    if server.merge_mode == "normalized":
        lam = lam * server.weights[update.device_id] / server.psi2
    term = update.new_params - server.hyper.eta(t) * g_hat
    merged = (1.0 - lam) * server.joint + lam * term
    if not np.all(np.isfinite(merged)):
        raise DivergenceError(
            f"round {t}: merging device {update.device_id} produced a non-finite joint model"
        )
    server.joint = merged
    server.lambdas.append(lam)
    server.merges += 1
    return server


def sample_devices(
    ids: Sequence[int],
    K: int,
    sampling_weights: Sequence[float],
    rng: np.random.Generator,
) -> list[int]:
    """K distinct device ids drawn with probability proportional to the weights."""
    n = len(ids)
    if K > n:
        raise ValueError(f"cannot sample K={K} of {n} devices")
    if K < 1:
        raise ValueError("K must be >= 1")
    p = np.asarray(sampling_weights, dtype=np.float64)
    p = p / p.sum()
    picked = rng.choice(n, size=K, replace=False, p=p)
    return sorted(int(ids[i]) for i in picked)


def tau_sampling_weights(devices: Sequence[DeviceState]) -> list[float]:
    """Server-side selection probabilities growing linearly with delay: 1 + tau."""
    raw = [1.0 + d.tau for d in devices]
    s = math.fsum(raw)
    return [r / s for r in raw]


@dataclass
class FedAvgRound:
    params: np.ndarray
    sampled: list[int]
    cost: int
    updates: list[LocalUpdate]


def fedavg_round(
    joint,
    devices: Sequence[DeviceState],
    workload,
    hyper: HyperParams,
    t: int,
    K: int,
    sampling_weights: Sequence[float],
    sample_rng: np.random.Generator,
    device_rngs: Mapping[int, np.random.Generator],
    *,
    mu_prox: float = 0.0,
    partial_work=None,
) -> FedAvgRound:
    """One synchronous FedAvg (or FedProx, via ``mu_prox``) round.

    ``partial_work(sampled)`` may return ``{device_id: epochs}`` for devices that
    stop early; those report without being waited for. ``cost`` is the largest
    delay among the remaining sampled devices: the number of extra rounds the
    server has to wait.
    """
    by_id = {d.id: d for d in devices}
    sampled = sample_devices([d.id for d in devices], K, sampling_weights, sample_rng)
    epochs_override = partial_work(sampled) if partial_work is not None else {}
    eta = hyper.eta(t)
    updates = []
    for i in sampled:
        epochs = hyper.E
        if i in epochs_override:
            epochs = epochs_override[i]
        updates.append(
            local_train(
                by_id[i], workload, joint, eta, epochs, hyper.batch_size,
                device_rngs[i], issued_round=t, mu_prox=mu_prox,
            )
        )
    weights = {d.id: d.weight for d in devices}
    params = sync_aggregate(updates, weights)
    waited = [by_id[i].tau for i in sampled if i not in epochs_override]
    return FedAvgRound(params, sampled, max(waited, default=0), updates)


def estimate_dissimilarity(devices: Sequence[DeviceState], workload, params) -> float:
    """Empirical ``max_i ||grad F_i||^2 / ||sum_i p_i grad F_i||^2`` at ``params``."""
    grads = [workload.gradient(params, d.shard) for d in devices]
    joint = np.zeros_like(grads[0])
    for d, g in zip(devices, grads):
        joint += d.weight * g
    denom = float(np.dot(joint, joint))
    scale = max(float(np.dot(g, g)) for g in grads)
    if denom <= 1e-24 * max(scale, 1e-300):
        raise ZeroDivisionError("joint gradient vanishes; dissimilarity is undefined")
    return scale / denom


@dataclass(frozen=True)
class TheoryConstants:
    L: float | None = None
    mu: float | None = None
    B: float | None = None
    G: float | None = None
    sigma: float | None = None
    L2: float | None = None

    def __post_init__(self):
        for name in ("L", "mu", "B", "G", "sigma", "L2"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive when supplied")


@dataclass
class LrBoundReport:
    available: bool
    convex_available: bool = False
    nonconvex_available: bool = False
    convex_bounds: dict[int, float] = field(default_factory=dict)
    convex_ok: bool | None = None
    tightest_t: int | None = None
    tightest_ratio: float | None = None
    nonconvex_bound: float | None = None
    nonconvex_ok: bool | None = None
    reason: str = ""

    @property
    def satisfied(self) -> bool | None:
        verdicts = [v for v in (self.convex_ok, self.nonconvex_ok) if v is not None]
        return all(verdicts) if verdicts else None


def convex_lr_bound(c: TheoryConstants, psi1: float, psi2: float, t: int) -> float:
    """``L / (mu^2 t B^4 psi1 psi2)``; infinite at t = 0."""
    if t <= 0:
        return math.inf
    return c.L / (c.mu**2 * t * c.B**4 * psi1 * psi2)


def nonconvex_lr_bound(c: TheoryConstants, psi1: float, psi2: float) -> float:
    """``(2 / L) sqrt(psi1 B1 / psi2)`` with ``B1 = B^4 psi1 psi2``."""
    b1 = c.B**4 * psi1 * psi2
    return (2.0 / c.L) * math.sqrt(psi1 * b1 / psi2)


def lr_bound_check(
    constants: TheoryConstants,
    psi1: float,
    psi2: float,
    T: int,
    eta0: float = 0.1,
    decay: str = "inverse",
) -> LrBoundReport:
    """Compare the schedule ``eta_t`` against both learning-rate bounds for t <= T.

    The convex bound is scanned over t = 1..T; ``tightest_t`` is where
    ``eta_t / bound_t`` peaks. Missing constants are not an error: the report
    comes back with ``available=False`` for the affected bound.
    """
    if psi2 <= 0 or psi1 <= 0:
        return LrBoundReport(available=False, reason="bounds need psi1 > 0 and psi2 > 0")
    report = LrBoundReport(available=False)
    have = constants
    if have.L is not None and have.mu is not None and have.B is not None:
        report.convex_available = True
        worst_t, worst = None, -math.inf
        for t in range(1, T + 1):
            bound = convex_lr_bound(have, psi1, psi2, t)
            report.convex_bounds[t] = bound
            ratio = lr_schedule(t, eta0, decay) / bound
            if ratio > worst:
                worst_t, worst = t, ratio
        report.tightest_t = worst_t
        report.tightest_ratio = worst
        report.convex_ok = worst <= 1.0
    if have.L is not None and have.B is not None:
        report.nonconvex_available = True
        report.nonconvex_bound = nonconvex_lr_bound(have, psi1, psi2)
        peak = max(lr_schedule(t, eta0, decay) for t in range(0, T + 1))
        report.nonconvex_ok = peak <= report.nonconvex_bound
    report.available = report.convex_available or report.nonconvex_available
    if not report.available:
        report.reason = "supply L and B (and mu for the convex bound)"
    return report
