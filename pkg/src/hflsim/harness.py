"""Configuration, experiment assembly, comparison and sweep drivers, CSV output.

Config files are flat ``key = value`` text; keys for the data source carry a
``data.`` prefix (``data.gamma = 1``). Lines starting with ``#`` are comments.
A JSON object (flat, or nested one level for prefixed keys) is accepted too.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import statistics
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datagen import SyntheticSpec, gen_synthetic, load_idx, partition_powerlaw_labels
from .flcore import DeviceState, HyperParams, membership, normalize_weights
from .sim import ALGOS, RoundLog, SimResult, draw_delays, run_baseline, run_hfl
from .streams import Streams
from .workloads import Dataset, make_workload

SCHEMA_VERSION = "1.0"
OUTPUT_ENV = "HFLSIM_OUTPUT_DIR"
CSV_HEADER = ("round", "algo", "train_loss", "test_acc", "eta", "sync_updates", "async_merges", "lambda_mean")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    gamma: float = 0.0
    xi: float = 0.0
    iid: bool = False
    total_samples: int | None = None
    num_features: int = 60
    num_classes: int = 10
    # >0: stragglers hold labels [0, k) and normal devices hold [k, C).
    straggler_labels: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    labels_per_device: int = 2
    usage: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    algo: str = "hfl"
    workload: str = "logistic"
    N: int = 100
    T: int = 200
    E: int = 5
    batch_size: int = 64
    eta0: float = 0.1
    lambda0: float = 0.5
    lambda_rate: float = 1.0
    tau_max: int = 10
    straggler_fraction: float = 0.5
    K: int = 10
    mu_prox: float = 0.01
    seed: int = 0
    output: str = "runs"
    eval_every: int = 1
    merge_mode: str = "per_arrival"
    factor_mode: str = "accumulated"
    fedprox_straggler_mode: bool = True
    charge_delay: bool = True
    mlp_hidden: int = 32
    data: DataConfig = field(default_factory=DataConfig)

    def hyper(self) -> HyperParams:
        return HyperParams(
            E=self.E, T=self.T, eta0=self.eta0, batch_size=self.batch_size,
            lambda0=self.lambda0, tau_max=self.tau_max, lambda_rate=self.lambda_rate,
        )

    def replace(self, **changes) -> "RunConfig":
        """Copy with changes; ``data.x`` style keys address the data section."""
        top = {k: v for k, v in changes.items() if not k.startswith("data.")}
        sub = {k[5:]: v for k, v in changes.items() if k.startswith("data.")}
        cfg = dataclasses.replace(self, **top)
        if sub:
            cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, **sub))
        validate(cfg)
        return cfg


def _field_types() -> dict[str, str]:
    out = {}
    for f in fields(RunConfig):
        if f.name == "data":
            continue
        out[f.name] = f.type
    for f in fields(DataConfig):
        out["data." + f.name] = f.type
    return out


CONFIG_KEYS = _field_types()

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, typ: str, raw):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if typ == "bool":
            if isinstance(raw, bool):
                return raw
            s = str(raw).lower()
            if s in _TRUE:
                return True
            if s in _FALSE:
                return False
            raise ValueError
        if typ == "int | None":
            if raw is None or str(raw).lower() in ("", "none", "null"):
                return None
            return _coerce(key, "int", raw)
        if typ == "int":
            if isinstance(raw, bool):
                raise ValueError
            if isinstance(raw, float):
                if not raw.is_integer():
                    raise ValueError
                return int(raw)
            return int(str(raw), 10)
        if typ == "float":
            if isinstance(raw, bool):
                raise ValueError
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        if typ == "str":
            return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {typ}, got {raw!r}") from None
    raise ConfigError(key, f"unsupported type {typ}")


def _check(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ConfigError(key, msg)


def validate(cfg: RunConfig) -> RunConfig:
    d = cfg.data
    _check(cfg.algo in ALGOS, "algo", f"must be one of {ALGOS}")
    _check(cfg.workload in ("logistic", "mlp"), "workload", "must be 'logistic' or 'mlp'")
    _check(cfg.N >= 1, "N", "must be >= 1")
    _check(cfg.T >= 1, "T", "must be >= 1")
    _check(cfg.E >= 1, "E", "must be >= 1")
    _check(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    _check(cfg.eta0 > 0, "eta0", "must be > 0")
    _check(0.0 < cfg.lambda0 < 1.0, "lambda0", "must lie in (0, 1)")
    _check(cfg.lambda_rate >= 0, "lambda_rate", "must be >= 0")
    _check(cfg.tau_max >= 1, "tau_max", "must be >= 1")
    _check(0.0 <= cfg.straggler_fraction <= 1.0, "straggler_fraction", "must lie in [0, 1]")
    _check(cfg.K >= 1, "K", "must be >= 1")
    if cfg.algo in ("fedavg", "fedprox"):
        _check(cfg.K <= cfg.N, "K", f"must not exceed N={cfg.N}")
    _check(cfg.mu_prox >= 0, "mu_prox", "must be >= 0")
    _check(cfg.seed >= 0, "seed", "must be >= 0")
    _check(cfg.eval_every >= 1, "eval_every", "must be >= 1")
    _check(cfg.merge_mode in ("per_arrival", "normalized"), "merge_mode", "must be 'per_arrival' or 'normalized'")
    _check(cfg.factor_mode in ("accumulated", "last_batch"), "factor_mode", "must be 'accumulated' or 'last_batch'")
    _check(cfg.mlp_hidden >= 1, "mlp_hidden", "must be >= 1")
    _check(d.source in ("synthetic", "idx"), "data.source", "must be 'synthetic' or 'idx'")
    _check(d.gamma >= 0, "data.gamma", "must be >= 0")
    _check(d.xi >= 0, "data.xi", "must be >= 0")
    _check(d.total_samples is None or d.total_samples >= 1, "data.total_samples", "must be >= 1")
    _check(d.num_features >= 1, "data.num_features", "must be >= 1")
    _check(d.num_classes >= 2, "data.num_classes", "must be >= 2")
    _check(0 <= d.straggler_labels < d.num_classes, "data.straggler_labels", f"must lie in [0, {d.num_classes})")
    _check(1 <= d.labels_per_device <= d.num_classes, "data.labels_per_device", f"must lie in [1, {d.num_classes}]")
    _check(0.0 < d.usage <= 1.0, "data.usage", "must lie in (0, 1]")
    if d.source == "idx":
        _check(bool(d.train_images), "data.train_images", "required when data.source = idx")
        _check(bool(d.train_labels), "data.train_labels", "required when data.source = idx")
        _check(bool(d.test_images) == bool(d.test_labels), "data.test_images", "test images and labels go together")
    return cfg


def _read_pairs(path: Path) -> dict[str, object]:
    text = path.read_text()
    if text.lstrip().startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise ConfigError(str(path), "JSON config must be an object")
        flat = {}
        for k, v in obj.items():
            if isinstance(v, dict):
                for k2, v2 in v.items():
                    flat[f"{k}.{k2}"] = v2
            else:
                flat[k] = v
        return flat
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}", f"expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def build_config(values: Mapping[str, object], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    top, sub = {}, {}
    for key, raw in values.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(key, "unknown configuration key")
        v = _coerce(key, CONFIG_KEYS[key], raw)
        if key.startswith("data."):
            sub[key[5:]] = v
        else:
            top[key] = v
    cfg = dataclasses.replace(base, **top)
    cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, **sub))
    return validate(cfg)


def parse_config(path=None, overrides: Mapping[str, object] | None = None) -> RunConfig:
    """File values first, then ``overrides`` (command-line flags) on top."""
    values: dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config", f"file not found: {p}")
        values.update(_read_pairs(p))
    if overrides:
        values.update(overrides)
    return build_config(values)


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def config_items(cfg: RunConfig) -> dict[str, object]:
    out = {}
    for key in CONFIG_KEYS:
        if key.startswith("data."):
            out[key] = getattr(cfg.data, key[5:])
        else:
            out[key] = getattr(cfg, key)
    return out


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_fmt_value(v)}\n" for k, v in config_items(cfg).items())


def output_dir(cfg: RunConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output)


# ---------------------------------------------------------------- experiments


@dataclass
class Experiment:
    config: RunConfig
    devices: list[DeviceState]
    test: Dataset | None
    workload: object
    partition_checksum: str

    @property
    def psi(self) -> tuple[float, float]:
        _, _, p1, p2 = membership(self.devices)
        return p1, p2


def _label_sets(taus: np.ndarray, k: int, c: int) -> list[tuple[int, ...]] | None:
    if k == 0:
        return None
    return [tuple(range(k)) if t > 0 else tuple(range(k, c)) for t in taus]


def partition_checksum(devices: Sequence[DeviceState]) -> str:
    h = hashlib.sha256()
    for d in sorted(devices, key=lambda d: d.id):
        h.update(f"{d.id}:{d.tau}:{len(d.shard)}|".encode())
        h.update(np.ascontiguousarray(d.shard.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(d.shard.labels, dtype="<i8").tobytes())
    return h.hexdigest()[:16]


def build_experiment(cfg: RunConfig) -> Experiment:
    """Data, partition and delay assignment; identical for every algorithm."""
    validate(cfg)
    d = cfg.data
    streams = Streams(cfg.seed)
    taus = draw_delays(cfg.N, cfg.tau_max, cfg.straggler_fraction, streams.get("delays"))
    if d.source == "synthetic":
        spec = SyntheticSpec(
            gamma=d.gamma, xi=d.xi, num_devices=cfg.N, d=d.num_features,
            num_classes=d.num_classes, total_samples=d.total_samples,
            iid_mode=d.iid, seed=cfg.seed,
        )
        data = gen_synthetic(spec, _label_sets(taus, d.straggler_labels, d.num_classes))
        shards, test = data.train, data.test
    else:
        train = load_idx(d.train_images, d.train_labels, d.num_classes)
        test = load_idx(d.test_images, d.test_labels, d.num_classes) if d.test_images else None
        plan = partition_powerlaw_labels(
            train, cfg.N, d.labels_per_device, cfg.seed,
            label_sets=_label_sets(taus, d.straggler_labels, d.num_classes), usage=d.usage,
        )
        shards = plan.shards(train)
    devices = [DeviceState(i, s, float(len(s)), int(t)) for i, (s, t) in enumerate(zip(shards, taus))]
    normalize_weights(devices)
    nf = shards[0].num_features
    kw = {"hidden": cfg.mlp_hidden} if cfg.workload == "mlp" else {}
    workload = make_workload(cfg.workload, nf, d.num_classes, **kw)
    return Experiment(cfg, devices, test, workload, partition_checksum(devices))


def run_algo(exp: Experiment, algo: str, on_update=None) -> SimResult:
    cfg = exp.config
    streams = Streams(cfg.seed)
    hyper = cfg.hyper()
    common = dict(eval_every=cfg.eval_every)
    if algo == "hfl":
        return run_hfl(
            exp.devices, exp.workload, hyper, streams, exp.test,
            merge_mode=cfg.merge_mode, factor_mode=cfg.factor_mode, on_update=on_update, **common,
        )
    if algo in ("fedavg", "fedprox"):
        _check(cfg.K <= cfg.N, "K", f"must not exceed N={cfg.N} for {algo}")
        common.update(K=cfg.K, charge_delay=cfg.charge_delay, on_update=on_update)
        if algo == "fedprox":
            common.update(mu_prox=cfg.mu_prox, straggler_mode=cfg.fedprox_straggler_mode)
    return run_baseline(algo, exp.devices, exp.workload, hyper, streams, exp.test, **common)


# ---------------------------------------------------------------- output


def _real(v: float | None) -> str:
    return "" if v is None else format(v, ".9g")


def format_csv(logs: Sequence[RoundLog]) -> str:
    if not logs:
        raise ValueError("no rounds to write")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in logs:
        w.writerow([
            r.round, r.algo, _real(r.train_loss), _real(r.test_acc), _real(r.eta),
            r.num_sync_updates, r.num_async_merges, _real(r.lambda_mean),
        ])
    return buf.getvalue()


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def emit_csv(logs: Sequence[RoundLog], path) -> Path:
    return atomic_write(path, format_csv(logs))


def emit_plot_data(results: Mapping[str, SimResult], path) -> Path:
    """Long format: ``series,round,metric,value``; one line per available value."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("series", "round", "metric", "value"))
    for name, res in results.items():
        for r in res.logs:
            for metric, v in (("train_loss", r.train_loss), ("test_acc", r.test_acc)):
                if v is not None:
                    w.writerow((name, r.round, metric, _real(v)))
    return atomic_write(path, buf.getvalue())


def summarize(res: SimResult) -> dict:
    losses = [r.train_loss for r in res.logs if r.train_loss is not None]
    accs = [r.test_acc for r in res.logs if r.test_acc is not None]
    return {
        "final_loss": losses[-1] if losses else None,
        "best_loss": min(losses) if losses else None,
        "initial_loss": res.initial_loss,
        "final_acc": accs[-1] if accs else None,
        "best_acc": max(accs) if accs else None,
        "rounds": len(res.logs),
        "dispatched": res.dispatched,
        "arrived": res.arrived,
        "dropped": res.dropped,
    }


class RunError(RuntimeError):
    """A run failed; ``algo`` names the algorithm."""

    def __init__(self, algo: str, cause: BaseException):
        super().__init__(f"{algo}: {cause}")
        self.algo = algo
        self.cause = cause


def run_compare(cfg: RunConfig, algos: Iterable[str], outdir=None, plot_data: bool = False) -> dict:
    algos = list(dict.fromkeys(algos))
    for a in algos:
        if a not in ALGOS:
            raise ConfigError("algos", f"unknown algorithm {a!r}")
    if not algos:
        raise ConfigError("algos", "empty algorithm list")
    if any(a in ("fedavg", "fedprox") for a in algos):
        _check(cfg.K <= cfg.N, "K", f"must not exceed N={cfg.N}")
    exp = build_experiment(cfg)
    out = Path(outdir) if outdir is not None else output_dir(cfg)
    results, per_algo = {}, {}
    for a in algos:
        try:
            res = run_algo(exp, a)
        except Exception as exc:
            raise RunError(a, exc) from exc
        results[a] = res
        emit_csv(res.logs, out / f"{a}.csv")
        per_algo[a] = {"partition_checksum": exp.partition_checksum, **summarize(res)}
    psi1, psi2 = exp.psi
    summary = {
        "spec_version": SCHEMA_VERSION,
        "seeds": [cfg.seed],
        "config": config_items(cfg),
        "psi1": psi1,
        "psi2": psi2,
        "algos": per_algo,
    }
    atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if plot_data:
        emit_plot_data(results, out / "plot_data.csv")
    return summary


SWEEPABLE = ("lambda0", "tau_max")


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple
    base: RunConfig = field(default_factory=RunConfig)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.parameter not in SWEEPABLE:
            raise ConfigError("parameter", f"must be one of {SWEEPABLE}")
        if not self.values:
            raise ConfigError(self.parameter, "empty value list")
        if not self.seeds:
            raise ConfigError("seeds", "empty seed list")
        vals = tuple(_coerce(self.parameter, CONFIG_KEYS[self.parameter], v) for v in self.values)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        for v in vals:
            self.cell(v, self.seeds[0])

    def cell(self, value, seed: int) -> RunConfig:
        return self.base.replace(**{self.parameter: value, "seed": seed})


@dataclass
class SweepCell:
    value: object
    seed: int
    summary: dict
    result: SimResult | None = None


def _run_cell(cfg: RunConfig) -> tuple[dict, SimResult]:
    exp = build_experiment(cfg)
    res = run_algo(exp, cfg.algo)
    return {"partition_checksum": exp.partition_checksum, **summarize(res)}, res


def run_sweep(spec: SweepSpec, outdir=None, jobs: int = 1, plot_data: bool = False) -> dict:
    """One run per (value, seed); returns cells plus per-value aggregates."""
    keys = [(v, s) for v in spec.values for s in spec.seeds]
    cfgs = [spec.cell(v, s) for v, s in keys]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_run_cell, cfgs))
    else:
        outs = [_run_cell(c) for c in cfgs]
    cells = [SweepCell(v, s, summ, res) for (v, s), (summ, res) in zip(keys, outs)]

    aggregates = []
    for v in spec.values:
        accs = [c.summary["final_acc"] for c in cells if c.value == v and c.summary["final_acc"] is not None]
        losses = [c.summary["final_loss"] for c in cells if c.value == v]
        aggregates.append({
            spec.parameter: v,
            "runs": len(losses),
            "acc_mean": statistics.fmean(accs) if accs else None,
            "acc_median": statistics.median(accs) if accs else None,
            "acc_min": min(accs) if accs else None,
            "acc_max": max(accs) if accs else None,
            "loss_mean": statistics.fmean(losses),
            "loss_min": min(losses),
            "loss_max": max(losses),
        })

    out = Path(outdir) if outdir is not None else output_dir(spec.base)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((spec.parameter, "seed", "final_acc", "best_acc", "final_loss", "best_loss", "dropped"))
    for c in cells:
        s = c.summary
        w.writerow((c.value, c.seed, _real(s["final_acc"]), _real(s["best_acc"]),
                    _real(s["final_loss"]), _real(s["best_loss"]), s["dropped"]))
    atomic_write(out / f"sweep_{spec.parameter}.csv", buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(aggregates[0])
    w.writerow(cols)
    for a in aggregates:
        w.writerow([a[cols[0]], a["runs"]] + [_real(a[k]) for k in cols[2:]])
    atomic_write(out / f"sweep_{spec.parameter}_agg.csv", buf.getvalue())
    if plot_data:
        emit_plot_data({f"{spec.parameter}={c.value}/seed={c.seed}": c.result for c in cells},
                       out / f"sweep_{spec.parameter}_plot.csv")
    return {
        "spec_version": SCHEMA_VERSION,
        "parameter": spec.parameter,
        "values": list(spec.values),
        "seeds": list(spec.seeds),
        "cells": cells,
        "aggregates": aggregates,
    }
