"""Command line entry point: ``hflsim {gen,run,compare,sweep}``.

Every configuration key is also a flag (``--T 50``, ``--data.gamma 1``).
Flags override values from ``--config``. The ``HFLSIM_OUTPUT_DIR`` environment
variable overrides the output directory.

Exit codes: 0 success, 1 configuration error, 2 protocol violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .datagen import IdxFormatError, InsufficientSamplesError, write_dataset
from .flcore import ProtocolError
from .harness import (
    ALGOS,
    CONFIG_KEYS,
    SWEEPABLE,
    ConfigError,
    RunError,
    SweepSpec,
    atomic_write,
    build_experiment,
    dump_config,
    output_dir,
    parse_config,
    run_compare,
    run_sweep,
)

log = logging.getLogger("hflsim")

EXIT_OK, EXIT_CONFIG, EXIT_PROTOCOL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # Malformed flags are configuration errors, not argparse's default status 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file or JSON object")
    g = p.add_argument_group("configuration keys")
    for key, typ in CONFIG_KEYS.items():
        g.add_argument(f"--{key}", dest=key, metavar=typ.split()[0].upper(), default=None)


def _config(args) -> object:
    overrides = {k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None}
    return parse_config(args.config, overrides)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hflsim", description="Hybrid federated learning simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write the per-device datasets and the test set")
    p.add_argument("--format", choices=("csv", "bin"), default="csv")
    _add_config_flags(p)

    p = sub.add_parser("run", help="run the configured algorithm once")
    p.add_argument("--plot-data", action="store_true")
    _add_config_flags(p)

    p = sub.add_parser("compare", help="run several algorithms on one partition")
    p.add_argument("--algos", default="hfl,fedavg,fedprox,ssgd", help=f"comma list from {ALGOS}")
    p.add_argument("--plot-data", action="store_true")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="sweep lambda0 or tau_max over seeds")
    p.add_argument("--param", required=True, choices=SWEEPABLE)
    p.add_argument("--values", required=True, help="comma list")
    p.add_argument("--seeds", default="0,1,2", help="comma list")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--plot-data", action="store_true")
    _add_config_flags(p)
    return ap


def _cmd_gen(args) -> None:
    cfg = _config(args)
    exp = build_experiment(cfg)
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    ext = args.format
    for d in exp.devices:
        write_dataset(out / f"device_{d.id:04d}.{ext}", d.shard, ext)
    if exp.test is not None:
        write_dataset(out / f"test.{ext}", exp.test, ext)
    meta = {
        "partition_checksum": exp.partition_checksum,
        "devices": [{"id": d.id, "samples": len(d.shard), "tau": d.tau, "weight": d.weight} for d in exp.devices],
    }
    atomic_write(out / "devices.json", json.dumps(meta, indent=2) + "\n")
    atomic_write(out / "config.txt", dump_config(cfg))
    print(f"wrote {len(exp.devices)} device files to {out}")


def _print_summary(summary: dict) -> None:
    for algo, s in summary["algos"].items():
        acc = "n/a" if s["final_acc"] is None else f"{s['final_acc']:.4f}"
        print(f"{algo:8s} final_loss={s['final_loss']:.6f} final_acc={acc} dropped={s['dropped']}")


def _cmd_run(args) -> None:
    cfg = _config(args)
    summary = run_compare(cfg, [cfg.algo], plot_data=args.plot_data)
    _print_summary(summary)


def _cmd_compare(args) -> None:
    cfg = _config(args)
    summary = run_compare(cfg, _csv_list(args.algos), plot_data=args.plot_data)
    _print_summary(summary)


def _cmd_sweep(args) -> None:
    cfg = _config(args)
    spec = SweepSpec(args.param, tuple(_csv_list(args.values)), cfg, tuple(int(s) for s in _csv_list(args.seeds)))
    res = run_sweep(spec, jobs=args.jobs, plot_data=args.plot_data)
    for a in res["aggregates"]:
        print(
            f"{spec.parameter}={a[spec.parameter]} runs={a['runs']} "
            f"acc_mean={a['acc_mean']} acc_min={a['acc_min']} acc_max={a['acc_max']}"
        )


COMMANDS = {"gen": _cmd_gen, "run": _cmd_run, "compare": _cmd_compare, "sweep": _cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, IdxFormatError, InsufficientSamplesError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunError as exc:
        if isinstance(exc.cause, ProtocolError):
            print(f"protocol violation: {exc}", file=sys.stderr)
            return EXIT_PROTOCOL
        raise
    except ProtocolError as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
