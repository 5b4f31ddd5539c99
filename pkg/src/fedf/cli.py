"""Command-line entry point: ``fedf run|comm|audit|sweep``.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 audit findings.
Set FEDF_LOG (e.g. ``FEDF_LOG=debug``) for log output on stderr.
"""

import argparse
import csv
import datetime
import io
import json
import logging
import os
import sys
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation

from . import experiment as ex
from .config import ConfigError, load_config, parse_config
from .coordination import EpochAbort
from .data import DataError
from .model import DivergenceError, ModelError
from .transport import (
    TcpTransport,
    Transcript,
    TranscriptFormatError,
    TransportError,
    audit,
    connect,
    serve_worker,
)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_AUDIT = 0, 1, 2, 3

log = logging.getLogger("fedf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


_UNITS = {"B": 1, "KB": 10**3, "MB": 10**6, "GB": 10**9}


def parse_size(text):
    """'1.8MB' -> (Decimal('1.8'), 'MB'); a bare number is in bytes."""
    s = text.strip().upper()
    unit = "B"
    for u in sorted(_UNITS, key=len, reverse=True):
        if s.endswith(u) and s != u:
            unit, s = u, s[: -len(u)].strip()
            break
    try:
        value = Decimal(s)
    except InvalidOperation:
        raise argparse.ArgumentTypeError(f"not a size: {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return value, unit


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _epochs_list(text):
    try:
        values = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("epochs must be positive integers")
    return values


def round2(x):
    """Round half up to two decimals, the way printed tables do."""
    return Decimal(str(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def build_parser():
    p = _Parser(prog="fedf", description="Synchronous federated training with ternary compression.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a federated experiment and its centralized baseline")
    r.add_argument("config", help="JSON run configuration")
    r.add_argument("--role", choices=("local", "master", "worker"), default="local",
                   help="local: master and workers in this process (default); master/worker: one side of a TCP run")
    r.add_argument("--id", type=_positive_int, help="worker id (1-based) for --role worker")
    r.add_argument("--transport", choices=("sim", "tcp"), help="override transport.mode")
    r.add_argument("--host", help="override transport.host")
    r.add_argument("--port", type=int, help="override transport.port")
    r.add_argument("--timeout", type=float, help="override transport.timeout (seconds)")
    r.add_argument("--epochs", type=_positive_int, help="override master.global_epochs")
    r.add_argument("--alpha0", type=float, help="override master.alpha0")
    r.add_argument("--beta", type=float, help="override master.beta")
    r.add_argument("--output-dir", help="override output.dir; each run gets a timestamp+seed subdirectory")
    r.add_argument("--checkpoint-dir", help="write the global model after every epoch here")
    r.add_argument("--no-baseline", action="store_true", help="skip the centralized baseline")
    r.add_argument("--no-transcript", action="store_true", help="do not write transcript.jsonl")

    c = sub.add_parser("comm", help="per-epoch communication volume of FEDF, Phong et al. and TernGrad")
    c.add_argument("--model-bytes", required=True, type=parse_size, metavar="V",
                   help="model size, e.g. 1.8MB or 68 (bytes)")
    c.add_argument("--workers", required=True, type=_positive_int, metavar="N", help="number of workers")
    c.add_argument("--batches", type=_positive_int, metavar="B", help="mini-batches per epoch for TernGrad")
    c.add_argument("--width", type=int, choices=(32, 64), default=32, help="bits per parameter (default 32)")
    c.add_argument("--json", action="store_true", help="machine-readable output")

    a = sub.add_parser("audit", help="audit a transcript for protocol and privacy findings")
    a.add_argument("transcript", help="transcript.jsonl written by 'fedf run'")
    a.add_argument("--json", action="store_true", help="machine-readable output")
    a.add_argument("--pilot-run-limit", type=_positive_int,
                   help="consecutive pilot epochs that count as a finding (default max(4, 2N+2))")
    a.add_argument("--canary", action="append", default=[], metavar="HEX",
                   help="byte string (hex) that must not appear in any payload; repeatable")

    s = sub.add_parser("sweep", help="accuracy/speedup trade-off over several global epoch counts")
    s.add_argument("config", help="JSON run configuration")
    s.add_argument("--epochs-list", required=True, type=_epochs_list, metavar="E1,E2,...",
                   help="comma-separated global epoch counts, one run each")
    s.add_argument("--out", help="also write the CSV to this file")
    return p


def _apply_overrides(args):
    cfg = load_config(args.config)
    raw = cfg.raw
    changed = False
    for flag, section, key in [
        ("transport", "transport", "mode"),
        ("host", "transport", "host"),
        ("port", "transport", "port"),
        ("timeout", "transport", "timeout"),
        ("epochs", "master", "global_epochs"),
        ("alpha0", "master", "alpha0"),
        ("beta", "master", "beta"),
        ("output_dir", "output", "dir"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            raw.setdefault(section, {})[key] = value
            changed = True
    if changed:
        cfg = parse_config(raw)
    return cfg


def _run_dir(base, seed):
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    path = os.path.join(base, f"{stamp}-seed{seed}")
    n = 1
    while os.path.exists(path):
        path = os.path.join(base, f"{stamp}-seed{seed}-{n}")
        n += 1
    os.makedirs(path)
    return path


def _manifest(cfg, result):
    meta = dict(result.train.meta)
    return {
        "data": cfg.raw.get("data"),
        "generator": {k: v for k, v in meta.items() if k != "centres"},
        "train_samples": result.train.sample_count,
        "test_samples": result.test.sample_count if result.test is not None else 0,
        "split": cfg.raw.get("split"),
        "shard_sizes": [s.sample_count for s in result.shards],
    }


def _summary(report, out):
    print(f"{'epoch':>5} {'pilot':>5} {'data bytes':>11}  costs", file=out)
    for e in report.epochs:
        costs = " ".join(f"{k}:{v:.5g}" for k, v in sorted(e.costs.items()))
        print(f"{e.epoch:>5} {e.pilot:>5} {e.data_bytes:>11}  {costs}", file=out)
    fed = report.final.get("federated", {})
    cen = report.final.get("centralized")
    for name in sorted(fed):
        if fed[name] is None:
            continue
        line = f"{name:>16}: federated {fed[name]:.6g}"
        if cen:
            line += f"  centralized {cen[name]:.6g}"
        print(line, file=out)
    if "approximation_gap" in report.final:
        print(f"approximation gap: {report.final['approximation_gap'] * 100:.2f}%", file=out)
    print(f"simulated speedup: {report.timing['speedup']:.4g}", file=out)


def cmd_run(args, out):
    cfg = _apply_overrides(args)
    if args.role == "worker":
        if args.id is None or args.id > cfg.n_workers:
            raise UsageError(f"--role worker needs --id between 1 and {cfg.n_workers}")
        _, _, _, shards = ex.build_datasets(cfg)
        runtime = ex.make_runtimes(cfg, shards)[args.id - 1]
        log.info("worker %d connecting to %s:%d", args.id, cfg.host, cfg.port)
        serve_worker(runtime, connect(cfg.host, cfg.port, timeout=cfg.timeout))
        print(f"worker {args.id}: finished after {runtime.state.epoch} epochs", file=out)
        return EXIT_OK

    transport = None
    if args.role == "master":
        if cfg.port == 0:
            raise UsageError("--role master needs a fixed transport.port")
        transport = TcpTransport(cfg.host, cfg.port, cfg.n_workers, cfg.timeout)
        log.info("master listening on %s:%d for %d workers", cfg.host, cfg.port, cfg.n_workers)

    datasets = ex.build_datasets(cfg)
    ex.check_against_data(cfg, datasets)
    started = datetime.datetime.now()
    run_dir = _run_dir(cfg.output_dir, cfg.master.seed)
    ckpt = args.checkpoint_dir
    if ckpt is None and cfg.checkpoints:
        ckpt = os.path.join(run_dir, "checkpoints")
    result = ex.run_experiment(
        cfg, transport=transport, baseline=not args.no_baseline, checkpoint_dir=ckpt, datasets=datasets
    )
    report = result.report
    report.created = started.isoformat(timespec="seconds")
    report.timing["wall_seconds"] = (datetime.datetime.now() - started).total_seconds()
    report.write(os.path.join(run_dir, "report.json"))
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(_manifest(cfg, result), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not args.no_transcript:
        result.transcript.write_jsonl(os.path.join(run_dir, "transcript.jsonl"))
    _summary(report, out)
    print(f"run directory: {run_dir}", file=out)
    return EXIT_OK


def comm_table(value, unit, workers, batches=None, width=32):
    cm = ex.CommModel(value, workers, batches=batches, width_bits=width)
    row = {"fedf": ex.comm_fedf(cm), "phong": ex.comm_phong(cm)}
    row["terngrad"] = ex.comm_terngrad(cm) if batches else None
    return {"unit": unit, "model_size": value, "workers": workers, "batches": batches, "width_bits": width, **row}


def cmd_comm(args, out):
    value, unit = args.model_bytes
    row = comm_table(value, unit, args.workers, args.batches, args.width)
    if args.json:
        print(json.dumps({k: (float(v) if isinstance(v, Decimal) else v) for k, v in row.items()}), file=out)
        return EXIT_OK
    cols = [("FEDF", row["fedf"]), ("Phong et al.", row["phong"]), ("TernGrad", row["terngrad"])]
    print(f"Data exchanged per training epoch ({unit}), V={value}{unit} N={args.workers} width={args.width}", file=out)
    print(" ".join(f"{name:>14}" for name, _ in cols), file=out)
    print(" ".join(f"{('n/a' if v is None else str(round2(v))):>14}" for _, v in cols), file=out)
    return EXIT_OK


def cmd_audit(args, out):
    try:
        transcript = Transcript.read_jsonl(args.transcript)
    except OSError as exc:
        raise UsageError(f"cannot read transcript: {exc}") from None
    try:
        canaries = [bytes.fromhex(c) for c in args.canary]
    except ValueError as exc:
        raise UsageError(f"--canary: {exc}") from None
    rep = audit(transcript, canaries, args.pilot_run_limit)
    if args.json:
        print(json.dumps(rep.to_dict(), indent=2, sort_keys=True), file=out)
    else:
        print(f"epochs audited: {rep.epochs}", file=out)
        runs = ", ".join(f"worker {k}: {v}" for k, v in sorted(rep.pilot_runs.items()))
        print(f"longest consecutive pilot run: {runs}", file=out)
        if rep.ok:
            print("no findings", file=out)
        for f in rep.findings:
            print(f"FINDING {f}", file=out)
    return EXIT_OK if rep.ok else EXIT_AUDIT


def sweep_rows(cfg, epochs_list):
    rows = []
    for e in epochs_list:
        result = ex.run_experiment(cfg.with_epochs(e), baseline=False)
        name, value = ex.headline_metric(result.report.final["federated"])
        rows.append((e, name, value, result.report.timing["speedup"]))
    return rows


def cmd_sweep(args, out):
    cfg = load_config(args.config)
    rows = sweep_rows(cfg, args.epochs_list)
    metric = "accuracy" if rows[0][1].endswith("accuracy") else "loss"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epochs", metric, "speedup"])
    for e, _, value, sp in rows:
        w.writerow([e, repr(value), repr(sp)])
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(buf.getvalue())
    out.write(buf.getvalue())
    return EXIT_OK


COMMANDS = {"run": cmd_run, "comm": cmd_comm, "audit": cmd_audit, "sweep": cmd_sweep}


def main(argv=None, out=None):
    out = out or sys.stdout
    level = os.environ.get("FEDF_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already printed
        return exc.code
    try:
        return COMMANDS[args.command](args, out)
    except (ConfigError, UsageError, TranscriptFormatError) as exc:
        print(f"fedf {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EpochAbort, TransportError, DivergenceError, ModelError, DataError, ex.ExperimentError, OSError) as exc:
        print(f"fedf {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
