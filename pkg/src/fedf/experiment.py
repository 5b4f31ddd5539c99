"""Communication model, centralized baseline, simulated clock, and run harness."""

import logging
import math
import threading
from dataclasses import dataclass

import numpy as np

from . import model as fm
from .coordination import run_master
from .data import generate_synthetic, holdout, load_csv, split
from .report import ExperimentReport
from .transport import SimTransport, TcpTransport, Transcript, connect, serve_worker
from .worker import WorkerRuntime

log = logging.getLogger(__name__)


class ExperimentError(ValueError):
    pass


# -- communication volume --------------------------------------------------------


@dataclass(frozen=True)
class CommModel:
    """Inputs of the per-epoch communication formulas.

    ``model_bytes`` may be any number type (float, int, Decimal, Fraction);
    the formulas keep that type. When ``n_params`` is given a packed ternary
    is counted as its real size, ceil(M / 4) bytes, instead of the
    fractional ``V * 2 / width_bits``.
    """

    model_bytes: object
    n_workers: int
    batches: int = None
    width_bits: int = 32
    n_params: int = None

    def __post_init__(self):
        if not self.model_bytes > 0:
            raise ExperimentError("model size must be positive")
        if self.n_workers < 1:
            raise ExperimentError("need at least one worker")
        if self.width_bits not in (32, 64):
            raise ExperimentError("width_bits must be 32 or 64")

    @property
    def ternary_bytes(self):
        if self.n_params is not None:
            return (self.n_params + 3) // 4
        return self.model_bytes * 2 / self.width_bits


def comm_fedf(cm):
    """Broadcast to N workers, one model upload, N - 1 packed ternaries."""
    v, n = cm.model_bytes, cm.n_workers
    return v * (n + 1) + (n - 1) * cm.ternary_bytes


def comm_phong(cm):
    """Every worker downloads and uploads a full model."""
    return 2 * cm.model_bytes * cm.n_workers


def comm_terngrad(cm):
    """One packed ternary per mini-batch."""
    if cm.batches is None or cm.batches < 1:
        raise ExperimentError("TernGrad volume needs batches >= 1")
    return cm.batches * cm.ternary_bytes


# -- baselines and metrics --------------------------------------------------------


def run_centralized(spec, data, cfg, epochs, init=None, seed=0):
    """Plain mini-batch SGD on the pooled data.

    ``epochs`` counts rounds of ``cfg.local_epochs`` passes, matching one
    global epoch of a federated worker, so a one-worker federated run with
    the same config and seed lands on the identical parameters.
    Returns (params, loss, accuracy); accuracy is None for regression.
    """
    params = fm.init_parameters(spec, seed) if init is None else np.array(init, dtype=np.float64)
    for r in range(epochs):
        params, _ = fm.train_local(spec, params, data, cfg, epoch_offset=r * cfg.local_epochs)
    return params, fm.loss(spec, params, data), fm.accuracy(spec, params, data)


def approximation_gap(fed_metric, central_metric):
    """Relative shortfall of the federated metric; negative when federated wins."""
    if central_metric == 0:
        raise ExperimentError("central metric is zero")
    return (central_metric - fed_metric) / central_metric


def simulated_timing(shard_sizes, global_epochs, central_epochs, local_epochs=1,
                     per_sample_cost=1.0, overhead=0.0, central_local_epochs=None):
    """Simulated durations under a per-sample clock.

    A worker's epoch takes ``per_sample_cost * S_k * local_epochs_k``; a
    federated epoch lasts as long as its slowest worker plus ``overhead``.
    ``local_epochs`` is an int or a list aligned with ``shard_sizes``.
    """
    sizes = list(shard_sizes)
    if not sizes:
        raise ExperimentError("no shards")
    les = list(local_epochs) if isinstance(local_epochs, (list, tuple)) else [local_epochs] * len(sizes)
    cle = central_local_epochs if central_local_epochs is not None else max(les)
    epoch = max(per_sample_cost * s * le for s, le in zip(sizes, les)) + overhead
    return {
        "fed_epoch_seconds": epoch,
        "fed_seconds": epoch * global_epochs,
        "central_seconds": per_sample_cost * sum(sizes) * cle * central_epochs,
        "per_sample_cost": per_sample_cost,
        "overhead": overhead,
    }


def speedup(report):
    """Centralized over federated simulated time; accepts a report or its timing dict."""
    timing = report.timing if isinstance(report, ExperimentReport) else report
    try:
        central, fed = timing["central_seconds"], timing["fed_seconds"]
    except (KeyError, TypeError):
        raise ExperimentError("report has no simulated timings") from None
    if not fed > 0:
        raise ExperimentError("federated time must be positive")
    return central / fed


# -- harness --------------------------------------------------------------------


@dataclass
class ExperimentResult:
    final: np.ndarray
    report: ExperimentReport
    transcript: Transcript
    train: object
    test: object
    shards: list
    central: np.ndarray = None


def build_datasets(cfg):
    """Pooled training set, optional test set, and worker shards."""
    if cfg.data.source == "synthetic":
        full = generate_synthetic(**cfg.data.synthetic)
    else:
        full = load_csv(cfg.data.csv_path, cfg.data.csv_schema)
    if cfg.data.test_fraction > 0:
        train, test = holdout(full, cfg.data.test_fraction, cfg.data.test_seed)
    else:
        train, test = full, None
    return full, train, test, split(train, cfg.split)


def check_against_data(cfg, datasets):
    """Raise ConfigError for settings that only fail once the data exists."""
    from .config import ConfigError

    full, train, _, shards = datasets
    if full.input_dim != cfg.model.input_dim:
        raise ConfigError("model.input_dim", f"{cfg.model.input_dim} != {full.input_dim} data features")
    for i, (shard, tc) in enumerate(zip(shards, cfg.workers)):
        if tc.batch_size > shard.sample_count:
            raise ConfigError(
                f"workers[{i}].batch_size", f"{tc.batch_size} exceeds shard size {shard.sample_count}"
            )
    if cfg.central_training.batch_size > train.sample_count:
        raise ConfigError("centralized.training.batch_size", "exceeds the training set size")
    try:
        fm.loss(cfg.model, fm.init_parameters(cfg.model, 0), train)
    except fm.ModelError as exc:
        raise ConfigError("model", str(exc)) from None


def make_runtimes(cfg, shards):
    return [WorkerRuntime(i + 1, shard, tc) for i, (shard, tc) in enumerate(zip(shards, cfg.workers))]


class LocalTcpTransport(TcpTransport):
    """TCP transport with the workers running as threads of this process."""

    def __init__(self, runtimes, host="127.0.0.1", port=0, timeout=30.0):
        super().__init__(host, port, len(runtimes), timeout)
        self.errors = []
        self.threads = []
        for rt in runtimes:
            th = threading.Thread(target=self._serve, args=(rt,), name=f"fedf-worker-{rt.worker_id}", daemon=True)
            self.threads.append(th)
        for th in self.threads:
            th.start()

    def _serve(self, runtime):
        try:
            serve_worker(runtime, connect(*self.address, timeout=self.timeout))
        except Exception as exc:
            self.errors.append((runtime.worker_id, exc))

    def close(self):
        super().close()
        for th in self.threads:
            th.join(timeout=self.timeout)


def evaluate(spec, params, train, test):
    out = {"train_loss": fm.loss(spec, params, train), "train_accuracy": fm.accuracy(spec, params, train)}
    if test is not None:
        out["test_loss"] = fm.loss(spec, params, test)
        out["test_accuracy"] = fm.accuracy(spec, params, test)
    return out


def headline_metric(metrics):
    """(name, value) of the metric used for gaps and sweeps: accuracy if defined, else loss."""
    split_name = "test" if "test_loss" in metrics else "train"
    acc = metrics[f"{split_name}_accuracy"]
    if acc is not None:
        return f"{split_name}_accuracy", acc
    return f"{split_name}_loss", metrics[f"{split_name}_loss"]


def run_experiment(cfg, transport=None, runtimes=None, baseline=True, checkpoint_dir=None, datasets=None):
    """Full federated run plus the centralized baseline, assembled into one report.

    ``transport`` defaults to the mode named in ``cfg``; ``runtimes`` may be
    supplied to substitute scripted workers.
    """
    _, train, test, shards = datasets if datasets is not None else build_datasets(cfg)
    runtimes = runtimes if runtimes is not None else make_runtimes(cfg, shards)
    if transport is None:
        if cfg.transport == "tcp":
            transport = LocalTcpTransport(runtimes, cfg.host, cfg.port, cfg.timeout)
        else:
            transport = SimTransport(runtimes)
    transcript = Transcript(cfg.width_bits)
    final, report = run_master(transport, cfg.model, cfg.master, transcript, checkpoint_dir=checkpoint_dir)

    report.config = cfg.raw
    report.final = {"federated": evaluate(cfg.model, final, train, test)}
    central = None
    if baseline:
        central, _, _ = run_centralized(
            cfg.model, train, cfg.central_training, cfg.central_epochs, seed=cfg.master.seed
        )
        report.final["centralized"] = evaluate(cfg.model, central, train, test)
        name, fed_value = headline_metric(report.final["federated"])
        _, central_value = headline_metric(report.final["centralized"])
        report.final["headline_metric"] = name
        if name.endswith("accuracy"):
            report.final["approximation_gap"] = approximation_gap(fed_value, central_value)
        else:
            report.final["loss_ratio"] = fed_value / central_value if central_value else None
    report.timing = simulated_timing(
        [s.sample_count for s in shards],
        cfg.master.global_epochs,
        cfg.central_epochs,
        [w.local_epochs for w in cfg.workers],
        cfg.per_sample_cost,
        cfg.overhead,
        cfg.central_training.local_epochs,
    )
    report.timing["speedup"] = speedup(report.timing)
    report.communication = communication_summary(cfg, transcript, report)
    return ExperimentResult(final, report, transcript, train, test, shards, central)


def communication_summary(cfg, transcript, report):
    m = cfg.model.n_params
    v = m * cfg.width_bits // 8
    cm = CommModel(v, cfg.n_workers, batches=_batches(cfg, report), width_bits=cfg.width_bits, n_params=m)
    measured = transcript.data_bytes_by_epoch()
    return {
        "width_bits": cfg.width_bits,
        "model_bytes": v,
        "n_params": m,
        "analytic_fedf_bytes": comm_fedf(cm),
        "analytic_fedf_bytes_unpadded": comm_fedf(CommModel(v, cfg.n_workers, width_bits=cfg.width_bits)),
        "phong_bytes": comm_phong(cm),
        "terngrad_bytes": comm_terngrad(cm),
        "terngrad_batches": cm.batches,
        "measured_bytes_per_epoch": [measured.get(e.epoch, 0) for e in report.epochs],
        "control_bytes_per_epoch": [e.control_bytes for e in report.epochs],
    }


def _batches(cfg, report):
    # mini-batches per global epoch summed over workers
    sizes = [report.workers[str(i + 1)]["data_size"] for i in range(cfg.n_workers)]
    return sum(math.ceil(s / w.batch_size) * w.local_epochs for s, w in zip(sizes, cfg.workers))
