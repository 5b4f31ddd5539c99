"""Declarative run configuration (JSON) and its validation.

Validation errors carry the dotted path of the offending field, e.g.
``workers[2].batch_size``.
"""

import copy
import json
from dataclasses import dataclass, field

from .coordination import CoordinationError, MasterConfig
from .data import SYNTHETIC_KINDS, CsvSchema, DataError, SplitSpec
from .model import MODEL_KINDS, ModelError, ModelSpec, TrainingConfig


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _get(d, key, path, kind, required=True, default=None, check=None, hint=""):
    where = f"{path}.{key}" if path else key
    if key not in d:
        if required:
            raise ConfigError(where, "missing required field")
        return default
    v = d[key]
    ok = isinstance(v, kind) and not (kind in (int, (int, float)) and isinstance(v, bool))
    if not ok:
        name = kind.__name__ if isinstance(kind, type) else "number"
        raise ConfigError(where, f"expected {name}, got {type(v).__name__}")
    if check is not None and not check(v):
        raise ConfigError(where, f"invalid value {v!r}" + (f" ({hint})" if hint else ""))
    return v


_NUM = (int, float)


def _positive(x):
    return x > 0


def _section(raw, key, required=True):
    if key not in raw:
        if required:
            raise ConfigError(key, "missing required section")
        return {}
    if not isinstance(raw[key], dict):
        raise ConfigError(key, "expected an object")
    return raw[key]


@dataclass
class DataConfig:
    source: str
    synthetic: dict = field(default_factory=dict)
    csv_path: str = ""
    csv_schema: CsvSchema = None
    test_fraction: float = 0.0
    test_seed: int = 0


@dataclass
class RunConfig:
    model: ModelSpec
    data: DataConfig
    split: SplitSpec
    workers: list
    master: MasterConfig
    central_epochs: int
    central_training: TrainingConfig
    transport: str = "sim"
    host: str = "127.0.0.1"
    port: int = 0
    timeout: float = 30.0
    width_bits: int = 32
    per_sample_cost: float = 1e-3
    overhead: float = 0.0
    output_dir: str = "runs"
    checkpoints: bool = False
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def n_workers(self):
        return len(self.workers)

    def with_epochs(self, global_epochs):
        raw = copy.deepcopy(self.raw)
        raw["master"]["global_epochs"] = global_epochs
        return parse_config(raw)


def _training(d, path):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    try:
        return TrainingConfig(
            learning_rate=float(_get(d, "learning_rate", path, _NUM, check=_positive)),
            batch_size=_get(d, "batch_size", path, int, check=_positive),
            local_epochs=_get(d, "local_epochs", path, int, False, 1, _positive),
            shuffle_seed=_get(d, "shuffle_seed", path, int),
            optimizer=_get(d, "optimizer", path, str, False, "sgd"),
            momentum=float(_get(d, "momentum", path, _NUM, False, 0.0)),
        )
    except ModelError as exc:
        raise ConfigError(path, str(exc)) from None


def parse_config(raw):
    """Validate a config mapping and build a RunConfig."""
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")

    m = _section(raw, "model")
    try:
        spec = ModelSpec(
            kind=_get(m, "kind", "model", str, check=lambda v: v in MODEL_KINDS, hint=", ".join(MODEL_KINDS)),
            input_dim=_get(m, "input_dim", "model", int, check=_positive),
            output_dim=_get(m, "output_dim", "model", int, False, 1, _positive),
            hidden_dim=_get(m, "hidden_dim", "model", int, False, 0),
            loss=_get(m, "loss", "model", str, False, ""),
        )
    except ModelError as exc:
        raise ConfigError("model", str(exc)) from None

    d = _section(raw, "data")
    source = _get(d, "source", "data", str, check=lambda v: v in ("synthetic", "csv"), hint="synthetic or csv")
    data = DataConfig(source=source)
    if source == "synthetic":
        data.synthetic = {
            "kind": _get(d, "kind", "data", str, check=lambda v: v in SYNTHETIC_KINDS, hint=", ".join(SYNTHETIC_KINDS)),
            "n": _get(d, "n", "data", int, check=_positive),
            "dim": _get(d, "dim", "data", int, check=_positive),
            "noise_sigma": float(_get(d, "noise_sigma", "data", _NUM, check=lambda v: v >= 0)),
            "seed": _get(d, "seed", "data", int),
            "n_classes": _get(d, "n_classes", "data", int, False, 2, lambda v: v >= 2),
        }
        if data.synthetic["dim"] != spec.input_dim:
            raise ConfigError("data.dim", f"{data.synthetic['dim']} != model.input_dim {spec.input_dim}")
    else:
        data.csv_path = _get(d, "path", "data", str)
        data.csv_schema = CsvSchema(
            n_features=_get(d, "n_features", "data", int, check=_positive),
            n_targets=_get(d, "n_targets", "data", int, False, 1, _positive),
            header=_get(d, "header", "data", bool, False, False),
            classification=_get(d, "classification", "data", bool, False, spec.loss == "cross-entropy"),
        )
    data.test_fraction = float(_get(d, "test_fraction", "data", _NUM, False, 0.0, lambda v: 0 <= v < 1))
    if data.test_fraction > 0:
        data.test_seed = _get(d, "test_seed", "data", int)

    s = _section(raw, "split")
    try:
        split = SplitSpec(
            n_parts=_get(s, "n_parts", "split", int, check=_positive),
            min_fraction=float(_get(s, "min_fraction", "split", _NUM, check=_positive)),
            seed=_get(s, "seed", "split", int),
            concentration=float(_get(s, "concentration", "split", _NUM, False, 5.0, _positive)),
        )
        split.validate()
    except DataError as exc:
        raise ConfigError("split", str(exc)) from None

    ws = raw.get("workers")
    if not isinstance(ws, list) or not ws:
        raise ConfigError("workers", "expected a non-empty list of training configs")
    workers = [_training(w, f"workers[{i}]") for i, w in enumerate(ws)]
    if len(workers) != split.n_parts:
        raise ConfigError("workers", f"{len(workers)} training configs but split.n_parts = {split.n_parts}")

    ms = _section(raw, "master")
    try:
        master = MasterConfig(
            alpha0=float(_get(ms, "alpha0", "master", _NUM, False, 0.1)),
            beta=float(_get(ms, "beta", "master", _NUM, False, 0.2)),
            global_epochs=_get(ms, "global_epochs", "master", int, check=_positive),
            seed=_get(ms, "seed", "master", int),
            worker_betas=_get(ms, "worker_betas", "master", dict, False, {}),
        )
    except ConfigError:
        raise
    except (CoordinationError, ValueError) as exc:
        raise ConfigError("master", str(exc)) from None

    c = _section(raw, "centralized", required=False)
    central_epochs = _get(c, "epochs", "centralized", int, False, master.global_epochs, _positive)
    central_training = _training(c["training"], "centralized.training") if "training" in c else workers[0]

    t = _section(raw, "transport", required=False)
    a = _section(raw, "accounting", required=False)
    k = _section(raw, "clock", required=False)
    o = _section(raw, "output", required=False)
    return RunConfig(
        model=spec,
        data=data,
        split=split,
        workers=workers,
        master=master,
        central_epochs=central_epochs,
        central_training=central_training,
        transport=_get(t, "mode", "transport", str, False, "sim", lambda v: v in ("sim", "tcp"), "sim or tcp"),
        host=_get(t, "host", "transport", str, False, "127.0.0.1"),
        port=_get(t, "port", "transport", int, False, 0, lambda v: 0 <= v < 65536),
        timeout=float(_get(t, "timeout", "transport", _NUM, False, 30.0, _positive)),
        width_bits=_get(a, "width_bits", "accounting", int, False, 32, lambda v: v in (32, 64), "32 or 64"),
        per_sample_cost=float(_get(k, "per_sample_cost", "clock", _NUM, False, 1e-3, _positive)),
        overhead=float(_get(k, "overhead", "clock", _NUM, False, 0.0, lambda v: v >= 0)),
        output_dir=_get(o, "dir", "output", str, False, "runs"),
        checkpoints=_get(o, "checkpoints", "output", bool, False, False),
        raw=copy.deepcopy(raw),
    )


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(raw)
