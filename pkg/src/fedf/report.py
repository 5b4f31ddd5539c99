"""Structured run report, serialized as versioned JSON."""

import json
import math
from dataclasses import asdict, dataclass, field

SCHEMA = "fedf-report/1"

# keys whose values depend on the wall clock; everything else is reproducible
WALL_CLOCK_KEYS = ("created", "wall_seconds", "run_dir")


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


@dataclass
class EpochRecord:
    epoch: int
    costs: dict
    goodness: dict
    pilot: int
    data_bytes_down: int
    data_bytes_up: int
    control_bytes: int
    frame_bytes: int
    metrics: dict = field(default_factory=dict)

    @property
    def data_bytes(self):
        return self.data_bytes_down + self.data_bytes_up


@dataclass
class ExperimentReport:
    config: dict = field(default_factory=dict)
    workers: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    communication: dict = field(default_factory=dict)
    created: str = ""

    @property
    def pilots(self):
        return [e.pilot for e in self.epochs]

    def to_dict(self):
        d = asdict(self)
        for rec, out in zip(self.epochs, d["epochs"]):
            out["data_bytes"] = rec.data_bytes
        return {"schema": SCHEMA, **_jsonable(d)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def strip_wall_clock(obj):
    """Copy of a report dict without the wall-clock dependent entries."""
    if isinstance(obj, dict):
        return {k: strip_wall_clock(v) for k, v in obj.items() if k not in WALL_CLOCK_KEYS}
    if isinstance(obj, list):
        return [strip_wall_clock(v) for v in obj]
    return obj
