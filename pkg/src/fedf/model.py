"""Small differentiable models, their losses, and a mini-batch SGD trainer.

Parameters always travel as one flat float64 vector. The layout of that
vector for each model kind is:

* ``linear-regression`` / ``logistic-regression``: W (in x out, row-major), b (out)
* ``mlp-1h``: W1 (in x hidden), b1 (hidden), W2 (hidden x out), b2 (out),
  with a tanh hidden layer.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .rng import XorShift64Star, derive_seed

MODEL_KINDS = ("linear-regression", "logistic-regression", "mlp-1h")
LOSSES = ("mse", "cross-entropy")


class ModelError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    def __init__(self, step, epoch, batch, detail="non-finite value"):
        super().__init__(f"training diverged at step {step} (epoch {epoch}, batch {batch}): {detail}")
        self.step = step
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    output_dim: int = 1
    hidden_dim: int = 0
    loss: str = ""

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if not self.loss:
            default = "cross-entropy" if self.kind == "logistic-regression" else "mse"
            object.__setattr__(self, "loss", default)
        if self.loss not in LOSSES:
            raise ModelError(f"unknown loss {self.loss!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ModelError("input_dim and output_dim must be >= 1")
        if self.kind == "mlp-1h" and self.hidden_dim < 1:
            raise ModelError("mlp-1h needs hidden_dim >= 1")
        if self.loss == "cross-entropy" and self.output_dim < 2:
            raise ModelError("cross-entropy needs output_dim >= 2 (one logit per class)")

    def layer_shapes(self):
        """(fan_in, fan_out) of every affine layer, in storage order."""
        if self.kind == "mlp-1h":
            return [(self.input_dim, self.hidden_dim), (self.hidden_dim, self.output_dim)]
        return [(self.input_dim, self.output_dim)]

    @property
    def n_params(self):
        return sum(i * o + o for i, o in self.layer_shapes())

    @property
    def layout_id(self):
        dims = [self.input_dim] + ([self.hidden_dim] if self.kind == "mlp-1h" else []) + [self.output_dim]
        return self.kind + ":" + "x".join(str(d) for d in dims)

    def to_dict(self):
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_dim": self.hidden_dim,
            "loss": self.loss,
        }


@dataclass(frozen=True)
class TrainingConfig:
    """A worker's private hyperparameters. Never serialized onto the wire."""

    learning_rate: float
    batch_size: int
    local_epochs: int = 1
    shuffle_seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ModelError("learning_rate must be positive")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ModelError("batch_size and local_epochs must be positive")
        if self.optimizer not in ("sgd", "sgd-momentum"):
            raise ModelError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ModelError("momentum must be in [0, 1)")

    def check_against(self, data):
        if self.batch_size > data.sample_count:
            raise ModelError(
                f"batch_size {self.batch_size} exceeds shard size {data.sample_count}"
            )


def _unpack(spec, params):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ModelError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes():
        w = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def _check_data(spec, data):
    if data.input_dim != spec.input_dim:
        raise ModelError(f"data has {data.input_dim} features, model expects {spec.input_dim}")
    if spec.loss == "cross-entropy":
        if not data.is_classification:
            raise ModelError("cross-entropy needs integer class targets")
        if data.targets.min() < 0 or data.targets.max() >= spec.output_dim:
            raise ModelError(f"class index out of range for {spec.output_dim} classes")
    else:
        if data.is_classification or data.targets.shape[1] != spec.output_dim:
            raise ModelError(f"mse needs {spec.output_dim} real-valued target columns")


def init_parameters(spec, seed):
    """Uniform draws in [-0.5, 0.5] scaled by 1/sqrt(fan_in) of each layer."""
    gen = XorShift64Star(derive_seed(seed, spec.n_params))
    out = np.empty(spec.n_params)
    pos = 0
    for fan_in, fan_out in spec.layer_shapes():
        scale = 1.0 / math.sqrt(fan_in)
        for _ in range(fan_in * fan_out + fan_out):
            out[pos] = (gen.uniform() - 0.5) * scale
            pos += 1
    return out


def forward(spec, params, features):
    """Raw model outputs (logits for cross-entropy)."""
    layers = _unpack(spec, params)
    if spec.kind == "mlp-1h":
        (w1, b1), (w2, b2) = layers
        return np.tanh(features @ w1 + b1) @ w2 + b2
    w, b = layers[0]
    return features @ w + b


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(spec, params, data):
    """Mean per-sample loss over ``data``.

    mse is the squared error summed over outputs, averaged over samples.
    """
    _check_data(spec, data)
    z = forward(spec, params, data.features)
    if spec.loss == "mse":
        return float(np.mean(np.sum((z - data.targets) ** 2, axis=1)))
    logp = _log_softmax(z)
    return float(-np.mean(logp[np.arange(data.sample_count), data.targets]))


def _output_grad(spec, z, y):
    n = z.shape[0]
    if spec.loss == "mse":
        return 2.0 * (z - y) / n
    p = np.exp(_log_softmax(z))
    p[np.arange(n), y] -= 1.0
    return p / n


def _gradient(spec, params, x, y):
    layers = _unpack(spec, params)
    if spec.kind == "mlp-1h":
        (w1, b1), (w2, b2) = layers
        h = np.tanh(x @ w1 + b1)
        dz = _output_grad(spec, h @ w2 + b2, y)
        da = (dz @ w2.T) * (1.0 - h * h)
        parts = [x.T @ da, da.sum(axis=0), h.T @ dz, dz.sum(axis=0)]
    else:
        w, b = layers[0]
        dz = _output_grad(spec, x @ w + b, y)
        parts = [x.T @ dz, dz.sum(axis=0)]
    return np.concatenate([p.reshape(-1) for p in parts])


def gradient(spec, params, batch):
    """Analytic gradient of the mean batch loss, same layout as ``params``."""
    _check_data(spec, batch)
    return _gradient(spec, params, batch.features, batch.targets)


def accuracy(spec, params, data):
    """Classification accuracy, or None for regression models."""
    if spec.loss != "cross-entropy":
        return None
    _check_data(spec, data)
    pred = np.argmax(forward(spec, params, data.features), axis=1)
    return float(np.mean(pred == data.targets))


def train_local(spec, start, data, cfg, epoch_offset=0):
    """Run ``cfg.local_epochs`` passes of shuffled mini-batch SGD from ``start``.

    Each pass ``e`` shuffles with seed ``derive_seed(shuffle_seed,
    epoch_offset + e)``; the last batch may be short. Returns the new
    parameters and their loss on all of ``data``.
    """
    cfg.check_against(data)
    _check_data(spec, data)
    params = np.array(start, dtype=np.float64)
    velocity = np.zeros_like(params) if cfg.optimizer == "sgd-momentum" else None
    with np.errstate(over="ignore", invalid="ignore"):
        n = data.sample_count
        step = 0
        for e in range(cfg.local_epochs):
            epoch = epoch_offset + e
            if cfg.batch_size < n:
                order = np.array(XorShift64Star(derive_seed(cfg.shuffle_seed, epoch)).permutation(n))
            for b, lo in enumerate(range(0, n, cfg.batch_size)):
                if cfg.batch_size >= n:
                    g = _gradient(spec, params, data.features, data.targets)
                else:
                    idx = order[lo : lo + cfg.batch_size]
                    g = _gradient(spec, params, data.features[idx], data.targets[idx])
                if velocity is None:
                    params = params - cfg.learning_rate * g
                else:
                    velocity = cfg.momentum * velocity + g
                    params = params - cfg.learning_rate * velocity
                step += 1
                if not np.all(np.isfinite(params)):
                    raise DivergenceError(step, epoch, b)
        cost = loss(spec, params, data)
    if not math.isfinite(cost):
        raise DivergenceError(step, epoch_offset + cfg.local_epochs - 1, -1, "non-finite loss")
    return params, cost


# checkpoint file: b"FEDF", version, u16 layout length, layout, u64 M, M x f64 (all little-endian)
CHECKPOINT_MAGIC = b"FEDF"
CHECKPOINT_VERSION = 1


def encode_parameters(layout_id, params):
    layout = layout_id.encode("utf-8")
    params = np.ascontiguousarray(params, dtype="<f8")
    return b"".join(
        [
            CHECKPOINT_MAGIC,
            bytes([CHECKPOINT_VERSION]),
            struct.pack("<H", len(layout)),
            layout,
            struct.pack("<Q", params.shape[0]),
            params.tobytes(),
        ]
    )


def checkpoint_size(layout_id, n_params):
    return 4 + 1 + 2 + len(layout_id.encode("utf-8")) + 8 + 8 * n_params


def decode_parameters(buf):
    """Inverse of encode_parameters; returns (layout_id, params)."""
    buf = bytes(buf)
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ModelError("bad checkpoint magic")
    if len(buf) < 7 or buf[4] != CHECKPOINT_VERSION:
        raise ModelError("unsupported checkpoint version")
    (n_layout,) = struct.unpack_from("<H", buf, 5)
    pos = 7 + n_layout
    layout = buf[7:pos].decode("utf-8")
    if len(buf) < pos + 8:
        raise ModelError("truncated checkpoint header")
    (m,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if len(buf) != pos + 8 * m:
        raise ModelError(f"checkpoint holds {len(buf) - pos} value bytes, expected {8 * m}")
    values = np.frombuffer(buf, dtype="<f8", count=m, offset=pos).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise ModelError("non-finite value in checkpoint")
    return layout, values


def save_checkpoint(path, layout_id, params):
    with open(path, "wb") as fh:
        fh.write(encode_parameters(layout_id, params))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_parameters(fh.read())
