"""Config builders and scripted workers shared by the test modules."""

import numpy as np

from fedf.ternary import pack
from fedf.transport import Message, MessageKind, encode_cost
from fedf.worker import WorkerRuntime


def linear_config(seed, n_workers=3, epochs=200, n=2000, dim=10, noise=0.1, min_fraction=0.2,
                  lr=0.02, batch=32, test_fraction=0.0, transport="sim"):
    return {
        "model": {"kind": "linear-regression", "input_dim": dim},
        "data": {"source": "synthetic", "kind": "linear", "n": n, "dim": dim, "noise_sigma": noise,
                 "seed": seed, "test_fraction": test_fraction, "test_seed": seed + 7},
        "split": {"n_parts": n_workers, "min_fraction": min_fraction, "seed": seed + 100},
        "workers": [
            {"learning_rate": lr, "batch_size": batch, "shuffle_seed": seed * 10 + i}
            for i in range(n_workers)
        ],
        "master": {"global_epochs": epochs, "seed": seed},
        "transport": {"mode": transport, "timeout": 20},
    }


def blobs_config(seed, n_workers, epochs=30):
    return {
        "model": {"kind": "logistic-regression", "input_dim": 5, "output_dim": 2},
        "data": {"source": "synthetic", "kind": "logistic-blobs", "n": 3000, "dim": 5, "noise_sigma": 1.5,
                 "seed": seed, "n_classes": 2, "test_fraction": 0.2, "test_seed": seed + 7},
        "split": {"n_parts": n_workers, "min_fraction": 0.1, "seed": seed + 100},
        "workers": [
            {"learning_rate": 0.1, "batch_size": 32, "shuffle_seed": seed * 10 + i}
            for i in range(n_workers)
        ],
        "master": {"global_epochs": epochs, "seed": seed},
        "centralized": {"epochs": epochs},
    }


def mlp17_config(seed, n_workers, epochs=3):
    """2-4-1 tanh network on quadratic data; M = 17."""
    return {
        "model": {"kind": "mlp-1h", "input_dim": 2, "hidden_dim": 4, "output_dim": 1},
        "data": {"source": "synthetic", "kind": "quadratic", "n": 400, "dim": 2, "noise_sigma": 0.05,
                 "seed": seed},
        "split": {"n_parts": n_workers, "min_fraction": 0.1, "seed": seed + 1},
        "workers": [
            {"learning_rate": 0.05, "batch_size": 16, "shuffle_seed": seed + i}
            for i in range(n_workers)
        ],
        "master": {"global_epochs": epochs, "seed": seed},
    }


def wide_linear_config(seed, n_workers, epochs=3):
    """Linear regression over 1000 features; M = 1001."""
    return {
        "model": {"kind": "linear-regression", "input_dim": 1000},
        "data": {"source": "synthetic", "kind": "linear", "n": 300, "dim": 1000, "noise_sigma": 0.1,
                 "seed": seed},
        "split": {"n_parts": n_workers, "min_fraction": 0.1, "seed": seed + 1},
        "workers": [
            {"learning_rate": 1e-4, "batch_size": 20, "shuffle_seed": seed + i}
            for i in range(n_workers)
        ],
        "master": {"global_epochs": epochs, "seed": seed},
    }


class ZeroTernaryWorker(WorkerRuntime):
    """Sends an all-zero ternary vector whenever asked for one."""

    def make_reply(self, command, t):
        if command == MessageKind.CMD_SEND_TERNARY:
            trits = np.zeros(self.spec.n_params, dtype=np.int8)
            return Message(MessageKind.TERNARY, t, pack(trits).to_wire())
        return super().make_reply(command, t)


class InflatedCostWorker(ZeroTernaryWorker):
    """Colluder: reports a huge constant cost so it never wins selection, and
    sends zero ternaries so the global model stays equal to the victim's."""

    def __init__(self, worker_id, shard, training, cost=1e9):
        super().__init__(worker_id, shard, training)
        self.fake_cost = cost

    def report_cost(self, cost, t):
        return self.fake_cost


class GarbageCostWorker(WorkerRuntime):
    """Reports a NaN cost in epoch ``bad_epoch``."""

    def __init__(self, worker_id, shard, training, bad_epoch=2):
        super().__init__(worker_id, shard, training)
        self.bad_epoch = bad_epoch

    def handle(self, msg):
        replies = super().handle(msg)
        if msg.kind == MessageKind.START_EPOCH and msg.epoch == self.bad_epoch:
            return [Message(MessageKind.COST, msg.epoch, encode_cost(float("nan")))]
        return replies
