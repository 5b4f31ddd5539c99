"""Worker side of a training round: local training, cost report, and reply."""

import logging
from dataclasses import dataclass

import numpy as np

from . import model as fm
from .model import ModelSpec, TrainingConfig
from .ternary import pack, ternary_first_epoch, ternary_subsequent
from .transport import (
    PROTOCOL_VERSION,
    Message,
    MessageKind,
    decode_json,
    encode_cost,
    encode_json,
)

log = logging.getLogger(__name__)


class ProtocolStateError(RuntimeError):
    pass


@dataclass
class WorkerProfile:
    worker_id: int
    data_size: int
    training: TrainingConfig
    beta: float = 0.2


@dataclass
class WorkerState:
    p_recv_prev: np.ndarray = None
    p_recv_prev2: np.ndarray = None
    q_local: np.ndarray = None
    last_cost: float = None
    epoch: int = 0


def run_epoch(state, incoming, profile, shard, spec):
    """Shift the received-model history, train from ``incoming``, return the cost."""
    incoming = np.asarray(incoming, dtype=np.float64)
    if incoming.shape != (spec.n_params,):
        raise fm.ModelError(f"incoming model has shape {incoming.shape}, expected ({spec.n_params},)")
    state.p_recv_prev2 = state.p_recv_prev
    state.p_recv_prev = incoming.copy()
    state.epoch += 1
    cfg = profile.training
    q, cost = fm.train_local(spec, incoming, shard, cfg, epoch_offset=(state.epoch - 1) * cfg.local_epochs)
    state.q_local = q
    state.last_cost = cost
    return cost


def ternary_for(state, profile, t):
    if t == 1:
        return ternary_first_epoch(state.q_local, state.p_recv_prev, profile.training.learning_rate)
    if state.p_recv_prev2 is None:
        raise ProtocolStateError(f"epoch {t}: no model history from epoch {t - 2}")
    return ternary_subsequent(state.q_local, state.p_recv_prev, state.p_recv_prev2, profile.beta)


def respond(state, profile, command, t, layout_id):
    """Payload answering SEND_MODEL or SEND_TERNARY for epoch ``t``."""
    if state.q_local is None or state.epoch != t:
        raise ProtocolStateError(f"epoch {t}: command arrived before local training")
    if command == MessageKind.CMD_SEND_MODEL:
        return Message(MessageKind.MODEL, t, fm.encode_parameters(layout_id, state.q_local))
    if command == MessageKind.CMD_SEND_TERNARY:
        return Message(MessageKind.TERNARY, t, pack(ternary_for(state, profile, t)).to_wire())
    raise ProtocolStateError(f"unexpected command {command!r}")


class WorkerRuntime:
    """Message-driven worker; the same object serves the sim and TCP transports.

    Subclasses may override ``report_cost`` or ``make_reply`` to script
    misbehaving workers in tests.
    """

    def __init__(self, worker_id, shard, training):
        self.profile = WorkerProfile(int(worker_id), shard.sample_count, training)
        self.shard = shard
        self.state = WorkerState()
        self.spec = None
        self.finished = False

    @property
    def worker_id(self):
        return self.profile.worker_id

    @property
    def registered(self):
        return self.spec is not None

    def register_message(self):
        return Message(
            MessageKind.REGISTER,
            0,
            encode_json(
                {
                    "worker_id": self.profile.worker_id,
                    "data_size": self.profile.data_size,
                    "protocol_version": PROTOCOL_VERSION,
                }
            ),
        )

    def report_cost(self, cost, t):
        return cost

    def make_reply(self, command, t):
        return respond(self.state, self.profile, command, t, self.spec.layout_id)

    def handle(self, msg):
        """Process one inbound message and return the replies to send."""
        if msg.kind == MessageKind.REGISTER:
            info = decode_json(msg.payload)
            if info.get("protocol_version") != PROTOCOL_VERSION:
                raise ProtocolStateError("protocol version mismatch")
            self.spec = ModelSpec(**info["spec"])
            self.profile.beta = float(info["beta"])
            self.profile.training.check_against(self.shard)
            return []
        if not self.registered:
            raise ProtocolStateError(f"{msg.kind.name} before registration")
        if msg.kind == MessageKind.START_EPOCH:
            layout, params = fm.decode_parameters(msg.payload)
            if layout != self.spec.layout_id:
                raise ProtocolStateError(f"model layout {layout!r} != registered {self.spec.layout_id!r}")
            cost = run_epoch(self.state, params, self.profile, self.shard, self.spec)
            log.debug("worker %s epoch %d cost %.6g", self.worker_id, msg.epoch, cost)
            return [Message(MessageKind.COST, msg.epoch, encode_cost(self.report_cost(cost, msg.epoch)))]
        if msg.kind in (MessageKind.CMD_SEND_MODEL, MessageKind.CMD_SEND_TERNARY):
            return [self.make_reply(msg.kind, msg.epoch)]
        if msg.kind == MessageKind.END_RUN:
            self.finished = True
            return []
        raise ProtocolStateError(f"worker cannot handle {msg.kind.name}")

