"""The master: goodness scoring, pilot selection, global update, epoch loop."""

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as fm
from .report import EpochRecord, ExperimentReport
from .ternary import PackedTernary, TernaryError, unpack
from .transport import (
    HEADER,
    MASTER,
    PROTOCOL_VERSION,
    Message,
    MessageKind,
    Transcript,
    TransportError,
    decode_cost,
    decode_json,
    encode_json,
)

log = logging.getLogger(__name__)


class CoordinationError(ValueError):
    pass


class EpochAbort(RuntimeError):
    """A worker failed or misbehaved; the synchronous round cannot finish."""

    def __init__(self, epoch, worker, reason):
        super().__init__(f"epoch {epoch}: worker {worker}: {reason}")
        self.epoch = epoch
        self.worker = worker
        self.reason = reason


@dataclass(frozen=True)
class MasterConfig:
    alpha0: float = 0.1
    beta: float = 0.2
    global_epochs: int = 10
    seed: int = 0
    worker_betas: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise CoordinationError("alpha0 must be positive")
        for b in [self.beta, *self.worker_betas.values()]:
            if not 0 < b < 1:
                raise CoordinationError(f"beta {b} outside (0, 1)")
        if self.global_epochs < 1:
            raise CoordinationError("global_epochs must be >= 1")
        object.__setattr__(self, "worker_betas", {int(k): float(v) for k, v in self.worker_betas.items()})

    def beta_for(self, worker_id):
        return float(self.worker_betas.get(worker_id, self.beta))


@dataclass
class MasterState:
    """``p_current`` is the latest global model, ``p_prev`` the one before it.

    ``epoch`` counts completed epochs, so the epoch being computed is
    ``epoch + 1``.
    """

    p_current: np.ndarray
    p_prev: np.ndarray = None
    epoch: int = 0
    prev_costs: dict = field(default_factory=dict)
    pilot_history: list = field(default_factory=list)


def goodness(cost, t, data_size, cost_prev=None):
    """Score of one worker's local model.

    First epoch: data size over cost (+inf for a zero cost). Later epochs:
    data size times the cost reduction since the previous epoch, which is
    negative when the cost went up.
    """
    if t < 1:
        raise CoordinationError("epochs are numbered from 1")
    if not math.isfinite(cost):
        raise CoordinationError(f"non-finite cost {cost}")
    if t == 1:
        return math.inf if cost == 0 else data_size / cost
    if cost_prev is None:
        raise CoordinationError(f"epoch {t} needs the previous cost")
    return data_size * (cost_prev - cost)


def select_pilot(goodness_values):
    """Worker id with the largest goodness; ties go to the smallest id."""
    if not goodness_values:
        raise CoordinationError("no goodness values to select from")
    for k, g in goodness_values.items():
        if math.isnan(g):
            raise CoordinationError(f"worker {k} has NaN goodness")
    return min(goodness_values, key=lambda k: (-goodness_values[k], k))


def update_global(state, pilot_model, ternaries, proportions, cfg):
    """Combine the pilot model with the other workers' ternary vectors.

    ``ternaries`` must be keyed by exactly the non-pilot workers. The sum
    runs over workers in ascending id order.
    """
    t = state.epoch + 1
    pilot_model = np.asarray(pilot_model, dtype=np.float64)
    missing = sorted(set(proportions) - set(ternaries))
    if len(missing) != 1:
        raise CoordinationError(f"ternaries must cover every worker but the pilot; missing {missing}")
    if set(ternaries) - set(proportions):
        raise CoordinationError(f"ternary from unknown workers {sorted(set(ternaries) - set(proportions))}")
    if abs(math.fsum(proportions.values()) - 1.0) > 1e-12:
        raise CoordinationError("data proportions must sum to 1")
    if pilot_model.shape != state.p_current.shape:
        raise CoordinationError(f"pilot model shape {pilot_model.shape} != {state.p_current.shape}")
    if not ternaries:
        return pilot_model.copy()
    if t == 1:
        step = None
    else:
        if state.p_prev is None:
            raise CoordinationError(f"epoch {t} needs the model from epoch {t - 2}")
        step = state.p_current - state.p_prev
    acc = np.zeros_like(pilot_model)
    for k in sorted(ternaries):
        trits = np.asarray(ternaries[k])
        if trits.shape != pilot_model.shape:
            raise CoordinationError(f"worker {k}: ternary length {trits.shape} != {pilot_model.shape}")
        if step is None:
            acc += proportions[k] * trits
        else:
            acc += proportions[k] * cfg.beta_for(k) * trits * step
    if step is None:
        return pilot_model - cfg.alpha0 * acc
    return pilot_model - acc


def data_proportions(sizes):
    total = sum(sizes.values())
    return {k: s / total for k, s in sizes.items()}


def _expect(ch, transcript, kind, t):
    wid = ch.worker_id
    try:
        msg = ch.recv()
    except TransportError as exc:
        raise EpochAbort(t, wid, str(exc)) from exc
    transcript.record(msg, wid, MASTER)
    if msg.kind == MessageKind.END_RUN:
        raise EpochAbort(t, wid, "worker aborted: " + msg.payload.decode(errors="replace"))
    if msg.kind != kind or msg.epoch != t:
        raise EpochAbort(t, wid, f"expected {kind.name} for epoch {t}, got {msg.kind.name} for epoch {msg.epoch}")
    return msg


def _send(ch, transcript, msg):
    transcript.record(msg, MASTER, ch.worker_id)
    try:
        ch.send(msg)
    except TransportError as exc:
        raise EpochAbort(msg.epoch, ch.worker_id, str(exc)) from exc


def _register(links, transcript, spec, cfg):
    regs = []
    for hello, ch in links:
        info = decode_json(hello.payload)
        regs.append((int(info["worker_id"]), int(info["data_size"]), hello, ch))
    regs.sort(key=lambda r: r[0])
    ids = [r[0] for r in regs]
    if len(set(ids)) != len(ids):
        raise CoordinationError(f"duplicate worker ids {ids}")
    if not regs:
        raise CoordinationError("no workers registered")
    for wid, size, hello, ch in regs:
        if size < 1:
            raise CoordinationError(f"worker {wid} declared data size {size}")
        ch.worker_id = wid
        transcript.record(hello, wid, MASTER)
    for wid, _, _, ch in regs:
        reply = {"beta": cfg.beta_for(wid), "spec": spec.to_dict(), "protocol_version": PROTOCOL_VERSION}
        _send(ch, transcript, Message(MessageKind.REGISTER, 0, encode_json(reply)))
    return {wid: ch for wid, _, _, ch in regs}, {wid: size for wid, size, _, _ in regs}


def run_master(transport, spec, cfg, transcript=None, checkpoint_dir=None, on_epoch=None):
    """Drive ``cfg.global_epochs`` synchronous rounds over ``transport``.

    Returns the final global model and an ExperimentReport holding per-epoch
    costs, goodness values, pilots and byte counts. ``on_epoch(t, params)``
    is called after every global update.
    """
    transcript = transcript if transcript is not None else Transcript()
    links = transport.open()
    try:
        channels, sizes = _register(links, transcript, spec, cfg)
        proportions = data_proportions(sizes)
        state = MasterState(p_current=fm.init_parameters(spec, cfg.seed))
        report = ExperimentReport(workers={str(k): {"data_size": s} for k, s in sizes.items()})
        if checkpoint_dir:
            os.makedirs(checkpoint_dir, exist_ok=True)
            fm.save_checkpoint(os.path.join(checkpoint_dir, "epoch-0000.fedf"), spec.layout_id, state.p_current)
        for t in range(1, cfg.global_epochs + 1):
            mark = len(transcript)
            new = _run_epoch(channels, transcript, spec, cfg, state, sizes, proportions, t)
            records = transcript.records[mark:]
            report.epochs.append(
                EpochRecord(
                    epoch=t,
                    costs={k: state.prev_costs[k] for k in sorted(channels)},
                    goodness=new["goodness"],
                    pilot=new["pilot"],
                    data_bytes_down=sum(r.data_bytes for r in records if r.sender == MASTER),
                    data_bytes_up=sum(r.data_bytes for r in records if r.sender != MASTER),
                    control_bytes=sum(r.payload_bytes for r in records if r.data_bytes == 0),
                    frame_bytes=sum(r.payload_bytes + HEADER.size for r in records),
                )
            )
            if checkpoint_dir:
                fm.save_checkpoint(
                    os.path.join(checkpoint_dir, f"epoch-{t:04d}.fedf"), spec.layout_id, state.p_current
                )
            if on_epoch is not None:
                on_epoch(t, state.p_current)
        for wid in sorted(channels):
            _send(channels[wid], transcript, Message(MessageKind.END_RUN, cfg.global_epochs))
        return state.p_current, report
    except EpochAbort as exc:
        log.error("%s", exc)
        for ch in (c for _, c in links):
            try:
                ch.send(Message(MessageKind.END_RUN, exc.epoch, b"aborted"))
            except Exception as err:  # best effort; the worker may already be gone
                log.debug("could not notify a worker of the abort: %s", err)
        raise
    finally:
        transport.close()


def _run_epoch(channels, transcript, spec, cfg, state, sizes, proportions, t):
    order = sorted(channels)
    broadcast = fm.encode_parameters(spec.layout_id, state.p_current)
    for wid in order:
        _send(channels[wid], transcript, Message(MessageKind.START_EPOCH, t, broadcast))
    costs = {}
    for wid in order:
        cost = decode_cost(_expect(channels[wid], transcript, MessageKind.COST, t).payload)
        if not math.isfinite(cost) or cost < 0:
            raise EpochAbort(t, wid, f"invalid cost {cost}")
        costs[wid] = cost
    scores = {
        wid: goodness(costs[wid], t, sizes[wid], state.prev_costs.get(wid)) for wid in order
    }
    pilot = select_pilot(scores)
    for wid in order:
        kind = MessageKind.CMD_SEND_MODEL if wid == pilot else MessageKind.CMD_SEND_TERNARY
        _send(channels[wid], transcript, Message(kind, t))
    pilot_model = None
    ternaries = {}
    m = state.p_current.shape[0]
    for wid in order:
        if wid == pilot:
            msg = _expect(channels[wid], transcript, MessageKind.MODEL, t)
            try:
                layout, pilot_model = fm.decode_parameters(msg.payload)
            except fm.ModelError as exc:
                raise EpochAbort(t, wid, str(exc)) from exc
            if layout != spec.layout_id or pilot_model.shape[0] != m:
                raise EpochAbort(t, wid, f"model layout {layout!r} does not match {spec.layout_id!r}")
        else:
            msg = _expect(channels[wid], transcript, MessageKind.TERNARY, t)
            try:
                trits = unpack(PackedTernary.from_wire(msg.payload))
            except TernaryError as exc:
                raise EpochAbort(t, wid, str(exc)) from exc
            if trits.shape[0] != m:
                raise EpochAbort(t, wid, f"ternary has {trits.shape[0]} trits, model has {m}")
            ternaries[wid] = trits
    new = update_global(state, pilot_model, ternaries, proportions, cfg)
    state.p_prev = state.p_current
    state.p_current = new
    state.epoch = t
    state.prev_costs = costs
    state.pilot_history.append(pilot)
    log.info("epoch %d: pilot %s, costs %s", t, pilot, {k: round(v, 6) for k, v in costs.items()})
    return {"goodness": scores, "pilot": pilot}
