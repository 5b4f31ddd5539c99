"""Protocol messages, framing, the two transports, and transcript auditing.

Frame layout: 1-byte message kind, 8-byte little-endian epoch, 8-byte
little-endian payload length, payload. The same frames travel over the
in-process transport and over TCP, so both produce identical transcripts.

A TLS wrapper, if wanted, would sit around the TCP stream; nothing here
depends on it.
"""

import base64
import collections
import enum
import json
import logging
import math
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from .model import ModelError, decode_parameters
from .ternary import PackedTernary, TernaryError, unpack

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
HEADER = struct.Struct("<BQQ")
MASTER = "master"
DEFAULT_TIMEOUT = 30.0


class TransportError(RuntimeError):
    pass


class FramingError(TransportError):
    pass


class TransportTimeout(TransportError):
    pass


class MessageKind(enum.IntEnum):
    REGISTER = 1
    START_EPOCH = 2
    COST = 3
    CMD_SEND_MODEL = 4
    CMD_SEND_TERNARY = 5
    MODEL = 6
    TERNARY = 7
    END_RUN = 8


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    epoch: int
    payload: bytes = b""

    @property
    def payload_bytes(self):
        return len(self.payload)


def encode_frame(msg):
    return HEADER.pack(int(msg.kind), msg.epoch, len(msg.payload)) + msg.payload


def decode_header(header):
    kind, epoch, length = HEADER.unpack(header)
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise FramingError(f"unknown message kind {kind}") from None
    return kind, epoch, length


def decode_frame(frame):
    if len(frame) < HEADER.size:
        raise FramingError("frame shorter than header")
    kind, epoch, length = decode_header(frame[: HEADER.size])
    if len(frame) != HEADER.size + length:
        raise FramingError(f"frame declares {length} payload bytes, carries {len(frame) - HEADER.size}")
    return Message(kind, epoch, bytes(frame[HEADER.size :]))


def encode_cost(cost):
    return struct.pack("<d", cost)


def decode_cost(payload):
    if len(payload) != 8:
        raise FramingError(f"COST payload must be 8 bytes, got {len(payload)}")
    return struct.unpack("<d", payload)[0]


def encode_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_json(payload):
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FramingError(f"bad JSON payload: {exc}") from None


def data_plane_bytes(kind, payload, width_bits=32):
    """Bytes of a message counted by the communication model.

    Model instances count ``M * width_bits / 8``; packed ternaries count
    their packed buffer. Everything else is control plane and counts 0.
    """
    if kind in (MessageKind.START_EPOCH, MessageKind.MODEL):
        _, values = decode_parameters(payload)
        return values.shape[0] * width_bits // 8
    if kind == MessageKind.TERNARY:
        return len(PackedTernary.from_wire(payload).buffer)
    return 0


@dataclass
class TranscriptRecord:
    seq: int
    epoch: int
    kind: str
    sender: str
    receiver: str
    payload_bytes: int
    data_bytes: int
    payload: bytes = field(repr=False)
    ts: float = 0.0

    def to_dict(self, include_payload=True):
        d = {
            "seq": self.seq,
            "epoch": self.epoch,
            "kind": self.kind,
            "sender": self.sender,
            "receiver": self.receiver,
            "payload_bytes": self.payload_bytes,
            "data_bytes": self.data_bytes,
            "ts": self.ts,
        }
        if include_payload:
            d["payload"] = base64.b64encode(self.payload).decode("ascii")
        return d

    def fields(self):
        """Everything except the timestamp."""
        d = self.to_dict()
        del d["ts"]
        return d


class Transcript:
    """Ordered log of every message the master sends or receives."""

    def __init__(self, width_bits=32):
        self.width_bits = width_bits
        self.records = []
        self._lock = threading.Lock()

    def record(self, msg, sender, receiver):
        data = data_plane_bytes(msg.kind, msg.payload, self.width_bits)
        with self._lock:
            rec = TranscriptRecord(
                seq=len(self.records),
                epoch=msg.epoch,
                kind=msg.kind.name,
                sender=str(sender),
                receiver=str(receiver),
                payload_bytes=msg.payload_bytes,
                data_bytes=data,
                payload=msg.payload,
                ts=time.time(),
            )
            self.records.append(rec)
        return rec

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def epoch_records(self, epoch):
        return [r for r in self.records if r.epoch == epoch]

    def data_bytes_by_epoch(self):
        out = collections.Counter()
        for r in self.records:
            if r.epoch > 0:
                out[r.epoch] += r.data_bytes
        return dict(out)

    def write_jsonl(self, path, include_payload=True):
        with open(path, "w") as fh:
            fh.write(json.dumps({"transcript": 1, "width_bits": self.width_bits}) + "\n")
            for r in self.records:
                fh.write(json.dumps(r.to_dict(include_payload)) + "\n")

    @classmethod
    def read_jsonl(cls, path):
        """Load a transcript; parse errors name the byte offset of the bad line."""
        with open(path, "rb") as fh:
            raw = fh.read()
        transcript = None
        offset = 0
        for line in raw.splitlines(keepends=True):
            start = offset
            offset += len(line)
            if not line.strip():
                continue
            if not line.endswith(b"\n"):
                raise TranscriptFormatError(f"truncated record at byte offset {start}")
            try:
                obj = json.loads(line)
                if transcript is None:
                    if obj.get("transcript") != 1:
                        raise ValueError("missing transcript header")
                    transcript = cls(int(obj.get("width_bits", 32)))
                    continue
                rec = TranscriptRecord(
                    seq=int(obj["seq"]),
                    epoch=int(obj["epoch"]),
                    kind=str(obj["kind"]),
                    sender=str(obj["sender"]),
                    receiver=str(obj["receiver"]),
                    payload_bytes=int(obj["payload_bytes"]),
                    data_bytes=int(obj["data_bytes"]),
                    payload=base64.b64decode(obj.get("payload", ""), validate=True),
                    ts=float(obj.get("ts", 0.0)),
                )
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise TranscriptFormatError(f"bad record at byte offset {start}: {exc}") from None
            transcript.records.append(rec)
        if transcript is None:
            raise TranscriptFormatError("empty transcript")
        return transcript


class TranscriptFormatError(ValueError):
    pass


# -- channels ------------------------------------------------------------------


class SimChannel:
    """In-process link to one worker runtime.

    Frames are encoded and decoded on every hop so that the bytes match what
    TCP would carry. Delivery is synchronous and therefore deterministic.
    """

    def __init__(self, runtime):
        self.runtime = runtime
        self.worker_id = runtime.worker_id
        self._inbox = collections.deque()

    def hello(self):
        return decode_frame(encode_frame(self.runtime.register_message()))

    def send(self, msg):
        try:
            replies = self.runtime.handle(decode_frame(encode_frame(msg)))
        except Exception as exc:  # surfaced to the master like a remote failure
            log.debug("worker %s raised %r", self.worker_id, exc)
            replies = [Message(MessageKind.END_RUN, msg.epoch, f"{type(exc).__name__}: {exc}".encode())]
        for reply in replies:
            self._inbox.append(encode_frame(reply))

    def recv(self):
        if not self._inbox:
            raise TransportError(f"worker {self.worker_id} sent nothing")
        return decode_frame(self._inbox.popleft())

    def close(self):
        pass


class SimTransport:
    def __init__(self, runtimes):
        self.runtimes = list(runtimes)

    def open(self):
        chans = [SimChannel(r) for r in self.runtimes]
        return [(c.hello(), c) for c in chans]

    def close(self):
        pass


def _recv_exact(sock, n):
    chunks = []
    while n:
        try:
            chunk = sock.recv(n)
        except socket.timeout:
            raise TransportTimeout("timed out waiting for peer") from None
        if not chunk:
            raise TransportError("connection closed by peer")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def send_frame(sock, msg):
    try:
        sock.sendall(encode_frame(msg))
    except socket.timeout:
        raise TransportTimeout("timed out sending frame") from None
    except OSError as exc:
        raise TransportError(f"send failed: {exc}") from None


def recv_frame(sock):
    kind, epoch, length = decode_header(_recv_exact(sock, HEADER.size))
    return Message(kind, epoch, _recv_exact(sock, length) if length else b"")


class TcpChannel:
    def __init__(self, sock, worker_id):
        self.sock = sock
        self.worker_id = worker_id

    def send(self, msg):
        send_frame(self.sock, msg)

    def recv(self):
        return recv_frame(self.sock)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class TcpTransport:
    """Master side: listen, accept ``n_workers`` connections, read their REGISTER."""

    def __init__(self, host, port, n_workers, timeout=DEFAULT_TIMEOUT):
        self.n_workers = n_workers
        self.timeout = timeout
        self.server = socket.create_server((host, port))
        self.server.settimeout(timeout)
        self.address = self.server.getsockname()[:2]
        self._channels = []

    def open(self):
        out = []
        while len(out) < self.n_workers:
            try:
                sock, _ = self.server.accept()
            except socket.timeout:
                raise TransportTimeout(
                    f"only {len(out)} of {self.n_workers} workers connected within {self.timeout}s"
                ) from None
            sock.settimeout(self.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = recv_frame(sock)
            if hello.kind != MessageKind.REGISTER:
                sock.close()
                raise FramingError(f"expected REGISTER, got {hello.kind.name}")
            info = decode_json(hello.payload)
            if info.get("protocol_version") != PROTOCOL_VERSION:
                send_frame(sock, Message(MessageKind.END_RUN, 0, b"protocol version mismatch"))
                sock.close()
                log.warning("rejected worker %s: protocol version %s", info.get("worker_id"), info.get("protocol_version"))
                continue
            ch = TcpChannel(sock, int(info["worker_id"]))
            self._channels.append(ch)
            out.append((hello, ch))
        return out

    def close(self):
        for ch in self._channels:
            ch.close()
        self.server.close()


def connect(host, port, timeout=DEFAULT_TIMEOUT, retry_interval=0.05):
    """Worker side: connect, retrying until ``timeout`` seconds have passed."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(0.01, deadline - time.monotonic()))
            sock.settimeout(timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError as exc:
            if time.monotonic() >= deadline:
                raise TransportTimeout(f"could not reach master at {host}:{port} within {timeout}s ({exc})") from None
            time.sleep(retry_interval)


def serve_worker(runtime, sock):
    """Run a worker runtime over a connected socket until END_RUN."""
    try:
        send_frame(sock, runtime.register_message())
        while True:
            msg = recv_frame(sock)
            if msg.kind == MessageKind.END_RUN and not runtime.registered:
                raise TransportError("master rejected registration: " + msg.payload.decode(errors="replace"))
            try:
                replies = runtime.handle(msg)
            except Exception as exc:
                send_frame(sock, Message(MessageKind.END_RUN, msg.epoch, f"{type(exc).__name__}: {exc}".encode()))
                raise
            for reply in replies:
                send_frame(sock, reply)
            if msg.kind == MessageKind.END_RUN:
                return
    finally:
        sock.close()


# -- audit ---------------------------------------------------------------------


@dataclass
class AuditReport:
    inventory_violations: list = field(default_factory=list)
    pilot_runs: dict = field(default_factory=dict)
    pilot_run_findings: list = field(default_factory=list)
    zero_ternary_epochs: list = field(default_factory=list)
    canary_leaks: list = field(default_factory=list)
    epochs: int = 0
    pilot_run_limit: int = 0

    @property
    def findings(self):
        out = [f"inventory: {v}" for v in self.inventory_violations]
        out += [f"pilot-run: {v}" for v in self.pilot_run_findings]
        out += [f"zero-ternary: epoch {e}: every non-pilot ternary is all zeros" for e in self.zero_ternary_epochs]
        out += [f"canary: {v}" for v in self.canary_leaks]
        return out

    @property
    def ok(self):
        return not self.findings

    def to_dict(self):
        return {
            "ok": self.ok,
            "epochs": self.epochs,
            "inventory_violations": self.inventory_violations,
            "max_consecutive_pilot_run": {str(k): v for k, v in sorted(self.pilot_runs.items())},
            "pilot_run_limit": self.pilot_run_limit,
            "pilot_run_findings": self.pilot_run_findings,
            "zero_ternary_epochs": self.zero_ternary_epochs,
            "canary_leaks": self.canary_leaks,
            "findings": self.findings,
        }


_WORKER_OUT = {"COST", "MODEL", "TERNARY"}
_MASTER_OUT = {"START_EPOCH", "CMD_SEND_MODEL", "CMD_SEND_TERNARY"}


def default_pilot_run_limit(n_workers):
    # a worker that is pilot this many epochs in a row hands the master
    # enough consecutive model pairs to attempt gradient recovery
    return max(4, 2 * n_workers + 2)


def audit(transcript, canaries=(), pilot_run_limit=None):
    """Check a complete transcript for protocol and privacy findings.

    Reports message-inventory violations, the longest consecutive pilot run
    of every worker, epochs in which all non-pilot ternaries were zero, and
    occurrences of any ``canaries`` byte string inside a payload.
    """
    report = AuditReport()
    workers = set()
    per_epoch = collections.defaultdict(lambda: collections.defaultdict(collections.Counter))
    pilots = {}
    zero_flags = collections.defaultdict(list)
    valid_kinds = {k.name for k in MessageKind}
    canaries = [bytes(c) for c in canaries if c]

    for r in transcript:
        if r.kind not in valid_kinds:
            report.inventory_violations.append(f"seq {r.seq}: unknown message kind {r.kind!r}")
            continue
        if r.payload_bytes != len(r.payload):
            report.inventory_violations.append(
                f"seq {r.seq}: payload_bytes {r.payload_bytes} != actual {len(r.payload)}"
            )
        for c in canaries:
            at = r.payload.find(c)
            if at >= 0:
                report.canary_leaks.append(f"seq {r.seq} ({r.kind} from {r.sender}): canary at payload offset {at}")
        if r.kind == "REGISTER":
            if r.sender != MASTER:
                workers.add(r.sender)
            continue
        if r.kind == "END_RUN":
            if r.sender != MASTER:
                report.inventory_violations.append(f"seq {r.seq}: worker {r.sender} aborted the run")
            continue
        if r.kind in _MASTER_OUT and r.sender != MASTER:
            report.inventory_violations.append(f"seq {r.seq}: {r.kind} sent by worker {r.sender}")
            continue
        if r.kind in _WORKER_OUT and r.receiver != MASTER:
            report.inventory_violations.append(f"seq {r.seq}: {r.kind} addressed to {r.receiver}")
            continue
        worker = r.receiver if r.kind in _MASTER_OUT else r.sender
        per_epoch[r.epoch][worker][r.kind] += 1
        if r.kind == "CMD_SEND_MODEL":
            if r.epoch in pilots:
                report.inventory_violations.append(f"epoch {r.epoch}: more than one model request")
            pilots[r.epoch] = worker
        if r.kind == "TERNARY":
            try:
                trits = unpack(PackedTernary.from_wire(r.payload))
            except TernaryError as exc:
                report.inventory_violations.append(f"seq {r.seq}: undecodable ternary ({exc})")
                continue
            zero_flags[r.epoch].append(not trits.any())
        if r.kind in ("MODEL", "START_EPOCH"):
            try:
                decode_parameters(r.payload)
            except ModelError as exc:
                report.inventory_violations.append(f"seq {r.seq}: undecodable model ({exc})")
        if r.kind == "COST":
            try:
                if not math.isfinite(decode_cost(r.payload)):
                    report.inventory_violations.append(f"seq {r.seq}: non-finite cost")
            except FramingError as exc:
                report.inventory_violations.append(f"seq {r.seq}: {exc}")

    epochs = sorted(per_epoch)
    report.epochs = len(epochs)
    if epochs and epochs != list(range(1, len(epochs) + 1)):
        report.inventory_violations.append(f"epochs are not contiguous from 1: {epochs}")
    for t in epochs:
        for w in sorted(workers | set(per_epoch[t])):
            c = per_epoch[t][w]
            problems = []
            for kind in ("START_EPOCH", "COST"):
                if c[kind] != 1:
                    problems.append(f"{c[kind]} {kind}")
            if c["MODEL"] + c["TERNARY"] != 1:
                problems.append(f"{c['MODEL']} MODEL + {c['TERNARY']} TERNARY")
            if c["MODEL"] != c["CMD_SEND_MODEL"] or c["TERNARY"] != c["CMD_SEND_TERNARY"]:
                problems.append("reply does not match command")
            if problems:
                report.inventory_violations.append(f"epoch {t}, worker {w}: " + ", ".join(problems))
        if t not in pilots:
            report.inventory_violations.append(f"epoch {t}: no pilot selected")
        flags = zero_flags.get(t, [])
        if flags and all(flags):
            report.zero_ternary_epochs.append(t)

    # longest consecutive pilot streak per worker
    runs = {w: 0 for w in workers}
    prev, streak = None, 0
    for t in epochs:
        w = pilots.get(t)
        streak = streak + 1 if (w is not None and w == prev) else (1 if w is not None else 0)
        prev = w
        if w is not None:
            runs[w] = max(runs.get(w, 0), streak)
    report.pilot_runs = runs
    limit = pilot_run_limit if pilot_run_limit is not None else default_pilot_run_limit(len(workers))
    report.pilot_run_limit = limit
    if len(workers) > 1:
        for w, n in sorted(runs.items()):
            if n >= limit:
                report.pilot_run_findings.append(
                    f"worker {w} was pilot for {n} consecutive epochs (limit {limit})"
                )
    return report
