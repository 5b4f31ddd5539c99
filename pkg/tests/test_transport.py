import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedf import model as fm
from fedf.config import parse_config
from fedf.coordination import EpochAbort, run_master
from fedf.experiment import LocalTcpTransport, build_datasets, make_runtimes
from fedf.ternary import pack
from fedf.transport import (
    HEADER,
    MASTER,
    FramingError,
    Message,
    MessageKind,
    SimTransport,
    TcpTransport,
    Transcript,
    TranscriptFormatError,
    TransportTimeout,
    audit,
    connect,
    data_plane_bytes,
    decode_cost,
    decode_frame,
    encode_cost,
    encode_frame,
    recv_frame,
    send_frame,
)

from helpers import InflatedCostWorker, ZeroTernaryWorker, linear_config, mlp17_config


def test_message_kinds_are_closed():
    assert [k.name for k in MessageKind] == [
        "REGISTER", "START_EPOCH", "COST", "CMD_SEND_MODEL", "CMD_SEND_TERNARY", "MODEL", "TERNARY", "END_RUN",
    ]


@given(st.sampled_from(list(MessageKind)), st.integers(0, 2**64 - 1), st.binary(max_size=300))
def test_frame_roundtrip(kind, epoch, payload):
    msg = Message(kind, epoch, payload)
    frame = encode_frame(msg)
    assert len(frame) == 17 + len(payload)
    assert decode_frame(frame) == msg


def test_frame_layout():
    frame = encode_frame(Message(MessageKind.COST, 3, encode_cost(1.5)))
    assert frame[0] == 3
    assert struct.unpack("<Q", frame[1:9])[0] == 3
    assert struct.unpack("<Q", frame[9:17])[0] == 8
    assert decode_cost(frame[17:]) == 1.5


def test_framing_violations():
    with pytest.raises(FramingError):
        decode_frame(b"\x01\x00")
    with pytest.raises(FramingError):
        decode_frame(bytes([99]) + bytes(16))
    with pytest.raises(FramingError):
        decode_frame(encode_frame(Message(MessageKind.COST, 1, b"12345678")) + b"x")
    with pytest.raises(FramingError):
        decode_cost(b"123")


def test_payload_sizes_for_seventeen_parameters():
    spec = fm.ModelSpec("mlp-1h", 2, 1, 4)
    model = fm.encode_parameters(spec.layout_id, np.zeros(17))
    header = 4 + 1 + 2 + len(spec.layout_id) + 8
    assert Message(MessageKind.MODEL, 1, model).payload_bytes == header + 17 * 8
    ternary = pack(np.ones(17, dtype=np.int8)).to_wire()
    assert Message(MessageKind.TERNARY, 1, ternary).payload_bytes == 5 + 8
    assert data_plane_bytes(MessageKind.MODEL, model, 32) == 17 * 4
    assert data_plane_bytes(MessageKind.MODEL, model, 64) == 17 * 8
    assert data_plane_bytes(MessageKind.TERNARY, ternary) == 5
    assert data_plane_bytes(MessageKind.COST, encode_cost(1.0)) == 0


# -- transcripts -------------------------------------------------------------------


def _small_transcript():
    cfg = parse_config(mlp17_config(1, 3, epochs=3))
    _, _, _, shards = build_datasets(cfg)
    transcript = Transcript()
    run_master(SimTransport(make_runtimes(cfg, shards)), cfg.model, cfg.master, transcript)
    return transcript


def test_transcript_jsonl_roundtrip(tmp_path):
    t = _small_transcript()
    path = tmp_path / "t.jsonl"
    t.write_jsonl(path)
    back = Transcript.read_jsonl(path)
    assert [r.fields() for r in back] == [r.fields() for r in t]
    assert [r.ts for r in back] == [r.ts for r in t]


def test_truncated_transcript_names_byte_offset(tmp_path):
    path = tmp_path / "t.jsonl"
    _small_transcript().write_jsonl(path)
    raw = path.read_bytes()
    cut = raw[: len(raw) - 20]
    path.write_bytes(cut)
    last_start = cut.rfind(b"\n") + 1
    with pytest.raises(TranscriptFormatError, match=f"byte offset {last_start}"):
        Transcript.read_jsonl(path)


def test_malformed_record_names_byte_offset(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_bytes(b'{"transcript": 1, "width_bits": 32}\n{"seq": 0}\n')
    with pytest.raises(TranscriptFormatError, match="byte offset 36"):
        Transcript.read_jsonl(path)


def test_transcript_records_every_message_in_order():
    t = _small_transcript()
    assert [r.seq for r in t] == list(range(len(t)))
    kinds = [r.kind for r in t]
    assert kinds[:6] == ["REGISTER"] * 6
    assert kinds[-3:] == ["END_RUN"] * 3
    assert all(r.payload_bytes == len(r.payload) for r in t)


# -- TCP ---------------------------------------------------------------------------


def test_tcp_frames_survive_the_socket():
    a, b = socket.socketpair()
    msgs = [Message(MessageKind.MODEL, 7, bytes(range(256)) * 40), Message(MessageKind.END_RUN, 8)]
    th = threading.Thread(target=lambda: [send_frame(a, m) for m in msgs])
    th.start()
    got = [recv_frame(b), recv_frame(b)]
    th.join()
    assert got == msgs
    a.close()
    b.close()


def test_tcp_run_matches_sim_run():
    raw = mlp17_config(2, 3, epochs=4)
    cfg = parse_config(raw)
    _, _, _, shards = build_datasets(cfg)
    t_sim, t_tcp = Transcript(), Transcript()
    a, _ = run_master(SimTransport(make_runtimes(cfg, shards)), cfg.model, cfg.master, t_sim)
    transport = LocalTcpTransport(make_runtimes(cfg, shards), timeout=10)
    b, _ = run_master(transport, cfg.model, cfg.master, t_tcp)
    assert not transport.errors
    assert a.tobytes() == b.tobytes()
    assert [r.fields() for r in t_sim] == [r.fields() for r in t_tcp]


def test_version_mismatch_is_rejected():
    server = TcpTransport("127.0.0.1", 0, 1, timeout=2)
    errors = []

    def bad_worker():
        sock = connect(*server.address, timeout=2)
        payload = b'{"data_size":5,"protocol_version":99,"worker_id":1}'
        send_frame(sock, Message(MessageKind.REGISTER, 0, payload))
        errors.append(recv_frame(sock))
        sock.close()

    th = threading.Thread(target=bad_worker)
    th.start()
    with pytest.raises(TransportTimeout):
        server.open()
    th.join()
    server.close()
    assert errors[0].kind == MessageKind.END_RUN and b"version" in errors[0].payload


def test_connect_times_out_on_unreachable_master():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    with pytest.raises(TransportTimeout, match="could not reach master"):
        connect("127.0.0.1", port, timeout=0.3)


def test_worker_crash_over_tcp_aborts_the_master():
    cfg = parse_config(linear_config(3, epochs=3, n=200))
    _, _, _, shards = build_datasets(cfg)
    runtimes = make_runtimes(cfg, shards)
    runtimes[2].make_reply = lambda command, t: 1 / 0
    transport = LocalTcpTransport(runtimes, timeout=5)
    with pytest.raises(EpochAbort, match="ZeroDivisionError"):
        run_master(transport, cfg.model, cfg.master)


# -- audit -----------------------------------------------------------------------------


def _audited(raw, replace=None):
    cfg = parse_config(raw)
    _, _, _, shards = build_datasets(cfg)
    runtimes = make_runtimes(cfg, shards)
    for k, cls in (replace or {}).items():
        runtimes[k - 1] = cls(k, shards[k - 1], cfg.workers[k - 1])
    transcript = Transcript()
    run_master(SimTransport(runtimes), cfg.model, cfg.master, transcript)
    return cfg, shards, transcript


def test_honest_run_is_clean():
    cfg, shards, t = _audited(linear_config(0, epochs=40))
    canaries = [shards[0].features[0].tobytes(), struct.pack("<d", cfg.workers[0].learning_rate)]
    rep = audit(t, canaries)
    assert rep.ok, rep.findings
    assert rep.epochs == 40


def test_canary_leak_is_detected():
    cfg, shards, t = _audited(mlp17_config(1, 3, epochs=2))
    secret = shards[1].features[:2].tobytes()
    leaky = Message(MessageKind.COST, 2, encode_cost(0.5) + secret)
    t.record(leaky, "2", MASTER)
    rep = audit(t, [secret])
    assert len(rep.canary_leaks) == 1 and not rep.ok


def test_collusion_gives_victim_every_epoch():
    # the victim trains full-batch with a small step, so its cost falls every epoch
    raw = linear_config(1, epochs=20, n=300)
    _, _, _, shards = build_datasets(parse_config(raw))
    raw["workers"][0] = {"learning_rate": 0.01, "batch_size": shards[0].sample_count, "shuffle_seed": 0}
    _, _, t = _audited(raw, {2: InflatedCostWorker, 3: InflatedCostWorker})
    rep = audit(t)
    assert rep.pilot_runs["1"] == 20
    assert any("worker 1" in f for f in rep.pilot_run_findings)


def test_all_zero_ternaries_flagged_every_epoch():
    _, _, t = _audited(mlp17_config(4, 3, epochs=6),
                       {1: ZeroTernaryWorker, 2: ZeroTernaryWorker, 3: ZeroTernaryWorker})
    assert audit(t).zero_ternary_epochs == list(range(1, 7))


def test_inventory_violations_are_reported():
    t = _small_transcript()
    t.records = [r for r in t.records if not (r.kind == "COST" and r.epoch == 2 and r.sender == "3")]
    rep = audit(t)
    assert any("epoch 2, worker 3" in v for v in rep.inventory_violations)


def test_unknown_kind_and_size_mismatch_are_reported():
    t = _small_transcript()
    t.records[7].kind = "GRADIENT"
    t.records[8].payload_bytes += 1
    rep = audit(t)
    assert any("unknown message kind" in v for v in rep.inventory_violations)
    assert any("payload_bytes" in v for v in rep.inventory_violations)


def test_frame_header_size():
    assert HEADER.size == 17
