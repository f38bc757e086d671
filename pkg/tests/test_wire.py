"""Wire protocol conformance: framing, canonical responses, error paths."""

from __future__ import annotations

import json
import socket
import struct

import pytest

from ensembleq.broker import Broker
from ensembleq.client import TcpBrokerClient, connect_broker, local_broker
from ensembleq.envelope import TaskEnvelope, canonical_json
from ensembleq.errors import BrokerUnreachableError, MessageTooLargeError, UnknownTagError
from ensembleq.server import BrokerServer


@pytest.fixture()
def server():
    srv = BrokerServer(Broker(), "127.0.0.1", 0)
    srv.start()
    yield srv
    srv.stop()


def _raw_request(sock: socket.socket, obj: dict) -> dict:
    payload = canonical_json(obj).encode("utf-8")
    sock.sendall(struct.pack(">I", len(payload)) + payload)
    return _read_response(sock)


def _read_response(sock: socket.socket) -> dict:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    body = _recv_exact(sock, length)
    parsed = json.loads(body.decode("utf-8"))
    # Responses are canonical JSON: sorted keys, no insignificant whitespace.
    assert body == canonical_json(parsed).encode("utf-8")
    assert set(parsed) == {"ok", "data", "err"}
    return parsed


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("server closed connection")
        buf += chunk
    return buf


def _envelope(task_id: str = "cafebabe") -> dict:
    return TaskEnvelope(
        task_id=task_id,
        kind="real",
        study_id="study-w",
        priority=10,
        node_id="sim@0",
        sample=0,
        retries=0,
        payload={"study_root": "/tmp/w"},
    ).to_dict()


def test_ping_enqueue_consume_ack_round_trip(server):
    with socket.create_connection((server.host, server.port), timeout=5) as sock:
        pong = _raw_request(sock, {"op": "PING", "args": {}})
        assert pong == {"ok": True, "data": "pong", "err": None}

        enq = _raw_request(sock, {"op": "ENQUEUE", "args": {"envelope": _envelope()}})
        assert enq["ok"] is True
        assert enq["data"]["duplicate"] is False

        got = _raw_request(sock, {"op": "CONSUME", "args": {"consumer": "raw", "timeout": 1.0}})
        assert got["ok"] is True
        assert got["data"]["envelope"]["task_id"] == "cafebabe"
        tag = got["data"]["tag"]

        acked = _raw_request(sock, {"op": "ACK", "args": {"tag": tag}})
        assert acked["ok"] is True
        assert acked["data"]["status"] == "succeeded"


def test_pipelined_requests_get_ordered_responses(server):
    with socket.create_connection((server.host, server.port), timeout=5) as sock:
        frames = b""
        for obj in ({"op": "PING", "args": {}}, {"op": "STATS", "args": {}}):
            payload = canonical_json(obj).encode("utf-8")
            frames += struct.pack(">I", len(payload)) + payload
        sock.sendall(frames)
        first = _read_response(sock)
        second = _read_response(sock)
        assert first["data"] == "pong"
        assert "counters" in second["data"]


def test_malformed_json_yields_error_response_not_crash(server):
    with socket.create_connection((server.host, server.port), timeout=5) as sock:
        garbage = b"{not json"
        sock.sendall(struct.pack(">I", len(garbage)) + garbage)
        response = _read_response(sock)
        assert response["ok"] is False
        assert "ProtocolError" in response["err"]
        # Connection still usable.
        assert _raw_request(sock, {"op": "PING", "args": {}})["ok"] is True
    # And the server still accepts new connections.
    with socket.create_connection((server.host, server.port), timeout=5) as sock:
        assert _raw_request(sock, {"op": "PING", "args": {}})["ok"] is True


def test_oversized_length_prefix_gets_error_then_close(server):
    with socket.create_connection((server.host, server.port), timeout=5) as sock:
        sock.sendall(struct.pack(">I", 0xFFFFFFFF))
        response = _read_response(sock)
        assert response["ok"] is False
        assert "ProtocolError" in response["err"]
        sock.settimeout(5)
        assert sock.recv(1) == b""  # server closed the stream
    with socket.create_connection((server.host, server.port), timeout=5) as sock:
        assert _raw_request(sock, {"op": "PING", "args": {}})["ok"] is True


def test_unknown_op_rejected(server):
    with socket.create_connection((server.host, server.port), timeout=5) as sock:
        response = _raw_request(sock, {"op": "SHRUG", "args": {}})
        assert response["ok"] is False
        assert "unknown op" in response["err"]


def test_bad_request_shape_rejected(server):
    with socket.create_connection((server.host, server.port), timeout=5) as sock:
        response = _raw_request(sock, {"nope": 1})
        assert response["ok"] is False


def test_tcp_client_round_trip(server):
    client = TcpBrokerClient(server.address)
    try:
        assert client.ping()
        env = TaskEnvelope.from_dict(_envelope("deadbeef"))
        client.enqueue(env)
        got = client.consume("clienttest", timeout=1.0)
        assert got is not None
        tag, received = got
        assert received.task_id == "deadbeef"
        info = client.nack(tag, exit_code=3)
        assert info["status"] == "dead"
        stats = client.stats("study-w")
        assert stats["tasks"]["dead"] == 1
        assert client.consume("clienttest", timeout=0.0) is None
    finally:
        client.close()


def test_tcp_client_maps_errors(server):
    client = TcpBrokerClient(server.address)
    try:
        with pytest.raises(UnknownTagError):
            client.ack(424242)
        big = TaskEnvelope.from_dict(_envelope("huge"))
        big.payload = {"study_root": "x" * (server.broker.message_size_limit + 1)}
        with pytest.raises(MessageTooLargeError):
            client.enqueue(big)
    finally:
        client.close()


def test_client_connect_refused_raises_unreachable():
    with pytest.raises(BrokerUnreachableError):
        TcpBrokerClient("127.0.0.1:1", timeout=0.2, retries=1)


def test_local_sentinel_shares_state_within_process():
    a = connect_broker("local:wiretest")
    b = connect_broker("local:wiretest")
    env = TaskEnvelope.from_dict(_envelope("feedface"))
    a.enqueue(env)
    got = b.consume("other", timeout=0.5)
    assert got is not None and got[1].task_id == "feedface"
    b.ack(got[0])
    assert local_broker("local:wiretest").stats()["tasks"]["succeeded"] == 1
