"""Broker clients: TCP wire client and the in-process equivalent.

``connect_broker("host:port")`` returns a TCP client; the sentinel
endpoint ``local:`` returns a handle on a process-local broker instance
(same operations, no sockets — one registry entry per endpoint string, so
repeated connects within a process share state). The ``ENSEMBLE_BROKER``
environment variable overrides whatever endpoint a workflow file names.

A client instance is safe to use from one thread at a time; open one per
worker slot.
"""

from __future__ import annotations

import json
import os
import socket
import threading
import time

from .broker import Broker
from .envelope import TaskEnvelope, canonical_json
from .errors import BrokerUnreachableError, ProtocolError, error_from_wire
from .server import HEADER, read_frame, write_frame

ENV_BROKER = "ENSEMBLE_BROKER"
ENV_LEASE = "ENSEMBLE_LEASE"
LOCAL_SENTINEL = "local:"

_local_registry: dict[str, Broker] = {}
_local_lock = threading.Lock()


def resolve_endpoint(explicit: str | None, spec_endpoint: str | None) -> str:
    """Endpoint precedence: explicit flag, ENSEMBLE_BROKER, workflow file."""
    if explicit:
        return explicit
    env = os.environ.get(ENV_BROKER)
    if env:
        return env
    return spec_endpoint or LOCAL_SENTINEL


def default_lease() -> float | None:
    """Lease override from ENSEMBLE_LEASE (seconds), if set and valid."""
    raw = os.environ.get(ENV_LEASE)
    if not raw:
        return None
    try:
        return float(raw)
    except ValueError:
        return None


def is_local_endpoint(endpoint: str) -> bool:
    return endpoint.startswith(LOCAL_SENTINEL)


def connect_broker(endpoint: str, *, timeout: float = 5.0, retries: int = 3):
    """Open a client for `endpoint` (``local:...`` or ``[tcp://]host:port``)."""
    if is_local_endpoint(endpoint):
        with _local_lock:
            broker = _local_registry.get(endpoint)
            if broker is None:
                lease = default_lease()
                broker = Broker(default_lease=lease if lease is not None else 600.0)
                _local_registry[endpoint] = broker
        return InProcClient(broker)
    return TcpBrokerClient(endpoint, timeout=timeout, retries=retries)


def local_broker(endpoint: str = LOCAL_SENTINEL) -> Broker:
    """The process-local broker behind a ``local:`` endpoint."""
    return connect_broker(endpoint).broker


class _ClientOps:
    """Typed operations shared by both client flavors."""

    def request(self, op: str, args: dict):  # pragma: no cover - interface
        raise NotImplementedError

    def enqueue(self, envelope: TaskEnvelope, *, force: bool = False) -> dict:
        return self.request("ENQUEUE", {"envelope": envelope.to_dict(), "force": force})

    def consume(self, consumer_id: str, timeout: float = 0.0):
        data = self.request("CONSUME", {"consumer": consumer_id, "timeout": timeout})
        if data is None:
            return None
        return data["tag"], TaskEnvelope.from_dict(data["envelope"])

    def ack(self, tag: int) -> dict:
        return self.request("ACK", {"tag": tag})

    def nack(self, tag: int, exit_code: int | None = None) -> dict:
        return self.request("NACK", {"tag": tag, "exit_code": exit_code})

    def requeue_expired(self, lease: float | None = None) -> int:
        return self.request("REQUEUE", {"lease": lease})["requeued"]

    def stats(self, study_id: str | None = None, *, detail: bool = False) -> dict:
        return self.request("STATS", {"study": study_id, "detail": detail})

    def purge(self, study_id: str | None = None) -> int:
        return self.request("PURGE", {"study": study_id})["removed"]

    def ping(self) -> bool:
        return self.request("PING", {}) == "pong"

    def close(self) -> None:
        pass


class InProcClient(_ClientOps):
    """Direct calls against a Broker in this process."""

    def __init__(self, broker: Broker):
        self.broker = broker

    def request(self, op: str, args: dict):
        if op == "PING":
            return self.broker.ping()
        if op == "ENQUEUE":
            envelope = TaskEnvelope.from_dict(args["envelope"])
            return self.broker.enqueue(envelope, force=bool(args.get("force")))
        if op == "CONSUME":
            result = self.broker.consume(args["consumer"], float(args.get("timeout", 0.0)))
            if result is None:
                return None
            tag, env = result
            return {"tag": tag, "envelope": env.to_dict()}
        if op == "ACK":
            return self.broker.ack(int(args["tag"]))
        if op == "NACK":
            return self.broker.nack(int(args["tag"]), args.get("exit_code"))
        if op == "REQUEUE":
            lease = args.get("lease")
            return {"requeued": self.broker.requeue_expired(None if lease is None else float(lease))}
        if op == "STATS":
            return self.broker.stats(args.get("study"), detail=bool(args.get("detail")))
        if op == "PURGE":
            return {"removed": self.broker.purge(args.get("study"))}
        raise ProtocolError(f"unknown op {op!r}")


class TcpBrokerClient(_ClientOps):
    """Length-prefixed JSON client over one TCP connection."""

    def __init__(self, endpoint: str, *, timeout: float = 5.0, retries: int = 3,
                 token: str | None = None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.token = token
        host, port = self._parse(endpoint)
        self._sock = self._connect(host, port, retries)
        self._frame_limit = 1 << 31

    @staticmethod
    def _parse(endpoint: str) -> tuple[str, int]:
        addr = endpoint
        if addr.startswith("tcp://"):
            addr = addr[len("tcp://"):]
        host, _, port_text = addr.rpartition(":")
        if not host or not port_text.isdigit():
            raise BrokerUnreachableError(f"bad broker endpoint {endpoint!r}")
        return host, int(port_text)

    def _connect(self, host: str, port: int, retries: int) -> socket.socket:
        delay = 0.1
        last: Exception | None = None
        for _ in range(max(retries, 1)):
            try:
                sock = socket.create_connection((host, port), timeout=self.timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                return sock
            except OSError as exc:
                last = exc
                time.sleep(delay)
                delay = min(delay * 2, 2.0)
        raise BrokerUnreachableError(f"cannot connect to broker at {host}:{port}: {last}")

    def request(self, op: str, args: dict):
        if self.token is not None:
            args = dict(args, token=self.token)
        payload = canonical_json({"op": op, "args": args}).encode("utf-8")
        # Block long enough for server-side long-polling consumes.
        wait = self.timeout + (float(args.get("timeout", 0.0)) if op == "CONSUME" else 0.0)
        try:
            self._sock.settimeout(wait + 30.0)
            write_frame(self._sock, payload)
            frame = read_frame(self._sock, self._frame_limit)
        except (OSError, ValueError, ConnectionError) as exc:
            raise BrokerUnreachableError(f"broker connection lost: {exc}") from exc
        if frame is None:
            raise BrokerUnreachableError("broker closed the connection")
        try:
            response = json.loads(frame.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"bad response frame: {exc}") from exc
        if not isinstance(response, dict) or "ok" not in response:
            raise ProtocolError(f"malformed response object: {response!r}")
        if not response["ok"]:
            raise error_from_wire(response.get("err") or "BrokerError: unspecified")
        return response.get("data")

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


__all__ = [
    "ENV_BROKER",
    "ENV_LEASE",
    "HEADER",
    "InProcClient",
    "TcpBrokerClient",
    "connect_broker",
    "default_lease",
    "is_local_endpoint",
    "local_broker",
    "resolve_endpoint",
]
