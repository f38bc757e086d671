"""TCP service exposing broker operations.

Framing: each message is a 4-byte big-endian unsigned length followed by
that many bytes of UTF-8 canonical JSON. Requests look like
``{"op":"ENQUEUE","args":{...}}``; every request gets exactly one
``{"ok":bool,"data":...,"err":str|null}`` response, and clients may
pipeline requests. A frame whose declared length exceeds the limit gets
an error response and the connection is closed (the stream can no longer
be trusted); a well-framed but undecodable payload gets an error response
and the connection stays up.
"""

from __future__ import annotations

import json
import logging
import socket
import struct
import threading

from .broker import Broker
from .envelope import TaskEnvelope, canonical_json
from .errors import BrokerError, error_to_wire

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
OPS = ("ENQUEUE", "CONSUME", "ACK", "NACK", "REQUEUE", "STATS", "PURGE", "PING")

# Generous bound for request frames beyond the envelope payload itself.
FRAME_SLACK = 1 << 20
MAX_CONSUME_WAIT = 60.0


def read_frame(sock: socket.socket, limit: int) -> bytes | None:
    """Read one length-prefixed frame; None on clean EOF.

    Raises ValueError when the declared length exceeds `limit` and
    ConnectionError on mid-frame EOF.
    """
    header = _read_exact(sock, HEADER.size)
    if header is None:
        return None
    (length,) = HEADER.unpack(header)
    if length > limit:
        raise ValueError(f"frame of {length} bytes exceeds limit {limit}")
    if length == 0:
        return b""
    return _read_exact(sock, length, frame_start=False)


def _read_exact(sock: socket.socket, n: int, *, frame_start: bool = True) -> bytes | None:
    """Read exactly n bytes; None on EOF at a frame boundary."""
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            if got == 0 and frame_start:
                return None
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def write_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(HEADER.pack(len(payload)) + payload)


def encode_response(ok: bool, data=None, err: str | None = None) -> bytes:
    return canonical_json({"ok": ok, "data": data, "err": err}).encode("utf-8")


class BrokerServer:
    """Thread-per-connection TCP front end over a Broker."""

    def __init__(
        self,
        broker: Broker,
        host: str = "127.0.0.1",
        port: int = 0,
        *,
        janitor_interval: float = 0.5,
        auth_token: str | None = None,
    ):
        self.broker = broker
        self.auth_token = auth_token
        self.frame_limit = broker.message_size_limit + FRAME_SLACK
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(128)
        self.host, self.port = self._sock.getsockname()[:2]
        self._stop = threading.Event()
        self._janitor_interval = janitor_interval
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> None:
        """Start the accept loop and lease janitor in background threads."""
        acceptor = threading.Thread(target=self._accept_loop, name="broker-accept", daemon=True)
        acceptor.start()
        janitor = threading.Thread(target=self._janitor_loop, name="broker-janitor", daemon=True)
        janitor.start()
        self._threads = [acceptor, janitor]

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self.broker.close()

    def serve_forever(self) -> None:
        self.start()
        try:
            self._stop.wait()
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    # ------------------------------------------------------------------

    def _janitor_loop(self) -> None:
        while not self._stop.wait(self._janitor_interval):
            try:
                self.broker.requeue_expired()
            except Exception:
                log.exception("lease sweep failed")

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, addr = self._sock.accept()
            except OSError:
                break
            thread = threading.Thread(
                target=self._serve_connection,
                args=(conn, addr),
                name=f"broker-conn-{addr[1]}",
                daemon=True,
            )
            thread.start()

    def _serve_connection(self, conn: socket.socket, addr) -> None:
        conn.settimeout(None)
        try:
            while not self._stop.is_set():
                try:
                    frame = read_frame(conn, self.frame_limit)
                except ValueError as exc:
                    write_frame(conn, encode_response(False, err=f"ProtocolError: {exc}"))
                    return
                except (ConnectionError, socket.timeout, OSError):
                    return
                if frame is None:
                    return
                response = self._handle(frame)
                write_frame(conn, response)
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _handle(self, frame: bytes) -> bytes:
        try:
            request = json.loads(frame.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            return encode_response(False, err=f"ProtocolError: bad request JSON ({exc})")
        if not isinstance(request, dict) or "op" not in request:
            return encode_response(False, err="ProtocolError: request must be {\"op\",\"args\"}")
        op = request.get("op")
        args = request.get("args") or {}
        if not isinstance(args, dict):
            return encode_response(False, err="ProtocolError: args must be an object")
        if op not in OPS:
            return encode_response(False, err=f"BrokerError: unknown op {op!r}")
        if self.auth_token is not None and args.get("token") != self.auth_token:
            return encode_response(False, err="BrokerError: bad or missing token")
        try:
            data = self._dispatch(op, args)
        except Exception as exc:
            return encode_response(False, err=error_to_wire(exc))
        return encode_response(True, data=data)

    def _dispatch(self, op: str, args: dict):
        if op == "PING":
            return self.broker.ping()
        if op == "ENQUEUE":
            envelope = TaskEnvelope.from_dict(args.get("envelope"))
            return self.broker.enqueue(envelope, force=bool(args.get("force", False)))
        if op == "CONSUME":
            consumer = str(args.get("consumer", "anonymous"))
            timeout = min(float(args.get("timeout", 0.0)), MAX_CONSUME_WAIT)
            result = self.broker.consume(consumer, timeout)
            if result is None:
                return None
            tag, env = result
            return {"tag": tag, "envelope": env.to_dict()}
        if op == "ACK":
            return self.broker.ack(int(args["tag"]))
        if op == "NACK":
            exit_code = args.get("exit_code")
            return self.broker.nack(int(args["tag"]), None if exit_code is None else int(exit_code))
        if op == "REQUEUE":
            lease = args.get("lease")
            return {"requeued": self.broker.requeue_expired(None if lease is None else float(lease))}
        if op == "STATS":
            return self.broker.stats(args.get("study"), detail=bool(args.get("detail", False)))
        if op == "PURGE":
            return {"removed": self.broker.purge(args.get("study"))}
        raise BrokerError(f"unknown op {op!r}")
