"""Network-facing service: newline-delimited JSON over plain TCP.

Each connection is read by its own thread and its messages are processed in
receive order; feature requests across connections execute concurrently on
the engine's lane pool, gated by the admission governor (concurrent-request
cap plus a bounded wait queue). Ingest is gated only by the memory ceiling.

Wire format: one JSON object per line.
  request:  {"op": ..., "id": ..., "payload": {...}}
  response: {"id": ..., "status": "ok"|"error", "data": {...},
             "latency": {...}?, "error": {"code", "message"}?}
"""

from __future__ import annotations

import json
import socket
import threading
import time
from dataclasses import dataclass, field

from .engine import EngineConfig, FeatureEngine
from .errors import (
    AdmissionTimeoutError,
    EngineError,
    InvalidConfigError,
    MalformedMessageError,
)
from .planner import OptimizationFlags
from .schema import TableSchema

_MAX_LINE_BYTES = 8 * 1024 * 1024


class Governor:
    """Admission control: at most c_max requests in flight, a bounded wait
    queue, and a wait timeout. Tracks the in-flight high-water mark."""

    def __init__(self, c_max: int, queue_depth: int = 128, queue_timeout_ms: int = 100):
        if c_max < 1:
            raise InvalidConfigError("c_max must be >= 1")
        if queue_depth < 0 or queue_timeout_ms < 0:
            raise InvalidConfigError("queue depth and timeout must be non-negative")
        self.c_max = c_max
        self.queue_depth = queue_depth
        self.queue_timeout_s = queue_timeout_ms / 1000.0
        self._cond = threading.Condition()
        self.in_flight = 0
        self.waiting = 0
        self.high_water = 0
        self.admitted = 0
        self.rejected = 0

    def admit(self) -> None:
        deadline = time.monotonic() + self.queue_timeout_s
        with self._cond:
            if self.in_flight >= self.c_max:
                if self.waiting >= self.queue_depth:
                    self.rejected += 1
                    raise AdmissionTimeoutError("admission queue is full")
                self.waiting += 1
                try:
                    while self.in_flight >= self.c_max:
                        remaining = deadline - time.monotonic()
                        if remaining <= 0 or not self._cond.wait(remaining):
                            if self.in_flight >= self.c_max:
                                self.rejected += 1
                                raise AdmissionTimeoutError("admission wait timed out")
                finally:
                    self.waiting -= 1
            self.in_flight += 1
            self.admitted += 1
            if self.in_flight > self.high_water:
                self.high_water = self.in_flight

    def release(self) -> None:
        with self._cond:
            self.in_flight -= 1
            self._cond.notify()

    def stats(self) -> dict:
        with self._cond:
            return {
                "c_max": self.c_max,
                "in_flight": self.in_flight,
                "waiting": self.waiting,
                "high_water": self.high_water,
                "admitted": self.admitted,
                "rejected": self.rejected,
            }


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8765
    workers: int = 8  # execution lanes (Eq-4 P)
    c_max: int = 64
    queue_depth: int = 128
    queue_timeout_ms: int = 100
    mmax_bytes: int = 1 << 30
    flags: OptimizationFlags = field(default_factory=OptimizationFlags.all_on)
    cache_capacity: int = 256
    bucket_size: int = 256
    strict_w: bool = False
    models_path: str | None = None

    def check(self) -> None:
        if self.workers < 1:
            raise InvalidConfigError("workers must be >= 1")
        if self.c_max < 1:
            raise InvalidConfigError("c_max must be >= 1")
        if self.mmax_bytes <= 0:
            raise InvalidConfigError("mmax_bytes must be > 0")

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            flags=self.flags,
            bytes_limit=self.mmax_bytes,
            bucket_size=self.bucket_size,
            cache_capacity=self.cache_capacity,
            lanes=self.workers,
            strict_w=self.strict_w,
        )


class FeatureServer:
    """TCP server around a FeatureEngine. ``start`` binds and returns; use
    as a context manager or call ``stop`` for a drained shutdown."""

    def __init__(self, config: ServerConfig, engine: FeatureEngine | None = None):
        config.check()
        self.config = config
        self.engine = engine or FeatureEngine(config.engine_config())
        if config.models_path:
            self.engine.ml.load_model_file(config.models_path)
        self.governor = Governor(config.c_max, config.queue_depth, config.queue_timeout_ms)
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._conns: set[socket.socket] = set()
        self._conn_lock = threading.Lock()
        self._stopping = threading.Event()
        self.port: int | None = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind((self.config.host, self.config.port))
        except OSError as exc:
            listener.close()
            raise InvalidConfigError(f"cannot bind {self.config.host}:{self.config.port}: {exc}")
        listener.listen(128)
        self._listener = listener
        self.port = listener.getsockname()[1]
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)
        with self._conn_lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                conn.close()
            except OSError:
                pass
        self.engine.close()  # drains in-flight lane work

    def __enter__(self) -> FeatureServer:
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- connection handling ----------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._conn_lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        reader = conn.makefile("rb")
        try:
            while not self._stopping.is_set():
                line = reader.readline(_MAX_LINE_BYTES)
                if not line:
                    return
                response = self._handle_line(line)
                conn.sendall(json.dumps(response, separators=(",", ":")).encode() + b"\n")
        except (OSError, ValueError):
            pass
        finally:
            reader.close()
            try:
                conn.close()
            except OSError:
                pass
            with self._conn_lock:
                self._conns.discard(conn)

    # -- dispatch -----------------------------------------------------------

    def _handle_line(self, line: bytes) -> dict:
        if len(line) >= _MAX_LINE_BYTES:
            return _error_response(None, "malformed", "line too long")
        try:
            msg = json.loads(line)
        except (UnicodeDecodeError, json.JSONDecodeError):
            return _error_response(None, "malformed", "invalid JSON")
        if not isinstance(msg, dict):
            return _error_response(None, "malformed", "message must be a JSON object")
        msg_id = msg.get("id")
        op = msg.get("op")
        payload = msg.get("payload")
        if not isinstance(op, str):
            return _error_response(msg_id, "malformed", "missing op")
        if payload is None:
            payload = {}
        if not isinstance(payload, dict):
            return _error_response(msg_id, "malformed", "payload must be an object")
        try:
            return self._dispatch(op, msg_id, payload)
        except EngineError as exc:
            return _error_response(msg_id, exc.code, exc.message, _error_extras(exc))
        except Exception as exc:  # never crash the connection on a bad message
            return _error_response(msg_id, "internal", f"{type(exc).__name__}: {exc}")

    def _dispatch(self, op: str, msg_id, payload: dict) -> dict:
        if op == "ping":
            return _ok_response(msg_id, {"pong": True})
        if op == "create_table":
            schema = TableSchema.from_dict(_require(payload, "schema", dict))
            self.engine.create_table(schema)
            return _ok_response(msg_id, {"table": schema.name})
        if op == "ingest":
            return self._handle_ingest(msg_id, payload)
        if op == "deploy":
            name = payload.get("name")
            if name is not None and not isinstance(name, str):
                raise MalformedMessageError("deployment name must be a string")
            dep = self.engine.deploy(_require(payload, "sql", str), name)
            return _ok_response(msg_id, {"name": dep.name})
        if op == "query":
            sql = _require(payload, "sql", str)
            key = _require_key(payload)
            t = _require(payload, "t", int)
            return self._governed(msg_id, lambda: self.engine.query(sql, key, t))
        if op == "request":
            name = _require(payload, "name", str)
            key = _require_key(payload)
            t = _require(payload, "t", int)
            self.engine.deployment(name)  # unknown_deployment before admission
            return self._governed(msg_id, lambda: self.engine.request(name, key, t))
        if op == "stats":
            data = self.engine.stats()
            data["governor"] = self.governor.stats()
            return _ok_response(msg_id, data)
        return _error_response(msg_id, "malformed", f"unknown op {op!r}")

    def _handle_ingest(self, msg_id, payload: dict) -> dict:
        table = _require(payload, "table", str)
        self.engine.storage.table(table)  # unknown_table before reading records
        if "records" in payload:
            records = payload["records"]
            if not isinstance(records, list):
                raise MalformedMessageError("records must be a list")
            seqs = [self.engine.ingest(table, rec) for rec in records]
            return _ok_response(msg_id, {"count": len(seqs), "last_seq": seqs[-1] if seqs else None})
        record = _require(payload, "record", dict)
        seq = self.engine.ingest(table, record)
        return _ok_response(msg_id, {"seq": seq})

    def _governed(self, msg_id, fn) -> dict:
        """Admit, then run the feature computation on an execution lane."""
        self.governor.admit()
        try:
            row, latency = self.engine.lanes.run(fn)
        finally:
            self.governor.release()
        return _ok_response(
            msg_id,
            {"key": row.key, "t": row.ts, "features": row.by_name()},
            latency.as_dict(),
        )


def _require(payload: dict, field_name: str, kind) -> object:
    value = payload.get(field_name)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise MalformedMessageError(f"payload field {field_name!r} must be {kind.__name__}")
    return value


def _require_key(payload: dict):
    key = payload.get("key")
    if isinstance(key, bool) or not isinstance(key, (str, int)):
        raise MalformedMessageError("payload field 'key' must be a string or int64")
    return key


def _ok_response(msg_id, data: dict, latency: dict | None = None) -> dict:
    resp: dict = {"id": msg_id, "status": "ok", "data": data}
    if latency is not None:
        resp["latency"] = latency
    return resp


def _error_response(msg_id, code: str, message: str, extras: dict | None = None) -> dict:
    err: dict = {"code": code, "message": message}
    if extras:
        err.update(extras)
    return {"id": msg_id, "status": "error", "error": err}


def _error_extras(exc: EngineError) -> dict:
    extras: dict = {}
    offset = getattr(exc, "offset", None)
    if offset is not None:
        extras["offset"] = offset
    expected = getattr(exc, "expected", None)
    if expected:
        extras["expected"] = list(expected)
    fld = getattr(exc, "field", None)
    if fld is not None:
        extras["field"] = fld
    return extras
