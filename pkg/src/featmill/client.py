"""Blocking NDJSON client used by the bench harness and the tests.

One client per thread; requests are correlated by an incrementing id.
"""

from __future__ import annotations

import json
import socket


class WireError(Exception):
    def __init__(self, code: str, message: str, extras: dict | None = None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.extras = extras or {}


class EngineClient:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._reader = self._sock.makefile("rb")
        self._next_id = 0

    def close(self) -> None:
        try:
            self._reader.close()
        finally:
            self._sock.close()

    def __enter__(self) -> EngineClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def send_raw(self, line: bytes) -> dict:
        """Send one raw line (fuzzing hook) and read one response line."""
        self._sock.sendall(line)
        reply = self._reader.readline()
        if not reply:
            raise ConnectionError("server closed the connection")
        return json.loads(reply)

    def call(self, op: str, payload: dict | None = None) -> dict:
        """Issue one request and return the full response object; raises
        ``WireError`` on an error status."""
        self._next_id += 1
        msg = {"op": op, "id": self._next_id, "payload": payload or {}}
        resp = self.send_raw(json.dumps(msg, separators=(",", ":")).encode() + b"\n")
        if resp.get("id") != self._next_id:
            raise ConnectionError(f"response id {resp.get('id')} != request id {self._next_id}")
        if resp.get("status") != "ok":
            err = resp.get("error") or {}
            raise WireError(err.get("code", "unknown"), err.get("message", ""), err)
        return resp

    # convenience wrappers

    def ping(self) -> bool:
        return bool(self.call("ping")["data"].get("pong"))

    def create_table(self, schema: dict) -> str:
        return self.call("create_table", {"schema": schema})["data"]["table"]

    def ingest(self, table: str, record: dict) -> int:
        return self.call("ingest", {"table": table, "record": record})["data"]["seq"]

    def ingest_batch(self, table: str, records: list[dict]) -> int:
        return self.call("ingest", {"table": table, "records": records})["data"]["count"]

    def deploy(self, sql: str, name: str | None = None) -> str:
        payload: dict = {"sql": sql}
        if name is not None:
            payload["name"] = name
        return self.call("deploy", payload)["data"]["name"]

    def request(self, name: str, key, t: int) -> dict:
        return self.call("request", {"name": name, "key": key, "t": t})

    def query(self, sql: str, key, t: int) -> dict:
        return self.call("query", {"sql": sql, "key": key, "t": t})

    def stats(self) -> dict:
        return self.call("stats")["data"]
