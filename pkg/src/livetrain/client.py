"""HTTP + event-stream client for the control server."""

from __future__ import annotations

import json
from typing import Any, Iterator

import httpx

from .protocol import CommandEnvelope, TrainingEvent, decode_event, encode_command


class ClientError(RuntimeError):
    pass


class ServerRejection(ClientError):
    """The server refused a submission (4xx) with a machine-readable body."""

    def __init__(self, status_code: int, body: dict):
        super().__init__(f"{status_code}: {body.get('error', body)}")
        self.status_code = status_code
        self.body = body


class ServerUnavailable(ClientError):
    pass


def ws_url(base_url: str) -> str:
    base = base_url.rstrip("/")
    if base.startswith("https://"):
        return "wss://" + base[len("https://"):] + "/ws"
    if base.startswith("http://"):
        return "ws://" + base[len("http://"):] + "/ws"
    return base + "/ws"


class ServerClient:
    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self._http = httpx.Client(base_url=self.base_url, timeout=timeout)

    def close(self) -> None:
        self._http.close()

    def submit_envelope(self, envelope: CommandEnvelope) -> dict:
        try:
            resp = self._http.post("/command", content=encode_command(envelope))
        except httpx.TransportError as exc:
            raise ServerUnavailable(f"cannot reach {self.base_url}: {exc}") from exc
        if resp.status_code != 200:
            try:
                body = resp.json()
            except json.JSONDecodeError:
                body = {"error": resp.text}
            raise ServerRejection(resp.status_code, body)
        return resp.json()

    def submit(self, command: str, args: dict[str, Any] | None = None) -> dict:
        return self.submit_envelope(CommandEnvelope.build(command, args or {}))

    def _get(self, path: str, **params) -> dict:
        try:
            resp = self._http.get(path, params=params or None)
        except httpx.TransportError as exc:
            raise ServerUnavailable(f"cannot reach {self.base_url}: {exc}") from exc
        resp.raise_for_status()
        return resp.json()

    def state(self) -> dict:
        return self._get("/state")

    def commands(self) -> list[dict]:
        return self._get("/commands")["commands"]

    def branches(self) -> list[dict]:
        return self._get("/branches")["branches"]

    def metrics(self, branch_id: str = "b0") -> list[dict]:
        return self._get("/metrics", branch_id=branch_id)["records"]

    def events(self) -> Iterator[TrainingEvent]:
        """Single-connection event stream: the server first replays its
        durable history (those frames carry time 0.0 for metrics), then
        tails live events. Raises ServerUnavailable when the connection
        cannot be established or drops."""
        from websockets.exceptions import ConnectionClosed
        from websockets.sync.client import connect

        try:
            ws = connect(ws_url(self.base_url), open_timeout=5)
        except Exception as exc:  # refused, DNS, handshake
            raise ServerUnavailable(f"cannot open event stream: {exc}") from exc
        try:
            while True:
                try:
                    frame = ws.recv()
                except ConnectionClosed:
                    return
                yield decode_event(frame)
        finally:
            ws.close()
