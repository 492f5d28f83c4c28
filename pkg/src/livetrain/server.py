"""The control hub and its HTTP/WebSocket surface.

Clients submit commands over HTTP; the hub validates, enqueues them in
per-category FIFO queues, and tracks each command's status timeline. The
training loop drains queues between gradient steps and resolves commands.
Training events fan out to every subscriber; a slow subscriber loses oldest
metric/log events first and is detached after sustained overflow, so the
trainer never blocks on client I/O.
"""

from __future__ import annotations

import json
import threading
import time as _time
from collections import deque
from dataclasses import dataclass, field
from typing import IO, Any

import anyio
from fastapi import FastAPI, Query, Request, WebSocket, WebSocketDisconnect
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .protocol import (
    CATEGORY_ORDER,
    CommandEnvelope,
    CommandRegistry,
    CommandStatus,
    DROPPABLE_EVENT_TYPES,
    EventType,
    ProtocolError,
    TrainingEvent,
    command_category,
    decode_command,
    encode_event,
    validate_transition,
)
from .state import RunStore, metric_record

RUN_STATUSES = ("idle", "training", "paused", "stopped")


class HubError(ValueError):
    pass


@dataclass
class CommandRecord:
    envelope: CommandEnvelope
    timeline: list[tuple[str, float, str | None]] = field(default_factory=list)

    def current_status(self) -> CommandStatus:
        return CommandStatus(self.timeline[-1][0])

    def to_dict(self) -> dict:
        return {
            "envelope": {
                "command": self.envelope.command,
                "args": self.envelope.args,
                "time": self.envelope.time,
                "uuid": self.envelope.uuid,
                "status": self.current_status().value,
            },
            "timeline": [
                {"status": s, "time": t, **({"detail": d} if d else {})}
                for s, t, d in self.timeline
            ],
        }


class EventSubscriber:
    """Bounded per-client event buffer with the drop policy applied."""

    def __init__(self, maxlen: int = 1024):
        self.maxlen = maxlen
        self.detached = False
        self._buf: deque[tuple[bytes, bool]] = deque()
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self._drops_since_ok = 0

    def push(self, frame: bytes, droppable: bool) -> None:
        with self._ready:
            if self.detached:
                return
            if len(self._buf) >= self.maxlen:
                if self._evict_droppable():
                    self._buf.append((frame, droppable))
                elif droppable:
                    self._drops_since_ok += 1  # buffer is all-lifecycle; lose the newcomer
                else:
                    self._buf.append((frame, droppable))  # lifecycle never dropped
                    self._drops_since_ok += 1
                if self._drops_since_ok > self.maxlen:
                    self.detached = True
            else:
                self._buf.append((frame, droppable))
                if len(self._buf) < self.maxlen // 2:
                    self._drops_since_ok = 0
            self._ready.notify_all()

    def _evict_droppable(self) -> bool:
        for i, (_, droppable) in enumerate(self._buf):
            if droppable:
                del self._buf[i]
                self._drops_since_ok += 1
                return True
        return False

    def next_frame(self, timeout: float = 0.25) -> bytes | None:
        with self._ready:
            if not self._buf:
                self._ready.wait(timeout)
            if not self._buf:
                return None
            frame, _ = self._buf.popleft()
            return frame

    def pending(self) -> int:
        with self._lock:
            return len(self._buf)


class ControlHub:
    """Thread-safe mediator between clients and the training loop.

    submit/drain/resolve/publish are mutually atomic; drain has a single
    consumer (the trainer). Publishing never blocks on subscribers.
    """

    def __init__(self, store: RunStore, registry: CommandRegistry | None = None,
                 subscriber_buffer: int = 1024):
        self._store = store
        self._registry = registry
        self._subscriber_buffer = subscriber_buffer
        self._lock = threading.RLock()
        self._commands_arrived = threading.Condition(self._lock)
        self._queues: dict[str, deque[CommandEnvelope]] = {c: deque() for c in CATEGORY_ORDER}
        self._history: list[CommandRecord] = []
        self._by_uuid: dict[str, CommandRecord] = {}
        self._subscribers: list[EventSubscriber] = []
        self._run_status = "idle"
        self._history_file: IO[str] | None = None
        self._shutdown = threading.Event()

    # -- command intake ------------------------------------------------------

    def submit_command(self, raw: bytes | str) -> tuple[str, CommandStatus]:
        envelope = decode_command(raw, self._registry)
        with self._lock:
            if envelope.uuid in self._by_uuid:
                raise ProtocolError(
                    f"duplicate uuid {envelope.uuid!r}", field="uuid", code="duplicate_uuid"
                )
            record = CommandRecord(envelope)
            self._history.append(record)
            self._by_uuid[envelope.uuid] = record
            self._append_status(record, CommandStatus.REQUESTED, at=envelope.time)
            self._append_status(record, CommandStatus.PENDING)
            self._queues[command_category(envelope.command)].append(envelope)
            self._commands_arrived.notify_all()
        return envelope.uuid, CommandStatus.PENDING

    def begin_scheduled(self, envelope: CommandEnvelope) -> CommandEnvelope:
        """Register a trainer-side scheduled command: it enters history and
        goes straight to running (the caller applies it now)."""
        with self._lock:
            if envelope.uuid in self._by_uuid:
                raise ProtocolError(
                    f"duplicate uuid {envelope.uuid!r}", field="uuid", code="duplicate_uuid"
                )
            record = CommandRecord(envelope)
            self._history.append(record)
            self._by_uuid[envelope.uuid] = record
            self._append_status(record, CommandStatus.REQUESTED, at=envelope.time)
            self._append_status(record, CommandStatus.PENDING)
            self._append_status(record, CommandStatus.RUNNING)
        return envelope

    def drain_category(self, category: str) -> list[CommandEnvelope]:
        """All pending envelopes of one category, FIFO, each moved to running."""
        with self._lock:
            queue = self._queues[category]
            drained = list(queue)
            queue.clear()
            for envelope in drained:
                self._append_status(self._by_uuid[envelope.uuid], CommandStatus.RUNNING)
            return drained

    def drain_in_order(self) -> list[CommandEnvelope]:
        with self._lock:
            out = []
            for category in CATEGORY_ORDER:
                out.extend(self.drain_category(category))
            return out

    def wait_for_commands(self, timeout: float) -> bool:
        with self._commands_arrived:
            if any(self._queues[c] for c in CATEGORY_ORDER):
                return True
            self._commands_arrived.wait(timeout)
            return any(self._queues[c] for c in CATEGORY_ORDER)

    def resolve_command(self, uuid: str, terminal: CommandStatus, detail: str | None = None) -> None:
        with self._lock:
            record = self._by_uuid.get(uuid)
            if record is None:
                raise HubError(f"unknown command uuid {uuid!r}")
            current = record.current_status()
            if not validate_transition(current, terminal):
                raise HubError(
                    f"illegal transition {current.value} -> {CommandStatus(terminal).value} "
                    f"for {uuid!r}"
                )
            if current == CommandStatus.PENDING:
                # no command may be both queued and terminal
                for queue in self._queues.values():
                    for queued in list(queue):
                        if queued.uuid == uuid:
                            queue.remove(queued)
            self._append_status(record, terminal, detail=detail)

    def fail_pending(self, reason: str) -> int:
        """Fail every still-pending command (and empty the queues)."""
        with self._lock:
            failed = 0
            for queue in self._queues.values():
                while queue:
                    envelope = queue.popleft()
                    record = self._by_uuid[envelope.uuid]
                    self._append_status(record, CommandStatus.FAILED, detail=reason)
                    failed += 1
            return failed

    def _append_status(
        self, record: CommandRecord, status: CommandStatus, at: float | None = None,
        detail: str | None = None,
    ) -> None:
        now = _time.time() if at is None else at
        record.timeline.append((status.value, now, detail))
        self._persist_status(record.envelope, status, now, detail)
        payload: dict[str, Any] = {"uuid": record.envelope.uuid, "status": status.value}
        if detail:
            payload["detail"] = detail
        self.publish_event(
            TrainingEvent(
                event_type=EventType.COMMAND_STATUS.value,
                step=0,
                branch_id="-",
                time=now,
                payload=payload,
            )
        )

    def _persist_status(
        self, envelope: CommandEnvelope, status: CommandStatus, now: float, detail: str | None
    ) -> None:
        if self._history_file is None:
            self._history_file = open(self._store.commands_path, "a", encoding="utf-8")
        line: dict[str, Any] = {"uuid": envelope.uuid, "status": status.value, "time": now}
        if detail:
            line["detail"] = detail
        if status == CommandStatus.REQUESTED:
            line["command"] = envelope.command
            line["args"] = envelope.args
        self._history_file.write(json.dumps(line, ensure_ascii=False) + "\n")
        self._history_file.flush()

    # -- events ---------------------------------------------------------------

    def publish_event(self, event: TrainingEvent) -> None:
        frame = encode_event(event)
        droppable = event.event_type in DROPPABLE_EVENT_TYPES
        with self._lock:
            if event.event_type == EventType.METRIC.value:
                payload = event.payload
                self._store.append_metric(
                    event.branch_id,
                    metric_record(
                        step=payload.get("step", event.step),
                        train_loss=payload["train_loss"],
                        grad_norm=payload["grad_norm"],
                        lr=payload["lr"],
                        val_loss=payload.get("val_loss"),
                    ),
                )
            alive = []
            for sub in self._subscribers:
                sub.push(frame, droppable)
                if not sub.detached:
                    alive.append(sub)
            self._subscribers = alive

    # -- views ------------------------------------------------------------------

    @property
    def store(self) -> RunStore:
        return self._store

    def set_run_status(self, status: str) -> None:
        if status not in RUN_STATUSES:
            raise HubError(f"unknown run status {status!r}")
        with self._lock:
            self._run_status = status

    def begin_shutdown(self) -> None:
        """Signal websocket sessions to close once their buffers drain."""
        self._shutdown.set()

    def is_shutting_down(self) -> bool:
        return self._shutdown.is_set()

    def run_status(self) -> str:
        with self._lock:
            return self._run_status

    def history(self) -> list[dict]:
        with self._lock:
            return [record.to_dict() for record in self._history]

    def snapshot_state(self) -> dict:
        with self._lock:
            return {
                "run_status": self._run_status,
                "queue_depths": {c: len(q) for c, q in self._queues.items()},
                "history": [record.to_dict() for record in self._history],
                "branches": [node.to_dict() for node in self._store.branch_tree()],
                "checkpoints": [ck.to_dict() for ck in self._store.checkpoints()],
            }

    # -- subscriptions ------------------------------------------------------------

    def subscribe(self) -> tuple[EventSubscriber, list[bytes]]:
        """Atomically snapshot history into replayable frames and register a
        subscriber, so the caller sees every event exactly once."""
        with self._lock:
            frames = self._snapshot_frames()
            sub = EventSubscriber(self._subscriber_buffer)
            self._subscribers.append(sub)
            return sub, frames

    def unsubscribe(self, sub: EventSubscriber) -> None:
        with self._lock:
            sub.detached = True
            if sub in self._subscribers:
                self._subscribers.remove(sub)

    def subscriber_count(self) -> int:
        with self._lock:
            return len(self._subscribers)

    def _snapshot_frames(self) -> list[bytes]:
        frames = []
        for node in self._store.branch_tree():
            frames.append(
                encode_event(
                    TrainingEvent(
                        event_type=EventType.BRANCH_CREATED.value,
                        step=node.fork_step,
                        branch_id=node.branch_id,
                        time=node.created_at,
                        payload={
                            "branch_id": node.branch_id,
                            "parent_branch_id": node.parent_branch_id,
                            "fork_step": node.fork_step,
                        },
                    )
                )
            )
        for ck in self._store.checkpoints():
            frames.append(
                encode_event(
                    TrainingEvent(
                        event_type=EventType.CHECKPOINT_SAVED.value,
                        step=ck.step,
                        branch_id=ck.branch_id,
                        time=ck.created_at,
                        payload={"uuid": ck.uuid, "step": ck.step, "branch_id": ck.branch_id},
                    )
                )
            )
        for branch_id in self._store.metric_branches():
            for record in self._store.metric_records(branch_id):
                frames.append(
                    encode_event(
                        TrainingEvent(
                            event_type=EventType.METRIC.value,
                            step=record["step"],
                            branch_id=branch_id,
                            time=0.0,
                            payload=record,
                        )
                    )
                )
        for record in self._history:
            for status, at, detail in record.timeline:
                payload = {"uuid": record.envelope.uuid, "status": status}
                if detail:
                    payload["detail"] = detail
                frames.append(
                    encode_event(
                        TrainingEvent(
                            event_type=EventType.COMMAND_STATUS.value,
                            step=0,
                            branch_id="-",
                            time=at,
                            payload=payload,
                        )
                    )
                )
        return frames

    def close(self) -> None:
        if self._history_file is not None:
            self._history_file.close()
            self._history_file = None


# ---------------------------------------------------------------------------
# HTTP / WebSocket app
# ---------------------------------------------------------------------------


def build_app(hub: ControlHub):
    app = FastAPI(title="livetrain control server")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.hub = hub

    @app.post("/command")
    async def post_command(request: Request):
        raw = await request.body()
        try:
            uuid, status = hub.submit_command(raw)
        except ProtocolError as exc:
            body: dict[str, Any] = {"error": str(exc)}
            if exc.field:
                body["field"] = exc.field
            code = 409 if exc.code == "duplicate_uuid" else 400
            return JSONResponse(body, status_code=code)
        return {"uuid": uuid, "status": status.value}

    @app.get("/commands")
    async def get_commands():
        return {"commands": hub.history()}

    @app.get("/state")
    async def get_state():
        return hub.snapshot_state()

    @app.get("/branches")
    async def get_branches():
        return {"branches": [node.to_dict() for node in hub.store.branch_tree()]}

    @app.get("/metrics")
    async def get_metrics(branch_id: str = Query(default="b0")):
        return {"branch_id": branch_id, "records": hub.store.metric_records(branch_id)}

    @app.websocket("/ws")
    async def websocket_events(ws: WebSocket):
        await ws.accept()
        sub, snapshot_frames = hub.subscribe()
        try:
            for frame in snapshot_frames:
                await ws.send_text(frame.decode("utf-8"))
            while not sub.detached:
                frame = await anyio.to_thread.run_sync(sub.next_frame, 0.25)
                if frame is not None:
                    await ws.send_text(frame.decode("utf-8"))
                elif hub.is_shutting_down() and hub.run_status() == "stopped":
                    break  # run is over and this session is fully drained
        except (WebSocketDisconnect, RuntimeError, ConnectionError):
            pass
        finally:
            hub.unsubscribe(sub)

    return app
