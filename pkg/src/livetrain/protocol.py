"""Wire format for intervention commands and training events.

Commands travel as a flat JSON object with exactly five keys::

    {
      "command": "update_optimizer",
      "args": "{\\"lr\\": {\\"value\\": 1e-05}}",
      "time": 1754812800.25,
      "uuid": "a3f1...",
      "status": "pending"
    }

``args`` is deliberately a JSON *string* whose content is itself a JSON
object (double-encoded). Events use a sibling JSON layout with a nested
``payload`` object. Both codecs are pure functions, safe for concurrent use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable


class CommandKind(str, Enum):
    UPDATE_OPTIMIZER = "update_optimizer"
    SAVE_CHECKPOINT = "save_checkpoint"
    LOAD_CHECKPOINT = "load_checkpoint"
    PAUSE_TRAINING = "pause_training"
    RESUME_TRAINING = "resume_training"
    STOP_TRAINING = "stop_training"
    MODEL_LAYER_OPERATION = "model_layer_operation"
    MODEL_LAYER_PARAMETER_UPDATE = "model_layer_parameter_update"
    UPDATE_DATASET = "update_dataset"
    UPDATE_DATASET_RUNTIME_HYPERPARAMETERS = "update_dataset_runtime_hyperparameters"
    DO_EVALUATE = "do_evaluate"


class CommandStatus(str, Enum):
    REQUESTED = "requested"
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    SUCCESS = "success"
    FAILED = "failed"


#: Allowed status transitions. Instant commands run requested -> pending ->
#: running -> success/failed; commands that emit a result event (evaluation,
#: checkpoint restore) pass through completed first.
TRANSITIONS: frozenset[tuple[CommandStatus, CommandStatus]] = frozenset(
    {
        (CommandStatus.REQUESTED, CommandStatus.PENDING),
        (CommandStatus.PENDING, CommandStatus.RUNNING),
        (CommandStatus.PENDING, CommandStatus.FAILED),
        (CommandStatus.RUNNING, CommandStatus.SUCCESS),
        (CommandStatus.RUNNING, CommandStatus.FAILED),
        (CommandStatus.RUNNING, CommandStatus.COMPLETED),
        (CommandStatus.COMPLETED, CommandStatus.SUCCESS),
        (CommandStatus.COMPLETED, CommandStatus.FAILED),
    }
)

TERMINAL_STATUSES: frozenset[CommandStatus] = frozenset(
    {CommandStatus.SUCCESS, CommandStatus.FAILED}
)


def validate_transition(from_status: CommandStatus, to_status: CommandStatus) -> bool:
    """True iff ``from_status -> to_status`` is an edge of the lifecycle DAG."""
    return (CommandStatus(from_status), CommandStatus(to_status)) in TRANSITIONS


class EventType(str, Enum):
    METRIC = "metric"
    LOG = "log"
    COMMAND_STATUS = "command_status"
    CHECKPOINT_SAVED = "checkpoint_saved"
    BRANCH_CREATED = "branch_created"
    EVALUATION_RESULT = "evaluation_result"
    TRAINING_ENDED = "training_ended"


#: Event types a slow subscriber may lose under backpressure. Everything
#: else (command status, branch/checkpoint lifecycle, results, run end) must
#: always be delivered or the subscriber detached.
DROPPABLE_EVENT_TYPES: frozenset[str] = frozenset({EventType.METRIC, EventType.LOG})


def _as_value(name: str | Enum) -> str:
    """Plain string form of a kind/status/event-type (enum member or str)."""
    return name.value if isinstance(name, Enum) else str(name)


class ProtocolError(ValueError):
    """Malformed or invalid wire message. ``field`` names the offender."""

    def __init__(self, message: str, *, field: str | None = None, code: str = "invalid"):
        super().__init__(message)
        self.field = field
        self.code = code


@dataclass
class CommandEnvelope:
    """One intervention command as it travels over the wire."""

    command: str
    args: str  # JSON string whose content is a JSON object
    time: float
    uuid: str
    status: CommandStatus = CommandStatus.REQUESTED

    def args_object(self) -> dict[str, Any]:
        return json.loads(self.args)

    @classmethod
    def build(
        cls,
        command: str | CommandKind,
        args: dict[str, Any] | None = None,
        *,
        time: float | None = None,
        uuid: str | None = None,
    ) -> "CommandEnvelope":
        import time as _time
        import uuid as _uuid

        return cls(
            command=command.value if isinstance(command, Enum) else str(command),
            args=json.dumps(args or {}),
            time=float(time if time is not None else _time.time()),
            uuid=uuid if uuid is not None else str(_uuid.uuid4()),
            status=CommandStatus.REQUESTED,
        )


@dataclass
class TrainingEvent:
    """One server-to-client broadcast unit."""

    event_type: str
    step: int
    branch_id: str
    time: float
    payload: dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Command args schemas
# ---------------------------------------------------------------------------

_NUMBER = (int, float)


def _is_number(value: Any) -> bool:
    return isinstance(value, _NUMBER) and not isinstance(value, bool)


def _reject_unknown_keys(args: dict, allowed: set[str], prefix: str = "args") -> None:
    for key in args:
        if key not in allowed:
            raise ProtocolError(
                f"unexpected key {key!r} in {prefix}", field=f"{prefix}.{key}", code="invalid_args"
            )


def _require_string(args: dict, key: str) -> str:
    value = args.get(key)
    if not isinstance(value, str) or not value:
        raise ProtocolError(
            f"args.{key} must be a non-empty string", field=f"args.{key}", code="invalid_args"
        )
    return value


def _wrapped_number(args: dict, key: str, *, allow_null: bool = False) -> None:
    entry = args[key]
    if not isinstance(entry, dict) or set(entry) != {"value"}:
        raise ProtocolError(
            f'args.{key} must be an object of the form {{"value": ...}}',
            field=f"args.{key}",
            code="invalid_args",
        )
    value = entry["value"]
    if value is None and allow_null:
        return
    if not _is_number(value):
        raise ProtocolError(
            f"args.{key}.value must be a number", field=f"args.{key}.value", code="invalid_args"
        )


def _validate_update_optimizer(args: dict) -> None:
    allowed = {"lr", "momentum", "weight_decay", "grad_clip"}
    _reject_unknown_keys(args, allowed)
    if not args:
        raise ProtocolError(
            "update_optimizer args must name at least one hyperparameter",
            field="args",
            code="invalid_args",
        )
    if "lr" in args:
        _wrapped_number(args, "lr")
        if args["lr"]["value"] <= 0:
            raise ProtocolError("args.lr.value must be > 0", field="args.lr.value", code="invalid_args")
    if "momentum" in args:
        _wrapped_number(args, "momentum")
        if not (0 <= args["momentum"]["value"] < 1):
            raise ProtocolError(
                "args.momentum.value must be in [0, 1)", field="args.momentum.value", code="invalid_args"
            )
    if "weight_decay" in args:
        _wrapped_number(args, "weight_decay")
        if args["weight_decay"]["value"] < 0:
            raise ProtocolError(
                "args.weight_decay.value must be >= 0",
                field="args.weight_decay.value",
                code="invalid_args",
            )
    if "grad_clip" in args:
        _wrapped_number(args, "grad_clip", allow_null=True)
        value = args["grad_clip"]["value"]
        if value is not None and value <= 0:
            raise ProtocolError(
                "args.grad_clip.value must be > 0 or null",
                field="args.grad_clip.value",
                code="invalid_args",
            )


def _validate_empty(args: dict) -> None:
    _reject_unknown_keys(args, set())


def _validate_load_checkpoint(args: dict) -> None:
    _reject_unknown_keys(args, {"uuid"})
    _require_string(args, "uuid")


def _validate_model_layer_operation(args: dict) -> None:
    _reject_unknown_keys(args, {"layer", "op"})
    _require_string(args, "layer")
    op = _require_string(args, "op")
    if op not in ("reset", "reinitialize"):
        raise ProtocolError(
            'args.op must be "reset" or "reinitialize"', field="args.op", code="invalid_args"
        )


def _validate_model_layer_parameter_update(args: dict) -> None:
    _reject_unknown_keys(args, {"layer", "param", "value"})
    _require_string(args, "layer")
    _require_string(args, "param")
    if "value" not in args or not _is_number(args["value"]):
        raise ProtocolError("args.value must be a number", field="args.value", code="invalid_args")


def _validate_update_dataset(args: dict) -> None:
    _reject_unknown_keys(args, {"source", "data_path"})
    _require_string(args, "source")
    _require_string(args, "data_path")


def _validate_update_dataset_runtime_hyperparameters(args: dict) -> None:
    _reject_unknown_keys(args, {"weights"})
    weights = args.get("weights")
    if not isinstance(weights, dict) or not weights:
        raise ProtocolError(
            "args.weights must be a non-empty object", field="args.weights", code="invalid_args"
        )
    for name, value in weights.items():
        if not _is_number(value) or value < 0:
            raise ProtocolError(
                f"args.weights.{name} must be a number >= 0",
                field=f"args.weights.{name}",
                code="invalid_args",
            )


class CommandRegistry:
    """Maps command kind -> args validator.

    New commands can be registered without touching the codec; decoding
    accepts exactly the registered kinds.
    """

    def __init__(self) -> None:
        self._validators: dict[str, Callable[[dict], None]] = {}

    def register(self, kind: str | Enum, validator: Callable[[dict], None]) -> None:
        self._validators[_as_value(kind)] = validator

    def knows(self, kind: str) -> bool:
        return kind in self._validators

    def kinds(self) -> list[str]:
        return sorted(self._validators)

    def validate_args(self, kind: str, args: dict) -> None:
        if kind not in self._validators:
            raise ProtocolError(f"unknown command {kind!r}", field="command", code="unknown_command")
        self._validators[kind](args)


def default_registry() -> CommandRegistry:
    registry = CommandRegistry()
    registry.register(CommandKind.UPDATE_OPTIMIZER, _validate_update_optimizer)
    registry.register(CommandKind.SAVE_CHECKPOINT, _validate_empty)
    registry.register(CommandKind.LOAD_CHECKPOINT, _validate_load_checkpoint)
    registry.register(CommandKind.PAUSE_TRAINING, _validate_empty)
    registry.register(CommandKind.RESUME_TRAINING, _validate_empty)
    registry.register(CommandKind.STOP_TRAINING, _validate_empty)
    registry.register(CommandKind.MODEL_LAYER_OPERATION, _validate_model_layer_operation)
    registry.register(
        CommandKind.MODEL_LAYER_PARAMETER_UPDATE, _validate_model_layer_parameter_update
    )
    registry.register(CommandKind.UPDATE_DATASET, _validate_update_dataset)
    registry.register(
        CommandKind.UPDATE_DATASET_RUNTIME_HYPERPARAMETERS,
        _validate_update_dataset_runtime_hyperparameters,
    )
    registry.register(CommandKind.DO_EVALUATE, _validate_empty)
    return registry


DEFAULT_REGISTRY = default_registry()


#: Queue category for each built-in command kind.
COMMAND_CATEGORIES: dict[str, str] = {
    CommandKind.UPDATE_OPTIMIZER: "optimizer",
    CommandKind.SAVE_CHECKPOINT: "checkpoint",
    CommandKind.LOAD_CHECKPOINT: "checkpoint",
    CommandKind.PAUSE_TRAINING: "control",
    CommandKind.RESUME_TRAINING: "control",
    CommandKind.STOP_TRAINING: "control",
    CommandKind.MODEL_LAYER_OPERATION: "model",
    CommandKind.MODEL_LAYER_PARAMETER_UPDATE: "model",
    CommandKind.UPDATE_DATASET: "dataset",
    CommandKind.UPDATE_DATASET_RUNTIME_HYPERPARAMETERS: "dataset",
    CommandKind.DO_EVALUATE: "evaluation",
}

#: Drain/application order at a step boundary: a stop or checkpoint revert
#: preempts tuning commands queued behind it.
CATEGORY_ORDER: tuple[str, ...] = (
    "control",
    "checkpoint",
    "optimizer",
    "model",
    "dataset",
    "evaluation",
)


def command_category(kind: str) -> str:
    return COMMAND_CATEGORIES.get(kind, "control")


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------


def encode_command(envelope: CommandEnvelope) -> bytes:
    """Serialize an envelope to canonical UTF-8 JSON (fixed key order)."""
    obj = {
        "command": _as_value(envelope.command),
        "args": envelope.args,
        "time": float(envelope.time),
        "uuid": envelope.uuid,
        "status": CommandStatus(envelope.status).value,
    }
    return json.dumps(obj, ensure_ascii=False).encode("utf-8")


def decode_command(raw: bytes | str, registry: CommandRegistry | None = None) -> CommandEnvelope:
    """Parse and validate a command message.

    Raises ProtocolError naming the offending field for malformed JSON,
    unknown commands, bad args, or missing/invalid fields. A missing
    ``status`` defaults to ``requested``.
    """
    registry = registry or DEFAULT_REGISTRY
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"message is not valid UTF-8: {exc}", code="parse") from exc
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"message is not valid JSON: {exc}", code="parse") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("command message must be a JSON object", code="parse")

    missing = [key for key in ("command", "args", "time", "uuid") if key not in obj]
    if missing:
        raise ProtocolError(
            f"missing required field(s): {', '.join(missing)}",
            field=missing[0],
            code="missing_field",
        )
    extra = [key for key in obj if key not in ("command", "args", "time", "uuid", "status")]
    if extra:
        raise ProtocolError(f"unexpected field {extra[0]!r}", field=extra[0], code="parse")

    kind = obj["command"]
    if not isinstance(kind, str):
        raise ProtocolError("command must be a string", field="command", code="parse")
    if not registry.knows(kind):
        raise ProtocolError(f"unknown command {kind!r}", field="command", code="unknown_command")

    args_raw = obj["args"]
    if not isinstance(args_raw, str):
        raise ProtocolError(
            "args must be a JSON string (double-encoded object)", field="args", code="invalid_args"
        )
    try:
        args_obj = json.loads(args_raw)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"args is not valid JSON: {exc}", field="args", code="invalid_args") from exc
    if not isinstance(args_obj, dict):
        raise ProtocolError("args must encode a JSON object", field="args", code="invalid_args")
    registry.validate_args(kind, args_obj)

    if not _is_number(obj["time"]):
        raise ProtocolError("time must be a unix timestamp number", field="time", code="parse")

    uuid_value = obj["uuid"]
    if not isinstance(uuid_value, str) or not uuid_value or len(uuid_value) > 128:
        raise ProtocolError(
            "uuid must be a non-empty string of at most 128 chars", field="uuid", code="parse"
        )

    status_raw = obj.get("status", CommandStatus.REQUESTED.value)
    try:
        status = CommandStatus(status_raw)
    except ValueError:
        raise ProtocolError(f"unknown status {status_raw!r}", field="status", code="parse") from None

    return CommandEnvelope(
        command=kind,
        args=args_raw,
        time=float(obj["time"]),
        uuid=uuid_value,
        status=status,
    )


def _deep_sorted(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _deep_sorted(value[k]) for k in sorted(value)}
    if isinstance(value, list):
        return [_deep_sorted(v) for v in value]
    return value


def encode_event(event: TrainingEvent) -> bytes:
    """Serialize an event to canonical UTF-8 JSON (payload keys sorted)."""
    _check_event(event)
    obj = {
        "event_type": _as_value(event.event_type),
        "step": event.step,
        "branch_id": event.branch_id,
        "time": float(event.time),
        "payload": _deep_sorted(event.payload),
    }
    return json.dumps(obj, ensure_ascii=False).encode("utf-8")


def decode_event(raw: bytes | str) -> TrainingEvent:
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"event is not valid JSON: {exc}", code="parse") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("event must be a JSON object", code="parse")
    missing = [k for k in ("event_type", "step", "branch_id", "time", "payload") if k not in obj]
    if missing:
        raise ProtocolError(
            f"missing required field(s): {', '.join(missing)}",
            field=missing[0],
            code="missing_field",
        )
    event = TrainingEvent(
        event_type=obj["event_type"],
        step=obj["step"],
        branch_id=obj["branch_id"],
        time=obj["time"],
        payload=obj["payload"],
    )
    _check_event(event)
    event.event_type = EventType(event.event_type).value
    event.time = float(event.time)
    return event


def _check_event(event: TrainingEvent) -> None:
    try:
        EventType(event.event_type)
    except ValueError:
        raise ProtocolError(
            f"unknown event_type {event.event_type!r}", field="event_type", code="unknown_event"
        ) from None
    if not isinstance(event.step, int) or isinstance(event.step, bool) or event.step < 0:
        raise ProtocolError("step must be a non-negative integer", field="step", code="parse")
    if not isinstance(event.branch_id, str) or not event.branch_id:
        raise ProtocolError("branch_id must be a non-empty string", field="branch_id", code="parse")
    if not _is_number(event.time):
        raise ProtocolError("time must be a number", field="time", code="parse")
    if not isinstance(event.payload, dict):
        raise ProtocolError("payload must be a JSON object", field="payload", code="parse")
