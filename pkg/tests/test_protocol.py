import json
import random

import pytest

from livetrain.protocol import (
    CATEGORY_ORDER,
    CommandEnvelope,
    CommandKind,
    CommandRegistry,
    CommandStatus,
    EventType,
    ProtocolError,
    TrainingEvent,
    command_category,
    decode_command,
    decode_event,
    default_registry,
    encode_command,
    encode_event,
    validate_transition,
)

# The two published example messages, verbatim content.
UPDATE_OPTIMIZER_MSG = {
    "command": "update_optimizer",
    "args": '{"lr": {"value": 1e-5}}',
    "time": 1754812800.123,
    "uuid": "cmd-0001",
    "status": "requested",
}
LOAD_CHECKPOINT_MSG = {
    "command": "load_checkpoint",
    "args": '{"uuid": "ck0001-b0-s100"}',
    "time": 1754812801.5,
    "uuid": "cmd-0002",
    "status": "requested",
}


def test_decode_update_optimizer_example():
    env = decode_command(json.dumps(UPDATE_OPTIMIZER_MSG).encode())
    assert env.command == CommandKind.UPDATE_OPTIMIZER
    assert env.args_object() == {"lr": {"value": 1e-5}}
    assert env.uuid == "cmd-0001"
    assert env.status == CommandStatus.REQUESTED


def test_decode_load_checkpoint_example():
    env = decode_command(json.dumps(LOAD_CHECKPOINT_MSG).encode())
    assert env.command == CommandKind.LOAD_CHECKPOINT
    assert env.args_object() == {"uuid": "ck0001-b0-s100"}


def test_encode_preserves_double_encoded_args():
    env = decode_command(json.dumps(UPDATE_OPTIMIZER_MSG).encode())
    raw = encode_command(env)
    obj = json.loads(raw)
    assert set(obj) == {"command", "args", "time", "uuid", "status"}
    assert isinstance(obj["args"], str)
    assert json.loads(obj["args"]) == {"lr": {"value": 1e-5}}
    assert '"args": "{\\"lr\\": {\\"value\\": 1e-5}}"' in raw.decode()


def test_roundtrip_identity():
    env = CommandEnvelope.build(
        CommandKind.UPDATE_OPTIMIZER, {"lr": {"value": 3e-4}}, time=123.456, uuid="u1"
    )
    assert decode_command(encode_command(env)) == env


def test_missing_status_defaults_to_requested():
    msg = dict(UPDATE_OPTIMIZER_MSG)
    del msg["status"]
    env = decode_command(json.dumps(msg))
    assert env.status == CommandStatus.REQUESTED


def test_empty_object_lists_missing_fields():
    with pytest.raises(ProtocolError) as exc:
        decode_command(b"{}")
    assert exc.value.code == "missing_field"
    assert "command" in str(exc.value)


def test_malformed_json_is_parse_error():
    with pytest.raises(ProtocolError) as exc:
        decode_command(b"{not json")
    assert exc.value.code == "parse"


def test_unknown_command_rejected():
    msg = dict(UPDATE_OPTIMIZER_MSG, command="warp_speed")
    with pytest.raises(ProtocolError) as exc:
        decode_command(json.dumps(msg))
    assert exc.value.code == "unknown_command"
    assert exc.value.field == "command"


def test_args_must_be_double_encoded_object():
    msg = dict(UPDATE_OPTIMIZER_MSG)
    msg["args"] = {"lr": {"value": 1e-5}}  # nested object instead of string
    with pytest.raises(ProtocolError) as exc:
        decode_command(json.dumps(msg))
    assert exc.value.field == "args"

    msg["args"] = '"just a string"'
    with pytest.raises(ProtocolError) as exc:
        decode_command(json.dumps(msg))
    assert exc.value.field == "args"


def test_registry_extension_accepts_new_kind():
    registry = default_registry()
    registry.register("custom_probe", lambda args: None)
    msg = dict(UPDATE_OPTIMIZER_MSG, command="custom_probe", args="{}")
    env = decode_command(json.dumps(msg), registry)
    assert env.command == "custom_probe"
    # the default registry still refuses it
    with pytest.raises(ProtocolError):
        decode_command(json.dumps(msg))


@pytest.mark.parametrize(
    "kind,args,field",
    [
        ("update_optimizer", {}, "args"),
        ("update_optimizer", {"lr": {"value": -1}}, "args.lr.value"),
        ("update_optimizer", {"lr": 1e-5}, "args.lr"),
        ("update_optimizer", {"momentum": {"value": 1.0}}, "args.momentum.value"),
        ("update_optimizer", {"weight_decay": {"value": -0.1}}, "args.weight_decay.value"),
        ("update_optimizer", {"grad_clip": {"value": 0}}, "args.grad_clip.value"),
        ("update_optimizer", {"beta": {"value": 1}}, "args.beta"),
        ("load_checkpoint", {}, "args.uuid"),
        ("load_checkpoint", {"uuid": 7}, "args.uuid"),
        ("pause_training", {"extra": 1}, "args.extra"),
        ("model_layer_operation", {"layer": "h1", "op": "melt"}, "args.op"),
        ("model_layer_operation", {"op": "reset"}, "args.layer"),
        ("model_layer_parameter_update", {"layer": "h1", "param": "dropout_rate"}, "args.value"),
        ("update_dataset", {"source": "s"}, "args.data_path"),
        ("update_dataset_runtime_hyperparameters", {"weights": {}}, "args.weights"),
        ("update_dataset_runtime_hyperparameters", {"weights": {"a": -1}}, "args.weights.a"),
    ],
)
def test_args_schema_violations(kind, args, field):
    msg = dict(UPDATE_OPTIMIZER_MSG, command=kind, args=json.dumps(args))
    with pytest.raises(ProtocolError) as exc:
        decode_command(json.dumps(msg))
    assert exc.value.field == field


def test_grad_clip_null_allowed():
    msg = dict(UPDATE_OPTIMIZER_MSG, args=json.dumps({"grad_clip": {"value": None}}))
    env = decode_command(json.dumps(msg))
    assert env.args_object() == {"grad_clip": {"value": None}}


# ---------------------------------------------------------------------------
# Lifecycle
# ---------------------------------------------------------------------------

LIFECYCLE_EDGES = {
    ("requested", "pending"),
    ("pending", "running"),
    ("pending", "failed"),
    ("running", "success"),
    ("running", "failed"),
    ("running", "completed"),
    ("completed", "success"),
    ("completed", "failed"),
}


def test_transition_examples():
    assert validate_transition(CommandStatus.REQUESTED, CommandStatus.PENDING)
    assert not validate_transition(CommandStatus.SUCCESS, CommandStatus.RUNNING)


def test_exhaustive_transition_table():
    # All 36 ordered pairs, checked against the frozen edge list.
    for a in CommandStatus:
        for b in CommandStatus:
            expected = (a.value, b.value) in LIFECYCLE_EDGES
            assert validate_transition(a, b) is expected, (a, b)


def test_lifecycle_dag_has_two_sinks_and_no_cycles():
    outgoing = {s: [t for t in CommandStatus if validate_transition(s, t)] for s in CommandStatus}
    sinks = {s for s, outs in outgoing.items() if not outs}
    assert sinks == {CommandStatus.SUCCESS, CommandStatus.FAILED}
    # every path from `requested` terminates (finite DAG, no revisits)
    stack = [(CommandStatus.REQUESTED, (CommandStatus.REQUESTED,))]
    while stack:
        node, path = stack.pop()
        for nxt in outgoing[node]:
            assert nxt not in path, f"cycle via {path + (nxt,)}"
            stack.append((nxt, path + (nxt,)))


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------


def test_metric_event_roundtrip():
    event = TrainingEvent(
        event_type="metric",
        step=10,
        branch_id="b0",
        time=1754812802.0,
        payload={"train_loss": 0.5, "grad_norm": 1.2, "lr": 1e-5, "step": 10},
    )
    assert decode_event(encode_event(event)) == event


def test_negative_step_rejected():
    event = TrainingEvent("metric", -1, "b0", 1.0, {})
    with pytest.raises(ProtocolError) as exc:
        encode_event(event)
    assert exc.value.field == "step"


def test_unknown_event_type_rejected():
    raw = json.dumps(
        {"event_type": "mystery", "step": 0, "branch_id": "b0", "time": 1.0, "payload": {}}
    )
    with pytest.raises(ProtocolError) as exc:
        decode_event(raw)
    assert exc.value.field == "event_type"


# ---------------------------------------------------------------------------
# Fuzz round-trips (seeded, deterministic)
# ---------------------------------------------------------------------------

ARG_EXAMPLES = {
    "update_optimizer": [
        {"lr": {"value": 1e-5}},
        {"momentum": {"value": 0.9}},
        {"weight_decay": {"value": 0.01}},
        {"grad_clip": {"value": 2.5}},
        {"grad_clip": {"value": None}},
        {"lr": {"value": 0.5}, "momentum": {"value": 0.0}},
    ],
    "save_checkpoint": [{}],
    "load_checkpoint": [{"uuid": "ck0001-b0-s10"}],
    "pause_training": [{}],
    "resume_training": [{}],
    "stop_training": [{}],
    "model_layer_operation": [
        {"layer": "h1", "op": "reset"},
        {"layer": "out", "op": "reinitialize"},
    ],
    "model_layer_parameter_update": [{"layer": "h1", "param": "dropout_rate", "value": 0.25}],
    "update_dataset": [{"source": "deployed", "data_path": "/tmp/new.json"}],
    "update_dataset_runtime_hyperparameters": [{"weights": {"a": 3, "b": 1.0}}],
    "do_evaluate": [{}],
}


def random_envelope(rnd: random.Random) -> CommandEnvelope:
    kind = rnd.choice(list(ARG_EXAMPLES))
    args = rnd.choice(ARG_EXAMPLES[kind])
    return CommandEnvelope(
        command=kind,
        args=json.dumps(args),
        time=rnd.uniform(1e9, 2e9),
        uuid=f"uuid-{rnd.getrandbits(64):016x}",
        status=rnd.choice(list(CommandStatus)),
    )


def test_fuzz_envelope_roundtrip_1000():
    rnd = random.Random(0xC0FFEE)
    for _ in range(1000):
        env = random_envelope(rnd)
        raw = encode_command(env)
        decoded = decode_command(raw)
        assert decoded == env
        assert encode_command(decoded) == raw  # byte-for-byte re-encode


def test_fuzz_event_roundtrip():
    rnd = random.Random(0xFEED)
    payload_makers = {
        "metric": lambda: {
            "train_loss": rnd.uniform(0, 10),
            "grad_norm": rnd.uniform(0, 100),
            "lr": rnd.uniform(1e-6, 1.0),
            "step": rnd.randrange(10_000),
        },
        "log": lambda: {"level": "warning", "message": "Gradient overflow detected"},
        "command_status": lambda: {"uuid": "u", "status": "success"},
        "checkpoint_saved": lambda: {"uuid": "ck", "step": 5, "branch_id": "b0"},
        "branch_created": lambda: {"branch_id": "b0.1", "parent_branch_id": "b0", "fork_step": 5},
        "evaluation_result": lambda: {"val_loss": rnd.uniform(0, 1), "step": 3},
        "training_ended": lambda: {"reason": "completed"},
    }
    for _ in range(500):
        etype = rnd.choice(list(payload_makers))
        event = TrainingEvent(
            event_type=etype,
            step=rnd.randrange(100_000),
            branch_id=rnd.choice(["b0", "b0.1", "b0.2.1"]),
            time=rnd.uniform(1e9, 2e9),
            payload=payload_makers[etype](),
        )
        raw = encode_event(event)
        decoded = decode_event(raw)
        assert decoded == event
        assert encode_event(decoded) == raw


def test_every_kind_has_category_and_schema():
    registry = default_registry()
    for kind in CommandKind:
        assert registry.knows(kind.value)
        assert command_category(kind.value) in CATEGORY_ORDER
        for args in ARG_EXAMPLES[kind.value]:
            registry.validate_args(kind.value, args)  # must not raise


def test_event_types_closed_set():
    assert {e.value for e in EventType} == {
        "metric",
        "log",
        "command_status",
        "checkpoint_saved",
        "branch_created",
        "evaluation_result",
        "training_ended",
    }
