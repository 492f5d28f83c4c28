"""The interactive training loop.

One thread owns the TrainerState and steps the model, draining intervention
commands at every gradient-step boundary (the only place they take effect),
in category order: control, checkpoint, optimizer, model, dataset,
evaluation. Everything the loop consumes or emits goes through a
CommandChannel, so the same loop body serves live training (backed by the
ControlHub), scripted schedules, and deterministic replay.
"""

from __future__ import annotations

import json
import time as _time
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .config import RunConfig
from .dataset import DatasetError, InteractiveDataset, make_sin_dataset
from .nets import (
    ModelParams,
    OptimizerState,
    build_mlp,
    build_quadratic_model,
    clip_gradients,
    global_grad_norm,
    grads_finite,
    init_layer,
    mlp_evaluate,
    mlp_loss_grads,
    quadratic_loss_grads,
    sgd_momentum_step,
)
from .protocol import CommandEnvelope, CommandKind, CommandStatus, EventType, TrainingEvent
from .rng import Xoshiro256StarStar
from .state import RunStore, TrainerSnapshot, metric_record

OVERFLOW_MESSAGE = "Gradient overflow detected"


@dataclass
class TrainerState:
    step: int
    model: ModelParams
    optimizer: OptimizerState
    rng: Xoshiro256StarStar
    branch_id: str
    dataset: InteractiveDataset | None
    eval_cadence: int
    schedule_active: bool
    paused: bool = False
    stopping: bool = False
    faulted: bool = False

    def snapshot(self) -> TrainerSnapshot:
        self.optimizer.ensure_velocity(self.model)
        opt = self.optimizer
        return TrainerSnapshot(
            step=self.step,
            model=self.model.copy(),
            optimizer=OptimizerState(
                lr=opt.lr,
                momentum=opt.momentum,
                weight_decay=opt.weight_decay,
                grad_clip=opt.grad_clip,
                velocity={
                    name: {"weight": v["weight"].copy(), "bias": v["bias"].copy()}
                    for name, v in opt.velocity.items()
                },
            ),
            rng_state=self.rng.getstate(),
            dataset_weights=self.dataset.weights() if self.dataset is not None else None,
            schedule_active=self.schedule_active,
        )

    def install(self, snapshot: TrainerSnapshot, branch_id: str) -> str | None:
        """Adopt a restored snapshot; returns a warning message if dataset
        weights could not be applied to the current sources."""
        self.step = snapshot.step
        self.model = snapshot.model
        self.optimizer = snapshot.optimizer
        self.rng.setstate(snapshot.rng_state)
        self.schedule_active = snapshot.schedule_active
        self.branch_id = branch_id
        self.faulted = False
        warning = None
        if self.dataset is not None and snapshot.dataset_weights:
            try:
                self.dataset.set_mixture_weights(snapshot.dataset_weights)
            except DatasetError as exc:
                warning = f"checkpoint dataset weights not applied: {exc}"
        return warning


class CommandChannel(Protocol):
    """What the loop needs from the outside world."""

    def boundary(self, state: TrainerState, boundary_index: int) -> None: ...
    def next_due(self, state: TrainerState) -> CommandEnvelope | None: ...
    def resolve(self, uuid: str, terminal: CommandStatus, detail: str | None = None) -> None: ...
    def publish(self, event: TrainingEvent) -> None: ...
    def wait(self, timeout: float) -> None: ...
    def exhausted(self) -> bool: ...
    def set_run_status(self, status: str) -> None: ...


@dataclass(frozen=True)
class ScheduleEntry:
    at_step: int
    envelope: CommandEnvelope


def load_schedule(path) -> list[ScheduleEntry]:
    """Schedule file: JSON lines of {at_step, command, args}. Steps must be
    unique per command category."""
    from .protocol import command_category

    entries = []
    seen: set[tuple[int, str]] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            for key in ("at_step", "command"):
                if key not in obj:
                    raise ValueError(f"schedule line {i}: missing {key}")
            at_step = int(obj["at_step"])
            slot = (at_step, command_category(obj["command"]))
            if slot in seen:
                raise ValueError(
                    f"schedule line {i}: duplicate step {at_step} for category {slot[1]}"
                )
            seen.add(slot)
            envelope = CommandEnvelope.build(
                obj["command"], obj.get("args", {}), uuid=f"sched-{i:04d}-{obj['command']}"
            )
            entries.append(ScheduleEntry(at_step, envelope))
    entries.sort(key=lambda e: e.at_step)
    return entries


class LiveChannel:
    """Backed by the ControlHub, with an optional deterministic schedule
    injected trainer-side at exact step boundaries."""

    def __init__(self, hub, schedule: list[ScheduleEntry] | None = None):
        self.hub = hub
        self._schedule = sorted(schedule or [], key=lambda e: e.at_step)
        self._cursor = 0
        self._due: list[CommandEnvelope] = []

    def boundary(self, state: TrainerState, boundary_index: int) -> None:
        due = []
        while self._cursor < len(self._schedule) and self._schedule[self._cursor].at_step <= state.step:
            entry = self._schedule[self._cursor]
            self._cursor += 1
            due.append(self.hub.begin_scheduled(entry.envelope))
        due.extend(self.hub.drain_in_order())
        self._due = due

    def next_due(self, state: TrainerState) -> CommandEnvelope | None:
        if not self._due:
            return None
        return self._due.pop(0)

    def resolve(self, uuid, terminal, detail=None):
        self.hub.resolve_command(uuid, terminal, detail)

    def publish(self, event):
        self.hub.publish_event(event)

    def wait(self, timeout):
        self.hub.wait_for_commands(timeout)

    def exhausted(self) -> bool:
        return False  # live clients may always send more

    def set_run_status(self, status):
        self.hub.set_run_status(status)

    def finish(self, reason: str) -> None:
        self.hub.fail_pending(f"training ended: {reason}")


class HarnessChannel:
    """Hub-less channel for replay and in-process harnesses: metric events
    land in the store, everything else is tracked in memory."""

    def __init__(self, store: RunStore | None = None):
        self.store = store
        self.events: list[TrainingEvent] = []
        self.resolutions: list[tuple[str, str, str | None]] = []

    def boundary(self, state, boundary_index):
        pass

    def next_due(self, state):
        return None

    def resolve(self, uuid, terminal, detail=None):
        self.resolutions.append((uuid, CommandStatus(terminal).value, detail))

    def publish(self, event: TrainingEvent) -> None:
        self.events.append(event)
        if self.store is not None and event.event_type == EventType.METRIC.value:
            p = event.payload
            self.store.append_metric(
                event.branch_id,
                metric_record(
                    step=p.get("step", event.step),
                    train_loss=p["train_loss"],
                    grad_norm=p["grad_norm"],
                    lr=p["lr"],
                    val_loss=p.get("val_loss"),
                ),
            )

    def wait(self, timeout):
        pass

    def exhausted(self) -> bool:
        return True

    def set_run_status(self, status):
        pass


class ReplayChannel(HarnessChannel):
    """Feeds recorded interventions back at their recorded (branch, step)."""

    def __init__(self, entries, store: RunStore | None = None):
        super().__init__(store)
        self.entries = list(entries)
        self._cursor = 0

    def next_due(self, state):
        if self._cursor >= len(self.entries):
            return None
        entry = self.entries[self._cursor]
        if entry.branch_id == state.branch_id and entry.applied_at_step == state.step:
            self._cursor += 1
            return entry.envelope
        return None

    def exhausted(self) -> bool:
        return self._cursor >= len(self.entries)

    def leftover(self) -> int:
        return len(self.entries) - self._cursor


# ---------------------------------------------------------------------------
# State construction
# ---------------------------------------------------------------------------


def build_trainer_state(config: RunConfig) -> tuple[TrainerState, np.ndarray | None, np.ndarray | None]:
    """Deterministic construction order: model draws first, then data."""
    config.validate()
    rng = Xoshiro256StarStar(config.seed)
    if config.task == "quadratic":
        model = build_quadratic_model()
        dataset, val_x, val_y = None, None, None
    else:
        model = build_mlp(rng, config.hidden_width)
        dataset, val = make_sin_dataset(rng, config.train_points, config.val_points, config.noise_std)
        val_x = np.array([[ex.x] for ex in val])
        val_y = np.array([[ex.y] for ex in val])
    optimizer = OptimizerState(
        lr=config.lr0,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        grad_clip=config.grad_clip,
    )
    optimizer.ensure_velocity(model)
    state = TrainerState(
        step=0,
        model=model,
        optimizer=optimizer,
        rng=rng,
        branch_id="b0",
        dataset=dataset,
        eval_cadence=config.eval_cadence,
        schedule_active=(config.schedule == "linear"),
    )
    return state, val_x, val_y


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------


class TrainingLoop:
    def __init__(
        self,
        config: RunConfig,
        store: RunStore,
        channel: CommandChannel,
        record_batch_provenance: bool = False,
    ):
        config.validate()
        self.config = config
        self.store = store
        self.channel = channel
        self.state, self.val_x, self.val_y = build_trainer_state(config)
        self.end_reason: str | None = None
        # debug hook for provenance audits; never serialized
        self.batch_provenance: list[tuple[int, list[tuple[str, int]]]] | None = (
            [] if record_batch_provenance else None
        )

    # -- command application ---------------------------------------------------

    def apply_command(self, envelope: CommandEnvelope) -> None:
        state = self.state
        if state.stopping:
            self.channel.resolve(envelope.uuid, CommandStatus.FAILED, "training stopped")
            return
        # Durable before the command resolves.
        self.store.record_intervention(state.step, state.branch_id, envelope)
        try:
            args = envelope.args_object()
            handler = _HANDLERS[envelope.command]
        except KeyError:
            self.channel.resolve(
                envelope.uuid, CommandStatus.FAILED, f"unsupported command {envelope.command!r}"
            )
            return
        try:
            handler(self, envelope, args)
        except _CommandFailed as exc:
            self.channel.resolve(envelope.uuid, CommandStatus.FAILED, str(exc))

    def _resolve_ok(self, envelope: CommandEnvelope, detail: str | None = None) -> None:
        self.channel.resolve(envelope.uuid, CommandStatus.SUCCESS, detail)

    def _event(self, event_type: str, payload: dict, step: int | None = None) -> None:
        self.channel.publish(
            TrainingEvent(
                event_type=event_type,
                step=self.state.step if step is None else step,
                branch_id=self.state.branch_id,
                time=_time.time(),
                payload=payload,
            )
        )

    def _log(self, level: str, message: str) -> None:
        self._event(EventType.LOG.value, {"level": level, "message": message})

    # -- handlers ---------------------------------------------------------------

    def _cmd_update_optimizer(self, envelope, args):
        opt = self.state.optimizer
        applied = []
        if "lr" in args:
            value = float(args["lr"]["value"])
            if value <= 0:
                raise _CommandFailed("lr must be positive")
            opt.lr = value
            self.state.schedule_active = False  # manual control from here on
            applied.append(f"lr={value}")
        if "momentum" in args:
            value = float(args["momentum"]["value"])
            if not (0 <= value < 1):
                raise _CommandFailed("momentum must be in [0, 1)")
            opt.momentum = value
            applied.append(f"momentum={value}")
        if "weight_decay" in args:
            value = float(args["weight_decay"]["value"])
            if value < 0:
                raise _CommandFailed("weight_decay must be >= 0")
            opt.weight_decay = value
            applied.append(f"weight_decay={value}")
        if "grad_clip" in args:
            raw = args["grad_clip"]["value"]
            if raw is None:
                opt.grad_clip = None
                applied.append("grad_clip=off")
            else:
                value = float(raw)
                if value <= 0:
                    raise _CommandFailed("grad_clip must be positive or null")
                opt.grad_clip = value
                applied.append(f"grad_clip={value}")
        if not applied:
            raise _CommandFailed("no optimizer hyperparameters provided")
        self._resolve_ok(envelope, ", ".join(applied))

    def _cmd_save_checkpoint(self, envelope, args):
        ck = self.store.save_checkpoint(self.state.snapshot(), self.state.branch_id)
        self._event(
            EventType.CHECKPOINT_SAVED.value,
            {"uuid": ck.uuid, "step": ck.step, "branch_id": ck.branch_id},
        )
        self._resolve_ok(envelope, ck.uuid)

    def _cmd_load_checkpoint(self, envelope, args):
        from .state import CheckpointError

        try:
            snapshot, node = self.store.load_checkpoint(args["uuid"])
        except CheckpointError as exc:
            raise _CommandFailed(str(exc)) from exc
        warning = self.state.install(snapshot, node.branch_id)
        self._event(
            EventType.BRANCH_CREATED.value,
            {
                "branch_id": node.branch_id,
                "parent_branch_id": node.parent_branch_id,
                "fork_step": node.fork_step,
            },
        )
        if warning:
            self._log("warning", warning)
        self.channel.resolve(envelope.uuid, CommandStatus.COMPLETED, node.branch_id)
        self.channel.resolve(envelope.uuid, CommandStatus.SUCCESS)

    def _cmd_pause(self, envelope, args):
        self.state.paused = True
        self.channel.set_run_status("paused")
        self._resolve_ok(envelope)

    def _cmd_resume(self, envelope, args):
        self.state.paused = False
        self.state.faulted = False
        self.channel.set_run_status("training")
        self._resolve_ok(envelope)

    def _cmd_stop(self, envelope, args):
        self.state.stopping = True
        self._resolve_ok(envelope)

    def _cmd_model_layer_operation(self, envelope, args):
        state = self.state
        try:
            layer = state.model.layer(args["layer"])
        except KeyError:
            raise _CommandFailed(f"unknown layer {args['layer']!r}") from None
        if args["op"] == "reset":
            layer.weight = np.zeros_like(layer.weight)
            layer.bias = np.zeros_like(layer.bias)
        else:  # reinitialize
            init_layer(layer, state.rng)
        state.optimizer.ensure_velocity(state.model)
        velocity = state.optimizer.velocity[layer.name]
        velocity["weight"] = np.zeros_like(velocity["weight"])
        velocity["bias"] = np.zeros_like(velocity["bias"])
        self._resolve_ok(envelope, f"{args['op']} {layer.name}")

    def _cmd_model_layer_parameter_update(self, envelope, args):
        if args["param"] != "dropout_rate":
            raise _CommandFailed(f"unsupported layer parameter {args['param']!r}")
        value = float(args["value"])
        if not (0 <= value < 1):
            raise _CommandFailed("dropout_rate must be in [0, 1)")
        try:
            layer = self.state.model.layer(args["layer"])
        except KeyError:
            raise _CommandFailed(f"unknown layer {args['layer']!r}") from None
        layer.dropout_rate = value
        self._resolve_ok(envelope, f"{layer.name}.dropout_rate={value}")

    def _cmd_update_dataset(self, envelope, args):
        if self.state.dataset is None:
            raise _CommandFailed("this task has no dataset")
        try:
            with open(args["data_path"], "r", encoding="utf-8") as fh:
                rows = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise _CommandFailed(f"cannot read data_path: {exc}") from exc
        if not isinstance(rows, list):
            raise _CommandFailed("data file must contain a JSON array of {x, y} objects")
        try:
            self.state.dataset.update_data(args["source"], rows)
        except DatasetError as exc:
            raise _CommandFailed(str(exc)) from exc
        self._log("info", f"dataset source {args['source']!r} updated ({len(rows)} examples)")
        self._resolve_ok(envelope, f"{args['source']}: {len(rows)} examples")

    def _cmd_update_dataset_hp(self, envelope, args):
        if self.state.dataset is None:
            raise _CommandFailed("this task has no dataset")
        try:
            self.state.dataset.set_mixture_weights(
                {k: float(v) for k, v in args["weights"].items()}
            )
        except DatasetError as exc:
            raise _CommandFailed(str(exc)) from exc
        self._resolve_ok(envelope, json.dumps(self.state.dataset.weights(), sort_keys=True))

    def _cmd_do_evaluate(self, envelope, args):
        val_loss = self.evaluate()
        self._event(EventType.EVALUATION_RESULT.value, {"val_loss": val_loss, "step": self.state.step})
        self.channel.resolve(envelope.uuid, CommandStatus.COMPLETED, f"val_loss={val_loss}")
        self.channel.resolve(envelope.uuid, CommandStatus.SUCCESS)

    # -- numerics ---------------------------------------------------------------

    def evaluate(self) -> float:
        """Deterministic validation loss; never touches the trainer RNG."""
        state = self.state
        if self.config.task == "quadratic":
            loss, _ = quadratic_loss_grads(state.model, self.config.curvature)
            return loss
        return mlp_evaluate(state.model, self.val_x, self.val_y)

    def _draw_batch(self) -> tuple[np.ndarray, np.ndarray] | None:
        state = self.state
        if state.dataset is None:
            return None
        batch = state.dataset.next_batch(self.config.batch_size, state.rng)
        if self.batch_provenance is not None:
            self.batch_provenance.append(
                (state.step, [(ex.source, ex.generation) for ex in batch])
            )
        x = np.array([[ex.x] for ex in batch])
        y = np.array([[ex.y] for ex in batch])
        return x, y

    def _fault(self) -> None:
        state = self.state
        state.paused = True
        state.faulted = True
        self.channel.set_run_status("paused")
        self._log("warning", OVERFLOW_MESSAGE)

    def train_step(self) -> None:
        state, config = self.state, self.config
        if config.task == "quadratic":
            loss, grads = quadratic_loss_grads(state.model, config.curvature)
        else:
            batch = self._draw_batch()
            loss, grads = mlp_loss_grads(state.model, batch[0], batch[1], state.rng, training=True)

        if not np.isfinite(loss) or not grads_finite(grads):
            self._fault()
            return

        opt = state.optimizer
        if opt.grad_clip is not None:
            grads, pre_norm = clip_gradients(grads, opt.grad_clip)
        else:
            pre_norm = global_grad_norm(grads)

        if state.schedule_active and config.schedule == "linear":
            opt.lr = config.lr0 * (1.0 - state.step / config.total_steps)
        lr_used = opt.lr

        sgd_momentum_step(state.model, grads, opt)
        state.step += 1

        params_ok = state.model.all_finite()
        val_loss = None
        if (
            params_ok
            and state.eval_cadence > 0
            and state.step % state.eval_cadence == 0
        ):
            val_loss = self.evaluate()

        record = metric_record(state.step, loss, pre_norm, lr_used, val_loss)
        self._event(EventType.METRIC.value, dict(record))
        if val_loss is not None:
            self._event(EventType.EVALUATION_RESULT.value, {"val_loss": val_loss, "step": state.step})
        if not params_ok:
            self._fault()

    def run(self) -> TrainerState:
        state, config = self.state, self.config
        self.channel.set_run_status("training")
        self._log("info", f"training started: task={config.task} total_steps={config.total_steps}")
        boundary_index = 0
        reason = "completed"
        while True:
            self.channel.boundary(state, boundary_index)
            boundary_index += 1
            while True:
                envelope = self.channel.next_due(state)
                if envelope is None:
                    break
                self.apply_command(envelope)
            if state.stopping:
                reason = "stopped"
                break
            if state.step >= config.total_steps:
                reason = "completed"
                break
            if state.paused:
                if self.channel.exhausted():
                    # replay/harness feeds cannot un-pause us later
                    reason = "ended while paused (command feed exhausted)"
                    break
                self.channel.wait(0.02)
                continue
            self.train_step()
            if config.step_delay_s > 0:
                _time.sleep(config.step_delay_s)
        self._event(EventType.TRAINING_ENDED.value, {"reason": reason})
        self.channel.set_run_status("stopped")
        if isinstance(self.channel, LiveChannel):
            self.channel.finish(reason)
        self.end_reason = reason
        return state


class _CommandFailed(Exception):
    pass


_HANDLERS = {
    CommandKind.UPDATE_OPTIMIZER.value: TrainingLoop._cmd_update_optimizer,
    CommandKind.SAVE_CHECKPOINT.value: TrainingLoop._cmd_save_checkpoint,
    CommandKind.LOAD_CHECKPOINT.value: TrainingLoop._cmd_load_checkpoint,
    CommandKind.PAUSE_TRAINING.value: TrainingLoop._cmd_pause,
    CommandKind.RESUME_TRAINING.value: TrainingLoop._cmd_resume,
    CommandKind.STOP_TRAINING.value: TrainingLoop._cmd_stop,
    CommandKind.MODEL_LAYER_OPERATION.value: TrainingLoop._cmd_model_layer_operation,
    CommandKind.MODEL_LAYER_PARAMETER_UPDATE.value: TrainingLoop._cmd_model_layer_parameter_update,
    CommandKind.UPDATE_DATASET.value: TrainingLoop._cmd_update_dataset,
    CommandKind.UPDATE_DATASET_RUNTIME_HYPERPARAMETERS.value: TrainingLoop._cmd_update_dataset_hp,
    CommandKind.DO_EVALUATE.value: TrainingLoop._cmd_do_evaluate,
}
