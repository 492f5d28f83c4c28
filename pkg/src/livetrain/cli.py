"""Operator entry points.

Exit codes: 0 success, 1 validation error, 2 connection error,
3 replay mismatch.
"""

from __future__ import annotations

import json
import logging
import queue
import sys
import threading
import time
from pathlib import Path

import click

from .agent import AgentLoop, LlmClient, LlmPolicy, RulePolicy, default_template
from .client import ServerClient, ServerRejection, ServerUnavailable
from .config import RunConfig
from .protocol import CommandEnvelope, CommandKind, EventType, ProtocolError, default_registry
from .replay import replay_run_dir
from .server import ControlHub, build_app
from .state import RunStore, StateError
from .trainer import LiveChannel, TrainingLoop, load_schedule

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONNECTION = 2
EXIT_REPLAY_MISMATCH = 3


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def cli(verbose: bool) -> None:
    """Interactive training control server, clients, and replay tools."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def main() -> None:
    # every flag gets an environment-variable twin, e.g. LIVETRAIN_SERVE_PORT
    cli(auto_envvar_prefix="LIVETRAIN")


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--port", default=7700, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--run-dir", default="livetrain-run", show_default=True)
@click.option("--schedule", "schedule_path", type=click.Path(exists=True), default=None,
              help="JSON-lines {at_step, command, args} applied at exact step boundaries.")
@click.option("--linger", is_flag=True, help="Keep serving after training ends (stop with Ctrl-C).")
def serve(config_path, port, host, run_dir, schedule_path, linger):
    """Run the control server plus the training loop for one run."""
    try:
        config = RunConfig.from_file(config_path)
        store = RunStore(run_dir, config)
        schedule = load_schedule(schedule_path) if schedule_path else None
    except (ValueError, OSError) as exc:
        _fail(EXIT_VALIDATION, str(exc))
        return

    import uvicorn

    hub = ControlHub(store)
    loop = TrainingLoop(config, store, LiveChannel(hub, schedule))
    app = build_app(hub)

    class GracefulServer(uvicorn.Server):
        def handle_exit(self, sig, frame):
            # operator interrupt: stop the trainer, let sessions drain
            loop.state.stopping = True
            hub.begin_shutdown()
            super().handle_exit(sig, frame)

        async def shutdown(self, sockets=None):
            # before closing connections, let the trainer finish its final
            # boundary (training_ended) and let websocket sessions drain;
            # drained sessions close themselves once the run is stopped
            import asyncio

            loop.state.stopping = True
            hub.begin_shutdown()
            deadline = time.monotonic() + 5.0
            while trainer_thread.is_alive() and time.monotonic() < deadline:
                await asyncio.sleep(0.02)
            while hub.subscriber_count() > 0 and time.monotonic() < deadline:
                await asyncio.sleep(0.02)
            await super().shutdown(sockets=sockets)

    server = GracefulServer(
        uvicorn.Config(app, host=host, port=port, log_level="warning",
                       timeout_graceful_shutdown=5)
    )

    trainer_thread = threading.Thread(target=loop.run, name="trainer", daemon=True)

    def watch_trainer():
        trainer_thread.join()
        if not linger:
            hub.begin_shutdown()
            time.sleep(0.2)  # let final events reach subscribers
            server.should_exit = True

    watcher = threading.Thread(target=watch_trainer, daemon=True)
    trainer_thread.start()
    watcher.start()
    try:
        server.run()
    except KeyboardInterrupt:
        pass  # uvicorn re-raises the interrupt after its graceful shutdown
    except (OSError, SystemExit) as exc:
        loop.state.stopping = True
        trainer_thread.join(timeout=5)
        _fail(EXIT_CONNECTION, f"server failed: {exc}")
        return
    # server exited (trainer done, or operator interrupt): stop the loop
    loop.state.stopping = True
    trainer_thread.join(timeout=10)
    store.close()
    hub.close()
    click.echo(f"run complete: {loop.end_reason or 'interrupted'} (run dir: {run_dir})")
    sys.exit(EXIT_OK)


# ---------------------------------------------------------------------------
# send
# ---------------------------------------------------------------------------


def _parse_kv_args(kind: str, pairs: tuple[str, ...]) -> dict:
    args: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if kind == CommandKind.UPDATE_OPTIMIZER.value and not isinstance(value, dict):
            value = {"value": value}
        args[key] = value
    return args


@cli.command()
@click.argument("url")
@click.argument("kind")
@click.argument("pairs", nargs=-1)
@click.option("--wait/--no-wait", default=True, show_default=True,
              help="Wait for the command's terminal status on the event stream.")
@click.option("--json", "json_output", is_flag=True, help="Machine-readable output.")
@click.option("--timeout", default=60.0, show_default=True)
def send(url, kind, pairs, wait, json_output, timeout):
    """Submit one intervention command, e.g.:

    livetrain send http://127.0.0.1:7700 update_optimizer lr=1e-5
    """
    if not default_registry().knows(kind):
        _fail(EXIT_VALIDATION, f"unknown command {kind!r}")
    try:
        args = _parse_kv_args(kind, pairs)
        envelope = CommandEnvelope.build(kind, args)
    except ValueError as exc:
        _fail(EXIT_VALIDATION, str(exc))
        return

    client = ServerClient(url)
    events: queue.Queue = queue.Queue()
    if wait:
        def pump():
            try:
                for event in client.events():
                    events.put(event)
            except ServerUnavailable as exc:
                events.put(exc)
            events.put(None)

        threading.Thread(target=pump, daemon=True).start()
        # the stream always starts with the snapshot replay; wait for it
        first = events.get(timeout=10)
        if first is None or isinstance(first, Exception):
            _fail(EXIT_CONNECTION, f"cannot open event stream to {url}")

    try:
        resp = client.submit_envelope(envelope)
    except ServerUnavailable as exc:
        _fail(EXIT_CONNECTION, str(exc))
        return
    except ServerRejection as exc:
        if json_output:
            click.echo(json.dumps({"rejected": True, **exc.body}))
        else:
            click.echo(f"rejected: {exc.body.get('error')}", err=True)
        sys.exit(EXIT_VALIDATION)
        return

    result = {"uuid": resp["uuid"], "status": resp["status"]}
    if wait:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            try:
                event = events.get(timeout=max(0.1, deadline - time.monotonic()))
            except queue.Empty:
                break
            if event is None or isinstance(event, Exception):
                _fail(EXIT_CONNECTION, "event stream lost while waiting")
            if (
                event.event_type == EventType.COMMAND_STATUS.value
                and event.payload.get("uuid") == resp["uuid"]
            ):
                result["status"] = event.payload["status"]
                if "detail" in event.payload:
                    result["detail"] = event.payload["detail"]
                if result["status"] in ("success", "failed"):
                    break
    client.close()
    if json_output:
        click.echo(json.dumps(result))
    else:
        detail = f" ({result['detail']})" if result.get("detail") else ""
        click.echo(f"{result['uuid']} {result['status']}{detail}")
    sys.exit(EXIT_OK)


# ---------------------------------------------------------------------------
# agent
# ---------------------------------------------------------------------------


@cli.command()
@click.argument("url")
@click.option("--policy", "policy_name", default="rule", show_default=True,
              help="rule | llm")
@click.option("--cadence", default=10, show_default=True,
              help="Decide every N optimizer steps.")
@click.option("--template", "template_path", type=click.Path(exists=True), default=None)
@click.option("--llm-endpoint", default=None, help="Chat-completions URL (or LIVETRAIN_LLM_ENDPOINT).")
@click.option("--llm-model", default="o4-mini", show_default=True)
def agent(url, policy_name, cadence, template_path, llm_endpoint, llm_model):
    """Run the automated intervention agent against a live server."""
    if cadence <= 0:
        _fail(EXIT_VALIDATION, "cadence must be a positive number of steps")
    if policy_name == "rule":
        policy = RulePolicy()
    elif policy_name == "llm":
        import os

        endpoint = llm_endpoint or os.environ.get("LIVETRAIN_LLM_ENDPOINT")
        if not endpoint:
            _fail(EXIT_VALIDATION, "llm policy needs --llm-endpoint or LIVETRAIN_LLM_ENDPOINT")
        template = Path(template_path).read_text(encoding="utf-8") if template_path else default_template()
        policy = LlmPolicy(LlmClient(endpoint, llm_model), template)
    else:
        _fail(EXIT_VALIDATION, f"unknown policy {policy_name!r}")
        return

    client = ServerClient(url)
    loop = AgentLoop(client, policy, cadence=cadence)
    try:
        reason = loop.run()
    except ServerUnavailable as exc:
        _fail(EXIT_CONNECTION, str(exc))
        return
    finally:
        client.close()
    click.echo(f"training ended ({reason}); agent made {len(loop.decisions)} decisions")
    sys.exit(EXIT_OK)


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


@cli.command()
@click.argument("run_dir", type=click.Path(exists=True))
@click.option("--out", "out_dir", default=None, help="Where to write the replayed run.")
@click.option("--json", "json_output", is_flag=True)
def replay(run_dir, out_dir, json_output):
    """Re-execute a recorded run and diff its metric logs bitwise."""
    import tempfile

    target = out_dir or tempfile.mkdtemp(prefix="livetrain-replay-")
    try:
        diff = replay_run_dir(run_dir, target)
    except (ValueError, OSError) as exc:
        _fail(EXIT_VALIDATION, str(exc))
        return
    if json_output:
        click.echo(json.dumps({"identical": diff.identical, "details": diff.details,
                               "replayed_to": str(target)}))
    else:
        if diff.identical:
            click.echo("replay identical")
        else:
            for line in diff.details:
                click.echo(f"mismatch: {line}", err=True)
    sys.exit(EXIT_OK if diff.identical else EXIT_REPLAY_MISMATCH)


# ---------------------------------------------------------------------------
# schedule (live best-effort client; for exact-step injection use serve --schedule)
# ---------------------------------------------------------------------------


@cli.command()
@click.argument("url")
@click.option("--file", "schedule_path", required=True, type=click.Path(exists=True))
def schedule(url, schedule_path):
    """Submit a schedule file's commands as their steps pass on a live run."""
    try:
        entries = load_schedule(schedule_path)
    except (ValueError, OSError) as exc:
        _fail(EXIT_VALIDATION, str(exc))
        return
    client = ServerClient(url)
    cursor = 0
    try:
        for event in client.events():
            if event.event_type == EventType.TRAINING_ENDED.value:
                break
            if event.event_type != EventType.METRIC.value or event.time == 0.0:
                continue
            step = event.payload.get("step", event.step)
            while cursor < len(entries) and entries[cursor].at_step <= step:
                entry = entries[cursor]
                cursor += 1
                try:
                    client.submit_envelope(entry.envelope)
                except ServerRejection as exc:
                    click.echo(f"rejected at step {step}: {exc}", err=True)
            if cursor >= len(entries):
                break
    except ServerUnavailable as exc:
        _fail(EXIT_CONNECTION, str(exc))
        return
    finally:
        client.close()
    if cursor < len(entries):
        click.echo(f"warning: {len(entries) - cursor} schedule entries never fired", err=True)
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
