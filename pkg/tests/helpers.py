"""Shared harness channels and end-to-end fixtures for the test suite."""

import json
import signal
import socket
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import httpx

from livetrain.protocol import CommandEnvelope
from livetrain.trainer import HarnessChannel


class StepChannel(HarnessChannel):
    """Fires each (at_step, envelope) entry at the first boundary whose step
    is >= at_step, in entry order (same semantics as a serve-side schedule)."""

    def __init__(self, entries: list[tuple[int, CommandEnvelope]], store=None):
        super().__init__(store)
        self._entries = sorted(entries, key=lambda e: e[0])
        self._cursor = 0
        self._due: list[CommandEnvelope] = []

    def boundary(self, state, boundary_index):
        due = []
        while self._cursor < len(self._entries) and self._entries[self._cursor][0] <= state.step:
            due.append(self._entries[self._cursor][1])
            self._cursor += 1
        self._due = due

    def next_due(self, state):
        if self._due:
            return self._due.pop(0)
        return None

    def exhausted(self):
        return self._cursor >= len(self._entries) and not self._due


class BoundaryChannel(HarnessChannel):
    """Fires entries keyed by boundary index; step may not advance while
    paused, boundary index always does."""

    def __init__(self, by_boundary: dict[int, list[CommandEnvelope]], store=None):
        super().__init__(store)
        self._by_boundary = {k: list(v) for k, v in by_boundary.items()}
        self._due: list[CommandEnvelope] = []

    def boundary(self, state, boundary_index):
        self._due = self._by_boundary.pop(boundary_index, [])

    def next_due(self, state):
        if self._due:
            return self._due.pop(0)
        return None

    def exhausted(self):
        return not self._by_boundary and not self._due


# ---------------------------------------------------------------------------
# End-to-end fixtures: a real serve subprocess
# ---------------------------------------------------------------------------


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def write_config(tmp_path: Path, **kw) -> Path:
    base = dict(task="quadratic", total_steps=50, seed=0, lr0=1e-3, curvature=500.0)
    base.update(kw)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(base))
    return path


def write_schedule(tmp_path: Path, entries) -> Path:
    path = tmp_path / "schedule.jsonl"
    path.write_text("\n".join(json.dumps(e) for e in entries) + "\n")
    return path


def wait_for_server(url: str, timeout: float = 15.0) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            if httpx.get(f"{url}/state", timeout=1.0).status_code == 200:
                return
        except httpx.TransportError:
            time.sleep(0.05)
    raise TimeoutError(f"server at {url} never came up")


@contextmanager
def serve_proc(config_path: Path, run_dir: Path, schedule: Path | None = None,
               linger: bool = False):
    port = free_port()
    cmd = [
        sys.executable, "-m", "livetrain.cli", "serve",
        "--config", str(config_path), "--port", str(port),
        "--run-dir", str(run_dir),
    ]
    if schedule:
        cmd += ["--schedule", str(schedule)]
    if linger:
        cmd += ["--linger"]
    proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True)
    url = f"http://127.0.0.1:{port}"
    try:
        wait_for_server(url)
        yield url, proc
    finally:
        if proc.poll() is None:
            proc.send_signal(signal.SIGINT)
            try:
                proc.wait(timeout=15)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()


def read_metrics(run_dir: Path, branch="b0"):
    path = run_dir / "metrics" / f"{branch}.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines() if line]
