"""Deterministic replay: re-run a recorded trajectory from its intervention
log and verify the metric logs match bitwise."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .state import InterventionEntry, RunStore, StateError, load_intervention_log
from .trainer import ReplayChannel, TrainingLoop


class ReplayConfigMismatch(ValueError):
    pass


def check_replay_config(config: RunConfig, recorded_fingerprint: dict) -> None:
    current = config.fingerprint()
    if current == recorded_fingerprint:
        return
    diffs = []
    for key in sorted(set(current) | set(recorded_fingerprint)):
        a, b = current.get(key), recorded_fingerprint.get(key)
        if a != b:
            diffs.append(f"{key}: run={a!r} recorded={b!r}")
    raise ReplayConfigMismatch("config does not match the recorded run: " + "; ".join(diffs))


def replay(
    config: RunConfig,
    entries: list[InterventionEntry],
    recorded_fingerprint: dict,
    out_dir: str | Path,
) -> RunStore:
    """Re-execute the run, injecting each logged command at its recorded
    (branch, step). Returns the store holding the replayed metric logs."""
    check_replay_config(config, recorded_fingerprint)
    store = RunStore(out_dir, config)
    channel = ReplayChannel(entries, store)
    loop = TrainingLoop(config, store, channel)
    loop.run()
    store.close()
    if channel.leftover():
        raise StateError(
            f"{channel.leftover()} logged intervention(s) were never reached during replay"
        )
    return store


@dataclass
class ReplayDiff:
    identical: bool
    details: list[str]


def diff_metric_logs(original_dir: Path, replayed_dir: Path) -> ReplayDiff:
    """Bytewise comparison of every per-branch metric log."""
    details: list[str] = []
    orig = {p.name: p for p in sorted((original_dir / "metrics").glob("*.jsonl"))}
    rep = {p.name: p for p in sorted((replayed_dir / "metrics").glob("*.jsonl"))}
    for name in sorted(set(orig) | set(rep)):
        if name not in rep:
            details.append(f"{name}: missing from replay")
            continue
        if name not in orig:
            details.append(f"{name}: only present in replay")
            continue
        a, b = orig[name].read_bytes(), rep[name].read_bytes()
        if a != b:
            line = _first_differing_line(a, b)
            details.append(f"{name}: differs at line {line}")
    return ReplayDiff(identical=not details, details=details)


def _first_differing_line(a: bytes, b: bytes) -> int:
    for i, (la, lb) in enumerate(zip(a.splitlines(), b.splitlines()), start=1):
        if la != lb:
            return i
    return min(len(a.splitlines()), len(b.splitlines())) + 1


def replay_run_dir(run_dir: str | Path, out_dir: str | Path) -> ReplayDiff:
    """Replay a recorded run directory and diff against its own metrics."""
    run_dir = Path(run_dir)
    config = RunConfig.from_file(run_dir / "config.json")
    interventions = run_dir / "interventions.jsonl"
    if interventions.exists():
        fingerprint, entries = load_intervention_log(interventions)
    else:
        fingerprint, entries = config.fingerprint(), []
    replay(config, entries, fingerprint, out_dir)
    return diff_metric_logs(run_dir, Path(out_dir))
