"""Durable run state: checkpoints, the branch tree, the intervention log,
and per-branch metric logs.

Layout under one run directory::

    config.json                 run configuration
    commands.jsonl              command history (one line per status change)
    interventions.jsonl         header line + one line per applied command
    checkpoints/<uuid>.ckpt     self-describing checkpoint files
    metrics/<branch_id>.jsonl   one line per optimizer step

Checkpoint files carry a header (format version, config hash, checksum) and
a canonically serialized body whose float64 arrays are base64-encoded
little-endian bytes, so restore -> re-serialize is byte-identical.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time as _time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, IO

import numpy as np

from .config import RunConfig
from .nets import Layer, ModelParams, OptimizerState
from .protocol import CommandEnvelope, encode_command

CHECKPOINT_FORMAT_VERSION = 1
ROOT_BRANCH = "b0"


class CheckpointError(ValueError):
    pass


class StateError(ValueError):
    pass


@dataclass(frozen=True)
class BranchNode:
    branch_id: str
    parent_branch_id: str | None
    fork_step: int
    fork_checkpoint_uuid: str | None
    created_at: float

    def to_dict(self) -> dict:
        return {
            "branch_id": self.branch_id,
            "parent_branch_id": self.parent_branch_id,
            "fork_step": self.fork_step,
            "fork_checkpoint_uuid": self.fork_checkpoint_uuid,
            "created_at": self.created_at,
        }


@dataclass(frozen=True)
class Checkpoint:
    uuid: str
    branch_id: str
    step: int
    created_at: float
    path: Path

    def to_dict(self) -> dict:
        return {
            "uuid": self.uuid,
            "branch_id": self.branch_id,
            "step": self.step,
            "created_at": self.created_at,
        }


@dataclass
class TrainerSnapshot:
    """Everything needed to resume training bit-exactly."""

    step: int
    model: ModelParams
    optimizer: OptimizerState
    rng_state: tuple[int, int, int, int]
    dataset_weights: dict[str, float] | None
    schedule_active: bool


@dataclass(frozen=True)
class InterventionEntry:
    applied_at_step: int
    branch_id: str
    envelope: CommandEnvelope


# ---------------------------------------------------------------------------
# Canonical serialization helpers
# ---------------------------------------------------------------------------


def _canonical(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )


def _encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(arr.shape),
        "dtype": "<f8",
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype=obj["dtype"]).astype(np.float64)
    return arr.reshape(obj["shape"]).copy()


def snapshot_to_body(snapshot: TrainerSnapshot, uuid: str, branch_id: str, created_at: float) -> dict:
    model = snapshot.model
    opt = snapshot.optimizer
    return {
        "uuid": uuid,
        "branch_id": branch_id,
        "step": snapshot.step,
        "created_at": created_at,
        "model": {
            "layers": [
                {
                    "name": l.name,
                    "activation": l.activation,
                    "dropout_rate": l.dropout_rate,
                    "init": l.init,
                    "weight": _encode_array(l.weight),
                    "bias": _encode_array(l.bias),
                }
                for l in model.layers
            ]
        },
        "optimizer": {
            "lr": opt.lr,
            "momentum": opt.momentum,
            "weight_decay": opt.weight_decay,
            "grad_clip": opt.grad_clip,
            "velocity": {
                name: {"weight": _encode_array(v["weight"]), "bias": _encode_array(v["bias"])}
                for name, v in opt.velocity.items()
            },
        },
        "rng_state": [int(w) for w in snapshot.rng_state],
        "dataset_weights": snapshot.dataset_weights,
        "schedule_active": snapshot.schedule_active,
    }


def body_to_snapshot(body: dict) -> TrainerSnapshot:
    layers = [
        Layer(
            name=l["name"],
            weight=_decode_array(l["weight"]),
            bias=_decode_array(l["bias"]),
            activation=l["activation"],
            dropout_rate=l["dropout_rate"],
            init=l["init"],
        )
        for l in body["model"]["layers"]
    ]
    opt_obj = body["optimizer"]
    optimizer = OptimizerState(
        lr=opt_obj["lr"],
        momentum=opt_obj["momentum"],
        weight_decay=opt_obj["weight_decay"],
        grad_clip=opt_obj["grad_clip"],
        velocity={
            name: {"weight": _decode_array(v["weight"]), "bias": _decode_array(v["bias"])}
            for name, v in opt_obj["velocity"].items()
        },
    )
    return TrainerSnapshot(
        step=body["step"],
        model=ModelParams(layers),
        optimizer=optimizer,
        rng_state=tuple(int(w) for w in body["rng_state"]),
        dataset_weights=body["dataset_weights"],
        schedule_active=body["schedule_active"],
    )


def write_checkpoint_file(path: Path, body: dict, config_hash: str) -> None:
    body_bytes = _canonical(body)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_hash": config_hash,
        "checksum": hashlib.sha256(body_bytes).hexdigest(),
    }
    blob = _canonical({"header": header, "body": body})
    path.write_bytes(blob)


def read_checkpoint_file(path: Path, expected_config_hash: str | None = None) -> dict:
    try:
        obj = json.loads(path.read_bytes())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path.name}: {exc}") from exc
    header, body = obj.get("header", {}), obj.get("body")
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path.name}: unsupported format version {header.get('format_version')}")
    checksum = hashlib.sha256(_canonical(body)).hexdigest()
    if checksum != header.get("checksum"):
        raise CheckpointError(f"{path.name}: checksum mismatch, file is corrupt")
    if expected_config_hash is not None and header.get("config_hash") != expected_config_hash:
        raise CheckpointError(
            f"{path.name}: checkpoint was recorded under a different run configuration"
        )
    return body


# ---------------------------------------------------------------------------
# Metric records
# ---------------------------------------------------------------------------


def metric_record(step: int, train_loss: float, grad_norm: float, lr: float, val_loss: float | None = None) -> dict:
    rec = {"step": step, "train_loss": train_loss, "grad_norm": grad_norm, "lr": lr}
    if val_loss is not None:
        rec["val_loss"] = val_loss
    return rec


def encode_metric_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# Run store
# ---------------------------------------------------------------------------


class RunStore:
    """Owns everything under one run directory.

    Mutations come only from the training-loop thread; readers (the server)
    get copied views.
    """

    def __init__(self, run_dir: str | Path, config: RunConfig):
        self.run_dir = Path(run_dir)
        self.config = config
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "checkpoints").mkdir(exist_ok=True)
        (self.run_dir / "metrics").mkdir(exist_ok=True)

        config_path = self.run_dir / "config.json"
        if config_path.exists():
            existing = RunConfig.from_file(config_path)
            if existing.fingerprint() != config.fingerprint():
                raise StateError(
                    f"run dir {self.run_dir} was created with a different configuration"
                )
        else:
            config_path.write_text(config.to_json(), encoding="utf-8")

        self._branches: dict[str, BranchNode] = {}
        self._checkpoints: dict[str, Checkpoint] = {}
        self._metric_files: dict[str, IO[str]] = {}
        self._intervention_file: IO[str] | None = None
        self._ckpt_counter = 0
        self._load_existing()
        if ROOT_BRANCH not in self._branches:
            self._branches[ROOT_BRANCH] = BranchNode(ROOT_BRANCH, None, 0, None, _time.time())

    def _load_existing(self) -> None:
        for path in sorted((self.run_dir / "checkpoints").glob("*.ckpt")):
            body = read_checkpoint_file(path)
            ck = Checkpoint(
                uuid=body["uuid"],
                branch_id=body["branch_id"],
                step=body["step"],
                created_at=body["created_at"],
                path=path,
            )
            self._checkpoints[ck.uuid] = ck
        self._ckpt_counter = len(self._checkpoints)

    @property
    def commands_path(self) -> Path:
        return self.run_dir / "commands.jsonl"

    @property
    def interventions_path(self) -> Path:
        return self.run_dir / "interventions.jsonl"

    def metrics_path(self, branch_id: str) -> Path:
        return self.run_dir / "metrics" / f"{branch_id}.jsonl"

    # -- branches ----------------------------------------------------------

    def branch_tree(self) -> list[BranchNode]:
        return list(self._branches.values())

    def branch(self, branch_id: str) -> BranchNode:
        return self._branches[branch_id]

    def create_branch(self, parent_id: str, fork_step: int, checkpoint_uuid: str) -> BranchNode:
        if parent_id not in self._branches:
            raise StateError(f"unknown parent branch {parent_id!r}")
        child_count = sum(1 for b in self._branches.values() if b.parent_branch_id == parent_id)
        branch_id = f"{parent_id}.{child_count + 1}"
        node = BranchNode(branch_id, parent_id, fork_step, checkpoint_uuid, _time.time())
        self._branches[branch_id] = node
        return node

    # -- checkpoints -------------------------------------------------------

    def checkpoints(self) -> list[Checkpoint]:
        return list(self._checkpoints.values())

    def save_checkpoint(self, snapshot: TrainerSnapshot, branch_id: str) -> Checkpoint:
        self._ckpt_counter += 1
        # Deterministic uuids: a replayed run re-creates checkpoints in the
        # same order, so recorded load_checkpoint args resolve identically.
        uuid = f"ck{self._ckpt_counter:04d}-{branch_id}-s{snapshot.step}"
        created_at = _time.time()
        path = self.run_dir / "checkpoints" / f"{uuid}.ckpt"
        body = snapshot_to_body(snapshot, uuid, branch_id, created_at)
        write_checkpoint_file(path, body, self.config.fingerprint_hash())
        ck = Checkpoint(uuid, branch_id, snapshot.step, created_at, path)
        self._checkpoints[uuid] = ck
        return ck

    def load_checkpoint(self, uuid: str) -> tuple[TrainerSnapshot, BranchNode]:
        """Restore a snapshot and fork a new branch at the checkpoint step."""
        if uuid not in self._checkpoints:
            raise CheckpointError(f"unknown checkpoint uuid {uuid!r}")
        ck = self._checkpoints[uuid]
        body = read_checkpoint_file(ck.path, self.config.fingerprint_hash())
        snapshot = body_to_snapshot(body)
        node = self.create_branch(ck.branch_id, ck.step, uuid)
        return snapshot, node

    # -- intervention log ----------------------------------------------------

    def record_intervention(self, step: int, branch_id: str, envelope: CommandEnvelope) -> None:
        if self._intervention_file is None:
            fresh = not self.interventions_path.exists()
            self._intervention_file = open(self.interventions_path, "a", encoding="utf-8")
            if fresh:
                header = {"config_fingerprint": self.config.fingerprint()}
                self._intervention_file.write(json.dumps(header, ensure_ascii=False) + "\n")
        entry = {
            "applied_at_step": step,
            "branch_id": branch_id,
            "envelope": json.loads(encode_command(envelope)),
        }
        self._intervention_file.write(json.dumps(entry, ensure_ascii=False) + "\n")
        self._intervention_file.flush()

    # -- metric logs ---------------------------------------------------------

    def append_metric(self, branch_id: str, record: dict) -> None:
        fh = self._metric_files.get(branch_id)
        if fh is None:
            fh = open(self.metrics_path(branch_id), "a", encoding="utf-8")
            self._metric_files[branch_id] = fh
        fh.write(encode_metric_line(record))
        fh.flush()

    def metric_records(self, branch_id: str) -> list[dict]:
        path = self.metrics_path(branch_id)
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]

    def metric_branches(self) -> list[str]:
        return sorted(p.stem for p in (self.run_dir / "metrics").glob("*.jsonl"))

    def close(self) -> None:
        for fh in self._metric_files.values():
            fh.close()
        self._metric_files.clear()
        if self._intervention_file is not None:
            self._intervention_file.close()
            self._intervention_file = None


def load_intervention_log(path: str | Path) -> tuple[dict, list[InterventionEntry]]:
    """Parse interventions.jsonl: (config fingerprint, ordered entries)."""
    from .protocol import decode_command

    path = Path(path)
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise StateError(f"{path}: empty intervention log")
    header = json.loads(lines[0])
    if "config_fingerprint" not in header:
        raise StateError(f"{path}: missing config fingerprint header")
    entries = []
    for i, line in enumerate(lines[1:], start=2):
        obj = json.loads(line)
        for key in ("applied_at_step", "branch_id", "envelope"):
            if key not in obj:
                raise StateError(f"{path}:{i}: entry missing {key}")
        envelope = decode_command(json.dumps(obj["envelope"]))
        entries.append(InterventionEntry(obj["applied_at_step"], obj["branch_id"], envelope))
    return header["config_fingerprint"], entries


def check_branch_tree(nodes: list[BranchNode]) -> None:
    """Raise unless the nodes form a single tree rooted at b0."""
    by_id = {n.branch_id: n for n in nodes}
    roots = [n for n in nodes if n.parent_branch_id is None]
    if len(roots) != 1 or roots[0].branch_id != ROOT_BRANCH:
        raise StateError(f"expected single root {ROOT_BRANCH!r}, got {[r.branch_id for r in roots]}")
    for n in nodes:
        seen = {n.branch_id}
        cur = n
        while cur.parent_branch_id is not None:
            if cur.parent_branch_id not in by_id:
                raise StateError(f"{cur.branch_id}: dangling parent {cur.parent_branch_id!r}")
            cur = by_id[cur.parent_branch_id]
            if cur.branch_id in seen:
                raise StateError(f"cycle through {cur.branch_id}")
            seen.add(cur.branch_id)
