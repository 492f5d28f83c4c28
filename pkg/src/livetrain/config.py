"""Run configuration: the static description of one training run."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

TASKS = ("quadratic", "mlp_sin")
SCHEDULES = ("none", "linear")


@dataclass
class RunConfig:
    task: str = "mlp_sin"
    total_steps: int = 1000
    seed: int = 0
    lr0: float = 1e-2
    momentum: float = 0.0
    weight_decay: float = 0.0
    grad_clip: float | None = None
    schedule: str = "none"  # "linear" anneals lr0 to zero over total_steps
    eval_cadence: int = 0  # 0 = evaluate only on demand
    # quadratic task
    curvature: float = 500.0  # loss = 0.5 * curvature * ||params||^2
    # mlp_sin task
    hidden_width: int = 32
    batch_size: int = 32
    train_points: int = 256
    val_points: int = 128
    noise_std: float = 0.1
    # pacing for live demos/agents; no effect on the math
    step_delay_s: float = 0.0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not (0 <= self.momentum < 1):
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")
        if self.eval_cadence < 0:
            raise ValueError("eval_cadence must be >= 0")
        if self.task == "mlp_sin":
            if self.hidden_width <= 0 or self.batch_size <= 0:
                raise ValueError("hidden_width and batch_size must be positive")
            if self.train_points <= 0 or self.val_points <= 0:
                raise ValueError("train_points and val_points must be positive")
        if self.curvature <= 0:
            raise ValueError("curvature must be positive")
        if self.step_delay_s < 0:
            raise ValueError("step_delay_s must be >= 0")

    def fingerprint(self) -> dict:
        """The fields that determine the metric trajectory. Replay refuses
        logs recorded under a different fingerprint. step_delay_s is pure
        pacing and excluded."""
        d = asdict(self)
        d.pop("step_delay_s")
        return d

    def fingerprint_hash(self) -> str:
        blob = json.dumps(self.fingerprint(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        if "lambda" in data:  # documented name; a Python keyword, so stored as curvature
            data["curvature"] = data.pop("lambda")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        config = cls(**data)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("config file must contain a JSON object")
        return cls.from_dict(data)
