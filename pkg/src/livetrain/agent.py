"""Automated learning-rate intervention.

The agent is an ordinary client: it follows the event stream, summarizes
recent metrics into an observation, decides double/halve/keep (via a
deterministic rule policy or an external chat-completion backend), and
submits update_optimizer commands. It never touches trainer internals.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from importlib import resources

from .client import ServerClient, ServerRejection, ServerUnavailable
from .protocol import CommandEnvelope, CommandKind, EventType, TrainingEvent

logger = logging.getLogger(__name__)

ACTIONS = ("double", "halve", "keep")
PLACEHOLDERS = (
    "current_step",
    "current_lr",
    "lr_history",
    "train_loss_history",
    "valid_loss_history",
)


@dataclass
class AgentObservation:
    current_step: int
    current_lr: float
    lr_history: list[tuple[int, float]]
    train_loss_history: list[tuple[int, float]]
    valid_loss_history: list[tuple[int, float]]


@dataclass
class AgentDecision:
    action: str
    explanation: str = ""

    def __post_init__(self) -> None:
        if self.action not in ACTIONS:
            raise ValueError(f"action must be one of {ACTIONS}, got {self.action!r}")
        words = self.explanation.split()
        if len(words) > 100:
            self.explanation = " ".join(words[:100])


class DecisionParseError(ValueError):
    pass


class TemplateError(ValueError):
    pass


def default_template() -> str:
    return resources.files("livetrain").joinpath("prompt_template.md").read_text(encoding="utf-8")


def _fmt(value) -> str:
    return json.dumps(value)


def render_prompt(obs: AgentObservation, template: str) -> str:
    """Substitute the five {{placeholders}}; refuses templates missing any."""
    values = {
        "current_step": str(obs.current_step),
        "current_lr": _fmt(obs.current_lr),
        "lr_history": _fmt([[s, v] for s, v in obs.lr_history]),
        "train_loss_history": _fmt([[s, v] for s, v in obs.train_loss_history]),
        "valid_loss_history": _fmt([[s, v] for s, v in obs.valid_loss_history]),
    }
    out = template
    for name in PLACEHOLDERS:
        marker = "{{" + name + "}}"
        if marker not in out:
            raise TemplateError(f"template is missing placeholder {marker}")
        out = out.replace(marker, values[name])
    return out


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


def decide_rule(
    obs: AgentObservation,
    window: int = 5,
    plateau_rel: float = 0.01,
    oscillation_rel: float = 0.10,
) -> AgentDecision:
    """Deterministic stand-in for an LLM-backed agent.

    Over the last `window` training losses: halve on a rising or oscillating
    loss; double when the loss is strictly decreasing but by less than
    `plateau_rel` over the whole window; otherwise keep.
    """
    losses = [v for _, v in obs.train_loss_history]
    if len(losses) < 2:
        return AgentDecision("keep", "not enough history")
    tail = losses[-window:]
    first, last = tail[0], tail[-1]

    if last > first:
        return AgentDecision("halve", "loss is rising over the window")

    diffs = [b - a for a, b in zip(tail, tail[1:])]
    signs = [1 if d > 0 else (-1 if d < 0 else 0) for d in diffs]
    flips = sum(
        1 for a, b in zip(signs, signs[1:]) if a != 0 and b != 0 and a != b
    )
    mean_abs_diff = sum(abs(d) for d in diffs) / len(diffs)
    mean_loss = sum(tail) / len(tail)
    if flips >= 2 and mean_loss > 0 and mean_abs_diff > oscillation_rel * mean_loss:
        return AgentDecision("halve", "loss is oscillating")

    strictly_decreasing = all(d < 0 for d in diffs)
    if strictly_decreasing and first > 0 and (first - last) / first < plateau_rel:
        return AgentDecision("double", "loss decrease has plateaued")

    return AgentDecision("keep", "loss is behaving")


def parse_decision(text: str) -> AgentDecision:
    """Extract the first JSON object with an "action" field from arbitrary
    response text; the action is matched case-insensitively."""
    for candidate in _iter_json_objects(text):
        if "action" not in candidate:
            continue
        action = str(candidate["action"]).strip().lower()
        if action not in ACTIONS:
            raise DecisionParseError(f"unknown action {candidate['action']!r}")
        explanation = candidate.get("explanation", "")
        return AgentDecision(action, str(explanation) if explanation else "")
    raise DecisionParseError("no JSON object with an 'action' field found")


def _iter_json_objects(text: str):
    """Yield parsed JSON objects for balanced {...} spans, left to right."""
    depth = 0
    start = None
    in_string = False
    escape = False
    for i, ch in enumerate(text):
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}":
            if depth > 0:
                depth -= 1
                if depth == 0 and start is not None:
                    try:
                        obj = json.loads(text[start : i + 1])
                    except json.JSONDecodeError:
                        continue
                    if isinstance(obj, dict):
                        yield obj
                    start = None


class RulePolicy:
    name = "rule"

    def __init__(self, window: int = 5):
        self.window = window

    def decide(self, obs: AgentObservation) -> AgentDecision:
        return decide_rule(obs, window=self.window)


class LlmClient:
    """Minimal chat-completion HTTP client. The endpoint is the full
    completions URL; the API key comes from LIVETRAIN_API_KEY."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None, timeout: float = 30.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("LIVETRAIN_API_KEY", "")
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        import httpx

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        }
        resp = httpx.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
        resp.raise_for_status()
        data = resp.json()
        return data["choices"][0]["message"]["content"]


class LlmPolicy:
    name = "llm"

    def __init__(self, client: LlmClient, template: str | None = None):
        self.client = client
        self.template = template if template is not None else default_template()

    def decide(self, obs: AgentObservation) -> AgentDecision:
        prompt = render_prompt(obs, self.template)
        try:
            response = self.client.complete(prompt)
            return parse_decision(response)
        except DecisionParseError as exc:
            logger.warning("unparseable backend response, keeping lr: %s", exc)
            return AgentDecision("keep", f"fallback: {exc}")


def act(decision: AgentDecision, current_lr: float, server: ServerClient) -> CommandEnvelope | None:
    """Submit the lr change a decision implies; keep submits nothing."""
    if current_lr <= 0:
        raise ValueError("current_lr must be positive")
    if decision.action == "keep":
        return None
    new_lr = current_lr * 2.0 if decision.action == "double" else current_lr / 2.0
    envelope = CommandEnvelope.build(
        CommandKind.UPDATE_OPTIMIZER, {"lr": {"value": new_lr}}
    )
    server.submit_envelope(envelope)
    return envelope


# ---------------------------------------------------------------------------
# The agent loop
# ---------------------------------------------------------------------------


@dataclass
class ObservationBuilder:
    """Accumulates metric history from the event stream."""

    max_history: int = 200
    current_step: int = 0
    lr_history: list[tuple[int, float]] = field(default_factory=list)
    train_loss_history: list[tuple[int, float]] = field(default_factory=list)
    valid_loss_history: list[tuple[int, float]] = field(default_factory=list)

    def observe(self, event: TrainingEvent) -> None:
        if event.event_type == EventType.METRIC.value:
            payload = event.payload
            step = payload.get("step", event.step)
            self.current_step = step
            self.lr_history.append((step, payload["lr"]))
            self.train_loss_history.append((step, payload["train_loss"]))
        elif event.event_type == EventType.EVALUATION_RESULT.value:
            self.valid_loss_history.append((event.payload["step"], event.payload["val_loss"]))
        for hist in (self.lr_history, self.train_loss_history, self.valid_loss_history):
            if len(hist) > self.max_history:
                del hist[: len(hist) - self.max_history]

    def observation(self) -> AgentObservation:
        return AgentObservation(
            current_step=self.current_step,
            current_lr=self.lr_history[-1][1] if self.lr_history else 0.0,
            lr_history=list(self.lr_history),
            train_loss_history=list(self.train_loss_history),
            valid_loss_history=list(self.valid_loss_history),
        )


class AgentLoop:
    """Consume the stream, decide every `cadence` steps, submit commands."""

    def __init__(
        self,
        server: ServerClient,
        policy,
        cadence: int = 10,
        max_reconnects: int = 5,
        backoff_s: float = 0.5,
    ):
        if cadence <= 0:
            raise ValueError("cadence must be a positive step count")
        self.server = server
        self.policy = policy
        self.cadence = cadence
        self.max_reconnects = max_reconnects
        self.backoff_s = backoff_s
        self.decisions: list[tuple[int, AgentDecision]] = []
        self._last_acted_step = 0

    def run(self) -> str:
        attempts = 0
        while True:
            builder = ObservationBuilder()
            try:
                for event in self.server.events():
                    attempts = 0
                    builder.observe(event)
                    if event.event_type == EventType.TRAINING_ENDED.value:
                        return event.payload.get("reason", "ended")
                    self._maybe_act(event, builder)
            except ServerUnavailable as exc:
                attempts += 1
                if attempts > self.max_reconnects:
                    raise
                logger.warning("event stream lost (%s); reconnecting in %.1fs", exc, self.backoff_s * attempts)
                time.sleep(self.backoff_s * attempts)
                continue
            # stream closed without training_ended: treat as connection loss
            attempts += 1
            if attempts > self.max_reconnects:
                raise ServerUnavailable("event stream closed repeatedly without training end")
            time.sleep(self.backoff_s * attempts)

    def _maybe_act(self, event: TrainingEvent, builder: ObservationBuilder) -> None:
        if event.event_type != EventType.METRIC.value:
            return
        if event.time == 0.0:
            return  # historical replay frame, not the live edge
        step = builder.current_step
        if step % self.cadence != 0 or step <= self._last_acted_step:
            return
        self._last_acted_step = step
        obs = builder.observation()
        decision = self.policy.decide(obs)
        self.decisions.append((step, decision))
        logger.info("step %d: %s (%s)", step, decision.action, decision.explanation)
        if decision.action != "keep":
            try:
                act(decision, obs.current_lr, self.server)
            except ServerRejection as exc:
                logger.warning("server rejected the intervention: %s", exc)
