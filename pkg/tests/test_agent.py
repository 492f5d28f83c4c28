import json
import random
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest

from livetrain.agent import (
    ACTIONS,
    AgentDecision,
    AgentObservation,
    DecisionParseError,
    LlmClient,
    LlmPolicy,
    ObservationBuilder,
    RulePolicy,
    TemplateError,
    act,
    decide_rule,
    default_template,
    parse_decision,
    render_prompt,
)
from livetrain.protocol import CommandKind, EventType, TrainingEvent

GOLDEN = Path(__file__).parent / "goldens" / "prompt_observation.txt"


def obs(
    step=0,
    lr=5e-3,
    lr_hist=None,
    train_hist=None,
    valid_hist=None,
):
    lr_hist = lr_hist if lr_hist is not None else ([(step, lr)] if step else [])
    return AgentObservation(
        current_step=step,
        current_lr=lr,
        lr_history=lr_hist,
        train_loss_history=train_hist or [],
        valid_loss_history=valid_hist or [],
    )


def obs_with_losses(losses, lr=5e-3):
    steps = list(range(1, len(losses) + 1))
    return AgentObservation(
        current_step=steps[-1] if steps else 0,
        current_lr=lr,
        lr_history=[(s, lr) for s in steps],
        train_loss_history=list(zip(steps, losses)),
        valid_loss_history=[],
    )


# ---------------------------------------------------------------------------
# Prompt rendering
# ---------------------------------------------------------------------------


def test_current_lr_renders_as_decimal():
    assert render_prompt(
        obs(step=1, lr=5e-3),
        "{{current_step}}{{lr_history}}{{train_loss_history}}{{valid_loss_history}} lr={{current_lr}}",
    ).endswith("lr=0.005")


def test_empty_histories_render_empty_lists_no_placeholders_left():
    template = default_template()
    rendered = render_prompt(obs(step=0, lr=1e-2, lr_hist=[]), template)
    assert "{{" not in rendered and "}}" not in rendered.replace('"explanation"', "")
    assert "- learning rates: []" in rendered
    assert "- training losses: []" in rendered
    assert "- validation losses: []" in rendered


def test_rendered_prompt_matches_golden_file():
    observation = AgentObservation(
        current_step=120,
        current_lr=0.005,
        lr_history=[(100, 0.01), (110, 0.005)],
        train_loss_history=[(100, 250.0), (110, 312.5)],
        valid_loss_history=[(100, 260.0)],
    )
    rendered = render_prompt(observation, default_template())
    assert rendered == GOLDEN.read_text(encoding="utf-8")


def test_missing_placeholder_rejected():
    with pytest.raises(TemplateError, match="current_lr"):
        render_prompt(obs(step=1), "only {{current_step}} here {{lr_history}} {{train_loss_history}} {{valid_loss_history}}")


# ---------------------------------------------------------------------------
# Rule policy
# ---------------------------------------------------------------------------


def test_rule_halves_on_oscillating_rising_losses():
    decision = decide_rule(obs_with_losses([250, 312, 280, 350, 330]))
    assert decision.action == "halve"


def test_rule_keeps_on_fast_decrease():
    decision = decide_rule(obs_with_losses([1.0, 0.5, 0.25, 0.12, 0.06]))
    assert decision.action == "keep"


def test_rule_doubles_on_plateau():
    losses = [1.0, 0.9995, 0.999, 0.9988, 0.9987]
    decision = decide_rule(obs_with_losses(losses))
    assert decision.action == "double"


def test_rule_halves_on_oscillation_without_net_rise():
    losses = [100.0, 140.0, 90.0, 135.0, 95.0]
    decision = decide_rule(obs_with_losses(losses))
    assert decision.action == "halve"


def test_rule_keeps_with_short_history():
    assert decide_rule(obs_with_losses([5.0])).action == "keep"
    assert decide_rule(obs_with_losses([])).action == "keep"


def test_rule_is_pure():
    o = obs_with_losses([3.0, 2.0, 2.5, 1.8, 2.2])
    assert decide_rule(o) == decide_rule(o)


def test_rule_agent_stabilizes_quadratic_recurrence_oracle():
    # Closed-form oracle: w <- (1 - lr*curvature) * w, loss before step t is
    # 250 * w^2. The agent inspects the last 5 losses every 10 steps.
    curvature, lr, w = 500.0, 5e-3, 1.0
    losses, lrs = [], []
    policy = RulePolicy()
    lr_decisions = []
    for t in range(1, 201):
        losses.append(250.0 * w * w)
        lrs.append(lr)
        w = (1.0 - lr * curvature) * w
        if t % 10 == 0:
            steps = list(range(t - len(losses) + 1, t + 1))
            observation = AgentObservation(
                current_step=t,
                current_lr=lr,
                lr_history=list(zip(steps, [lr] * len(steps))),
                train_loss_history=list(zip(steps, losses)),
                valid_loss_history=[],
            )
            decision = policy.decide(observation)
            lr_decisions.append((t, decision.action))
            if decision.action == "double":
                lr *= 2.0
            elif decision.action == "halve":
                lr /= 2.0
    final_loss = 250.0 * w * w
    assert lr < 4e-3, f"lr never stabilized: {lr}"
    assert final_loss < 1e-6, f"final loss {final_loss}"
    assert lrs.index(min(lrs)) <= 50, "stable lr not reached within 50 steps"
    # lr non-increasing until losses decrease monotonically
    first_monotone = next(
        i for i in range(len(losses)) if all(b < a for a, b in zip(losses[i:], losses[i + 1 :]))
    )
    for a, b in zip(lrs[: first_monotone + 1], lrs[1 : first_monotone + 1]):
        assert b <= a


# ---------------------------------------------------------------------------
# Decision parsing
# ---------------------------------------------------------------------------


def test_parse_plain_decision():
    d = parse_decision('{"action": "halve", "explanation": "loss oscillating"}')
    assert d == AgentDecision("halve", "loss oscillating")


def test_parse_case_insensitive_with_chatter():
    assert parse_decision('Sure! {"action":"KEEP"}').action == "keep"


def test_parse_fuzzed_wrappers():
    rnd = random.Random(3)
    wrappers = [
        "Here you go:\n```json\n[PAYLOAD]\n```",
        "[PAYLOAD] trailing words",
        "prefix {\"not\": \"it\"} then [PAYLOAD]",
        "I think\n\n[PAYLOAD]\n\nHope that helps!",
        "[PAYLOAD]",
    ]
    for _ in range(200):
        action = rnd.choice(ACTIONS)
        payload = json.dumps({"action": action.upper() if rnd.random() < 0.5 else action,
                              "explanation": "x" * rnd.randrange(0, 20)})
        text = rnd.choice(wrappers).replace("[PAYLOAD]", payload)
        assert parse_decision(text).action == action


def test_parse_failures():
    with pytest.raises(DecisionParseError):
        parse_decision("no json here")
    with pytest.raises(DecisionParseError):
        parse_decision('{"action": "explode"}')
    with pytest.raises(DecisionParseError):
        parse_decision('{"decision": "halve"}')


def test_decision_validation_and_truncation():
    with pytest.raises(ValueError):
        AgentDecision("triple")
    long = AgentDecision("keep", " ".join(["word"] * 150))
    assert len(long.explanation.split()) == 100


# ---------------------------------------------------------------------------
# Acting
# ---------------------------------------------------------------------------


class FakeServer:
    def __init__(self):
        self.submitted = []

    def submit_envelope(self, envelope):
        self.submitted.append(envelope)
        return {"uuid": envelope.uuid, "status": "pending"}


def test_act_halve_submits_half_lr():
    server = FakeServer()
    envelope = act(AgentDecision("halve"), 5e-3, server)
    assert envelope is not None
    assert envelope.command == CommandKind.UPDATE_OPTIMIZER
    assert envelope.args_object() == {"lr": {"value": 2.5e-3}}
    assert server.submitted == [envelope]


def test_act_keep_submits_nothing():
    server = FakeServer()
    assert act(AgentDecision("keep"), 1.0, server) is None
    assert server.submitted == []


def test_double_then_halve_is_identity():
    server = FakeServer()
    lr = 3e-4
    doubled = act(AgentDecision("double"), lr, server).args_object()["lr"]["value"]
    halved = act(AgentDecision("halve"), doubled, server).args_object()["lr"]["value"]
    assert halved == lr  # binary-exact power-of-two scaling


def test_act_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        act(AgentDecision("halve"), 0.0, FakeServer())


# ---------------------------------------------------------------------------
# Observation builder
# ---------------------------------------------------------------------------


def metric(step, lr=1e-2, loss=1.0, t=1.0):
    return TrainingEvent(
        EventType.METRIC.value, step, "b0", t,
        {"step": step, "train_loss": loss, "grad_norm": 1.0, "lr": lr},
    )


def test_builder_accumulates_and_tracks_edge():
    builder = ObservationBuilder()
    builder.observe(metric(1, lr=0.01, loss=2.0))
    builder.observe(metric(2, lr=0.02, loss=1.5))
    builder.observe(
        TrainingEvent(EventType.EVALUATION_RESULT.value, 2, "b0", 1.0, {"val_loss": 1.7, "step": 2})
    )
    o = builder.observation()
    assert o.current_step == 2
    assert o.current_lr == 0.02
    assert o.lr_history[-1] == (2, 0.02)
    assert o.train_loss_history == [(1, 2.0), (2, 1.5)]
    assert o.valid_loss_history == [(2, 1.7)]


def test_builder_caps_history():
    builder = ObservationBuilder(max_history=10)
    for step in range(1, 100):
        builder.observe(metric(step))
    assert len(builder.train_loss_history) == 10
    assert builder.train_loss_history[-1][0] == 99


# ---------------------------------------------------------------------------
# LLM backend with a local mock server
# ---------------------------------------------------------------------------


class MockLlm:
    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers["Content-Length"])
                outer.requests.append(json.loads(self.rfile.read(length)))
                content = outer.responses.pop(0) if outer.responses else '{"action":"keep"}'
                body = json.dumps(
                    {"choices": [{"message": {"role": "assistant", "content": content}}]}
                ).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def endpoint(self):
        return f"http://127.0.0.1:{self.server.server_port}/v1/chat/completions"

    def stop(self):
        self.server.shutdown()


def test_llm_policy_follows_mock_script():
    mock = MockLlm(['{"action": "halve", "explanation": "too hot"}'])
    try:
        policy = LlmPolicy(LlmClient(mock.endpoint, "mock-model", api_key="k"))
        decision = policy.decide(obs_with_losses([250, 312, 280, 350, 330]))
        assert decision == AgentDecision("halve", "too hot")
        assert mock.requests[0]["model"] == "mock-model"
        prompt = mock.requests[0]["messages"][0]["content"]
        assert "training losses" in prompt and "{{" not in prompt
    finally:
        mock.stop()


def test_llm_policy_falls_back_to_keep_on_garbage():
    mock = MockLlm(["total nonsense"])
    try:
        policy = LlmPolicy(LlmClient(mock.endpoint, "mock-model", api_key="k"))
        decision = policy.decide(obs_with_losses([1.0, 2.0, 3.0, 4.0, 5.0]))
        assert decision.action == "keep"
        assert "fallback" in decision.explanation
    finally:
        mock.stop()
