import json
import time

import httpx
import numpy as np
import pytest

from diffabm.behavior import parse_decision
from diffabm.errors import ProtocolError, TransportError, UsageError
from diffabm.providers import (
    FatigueProvider,
    HeuristicProvider,
    MockTableProvider,
    RemoteProvider,
    make_provider,
)


def test_heuristic_deterministic_and_order_invariant():
    a = HeuristicProvider(0.5, seed=7)
    b = HeuristicProvider(0.5, seed=7)
    seq_a = [a.query("s", "prompt one") for _ in range(5)]
    seq_a += [a.query("s", "prompt two") for _ in range(5)]
    # interleaved order must give the same per-prompt sequences
    seq_b1, seq_b2 = [], []
    for _ in range(5):
        seq_b1.append(b.query("s", "prompt one"))
        seq_b2.append(b.query("s", "prompt two"))
    assert seq_a[:5] == seq_b1
    assert seq_a[5:] == seq_b2


def test_heuristic_rate():
    p = HeuristicProvider(0.8, seed=1)
    answers = [parse_decision(p.query("s", "u")).answer for _ in range(2000)]
    assert abs(np.mean(answers) - 0.8) < 3 * np.sqrt(0.16 / 2000)
    assert p.calls == 2000


def test_mock_table_consumes_in_order_and_cycles():
    provider = MockTableProvider(
        [{"prompt_contains": "work", "answers": ["Yes. a.", "No. b."]}]
    )
    got = [provider.query("s", "go to work?") for _ in range(4)]
    assert got == ["Yes. a.", "No. b.", "Yes. a.", "No. b."]


def test_mock_table_matches_first_entry():
    provider = MockTableProvider(
        [
            {"prompt_contains": "isolate", "answers": ["Yes. iso."]},
            {"prompt_contains": "work", "answers": ["No. work."]},
        ]
    )
    assert provider.query("s", "do you isolate?") == "Yes. iso."
    assert provider.query("s", "go to work?") == "No. work."
    with pytest.raises(UsageError):
        provider.query("s", "unrelated")


def test_mock_table_from_file(tmp_path):
    path = tmp_path / "mock.json"
    path.write_text(json.dumps([{"prompt_contains": "x", "answers": ["Yes. ok."]}]))
    provider = MockTableProvider.from_file(str(path))
    assert provider.query("s", "x marks") == "Yes. ok."


def test_fatigue_provider_declines_with_duration():
    provider = FatigueProvider(base_isolate=0.8, fatigue_rate=0.05)
    early = "u. It has been 0 months since the start. isolate at home?"
    late = "u. It has been 12 months since the start. isolate at home?"
    rate = lambda prompt: np.mean(
        [parse_decision(provider.query("s", prompt)).answer for _ in range(200)]
    )
    assert rate(early) == pytest.approx(0.8, abs=0.01)
    assert rate(late) == pytest.approx(0.2, abs=0.01)


def remote_with_transport(handler, **kw):
    transport = httpx.MockTransport(handler)
    client = httpx.Client(transport=transport)
    return RemoteProvider(endpoint="http://svc/decide", client=client, **kw)


def test_remote_success_round_trip():
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json={"text": "Yes. ok."})

    provider = remote_with_transport(handler, api_key="sekrit")
    assert provider.query("SYS", "USR") == "Yes. ok."
    assert seen["body"] == {"system": "SYS", "user": "USR"}
    assert seen["auth"] == "Bearer sekrit"


def test_remote_retries_5xx_then_succeeds():
    count = {"n": 0}

    def handler(request):
        count["n"] += 1
        if count["n"] <= 2:
            return httpx.Response(500)
        return httpx.Response(200, json={"text": "Yes. ok."})

    provider = remote_with_transport(handler, retries=3, backoff_base=0.001)
    assert provider.query("s", "u") == "Yes. ok."
    assert count["n"] == 3


def test_remote_4xx_immediate_protocol_error():
    provider = remote_with_transport(lambda r: httpx.Response(403), retries=3)
    with pytest.raises(ProtocolError) as exc:
        provider.query("s", "u")
    assert exc.value.status == 403


def test_remote_exhausted_5xx_is_protocol_error():
    provider = remote_with_transport(
        lambda r: httpx.Response(503), retries=1, backoff_base=0.001
    )
    with pytest.raises(ProtocolError) as exc:
        provider.query("s", "u")
    assert exc.value.status == 503


def test_remote_transport_failure_raises_within_budget():
    def handler(request):
        raise httpx.ConnectTimeout("slow")

    provider = remote_with_transport(handler, retries=2, backoff_base=0.01, timeout=0.5)
    start = time.monotonic()
    with pytest.raises(TransportError):
        provider.query("s", "u")
    assert time.monotonic() - start < 0.5 * 1.1


def test_remote_bad_body_is_protocol_error():
    provider = remote_with_transport(lambda r: httpx.Response(200, json={"nope": 1}))
    with pytest.raises(ProtocolError):
        provider.query("s", "u")


def test_remote_env_endpoint(monkeypatch):
    monkeypatch.delenv("DECISION_ENDPOINT", raising=False)
    with pytest.raises(UsageError):
        RemoteProvider()
    monkeypatch.setenv("DECISION_ENDPOINT", "http://svc/decide")
    provider = RemoteProvider(client=httpx.Client(
        transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"text": "Yes. y."}))
    ))
    assert provider.endpoint == "http://svc/decide"


def test_make_provider_specs(tmp_path):
    assert isinstance(make_provider("heuristic"), HeuristicProvider)
    path = tmp_path / "m.json"
    path.write_text(json.dumps([{"prompt_contains": "x", "answers": ["Yes. a."]}]))
    assert isinstance(make_provider(f"mock:{path}"), MockTableProvider)
    with pytest.raises(UsageError):
        make_provider("nonsense")
