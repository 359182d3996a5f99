import json
import math
import re

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ftprag.corpus import count_tokens
from ftprag.inference import (
    EPSILON,
    INSTRUCTION,
    BackendContractError,
    BackendTransportError,
    HttpBackend,
    MCQuestion,
    RawOptionProbs,
    ScriptedBackend,
    UnanswerableError,
    assemble_prompt,
    first_token_probs,
    load_backend,
    normalize_confidence,
    parse_top_logprobs,
)
from ftprag.retrieval import Passage

Q = MCQuestion("q1", "What is the timer value?", {"A": "10 ms", "B": "20 ms", "C": "40 ms", "D": "80 ms"})


def passage(words, score, seed, tag="w"):
    return Passage("d", (seed, seed), " ".join([tag] * words), score, seed)


def raw(**probs):
    return RawOptionProbs(probs, "test")


class TestQuestion:
    def test_label_rules(self):
        with pytest.raises(ValueError):
            MCQuestion("x", "s", {"A": "a"})
        with pytest.raises(ValueError):
            MCQuestion("x", "s", {"A": "a", "C": "c"})
        with pytest.raises(ValueError):
            MCQuestion("x", "s", {"A": "a", "B": "b"}, gold="E")


class TestAssemblePrompt:
    def test_no_passages(self):
        prompt = assemble_prompt(Q, [])
        assert prompt.text == (
            f"{INSTRUCTION}\n\nQuestion: What is the timer value?\n"
            "A. 10 ms\nB. 20 ms\nC. 40 ms\nD. 80 ms\nAnswer:"
        )
        assert "Context" not in prompt.text and prompt.included_passages == ()

    def test_greedy_skip(self):
        # passages of 1000, 900 and 600 tokens; the budget leaves room for 1600
        p1, p2, p3 = passage(750, 0.9, 0, "a"), passage(675, 0.8, 1, "b"), passage(450, 0.7, 2, "c")
        assert [count_tokens(p.text) for p in (p1, p2, p3)] == [1000, 900, 600]
        with_1_3 = f"{INSTRUCTION}\n\nContext:\n[1] {p1.text}\n[2] {p3.text}\n\n" + assemble_prompt(Q, []).text.split("\n\n", 1)[1]
        budget = count_tokens(with_1_3)
        prompt = assemble_prompt(Q, [p3, p2, p1], budget)
        assert prompt.included_passages == (p1, p3)
        assert prompt.text == with_1_3 and prompt.token_estimate == budget

    def test_question_over_budget(self):
        with pytest.raises(UnanswerableError):
            assemble_prompt(Q, [], budget=5)

    def test_unknown_template(self):
        with pytest.raises(ValueError):
            assemble_prompt(Q, [], template_id="fancy")

    @given(st.lists(st.tuples(st.integers(1, 300), st.floats(0, 1)), max_size=8), st.integers(40, 1200))
    def test_estimate_within_budget(self, specs, budget):
        ps = [passage(n, s, i) for i, (n, s) in enumerate(specs)]
        prompt = assemble_prompt(Q, ps, budget)
        assert prompt.token_estimate == count_tokens(prompt.text) <= budget


class TestFirstTokenProbs:
    def test_passthrough(self):
        backend = ScriptedBackend([{"qid": "q1", "probs": {"A": 0.03, "B": 0.01, "C": 0.005, "D": 0.005}}])
        out = first_token_probs(assemble_prompt(Q, []), Q.labels, backend, qid="q1")
        assert out.probs == {"A": 0.03, "B": 0.01, "C": 0.005, "D": 0.005}
        assert backend.calls == 1

    def test_missing_labels_floored(self):
        backend = ScriptedBackend([{"default": True, "probs": {"A": 0.5, "B": 0.2}}])
        out = first_token_probs(assemble_prompt(Q, []), Q.labels, backend)
        assert out.probs == {"A": 0.5, "B": 0.2, "C": EPSILON, "D": EPSILON}

    def test_out_of_range_rejected(self):
        backend = ScriptedBackend([{"default": True, "probs": {"A": 1.5}}])
        with pytest.raises(BackendContractError):
            first_token_probs(assemble_prompt(Q, []), Q.labels, backend)


class TestNormalize:
    def test_uniform_ties_pick_first_label(self):
        r = normalize_confidence(raw(A=0.25, B=0.25, C=0.25, D=0.25))
        assert r.normalized == {"A": 0.25, "B": 0.25, "C": 0.25, "D": 0.25}
        assert (r.chosen, r.confidence) == ("A", 0.25)

    def test_two_options(self):
        r = normalize_confidence(raw(A=0.2, B=0.1))
        assert r.chosen == "A"
        assert r.normalized["A"] == pytest.approx(2 / 3, abs=1e-12)
        assert r.normalized["B"] == pytest.approx(1 / 3, abs=1e-12)

    def test_forced_arithmetic(self):
        r = normalize_confidence(raw(A=0.03, B=0.01, C=0.005, D=0.005))
        for label, want in {"A": 0.6, "B": 0.2, "C": 0.1, "D": 0.1}.items():
            assert r.normalized[label] == pytest.approx(want, abs=1e-12)
        assert r.chosen == "A" and r.confidence == pytest.approx(0.6, abs=1e-12)

    def test_tie_below_top_does_not_matter(self):
        assert normalize_confidence(raw(A=0.1, B=0.4, C=0.4)).chosen == "B"

    @given(st.lists(st.floats(EPSILON, 1.0), min_size=2, max_size=5))
    def test_sums_to_one(self, vals):
        r = normalize_confidence(RawOptionProbs(dict(zip("ABCDE", vals)), "t"))
        assert abs(math.fsum(r.normalized.values()) - 1) <= 1e-9
        assert r.confidence == max(r.normalized.values())


class TestScriptedBackend:
    def test_priority_order(self):
        prompt = assemble_prompt(Q, [])
        cfg = {"k": 5, "window": 0, "provider": "p"}
        records = [
            {"default": True, "probs": {"A": 1.0}},
            {"qid": "q1", "probs": {"B": 1.0}},
            {"prompt_sha256": prompt.digest, "probs": {"C": 1.0}},
            {"qid": "q1", "match": "timer", "probs": {"D": 1.0}},
            {"qid": "q1", "config": cfg, "probs": {"A": 0.5}},
        ]
        b = ScriptedBackend(records)
        assert b.option_probs(prompt, Q.labels, "q1", cfg) == {"A": 0.5}
        assert b.option_probs(prompt, Q.labels, "q1", {**cfg, "k": 10}) == {"D": 1.0}
        assert ScriptedBackend(records[:3]).option_probs(prompt, Q.labels, "q1") == {"C": 1.0}
        assert ScriptedBackend(records[:2]).option_probs(prompt, Q.labels, "q1") == {"B": 1.0}
        assert ScriptedBackend(records[:1]).option_probs(prompt, Q.labels, "zz") == {"A": 1.0}
        with pytest.raises(BackendContractError):
            ScriptedBackend([]).option_probs(prompt, Q.labels, "q1")

    def test_first_matching_needle_wins(self):
        b = ScriptedBackend([
            {"qid": "q1", "match": "absent", "probs": {"A": 1.0}},
            {"qid": "q1", "match": "ms", "probs": {"B": 1.0}},
            {"qid": "q1", "match": "timer", "probs": {"C": 1.0}},
        ])
        assert b.option_probs(assemble_prompt(Q, []), Q.labels, "q1") == {"B": 1.0}

    def test_from_file(self, tmp_path):
        path = tmp_path / "b.jsonl"
        path.write_text(json.dumps({"default": True, "probs": {"A": 0.7}}) + "\n")
        b = load_backend(f"scripted:{path}")
        assert b.option_probs(assemble_prompt(Q, []), Q.labels) == {"A": 0.7}


# canned completion response; expected values computed independently below
CANNED = {
    "id": "cmpl-1",
    "choices": [{
        "text": " A",
        "logprobs": {
            "tokens": [" A"],
            "token_logprobs": [-0.5],
            "top_logprobs": [{" A": -0.5, "B": -1.6094379124341003, " B": -2.995732273553991, "The": -3.0}],
        },
    }],
}


class TestHttpBackend:
    def test_golden_response(self):
        seen = []

        def handler(request):
            seen.append((request.url.path, request.headers.get("authorization"), json.loads(request.content)))
            return httpx.Response(200, json=CANNED)

        backend = HttpBackend("http://llm/v1", "phi-2", logprobs=5,
                              client=httpx.Client(transport=httpx.MockTransport(handler)))
        prompt = assemble_prompt(Q, [])
        raw_probs = first_token_probs(prompt, Q.labels, backend)
        assert raw_probs.probs["A"] == pytest.approx(0.6065306597126334, rel=1e-12)  # e^-0.5
        assert raw_probs.probs["B"] == pytest.approx(0.2 + 0.05, rel=1e-12)  # " B" and "B" summed
        assert raw_probs.probs["C"] == raw_probs.probs["D"] == EPSILON
        path, _, body = seen[0]
        assert path == "/v1/completions"
        assert body == {"model": "phi-2", "prompt": prompt.text, "max_tokens": 1, "logprobs": 5, "temperature": 0}

    def test_api_key_from_env(self, monkeypatch):
        monkeypatch.setenv("FTP_TEST_KEY", "sekret")
        seen = []

        def handler(request):
            seen.append(request.headers.get("authorization"))
            return httpx.Response(200, json=CANNED)

        backend = HttpBackend("http://llm", "m", api_key_env="FTP_TEST_KEY")
        backend._client = httpx.Client(transport=httpx.MockTransport(handler), headers=backend._client.headers)
        backend.option_probs(assemble_prompt(Q, []), Q.labels)
        assert seen == ["Bearer sekret"]

    @pytest.mark.parametrize(
        "payload,field",
        [
            ({}, "choices"),
            ({"choices": [{}]}, "choices[0].logprobs"),
            ({"choices": [{"logprobs": {}}]}, "choices[0].logprobs.top_logprobs"),
            ({"choices": [{"logprobs": {"top_logprobs": []}}]}, "choices[0].logprobs.top_logprobs"),
        ],
    )
    def test_missing_fields_named(self, payload, field):
        with pytest.raises(BackendContractError, match=re.escape(f"'{field}'")):
            parse_top_logprobs(payload, ["A", "B"])

    def test_retries_server_errors_then_fails(self, monkeypatch):
        monkeypatch.setattr("ftprag.inference.time.sleep", lambda s: None)
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(503)

        backend = HttpBackend("http://llm", "m", retries=2, client=httpx.Client(transport=httpx.MockTransport(handler)))
        with pytest.raises(BackendTransportError):
            backend.option_probs(assemble_prompt(Q, []), Q.labels)
        assert len(calls) == 3

    def test_recovers_after_transient_error(self, monkeypatch):
        monkeypatch.setattr("ftprag.inference.time.sleep", lambda s: None)
        responses = iter([httpx.Response(502), httpx.Response(200, json=CANNED)])
        backend = HttpBackend("http://llm", "m", client=httpx.Client(
            transport=httpx.MockTransport(lambda r: next(responses))))
        assert set(backend.option_probs(assemble_prompt(Q, []), Q.labels)) == {"A", "B"}

    def test_client_error_not_retried(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(400, text="bad")

        backend = HttpBackend("http://llm", "m", client=httpx.Client(transport=httpx.MockTransport(handler)))
        with pytest.raises(BackendTransportError):
            backend.option_probs(assemble_prompt(Q, []), Q.labels)
        assert len(calls) == 1
