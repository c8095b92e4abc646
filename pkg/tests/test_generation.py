"""Prompt assembly, citation parsing, and chat backend contract tests."""

from __future__ import annotations

import dataclasses
from importlib import resources

import httpx
import pytest

from corpusqa.errors import BackendUnavailable, ContextOverflow
from corpusqa.generation import (
    DEGRADED_TEXT,
    REFUSAL_TEXT,
    HttpChatBackend,
    PromptBundle,
    StubBackend,
    assemble_answer,
    build_prompt,
    generate_answer,
    refusal_answer,
    stream_answer,
    system_template,
)
from corpusqa.retrieval import AudienceMode, Query, RetrievalConfig, retrieve

from corpusgen import passage_of_node


@pytest.fixture()
def planted_hits(planted):
    store, flat, embedder, rows = planted
    query = Query(raw_text=rows[0]["question"], reformulated_text=rows[0]["question"])
    hits = retrieve(query, flat, store, RetrievalConfig(), embedder=embedder)
    return store, query, hits, rows[0]


def test_ten_hits_become_ten_numbered_blocks(planted_hits):
    store, query, hits, _ = planted_hits
    prompt = build_prompt(query, hits, store)
    assert len(prompt.context_blocks) == 10
    assert [b.ref_number for b in prompt.context_blocks] == list(range(1, 11))
    by_rank = sorted(hits, key=lambda h: h.rank)
    assert [b.passage_id for b in prompt.context_blocks] == [h.passage_id for h in by_rank]


def test_children_mode_selects_children_template(planted_hits):
    store, query, hits, _ = planted_hits
    prompt = build_prompt(query, hits, store, AudienceMode.CHILDREN)
    golden = (
        resources.files("corpusqa.data.prompts")
        .joinpath("system_children.txt")
        .read_text("utf-8")
        .strip()
    )
    assert prompt.system_text == golden
    assert prompt.system_text != system_template(AudienceMode.GENERAL_PUBLIC)
    assert prompt.system_text != system_template(AudienceMode.EXPERT)


def test_budget_drops_blocks_from_the_tail(planted_hits):
    store, query, hits, _ = planted_hits
    seven = build_prompt(query, hits[:7], store, budget=10_000)
    budget = seven.token_estimate
    trimmed = build_prompt(query, hits, store, budget=budget)
    assert len(trimmed.context_blocks) == 7
    assert [b.passage_id for b in trimmed.context_blocks] == [b.passage_id for b in seven.context_blocks]
    assert trimmed.token_estimate <= budget


def test_context_overflow_when_one_block_cannot_fit(planted_hits):
    store, query, hits, _ = planted_hits
    with pytest.raises(ContextOverflow):
        build_prompt(query, hits, store, budget=30)


def test_prompt_is_byte_identical_for_identical_inputs(planted_hits):
    store, query, hits, _ = planted_hits
    first = build_prompt(query, hits, store)
    second = build_prompt(query, hits, store)
    assert first == second
    assert first.rendered_user_message() == second.rendered_user_message()


def test_prompt_without_blocks_is_allowed_for_refusals(planted_hits):
    store, query, _hits, _ = planted_hits
    prompt = build_prompt(query, [], store)
    assert prompt.context_blocks == ()
    assert "(none)" in prompt.rendered_user_message()


def _prompt_with_blocks(n: int) -> PromptBundle:
    from corpusqa.generation import ContextBlock

    blocks = tuple(
        ContextBlock(
            ref_number=i + 1, passage_id=f"p{i}", text=f"Fact {i} about warming.",
            doc_title="Doc", section_path=("S",), pages=(i + 1, i + 1),
        )
        for i in range(n)
    )
    return PromptBundle(
        system_text=system_template(AudienceMode.GENERAL_PUBLIC),
        user_text="What about warming?",
        context_blocks=blocks,
        audience_mode=AudienceMode.GENERAL_PUBLIC,
        token_estimate=100,
    )


def test_citation_parsing_keeps_in_range_markers():
    prompt = _prompt_with_blocks(3)
    answer = assemble_answer(prompt, "Seas rise [1][3].")
    assert answer.citations == (1, 3)
    assert answer.answer_text == "Seas rise [1][3]."


def test_out_of_range_marker_is_stripped():
    prompt = _prompt_with_blocks(3)
    answer = assemble_answer(prompt, "[9]")
    assert answer.citations == ()
    assert answer.answer_text == ""


def test_repeated_markers_deduplicate_in_order():
    prompt = _prompt_with_blocks(4)
    answer = assemble_answer(prompt, "A [2] and B [1], again [2][4].")
    assert answer.citations == (2, 1, 4)


def test_sources_mirror_context_blocks(planted_hits):
    store, query, hits, row = planted_hits
    prompt = build_prompt(query, hits, store)
    answer = generate_answer(prompt, StubBackend())
    assert len(answer.sources) == len(prompt.context_blocks)
    for source, block in zip(answer.sources, prompt.context_blocks):
        assert source.ref_number == block.ref_number
        manifest, section_path, page_start, page_end = store.lookup_source(source.passage_id)
        assert source.doc_title == manifest.title
        assert source.section_path == section_path
        assert source.pages == (page_start, page_end)


def test_refusal_answer_is_fixed():
    answer = refusal_answer()
    assert answer.refusal is True
    assert answer.sources == ()
    assert "outside the scope of the source reports" in answer.answer_text
    assert answer.answer_text == REFUSAL_TEXT


def test_backend_unavailable_degrades():
    class Exhausted:
        def complete(self, messages):
            raise BackendUnavailable("down")

    prompt = _prompt_with_blocks(2)
    answer = generate_answer(prompt, Exhausted())
    assert answer.degraded is True
    assert answer.refusal is False
    assert answer.answer_text == DEGRADED_TEXT
    assert len(answer.sources) == 2  # retrieved sources still shown


def test_end_to_end_planted_answer_cites_planted_source(planted_hits):
    store, query, hits, row = planted_hits
    prompt = build_prompt(query, hits, store)
    answer = generate_answer(prompt, StubBackend())
    planted_passage = passage_of_node(store, row["node_id"])
    planted_ref = next(
        b.ref_number for b in prompt.context_blocks if b.passage_id == planted_passage.passage_id
    )
    assert planted_ref in answer.citations
    planted_source = next(s for s in answer.sources if s.ref_number == planted_ref)
    assert planted_source.pages[0] == row["page"]
    assert planted_source.doc_title == store.manifests[row["document_id"]].title


# --- stub backend ---

def test_stub_template_cites_every_block():
    prompt = _prompt_with_blocks(5)
    reply = StubBackend().complete(prompt.to_messages())
    for n in range(1, 6):
        assert f"[{n}]" in reply["text"]


def test_stub_scripted_reply_wins():
    prompt = _prompt_with_blocks(2)
    messages = prompt.to_messages()
    stub = StubBackend(scripted={StubBackend.message_key(messages): "Scripted [1]."})
    assert stub.complete(messages)["text"] == "Scripted [1]."


def test_stub_stream_concatenates_to_complete_text():
    prompt = _prompt_with_blocks(3)
    stub = StubBackend()
    full = stub.complete(prompt.to_messages())["text"]
    streamed = "".join(stream_answer(prompt, StubBackend()))
    assert streamed == full


# --- HTTP chat backend ---

def _http_backend(handler) -> HttpChatBackend:
    transport = httpx.MockTransport(handler)
    return HttpChatBackend(
        endpoint="http://llm.test/v1/chat",
        api_key="k3y",
        backoff_base=0.0,
        client=httpx.Client(transport=transport),
    )


def test_http_complete_roundtrip():
    def handler(request: httpx.Request) -> httpx.Response:
        assert request.headers["authorization"] == "Bearer k3y"
        import json

        payload = json.loads(request.read())
        assert payload["stream"] is False
        assert payload["messages"][0]["role"] == "SYSTEM"
        return httpx.Response(200, json={"text": "Answer [1].", "finish_reason": "stop"})

    reply = _http_backend(handler).complete(_prompt_with_blocks(1).to_messages())
    assert reply == {"text": "Answer [1].", "finish_reason": "stop"}


def test_http_complete_retries_then_fails():
    calls = {"n": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        calls["n"] += 1
        return httpx.Response(502)

    with pytest.raises(BackendUnavailable):
        _http_backend(handler).complete([{"role": "USER", "text": "hi"}])
    assert calls["n"] == 3


def test_http_stream_parses_delta_events():
    body = (
        'event: delta\ndata: {"delta": "Sea levels "}\n\n'
        'event: delta\ndata: {"delta": "are rising [1]."}\n\n'
        "event: done\ndata: {}\n\n"
    )

    def handler(request: httpx.Request) -> httpx.Response:
        import json

        assert json.loads(request.read())["stream"] is True
        return httpx.Response(200, content=body.encode(), headers={"content-type": "text/event-stream"})

    deltas = list(_http_backend(handler).stream([{"role": "USER", "text": "hi"}]))
    assert deltas == ["Sea levels ", "are rising [1]."]


def test_http_backend_reads_env(monkeypatch):
    monkeypatch.setenv("CORPUSQA_LLM_ENDPOINT", "http://llm.env/chat")
    monkeypatch.setenv("CORPUSQA_LLM_KEY", "envkey")
    backend = HttpChatBackend()
    assert backend.endpoint == "http://llm.env/chat"
    assert backend.api_key == "envkey"
    monkeypatch.delenv("CORPUSQA_LLM_ENDPOINT")
    with pytest.raises(ValueError):
        HttpChatBackend(api_key="x")
