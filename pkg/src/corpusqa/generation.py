"""Prompt construction and sourced answer generation.

The question and the retrieved passages are packed into a constrained prompt
(three audience registers, inline [n] citation markers, drop-from-tail budget
fitting). Chat backends sit behind one contract: a deterministic stub for
tests and offline runs, and an HTTP adapter for real deployments.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterator

import httpx

logger = logging.getLogger(__name__)

from .corpus import CorpusStore, count_tokens
from .errors import BackendUnavailable, ContextOverflow
from .retrieval import AudienceMode, Query, RetrievalHit

ENV_ENDPOINT = "CORPUSQA_LLM_ENDPOINT"
ENV_KEY = "CORPUSQA_LLM_KEY"

MAX_CONTEXT_BLOCKS = 10
DEFAULT_CONTEXT_BUDGET = 3000  # whitespace-token estimate

REFUSAL_TEXT = (
    "This question appears to be outside the scope of the source reports, "
    "so no sourced answer can be given."
)
DEGRADED_TEXT = (
    "The answer service is temporarily unavailable. The retrieved sources are "
    "listed below; please try again."
)

_MARKER = re.compile(r"\[(\d+)\]")

_TEMPLATE_FILES = {
    AudienceMode.GENERAL_PUBLIC: "system_general_public.txt",
    AudienceMode.EXPERT: "system_expert.txt",
    AudienceMode.CHILDREN: "system_children.txt",
}
_template_cache: dict[AudienceMode, str] = {}


def system_template(mode: AudienceMode) -> str:
    if mode not in _template_cache:
        name = _TEMPLATE_FILES[mode]
        _template_cache[mode] = (
            resources.files("corpusqa.data.prompts").joinpath(name).read_text("utf-8").strip()
        )
    return _template_cache[mode]


@dataclass(frozen=True)
class ContextBlock:
    ref_number: int
    passage_id: str
    text: str
    doc_title: str
    section_path: tuple[str, ...]
    pages: tuple[int, int]


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    context_blocks: tuple[ContextBlock, ...]
    audience_mode: AudienceMode
    token_estimate: int

    def rendered_user_message(self) -> str:
        lines = ["Source excerpts:"]
        for block in self.context_blocks:
            pages = (
                f"p. {block.pages[0]}"
                if block.pages[0] == block.pages[1]
                else f"pp. {block.pages[0]}-{block.pages[1]}"
            )
            lines.append(f"[{block.ref_number}] ({block.doc_title}, {pages}) {block.text}")
        if not self.context_blocks:
            lines.append("(none)")
        lines.append("")
        lines.append(f"Question: {self.user_text}")
        return "\n".join(lines)

    def to_messages(self) -> list[dict]:
        return [
            {"role": "SYSTEM", "text": self.system_text},
            {"role": "USER", "text": self.rendered_user_message()},
        ]


@dataclass(frozen=True)
class SourceRef:
    ref_number: int
    passage_id: str
    doc_title: str
    section_path: tuple[str, ...]
    pages: tuple[int, int]
    snippet: str


@dataclass(frozen=True)
class AnswerBundle:
    answer_text: str
    citations: tuple[int, ...]
    sources: tuple[SourceRef, ...]
    degraded: bool = False
    refusal: bool = False


def _snippet(text: str, limit: int = 200) -> str:
    return text if len(text) <= limit else text[: limit - 1].rstrip() + "…"


def build_prompt(
    query: Query,
    hits: list[RetrievalHit],
    store: CorpusStore,
    mode: AudienceMode | None = None,
    budget: int = DEFAULT_CONTEXT_BUDGET,
) -> PromptBundle:
    """Pack question and hits into a prompt; byte-identical for identical input.

    Blocks beyond the token budget are dropped whole from the lowest rank up;
    ContextOverflow is raised only if even a single-block prompt cannot fit.
    """
    mode = mode or query.audience_mode
    blocks: list[ContextBlock] = []
    for hit in sorted(hits, key=lambda h: h.rank)[:MAX_CONTEXT_BLOCKS]:
        passage = store.passages[hit.passage_id]
        manifest, section_path, page_start, page_end = store.lookup_source(hit.passage_id)
        blocks.append(
            ContextBlock(
                ref_number=len(blocks) + 1,
                passage_id=hit.passage_id,
                text=passage.text,
                doc_title=manifest.title,
                section_path=section_path,
                pages=(page_start, page_end),
            )
        )

    question = query.reformulated_text or query.raw_text

    def bundle_with(kept: list[ContextBlock]) -> PromptBundle:
        trial = PromptBundle(
            system_text=system_template(mode),
            user_text=question,
            context_blocks=tuple(kept),
            audience_mode=mode,
            token_estimate=0,
        )
        estimate = count_tokens(trial.system_text) + count_tokens(trial.rendered_user_message())
        return PromptBundle(
            system_text=trial.system_text,
            user_text=trial.user_text,
            context_blocks=trial.context_blocks,
            audience_mode=mode,
            token_estimate=estimate,
        )

    kept = blocks
    bundle = bundle_with(kept)
    while bundle.token_estimate > budget and len(kept) > 1:
        kept = kept[:-1]
        bundle = bundle_with(kept)
    if bundle.token_estimate > budget:
        raise ContextOverflow(
            f"single-block prompt needs {bundle.token_estimate} tokens, budget is {budget}"
        )
    return bundle


def _parse_citations(text: str, n_blocks: int) -> tuple[str, tuple[int, ...]]:
    cited: list[int] = []

    def check(match: re.Match) -> str:
        n = int(match.group(1))
        if 1 <= n <= n_blocks:
            if n not in cited:
                cited.append(n)
            return match.group(0)
        logger.warning("stripping out-of-range citation marker [%d] (have %d blocks)", n, n_blocks)
        return ""

    cleaned = _MARKER.sub(check, text)
    return cleaned, tuple(cited)


def _sources_for(prompt: PromptBundle) -> tuple[SourceRef, ...]:
    return tuple(
        SourceRef(
            ref_number=b.ref_number,
            passage_id=b.passage_id,
            doc_title=b.doc_title,
            section_path=b.section_path,
            pages=b.pages,
            snippet=_snippet(b.text),
        )
        for b in prompt.context_blocks
    )


def assemble_answer(prompt: PromptBundle, raw_text: str, degraded: bool = False) -> AnswerBundle:
    answer_text, citations = _parse_citations(raw_text, len(prompt.context_blocks))
    return AnswerBundle(
        answer_text=answer_text,
        citations=citations,
        sources=_sources_for(prompt),
        degraded=degraded,
        refusal=False,
    )


def refusal_answer() -> AnswerBundle:
    """Fixed, deterministic refusal when retrieval found no usable sources."""
    return AnswerBundle(
        answer_text=REFUSAL_TEXT,
        citations=(),
        sources=(),
        degraded=False,
        refusal=True,
    )


def generate_answer(prompt: PromptBundle, backend) -> AnswerBundle:
    """Query the backend and parse the reply into a sourced answer.

    Backend exhaustion degrades to a fixed error answer that still carries
    the retrieved sources.
    """
    try:
        reply = backend.complete(prompt.to_messages())
    except BackendUnavailable:
        return AnswerBundle(
            answer_text=DEGRADED_TEXT,
            citations=(),
            sources=_sources_for(prompt),
            degraded=True,
            refusal=False,
        )
    return assemble_answer(prompt, reply.get("text", ""))


def stream_answer(prompt: PromptBundle, backend) -> Iterator[str]:
    """Yield answer deltas; the caller assembles them with assemble_answer."""
    yield from backend.stream(prompt.to_messages())


# --- backends ---

class StubBackend:
    """Deterministic offline backend.

    Scripted replies are keyed by a hash of the full message list (see
    message_key); without a script entry it falls back to a template answer
    that cites every provided source block.
    """

    def __init__(self, scripted: dict[str, str] | None = None, delta_words: int = 4) -> None:
        self.scripted = scripted or {}
        self.delta_words = delta_words
        self.calls: list[list[dict]] = []  # recorded for assertions in tests

    @staticmethod
    def message_key(messages: list[dict]) -> str:
        canonical = json.dumps(
            [{"role": m["role"], "text": m["text"]} for m in messages],
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def _template_reply(self, messages: list[dict]) -> str:
        user = next((m["text"] for m in reversed(messages) if m["role"] == "USER"), "")
        refs = []
        for line in user.splitlines():
            match = re.match(r"\[(\d+)\]\s", line)
            if match:
                refs.append(int(match.group(1)))
        if not refs:
            return user  # no source blocks: act as the identity reformulator
        markers = "".join(f"[{n}]" for n in refs)
        return f"Based on the provided excerpts, the sources address this question directly {markers}."

    def complete(self, messages: list[dict]) -> dict:
        self.calls.append(messages)
        text = self.scripted.get(self.message_key(messages))
        if text is None:
            text = self._template_reply(messages)
        return {"text": text, "finish_reason": "stop"}

    def stream(self, messages: list[dict]) -> Iterator[str]:
        words = self.complete(messages)["text"].split(" ")
        for i in range(0, len(words), self.delta_words):
            chunk = " ".join(words[i : i + self.delta_words])
            if i + self.delta_words < len(words):
                chunk += " "
            yield chunk


class HttpChatBackend:
    """Adapter for a chat-completion HTTP service.

    POST {"messages": [{"role", "text"}], "stream": bool} returning either
    {"text", "finish_reason"} or an SSE stream of `delta` events closed by a
    `done` event.
    """

    def __init__(
        self,
        endpoint: str = "",
        api_key: str = "",
        attempts: int = 3,
        backoff_base: float = 0.2,
        client: httpx.Client | None = None,
    ) -> None:
        self.endpoint = endpoint or os.environ.get(ENV_ENDPOINT, "")
        if not self.endpoint:
            raise ValueError(f"chat backend needs an endpoint or {ENV_ENDPOINT}")
        self.api_key = api_key or os.environ.get(ENV_KEY, "")
        self.attempts = attempts
        self.backoff_base = backoff_base
        self._client = client or httpx.Client(timeout=60.0)

    def _headers(self) -> dict:
        return {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}

    def complete(self, messages: list[dict]) -> dict:
        payload = {"messages": messages, "stream": False}
        last_err: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                time.sleep(self.backoff_base * (2 ** (attempt - 1)))
            try:
                resp = self._client.post(self.endpoint, json=payload, headers=self._headers())
            except httpx.HTTPError as exc:
                last_err = exc
                continue
            if resp.status_code != 200:
                last_err = BackendUnavailable(f"status {resp.status_code}")
                continue
            body = resp.json()
            return {"text": body.get("text", ""), "finish_reason": body.get("finish_reason", "stop")}
        raise BackendUnavailable(f"chat endpoint failed after {self.attempts} attempts: {last_err}")

    def stream(self, messages: list[dict]) -> Iterator[str]:
        payload = {"messages": messages, "stream": True}
        try:
            with self._client.stream(
                "POST", self.endpoint, json=payload, headers=self._headers()
            ) as resp:
                if resp.status_code != 200:
                    raise BackendUnavailable(f"status {resp.status_code}")
                event = ""
                for line in resp.iter_lines():
                    if line.startswith("event:"):
                        event = line.split(":", 1)[1].strip()
                    elif line.startswith("data:"):
                        data = line.split(":", 1)[1].strip()
                        if event == "delta" and data:
                            yield json.loads(data).get("delta", "")
                        elif event == "done":
                            return
        except httpx.HTTPError as exc:
            raise BackendUnavailable(str(exc)) from exc
