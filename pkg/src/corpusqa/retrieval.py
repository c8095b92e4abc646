"""Question → reformulation → vector search → thematic filter → final hits.

The pipeline searches a wide candidate set, drops hits that violate the
report filter or fall outside the climate/biodiversity theme, suppresses
near-duplicates (report corpora repeat summary text verbatim), and keeps the
top hits that will ground the answer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

import numpy as np

from .corpus import CorpusStore
from .embedding import EmbeddingVector
from .errors import AllFiltered, EmptyCorpus
from .index import Index

DEFAULT_K_CANDIDATES = 40
DEFAULT_K_FINAL = 10
DEFAULT_DEDUP_COSINE = 0.98
DEFAULT_CLASSIFIER_THRESHOLD = 0.15


class AudienceMode(str, Enum):
    GENERAL_PUBLIC = "GENERAL_PUBLIC"
    EXPERT = "EXPERT"
    CHILDREN = "CHILDREN"


class TopicFilterMode(str, Enum):
    KEYWORD = "KEYWORD"
    CLASSIFIER = "CLASSIFIER"
    OFF = "OFF"


@dataclass
class Query:
    raw_text: str
    reformulated_text: str | None = None
    language_hint: str | None = None
    report_filter: frozenset[str] | None = None
    audience_mode: AudienceMode = AudienceMode.GENERAL_PUBLIC

    def __post_init__(self) -> None:
        if not self.raw_text.strip():
            raise ValueError("raw_text must be non-empty")


@dataclass(frozen=True)
class RetrievalHit:
    passage_id: str
    score: float
    on_topic: bool
    rank: int


@dataclass
class RetrievalConfig:
    k_candidates: int = DEFAULT_K_CANDIDATES
    k_final: int = DEFAULT_K_FINAL
    dedup_cosine: float = DEFAULT_DEDUP_COSINE
    topic_filter: TopicFilterMode = TopicFilterMode.KEYWORD
    classifier_threshold: float = DEFAULT_CLASSIFIER_THRESHOLD


class Lexicon:
    """Stem list for the keyword topic filter; '#' lines are comments."""

    def __init__(self, stems: list[str]) -> None:
        self.stems = [s for s in (stem.strip().lower() for stem in stems) if s]
        escaped = sorted(re.escape(s) for s in self.stems)
        self._pattern = re.compile(r"\b(?:" + "|".join(escaped) + r")") if escaped else None

    @classmethod
    def from_file(cls, path: str) -> "Lexicon":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_lines(fh)

    @classmethod
    def from_lines(cls, lines) -> "Lexicon":
        stems = []
        for line in lines:
            line = line.split("#", 1)[0].strip()
            if line:
                stems.append(line)
        return cls(stems)

    def matches(self, text: str) -> bool:
        return bool(self._pattern and self._pattern.search(text.lower()))


def default_lexicon() -> Lexicon:
    raw = resources.files("corpusqa.data").joinpath("climate_lexicon.txt").read_text("utf-8")
    return Lexicon.from_lines(raw.splitlines())


class TopicFilter:
    """Relevance gate: does this text discuss the target theme?

    KEYWORD mode matches lexicon stems; CLASSIFIER mode thresholds the cosine
    between the text embedding and the centroid of the lexicon-seed embeddings.
    """

    def __init__(
        self,
        lexicon: Lexicon | None = None,
        embedder=None,
        threshold: float = DEFAULT_CLASSIFIER_THRESHOLD,
    ) -> None:
        self.lexicon = lexicon or default_lexicon()
        self.embedder = embedder
        self.threshold = threshold
        self._centroid: np.ndarray | None = None

    def _seed_centroid(self) -> np.ndarray:
        if self._centroid is None:
            if self.embedder is None:
                raise ValueError("CLASSIFIER mode needs an embedder")
            vecs = self.embedder.embed(self.lexicon.stems)
            mean = np.mean([v.values for v in vecs], axis=0)
            norm = np.linalg.norm(mean)
            self._centroid = mean / norm if norm > 0 else mean
        return self._centroid

    def is_on_topic(self, text: str, mode: TopicFilterMode) -> bool:
        if mode is TopicFilterMode.OFF:
            raise ValueError("topic filter mode OFF cannot classify")
        if mode is TopicFilterMode.KEYWORD:
            return self.lexicon.matches(text)
        vec = self.embedder.embed_one(text)
        return float(np.dot(vec.values, self._seed_centroid())) >= self.threshold


def classify_on_topic(
    passage_text: str,
    mode: TopicFilterMode,
    lexicon: Lexicon | None = None,
    embedder=None,
    threshold: float = DEFAULT_CLASSIFIER_THRESHOLD,
) -> bool:
    return TopicFilter(lexicon, embedder, threshold).is_on_topic(passage_text, mode)


_REFORMULATE_SYSTEM = (
    "Rewrite the user's latest question as a single standalone English question. "
    "Resolve pronouns and references using the earlier conversation turns. "
    "Reply with the rewritten question only."
)


def reformulate(query: Query, llm, history: list[tuple[str, str]] | None = None) -> tuple[str, bool]:
    """Ask the chat backend for a standalone English question.

    Returns (text, degraded). Backend failure degrades to the raw question
    rather than erroring: availability of answers over strictness.
    """
    messages = [{"role": "SYSTEM", "text": _REFORMULATE_SYSTEM}]
    for past_question, past_answer in history or []:
        messages.append({"role": "USER", "text": past_question})
        messages.append({"role": "ASSISTANT", "text": past_answer})
    messages.append({"role": "USER", "text": query.raw_text})
    try:
        reply = llm.complete(messages)
        text = (reply.get("text") or "").strip()
    except Exception:
        return query.raw_text, True
    if not text:
        return query.raw_text, True
    return text, False


def retrieve(
    query: Query,
    index: Index,
    store: CorpusStore,
    config: RetrievalConfig | None = None,
    embedder=None,
    llm=None,
    topic_filter: TopicFilter | None = None,
    history: list[tuple[str, str]] | None = None,
) -> list[RetrievalHit]:
    """Run the full enrichment pipeline and return ranked grounded hits.

    Raises EmptyCorpus when there is nothing to search and AllFiltered when
    every candidate is dropped (the caller must answer with a refusal).
    """
    config = config or RetrievalConfig()
    if len(index) == 0 or not store.passages:
        raise EmptyCorpus("no passages to search")
    if query.report_filter is not None:
        unknown = set(query.report_filter) - set(store.manifests)
        if unknown:
            raise ValueError(f"report_filter references unknown documents: {sorted(unknown)}")

    text = query.reformulated_text
    if text is None:
        text, _ = reformulate(query, llm, history) if llm is not None else (query.raw_text, True)

    qvec: EmbeddingVector = embedder.embed_one(text)
    candidates = index.search(qvec, config.k_candidates)

    if config.topic_filter is not TopicFilterMode.OFF and topic_filter is None:
        topic_filter = TopicFilter(embedder=embedder, threshold=config.classifier_threshold)

    kept: list[tuple[str, float, bool]] = []
    kept_vecs: list[np.ndarray] = []
    for result in candidates:
        passage = store.passages[result.passage_id]
        if query.report_filter is not None and passage.document_id not in query.report_filter:
            continue
        if config.topic_filter is not TopicFilterMode.OFF:
            if not topic_filter.is_on_topic(passage.text, config.topic_filter):
                continue
        vec = index.vector_for_row(index.row_of(result.passage_id))
        if any(float(np.dot(vec, kv)) >= config.dedup_cosine for kv in kept_vecs):
            continue
        kept.append((result.passage_id, result.score, True))
        kept_vecs.append(vec)
        if len(kept) >= config.k_final:
            break

    if not kept:
        raise AllFiltered("no candidate passage survived the filters")
    return [
        RetrievalHit(passage_id=pid, score=score, on_topic=on_topic, rank=i + 1)
        for i, (pid, score, on_topic) in enumerate(kept)
    ]
