"""Question-log analytics: exclusion, clustering, topic naming, intent, report.

Mirrors the production workflow for a logged question sample: drop exact
duplicates and unclassifiable questions, cluster the rest on dense embeddings
(PCA reduction + density clustering), auto-name clusters with class-based
TF-IDF, map clusters onto the shipped 14-topic taxonomy, tag general vs
personal intent, and emit the topic-share report.

The stack is deliberately deterministic: same inputs and seed give
byte-identical artifacts.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from importlib import resources
from typing import IO, Iterable

import numpy as np

from .embedding import ReferenceEmbedder
from .errors import ParseError, TooFewQuestions

_WS = re.compile(r"\s+")
_WORD = re.compile(r"[\w'’-]+", re.UNICODE)


class ExclusionReason(str, Enum):
    DUPLICATE = "DUPLICATE"
    UNCLASSIFIABLE = "UNCLASSIFIABLE"


class Intent(str, Enum):
    GENERAL = "GENERAL"
    PERSONAL = "PERSONAL"


@dataclass
class CleanQuestion:
    record_id: str
    text: str  # trimmed, whitespace-collapsed
    excluded: ExclusionReason | None = None


@dataclass
class TopicCluster:
    cluster_id: int  # -1 = noise/unclassifiable
    member_ids: list[str]
    label_terms: list[str] = field(default_factory=list)
    assigned_topic: str | None = None
    needs_review: bool = False

    @property
    def size(self) -> int:
        return len(self.member_ids)


@dataclass(frozen=True)
class TaxonomyTopic:
    code: str
    name: str
    seeds: tuple[str, ...]


class Taxonomy:
    """The 14 shipped topic codes, in report order, with seed keyword lists."""

    def __init__(self, topics: list[TaxonomyTopic]) -> None:
        self.topics = topics
        self.by_code = {t.code: t for t in topics}
        self.order = {t.code: i for i, t in enumerate(topics)}

    @classmethod
    def load_default(cls) -> "Taxonomy":
        raw = resources.files("corpusqa.data").joinpath("taxonomy.json").read_text("utf-8")
        doc = json.loads(raw)
        return cls(
            [TaxonomyTopic(t["code"], t["name"], tuple(t["seeds"])) for t in doc["topics"]]
        )


def default_stopwords() -> frozenset[str]:
    raw = resources.files("corpusqa.data").joinpath("stopwords.txt").read_text("utf-8")
    return frozenset(
        line.strip().lower()
        for line in raw.splitlines()
        if line.strip() and not line.startswith("#")
    )


def load_intent_markers() -> tuple[frozenset[str], tuple[str, ...], tuple[str, ...]]:
    """Returns (single tokens, phrases, token prefixes) from the shipped file."""
    raw = resources.files("corpusqa.data").joinpath("intent_markers.txt").read_text("utf-8")
    tokens: set[str] = set()
    phrases: list[str] = []
    prefixes: list[str] = []
    for line in raw.splitlines():
        entry = line.strip().lower()
        if not entry or entry.startswith("#"):
            continue
        if " " in entry:
            phrases.append(entry)
        elif entry.endswith("'"):
            prefixes.append(entry)
        else:
            tokens.add(entry)
    return frozenset(tokens), tuple(phrases), tuple(prefixes)


@dataclass
class AnalyticsParams:
    seed: int = 0
    min_cluster_size: int = 5
    reduce_dims: int = 8
    knn: int = 5
    eps_scale: float = 1.0
    label_terms: int = 4
    unclassifiable_floor: float = 0.05
    embed_dim: int = 256


def normalize_question(text: str) -> str:
    return _WS.sub(" ", text).strip()


def _tokens(text: str) -> list[str]:
    return [t.lower() for t in _WORD.findall(text)]


# --- question log parsing ---

def load_question_log(source: IO[str] | str | Iterable[str]) -> list[dict]:
    """Parse the qa_service export format (JSON lines of question records)."""
    if isinstance(source, str):
        lines: Iterable[str] = source.splitlines()
    else:
        lines = source
    records = []
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(rec, dict) or "raw_text" not in rec:
            raise ParseError(line_no, "record must be an object with a 'raw_text' field")
        if "record_id" not in rec:
            rec = {**rec, "record_id": f"q{line_no:06d}"}
        records.append(rec)
    return records


# --- cleaning ---

class _SeedMatcher:
    def __init__(self, taxonomy: Taxonomy, stopwords: frozenset[str], embedder) -> None:
        self.stopwords = stopwords
        self.embedder = embedder
        words: set[str] = set()
        for topic in taxonomy.topics:
            for seed in topic.seeds:
                words.update(w for w in _tokens(seed) if w not in stopwords and len(w) > 2)
        self.seed_words = frozenset(words)
        self._centroids: np.ndarray | None = None
        self._taxonomy = taxonomy

    def has_seed_word(self, text: str) -> bool:
        return any(t in self.seed_words for t in _tokens(text))

    def max_centroid_cosine(self, text: str) -> float:
        if self._centroids is None:
            self._centroids = topic_seed_centroids(self._taxonomy, self.embedder)
        vec = self.embedder.embed_one(text).values
        return float(np.max(self._centroids @ vec))


def topic_seed_centroids(taxonomy: Taxonomy, embedder) -> np.ndarray:
    """One unit row per topic: the normalized mean of its seed embeddings."""
    rows = []
    for topic in taxonomy.topics:
        vecs = embedder.embed(list(topic.seeds))
        mean = np.mean([v.values for v in vecs], axis=0)
        norm = np.linalg.norm(mean)
        rows.append(mean / norm if norm > 0 else mean)
    return np.asarray(rows)


def clean(
    records: list[dict],
    taxonomy: Taxonomy | None = None,
    embedder=None,
    params: AnalyticsParams | None = None,
    stopwords: frozenset[str] | None = None,
) -> list[CleanQuestion]:
    """Mark exact duplicates (first occurrence kept) and unclassifiable questions.

    Unclassifiable = fewer than 3 tokens, or no taxonomy seed word and below
    the similarity floor to every topic centroid.
    """
    params = params or AnalyticsParams()
    taxonomy = taxonomy or Taxonomy.load_default()
    embedder = embedder or ReferenceEmbedder(dim=params.embed_dim)
    matcher = _SeedMatcher(taxonomy, stopwords or default_stopwords(), embedder)

    seen: set[str] = set()
    out: list[CleanQuestion] = []
    for rec in records:
        text = normalize_question(rec["raw_text"])
        question = CleanQuestion(record_id=rec["record_id"], text=text)
        if text in seen:
            question.excluded = ExclusionReason.DUPLICATE
        else:
            seen.add(text)
            if len(text.split()) < 3:
                question.excluded = ExclusionReason.UNCLASSIFIABLE
            elif not matcher.has_seed_word(text):
                if matcher.max_centroid_cosine(text) < params.unclassifiable_floor:
                    question.excluded = ExclusionReason.UNCLASSIFIABLE
        out.append(question)
    return out


# --- clustering ---

def _pca_reduce(matrix: np.ndarray, r: int) -> np.ndarray:
    """Principal components with a deterministic sign convention."""
    centered = matrix - matrix.mean(axis=0, keepdims=True)
    if not np.any(centered):
        return np.zeros((matrix.shape[0], min(r, matrix.shape[1])))
    _u, _s, vt = np.linalg.svd(centered, full_matrices=False)
    r = min(r, vt.shape[0])
    components = vt[:r]
    for i in range(r):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    return centered @ components.T


class _UnionFind:
    def __init__(self, n: int) -> None:
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def cluster(
    questions: list[CleanQuestion],
    params: AnalyticsParams | None = None,
    embedder=None,
) -> list[TopicCluster]:
    """Density-cluster the non-excluded questions; unassigned points go to -1.

    Embed -> PCA to reduce_dims -> core points (>= min_cluster_size neighbours
    within eps, eps = median k-NN distance x eps_scale) merged single-linkage;
    non-core points attach to the nearest core within eps.
    """
    params = params or AnalyticsParams()
    embedder = embedder or ReferenceEmbedder(dim=params.embed_dim)
    alive = [q for q in questions if q.excluded is None]
    if len(alive) < params.min_cluster_size:
        raise TooFewQuestions(
            f"{len(alive)} usable questions, need at least {params.min_cluster_size}"
        )
    # deterministic regardless of input order
    alive.sort(key=lambda q: q.record_id)
    n = len(alive)

    matrix = np.asarray([embedder.embed_one(q.text).values for q in alive], dtype=np.float64)
    reduced = _pca_reduce(matrix, params.reduce_dims)

    sq = np.einsum("ij,ij->i", reduced, reduced)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (reduced @ reduced.T), 0.0)
    dist = np.sqrt(d2)

    k = min(params.knn, n - 1)
    knn_dist = np.sort(dist, axis=1)[:, k]  # column 0 is self
    eps = float(np.median(knn_dist)) * params.eps_scale

    within = dist <= eps
    neighbor_counts = within.sum(axis=1)  # includes self
    core = neighbor_counts >= params.min_cluster_size

    uf = _UnionFind(n)
    core_idx = np.nonzero(core)[0]
    for i in core_idx:
        linked = core_idx[(core_idx > i) & within[i, core_idx]]
        for j in linked:
            uf.union(int(i), int(j))

    assignment = [-1] * n
    root_of_core: dict[int, int] = {}
    for i in core_idx:
        root_of_core[int(i)] = uf.find(int(i))
        assignment[int(i)] = root_of_core[int(i)]
    for i in range(n):
        if core[i]:
            continue
        best: tuple[float, str, int] | None = None
        for j in core_idx:
            if within[i, j]:
                cand = (float(dist[i, j]), alive[int(j)].record_id, root_of_core[int(j)])
                if best is None or cand[:2] < best[:2]:
                    best = cand
        if best is not None:
            assignment[i] = best[2]

    # relabel roots 0..K-1 by ascending smallest member record_id
    members_by_root: dict[int, list[str]] = {}
    for i, root in enumerate(assignment):
        if root >= 0:
            members_by_root.setdefault(root, []).append(alive[i].record_id)
    ordered_roots = sorted(members_by_root, key=lambda r: min(members_by_root[r]))
    clusters = [
        TopicCluster(cluster_id=new_id, member_ids=sorted(members_by_root[root]))
        for new_id, root in enumerate(ordered_roots)
    ]
    noise = sorted(alive[i].record_id for i in range(n) if assignment[i] == -1)
    if noise:
        clusters.append(TopicCluster(cluster_id=-1, member_ids=noise))
    return clusters


# --- naming ---

def name_cluster(
    target: TopicCluster,
    clusters: list[TopicCluster],
    questions_by_id: dict[str, str],
    stopwords: frozenset[str] | None = None,
    top_m: int = 4,
) -> list[str]:
    """Class-based TF-IDF label: tf(term, cluster) * log(1 + N / cluster_freq)."""
    if target.cluster_id == -1:
        raise ValueError("noise cluster cannot be named")
    stopwords = stopwords if stopwords is not None else default_stopwords()
    real = [c for c in clusters if c.cluster_id != -1]
    n_clusters = len(real)

    def cluster_terms(c: TopicCluster) -> list[str]:
        terms: list[str] = []
        for rid in c.member_ids:
            terms.extend(t for t in _tokens(questions_by_id[rid]) if t not in stopwords)
        return terms

    cluster_freq: dict[str, int] = {}
    for c in real:
        for term in set(cluster_terms(c)):
            cluster_freq[term] = cluster_freq.get(term, 0) + 1

    tf: dict[str, int] = {}
    for term in cluster_terms(target):
        tf[term] = tf.get(term, 0) + 1
    if not tf:
        return []
    scored = sorted(
        tf.items(),
        key=lambda kv: (-(kv[1] * np.log(1.0 + n_clusters / cluster_freq[kv[0]])), kv[0]),
    )
    return [term for term, _count in scored[:top_m]]


def name_all_clusters(
    clusters: list[TopicCluster],
    questions_by_id: dict[str, str],
    stopwords: frozenset[str] | None = None,
    top_m: int = 4,
) -> None:
    for c in clusters:
        if c.cluster_id == -1:
            continue
        c.label_terms = name_cluster(c, clusters, questions_by_id, stopwords, top_m)
        c.needs_review = not c.label_terms


# --- topic assignment ---

def assign_topic(
    target: TopicCluster,
    taxonomy: Taxonomy,
    questions_by_id: dict[str, str],
    embedder=None,
    overrides: dict[int, str] | None = None,
    seed_centroids: np.ndarray | None = None,
) -> str:
    """Nearest taxonomy seed centroid by cosine; ties follow taxonomy order."""
    if overrides and target.cluster_id in overrides:
        return overrides[target.cluster_id]
    embedder = embedder or ReferenceEmbedder()
    if seed_centroids is None:
        seed_centroids = topic_seed_centroids(taxonomy, embedder)
    vecs = [embedder.embed_one(questions_by_id[rid]).values for rid in target.member_ids]
    mean = np.mean(vecs, axis=0)
    norm = np.linalg.norm(mean)
    centroid = mean / norm if norm > 0 else mean
    scores = seed_centroids @ centroid
    best = int(np.argmax(scores))  # argmax takes the first max: taxonomy order
    return taxonomy.topics[best].code


# --- intent ---

class IntentTagger:
    def __init__(self, overrides: dict[str, Intent] | None = None) -> None:
        self.tokens, self.phrases, self.prefixes = load_intent_markers()
        self.overrides = overrides or {}

    def tag(self, question: CleanQuestion) -> Intent:
        if question.record_id in self.overrides:
            return self.overrides[question.record_id]
        return tag_intent(question.text, self.tokens, self.phrases, self.prefixes)


def tag_intent(
    text: str,
    tokens: frozenset[str] | None = None,
    phrases: tuple[str, ...] | None = None,
    prefixes: tuple[str, ...] | None = None,
) -> Intent:
    """PERSONAL iff a first/second-person marker appears as a whole token."""
    if tokens is None:
        tokens, phrases, prefixes = load_intent_markers()
    words = _tokens(text)
    if any(w in tokens for w in words):
        return Intent.PERSONAL
    if prefixes and any(w.startswith(p) for w in words for p in prefixes):
        return Intent.PERSONAL
    lowered = " ".join(words)
    if phrases and any(p in lowered for p in phrases):
        return Intent.PERSONAL
    return Intent.GENERAL


# --- reporting ---

@dataclass(frozen=True)
class ReportRow:
    topic: str
    name: str
    count: int
    share_pct: Decimal


@dataclass(frozen=True)
class TopicReport:
    rows: tuple[ReportRow, ...]
    total: int
    personal_share_pct: Decimal


def _pct(count: int, total: int) -> Decimal:
    if total == 0:
        return Decimal("0.0")
    return (Decimal(count) * 100 / Decimal(total)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


def report(
    clusters: list[TopicCluster],
    intents: dict[str, Intent],
    taxonomy: Taxonomy | None = None,
) -> TopicReport:
    """Table of per-topic counts and 0.1%-rounded shares; noise is excluded."""
    taxonomy = taxonomy or Taxonomy.load_default()
    counts = {t.code: 0 for t in taxonomy.topics}
    total = 0
    for c in clusters:
        if c.cluster_id == -1:
            continue
        if c.assigned_topic is None:
            raise ValueError(f"cluster {c.cluster_id} has no assigned topic")
        counts[c.assigned_topic] += c.size
        total += c.size
    rows = [
        ReportRow(topic=code, name=taxonomy.by_code[code].name, count=n, share_pct=_pct(n, total))
        for code, n in counts.items()
    ]
    rows.sort(key=lambda r: (-r.count, taxonomy.order[r.topic]))
    personal = sum(1 for rid, intent in intents.items() if intent is Intent.PERSONAL)
    return TopicReport(rows=tuple(rows), total=total, personal_share_pct=_pct(personal, total))


def report_from_counts(
    counts: dict[str, int], personal_count: int, taxonomy: Taxonomy | None = None
) -> TopicReport:
    """Share arithmetic over externally supplied per-topic counts."""
    taxonomy = taxonomy or Taxonomy.load_default()
    total = sum(counts.values())
    rows = [
        ReportRow(
            topic=code,
            name=taxonomy.by_code[code].name,
            count=counts.get(code, 0),
            share_pct=_pct(counts.get(code, 0), total),
        )
        for code in (t.code for t in taxonomy.topics)
    ]
    rows.sort(key=lambda r: (-r.count, taxonomy.order[r.topic]))
    return TopicReport(rows=tuple(rows), total=total, personal_share_pct=_pct(personal_count, total))


def render_text(rep: TopicReport) -> str:
    name_width = max(len(r.name) for r in rep.rows) if rep.rows else 5
    lines = [f"{'Topic':<{name_width}}  {'Count':>6}  {'Share':>6}"]
    for r in rep.rows:
        lines.append(f"{r.name:<{name_width}}  {r.count:>6}  {str(r.share_pct):>5}%")
    lines.append(f"{'Total':<{name_width}}  {rep.total:>6}  100.0%")
    lines.append(f"Personal inquiries: {rep.personal_share_pct}%")
    return "\n".join(lines) + "\n"


def render_csv(rep: TopicReport) -> str:
    lines = ["topic,count,share_pct"]
    for r in rep.rows:
        lines.append(f"{r.topic},{r.count},{r.share_pct}")
    return "\n".join(lines) + "\n"


def clusters_to_json(clusters: list[TopicCluster]) -> str:
    payload = [
        {
            "cluster_id": c.cluster_id,
            "label_terms": c.label_terms,
            "assigned_topic": c.assigned_topic,
            "member_ids": c.member_ids,
            "size": c.size,
        }
        for c in sorted(clusters, key=lambda c: c.cluster_id)
    ]
    return json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


# --- whole pipeline ---

def analyze_log(
    records: list[dict],
    params: AnalyticsParams | None = None,
    taxonomy: Taxonomy | None = None,
    embedder=None,
    topic_overrides: dict[int, str] | None = None,
    intent_overrides: dict[str, Intent] | None = None,
) -> tuple[list[CleanQuestion], list[TopicCluster], TopicReport]:
    params = params or AnalyticsParams()
    taxonomy = taxonomy or Taxonomy.load_default()
    embedder = embedder or ReferenceEmbedder(dim=params.embed_dim)

    cleaned = clean(records, taxonomy, embedder, params)
    clusters = cluster(cleaned, params, embedder)
    questions_by_id = {q.record_id: q.text for q in cleaned}
    name_all_clusters(clusters, questions_by_id, top_m=params.label_terms)
    seed_centroids = topic_seed_centroids(taxonomy, embedder)
    for c in clusters:
        if c.cluster_id != -1:
            c.assigned_topic = assign_topic(
                c, taxonomy, questions_by_id, embedder, topic_overrides, seed_centroids
            )
    tagger = IntentTagger(intent_overrides)
    by_id = {q.record_id: q for q in cleaned}
    intents = {
        rid: tagger.tag(by_id[rid])
        for c in clusters
        if c.cluster_id != -1
        for rid in c.member_ids
    }
    return cleaned, clusters, report(clusters, intents, taxonomy)
