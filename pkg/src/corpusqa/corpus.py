"""Structured corpus ingestion: manifests, document nodes, and derived passages.

Input is a JSON-lines interchange stream (one manifest record per document,
followed by its node records). The parsed store keeps the document hierarchy
(sections own paragraphs/figures/tables, paragraphs cite figures) and derives
retrievable passages by merging consecutive sibling paragraphs.
"""

from __future__ import annotations

import hashlib
import io
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Iterator

from .errors import (
    CorruptStoreFile,
    CyclicHierarchy,
    DanglingParent,
    DuplicateId,
    MalformedInput,
    UnknownPassage,
)

STORE_FORMAT = "corpusqa-store/v1"

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


class Publisher(str, Enum):
    IPCC = "IPCC"
    IPBES = "IPBES"
    OTHER = "OTHER"


class ReportKind(str, Enum):
    FULL_REPORT = "FULL_REPORT"
    SUMMARY_FOR_POLICYMAKERS = "SUMMARY_FOR_POLICYMAKERS"
    SPECIAL_REPORT = "SPECIAL_REPORT"
    CROSS_CHAPTER = "CROSS_CHAPTER"
    OTHER = "OTHER"


class NodeKind(str, Enum):
    SECTION = "SECTION"
    PARAGRAPH = "PARAGRAPH"
    FIGURE = "FIGURE"
    TABLE = "TABLE"


@dataclass(frozen=True)
class DocumentManifest:
    document_id: str
    title: str
    publisher: Publisher
    report_kind: ReportKind
    page_count: int
    source_uri: str


@dataclass(frozen=True)
class DocumentNode:
    node_id: str
    document_id: str
    kind: NodeKind
    text: str
    page_start: int
    page_end: int
    parent_id: str | None
    order_index: int
    cites: tuple[str, ...] = ()


@dataclass(frozen=True)
class Passage:
    passage_id: str
    document_id: str
    node_ids: tuple[str, ...]
    section_path: tuple[str, ...]
    text: str
    page_start: int
    page_end: int
    token_count: int


@dataclass(frozen=True)
class IngestConfig:
    max_chunk_tokens: int = 512


def count_tokens(text: str) -> int:
    """Whitespace-delimited word count, the token proxy used throughout."""
    return len(text.split())


def _passage_id(document_id: str, first_node: str, last_node: str, part: int) -> str:
    # part > 0 only for pieces of an oversized node split at sentence boundaries
    key = f"{document_id}\x1f{first_node}\x1f{last_node}\x1f{part}"
    return "p" + hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


class CorpusStore:
    """Immutable after build; safe for unlimited concurrent readers."""

    def __init__(
        self,
        manifests: dict[str, DocumentManifest],
        nodes: dict[str, DocumentNode],
        passages: dict[str, Passage],
    ) -> None:
        self.manifests = manifests
        self.nodes = nodes
        self.passages = passages

    @property
    def page_total(self) -> int:
        return sum(m.page_count for m in self.manifests.values())

    def lookup_source(
        self, passage_id: str
    ) -> tuple[DocumentManifest, tuple[str, ...], int, int]:
        """Provenance sufficient to render a page-accurate citation."""
        passage = self.passages.get(passage_id)
        if passage is None:
            raise UnknownPassage(passage_id)
        manifest = self.manifests[passage.document_id]
        return manifest, passage.section_path, passage.page_start, passage.page_end

    # --- serialization ---

    def to_json(self) -> str:
        doc = {
            "format": STORE_FORMAT,
            "manifests": [
                {
                    "document_id": m.document_id,
                    "title": m.title,
                    "publisher": m.publisher.value,
                    "report_kind": m.report_kind.value,
                    "page_count": m.page_count,
                    "source_uri": m.source_uri,
                }
                for m in self.manifests.values()
            ],
            "nodes": [
                {
                    "node_id": n.node_id,
                    "document_id": n.document_id,
                    "kind": n.kind.value,
                    "text": n.text,
                    "page_start": n.page_start,
                    "page_end": n.page_end,
                    "parent_id": n.parent_id,
                    "order_index": n.order_index,
                    "cites": list(n.cites),
                }
                for n in self.nodes.values()
            ],
            "passages": [
                {
                    "passage_id": p.passage_id,
                    "document_id": p.document_id,
                    "node_ids": list(p.node_ids),
                    "section_path": list(p.section_path),
                    "text": p.text,
                    "page_start": p.page_start,
                    "page_end": p.page_end,
                    "token_count": p.token_count,
                }
                for p in self.passages.values()
            ],
        }
        return json.dumps(doc, ensure_ascii=False, sort_keys=False)

    @classmethod
    def from_json(cls, raw: str) -> "CorpusStore":
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorruptStoreFile(f"not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("format") != STORE_FORMAT:
            raise CorruptStoreFile(f"missing or wrong format tag (want {STORE_FORMAT})")
        try:
            manifests = {
                m["document_id"]: DocumentManifest(
                    document_id=m["document_id"],
                    title=m["title"],
                    publisher=Publisher(m["publisher"]),
                    report_kind=ReportKind(m["report_kind"]),
                    page_count=m["page_count"],
                    source_uri=m["source_uri"],
                )
                for m in doc["manifests"]
            }
            nodes = {
                n["node_id"]: DocumentNode(
                    node_id=n["node_id"],
                    document_id=n["document_id"],
                    kind=NodeKind(n["kind"]),
                    text=n["text"],
                    page_start=n["page_start"],
                    page_end=n["page_end"],
                    parent_id=n["parent_id"],
                    order_index=n["order_index"],
                    cites=tuple(n["cites"]),
                )
                for n in doc["nodes"]
            }
            passages = {
                p["passage_id"]: Passage(
                    passage_id=p["passage_id"],
                    document_id=p["document_id"],
                    node_ids=tuple(p["node_ids"]),
                    section_path=tuple(p["section_path"]),
                    text=p["text"],
                    page_start=p["page_start"],
                    page_end=p["page_end"],
                    token_count=p["token_count"],
                )
                for p in doc["passages"]
            }
        except (KeyError, ValueError, TypeError) as exc:
            raise CorruptStoreFile(f"malformed store payload: {exc}") from exc
        return cls(manifests, nodes, passages)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "CorpusStore":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# --- interchange parsing ---

_MANIFEST_FIELDS = ("document_id", "title", "publisher", "report_kind", "page_count", "source_uri")
_NODE_FIELDS = ("node_id", "kind", "order_index", "page_start", "page_end", "text")


def _parse_manifest(rec: dict, line_no: int) -> DocumentManifest:
    for key in _MANIFEST_FIELDS:
        if key not in rec:
            raise MalformedInput(line_no, f"manifest missing field '{key}'")
    try:
        publisher = Publisher(rec["publisher"])
        report_kind = ReportKind(rec["report_kind"])
    except ValueError as exc:
        raise MalformedInput(line_no, str(exc)) from exc
    page_count = rec["page_count"]
    if not isinstance(page_count, int) or page_count < 1:
        raise MalformedInput(line_no, f"page_count must be a positive integer, got {page_count!r}")
    return DocumentManifest(
        document_id=rec["document_id"],
        title=rec["title"],
        publisher=publisher,
        report_kind=report_kind,
        page_count=page_count,
        source_uri=rec["source_uri"],
    )


def _parse_node(rec: dict, document_id: str, line_no: int) -> DocumentNode:
    for key in _NODE_FIELDS:
        if key not in rec:
            raise MalformedInput(line_no, f"node missing field '{key}'")
    try:
        kind = NodeKind(rec["kind"])
    except ValueError as exc:
        raise MalformedInput(line_no, str(exc)) from exc
    text = rec["text"]
    if not isinstance(text, str) or not text.strip():
        raise MalformedInput(line_no, f"node '{rec['node_id']}' has empty text")
    page_start, page_end = rec["page_start"], rec["page_end"]
    order_index = rec["order_index"]
    if not isinstance(page_start, int) or not isinstance(page_end, int) or page_start < 1:
        raise MalformedInput(line_no, "page_start/page_end must be positive integers")
    if not isinstance(order_index, int) or order_index < 0:
        raise MalformedInput(line_no, "order_index must be a non-negative integer")
    cites = rec.get("cites") or []
    if not isinstance(cites, list) or not all(isinstance(c, str) for c in cites):
        raise MalformedInput(line_no, "cites must be a list of node ids")
    return DocumentNode(
        node_id=rec["node_id"],
        document_id=document_id,
        kind=kind,
        text=text,
        page_start=page_start,
        page_end=page_end,
        parent_id=rec.get("parent_id"),
        order_index=order_index,
        cites=tuple(cites),
    )


def _validate_document(
    manifest: DocumentManifest,
    nodes: list[DocumentNode],
    line_of: dict[str, int],
    all_nodes: dict[str, DocumentNode],
) -> None:
    by_id = {n.node_id: n for n in nodes}

    for node in nodes:
        line_no = line_of[node.node_id]
        if node.page_start > node.page_end or node.page_end > manifest.page_count:
            raise MalformedInput(
                line_no,
                f"node '{node.node_id}' pages ({node.page_start},{node.page_end}) exceed "
                f"manifest page_count {manifest.page_count} or are inverted",
            )
        if node.parent_id is not None:
            parent = by_id.get(node.parent_id)
            if parent is None:
                raise DanglingParent(
                    f"node '{node.node_id}' references missing parent '{node.parent_id}'"
                )
            if parent.kind is not NodeKind.SECTION:
                raise MalformedInput(
                    line_no, f"parent of '{node.node_id}' must be a SECTION"
                )
        elif node.kind is not NodeKind.SECTION:
            raise MalformedInput(
                line_no, f"{node.kind.value} node '{node.node_id}' must have a SECTION parent"
            )
        for cited in node.cites:
            target = all_nodes.get(cited) or by_id.get(cited)
            if target is None:
                raise MalformedInput(line_no, f"cites references unknown node '{cited}'")
            if target.kind not in (NodeKind.FIGURE, NodeKind.TABLE):
                raise MalformedInput(
                    line_no, f"cites target '{cited}' is not a FIGURE or TABLE"
                )

    # cycle check over parent links
    state: dict[str, int] = {}  # 0 visiting, 1 done
    for node in nodes:
        chain = []
        cur: DocumentNode | None = node
        while cur is not None and state.get(cur.node_id) is None:
            chain.append(cur.node_id)
            state[cur.node_id] = 0
            cur = by_id.get(cur.parent_id) if cur.parent_id else None
            if cur is not None and state.get(cur.node_id) == 0:
                raise CyclicHierarchy(f"parent cycle through node '{cur.node_id}'")
        for nid in chain:
            state[nid] = 1

    # sibling order uniqueness
    seen: dict[tuple[str | None, int], str] = {}
    for node in nodes:
        key = (node.parent_id, node.order_index)
        if key in seen:
            raise MalformedInput(
                line_of[node.node_id],
                f"order_index {node.order_index} duplicated among siblings "
                f"('{seen[key]}' and '{node.node_id}')",
            )
        seen[key] = node.node_id


def _iter_lines(source: IO[str] | str | Iterable[str]) -> Iterator[str]:
    if isinstance(source, str):
        yield from io.StringIO(source)
    else:
        yield from source


def parse_corpus(source: IO[str] | str | Iterable[str], config: IngestConfig | None = None) -> CorpusStore:
    """Parse a JSON-lines interchange stream into a CorpusStore.

    Raises MalformedInput/DuplicateId/DanglingParent/CyclicHierarchy on bad input.
    """
    config = config or IngestConfig()
    if config.max_chunk_tokens < 32:
        raise ValueError("max_chunk_tokens must be >= 32")

    manifests: dict[str, DocumentManifest] = {}
    nodes: dict[str, DocumentNode] = {}
    doc_nodes: list[DocumentNode] = []
    line_of: dict[str, int] = {}
    current: DocumentManifest | None = None
    passages: dict[str, Passage] = {}

    def finish_document() -> None:
        if current is None:
            return
        _validate_document(current, doc_nodes, line_of, nodes)
        for passage in chunk_document(doc_nodes, config):
            if passage.passage_id in passages:
                raise DuplicateId(f"passage id collision '{passage.passage_id}'")
            passages[passage.passage_id] = passage

    for line_no, line in enumerate(_iter_lines(source), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedInput(line_no, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(rec, dict) or "type" not in rec:
            raise MalformedInput(line_no, "record must be an object with a 'type' field")

        if rec["type"] == "manifest":
            finish_document()
            doc_nodes = []
            manifest = _parse_manifest(rec, line_no)
            if manifest.document_id in manifests:
                raise DuplicateId(f"duplicate document_id '{manifest.document_id}'")
            manifests[manifest.document_id] = manifest
            current = manifest
        elif rec["type"] == "node":
            if current is None:
                raise MalformedInput(line_no, "node record before any manifest")
            node = _parse_node(rec, current.document_id, line_no)
            if node.node_id in nodes:
                raise DuplicateId(f"duplicate node_id '{node.node_id}'")
            nodes[node.node_id] = node
            doc_nodes.append(node)
            line_of[node.node_id] = line_no
        else:
            raise MalformedInput(line_no, f"unknown record type '{rec['type']}'")

    finish_document()
    return CorpusStore(manifests, nodes, passages)


# --- chunking ---

def _split_oversized(text: str, limit: int) -> list[str]:
    """Split text at sentence boundaries into pieces of at most `limit` tokens.

    Sentences longer than the limit are hard-split at `limit` words.
    """
    pieces: list[str] = []
    buf: list[str] = []
    buf_tokens = 0
    for sentence in _SENTENCE_SPLIT.split(text):
        n = count_tokens(sentence)
        if n == 0:
            continue
        if n > limit:
            if buf:
                pieces.append(" ".join(buf))
                buf, buf_tokens = [], 0
            words = sentence.split()
            for i in range(0, len(words), limit):
                pieces.append(" ".join(words[i : i + limit]))
            continue
        if buf_tokens + n > limit and buf:
            pieces.append(" ".join(buf))
            buf, buf_tokens = [], 0
        buf.append(sentence)
        buf_tokens += n
    if buf:
        pieces.append(" ".join(buf))
    return pieces


def _section_path(node: DocumentNode, by_id: dict[str, DocumentNode]) -> tuple[str, ...]:
    titles: list[str] = []
    cur = by_id.get(node.parent_id) if node.parent_id else None
    while cur is not None:
        titles.append(cur.text)
        cur = by_id.get(cur.parent_id) if cur.parent_id else None
    return tuple(reversed(titles))


def chunk_document(nodes: list[DocumentNode], config: IngestConfig | None = None) -> list[Passage]:
    """Derive passages for one document's nodes, in document order.

    Consecutive sibling paragraphs under the same section are merged greedily
    up to max_chunk_tokens; figure/table captions become standalone passages.
    """
    config = config or IngestConfig()
    limit = config.max_chunk_tokens
    by_id = {n.node_id: n for n in nodes}
    children: dict[str | None, list[DocumentNode]] = {}
    for node in nodes:
        children.setdefault(node.parent_id, []).append(node)
    for siblings in children.values():
        siblings.sort(key=lambda n: n.order_index)

    passages: list[Passage] = []

    def emit(run: list[DocumentNode]) -> None:
        if not run:
            return
        document_id = run[0].document_id
        path = _section_path(run[0], by_id)
        total = sum(count_tokens(n.text) for n in run)
        if total <= limit:
            text = "\n".join(n.text for n in run)
            pid = _passage_id(document_id, run[0].node_id, run[-1].node_id, 0)
            passages.append(
                Passage(
                    passage_id=pid,
                    document_id=document_id,
                    node_ids=tuple(n.node_id for n in run),
                    section_path=path,
                    text=text,
                    page_start=min(n.page_start for n in run),
                    page_end=max(n.page_end for n in run),
                    token_count=total,
                )
            )
        else:
            # single oversized node: split at sentence boundaries
            assert len(run) == 1, "greedy packing never overfills multi-node runs"
            node = run[0]
            for part, piece in enumerate(_split_oversized(node.text, limit)):
                pid = _passage_id(document_id, node.node_id, node.node_id, part)
                passages.append(
                    Passage(
                        passage_id=pid,
                        document_id=document_id,
                        node_ids=(node.node_id,),
                        section_path=path,
                        text=piece,
                        page_start=node.page_start,
                        page_end=node.page_end,
                        token_count=count_tokens(piece),
                    )
                )

    def walk(section: DocumentNode | None, kids: list[DocumentNode]) -> None:
        run: list[DocumentNode] = []
        run_tokens = 0
        for child in kids:
            if child.kind is NodeKind.PARAGRAPH:
                n = count_tokens(child.text)
                if n > limit:
                    emit(run)
                    run, run_tokens = [], 0
                    emit([child])
                elif run and run_tokens + n > limit:
                    emit(run)
                    run, run_tokens = [child], n
                else:
                    run.append(child)
                    run_tokens += n
            else:
                # a non-paragraph child breaks the consecutive-paragraph run
                emit(run)
                run, run_tokens = [], 0
                if child.kind in (NodeKind.FIGURE, NodeKind.TABLE):
                    emit([child])
                else:
                    walk(child, children.get(child.node_id, []))
        emit(run)

    roots = [n for n in children.get(None, []) if n.kind is NodeKind.SECTION]
    for root in roots:
        walk(root, children.get(root.node_id, []))
    return passages
