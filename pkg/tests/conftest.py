from __future__ import annotations

import pytest

from corpusqa import index as index_mod
from corpusqa.corpus import IngestConfig, parse_corpus
from corpusqa.embedding import ReferenceEmbedder

import corpusgen


@pytest.fixture(scope="session")
def three_doc_store():
    return parse_corpus(corpusgen.THREE_DOC_JSONL)


@pytest.fixture(scope="session")
def planted():
    """(store, flat_index, embedder, planted rows) for the 500-passage corpus."""
    jsonl, rows = corpusgen.planted_corpus()
    store = parse_corpus(jsonl, IngestConfig(max_chunk_tokens=32))
    embedder = ReferenceEmbedder(dim=256)
    passages = list(store.passages.values())
    vectors = embedder.embed([p.text for p in passages])
    entries = [
        index_mod.IndexEntry(passage_id=p.passage_id, vector=v)
        for p, v in zip(passages, vectors)
    ]
    flat = index_mod.build(entries, index_mod.IndexConfig(kind=index_mod.IndexKind.FLAT_EXACT))
    return store, flat, embedder, rows
