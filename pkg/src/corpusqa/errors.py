"""Exception types shared across the corpusqa modules."""

from __future__ import annotations


class CorpusQAError(Exception):
    """Base class for all corpusqa errors."""


# --- ingestion ---

class MalformedInput(CorpusQAError):
    def __init__(self, line_no: int, reason: str) -> None:
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DanglingParent(CorpusQAError):
    pass


class CyclicHierarchy(CorpusQAError):
    pass


class DuplicateId(CorpusQAError):
    pass


class UnknownPassage(CorpusQAError):
    pass


class CorruptStoreFile(CorpusQAError):
    pass


# --- embedding ---

class EmptyText(CorpusQAError):
    pass


class RemoteUnavailable(CorpusQAError):
    """Remote embedding service unreachable after retries."""


class DimensionMismatch(CorpusQAError):
    pass


# --- vector index ---

class DimMismatch(CorpusQAError):
    pass


class DuplicatePassageId(CorpusQAError):
    pass


class CorruptIndexFile(CorpusQAError):
    pass


# --- retrieval ---

class EmptyCorpus(CorpusQAError):
    pass


class AllFiltered(CorpusQAError):
    """Every candidate was dropped; the caller must answer with a refusal."""


# --- generation ---

class ContextOverflow(CorpusQAError):
    pass


class BackendUnavailable(CorpusQAError):
    """Chat backend unreachable after retries."""


# --- analytics ---

class ParseError(CorpusQAError):
    def __init__(self, line_no: int, reason: str) -> None:
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class TooFewQuestions(CorpusQAError):
    pass
