"""corpusqa: retrieval-augmented QA over structured report corpora."""

__version__ = "0.1.0"
