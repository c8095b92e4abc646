"""Top-k cosine search over passage vectors.

Two index kinds behind one interface: FLAT_EXACT scans everything and is the
correctness oracle; CLUSTERED_ANN runs seeded k-means and probes only the
nearest clusters. Both return a total order (score desc, passage_id asc).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .embedding import EmbeddingVector
from .errors import CorruptIndexFile, DimMismatch, DuplicatePassageId

INDEX_FORMAT = "corpusqa-index/v1"
_MAGIC = b"CQAI"
_VERSION = 1


class IndexKind(str, Enum):
    FLAT_EXACT = "FLAT_EXACT"
    CLUSTERED_ANN = "CLUSTERED_ANN"


@dataclass(frozen=True)
class IndexEntry:
    passage_id: str
    vector: EmbeddingVector


@dataclass(frozen=True)
class SearchResult:
    passage_id: str
    score: float


@dataclass
class IndexConfig:
    kind: IndexKind = IndexKind.FLAT_EXACT
    n_clusters: int | None = None  # default ceil(sqrt(N)) at build time
    n_probe: int = 8
    seed: int = 0


class _BaseIndex:
    """Immutable after build; unlimited concurrent searches."""

    kind: IndexKind

    def __init__(self, ids: list[str], matrix: np.ndarray, model_tag: str, seed: int) -> None:
        self.ids = ids
        self.matrix = matrix.astype(np.float32)  # N x dim, unit rows
        self.model_tag = model_tag
        self.seed = seed
        self.dim = matrix.shape[1]
        self._mat64 = self.matrix.astype(np.float64)
        # rank of each row's passage_id in lexicographic order, for tie-breaking
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        for rank, i in enumerate(order):
            self._id_rank[i] = rank

    def __len__(self) -> int:
        return len(self.ids)

    def _check_query(self, query: EmbeddingVector, k: int) -> np.ndarray:
        if query.dim != self.dim:
            raise DimMismatch(f"query dim {query.dim} != index dim {self.dim}")
        if query.model_tag != self.model_tag:
            raise DimMismatch(
                f"query model_tag '{query.model_tag}' != index model_tag '{self.model_tag}'"
            )
        if k < 1:
            raise ValueError("k must be >= 1")
        return np.asarray(query.values, dtype=np.float64)

    def _top(self, candidate_rows: np.ndarray, scores: np.ndarray, k: int) -> list[SearchResult]:
        # ascending (-score, id_rank) is a total order over candidates
        order = np.lexsort((self._id_rank[candidate_rows], -scores))
        top = order[: min(k, len(candidate_rows))]
        return [
            SearchResult(passage_id=self.ids[candidate_rows[i]], score=float(scores[i]))
            for i in top
        ]

    def vector_for_row(self, row: int) -> np.ndarray:
        return self._mat64[row]

    def row_of(self, passage_id: str) -> int:
        # built lazily; only used by near-duplicate suppression
        if not hasattr(self, "_row_by_id"):
            self._row_by_id = {pid: i for i, pid in enumerate(self.ids)}
        return self._row_by_id[passage_id]


class FlatIndex(_BaseIndex):
    kind = IndexKind.FLAT_EXACT

    def search(self, query: EmbeddingVector, k: int) -> list[SearchResult]:
        q = self._check_query(query, k)
        scores = self._mat64 @ q
        rows = np.arange(len(self.ids))
        return self._top(rows, scores, k)


class ClusteredIndex(_BaseIndex):
    kind = IndexKind.CLUSTERED_ANN

    def __init__(
        self,
        ids: list[str],
        matrix: np.ndarray,
        model_tag: str,
        seed: int,
        centroids: np.ndarray,
        assignments: np.ndarray,
        n_probe: int,
    ) -> None:
        super().__init__(ids, matrix, model_tag, seed)
        self.centroids = centroids.astype(np.float32)
        self.assignments = assignments.astype(np.int64)
        self.n_probe = n_probe
        self._cent64 = self.centroids.astype(np.float64)
        self._members: list[np.ndarray] = [
            np.nonzero(self.assignments == c)[0] for c in range(len(self.centroids))
        ]

    def search(self, query: EmbeddingVector, k: int) -> list[SearchResult]:
        q = self._check_query(query, k)
        cscores = self._cent64 @ q
        probe_order = np.lexsort((np.arange(len(cscores)), -cscores))
        probed = probe_order[: min(self.n_probe, len(cscores))]
        rows = np.concatenate([self._members[c] for c in probed])
        scores = self._mat64[rows] @ q
        return self._top(rows, scores, k)


Index = FlatIndex | ClusteredIndex


def _stack_entries(entries: list[IndexEntry]) -> tuple[list[str], np.ndarray, str]:
    if not entries:
        raise ValueError("entries must be non-empty")
    dim = entries[0].vector.dim
    model_tag = entries[0].vector.model_tag
    ids: list[str] = []
    seen: set[str] = set()
    rows = np.empty((len(entries), dim), dtype=np.float32)
    for i, entry in enumerate(entries):
        if entry.vector.dim != dim:
            raise DimMismatch(f"entry '{entry.passage_id}' has dim {entry.vector.dim}, expected {dim}")
        if entry.vector.model_tag != model_tag:
            raise DimMismatch(
                f"entry '{entry.passage_id}' has model_tag '{entry.vector.model_tag}', "
                f"expected '{model_tag}'"
            )
        if entry.passage_id in seen:
            raise DuplicatePassageId(entry.passage_id)
        seen.add(entry.passage_id)
        ids.append(entry.passage_id)
        rows[i] = entry.vector.values
    return ids, rows, model_tag


def _kmeans(matrix: np.ndarray, k: int, seed: int, max_iter: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Spherical k-means with k-means++ init; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    n = matrix.shape[0]
    data = matrix.astype(np.float64)

    # k-means++ on unit vectors: squared distance = 2 - 2 * best_dot
    first = int(rng.integers(n))
    centroid_rows = [first]
    best_dot = data @ data[first]
    for _ in range(1, k):
        d2 = np.maximum(2.0 - 2.0 * best_dot, 0.0)
        total = d2.sum()
        if total <= 0.0:
            nxt = int(rng.integers(n))  # all points coincide with chosen centroids
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centroid_rows.append(nxt)
        best_dot = np.maximum(best_dot, data @ data[nxt])

    centroids = data[centroid_rows].copy()
    assignments = np.full(n, -1, dtype=np.int64)
    for _it in range(max_iter):
        new_assignments = np.argmax(data @ centroids.T, axis=1)
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for c in range(k):
            members = data[assignments == c]
            if len(members) == 0:
                continue  # keep previous centroid for empty clusters
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 0:
                centroids[c] = mean / norm

    # drop empty clusters so every probe hits members
    used = np.unique(assignments)
    remap = {int(c): i for i, c in enumerate(used)}
    assignments = np.array([remap[int(c)] for c in assignments], dtype=np.int64)
    return centroids[used].astype(np.float32), assignments


def build(entries: list[IndexEntry], config: IndexConfig | None = None) -> Index:
    config = config or IndexConfig()
    ids, matrix, model_tag = _stack_entries(entries)
    if config.kind is IndexKind.FLAT_EXACT:
        return FlatIndex(ids, matrix, model_tag, config.seed)
    n = len(ids)
    k = config.n_clusters or math.ceil(math.sqrt(n))
    k = max(1, min(k, n))
    centroids, assignments = _kmeans(matrix, k, config.seed)
    return ClusteredIndex(ids, matrix, model_tag, config.seed, centroids, assignments, config.n_probe)


def search(index: Index, query: EmbeddingVector, k: int) -> list[SearchResult]:
    return index.search(query, k)


# --- persistence ---

def save(index: Index) -> bytes:
    header = {
        "format": INDEX_FORMAT,
        "kind": index.kind.value,
        "dim": index.dim,
        "n": len(index),
        "seed": index.seed,
        "model_tag": index.model_tag,
        "ids": index.ids,
    }
    blobs = [np.ascontiguousarray(index.matrix).tobytes()]
    if isinstance(index, ClusteredIndex):
        header["n_clusters"] = len(index.centroids)
        header["n_probe"] = index.n_probe
        blobs.append(np.ascontiguousarray(index.centroids).tobytes())
        blobs.append(np.ascontiguousarray(index.assignments).tobytes())
    header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    payload = struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(blobs)
    checksum = hashlib.sha256(payload).digest()
    return _MAGIC + struct.pack("<I", _VERSION) + checksum + payload


def load(data: bytes) -> Index:
    if len(data) < 44 or data[:4] != _MAGIC:
        raise CorruptIndexFile("bad magic")
    (version,) = struct.unpack("<I", data[4:8])
    if version != _VERSION:
        raise CorruptIndexFile(f"unsupported version {version}")
    checksum, payload = data[8:40], data[40:]
    if hashlib.sha256(payload).digest() != checksum:
        raise CorruptIndexFile("checksum mismatch")
    try:
        (hlen,) = struct.unpack("<I", payload[:4])
        header = json.loads(payload[4 : 4 + hlen].decode("utf-8"))
        if header.get("format") != INDEX_FORMAT:
            raise CorruptIndexFile(f"missing format tag {INDEX_FORMAT}")
        n, dim = header["n"], header["dim"]
        offset = 4 + hlen
        mat_bytes = n * dim * 4
        matrix = np.frombuffer(payload[offset : offset + mat_bytes], dtype=np.float32).reshape(n, dim)
        offset += mat_bytes
        if header["kind"] == IndexKind.FLAT_EXACT.value:
            return FlatIndex(header["ids"], matrix.copy(), header["model_tag"], header["seed"])
        k = header["n_clusters"]
        cent_bytes = k * dim * 4
        centroids = np.frombuffer(payload[offset : offset + cent_bytes], dtype=np.float32).reshape(k, dim)
        offset += cent_bytes
        assignments = np.frombuffer(payload[offset : offset + n * 8], dtype=np.int64)
        if len(assignments) != n:
            raise CorruptIndexFile("truncated assignment table")
        return ClusteredIndex(
            header["ids"],
            matrix.copy(),
            header["model_tag"],
            header["seed"],
            centroids.copy(),
            assignments.copy(),
            header["n_probe"],
        )
    except CorruptIndexFile:
        raise
    except (KeyError, ValueError, struct.error, json.JSONDecodeError) as exc:
        raise CorruptIndexFile(f"malformed index payload: {exc}") from exc
