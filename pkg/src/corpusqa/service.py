"""Networked chat service: sessions, settings, streaming answers, question log.

Every ask is logged before generation starts, so the question database grows
even when answering fails. Asks on one session are serialized; distinct
sessions run concurrently over the shared read-only store and index.
"""

from __future__ import annotations

import dataclasses
import json
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import PlainTextResponse, StreamingResponse

from .corpus import CorpusStore
from .errors import AllFiltered, BackendUnavailable, EmptyCorpus
from .generation import (
    DEFAULT_CONTEXT_BUDGET,
    AnswerBundle,
    assemble_answer,
    build_prompt,
    refusal_answer,
    stream_answer,
)
from .index import Index
from .retrieval import AudienceMode, Query, RetrievalConfig, TopicFilter, reformulate, retrieve

MAX_QUESTION_CHARS = 2000
CONTEXT_TURNS = 6
SESSION_TTL_SECONDS = 24 * 3600

_FRENCH_HINTS = {"le", "la", "les", "est", "que", "qui", "pourquoi", "comment", "quoi", "être", "je", "nous", "climat"}
_ENGLISH_HINTS = {"the", "is", "are", "what", "why", "how", "will", "does", "climate", "change"}


def guess_language(text: str) -> str | None:
    tokens = set(text.lower().split())
    fr = len(tokens & _FRENCH_HINTS)
    en = len(tokens & _ENGLISH_HINTS)
    if fr > en:
        return "fr"
    if en > fr:
        return "en"
    return None


@dataclass
class QuestionRecord:
    record_id: str
    session_id: str
    raw_text: str
    language_guess: str | None
    timestamp: float
    answered: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "record_id": self.record_id,
                "session_id": self.session_id,
                "raw_text": self.raw_text,
                "language_guess": self.language_guess,
                "timestamp": self.timestamp,
                "answered": self.answered,
            },
            ensure_ascii=False,
        )


@dataclass
class Turn:
    question: str
    answer: AnswerBundle
    timestamp: float


@dataclass
class Session:
    session_id: str
    created_at: float
    settings: dict = field(default_factory=dict)  # report_filter, audience_mode
    turns: list[Turn] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    last_system_text: str | None = None
    last_ts: float = 0.0


class QuestionLog:
    """In-memory question database mirrored to an append-only JSONL file."""

    def __init__(self, path: Path | None = None) -> None:
        self.path = path
        self.records: list[QuestionRecord] = []
        self._lock = threading.Lock()

    def append(self, record: QuestionRecord) -> None:
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(record.to_json() + "\n")

    def export(self, since: float | None = None, until: float | None = None) -> str:
        with self._lock:
            selected = [
                r
                for r in self.records
                if (since is None or r.timestamp >= since)
                and (until is None or r.timestamp <= until)
            ]
        selected.sort(key=lambda r: r.timestamp)
        return "".join(r.to_json() + "\n" for r in selected)


@dataclass
class ServiceConfig:
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    default_audience: AudienceMode = AudienceMode.GENERAL_PUBLIC
    prompt_budget: int = DEFAULT_CONTEXT_BUDGET
    admin_token: str = ""
    data_dir: Path | None = None
    session_ttl: float = SESSION_TTL_SECONDS
    snapshot_every: int = 50


class QAService:
    def __init__(
        self,
        store: CorpusStore,
        index: Index,
        embedder,
        backend,
        config: ServiceConfig | None = None,
    ) -> None:
        self.store = store
        self.index = index
        self.embedder = embedder
        self.backend = backend
        self.config = config or ServiceConfig()
        log_path = None
        if self.config.data_dir is not None:
            self.config.data_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.config.data_dir / "questions.jsonl"
        self.question_log = QuestionLog(log_path)
        self.sessions: dict[str, Session] = {}
        self._sessions_lock = threading.Lock()
        self._topic_filter = TopicFilter(
            embedder=embedder, threshold=self.config.retrieval.classifier_threshold
        )
        self._asks_since_snapshot = 0

    # --- sessions ---

    def create_session(self, settings: dict | None = None) -> Session:
        session = Session(
            session_id=secrets.token_urlsafe(32),  # 256 bits
            created_at=time.time(),
            settings=self._clean_settings(settings or {}),
        )
        with self._sessions_lock:
            self._expire_sessions()
            self.sessions[session.session_id] = session
        return session

    def get_session(self, session_id: str) -> Session | None:
        with self._sessions_lock:
            session = self.sessions.get(session_id)
            if session is None:
                return None
            if time.time() - session.created_at > self.config.session_ttl:
                del self.sessions[session_id]
                return None
            return session

    def _expire_sessions(self) -> None:
        now = time.time()
        dead = [sid for sid, s in self.sessions.items() if now - s.created_at > self.config.session_ttl]
        for sid in dead:
            del self.sessions[sid]

    def _clean_settings(self, settings: dict) -> dict:
        out: dict = {}
        if "audience_mode" in settings and settings["audience_mode"] is not None:
            out["audience_mode"] = AudienceMode(settings["audience_mode"])
        if "report_filter" in settings and settings["report_filter"] is not None:
            docs = frozenset(settings["report_filter"])
            unknown = docs - set(self.store.manifests)
            if unknown:
                raise ValueError(f"unknown documents in report_filter: {sorted(unknown)}")
            out["report_filter"] = docs
        return out

    # --- asking ---

    def log_question(self, session_id: str, question: str) -> QuestionRecord:
        record = QuestionRecord(
            record_id=secrets.token_hex(16),
            session_id=session_id,
            raw_text=question,
            language_guess=guess_language(question),
            timestamp=time.time(),
        )
        self.question_log.append(record)
        return record

    def answer_turn(self, session: Session, question: str) -> tuple:
        """Run the pipeline for one turn; returns (prompt|None, delta_iter, finish).

        finish(consumed_text) -> AnswerBundle records the turn. The question
        is logged before any generation work.
        """
        record = self.log_question(session.session_id, question)
        settings = session.settings
        mode = settings.get("audience_mode", self.config.default_audience)
        query = Query(
            raw_text=question,
            report_filter=settings.get("report_filter"),
            audience_mode=mode,
        )
        history = [(t.question, t.answer.answer_text) for t in session.turns[-CONTEXT_TURNS:]]
        reformulated, degraded = reformulate(query, self.backend, history)
        query.reformulated_text = reformulated

        def record_turn(answer: AnswerBundle) -> AnswerBundle:
            record.answered = True
            ts = max(time.time(), session.last_ts + 1e-6)
            session.last_ts = ts
            session.turns.append(Turn(question=question, answer=answer, timestamp=ts))
            self._maybe_snapshot()
            return answer

        try:
            hits = retrieve(
                query,
                self.index,
                self.store,
                self.config.retrieval,
                embedder=self.embedder,
                topic_filter=self._topic_filter,
            )
        except (AllFiltered, EmptyCorpus):
            answer = refusal_answer()
            session.last_system_text = None

            def finish_refusal(_: str) -> AnswerBundle:
                return record_turn(answer)

            return None, iter([answer.answer_text]), finish_refusal

        prompt = build_prompt(query, hits, self.store, mode, self.config.prompt_budget)
        session.last_system_text = prompt.system_text
        deltas = stream_answer(prompt, self.backend)

        def finish(full_text: str) -> AnswerBundle:
            return record_turn(assemble_answer(prompt, full_text, degraded=degraded))

        return prompt, deltas, finish

    def _maybe_snapshot(self) -> None:
        if self.config.data_dir is None:
            return
        self._asks_since_snapshot += 1
        if self._asks_since_snapshot >= self.config.snapshot_every:
            self._asks_since_snapshot = 0
            self.save_snapshot()

    def save_snapshot(self) -> None:
        if self.config.data_dir is None:
            return
        payload = []
        with self._sessions_lock:
            for session in self.sessions.values():
                payload.append(
                    {
                        "session_id": session.session_id,
                        "created_at": session.created_at,
                        "settings": {
                            "audience_mode": session.settings.get("audience_mode", self.config.default_audience).value,
                            "report_filter": sorted(session.settings["report_filter"])
                            if session.settings.get("report_filter")
                            else None,
                        },
                        "turns": [
                            {"question": t.question, "answer": t.answer.answer_text, "timestamp": t.timestamp}
                            for t in session.turns
                        ],
                    }
                )
        tmp = self.config.data_dir / "sessions.snapshot.json.tmp"
        tmp.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
        tmp.replace(self.config.data_dir / "sessions.snapshot.json")


def _sse(event: str, data: dict | str) -> str:
    body = data if isinstance(data, str) else json.dumps(data, ensure_ascii=False)
    return f"event: {event}\ndata: {body}\n\n"


def _answer_payload(answer: AnswerBundle) -> dict:
    return {
        "answer_text": answer.answer_text,
        "citations": list(answer.citations),
        "sources": [
            {
                "ref_number": s.ref_number,
                "passage_id": s.passage_id,
                "doc_title": s.doc_title,
                "section_path": list(s.section_path),
                "pages": list(s.pages),
                "snippet": s.snippet,
            }
            for s in answer.sources
        ],
        "degraded": answer.degraded,
        "refusal": answer.refusal,
    }


def create_app(
    store: CorpusStore,
    index: Index,
    embedder,
    backend,
    config: ServiceConfig | None = None,
) -> FastAPI:
    service = QAService(store, index, embedder, backend, config)
    app = FastAPI(title="corpusqa", version="0.1.0")
    app.state.service = service

    @app.get("/v1/health")
    def health() -> dict:
        return {"status": "ok", "documents": len(store.manifests), "passages": len(store.passages)}

    @app.post("/v1/sessions", status_code=201)
    def create_session(body: dict | None = None) -> dict:
        try:
            session = service.create_session((body or {}).get("settings"))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"session_id": session.session_id}

    @app.get("/v1/sessions/{session_id}/debug")
    def session_debug(session_id: str) -> dict:
        session = service.get_session(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return {
            "session_id": session.session_id,
            "settings": {
                "audience_mode": session.settings.get("audience_mode", service.config.default_audience).value,
                "report_filter": sorted(session.settings["report_filter"])
                if session.settings.get("report_filter")
                else None,
            },
            "turns": len(session.turns),
            "last_system_text": session.last_system_text,
        }

    @app.post("/v1/sessions/{session_id}/ask")
    def ask(session_id: str, body: dict) -> StreamingResponse:
        question = (body.get("question") or "").strip()
        if not question:
            raise HTTPException(status_code=400, detail="question must be non-empty")
        if len(question) > MAX_QUESTION_CHARS:
            raise HTTPException(status_code=400, detail=f"question exceeds {MAX_QUESTION_CHARS} characters")
        session = service.get_session(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        if "settings" in body and body["settings"]:
            try:
                session.settings.update(service._clean_settings(body["settings"]))
            except ValueError as exc:
                raise HTTPException(status_code=400, detail=str(exc))

        session.lock.acquire()  # serialize asks on the same session
        try:
            prompt, deltas, finish = service.answer_turn(session, question)
            first_delta = next(deltas, None)  # backend connects here; 503 if exhausted
        except BackendUnavailable:
            session.lock.release()
            raise HTTPException(status_code=503, detail="answer backend unavailable")
        except Exception:
            session.lock.release()
            raise

        def event_stream():
            try:
                parts: list[str] = []
                degraded_mid_stream = False
                try:
                    if first_delta is not None:
                        parts.append(first_delta)
                        yield _sse("delta", {"text": first_delta})
                    for delta in deltas:
                        parts.append(delta)
                        yield _sse("delta", {"text": delta})
                except BackendUnavailable:
                    degraded_mid_stream = True
                answer = finish("".join(parts))
                if degraded_mid_stream:
                    answer = dataclasses.replace(answer, degraded=True)
                yield _sse("sources", _answer_payload(answer))
                yield _sse("done", {})
            finally:
                session.lock.release()

        return StreamingResponse(event_stream(), media_type="text/event-stream")

    @app.get("/v1/sources/{passage_id}")
    def source(passage_id: str) -> dict:
        passage = store.passages.get(passage_id)
        if passage is None:
            raise HTTPException(status_code=404, detail="unknown passage")
        manifest, section_path, page_start, page_end = store.lookup_source(passage_id)
        return {
            "passage_id": passage_id,
            "document_id": passage.document_id,
            "doc_title": manifest.title,
            "section_path": list(section_path),
            "pages": [page_start, page_end],
            "text": passage.text,
        }

    @app.get("/v1/admin/questions")
    def admin_questions(request: Request, since: float | None = None, until: float | None = None):
        token = service.config.admin_token
        if not token:
            raise HTTPException(status_code=403, detail="admin export disabled (no token configured)")
        auth = request.headers.get("authorization", "")
        if auth != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")
        if since is not None and until is not None and since > until:
            raise HTTPException(status_code=400, detail="since must be <= until")
        return PlainTextResponse(service.question_log.export(since, until), media_type="application/x-ndjson")

    return app
