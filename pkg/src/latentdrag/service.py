"""HTTP run service: session lifecycle, live progress events, cancellation.

Sessions are kept in a bounded in-memory store (terminal sessions evict
LRU-first). Each run executes on one worker thread and appends events to
the session's log; readers long-poll with an after-index cursor and
always see a gap-free, strictly increasing sequence. Completed results
persist to the output directory with a write-then-rename.
"""

from __future__ import annotations

import io
import json
import logging
import os
import tempfile
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from fastapi import FastAPI, Form, HTTPException, Request, Response, UploadFile
from PIL import Image

from .instruction import EditSpec, SpecParseError, SpecValidationError, parse_spec
from .lro import RunAbortedError, RunEvent, RunResult, make_components, pbsi_run

log = logging.getLogger("latentdrag.service")

STORE_CAPACITY = 32
TERMINAL_STATES = {"done", "failed", "cancelled"}


@dataclass
class Session:
    id: str
    spec: EditSpec
    state: str = "created"  # created -> running -> done | failed | cancelled
    events: List[dict] = field(default_factory=list)
    result: Optional[RunResult] = None
    error: Optional[str] = None
    cancel_flag: threading.Event = field(default_factory=threading.Event)
    components: Dict[str, str] = field(default_factory=dict)
    touched: int = 0  # LRU counter


class SessionStore:
    def __init__(self, capacity: int = STORE_CAPACITY):
        self.capacity = capacity
        self._sessions: Dict[str, Session] = {}
        self._lock = threading.Lock()
        self._clock = 0
        self.changed = threading.Condition(self._lock)

    def add(self, session: Session) -> None:
        with self._lock:
            if len(self._sessions) >= self.capacity:
                self._evict_locked()
            self._clock += 1
            session.touched = self._clock
            self._sessions[session.id] = session

    def _evict_locked(self) -> None:
        terminal = [s for s in self._sessions.values() if s.state in TERMINAL_STATES]
        if not terminal:
            raise HTTPException(429, "session store full and every session is active")
        oldest = min(terminal, key=lambda s: s.touched)
        del self._sessions[oldest.id]

    def get(self, session_id: str) -> Session:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise HTTPException(404, f"unknown session {session_id}")
            self._clock += 1
            session.touched = self._clock
            return session

    def notify(self) -> None:
        with self.changed:
            self.changed.notify_all()


def _decode_png(blob: bytes) -> np.ndarray:
    try:
        return np.asarray(Image.open(io.BytesIO(blob)).convert("RGB"))
    except Exception as exc:
        raise HTTPException(400, f"image: undecodable PNG: {exc}")


def _persist(session: Session, output_dir: Optional[str]) -> None:
    if output_dir is None or session.result is None:
        return
    folder = Path(output_dir) / session.id
    folder.mkdir(parents=True, exist_ok=True)
    # write-then-rename so a crash never leaves a half-written result
    png_bytes = io.BytesIO()
    Image.fromarray(session.result.image, mode="RGB").save(png_bytes, format="PNG")
    manifest = json.dumps(_manifest(session), indent=2).encode("utf-8")
    for name, payload in (("result.png", png_bytes.getvalue()), ("manifest.json", manifest)):
        fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, folder / name)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def _manifest(session: Session) -> dict:
    result = session.result
    return {
        "session_id": session.id,
        "state": session.state,
        "components": session.components,
        "events": len(session.events),
        "cancelled": result.cancelled if result else None,
        "latency_ms": result.latency_ms if result else None,
        "loss_trace": [[t, k, loss] for t, k, loss in result.loss_trace] if result else [],
        "error": session.error,
    }


def create_app(workers: int = 2, queue_size: int = 4,
               output_dir: Optional[str] = None,
               store_capacity: int = STORE_CAPACITY) -> FastAPI:
    store = SessionStore(capacity=store_capacity)
    pool = ThreadPoolExecutor(max_workers=max(1, workers))
    slots = threading.Semaphore(max(1, workers) + max(0, queue_size))

    from contextlib import asynccontextmanager

    @asynccontextmanager
    async def lifespan(_: FastAPI):
        yield
        # cancel in-flight runs and let the pool drain so partial results
        # persist before the process exits
        with store.changed:
            running = [s for s in store._sessions.values() if s.state == "running"]
        for session in running:
            session.cancel_flag.set()
        pool.shutdown(wait=True)

    app = FastAPI(title="latentdrag run service", lifespan=lifespan)
    # the companion UI is served from its own origin at desk scale
    from fastapi.middleware.cors import CORSMiddleware

    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    app.state.store = store
    app.state.pool = pool

    def execute(session: Session) -> None:
        try:
            spec = session.spec
            den, ext, cod, sched = make_components(
                spec,
                session.components.get("denoiser", "zero"),
                session.components.get("extractor", "pyramid"),
                session.components.get("codec", "identity"),
            )

            def sink(event: RunEvent) -> None:
                doc = event.to_json()
                with store.changed:
                    doc["index"] = len(session.events)
                    session.events.append(doc)
                    store.changed.notify_all()

            result = pbsi_run(spec, den, ext, cod, sched, session_id=session.id,
                              event_sink=sink, cancel=session.cancel_flag)
            with store.changed:
                session.result = result
                session.state = "cancelled" if result.cancelled else "done"
                store.changed.notify_all()
        except RunAbortedError as exc:
            with store.changed:
                session.error = str(exc)
                session.state = "failed"
                store.changed.notify_all()
        except Exception as exc:  # keep the worker alive; surface the failure
            log.exception("run %s crashed", session.id)
            with store.changed:
                session.error = f"internal error: {exc}"
                session.state = "failed"
                store.changed.notify_all()
        finally:
            slots.release()
            try:
                _persist(session, output_dir)
            except OSError:
                log.exception("failed to persist result for %s", session.id)

    @app.post("/sessions")
    async def create_session(image: UploadFile, spec: UploadFile):
        image_bytes = await image.read()
        spec_text = (await spec.read()).decode("utf-8", errors="replace")
        raster = _decode_png(image_bytes)
        try:
            parsed = parse_spec(spec_text, image_override=raster)
        except SpecParseError as exc:
            raise HTTPException(400, f"spec {exc.path}: {exc}")
        except SpecValidationError as exc:
            raise HTTPException(400, f"spec invalid: {'; '.join(exc.failures)}")
        session = Session(id=uuid.uuid4().hex, spec=parsed)
        store.add(session)
        return {"id": session.id}

    @app.post("/sessions/{session_id}/run", status_code=202)
    def start_run(session_id: str, request: Request,
                  denoiser: str = Form("zero"), extractor: str = Form("pyramid"),
                  codec: str = Form("identity")):
        session = store.get(session_id)
        with store.changed:
            if session.state != "created":
                raise HTTPException(409, f"session is {session.state}, not created")
            if not slots.acquire(blocking=False):
                raise HTTPException(429, "run queue is full")
            session.state = "running"
            session.components = {"denoiser": denoiser, "extractor": extractor,
                                  "codec": codec}
        pool.submit(execute, session)
        return {"id": session_id, "state": "running"}

    @app.get("/sessions/{session_id}/events")
    def poll_events(session_id: str, after: int = -1, wait_ms: int = 0):
        session = store.get(session_id)
        deadline_s = wait_ms / 1000.0
        with store.changed:
            def page():
                return [e for e in session.events if e["index"] > after]

            events = page()
            if not events and deadline_s > 0 and session.state == "running":
                store.changed.wait(timeout=deadline_s)
                events = page()
            return {"state": session.state, "events": events, "error": session.error}

    @app.post("/sessions/{session_id}/cancel")
    def cancel(session_id: str):
        session = store.get(session_id)
        with store.changed:
            if session.state == "created":
                raise HTTPException(409, "run has not started")
            already = session.state in TERMINAL_STATES and session.state != "cancelled"
            if already:
                raise HTTPException(409, f"session already {session.state}")
        session.cancel_flag.set()
        return {"id": session_id, "state": "cancelling"}

    @app.get("/sessions/{session_id}/result")
    def get_result(session_id: str, format: str = "png"):
        session = store.get(session_id)
        with store.changed:
            state = session.state
        if state == "failed":
            raise HTTPException(409, f"run failed: {session.error}")
        if state not in ("done", "cancelled"):
            raise HTTPException(409, f"result not ready, session is {state}")
        if format == "manifest":
            return _manifest(session)
        buf = io.BytesIO()
        Image.fromarray(session.result.image, mode="RGB").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/healthz")
    def healthz():
        return Response(content="ok", media_type="text/plain")

    return app
