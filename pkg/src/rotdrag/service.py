"""HTTP facade for interactive editing.

Sessions hold an uploaded image plus point pairs and a mask; edits run as
asynchronous jobs with a live line-delimited progress stream. Everything is
persisted to a content-addressed file store under the data directory, so a
restarted server still knows its sessions and finished jobs.
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.responses import JSONResponse, StreamingResponse
from PIL import Image, UnidentifiedImageError

from rotdrag import cases as caseio
from rotdrag.diffusion import ZeroDenoiser
from rotdrag.engine import DragConfig, DragSession, StopReason
from rotdrag.features import ReferenceFeatureBackend
from rotdrag.geometry import Point2


class JobState(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"
    CANCELLED = "cancelled"


TERMINAL_STATES = {JobState.DONE, JobState.FAILED, JobState.CANCELLED}
ALLOWED_TRANSITIONS = {
    JobState.QUEUED: {JobState.RUNNING, JobState.CANCELLED},
    JobState.RUNNING: {JobState.DONE, JobState.FAILED, JobState.CANCELLED},
    JobState.DONE: set(),
    JobState.FAILED: set(),
    JobState.CANCELLED: set(),
}


class StateTransitionError(RuntimeError):
    """A job was asked to move backward or out of a terminal state."""


class JobCancelled(Exception):
    pass


@dataclass
class JobRecord:
    id: str
    session_id: str
    state: JobState = JobState.QUEUED
    error: str | None = None
    stop_reason: str | None = None
    created_at: float = field(default_factory=time.time)
    updated_at: float = field(default_factory=time.time)

    def transition(self, new_state: JobState) -> None:
        if new_state not in ALLOWED_TRANSITIONS[self.state]:
            raise StateTransitionError(f"{self.state.value} -> {new_state.value}")
        self.state = new_state
        self.updated_at = time.time()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "session_id": self.session_id,
            "state": self.state.value,
            "error": self.error,
            "stop_reason": self.stop_reason,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }


class Store:
    """Content-addressed blobs plus JSON records on disk."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        (self.root / "blobs").mkdir(parents=True, exist_ok=True)
        (self.root / "sessions").mkdir(parents=True, exist_ok=True)
        (self.root / "jobs").mkdir(parents=True, exist_ok=True)

    def put_blob(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = self.root / "blobs" / digest
        if not path.exists():
            path.write_bytes(data)
        return digest

    def get_blob(self, digest: str) -> bytes:
        return (self.root / "blobs" / digest).read_bytes()

    def session_path(self, session_id: str) -> Path:
        return self.root / "sessions" / f"{session_id}.json"

    def write_session(self, record: dict) -> None:
        self.session_path(record["id"]).write_text(json.dumps(record, indent=2))

    def read_session(self, session_id: str) -> dict | None:
        path = self.session_path(session_id)
        if not path.is_file():
            return None
        return json.loads(path.read_text())

    def job_dir(self, job_id: str) -> Path:
        return self.root / "jobs" / job_id

    def write_job(self, record: JobRecord) -> None:
        d = self.job_dir(record.id)
        d.mkdir(parents=True, exist_ok=True)
        (d / "record.json").write_text(json.dumps(record.to_dict(), indent=2))

    def read_job(self, job_id: str) -> dict | None:
        path = self.job_dir(job_id) / "record.json"
        if not path.is_file():
            return None
        return json.loads(path.read_text())


class JobRegistry:
    """In-memory job table with per-job progress buffers and wakeups."""

    def __init__(self, store: Store) -> None:
        self.store = store
        self.lock = threading.RLock()
        self.jobs: dict[str, JobRecord] = {}
        self.steps: dict[str, list[str]] = {}
        self.cancel_flags: dict[str, bool] = {}
        self.conditions: dict[str, threading.Condition] = {}

    def create(self, session_id: str) -> JobRecord:
        with self.lock:
            for job in self.jobs.values():
                if job.session_id == session_id and job.state not in TERMINAL_STATES:
                    raise RuntimeError("session already has an active job")
            record = JobRecord(id=uuid.uuid4().hex, session_id=session_id)
            self.jobs[record.id] = record
            self.steps[record.id] = []
            self.cancel_flags[record.id] = False
            self.conditions[record.id] = threading.Condition(self.lock)
            self.store.write_job(record)
            return record

    def get(self, job_id: str) -> JobRecord | None:
        with self.lock:
            job = self.jobs.get(job_id)
        if job is not None:
            return job
        # restart path: hydrate finished jobs from disk
        doc = self.store.read_job(job_id)
        if doc is None:
            return None
        record = JobRecord(
            id=doc["id"],
            session_id=doc["session_id"],
            state=JobState(doc["state"]),
            error=doc.get("error"),
            stop_reason=doc.get("stop_reason"),
            created_at=doc.get("created_at", 0.0),
            updated_at=doc.get("updated_at", 0.0),
        )
        with self.lock:
            self.jobs.setdefault(job_id, record)
            self.steps.setdefault(job_id, self._read_steps_from_disk(job_id))
            self.cancel_flags.setdefault(job_id, False)
            self.conditions.setdefault(job_id, threading.Condition(self.lock))
        return self.jobs[job_id]

    def _read_steps_from_disk(self, job_id: str) -> list[str]:
        path = self.store.job_dir(job_id) / "trajectory.jsonl"
        if not path.is_file():
            return []
        return [line for line in path.read_text().splitlines() if line.strip()]

    def transition(self, job_id: str, state: JobState, error: str | None = None,
                   stop_reason: str | None = None) -> None:
        with self.lock:
            job = self.jobs[job_id]
            job.transition(state)
            if error is not None:
                job.error = error
            if stop_reason is not None:
                job.stop_reason = stop_reason
            self.store.write_job(job)
            self.conditions[job_id].notify_all()

    def append_step(self, job_id: str, line: str, step_index: int) -> None:
        with self.lock:
            buffered = self.steps[job_id]
            expected = 0 if not buffered else json.loads(buffered[-1])["step"] + 1
            if step_index != expected:
                raise StateTransitionError(
                    f"progress stream gap: expected step {expected}, got {step_index}"
                )
            buffered.append(line)
            with open(self.store.job_dir(job_id) / "trajectory.jsonl", "a") as fh:
                fh.write(line + "\n")
            self.conditions[job_id].notify_all()

    def request_cancel(self, job_id: str) -> None:
        with self.lock:
            self.cancel_flags[job_id] = True
            self.conditions[job_id].notify_all()

    def cancel_requested(self, job_id: str) -> bool:
        with self.lock:
            return self.cancel_flags.get(job_id, False)

    def snapshot(self, job_id: str, cursor: int) -> tuple[list[str], bool]:
        """Progress lines from cursor on, plus whether the job is terminal."""
        with self.lock:
            job = self.jobs[job_id]
            lines = self.steps[job_id][cursor:]
            return lines, job.state in TERMINAL_STATES

    def wait_for_change(self, job_id: str, cursor: int, timeout: float = 0.2) -> None:
        with self.lock:
            if len(self.steps[job_id]) > cursor:
                return
            if self.jobs[job_id].state in TERMINAL_STATES:
                return
            self.conditions[job_id].wait(timeout)


def _decode_image(data: bytes) -> tuple[np.ndarray, tuple[int, int]]:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    return arr, (arr.shape[1], arr.shape[0])


def create_app(
    data_dir: Path,
    engine_defaults: dict | None = None,
    denoiser_factory=ZeroDenoiser,
    backend_factory=ReferenceFeatureBackend,
    max_upload_bytes: int = 16 * 1024 * 1024,
    workers: int = 2,
) -> FastAPI:
    store = Store(Path(data_dir))
    registry = JobRegistry(store)
    executor = ThreadPoolExecutor(max_workers=workers)
    defaults = dict(engine_defaults or {})

    app = FastAPI(title="rotdrag service")
    app.state.registry = registry
    app.state.store = store

    def get_session_or_404(session_id: str) -> dict:
        record = store.read_session(session_id)
        if record is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return record

    def session_view(record: dict) -> dict:
        return {
            "id": record["id"],
            "image": {"width": record["width"], "height": record["height"]},
            "points": record.get("points") or [],
            "has_mask": bool(record.get("mask_blob")),
            "created_at": record["created_at"],
            "updated_at": record["updated_at"],
        }

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request):
        data = await request.body()
        if len(data) > max_upload_bytes:
            raise HTTPException(status_code=413, detail="image exceeds upload limit")
        try:
            _, (width, height) = _decode_image(data)
        except (UnidentifiedImageError, OSError, ValueError):
            raise HTTPException(status_code=415, detail="payload is not a decodable image")
        now = time.time()
        record = {
            "id": uuid.uuid4().hex,
            "image_blob": store.put_blob(data),
            "width": width,
            "height": height,
            "points": [],
            "mask_blob": None,
            "created_at": now,
            "updated_at": now,
        }
        store.write_session(record)
        return session_view(record)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return session_view(get_session_or_404(session_id))

    @app.put("/sessions/{session_id}/points")
    async def put_points(session_id: str, request: Request):
        record = get_session_or_404(session_id)
        try:
            payload = await request.json()
        except Exception:
            raise HTTPException(status_code=422, detail="body must be JSON")
        points_field = payload.get("points") if isinstance(payload, dict) else None
        try:
            pairs = caseio.parse_points(points_field)
        except caseio.CaseFormatError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        w, h = record["width"], record["height"]
        for s, t in pairs:
            for p in (s, t):
                if not (0 <= p.x <= w - 1 and 0 <= p.y <= h - 1):
                    raise HTTPException(
                        status_code=422,
                        detail=f"point ({p.x}, {p.y}) outside {w}x{h} image",
                    )
        record["points"] = caseio.points_to_payload(pairs)
        record["updated_at"] = time.time()
        store.write_session(record)
        return session_view(record)

    @app.put("/sessions/{session_id}/mask")
    async def put_mask(session_id: str, request: Request):
        record = get_session_or_404(session_id)
        data = await request.body()
        if len(data) > max_upload_bytes:
            raise HTTPException(status_code=413, detail="mask exceeds upload limit")
        try:
            with Image.open(io.BytesIO(data)) as im:
                mask = np.asarray(im.convert("L"))
        except (UnidentifiedImageError, OSError, ValueError):
            raise HTTPException(status_code=415, detail="payload is not a decodable image")
        if (mask.shape[1], mask.shape[0]) != (record["width"], record["height"]):
            raise HTTPException(
                status_code=422,
                detail=f"mask dims {mask.shape[1]}x{mask.shape[0]} != image dims "
                f"{record['width']}x{record['height']}",
            )
        record["mask_blob"] = store.put_blob(data)
        record["updated_at"] = time.time()
        store.write_session(record)
        return session_view(record)

    def build_config(record: dict, overrides: dict) -> DragConfig:
        image, _ = _decode_image(store.get_blob(record["image_blob"]))
        with Image.open(io.BytesIO(store.get_blob(record["mask_blob"]))) as im:
            mask = np.asarray(im.convert("L")) > 0
        pairs = caseio.parse_points(record["points"])
        kwargs = dict(defaults)
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return DragConfig(
            image=image,
            sources=[s for s, _ in pairs],
            targets=[t for _, t in pairs],
            mask=mask,
            **kwargs,
        )

    def execute_job(job_id: str, config: DragConfig) -> None:
        try:
            if registry.cancel_requested(job_id):
                registry.transition(job_id, JobState.CANCELLED)
                return
            registry.transition(job_id, JobState.RUNNING)
            session = DragSession(config, denoiser_factory(), backend_factory())

            def on_step(report):
                if registry.cancel_requested(job_id):
                    raise JobCancelled()
                registry.append_step(job_id, report.to_json_line(), report.step)

            result = session.run(on_step=on_step)
            if result.stop_reason is StopReason.ABORTED:
                registry.transition(
                    job_id, JobState.FAILED, error=result.error,
                    stop_reason=result.stop_reason.value,
                )
                return
            caseio.save_image(store.job_dir(job_id) / "result.png", result.image)
            meta = {
                "stop_reason": result.stop_reason.value,
                "final_distances": session.distances(),
                "angles": session.angles,
                "timing": result.timing,
                "cache": session.cache_stats(),
            }
            (store.job_dir(job_id) / "result.json").write_text(
                json.dumps(meta, indent=2)
            )
            registry.transition(
                job_id, JobState.DONE, stop_reason=result.stop_reason.value
            )
        except JobCancelled:
            registry.transition(job_id, JobState.CANCELLED)
        except Exception as exc:  # job isolation: failures never kill the worker
            registry.transition(job_id, JobState.FAILED, error=f"{type(exc).__name__}: {exc}")

    @app.post("/sessions/{session_id}/edit", status_code=202)
    async def start_edit(session_id: str, request: Request):
        record = get_session_or_404(session_id)
        if not record.get("points"):
            raise HTTPException(status_code=422, detail="session has no points")
        if not record.get("mask_blob"):
            raise HTTPException(status_code=422, detail="session has no mask")
        body = await request.body()
        overrides = {}
        if body:
            try:
                payload = json.loads(body)
            except json.JSONDecodeError:
                raise HTTPException(status_code=422, detail="body must be JSON")
            if not isinstance(payload, dict):
                raise HTTPException(status_code=422, detail="body must be an object")
            unknown = set(payload) - set(caseio.ENGINE_OVERRIDE_KEYS)
            if unknown:
                raise HTTPException(
                    status_code=422, detail=f"unknown engine fields {sorted(unknown)}"
                )
            overrides = payload
        try:
            config = build_config(record, overrides)
        except (ValueError, caseio.CaseFormatError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        try:
            job = registry.create(session_id)
        except RuntimeError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        executor.submit(execute_job, job.id, config)
        return {"job_id": job.id, "state": job.state.value}

    def get_job_or_404(job_id: str) -> JobRecord:
        job = registry.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id}")
        return job

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = get_job_or_404(job_id)
        with registry.lock:
            n_steps = len(registry.steps.get(job_id, []))
        return {**job.to_dict(), "steps_emitted": n_steps}

    @app.get("/jobs/{job_id}/progress")
    def stream_progress(job_id: str):
        get_job_or_404(job_id)

        def generate():
            cursor = 0
            while True:
                lines, terminal = registry.snapshot(job_id, cursor)
                for line in lines:
                    yield line + "\n"
                cursor += len(lines)
                if terminal and not lines:
                    job = registry.get(job_id)
                    yield json.dumps({"final": job.to_dict()}) + "\n"
                    return
                if not lines:
                    registry.wait_for_change(job_id, cursor)

        return StreamingResponse(generate(), media_type="application/x-ndjson")

    @app.post("/jobs/{job_id}/cancel")
    def cancel_job(job_id: str):
        job = get_job_or_404(job_id)
        if job.state in TERMINAL_STATES:
            raise HTTPException(
                status_code=409, detail=f"job already {job.state.value}"
            )
        registry.request_cancel(job_id)
        return {"id": job_id, "cancel_requested": True}

    @app.get("/jobs/{job_id}/result")
    def get_result(job_id: str):
        job = get_job_or_404(job_id)
        if job.state is not JobState.DONE:
            detail = {"state": job.state.value}
            if job.error:
                detail["error"] = job.error
            raise HTTPException(status_code=409, detail=detail)
        png = (store.job_dir(job_id) / "result.png").read_bytes()
        meta_path = store.job_dir(job_id) / "result.json"
        headers = {}
        if meta_path.is_file():
            headers["X-Edit-Metadata"] = json.dumps(json.loads(meta_path.read_text()))
        return Response(content=png, media_type="image/png", headers=headers)

    @app.get("/jobs/{job_id}/metadata")
    def get_metadata(job_id: str):
        job = get_job_or_404(job_id)
        if job.state is not JobState.DONE:
            raise HTTPException(status_code=409, detail={"state": job.state.value})
        meta_path = store.job_dir(job_id) / "result.json"
        return JSONResponse(json.loads(meta_path.read_text()))

    return app
