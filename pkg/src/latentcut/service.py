"""Local HTTP service: pure planning plus a serial render-job queue.

POST /api/plan is synchronous and stateless — identical requests produce
byte-identical bodies, the same bytes the plan subcommand writes to disk.
POST /api/render enqueues a job for the single worker thread; job status
moves queued → running → done|failed and never regresses. Artifacts land
under the data root (EY_DATA_DIR or ./ey_data), one directory per job.
"""

from __future__ import annotations

import os
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .cli import (
    SCHEMA_VERSION,
    CliError,
    build_plan_payload,
    canonical_json_bytes,
    load_latents,
    load_scene,
    load_track,
    save_latents,
    save_video,
    schedule_from_dict,
)
from .denoiser import load_model
from .inference import run_edit_inference
from .timeline import LatentTimelinePlan, TimelineError
from .transcript import TranscriptError

_STATUS_RANK = {"queued": 0, "running": 1, "done": 2, "failed": 2}
_LOG_TAIL = 20


class JobError(RuntimeError):
    pass


@dataclass
class Job:
    id: str
    kind: str
    status: str = "queued"
    artifacts: dict = field(default_factory=dict)
    log: list = field(default_factory=list)
    error: str | None = None
    created_s: float = field(default_factory=time.time)
    updated_s: float = field(default_factory=time.time)

    def advance(self, status: str) -> None:
        if _STATUS_RANK.get(status) is None:
            raise JobError(f"unknown job status {status!r}")
        if _STATUS_RANK[status] <= _STATUS_RANK[self.status]:
            raise JobError(f"job {self.id} cannot move {self.status} -> {status}")
        self.status = status
        self.updated_s = time.time()

    def say(self, line: str) -> None:
        self.log.append(line)
        self.updated_s = time.time()

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "id": self.id,
            "kind": self.kind,
            "status": self.status,
            "artifacts": dict(self.artifacts),
            "log": list(self.log[-_LOG_TAIL:]),
            "error": self.error,
            "created_s": self.created_s,
            "updated_s": self.updated_s,
        }


class JobTable:
    """Mutex-guarded job registry with deterministic ids."""

    def __init__(self):
        self._lock = threading.Lock()
        self._jobs: dict[str, Job] = {}
        self._counter = 0

    def create(self, kind: str) -> Job:
        with self._lock:
            self._counter += 1
            job = Job(id=f"{kind}-{self._counter:04d}", kind=kind)
            self._jobs[job.id] = job
            return job

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            return self._jobs.get(job_id)

    def snapshot(self) -> list[dict]:
        with self._lock:
            jobs = sorted(self._jobs.values(), key=lambda j: j.created_s, reverse=True)
            return [j.to_dict() for j in jobs]


class PlanRequest(BaseModel):
    transcript: dict
    edited_text: str | None = None
    edited_words: list[str] | None = None
    fps: float | None = None
    insert_durations: list[float] | None = None


class RenderRequest(BaseModel):
    plan: dict
    checkpoint: str
    audio: str | None = None
    source_latents: str | None = None
    scene: str | None = None
    seed: int = 0
    schedule: dict = Field(default_factory=dict)


def _execute_render(job: Job, req: RenderRequest, data_root: Path) -> None:
    job.advance("running")
    try:
        plan_dict = req.plan.get("plan", req.plan)
        plan = LatentTimelinePlan.from_dict(plan_dict)
        schedule = schedule_from_dict(req.schedule)

        def resolve(p):
            path = Path(p)
            return path if path.is_absolute() else data_root / path

        config, params, meta = load_model(resolve(req.checkpoint))
        job.say(f"loaded stage-{meta.get('stage')} checkpoint")
        track = load_track(resolve(req.audio)) if req.audio else None
        source = spec = None
        if req.source_latents:
            source, src_fps = load_latents(resolve(req.source_latents))
            if src_fps is not None and abs(src_fps - plan.fps) > 1e-6:
                raise JobError(
                    f"plan fps {plan.fps} does not match source latents fps {src_fps}"
                )
        if req.scene:
            spec = load_scene(resolve(req.scene))

        result = run_edit_inference(
            plan, params, config, track, schedule,
            source_latents=source, spec=spec, seed=req.seed,
        )
        out_dir = data_root / "jobs" / job.id
        out_dir.mkdir(parents=True, exist_ok=True)
        report = dict(result["report"])
        report["schema_version"] = SCHEMA_VERSION
        report["checkpoint_stage"] = meta.get("stage")
        save_latents(out_dir / "latents.eyts", result["latents"], plan.fps)
        save_video(out_dir / "video.eyts", result["video"], plan.fps)
        (out_dir / "report.json").write_bytes(canonical_json_bytes(report))
        job.artifacts = {
            "latents": str(out_dir / "latents.eyts"),
            "video": str(out_dir / "video.eyts"),
            "report": str(out_dir / "report.json"),
        }
        job.say(f"rendered {result['latents'].shape[0]} latents")
        job.advance("done")
    except Exception as exc:  # the worker must survive any job failure
        job.error = f"{type(exc).__name__}: {exc}"
        job.say(job.error)
        job.advance("failed")


def _worker_loop(work: queue.Queue, data_root: Path) -> None:
    while True:
        item = work.get()
        if item is None:
            return
        job, req = item
        _execute_render(job, req, data_root)


def create_app(data_dir: str | None = None, frontend_dir: str | None = None) -> FastAPI:
    data_root = Path(data_dir or os.environ.get("EY_DATA_DIR") or "ey_data")
    table = JobTable()
    work: queue.Queue = queue.Queue()

    from contextlib import asynccontextmanager

    @asynccontextmanager
    async def lifespan(app):
        worker = threading.Thread(
            target=_worker_loop, args=(work, data_root), daemon=True
        )
        worker.start()
        yield
        work.put(None)
        worker.join(timeout=5)

    app = FastAPI(title="latentcut service", lifespan=lifespan)

    @app.get("/api/health")
    def health():
        return {"ok": True, "schema_version": SCHEMA_VERSION}

    @app.post("/api/plan")
    def plan(req: PlanRequest):
        if (req.edited_text is None) == (req.edited_words is None):
            raise HTTPException(
                400, "provide exactly one of edited_text or edited_words"
            )
        edited = req.edited_text if req.edited_text is not None else req.edited_words
        try:
            payload = build_plan_payload(
                req.transcript, edited, fps=req.fps,
                insert_durations=req.insert_durations,
            )
        except (TranscriptError, TimelineError) as exc:
            raise HTTPException(400, str(exc)) from exc
        return Response(canonical_json_bytes(payload), media_type="application/json")

    @app.post("/api/render")
    def render(req: RenderRequest):
        try:
            LatentTimelinePlan.from_dict(req.plan.get("plan", req.plan))
            schedule_from_dict(req.schedule)
        except (TimelineError, CliError, KeyError, TypeError, ValueError) as exc:
            raise HTTPException(400, f"bad render request: {exc}") from exc
        for name in ("checkpoint", "audio", "source_latents", "scene"):
            value = getattr(req, name)
            if value is None:
                continue
            path = Path(value)
            if not path.is_absolute():
                path = data_root / path
            if not path.exists():
                raise HTTPException(400, f"{name} file not found: {value}")
        job = table.create("render")
        job.say("queued")
        work.put((job, req))
        return {"id": job.id, "status": job.status}

    @app.get("/api/jobs")
    def jobs():
        return {"schema_version": SCHEMA_VERSION, "jobs": table.snapshot()}

    @app.get("/api/jobs/{job_id}")
    def job_status(job_id: str):
        job = table.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id}")
        return job.to_dict()

    @app.get("/api/report/{job_id}")
    def report(job_id: str):
        job = table.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id}")
        if job.status != "done":
            raise HTTPException(409, f"job {job_id} is {job.status}")
        body = Path(job.artifacts["report"]).read_bytes()
        return Response(body, media_type="application/json")

    dist = Path(frontend_dir) if frontend_dir else None
    if dist and dist.is_dir():
        app.mount("/", StaticFiles(directory=dist, html=True), name="ui")
    return app
