"""HTTP API over the pipeline, consumed by the browser UI.

Endpoints:
    POST /api/complete   run the full pipeline, return stage resource URLs
    POST /api/detect     visible joints + visible mask for an image
    GET  /api/samples    dataset browsing (when a dataset is configured)
    GET  /api/samples/{id}
    GET  /api/health     checkpoint hashes + config echo
    GET  /api/results/{job}/{name}.png

Model states load once and are shared read-only; request handling is bounded
by a semaphore. Malformed payloads yield 4xx with machine-readable codes;
stage failures yield 5xx carrying the stage name.
"""
from __future__ import annotations

import base64
import hashlib
import io
import itertools
import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field, model_validator
from PIL import Image

from . import forge, imaging
from .pipeline import PipelineState, PipelineStageError, detect_visible_pose, run_pipeline
from .prompts import ALL_KINDS, BBOX_KINDS, POSE_KINDS, PromptSpec

STAGE_IMAGES = ("coarse", "base", "refined")
STAGE_MASKS = ("soft_mask", "invisible_mask", "dilated_mask", "visible_mask")


class JointModel(BaseModel):
    id: int = Field(ge=0)
    x: float
    y: float
    origin: Literal["detected_visible", "user_added"] = "user_added"


class BboxModel(BaseModel):
    x1: float
    y1: float
    x2: float
    y2: float
    kind: Literal["interest_region", "entire_region"]


class PromptModel(BaseModel):
    kind: Literal[
        "pose", "interest_bbox", "entire_bbox",
        "pose_and_interest_bbox", "pose_and_entire_bbox", "none",
    ]
    joints: Optional[List[JointModel]] = None
    bbox: Optional[BboxModel] = None

    @model_validator(mode="after")
    def _fields_match_kind(self):
        needs_pose = self.kind in POSE_KINDS
        needs_bbox = self.kind in BBOX_KINDS
        if needs_pose != (self.joints is not None):
            raise ValueError(f"kind {self.kind!r} disagrees with joints presence")
        if needs_bbox != (self.bbox is not None):
            raise ValueError(f"kind {self.kind!r} disagrees with bbox presence")
        if self.joints is not None:
            ids = [j.id for j in self.joints]
            if len(set(ids)) != len(ids):
                raise ValueError("duplicate joint ids")
        return self

    def to_spec(self) -> PromptSpec:
        doc: dict = {"kind": self.kind}
        if self.joints is not None:
            doc["joints"] = [j.model_dump() for j in self.joints]
        if self.bbox is not None:
            doc["bbox"] = self.bbox.model_dump()
        return PromptSpec.from_json(doc)


class RefineOverrides(BaseModel):
    s: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    n_steps: Optional[int] = Field(default=None, ge=1)
    guidance: Optional[float] = None
    dilation_radius: Optional[int] = Field(default=None, ge=0)


class CompleteRequest(BaseModel):
    image: str  # base64 PNG
    prompt: PromptModel
    seed: Optional[int] = None
    refine: Optional[RefineOverrides] = None


class DetectRequest(BaseModel):
    image: str


def prompt_json_schema() -> dict:
    """The wire-format schema the UI validates its payloads against."""
    return PromptModel.model_json_schema()


def _decode_image(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise HTTPException(
            status_code=400,
            detail={"code": "bad_image", "message": f"cannot decode image: {exc}"},
        )
    img = arr.astype(np.float32) / 255.0
    try:
        return imaging.as_image(img)
    except Exception as exc:
        raise HTTPException(
            status_code=400, detail={"code": "bad_image_shape", "message": str(exc)})


@dataclass
class JobRecord:
    job_id: str
    status: str  # queued | running | done | failed
    payload_sha256: str
    result_paths: dict


def create_app(
    state: PipelineState,
    results_dir,
    data_dir=None,
    max_concurrency: int = 2,
    frontend_dist=None,
) -> FastAPI:
    app = FastAPI(title="occufill service")
    results = Path(results_dir)
    results.mkdir(parents=True, exist_ok=True)
    jobs: dict = {}
    jobs_lock = threading.Lock()
    gate = threading.Semaphore(max_concurrency)
    request_counter = itertools.count(1)
    dataset = forge.load_manifest(data_dir) if data_dir else None

    @app.exception_handler(PipelineStageError)
    def _stage_error(request, exc: PipelineStageError):
        return JSONResponse(
            status_code=500,
            content={"error": {"code": "stage_failure", "stage": exc.stage,
                               "message": str(exc.cause)}},
        )

    def _save_results(job_id: str, result) -> dict:
        jdir = results / job_id
        jdir.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name in STAGE_IMAGES:
            imaging.save_image(jdir / f"{name}.png", getattr(result, name))
            paths[name] = f"/api/results/{job_id}/{name}.png"
        for name in STAGE_MASKS:
            arr = getattr(result, name)
            if name == "soft_mask":
                imaging.save_image(jdir / f"{name}.png", arr[:, :, None].clip(0, 1))
            else:
                imaging.save_mask(jdir / f"{name}.png", arr)
            paths[name] = f"/api/results/{job_id}/{name}.png"
        return paths

    @app.post("/api/complete")
    def complete(req: CompleteRequest):
        image = _decode_image(req.image)
        spec = req.prompt.to_spec()
        seed = req.seed if req.seed is not None else next(request_counter)
        payload_hash = hashlib.sha256(
            json.dumps({"prompt": req.prompt.model_dump(mode="json"), "seed": seed},
                       sort_keys=True).encode() + image.tobytes()
        ).hexdigest()
        job_id = payload_hash[:16]
        record = JobRecord(job_id, "queued", payload_hash, {})
        with jobs_lock:
            jobs[job_id] = record
        overrides = (
            {k: v for k, v in req.refine.model_dump().items() if v is not None}
            if req.refine else {})
        dilation = overrides.pop("dilation_radius", None)
        with gate:
            record.status = "running"
            try:
                if dilation is not None:
                    import dataclasses
                    cfg_state_config = dataclasses.replace(
                        state.config, dilation_radius=dilation)
                    state_for_run = _ConfigView(state, cfg_state_config)
                else:
                    state_for_run = state
                result = run_pipeline(image, spec, state_for_run, int(seed),
                                      refine_overrides=overrides)
            except PipelineStageError:
                record.status = "failed"
                raise
        paths = _save_results(job_id, result)
        record.result_paths = paths
        record.status = "done"
        return {
            "job_id": job_id,
            "seed": int(seed),
            "prompt": result.prompt,
            "stages": paths,
            "timings": result.timings,
        }

    @app.post("/api/detect")
    def detect(req: DetectRequest):
        image = _decode_image(req.image)
        try:
            joints, visible = detect_visible_pose(image, state)
        except RuntimeError as exc:
            raise HTTPException(status_code=409,
                                detail={"code": "adapters_missing", "message": str(exc)})
        job_id = hashlib.sha256(image.tobytes()).hexdigest()[:16]
        jdir = results / job_id
        jdir.mkdir(parents=True, exist_ok=True)
        imaging.save_mask(jdir / "visible_mask.png", visible)
        return {
            "joints": [
                {"id": j.joint_id, "x": j.x, "y": j.y, "origin": j.origin} for j in joints
            ],
            "visible_mask": f"/api/results/{job_id}/visible_mask.png",
            "warning": "no joints detected" if not joints else None,
        }

    @app.get("/api/samples")
    def samples():
        if dataset is None:
            raise HTTPException(status_code=404,
                                detail={"code": "no_dataset", "message": "no dataset configured"})
        return [
            {"id": e["path"], "subject": e["subject"], "view": e["view"],
             "split": e["split"], "ratio": e["ratio"]}
            for e in dataset["samples"]
        ]

    @app.get("/api/samples/{sample_id:path}")
    def sample_detail(sample_id: str):
        if dataset is None:
            raise HTTPException(status_code=404,
                                detail={"code": "no_dataset", "message": "no dataset configured"})
        match = [e for e in dataset["samples"] if e["path"] == sample_id]
        if not match:
            raise HTTPException(status_code=404,
                                detail={"code": "unknown_sample", "message": sample_id})
        entry = match[0]
        sdir = Path(data_dir) / entry["path"]
        pose = json.loads((sdir / "pose.json").read_text())
        files = {p.stem: f"/api/dataset/{entry['path']}/{p.name}" for p in sorted(sdir.glob("*.png"))}
        return {"entry": entry, "pose": pose, "files": files}

    @app.get("/api/dataset/{path:path}")
    def dataset_file(path: str):
        if data_dir is None:
            raise HTTPException(status_code=404, detail={"code": "no_dataset"})
        full = (Path(data_dir) / path).resolve()
        if not str(full).startswith(str(Path(data_dir).resolve())) or not full.exists():
            raise HTTPException(status_code=404, detail={"code": "not_found"})
        return FileResponse(full)

    @app.get("/api/results/{job_id}/{name}")
    def result_file(job_id: str, name: str):
        full = results / job_id / name
        if not full.exists():
            raise HTTPException(status_code=404, detail={"code": "not_found"})
        return FileResponse(full)

    @app.get("/api/jobs/{job_id}")
    def job_status(job_id: str):
        with jobs_lock:
            record = jobs.get(job_id)
        if record is None:
            raise HTTPException(status_code=404, detail={"code": "unknown_job"})
        return asdict(record)

    @app.get("/api/health")
    def health():
        cfg = state.config
        return {
            "status": "ok",
            "checkpoints": state.checkpoint_hashes(),
            "config": {
                "sampler_steps": cfg.sampler_steps,
                "guidance": cfg.guidance,
                "conditioning_scale": cfg.conditioning_scale,
                "dilation_radius": cfg.dilation_radius,
                "refine": {"s": cfg.refine.s, "n_steps": cfg.refine.n_steps,
                           "guidance": cfg.refine.guidance},
            },
        }

    @app.get("/api/schema/prompt")
    def schema():
        return prompt_json_schema()

    if frontend_dist and Path(frontend_dist).exists():
        app.mount("/", StaticFiles(directory=frontend_dist, html=True), name="ui")
    return app


class _ConfigView:
    """PipelineState proxy with an overridden config (per-request dilation)."""

    def __init__(self, state: PipelineState, config):
        self._state = state
        self.config = config

    def __getattr__(self, name):
        return getattr(self._state, name)


def serve(state: PipelineState, bind: str, results_dir, data_dir=None,
          frontend_dist=None, max_concurrency: int = 2):
    import uvicorn

    host, _, port = bind.partition(":")
    app = create_app(state, results_dir, data_dir, max_concurrency, frontend_dist)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8000), log_level="info")
