"""Session-oriented HTTP service for interactive classifier audits.

Wraps one classifier checkpoint, one density scorer, and one test split.
Each session owns an original image, an optional simplified version
(computed asynchronously), and a replayable stack of region edits. All
compute is read-only w.r.t. the models; every mutation lives in per-session
JSON + PNG records under the sessions directory.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response
from PIL import Image

from .datasets import load_dataset
from .errors import MinbitsError, ValidationError
from .flow import load_scorer
from .nets import classifier_forward, load_model
from .posthoc import EditOp, PosthocConfig, apply_edits, edit_and_predict, posthoc_simplify

PROBS_TOLERANCE = 1e-6


@dataclass
class ServiceConfig:
    classifier_path: str
    scorer_path: str | None = None
    dataset_name: str = "synth_textures"
    dataset_split: str = "test"
    dataset_size: int | None = 512
    sessions_dir: str = "sessions"
    max_workers: int = 2
    seed: int = 0


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _png_bytes(image: torch.Tensor) -> bytes:
    from .viz import to_uint8

    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)[0].squeeze()).save(buf, format="PNG")
    return buf.getvalue()


def _tensor_from_png(data: bytes, channels: int) -> torch.Tensor:
    arr = np.asarray(Image.open(io.BytesIO(data)))
    if arr.ndim == 2:
        arr = arr[:, :, None]
    x = torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0)
    if x.shape[1] == 4:  # strip alpha from canvas exports
        x = x[:, :3]
    if x.shape[1] != channels:
        if x.shape[1] == 1 and channels == 3:
            x = x.repeat(1, 3, 1, 1)
        elif channels == 1:
            x = x.mean(dim=1, keepdim=True)
    return x


class AuditService:
    """Owns immutable model state plus the mutable session records."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self._classifiers: dict[str, object] = {}
        self._checkpoint_hashes: dict[str, str] = {}
        self.default_checkpoint = str(config.classifier_path)
        self._load_checkpoint(self.default_checkpoint)
        self.scorer = load_scorer(config.scorer_path) if config.scorer_path else None
        self.dataset = load_dataset(
            config.dataset_name, config.dataset_split, seed=config.seed, size=config.dataset_size
        )
        self.sessions_dir = Path(config.sessions_dir)
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        self.executor = ThreadPoolExecutor(max_workers=config.max_workers)
        self.jobs: dict[str, dict] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()
        self._misclassified: dict[str, list[int]] = {}
        self._sampler_rng = np.random.default_rng(config.seed)

    def _load_checkpoint(self, path: str):
        if path not in self._classifiers:
            file = Path(path)
            if not file.exists():
                raise HTTPException(404, {"code": "not_found", "message": f"no checkpoint at {path}"})
            self._classifiers[path] = load_model(path)
            self._checkpoint_hashes[path] = _sha256(file.read_bytes())
        return self._classifiers[path]

    def classifier_for(self, record_or_path) -> object:
        path = record_or_path if isinstance(record_or_path, str) else record_or_path.get(
            "checkpoint", self.default_checkpoint)
        return self._load_checkpoint(path)

    # -- helpers ----------------------------------------------------------

    def lock_for(self, sid: str) -> threading.Lock:
        with self._registry_lock:
            return self._locks.setdefault(sid, threading.Lock())

    def session_path(self, sid: str) -> Path:
        return self.sessions_dir / sid

    def load_session(self, sid: str) -> dict:
        path = self.session_path(sid) / "session.json"
        if not path.exists():
            raise HTTPException(404, {"code": "not_found", "message": f"no session {sid}"})
        return json.loads(path.read_text())

    def save_session(self, record: dict):
        path = self.session_path(record["id"])
        path.mkdir(parents=True, exist_ok=True)
        (path / "session.json").write_text(json.dumps(record, indent=2))

    def predict(self, image: torch.Tensor, classifier) -> list[float]:
        with torch.no_grad():
            probs = F.softmax(classifier_forward(classifier, image), dim=1)[0]
        vec = probs.tolist()
        if abs(sum(vec) - 1.0) > PROBS_TOLERANCE:
            raise MinbitsError("probability vector does not normalize")
        return vec

    def _log_prediction(self, record: dict, variant: str, image: torch.Tensor) -> list[float]:
        probs = self.predict(image, self.classifier_for(record))
        record["predictions"].append(
            {
                "variant": variant,
                "image_sha256": _sha256(_png_bytes(image)),
                "probs": probs,
                "timestamp": time.time(),
            }
        )
        return probs

    def misclassified_indices(self, checkpoint: str) -> list[int]:
        if checkpoint not in self._misclassified:
            classifier = self._load_checkpoint(checkpoint)
            preds = []
            with torch.no_grad():
                for start in range(0, len(self.dataset), 256):
                    logits = classifier_forward(classifier, self.dataset.images[start : start + 256])
                    preds.append(logits.argmax(dim=1))
            preds = torch.cat(preds)
            self._misclassified[checkpoint] = torch.nonzero(preds != self.dataset.labels).flatten().tolist()
        return self._misclassified[checkpoint]

    # -- operations --------------------------------------------------------

    def create_session(self, source: dict, checkpoint: str | None = None) -> dict:
        checkpoint = checkpoint or self.default_checkpoint
        self._load_checkpoint(checkpoint)  # 404s early on a bad ref
        kind = source.get("kind")
        true_label = None
        if kind == "misclassified":
            pool = self.misclassified_indices(checkpoint)
            if not pool:
                raise HTTPException(409, {"code": "conflict", "message": "no misclassified examples"})
            idx = int(self._sampler_rng.choice(pool))
            image = self.dataset.images[idx : idx + 1]
            true_label = int(self.dataset.labels[idx])
            source = {"kind": kind, "index": idx}
        elif kind == "test_index":
            idx = int(source.get("index", -1))
            if not (0 <= idx < len(self.dataset)):
                raise HTTPException(400, {"code": "validation", "message": f"index {idx} out of range"})
            image = self.dataset.images[idx : idx + 1]
            true_label = int(self.dataset.labels[idx])
        elif kind == "upload":
            try:
                data = base64.b64decode(source["png_base64"])
                image = _tensor_from_png(data, self.dataset.images.shape[1])
            except (KeyError, ValueError, OSError) as exc:
                raise HTTPException(400, {"code": "validation", "message": f"undecodable upload: {exc}"})
            expected = tuple(self.dataset.images.shape[1:])
            if tuple(image.shape[1:]) != expected:
                raise HTTPException(
                    400,
                    {"code": "validation",
                     "message": f"expected image shape {expected}, got {tuple(image.shape[1:])}"},
                )
        else:
            raise HTTPException(400, {"code": "validation", "message": f"unknown source kind {kind!r}"})

        sid = uuid.uuid4().hex
        record = {
            "id": sid,
            "created": time.time(),
            "checkpoint": checkpoint,
            "checkpoint_sha256": self._checkpoint_hashes[checkpoint],
            "source": source,
            "true_label": true_label,
            "num_classes": int(self.dataset.num_classes),
            "predictions": [],
            "edits": [],
            "simplify": None,
        }
        path = self.session_path(sid)
        path.mkdir(parents=True, exist_ok=True)
        (path / "original.png").write_bytes(_png_bytes(image))
        self._log_prediction(record, "original", image)
        self.save_session(record)
        return record

    def original_image(self, sid: str) -> torch.Tensor:
        data = (self.session_path(sid) / "original.png").read_bytes()
        return _tensor_from_png(data, self.dataset.images.shape[1])

    def edited_image(self, sid: str, record: dict) -> torch.Tensor:
        edits = [EditOp.from_dict(d) for d in record["edits"]]
        return apply_edits(self.original_image(sid), edits)

    def start_simplify(self, sid: str, lambda_sim: float, steps: int) -> dict:
        record = self.load_session(sid)
        if self.scorer is None:
            raise HTTPException(400, {"code": "validation", "message": "service has no scorer configured"})
        with self._registry_lock:
            job = self.jobs.get(sid)
            if job is not None and job["status"] == "running":
                raise HTTPException(409, {"code": "conflict", "message": "simplify already running"})
            self.jobs[sid] = {"status": "running", "step": 0, "error": None}

        x = self.original_image(sid)
        config = PosthocConfig(lambda_sim=lambda_sim, steps=steps, seed=self.config.seed)
        classifier = self.classifier_for(record)

        def work():
            try:
                result = posthoc_simplify(
                    classifier, self.scorer, x, config,
                    progress=lambda step: self.jobs[sid].update(step=step),
                )
                with self.lock_for(sid):
                    rec = self.load_session(sid)
                    (self.session_path(sid) / "simplified.png").write_bytes(_png_bytes(result.x_sim))
                    rec["simplify"] = {
                        "lambda_sim": lambda_sim,
                        "steps": steps,
                        "bpd_orig": result.bpd_orig,
                        "bpd_sim": result.bpd_sim,
                    }
                    self._log_prediction(rec, "simplified", result.x_sim)
                    self.save_session(rec)
                self.jobs[sid].update(status="done")
            except Exception as exc:  # surfaced through the status endpoint
                self.jobs[sid].update(status="error", error=str(exc))

        self.executor.submit(work)
        return {"status": "running", "step": 0}

    def apply_edit(self, sid: str, op_dict: dict) -> dict:
        with self.lock_for(sid):
            record = self.load_session(sid)
            try:
                op = EditOp.from_dict(op_dict)
            except (KeyError, TypeError, ValueError) as exc:
                raise HTTPException(400, {"code": "validation", "message": f"bad edit op: {exc}"})
            x = self.original_image(sid)
            try:
                edits = [EditOp.from_dict(d) for d in record["edits"]] + [op]
                edited, probs = edit_and_predict(self.classifier_for(record), x, edits)
            except ValidationError as exc:
                raise HTTPException(400, {"code": "validation", "message": str(exc)})
            record["edits"].append(op.to_dict())
            (self.session_path(sid) / "edited.png").write_bytes(_png_bytes(edited))
            self._log_prediction(record, "edited", edited)
            self.save_session(record)
            return {"probs": probs.tolist(), "edits": record["edits"],
                    "image_sha256": record["predictions"][-1]["image_sha256"]}

    def undo(self, sid: str) -> dict:
        with self.lock_for(sid):
            record = self.load_session(sid)
            if not record["edits"]:
                raise HTTPException(400, {"code": "validation", "message": "edit stack is empty"})
            record["edits"].pop()
            edited = self.edited_image(sid, record)
            (self.session_path(sid) / "edited.png").write_bytes(_png_bytes(edited))
            probs = self._log_prediction(record, "edited" if record["edits"] else "original", edited)
            self.save_session(record)
            return {"probs": probs, "edits": record["edits"],
                    "image_sha256": record["predictions"][-1]["image_sha256"]}


def create_app(config: ServiceConfig) -> FastAPI:
    service = AuditService(config)
    app = FastAPI(title="audit workbench service")
    app.state.service = service

    try:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(
            CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
        )
    except ImportError:  # pragma: no cover
        pass

    @app.exception_handler(HTTPException)
    async def http_error(request: Request, exc: HTTPException):
        detail = exc.detail if isinstance(exc.detail, dict) else {"code": "error", "message": str(exc.detail)}
        return JSONResponse(status_code=exc.status_code, content=detail)

    @app.exception_handler(MinbitsError)
    async def domain_error(request: Request, exc: MinbitsError):
        return JSONResponse(status_code=400, content={"code": "validation", "message": str(exc)})

    @app.post("/sessions")
    async def create_session(payload: dict):
        record = service.create_session(payload.get("source", {}), payload.get("checkpoint"))
        return record

    @app.get("/sessions/{sid}")
    async def get_session(sid: str):
        return service.load_session(sid)

    @app.post("/sessions/{sid}/simplify")
    async def simplify(sid: str, payload: dict):
        lambda_sim = float(payload.get("lambda_sim", 0.0))
        steps = int(payload.get("steps", 50))
        if steps < 1:
            raise HTTPException(400, {"code": "validation", "message": "steps must be >= 1"})
        return service.start_simplify(sid, lambda_sim, steps)

    @app.get("/sessions/{sid}/simplify/status")
    async def simplify_status(sid: str):
        service.load_session(sid)
        job = service.jobs.get(sid)
        if job is None:
            return {"status": "none"}
        return job

    @app.post("/sessions/{sid}/edits")
    async def post_edit(sid: str, payload: dict):
        return service.apply_edit(sid, payload)

    @app.post("/sessions/{sid}/undo")
    async def post_undo(sid: str):
        return service.undo(sid)

    @app.get("/sessions/{sid}/image")
    async def get_image(sid: str, variant: str = "original"):
        record = service.load_session(sid)
        path = service.session_path(sid)
        if variant == "original":
            file = path / "original.png"
        elif variant == "simplified":
            file = path / "simplified.png"
        elif variant == "edited":
            if record["edits"]:
                file = path / "edited.png"
            else:
                file = path / "original.png"
        else:
            raise HTTPException(400, {"code": "validation", "message": f"unknown variant {variant!r}"})
        if not file.exists():
            raise HTTPException(404, {"code": "not_found", "message": f"no {variant} image yet"})
        return Response(content=file.read_bytes(), media_type="image/png")

    return app
