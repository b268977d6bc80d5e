"""HTTP rectification service for the interactive expert loop.

Serves the low-confidence queue plus image/prediction PNGs, accepts
strictly binary mask uploads, and runs the fine-tune job on a single
worker thread once every queued image has been rectified. Concurrent
readers are fine; all mutation funnels through one lock, and at most one
fine-tune runs at a time (uploads during a run are stored for a later
round).

Endpoints (JSON fields lower_snake_case, masks 8-bit grayscale PNG):
    GET  /api/queue                   ordered confidence records + status
    GET  /api/images/{id}             RGB PNG
    GET  /api/predictions/{id}        soft mask PNG (p * 255 rounded)
    GET  /api/predictions/{id}/score  confidence record sidecar
    PUT  /api/rectifications/{id}     binary mask PNG (0/255); 409 off-queue
    POST /api/fine-tune               202 + job id once queue is complete
    GET  /api/jobs/{id}               pending|running|done + metrics
"""

from __future__ import annotations

import io
import json
import queue as queue_mod
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics
from .fewshot import (
    RectifiedSample,
    RefineConfig,
    confidence_score,
    fine_tune,
    finetune_lr,
    rank_and_select,
)
from .r2aunet import Model, predict
from .training import TrainConfig


def encode_png_gray(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array.astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def encode_png_rgb(image: np.ndarray) -> bytes:
    rgb = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class ServiceError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class RectificationService:
    """Owns the queue, rectifications, and fine-tune jobs for one round."""

    def __init__(self, model: Model, samples, refine_cfg: RefineConfig,
                 train_cfg: TrainConfig, last_lr: float | None = None,
                 state_dir=None):
        refine_cfg.validate()
        self.model = model
        self.refine_cfg = refine_cfg
        self.train_cfg = train_cfg
        self.last_lr = train_cfg.lr0 if last_lr is None else last_lr
        self.samples = {}
        for sample in samples:
            if sample.id in self.samples:
                raise ValueError(f"duplicate sample id {sample.id!r}")
            self.samples[sample.id] = sample

        self._lock = threading.RLock()
        self._rectified: dict[str, RectifiedSample] = {}
        self._jobs: dict[str, dict] = {}
        self._job_queue: queue_mod.Queue = queue_mod.Queue()
        self._worker: threading.Thread | None = None
        self._httpd: ThreadingHTTPServer | None = None
        self._state_dir = Path(state_dir) if state_dir else None

        ordered = list(self.samples.values())
        self.predictions = {
            s.id: p for s, p in zip(ordered, predict(model, [s.image for s in ordered],
                                                     batch_size=train_cfg.batch_size))}
        self.records = {
            s.id: confidence_score(self.predictions[s.id], refine_cfg.theta, s.id)
            for s in ordered}
        self.queue_ids = rank_and_select(self.records.values(),
                                         refine_cfg.selection_fraction)
        self._restore_state()

    # -- persistence (lets an interrupted interactive round resume) --------

    def _restore_state(self) -> None:
        if not self._state_dir:
            return
        self._state_dir.mkdir(parents=True, exist_ok=True)
        queue_file = self._state_dir / "queue.json"
        if queue_file.exists():
            stored = json.loads(queue_file.read_text())
            if stored["queue_ids"] != self.queue_ids:
                raise ValueError("stored rectification state does not match this dataset")
            for image_id in stored["rectified_ids"]:
                mask_path = self._state_dir / "rectified" / f"{image_id}.png"
                mask = np.asarray(Image.open(mask_path).convert("L"))
                self._rectified[image_id] = RectifiedSample(
                    image_id, (mask > 127).astype(np.uint8), "human",
                    self.predictions[image_id])
        else:
            self._write_state()

    def _write_state(self) -> None:
        if not self._state_dir:
            return
        state = {"queue_ids": self.queue_ids,
                 "rectified_ids": sorted(self._rectified)}
        (self._state_dir / "queue.json").write_text(json.dumps(state, indent=2))

    # -- request handlers (return (status, content_type, body)) ------------

    def get_queue(self):
        with self._lock:
            items = []
            for image_id in self.queue_ids:
                record = self.records[image_id]
                items.append({
                    "image_id": record.image_id,
                    "score": record.score,
                    "detected_pixel_count": record.detected_pixel_count,
                    "status": "rectified" if image_id in self._rectified else "pending",
                })
        return 200, "application/json", json.dumps(items).encode()

    def _sample_or_404(self, image_id: str):
        sample = self.samples.get(image_id)
        if sample is None:
            raise ServiceError(404, f"unknown image id {image_id!r}")
        return sample

    def get_image(self, image_id: str):
        sample = self._sample_or_404(image_id)
        return 200, "image/png", encode_png_rgb(sample.image)

    def get_prediction(self, image_id: str):
        self._sample_or_404(image_id)
        soft = np.clip(np.rint(self.predictions[image_id] * 255.0), 0, 255)
        return 200, "image/png", encode_png_gray(soft)

    def get_prediction_score(self, image_id: str):
        self._sample_or_404(image_id)
        record = self.records[image_id]
        body = json.dumps({
            "image_id": record.image_id,
            "score": record.score,
            "detected_pixel_count": record.detected_pixel_count,
        }).encode()
        return 200, "application/json", body

    def put_rectification(self, image_id: str, body: bytes):
        if image_id not in self.queue_ids:
            raise ServiceError(409, f"image {image_id!r} is not in the rectification queue")
        try:
            with Image.open(io.BytesIO(body)) as img:
                if img.mode != "L":
                    raise ServiceError(400, f"mask must be 8-bit grayscale PNG, got mode {img.mode!r}")
                mask = np.asarray(img)
        except ServiceError:
            raise
        except Exception:
            raise ServiceError(400, "body is not a decodable PNG") from None
        expected = self.samples[image_id].image.shape[:2]
        if mask.shape != expected:
            raise ServiceError(400, f"mask extents {mask.shape} do not match image {expected}")
        values = set(np.unique(mask).tolist())
        if not values <= {0, 255}:
            raise ServiceError(400, f"mask must contain only 0 and 255, got {sorted(values)}")
        with self._lock:
            # last write wins; resubmission is legal
            self._rectified[image_id] = RectifiedSample(
                image_id, (mask > 127).astype(np.uint8), "human",
                self.predictions[image_id])
            if self._state_dir:
                rect_dir = self._state_dir / "rectified"
                rect_dir.mkdir(exist_ok=True)
                (rect_dir / f"{image_id}.png").write_bytes(body)
                self._write_state()
        return 200, "application/json", json.dumps({"image_id": image_id,
                                                    "status": "rectified"}).encode()

    def post_finetune(self):
        with self._lock:
            missing = [i for i in self.queue_ids if i not in self._rectified]
            if missing:
                raise ServiceError(409, f"queue not fully rectified, missing: "
                                        f"{', '.join(missing)}")
            if any(j["status"] in ("pending", "running") for j in self._jobs.values()):
                raise ServiceError(409, "a fine-tune job is already in progress")
            job_id = f"job-{len(self._jobs) + 1}"
            self._jobs[job_id] = {"status": "pending"}
            snapshot = [self._rectified[i] for i in self.queue_ids]
        self._ensure_worker()
        self._job_queue.put((job_id, snapshot))
        return 202, "application/json", json.dumps({"job_id": job_id}).encode()

    def get_job(self, job_id: str):
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise ServiceError(404, f"unknown job id {job_id!r}")
            return 200, "application/json", json.dumps(job).encode()

    # -- fine-tune worker ---------------------------------------------------

    def _ensure_worker(self) -> None:
        if self._worker is None or not self._worker.is_alive():
            self._worker = threading.Thread(target=self._worker_loop, daemon=True)
            self._worker.start()

    def _worker_loop(self) -> None:
        while True:
            item = self._job_queue.get()
            if item is None:
                return
            job_id, rectified = item
            with self._lock:
                self._jobs[job_id]["status"] = "running"
            try:
                result = self._run_finetune(rectified)
                with self._lock:
                    self._jobs[job_id].update(status="done", **result)
            except Exception as err:  # surfaced through the job endpoint
                with self._lock:
                    self._jobs[job_id].update(status="failed", error=str(err))

    def _evaluate_remaining(self, remaining, predictions):
        scored = [(p, s) for p, s in zip(predictions, remaining) if s.mask is not None]
        if not scored:
            return None
        dices = [metrics.dice(metrics.binarize(p), s.mask.astype(bool)) for p, s in scored]
        ious = [metrics.iou(metrics.binarize(p), s.mask.astype(bool)) for p, s in scored]
        return {"mean_dice": float(np.mean(dices)), "mean_iou": float(np.mean(ious)),
                "n_images": len(scored)}

    def _run_finetune(self, rectified):
        selected = {r.image_id for r in rectified}
        remaining = [s for s in self.samples.values() if s.id not in selected]
        before = self._evaluate_remaining(
            remaining, [self.predictions[s.id] for s in remaining])
        fine_tune(self.model, rectified, self.samples, self.train_cfg,
                  self.refine_cfg, self.last_lr)
        after_preds = predict(self.model, [s.image for s in remaining],
                              batch_size=self.train_cfg.batch_size)
        after = self._evaluate_remaining(remaining, after_preds)
        return {
            "rectified_ids": sorted(selected),
            "finetune_lr": finetune_lr(self.last_lr, self.refine_cfg),
            "before": before,
            "after": after,
        }

    def job_done(self, job_id: str) -> bool:
        with self._lock:
            job = self._jobs.get(job_id)
            return bool(job) and job["status"] in ("done", "failed")

    def pending_ids(self) -> list[str]:
        with self._lock:
            return [i for i in self.queue_ids if i not in self._rectified]

    # -- http plumbing ------------------------------------------------------

    def start(self, port: int = 0, host: str = "127.0.0.1") -> int:
        handler = _make_handler(self)
        self._httpd = ThreadingHTTPServer((host, port), handler)
        thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        thread.start()
        return self._httpd.server_address[1]

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
        if self._worker is not None and self._worker.is_alive():
            self._job_queue.put(None)
            self._worker.join(timeout=5)


_ROUTES = [
    ("GET", re.compile(r"^/api/queue$"), "get_queue"),
    ("GET", re.compile(r"^/api/images/([^/]+)$"), "get_image"),
    ("GET", re.compile(r"^/api/predictions/([^/]+)/score$"), "get_prediction_score"),
    ("GET", re.compile(r"^/api/predictions/([^/]+)$"), "get_prediction"),
    ("PUT", re.compile(r"^/api/rectifications/([^/]+)$"), "put_rectification"),
    ("POST", re.compile(r"^/api/fine-tune$"), "post_finetune"),
    ("GET", re.compile(r"^/api/jobs/([^/]+)$"), "get_job"),
]


def _make_handler(service: RectificationService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):  # quiet by default
            pass

        def _send(self, status: int, content_type: str, body: bytes):
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _dispatch(self, method: str):
            body = b""
            length = int(self.headers.get("Content-Length") or 0)
            if length:
                body = self.rfile.read(length)
            for verb, pattern, name in _ROUTES:
                if verb != method:
                    continue
                match = pattern.match(self.path)
                if not match:
                    continue
                handler = getattr(service, name)
                args = list(match.groups())
                if method == "PUT":
                    args.append(body)
                try:
                    status, content_type, payload = handler(*args)
                except ServiceError as err:
                    payload = json.dumps({"error": str(err)}).encode()
                    self._send(err.status, "application/json", payload)
                    return
                self._send(status, content_type, payload)
                return
            self._send(404, "application/json",
                       json.dumps({"error": f"no route for {method} {self.path}"}).encode())

        def do_GET(self):
            self._dispatch("GET")

        def do_PUT(self):
            self._dispatch("PUT")

        def do_POST(self):
            self._dispatch("POST")

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, PUT, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

    return Handler
