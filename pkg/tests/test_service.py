import io
import json
import time
import urllib.error
import urllib.request

import numpy as np
import pytest
from PIL import Image

from crackseg.data import generate_synthetic
from crackseg.fewshot import RefineConfig
from crackseg.r2aunet import ModelConfig, build_model
from crackseg.service import RectificationService, encode_png_gray
from crackseg.training import TrainConfig


def request(method, url, body=None, content_type="application/octet-stream"):
    req = urllib.request.Request(url, data=body, method=method)
    if body is not None:
        req.add_header("Content-Type", content_type)
    try:
        with urllib.request.urlopen(req, timeout=30) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as err:
        return err.code, err.read()


@pytest.fixture(scope="module")
def service():
    samples = generate_synthetic(12, 32, seed=20)
    model = build_model(ModelConfig.tiny(), seed=3)
    svc = RectificationService(
        model, samples,
        RefineConfig(selection_fraction=0.25),    # queue of 3
        TrainConfig(seed=0, epochs=1, batch_size=4))
    port = svc.start(port=0)
    yield svc, f"http://127.0.0.1:{port}", {s.id: s for s in samples}
    svc.stop()


def test_queue_is_ordered_and_complete(service):
    svc, base, _ = service
    status, body = request("GET", f"{base}/api/queue")
    assert status == 200
    items = json.loads(body)
    assert len(items) == 3
    assert [i["image_id"] for i in items] == svc.queue_ids
    scores = [i["score"] for i in items]
    assert scores == sorted(scores)
    assert all(i["status"] == "pending" for i in items)
    assert all(set(i) == {"image_id", "score", "detected_pixel_count", "status"}
               for i in items)


def test_image_and_prediction_endpoints_roundtrip(service):
    svc, base, samples = service
    image_id = svc.queue_ids[0]
    status, body = request("GET", f"{base}/api/images/{image_id}")
    assert status == 200
    rgb = np.asarray(Image.open(io.BytesIO(body)))
    expected = np.clip(np.rint(samples[image_id].image * 255), 0, 255).astype(np.uint8)
    np.testing.assert_array_equal(rgb, expected)

    status, body = request("GET", f"{base}/api/predictions/{image_id}")
    assert status == 200
    soft = np.asarray(Image.open(io.BytesIO(body)))
    expected_soft = np.clip(np.rint(svc.predictions[image_id] * 255), 0, 255)
    np.testing.assert_array_equal(soft, expected_soft.astype(np.uint8))

    status, body = request("GET", f"{base}/api/predictions/{image_id}/score")
    sidecar = json.loads(body)
    assert sidecar["image_id"] == image_id
    assert 0.0 <= sidecar["score"] <= 1.0
    assert sidecar["detected_pixel_count"] >= 0


def test_unknown_ids_give_404(service):
    _, base, _ = service
    assert request("GET", f"{base}/api/images/nope")[0] == 404
    assert request("GET", f"{base}/api/jobs/nope")[0] == 404


def test_rectification_validation(service):
    svc, base, samples = service
    off_queue = next(i for i in samples if i not in svc.queue_ids)
    mask = np.zeros((32, 32), np.uint8)
    png = encode_png_gray(mask)
    assert request("PUT", f"{base}/api/rectifications/{off_queue}", png)[0] == 409

    target = svc.queue_ids[0]
    assert request("PUT", f"{base}/api/rectifications/{target}", b"garbage")[0] == 400
    # non-binary grayscale rejected
    bad = encode_png_gray(np.full((32, 32), 100, np.uint8))
    assert request("PUT", f"{base}/api/rectifications/{target}", bad)[0] == 400
    # wrong extents rejected
    small = encode_png_gray(np.zeros((16, 16), np.uint8))
    assert request("PUT", f"{base}/api/rectifications/{target}", small)[0] == 400


def test_finetune_requires_complete_queue(service):
    _, base, _ = service
    status, body = request("POST", f"{base}/api/fine-tune", b"")
    assert status == 409
    assert "missing" in json.loads(body)["error"]


def test_full_rectification_round(service):
    svc, base, samples = service
    for image_id in svc.queue_ids:
        gt = (samples[image_id].mask * 255).astype(np.uint8)
        status, body = request("PUT", f"{base}/api/rectifications/{image_id}",
                               encode_png_gray(gt), "image/png")
        assert status == 200
        assert json.loads(body)["status"] == "rectified"
    # idempotent re-submit, last write wins
    repeat = svc.queue_ids[0]
    gt = (samples[repeat].mask * 255).astype(np.uint8)
    assert request("PUT", f"{base}/api/rectifications/{repeat}",
                   encode_png_gray(gt))[0] == 200

    items = json.loads(request("GET", f"{base}/api/queue")[1])
    assert all(i["status"] == "rectified" for i in items)
    assert len(items) == 3

    status, body = request("POST", f"{base}/api/fine-tune", b"")
    assert status == 202
    job_id = json.loads(body)["job_id"]

    deadline = time.time() + 120
    job = None
    while time.time() < deadline:
        _, body = request("GET", f"{base}/api/jobs/{job_id}")
        job = json.loads(body)
        if job["status"] in ("done", "failed"):
            break
        time.sleep(0.2)
    assert job is not None and job["status"] == "done", job
    assert sorted(job["rectified_ids"]) == sorted(svc.queue_ids)
    assert job["finetune_lr"] == pytest.approx(1e-4)
    for phase in ("before", "after"):
        assert 0.0 <= job[phase]["mean_dice"] <= 1.0
        assert job[phase]["n_images"] == 9


def test_interrupted_round_resumes_from_state_dir(tmp_path):
    samples = generate_synthetic(8, 32, seed=21)
    model = build_model(ModelConfig.tiny(), seed=4)
    refine = RefineConfig(selection_fraction=0.3)  # queue of 3
    train_cfg = TrainConfig(seed=0, epochs=1, batch_size=4)

    first = RectificationService(model, samples, refine, train_cfg,
                                 state_dir=tmp_path)
    port = first.start()
    base = f"http://127.0.0.1:{port}"
    target = first.queue_ids[0]
    gt = (next(s for s in samples if s.id == target).mask * 255).astype(np.uint8)
    assert request("PUT", f"{base}/api/rectifications/{target}",
                   encode_png_gray(gt))[0] == 200
    assert len(first.pending_ids()) == 2
    first.stop()

    resumed = RectificationService(model, samples, refine, train_cfg,
                                   state_dir=tmp_path)
    assert resumed.queue_ids == first.queue_ids
    assert resumed.pending_ids() == first.pending_ids()
    resumed.stop()
