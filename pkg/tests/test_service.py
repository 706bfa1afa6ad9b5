import io
import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from rotdrag.service import (
    ALLOWED_TRANSITIONS,
    JobRecord,
    JobRegistry,
    JobState,
    StateTransitionError,
    Store,
    create_app,
)
from rotdrag.synth import arc_drag_fixture


def png_bytes(arr):
    arr = np.clip(np.asarray(arr, dtype=float), 0, 1)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    im = Image.fromarray((arr * 255).round().astype(np.uint8))
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def mask_png_bytes(mask):
    im = Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


FAST_ENGINE = {"t_edit": 60, "n_ddim_steps": 6, "max_steps": 4}


@pytest.fixture()
def client(tmp_path):
    app = create_app(tmp_path / "data", engine_defaults=dict(FAST_ENGINE))
    with TestClient(app) as c:
        yield c


def make_session(client, size=48):
    img, sources, targets, mask = arc_drag_fixture(size=size, radius=6.0)
    r = client.post("/sessions", content=png_bytes(img))
    assert r.status_code == 201
    sid = r.json()["id"]
    points = [
        {"source": [s.x, s.y], "target": [t.x, t.y]}
        for s, t in zip(sources, targets)
    ]
    assert client.put(f"/sessions/{sid}/points", json={"points": points}).status_code == 200
    assert (
        client.put(f"/sessions/{sid}/mask", content=mask_png_bytes(mask)).status_code
        == 200
    )
    return sid


def wait_terminal(client, job_id, timeout=30.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        state = client.get(f"/jobs/{job_id}").json()["state"]
        if state in ("done", "failed", "cancelled"):
            return state
        time.sleep(0.05)
    raise TimeoutError("job did not reach a terminal state")


class TestSessionEndpoints:
    def test_create_session_accepts_png(self, client):
        r = client.post("/sessions", content=png_bytes(np.zeros((64, 64))))
        assert r.status_code == 201
        body = r.json()
        assert body["image"] == {"width": 64, "height": 64}
        assert body["points"] == []
        assert body["has_mask"] is False

    def test_garbage_upload_415(self, client):
        r = client.post("/sessions", content=b"0123456789")
        assert r.status_code == 415

    def test_oversize_upload_413(self, tmp_path):
        app = create_app(tmp_path / "small", max_upload_bytes=512)
        with TestClient(app) as c:
            r = c.post("/sessions", content=png_bytes(np.random.rand(64, 64)))
            assert r.status_code == 413

    def test_get_unknown_session_404(self, client):
        assert client.get("/sessions/deadbeef").status_code == 404

    def test_put_points_validates_bounds(self, client):
        sid = client.post("/sessions", content=png_bytes(np.zeros((32, 32)))).json()["id"]
        r = client.put(
            f"/sessions/{sid}/points",
            json={"points": [{"source": [-1, 5], "target": [3, 3]}]},
        )
        assert r.status_code == 422

    def test_put_points_echoes_canonical(self, client):
        sid = client.post("/sessions", content=png_bytes(np.zeros((32, 32)))).json()["id"]
        r = client.put(
            f"/sessions/{sid}/points",
            json={"points": [{"source": [1, 2], "target": [3.5, 4.25]}]},
        )
        assert r.status_code == 200
        assert r.json()["points"] == [{"source": [1.0, 2.0], "target": [3.5, 4.25]}]

    def test_put_points_idempotent(self, client):
        sid = client.post("/sessions", content=png_bytes(np.zeros((32, 32)))).json()["id"]
        payload = {"points": [{"source": [1, 2], "target": [3, 4]}]}
        a = client.put(f"/sessions/{sid}/points", json=payload).json()["points"]
        b = client.put(f"/sessions/{sid}/points", json=payload).json()["points"]
        assert a == b

    def test_put_mask_wrong_dims_422(self, client):
        sid = client.post("/sessions", content=png_bytes(np.zeros((32, 32)))).json()["id"]
        r = client.put(
            f"/sessions/{sid}/mask", content=mask_png_bytes(np.ones((16, 16), dtype=bool))
        )
        assert r.status_code == 422

    def test_session_survives_restart(self, tmp_path):
        app1 = create_app(tmp_path / "data")
        with TestClient(app1) as c1:
            sid = c1.post("/sessions", content=png_bytes(np.zeros((24, 24)))).json()["id"]
        app2 = create_app(tmp_path / "data")
        with TestClient(app2) as c2:
            assert c2.get(f"/sessions/{sid}").status_code == 200


class TestEditJobs:
    def test_start_requires_mask_and_points(self, client):
        sid = client.post("/sessions", content=png_bytes(np.zeros((32, 32)))).json()["id"]
        assert client.post(f"/sessions/{sid}/edit").status_code == 422

    def test_full_edit_lifecycle(self, client):
        sid = make_session(client)
        r = client.post(f"/sessions/{sid}/edit")
        assert r.status_code == 202
        job_id = r.json()["job_id"]
        state = wait_terminal(client, job_id)
        assert state == "done"
        result = client.get(f"/jobs/{job_id}/result")
        assert result.status_code == 200
        assert result.headers["content-type"] == "image/png"
        Image.open(io.BytesIO(result.content)).verify()

    def test_unknown_engine_override_422(self, client):
        sid = make_session(client)
        r = client.post(f"/sessions/{sid}/edit", json={"warp_factor": 9})
        assert r.status_code == 422

    def test_second_start_conflicts(self, client):
        sid = make_session(client)
        first = client.post(f"/sessions/{sid}/edit", json={"max_steps": 160, "stop_dist": 0.05})
        assert first.status_code == 202
        second = client.post(f"/sessions/{sid}/edit")
        assert second.status_code == 409
        job_id = first.json()["job_id"]
        client.post(f"/jobs/{job_id}/cancel")
        wait_terminal(client, job_id)

    def test_result_before_done_409(self, client):
        sid = make_session(client)
        job_id = client.post(
            f"/sessions/{sid}/edit", json={"max_steps": 160, "stop_dist": 0.05}
        ).json()["job_id"]
        r = client.get(f"/jobs/{job_id}/result")
        assert r.status_code == 409
        client.post(f"/jobs/{job_id}/cancel")
        wait_terminal(client, job_id)

    def test_failed_job_result_409_with_detail(self, tmp_path):
        class ExplodingBackend:
            def extract(self, latent, t=0, denoiser=None, prompt=""):
                raise RuntimeError("synthetic backend failure")

        app = create_app(
            tmp_path / "data",
            engine_defaults=dict(FAST_ENGINE),
            backend_factory=ExplodingBackend,
        )
        with TestClient(app) as c:
            sid = make_session(c)
            job_id = c.post(f"/sessions/{sid}/edit").json()["job_id"]
            assert wait_terminal(c, job_id) == "failed"
            r = c.get(f"/jobs/{job_id}/result")
            assert r.status_code == 409
            assert "synthetic backend failure" in json.dumps(r.json())

    def test_cancel_running_job(self, client):
        sid = make_session(client)
        job_id = client.post(
            f"/sessions/{sid}/edit", json={"max_steps": 160, "stop_dist": 0.05}
        ).json()["job_id"]
        r = client.post(f"/jobs/{job_id}/cancel")
        assert r.status_code == 200
        assert wait_terminal(client, job_id) == "cancelled"

    def test_cancel_terminal_job_409(self, client):
        sid = make_session(client)
        job_id = client.post(f"/sessions/{sid}/edit").json()["job_id"]
        wait_terminal(client, job_id)
        assert client.post(f"/jobs/{job_id}/cancel").status_code == 409

    def test_unknown_job_404(self, client):
        assert client.get("/jobs/feedface").status_code == 404
        assert client.get("/jobs/feedface/progress").status_code == 404
        assert client.get("/jobs/feedface/result").status_code == 404


class TestProgressStream:
    def read_stream(self, client, job_id):
        lines = []
        with client.stream("GET", f"/jobs/{job_id}/progress") as response:
            assert response.status_code == 200
            for line in response.iter_lines():
                if line.strip():
                    lines.append(json.loads(line))
        return lines

    def test_backlog_then_terminal_after_done(self, client):
        sid = make_session(client)
        job_id = client.post(f"/sessions/{sid}/edit").json()["job_id"]
        wait_terminal(client, job_id)
        records = self.read_stream(client, job_id)
        assert "final" in records[-1]
        steps = [r["step"] for r in records[:-1]]
        assert steps == list(range(len(steps)))

    def test_live_stream_is_gap_free(self, client):
        sid = make_session(client)
        job_id = client.post(
            f"/sessions/{sid}/edit", json={"max_steps": 12, "stop_dist": 0.05}
        ).json()["job_id"]
        records = self.read_stream(client, job_id)
        steps = [r["step"] for r in records if "step" in r]
        assert steps == list(range(len(steps)))
        assert "final" in records[-1]

    def test_finished_job_streams_after_restart(self, tmp_path):
        app1 = create_app(tmp_path / "data", engine_defaults=dict(FAST_ENGINE))
        with TestClient(app1) as c1:
            sid = make_session(c1)
            job_id = c1.post(f"/sessions/{sid}/edit").json()["job_id"]
            wait_terminal(c1, job_id)
            first = self.read_stream(c1, job_id)
        app2 = create_app(tmp_path / "data", engine_defaults=dict(FAST_ENGINE))
        with TestClient(app2) as c2:
            replay = self.read_stream(c2, job_id)
        assert [r.get("step") for r in replay[:-1]] == [r.get("step") for r in first[:-1]]
        assert replay[-1]["final"]["state"] == "done"


class TestJobStateMachine:
    def test_only_forward_transitions_allowed(self):
        for state, allowed in ALLOWED_TRANSITIONS.items():
            for target in JobState:
                record = JobRecord(id="x", session_id="s")
                record.state = state
                if target in allowed:
                    record.transition(target)
                    assert record.state is target
                else:
                    with pytest.raises(StateTransitionError):
                        record.transition(target)

    def test_registry_rejects_step_gaps(self, tmp_path):
        registry = JobRegistry(Store(tmp_path / "data"))
        job = registry.create("sess")
        registry.append_step(job.id, json.dumps({"step": 0}), 0)
        registry.append_step(job.id, json.dumps({"step": 1}), 1)
        with pytest.raises(StateTransitionError):
            registry.append_step(job.id, json.dumps({"step": 3}), 3)

    def test_one_active_job_per_session(self, tmp_path):
        registry = JobRegistry(Store(tmp_path / "data"))
        job = registry.create("sess")
        with pytest.raises(RuntimeError):
            registry.create("sess")
        registry.transition(job.id, JobState.RUNNING)
        registry.transition(job.id, JobState.DONE)
        registry.create("sess")
