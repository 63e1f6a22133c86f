import io

import numpy as np
import pytest
from fastapi.testclient import TestClient

from bafnet.core.checkpoint import save_checkpoint
from bafnet.core.config import AppSettings, get_settings
from bafnet.core.data import DEFAULT_PALETTE
from bafnet.core.fusion import build_model
from bafnet.main import app
from bafnet.utils.image_utils import read_rgb, rgb_to_png_bytes
from conftest import TINY_MODEL


@pytest.fixture
def client():
    yield TestClient(app)
    app.dependency_overrides.clear()


@pytest.fixture
def with_checkpoint(tmp_path, tiny_config):
    path = str(tmp_path / "served.bafnet")
    save_checkpoint(path, build_model(tiny_config))
    app.dependency_overrides[get_settings] = lambda: AppSettings(checkpoint_path=path)
    return path


def _png(rng, size=64):
    return rgb_to_png_bytes(rng.integers(0, 256, size=(size, size, 3)).astype(np.uint8))


class TestSystemRoutes:
    def test_root_lists_endpoints(self, client):
        body = client.get("/").json()
        assert set(body["endpoints"]) == {"inspect", "predict", "health"}

    def test_root_lists_classes_and_presets(self, client):
        body = client.get("/").json()
        assert body["classes"][-1] == "clutter"
        assert "full" in body["presets"]

    def test_health_without_checkpoint(self, client, tmp_path):
        app.dependency_overrides[get_settings] = lambda: AppSettings(checkpoint_path=str(tmp_path / "missing.bafnet"))
        response = client.get("/health")
        assert response.status_code == 200
        assert response.json() == {"status": "healthy", "checkpoint_configured": False, "num_classes": 6}

    def test_health_with_checkpoint(self, client, with_checkpoint):
        assert client.get("/health").json()["checkpoint_configured"]


class TestInspectRoute:
    def test_reports_complexity(self, client):
        response = client.post("/inspect", json={"model": TINY_MODEL, "input_size": 64})
        assert response.status_code == 200
        body = response.json()
        assert body["input_shape"] == [1, 3, 64, 64]
        assert body["flops"] > body["macs"] > 0

    def test_indivisible_size_is_bad_request(self, client):
        response = client.post("/inspect", json={"model": TINY_MODEL, "input_size": 48})
        assert response.status_code == 400

    def test_invalid_config_is_unprocessable(self, client):
        response = client.post("/inspect", json={"model": {**TINY_MODEL, "num_heads": 3}, "input_size": 64})
        assert response.status_code == 422


class TestPredictRoute:
    def test_without_checkpoint(self, client, tmp_path, rng):
        app.dependency_overrides[get_settings] = lambda: AppSettings(checkpoint_path=str(tmp_path / "missing.bafnet"))
        response = client.post("/predict", files={"image": ("tile.png", _png(rng), "image/png")})
        assert response.status_code == 503

    def test_returns_palette_png(self, client, with_checkpoint, rng):
        response = client.post("/predict", files={"image": ("tile.png", _png(rng), "image/png")})
        assert response.status_code == 200
        assert response.headers["content-type"] == "image/png"
        mask = DEFAULT_PALETTE.decode(read_rgb(io.BytesIO(response.content)))
        assert mask.shape == (64, 64)

    def test_rejects_non_png(self, client, with_checkpoint, rng):
        response = client.post("/predict", files={"image": ("tile.jpg", _png(rng), "image/jpeg")})
        assert response.status_code == 400

    def test_rejects_undecodable_upload(self, client, with_checkpoint):
        response = client.post("/predict", files={"image": ("tile.png", b"not an image", "image/png")})
        assert response.status_code == 400
