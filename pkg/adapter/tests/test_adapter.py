import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest
from shapely.geometry import Polygon

from redb_adapter.echo import AdapterConfig, ClusterEcho
from redb_adapter.points import read_points, write_points
from redb_adapter.server import serve

ADAPTER_CMD = [sys.executable, "-m", "redb_adapter", "serve"]


def make_object_points(center, dims, yaw, n=500, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.empty((n, 4), dtype=np.float32)
    pts[:, 0] = rng.uniform(-dims[0] / 2, dims[0] / 2, n)
    pts[:, 1] = rng.uniform(-dims[1] / 2, dims[1] / 2, n)
    pts[:, 2] = rng.uniform(-dims[2] / 2, dims[2] / 2, n)
    pts[:, 3] = rng.random(n, dtype=np.float32)
    c, s = math.cos(yaw), math.sin(yaw)
    x = pts[:, 0].copy()
    y = pts[:, 1].copy()
    pts[:, 0] = c * x - s * y + center[0]
    pts[:, 1] = s * x + c * y + center[1]
    pts[:, 2] += center[2]
    return pts


def iou_3d(a, b):
    """Shapely-backed oriented IoU for checking detection quality."""

    def footprint(box):
        c, s = math.cos(box["yaw"]), math.sin(box["yaw"])
        hx, hy = box["w"] / 2, box["l"] / 2
        return Polygon([(box["cx"] + c * lx - s * ly, box["cy"] + s * lx + c * ly)
                        for lx, ly in ((hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy))])

    dz = min(a["cz"] + a["h"] / 2, b["cz"] + b["h"] / 2) - \
        max(a["cz"] - a["h"] / 2, b["cz"] - b["h"] / 2)
    if dz <= 0:
        return 0.0
    inter = footprint(a).intersection(footprint(b)).area * dz
    va = a["w"] * a["l"] * a["h"]
    vb = b["w"] * b["l"] * b["h"]
    return inter / (va + vb - inter)


class TestPointsIo:
    def test_round_trip(self, tmp_path, seed=3):
        rng = np.random.default_rng(seed)
        pts = rng.random((50, 4)).astype(np.float32)
        write_points(pts, tmp_path / "x.bin")
        assert np.array_equal(read_points(tmp_path / "x.bin"), pts)

    def test_truncation_rejected(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"\x01" * 20)
        with pytest.raises(ValueError):
            read_points(tmp_path / "bad.bin")


class TestClusterEcho:
    def test_single_object_recovered_with_good_iou(self):
        gt = {"cx": 5.0, "cy": -3.0, "cz": 0.8, "w": 1.8, "l": 4.5, "h": 1.6,
              "yaw": 0.4, "class": 1}
        points = make_object_points((5.0, -3.0, 0.8), (1.8, 4.5, 1.6), 0.4)
        boxes = ClusterEcho(AdapterConfig()).detect(points)
        assert len(boxes) == 1
        assert iou_3d(boxes[0], gt) >= 0.5
        assert boxes[0]["class"] == 1

    def test_empty_cloud(self):
        assert ClusterEcho(AdapterConfig()).detect(np.zeros((0, 4), dtype=np.float32)) == []

    def test_sparse_noise_ignored(self):
        rng = np.random.default_rng(1)
        noise = np.empty((20, 4), dtype=np.float32)
        noise[:, 0] = rng.uniform(-40, 40, 20)
        noise[:, 1] = rng.uniform(-40, 40, 20)
        noise[:, 2:] = rng.random((20, 2), dtype=np.float32)
        assert ClusterEcho(AdapterConfig()).detect(noise) == []

    def test_constant_score_rule(self):
        points = make_object_points((0, 0, 0.8), (1.8, 4.5, 1.6), 0.0)
        boxes = ClusterEcho(AdapterConfig(score_rule="constant:0.77")).detect(points)
        assert boxes[0]["score"] == 0.77

    def test_train_validates_manifest(self, tmp_path):
        echo = ClusterEcho(AdapterConfig())
        (tmp_path / "empty.tsv").write_text("")
        with pytest.raises(ValueError):
            echo.train(tmp_path / "empty.tsv")
        (tmp_path / "nolabels.tsv").write_text("f0\tpoints.bin\n")
        with pytest.raises(ValueError):
            echo.train(tmp_path / "nolabels.tsv")
        (tmp_path / "ok.tsv").write_text("f0\tpoints.bin\tlabels.txt\n")
        echo.train(tmp_path / "ok.tsv")
        assert echo.train_calls == 1


class TestServeLoop:
    def run_serve(self, requests, config=None):
        instream = io.StringIO("\n".join(json.dumps(r) if isinstance(r, dict) else r
                                         for r in requests) + "\n")
        outstream = io.StringIO()
        code = serve(config or AdapterConfig(), instream, outstream)
        lines = [json.loads(l) for l in outstream.getvalue().splitlines()]
        return code, lines

    def test_handshake_then_shutdown(self):
        code, lines = self.run_serve([{"cmd": "shutdown"}])
        assert code == 0
        assert lines == [{"proto": "redb/1", "prenms": True, "train": True}]

    def test_infer_empty_cloud(self, tmp_path):
        empty = tmp_path / "empty.bin"
        write_points(np.zeros((0, 4), dtype=np.float32), empty)
        code, lines = self.run_serve([
            {"cmd": "infer", "frame_id": "e", "points": str(empty)},
            {"cmd": "shutdown"},
        ])
        assert lines[1] == {"frame_id": "e", "postnms": [], "prenms": []}

    def test_infer_object_frame(self, tmp_path):
        frame = tmp_path / "obj.bin"
        write_points(make_object_points((2, 1, 0.8), (1.8, 4.5, 1.6), 1.0), frame)
        code, lines = self.run_serve([
            {"cmd": "infer", "frame_id": "o", "points": str(frame)},
            {"cmd": "shutdown"},
        ])
        assert len(lines[1]["postnms"]) == 1
        assert lines[1]["prenms"] == lines[1]["postnms"]

    def test_prenms_capability_respected(self, tmp_path):
        empty = tmp_path / "empty.bin"
        write_points(np.zeros((0, 4), dtype=np.float32), empty)
        code, lines = self.run_serve([
            {"cmd": "infer", "frame_id": "e", "points": str(empty)},
            {"cmd": "shutdown"},
        ], AdapterConfig(prenms=False))
        assert lines[0]["prenms"] is False
        assert "prenms" not in lines[1]

    def test_malformed_and_unknown_requests(self, tmp_path):
        code, lines = self.run_serve(["garbage {", {"cmd": "dance"}, {"cmd": "shutdown"}])
        assert "error" in lines[1]
        assert "error" in lines[2]

    def test_unreadable_points(self, tmp_path):
        code, lines = self.run_serve([
            {"cmd": "infer", "frame_id": "x", "points": str(tmp_path / "none.bin")},
            {"cmd": "shutdown"},
        ])
        assert "error" in lines[1]

    def test_train_capability(self, tmp_path):
        manifest = tmp_path / "m.tsv"
        manifest.write_text("f0\tp.bin\tl.txt\n")
        code, lines = self.run_serve([
            {"cmd": "train", "manifest": str(manifest)},
            {"cmd": "shutdown"},
        ])
        assert lines[1] == {"ok": True}
        code, lines = self.run_serve([
            {"cmd": "train", "manifest": str(manifest)},
            {"cmd": "shutdown"},
        ], AdapterConfig(train=False))
        assert "error" in lines[1] and "unsupported" in lines[1]["error"]


class TestSubprocessEntry:
    def test_clean_exit_via_module(self):
        proc = subprocess.run(ADAPTER_CMD, input=json.dumps({"cmd": "shutdown"}) + "\n",
                              capture_output=True, text=True, timeout=60)
        assert proc.returncode == 0
        handshake = json.loads(proc.stdout.splitlines()[0])
        assert handshake == {"proto": "redb/1", "prenms": True, "train": True}
