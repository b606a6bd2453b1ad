"""The detector boundary: redb/1 line protocol client, handles, and filtering.

Detector weights never cross this boundary; a detector is an endpoint that
answers `infer` (and optionally `train`) requests, one JSON object per
line, after announcing its capabilities in a handshake line:

    {"proto": "redb/1", "prenms": true, "train": true}

Points always travel by file path. A handle admits one request in flight;
run several handles for parallelism.
"""

from __future__ import annotations

import json
import logging
import queue
import shutil
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import LabelSet, read_points, write_points
from .geom import Box3D

log = logging.getLogger(__name__)

PROTO_VERSION = "redb/1"
DEFAULT_TIMEOUT = 60.0


class DetectorError(RuntimeError):
    """Base class for detector-boundary failures."""


class ProtocolError(DetectorError):
    """Malformed record, bad handshake, or endpoint crash."""


class DetectorTimeout(DetectorError):
    """No response within the configured timeout."""


class UnsupportedCommandError(DetectorError):
    """The endpoint does not implement the requested command."""


class ClosedHandleError(DetectorError):
    """Operation on a handle that was already closed."""


def box_to_wire(box: Box3D) -> dict:
    d = {
        "cx": box.cx, "cy": box.cy, "cz": box.cz,
        "w": box.w, "l": box.l, "h": box.h,
        "yaw": box.yaw, "class": box.class_id,
    }
    if box.score is not None:
        d["score"] = box.score
    return d


def box_from_wire(d: dict) -> Box3D:
    try:
        return Box3D(
            float(d["cx"]), float(d["cy"]), float(d["cz"]),
            float(d["w"]), float(d["l"]), float(d["h"]),
            float(d["yaw"]), int(d["class"]),
            float(d["score"]) if "score" in d and d["score"] is not None else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed box record: {d!r}") from exc


@dataclass
class InferenceResult:
    """Post-NMS detections plus the raw pre-NMS candidates of one frame."""

    frame_id: str
    postnms: list[Box3D]
    prenms: list[Box3D] = field(default_factory=list)

    def __post_init__(self):
        for i, b in enumerate(self.postnms):
            if b.score is None:
                raise ValueError(f"postnms box {i} has no score")


def result_to_wire(result: InferenceResult) -> dict:
    return {
        "frame_id": result.frame_id,
        "postnms": [box_to_wire(b) for b in result.postnms],
        "prenms": [box_to_wire(b) for b in result.prenms],
    }


def result_from_wire(d: dict) -> InferenceResult:
    if "frame_id" not in d or "postnms" not in d:
        raise ProtocolError(f"infer response missing fields: {sorted(d)}")
    return InferenceResult(
        str(d["frame_id"]),
        [box_from_wire(b) for b in d["postnms"]],
        [box_from_wire(b) for b in d.get("prenms") or []],
    )


def filter_confident(result: InferenceResult, delta_pos: float) -> LabelSet:
    """Keep post-NMS boxes scoring strictly above the confidence threshold."""
    if not 0.0 <= delta_pos <= 1.0:
        raise ValueError(f"delta_pos must be in [0, 1], got {delta_pos}")
    return LabelSet(result.frame_id, [b for b in result.postnms if b.score > delta_pos])


class DetectorHandle:
    """One detector endpoint. Live until close(); one request in flight."""

    prenms_capable: bool = False
    train_capable: bool = False

    def __init__(self):
        self._lock = threading.Lock()
        self._closed = False

    @property
    def closed(self) -> bool:
        return self._closed

    def _check_live(self):
        if self._closed:
            raise ClosedHandleError("handle is closed")

    def infer(self, frame_id: str, points: np.ndarray | None = None, *,
              points_path=None) -> InferenceResult:
        raise NotImplementedError

    def train(self, manifest_path) -> None:
        raise NotImplementedError

    def close(self) -> None:
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


class InProcessDetector(DetectorHandle):
    """Wraps an in-process detector object (e.g. the simulation mock).

    The wrapped object provides `detect(frame_id, points) -> InferenceResult`
    and optionally `train(manifest_path)`; capability flags mirror what a
    subprocess endpoint would announce in its handshake.
    """

    def __init__(self, detector, *, prenms: bool = True, train: bool | None = None):
        super().__init__()
        self._detector = detector
        self.prenms_capable = prenms
        self.train_capable = hasattr(detector, "train") if train is None else train

    def infer(self, frame_id, points=None, *, points_path=None):
        self._check_live()
        if points is None:
            if points_path is None:
                raise ValueError("need points or points_path")
            points = read_points(points_path)
        with self._lock:
            result = self._detector.detect(frame_id, points)
        if result.frame_id != frame_id:
            raise ProtocolError(f"detector answered {result.frame_id!r} for {frame_id!r}")
        if not self.prenms_capable:
            result = InferenceResult(result.frame_id, result.postnms, [])
        return result

    def train(self, manifest_path):
        self._check_live()
        if not self.train_capable:
            raise UnsupportedCommandError("endpoint does not support train")
        with self._lock:
            self._detector.train(manifest_path)


class SubprocessDetector(DetectorHandle):
    """Launches an endpoint command and speaks redb/1 over its stdio."""

    def __init__(self, cmd, timeout: float = DEFAULT_TIMEOUT):
        super().__init__()
        self.cmd = list(cmd)
        self.timeout = timeout
        self._tmpdir = None
        self._tmpcount = 0
        self._proc = subprocess.Popen(
            self.cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, encoding="utf-8", bufsize=1,
        )
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        hs = self._next_record("handshake")
        if hs.get("proto") != PROTO_VERSION:
            self.close()
            raise ProtocolError(f"bad handshake: {hs!r}")
        self.prenms_capable = bool(hs.get("prenms", False))
        self.train_capable = bool(hs.get("train", False))

    def _read_loop(self):
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)  # EOF sentinel

    def _next_record(self, what: str) -> dict:
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise DetectorTimeout(f"no {what} within {self.timeout}s from {self.cmd}")
        if line is None:
            code = self._proc.poll()
            raise ProtocolError(f"endpoint exited (code {code}) before sending {what}")
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"unparseable {what} line: {line!r}") from exc
        if not isinstance(record, dict):
            raise ProtocolError(f"{what} is not a JSON object: {line!r}")
        return record

    def _request(self, record: dict, what: str) -> dict:
        self._check_live()
        with self._lock:
            if self._proc.poll() is not None:
                raise ProtocolError(f"endpoint already exited (code {self._proc.returncode})")
            assert self._proc.stdin is not None
            try:
                self._proc.stdin.write(json.dumps(record) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise ProtocolError("endpoint pipe closed") from exc
            response = self._next_record(what)
        if "error" in response:
            message = str(response["error"])
            if "unsupported" in message.lower():
                raise UnsupportedCommandError(message)
            raise ProtocolError(f"endpoint error: {message}")
        return response

    def infer(self, frame_id, points=None, *, points_path=None):
        self._check_live()
        if points_path is None:
            if points is None:
                raise ValueError("need points or points_path")
            if self._tmpdir is None:
                self._tmpdir = tempfile.mkdtemp(prefix="redb-proto-")
            self._tmpcount += 1
            points_path = Path(self._tmpdir) / f"frame_{self._tmpcount}.bin"
            write_points(points, points_path)
        response = self._request(
            {"cmd": "infer", "frame_id": frame_id, "points": str(points_path)}, "infer response")
        result = result_from_wire(response)
        if result.frame_id != frame_id:
            raise ProtocolError(f"endpoint answered {result.frame_id!r} for {frame_id!r}")
        return result

    def train(self, manifest_path):
        if not self.train_capable:
            raise UnsupportedCommandError("endpoint did not declare train capability")
        response = self._request({"cmd": "train", "manifest": str(manifest_path)}, "train response")
        if response.get("ok") is not True:
            raise ProtocolError(f"unexpected train response: {response!r}")

    def close(self):
        if self._closed:
            return
        self._closed = True
        if self._proc.poll() is None:
            try:
                assert self._proc.stdin is not None
                self._proc.stdin.write(json.dumps({"cmd": "shutdown"}) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError):
                pass
            try:
                self._proc.wait(timeout=10.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        if self._tmpdir is not None:
            shutil.rmtree(self._tmpdir, ignore_errors=True)


def launch_detector(cmd, timeout: float = DEFAULT_TIMEOUT) -> SubprocessDetector:
    return SubprocessDetector(cmd, timeout=timeout)


def serve_endpoint(detector, instream, outstream, *, prenms: bool = True,
                   train: bool = True) -> int:
    """Serve the redb/1 protocol for an in-process detector object.

    Reads requests line by line from `instream` and answers on `outstream`
    until a shutdown command or EOF; used to expose the built-in mock
    detector as a standalone endpoint. Returns 0 on clean shutdown.
    """

    def emit(obj: dict):
        outstream.write(json.dumps(obj) + "\n")
        outstream.flush()

    emit({"proto": PROTO_VERSION, "prenms": prenms, "train": train})
    for raw in instream:
        line = raw.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request is not an object")
        except ValueError:
            emit({"error": f"malformed request: {line[:200]}"})
            continue
        cmd = request.get("cmd")
        if cmd == "shutdown":
            break
        if cmd == "infer":
            try:
                points = read_points(request["points"])
                result = detector.detect(str(request["frame_id"]), points)
            except KeyError as exc:
                emit({"error": f"infer request missing field {exc}"})
                continue
            except (OSError, ValueError) as exc:
                emit({"error": str(exc)})
                continue
            wire = result_to_wire(result)
            if not prenms:
                wire.pop("prenms", None)
            emit(wire)
        elif cmd == "train":
            if not train:
                emit({"error": "unsupported command: train"})
                continue
            try:
                detector.train(request["manifest"])
            except KeyError as exc:
                emit({"error": f"train request missing field {exc}"})
                continue
            except (OSError, ValueError) as exc:
                emit({"error": str(exc)})
                continue
            emit({"ok": True})
        else:
            emit({"error": f"unsupported command: {cmd}"})
    return 0
