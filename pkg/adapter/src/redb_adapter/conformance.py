"""Black-box conformance checks for redb/1 endpoints.

Spawns the endpoint command, drives it over stdio with fixture frames, and
verifies the protocol surface: handshake shape, capability honesty, infer
round-trips, error-path recovery, train behavior, and clean shutdown.
Detection *content* is deliberately out of scope - a conforming endpoint
may detect anything or nothing.
"""

from __future__ import annotations

import json
import math
import queue
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .points import write_points

BOX_FIELDS = ("cx", "cy", "cz", "w", "l", "h", "yaw", "class", "score")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ConformanceReport:
    endpoint: str
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, detail: str = ""):
        self.checks.append(Check(name, bool(passed), detail))

    def render(self) -> str:
        lines = [f"conformance report for: {self.endpoint}"]
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            suffix = f"  ({c.detail})" if c.detail and not c.passed else ""
            lines.append(f"{status}  {c.name}{suffix}")
        verdict = "all checks passed" if self.passed else "CONFORMANCE FAILURES PRESENT"
        lines.append(verdict)
        return "\n".join(lines)


class _Endpoint:
    """Minimal line-oriented client used only for conformance driving."""

    def __init__(self, cmd, timeout: float):
        self.timeout = timeout
        self.proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                     text=True, encoding="utf-8", bufsize=1)
        self._lines: queue.Queue = queue.Queue()
        self._eof = False
        threading.Thread(target=self._pump, daemon=True).start()

    def _pump(self):
        assert self.proc.stdout is not None
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def read_line(self):
        if self._eof:
            return None
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            return None
        if line is None:
            self._eof = True
        return line

    def send_line(self, text: str):
        # A crashed endpoint shows up as failed checks, not a client error.
        try:
            assert self.proc.stdin is not None
            self.proc.stdin.write(text + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError):
            pass

    def request(self, obj: dict):
        self.send_line(json.dumps(obj))
        return self.read_line()

    def close(self):
        if self.proc.poll() is None:
            self.proc.kill()
        self.proc.wait()


def _fixture_object_frame(path: Path) -> None:
    """One dense elongated blob plus a few scattered points."""
    rng = np.random.default_rng(42)
    n = 400
    obj = np.empty((n, 4), dtype=np.float32)
    obj[:, 0] = rng.uniform(-0.9, 0.9, n)
    obj[:, 1] = rng.uniform(-2.2, 2.2, n)
    obj[:, 2] = rng.uniform(0.0, 1.6, n)
    obj[:, 3] = rng.random(n, dtype=np.float32)
    c, s = math.cos(0.4), math.sin(0.4)
    x = obj[:, 0].copy()
    y = obj[:, 1].copy()
    obj[:, 0] = c * x - s * y + 5.0
    obj[:, 1] = s * x + c * y - 3.0
    stray = np.empty((10, 4), dtype=np.float32)
    stray[:, 0] = rng.uniform(-30, 30, 10)
    stray[:, 1] = rng.uniform(-30, 30, 10)
    stray[:, 2] = rng.uniform(0, 1, 10)
    stray[:, 3] = rng.random(10, dtype=np.float32)
    write_points(np.concatenate([obj, stray]), path)


def _fixture_manifest(root: Path) -> Path:
    points = root / "train_f0.bin"
    labels = root / "train_f0.txt"
    _fixture_object_frame(points)
    labels.write_text("1 5.0 -3.0 0.8 1.8 4.5 1.6 0.4\n", encoding="utf-8")
    manifest = root / "train_manifest.tsv"
    manifest.write_text(f"f0\t{points.name}\t{labels.name}\n", encoding="utf-8")
    return manifest


def _parse_object(line: str | None):
    if line is None:
        return None, "no response (timeout or EOF)"
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        return None, f"unparseable line: {line[:120]!r}"
    if not isinstance(obj, dict):
        return None, "response is not a JSON object"
    if "\n" in line.rstrip("\n"):
        return None, "response spans multiple lines"
    return obj, ""


def _check_boxes(boxes) -> str:
    if not isinstance(boxes, list):
        return "not a list"
    for i, b in enumerate(boxes):
        if not isinstance(b, dict):
            return f"box {i} is not an object"
        for key in BOX_FIELDS:
            if key not in b:
                return f"box {i} missing field {key!r}"
        for key in ("cx", "cy", "cz", "w", "l", "h", "yaw", "score"):
            v = b[key]
            if not isinstance(v, (int, float)) or not math.isfinite(float(v)):
                return f"box {i} field {key!r} not a finite number"
        if not (b["w"] > 0 and b["l"] > 0 and b["h"] > 0):
            return f"box {i} has non-positive dims"
        if not 0.0 <= float(b["score"]) <= 1.0:
            return f"box {i} score outside [0, 1]"
        if not isinstance(b["class"], int):
            return f"box {i} class is not an integer"
    return ""


def run_conformance(cmd, timeout: float = 30.0, workdir=None) -> ConformanceReport:
    """Exercise one endpoint command and report every check."""
    cmd = list(cmd)
    report = ConformanceReport(" ".join(cmd))
    own_tmp = None
    if workdir is None:
        own_tmp = tempfile.TemporaryDirectory(prefix="redb-conformance-")
        workdir = own_tmp.name
    workdir = Path(workdir)

    object_frame = workdir / "object.bin"
    empty_frame = workdir / "empty.bin"
    _fixture_object_frame(object_frame)
    write_points(np.zeros((0, 4), dtype=np.float32), empty_frame)
    manifest = _fixture_manifest(workdir)

    endpoint = _Endpoint(cmd, timeout)
    try:
        handshake, err = _parse_object(endpoint.read_line())
        report.add("handshake-line", handshake is not None, err)
        if handshake is None:
            return report
        report.add("handshake-proto", handshake.get("proto") == "redb/1",
                   f"proto={handshake.get('proto')!r}")
        prenms = handshake.get("prenms")
        train = handshake.get("train")
        report.add("handshake-capability-flags",
                   isinstance(prenms, bool) and isinstance(train, bool),
                   f"prenms={prenms!r} train={train!r}")
        prenms = bool(prenms)
        train = bool(train)

        # infer round-trip on a frame containing an object-like blob
        response, err = _parse_object(endpoint.request(
            {"cmd": "infer", "frame_id": "fixture_obj", "points": str(object_frame)}))
        report.add("infer-response-line", response is not None, err)
        if response is not None:
            report.add("infer-echoes-frame-id",
                       response.get("frame_id") == "fixture_obj",
                       f"frame_id={response.get('frame_id')!r}")
            box_err = _check_boxes(response.get("postnms"))
            report.add("infer-postnms-wellformed", box_err == "", box_err)
            if prenms:
                honest = isinstance(response.get("prenms"), list)
                detail = "" if honest else "declared prenms but sent none"
                if honest:
                    box_err = _check_boxes(response["prenms"])
                    honest = box_err == ""
                    detail = box_err
                report.add("prenms-capability-honesty", honest, detail)
                if honest and response["postnms"]:
                    pre_keys = {tuple(sorted(b)) for b in response["prenms"]}
                    post_keys = {tuple(sorted(b)) for b in response["postnms"]}
                    report.add("prenms-postnms-schema-consistent",
                               post_keys <= pre_keys or not pre_keys,
                               "postnms boxes use fields absent from prenms")

        # empty frame
        response, err = _parse_object(endpoint.request(
            {"cmd": "infer", "frame_id": "fixture_empty", "points": str(empty_frame)}))
        ok = response is not None and response.get("postnms") == []
        if ok and prenms and response.get("prenms") not in ([], None):
            ok = False
            err = "non-empty prenms for an empty cloud"
        report.add("infer-empty-cloud", ok, err or str(response)[:120])

        # malformed request line, then recovery
        endpoint.send_line("this is not json")
        response, err = _parse_object(endpoint.read_line())
        report.add("malformed-request-gets-error",
                   response is not None and "error" in response, err)
        response, err = _parse_object(endpoint.request(
            {"cmd": "infer", "frame_id": "after_garbage", "points": str(empty_frame)}))
        report.add("recovers-after-malformed-request",
                   response is not None and response.get("frame_id") == "after_garbage", err)

        # unreadable points path
        response, err = _parse_object(endpoint.request(
            {"cmd": "infer", "frame_id": "bad", "points": str(workdir / "missing.bin")}))
        report.add("unreadable-points-gets-error",
                   response is not None and "error" in response, err)

        # unknown command
        response, err = _parse_object(endpoint.request({"cmd": "explode"}))
        report.add("unknown-command-gets-error",
                   response is not None and "error" in response, err)

        # train behavior must match the declared capability
        response, err = _parse_object(endpoint.request(
            {"cmd": "train", "manifest": str(manifest)}))
        if train:
            report.add("train-capability-honesty",
                       response is not None and response.get("ok") is True,
                       err or str(response)[:120])
        else:
            report.add("train-capability-honesty",
                       response is not None and "error" in response,
                       "undeclared train must answer with an error")

        # shutdown
        endpoint.send_line(json.dumps({"cmd": "shutdown"}))
        try:
            code = endpoint.proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            code = None
        report.add("shutdown-clean-exit", code == 0, f"exit code {code}")
    finally:
        endpoint.close()
        if own_tmp is not None:
            own_tmp.cleanup()
    return report
