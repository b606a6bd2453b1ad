"""The redb/1 request loop: handshake, then one JSON response per line."""

from __future__ import annotations

import json
import logging

from .echo import AdapterConfig, ClusterEcho
from .points import read_points

log = logging.getLogger(__name__)

PROTO_VERSION = "redb/1"


def serve(config: AdapterConfig, instream, outstream, detector: ClusterEcho | None = None) -> int:
    """Run until a shutdown request or EOF; returns the process exit code."""
    detector = detector or ClusterEcho(config)

    def emit(obj: dict):
        outstream.write(json.dumps(obj) + "\n")
        outstream.flush()

    emit({"proto": PROTO_VERSION, "prenms": config.prenms, "train": config.train})
    for raw in instream:
        line = raw.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("not an object")
        except ValueError:
            emit({"error": f"malformed request: {line[:200]}"})
            continue

        cmd = request.get("cmd")
        if cmd == "shutdown":
            break
        if cmd == "infer":
            try:
                points = read_points(request["points"])
            except KeyError:
                emit({"error": "infer request missing 'points'"})
                continue
            except (OSError, ValueError) as exc:
                emit({"error": str(exc)})
                continue
            if "frame_id" not in request:
                emit({"error": "infer request missing 'frame_id'"})
                continue
            boxes = detector.detect(points)
            response = {"frame_id": str(request["frame_id"]), "postnms": boxes}
            if config.prenms:
                response["prenms"] = list(boxes)
            emit(response)
        elif cmd == "train":
            if not config.train:
                emit({"error": "unsupported command: train"})
                continue
            try:
                detector.train(request["manifest"])
            except KeyError:
                emit({"error": "train request missing 'manifest'"})
                continue
            except (OSError, ValueError) as exc:
                emit({"error": str(exc)})
                continue
            emit({"ok": True})
        else:
            emit({"error": f"unsupported command: {cmd}"})
    return 0
