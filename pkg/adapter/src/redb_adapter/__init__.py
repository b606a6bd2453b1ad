"""Reference endpoint for the redb/1 detector protocol.

This package shows how a real detector plugs into the curation pipeline:
speak newline-delimited JSON on stdio, read point files, answer infer and
train requests. The bundled detector is a trivial cluster-echo - swap
:func:`redb_adapter.echo.ClusterEcho.detect` for your model's forward pass
and keep everything else.
"""

from .conformance import ConformanceReport, run_conformance
from .echo import AdapterConfig, ClusterEcho
from .server import serve

__all__ = ["AdapterConfig", "ClusterEcho", "ConformanceReport", "run_conformance", "serve"]

__version__ = "0.1.0"
