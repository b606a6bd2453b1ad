import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from redb.geom import Box3D
from redb.sim import DomainSpec, MockDetector, MockDetectorSpec, NoiseParams, generate_domain


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_two_domains(root, *, n_source=6, n_target=8, seed=0, target_density=60.0,
                     beam_subsample=0.6, clutter=250.0, objects=(2, 5)):
    """Write a small source/target pair; returns (source_dir, target_dir)."""
    source_spec = DomainSpec(name="source", frames=n_source, density=90.0,
                             clutter_rate=clutter, objects_per_frame=objects,
                             rng_seed=seed * 2 + 1)
    target_spec = DomainSpec(name="target", frames=n_target, density=target_density,
                             beam_subsample=beam_subsample, clutter_rate=clutter,
                             objects_per_frame=objects, rng_seed=seed * 2 + 2)
    source_dir = Path(root) / "source"
    target_dir = Path(root) / "target"
    generate_domain(source_spec, source_dir)
    generate_domain(target_spec, target_dir)
    return source_dir, target_dir


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    results = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" in nodeid and getattr(rep, "when", "call") == "call":
                results[nodeid.split("::")[-1]] = "PASS" if status == "passed" else "FAIL"
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name in sorted(results):
            terminalreporter.write_line(f"{results[name]}  {name}")


def mock_spec(seed=0, **noise_overrides) -> MockDetectorSpec:
    target_noise = NoiseParams(
        center_std=noise_overrides.pop("center_std", 0.12),
        size_std=noise_overrides.pop("size_std", 0.08),
        yaw_std=noise_overrides.pop("yaw_std", 0.05),
        miss_prob=noise_overrides.pop("miss_prob", 0.1),
        fp_rate=noise_overrides.pop("fp_rate", 0.8),
    )
    return MockDetectorSpec(source_noise=NoiseParams(0.02, 0.02, 0.01, 0.0, 0.0),
                            target_noise=target_noise, target_prefix="target",
                            rng_seed=seed, **noise_overrides)


def random_box(rng, center_span=3.0, dim_range=(0.4, 3.0), with_score=False,
               classes=(1, 2, 3)) -> Box3D:
    score = float(rng.uniform(0.05, 1.0)) if with_score else None
    return Box3D(
        float(rng.uniform(-center_span, center_span)),
        float(rng.uniform(-center_span, center_span)),
        float(rng.uniform(-1.0, 1.0)),
        float(rng.uniform(*dim_range)),
        float(rng.uniform(*dim_range)),
        float(rng.uniform(*dim_range)),
        float(rng.uniform(-np.pi, np.pi)),
        int(rng.choice(classes)),
        score,
    )
