import numpy as np
import pytest

from meshsplat import io, trainer


@pytest.fixture(scope="session")
def tiny_scene(tmp_path_factory):
    """A small synthetic dataset: level-1 icosphere, 60 Gaussians, 6 frames at 32x32."""
    out = tmp_path_factory.mktemp("tiny_scene")
    spec = io.SyntheticSpec(level=1, n_gaussians=60, n_frames=6, width=32, height=32, gt_scale=0.15)
    manifest = io.generate_synthetic(3, spec, out)
    canonical, frames = io.load_dataset(manifest)
    loaded = trainer.frames_from_dataset(io.load_frames(canonical, frames))
    return manifest, canonical, loaded


ACCEPTANCE = {}
CRITERIA = {
    1: "gradient correctness",
    2: "rasterizer equivalence",
    3: "walking properties",
    4: "deformation equivariance",
    5: "synthetic recovery",
    6: "walking ablation direction",
    7: "bookkeeping",
    8: "determinism",
}


@pytest.fixture
def record_criterion():
    """Record the outcome of an acceptance criterion for the end-of-run summary."""

    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    ran = [item for item in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
           if "test_acceptance" in item.nodeid]
    if not ran and not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'} - {detail}")
        else:
            terminalreporter.write_line(f"criterion {n} ({name}): FAIL - no result recorded (errored or not selected)")
