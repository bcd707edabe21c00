"""Finite-difference check of the full chain from model parameters to pixels.

Each random scene places a handful of Gaussians on a deformed icosphere, and the
scalar ``L = sum(W * image)`` for a fixed random ``W`` is differentiated
analytically and by central differences, one coordinate at a time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from . import geometry
from . import quaternion as quat
from .deformation import build_deformation_field
from .gaussians import Camera
from .model import SplatModel, backward_model, render_model

GROUPS = ("u", "v", "d", "q", "s", "o", "c")
FD_STEP = 1e-4
REL_TOL = 1e-3
# gradients below this magnitude are compared absolutely (FD round-off floor)
ABS_FLOOR = 1e-6


@dataclass
class GradcheckReport:
    errors: Dict[str, List[float]] = field(default_factory=lambda: {g: [] for g in GROUPS})
    nan_count: int = 0
    seconds: float = 0.0

    def pass_fraction(self, group: str) -> float:
        e = np.asarray(self.errors[group])
        return float(np.mean(e < REL_TOL)) if len(e) else 1.0

    def max_error(self, group: str) -> float:
        e = np.asarray(self.errors[group])
        return float(e.max()) if len(e) else 0.0

    @property
    def ok(self) -> bool:
        return self.nan_count == 0 and all(self.pass_fraction(g) >= 0.99 for g in GROUPS)

    def table(self) -> str:
        lines = [f"{'group':<6}{'coords':>8}{'max rel err':>14}{'median':>12}{'pass':>9}"]
        for g in GROUPS:
            e = np.asarray(self.errors[g])
            med = float(np.median(e)) if len(e) else 0.0
            lines.append(f"{g:<6}{len(e):>8}{self.max_error(g):>14.3e}{med:>12.3e}{100 * self.pass_fraction(g):>8.2f}%")
        lines.append(f"NaNs: {self.nan_count}   time: {self.seconds:.1f}s   {'OK' if self.ok else 'FAIL'}")
        return "\n".join(lines)


def relative_error(a, b) -> float:
    return abs(a - b) / max(abs(a), abs(b), ABS_FLOOR)


def random_scene(seed: int, n_gaussians: int = 10, size: int = 32):
    """Deformed icosphere, a camera looking at it, and Gaussians embedded well inside their faces."""
    from .io import deform_vertices  # local import: io depends on model

    rng = np.random.default_rng(seed)
    cano = geometry.icosphere(1)
    posed = cano.with_vertices(deform_vertices(cano.vertices, rng.uniform(0, 2 * np.pi), 0.4))
    view = rng.normal(size=3)
    view /= np.linalg.norm(view)
    camera = Camera.look_at(3.0 * view, np.zeros(3), up=np.cross(view, rng.normal(size=3)), fov_deg=50.0, width=size, height=size)

    # put the Gaussians on the side facing the camera
    facing = np.flatnonzero(cano.face_normals @ view > 0.3)
    k = rng.choice(facing, size=n_gaussians)
    uv = rng.dirichlet(np.ones(3), size=n_gaussians)[:, :2] * 0.7 + 0.1
    d = rng.uniform(-0.05, 0.05, n_gaussians)
    rot = quat.normalize(rng.normal(size=(n_gaussians, 4)))
    log_scale = np.log(rng.uniform(0.08, 0.3, (n_gaussians, 3)))
    opac = rng.uniform(-1.5, 1.5, n_gaussians)
    color = rng.uniform(0.05, 0.95, (n_gaussians, 3))
    model = SplatModel(cano, k, uv, np.zeros((n_gaussians, 2)), d, rot, log_scale, opac, color)
    field = build_deformation_field(cano, posed)
    weights = rng.normal(size=(size, size, 3))
    background = rng.uniform(0, 1, 3)
    return model, posed, field, camera, weights, background


def _objective(model, posed, field, camera, weights, background) -> float:
    out, _ = render_model(model, posed, field, camera, background)
    return float(np.sum(weights * out.image))


def check_scene(seed: int, report: GradcheckReport, n_gaussians: int = 10, size: int = 32, h: float = FD_STEP) -> None:
    model, posed, field, camera, weights, background = random_scene(seed, n_gaussians, size)
    out, ctx = render_model(model, posed, field, camera, background)
    g = backward_model(ctx, weights)

    def fd(mutate) -> float:
        plus = model.copy()
        mutate(plus, +h)
        minus = model.copy()
        mutate(minus, -h)
        return (_objective(plus, posed, field, camera, weights, background)
                - _objective(minus, posed, field, camera, weights, background)) / (2 * h)

    def record(group, analytic, numeric):
        if not (np.isfinite(analytic) and np.isfinite(numeric)):
            report.nan_count += 1
            report.errors[group].append(np.inf)
        else:
            report.errors[group].append(relative_error(analytic, numeric))

    for i in range(len(model)):
        for j, name in enumerate("uv"):
            def m(mm, e, i=i, j=j):
                mm.delta[i, j] += e
            record(name, g.delta[i, j], fd(m))

        def m(mm, e, i=i):
            mm.d[i] += e
        record("d", g.d[i], fd(m))

        # tangent-space perturbation of the unit quaternion, then renormalize
        q = model.rotation[i]
        basis = np.linalg.svd(np.eye(4) - np.outer(q, q))[0][:, :3]
        for t in basis.T:
            def m(mm, e, i=i, t=t):
                mm.rotation[i] = quat.normalize(q + e * t)
            record("q", float(g.rotation[i] @ t), fd(m))

        for j in range(3):
            def m(mm, e, i=i, j=j):
                mm.log_scale[i, j] += e
            record("s", g.log_scale[i, j], fd(m))

        def m(mm, e, i=i):
            mm.opacity_logit[i] += e
        record("o", g.opacity_logit[i], fd(m))

        for j in range(3):
            def m(mm, e, i=i, j=j):
                mm.color[i, j] += e
            record("c", g.color[i, j], fd(m))


def run_gradcheck(seed: int = 0, n_scenes: int = 20, n_gaussians: int = 10, size: int = 32) -> GradcheckReport:
    report = GradcheckReport()
    start = time.perf_counter()
    for s in range(n_scenes):
        check_scene(seed * 1000 + s, report, n_gaussians, size)
    report.seconds = time.perf_counter() - start
    return report
