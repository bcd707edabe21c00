"""Lifted optimization: Gaussian parameters and their surface embeddings are
updated together, with walking, densification and opacity resets on a schedule.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from . import embedding
from . import quaternion as quat
from .deformation import DeformationField, build_deformation_field
from .embedding import Embedding, solve_embedding
from .errors import NonFiniteParam, ShapeMismatch
from .gaussians import Camera, logit, sigmoid
from .geometry import TriangleMesh
from .model import GradientSet, SplatModel, backward_model, render_model

log = logging.getLogger(__name__)

GROUPS = ("uvd", "rotation", "scale", "opacity", "color")
_GROUP_WIDTH = {"uvd": 3, "rotation": 4, "scale": 3, "opacity": 1, "color": 3}
METRIC_COLUMNS = ("iter", "loss_l1", "loss_ssim", "loss_scaling", "n_gaussians", "psnr_val")


@dataclass
class TrainConfig:
    """Training hyperparameters. Field names double as config-file keys.

    Loss weights and the densify/reset schedule follow the method's published
    values. The densification thresholds (``tau_grad``, ``prune_opacity``,
    ``split_factor``, ``percent_dense``, ``max_screen_radius``) and the
    learning rates are imported from the reference splatting implementation
    and adapted; they are not part of the method description.
    """

    lambda_l: float = 0.01
    lambda_s: float = 1.0
    t_s: float = 10.0
    t_r: float = 0.008
    use_ssim: bool = True

    total_iters: int = 30000
    densify_start: int = 600
    densify_interval: int = 100
    densify_stop: int = 15000
    opacity_reset_interval: int = 3000
    opacity_reset_logit: float = -9.21
    init_count: int = 10000
    seed: int = 0

    # learning rates (embedding rates are multiplied by the scene extent)
    lr_uvd_init: float = 1.6e-4
    lr_uvd_final: float = 1.6e-6
    lr_rotation: float = 0.001
    lr_scale: float = 0.005
    lr_opacity: float = 0.05
    lr_color: float = 0.01

    # densification (imported thresholds)
    tau_grad: float = 2e-4
    percent_dense: float = 0.01
    split_factor: float = 1.6
    prune_opacity: float = 0.005
    max_screen_radius: float = 20.0
    max_world_scale: float = 0.1

    walking: str = "walk"  # "walk" or "clip"
    walk_every_step: bool = False
    random_background: bool = True

    val_every: int = 10
    val_interval: int = 500
    threads: int = 0  # 0 = numba default

    def validate(self) -> "TrainConfig":
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name in ("opacity_reset_logit", "seed", "threads", "walking", "use_ssim", "walk_every_step", "random_background"):
                continue
            if f.name == "total_iters":
                if val < 0:
                    raise ValueError("total_iters must be non-negative")
                continue
            if not val > 0:
                raise ValueError(f"{f.name} must be positive, got {val!r}")
        if not self.densify_start < self.densify_stop:
            raise ValueError("densify_start must be smaller than densify_stop")
        if self.walking not in ("walk", "clip"):
            raise ValueError(f"walking must be 'walk' or 'clip', got {self.walking!r}")
        return self

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        for key, val in values.items():
            default = getattr(cfg, key)
            if isinstance(default, bool):
                if not isinstance(val, bool):
                    raise ValueError(f"{key} must be a boolean")
            elif isinstance(default, int):
                if isinstance(val, bool) or not isinstance(val, int):
                    raise ValueError(f"{key} must be an integer")
            elif isinstance(default, float):
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise ValueError(f"{key} must be a number")
                val = float(val)
            setattr(cfg, key, val)
        return cfg

    @classmethod
    def from_toml(cls, path) -> "TrainConfig":
        import tomli

        with open(path, "rb") as fh:
            return cls.from_dict(tomli.load(fh))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam moments with a step counter per row, so rows created by
    densification start with fresh bias correction."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: Dict[str, np.ndarray]

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(
            {g: np.zeros((n, w)) for g, w in _GROUP_WIDTH.items()},
            {g: np.zeros((n, w)) for g, w in _GROUP_WIDTH.items()},
            {g: np.zeros(n, dtype=np.int64) for g in _GROUP_WIDTH},
        )

    def __len__(self):
        return len(self.step["uvd"])

    def reset_rows(self, group: str, rows) -> None:
        self.m[group][rows] = 0.0
        self.v[group][rows] = 0.0
        self.step[group][rows] = 0

    def take(self, rows) -> "OptimizerState":
        return OptimizerState({g: a[rows].copy() for g, a in self.m.items()},
                              {g: a[rows].copy() for g, a in self.v.items()},
                              {g: a[rows].copy() for g, a in self.step.items()})

    def append_zeros(self, n: int) -> "OptimizerState":
        z = OptimizerState.zeros(n)
        return OptimizerState({g: np.concatenate([self.m[g], z.m[g]]) for g in self.m},
                              {g: np.concatenate([self.v[g], z.v[g]]) for g in self.v},
                              {g: np.concatenate([self.step[g], z.step[g]]) for g in self.step})


BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-15


def adam_update(param, grad, m, v, step, lr):
    """One Adam step on rows of ``param`` (in place). ``step`` counts per row."""
    m *= BETA1
    m += (1.0 - BETA1) * grad
    v *= BETA2
    v += (1.0 - BETA2) * grad * grad
    step += 1
    t = step.astype(np.float64)[:, None]
    mhat = m / (1.0 - BETA1**t)
    vhat = v / (1.0 - BETA2**t)
    param -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return param


def embedding_lr(config: TrainConfig, it: int, extent: float) -> float:
    """Exponential decay from ``lr_uvd_init`` to ``lr_uvd_final`` (scaled by extent)."""
    T = max(config.total_iters, 1)
    t = min(max(it / T, 0.0), 1.0)
    lr = math.exp((1.0 - t) * math.log(config.lr_uvd_init) + t * math.log(config.lr_uvd_final))
    return lr * extent


def model_param_views(model: SplatModel) -> Dict[str, np.ndarray]:
    return {"rotation": model.rotation, "scale": model.log_scale, "color": model.color}


def adam_step(model: SplatModel, grads: GradientSet, state: OptimizerState, group_lrs: Dict[str, float]) -> None:
    """Update every parameter group of ``model`` in place."""
    uvd = np.concatenate([model.delta, model.d[:, None]], axis=1)
    adam_update(uvd, np.concatenate([grads.delta, grads.d[:, None]], axis=1), state.m["uvd"], state.v["uvd"], state.step["uvd"], group_lrs["uvd"])
    model.delta[:] = uvd[:, :2]
    model.d[:] = uvd[:, 2]
    adam_update(model.rotation, grads.rotation, state.m["rotation"], state.v["rotation"], state.step["rotation"], group_lrs["rotation"])
    adam_update(model.log_scale, grads.log_scale, state.m["scale"], state.v["scale"], state.step["scale"], group_lrs["scale"])
    op = model.opacity_logit[:, None]
    adam_update(op, grads.opacity_logit[:, None], state.m["opacity"], state.v["opacity"], state.step["opacity"], group_lrs["opacity"])
    model.opacity_logit[:] = op[:, 0]
    adam_update(model.color, grads.color, state.m["color"], state.v["color"], state.step["color"], group_lrs["color"])
    for name, arr in (("uvd", uvd), ("rotation", model.rotation), ("scale", model.log_scale),
                      ("opacity", model.opacity_logit), ("color", model.color)):
        bad = ~np.isfinite(arr)
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            raise NonFiniteParam(name, row)


def check_lockstep(model: SplatModel, state: OptimizerState) -> None:
    n = len(model)
    sizes = {f: len(getattr(model, f)) for f in ("k", "uv", "delta", "d", "rotation", "log_scale", "opacity_logit", "color")}
    sizes.update({f"state.{k}.{g}": len(a[g]) for k, a in (("m", state.m), ("v", state.v), ("step", state.step)) for g in a})
    wrong = {k: s for k, s in sizes.items() if s != n}
    if wrong:
        raise AssertionError(f"model has {n} rows but {wrong}")


# ---------------------------------------------------------------------------
# losses


def scaling_regularizer(scales, t_s: float, t_r: float):
    """Penalty on long Gaussians: ``sum max_scale`` over Gaussians whose largest
    scale exceeds ``max(t_s, t_r * min_scale)``. Returns ``(loss, grad_scales)``."""
    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    smax = scales.max(axis=1)
    smin = scales.min(axis=1)
    hit = smax > np.maximum(t_s, t_r * smin)
    grad = np.zeros_like(scales)
    rows = np.flatnonzero(hit)
    grad[rows, scales[rows].argmax(axis=1)] = 1.0
    return float(np.abs(smax[hit]).sum()), grad


SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _ssim_kernel():
    x = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


_KERNEL = _ssim_kernel()


def _blur(img):
    out = correlate1d(img, _KERNEL, axis=0, mode="constant")
    return correlate1d(out, _KERNEL, axis=1, mode="constant")


def ssim(x, y, with_grad: bool = False):
    """Mean SSIM (11-tap Gaussian window, zero padding) and optionally d/dx."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx, my = _blur(x), _blur(y)
    cxx, cyy, cxy = _blur(x * x), _blur(y * y), _blur(x * y)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (cxy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (cxx - mx * mx) + (cyy - my * my) + SSIM_C2
    s = a1 * a2 / (b1 * b2)
    value = float(s.mean())
    if not with_grad:
        return value
    n = s.size
    d_mx = s * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2) / n
    d_cxx = -s / b2 / n
    d_cxy = 2 * s / a2 / n
    # the zero-padded symmetric blur is self-adjoint
    grad = _blur(d_mx) + 2 * x * _blur(d_cxx) + y * _blur(d_cxy)
    return value, grad


@dataclass
class LossTerms:
    total: float
    l1: float
    ssim: float  # the (1 - SSIM) term
    grad: np.ndarray


def composite_target(target, mask, background):
    background = np.asarray(background, dtype=np.float64)
    if mask is None:
        return np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[..., None]
    return mask * target + (1.0 - mask) * background


def photometric_loss(rendered, target, mask=None, background=(0.0, 0.0, 0.0), lambda_l: float = 0.01, use_ssim: bool = True) -> LossTerms:
    """L1 (plus ``lambda_l * (1 - SSIM)``) between the render and the target
    composited over ``background``. ``rendered`` is already composited."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatch(f"rendered {rendered.shape} vs target {target.shape}")
    if mask is not None and np.shape(mask)[:2] != target.shape[:2]:
        raise ShapeMismatch(f"mask {np.shape(mask)} vs target {target.shape}")
    tgt = composite_target(target, mask, background)
    diff = rendered - tgt
    l1 = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    ssim_term = 0.0
    if use_ssim and lambda_l > 0:
        val, g = ssim(rendered, tgt, with_grad=True)
        ssim_term = 1.0 - val
        grad = grad - lambda_l * g
    return LossTerms(l1 + lambda_l * ssim_term, l1, ssim_term, grad)


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# model construction and surgery


def sample_surface(mesh: TriangleMesh, n: int, rng):
    """Faces proportional to area, ``(u, v)`` uniform on the simplex."""
    probs = mesh.face_areas / mesh.face_areas.sum()
    k = rng.choice(mesh.n_faces, size=n, p=probs)
    r = rng.uniform(size=(n, 2))
    flip = r.sum(axis=1) > 1.0
    r[flip] = 1.0 - r[flip]
    return k.astype(np.int64), r


def initialize_model(mesh: TriangleMesh, config: TrainConfig, rng=None) -> SplatModel:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n = config.init_count
    k, uv = sample_surface(mesh, n, rng)
    model = SplatModel(mesh, k, uv, np.zeros((n, 2)), np.zeros(n), np.tile(quat.IDENTITY, (n, 1)),
                       np.zeros((n, 3)), np.full(n, float(logit(0.1))), np.full((n, 3), 0.5))
    pts = model.canonical_positions()
    if n > 1:
        kk = min(4, n)
        dist, _ = cKDTree(pts).query(pts, k=kk)
        mean_d = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    else:
        mean_d = np.full(n, mesh.mean_edge_length())
    model.log_scale[:] = np.log(mean_d)[:, None]
    return model


@dataclass
class DensifyStats:
    grad_accum: np.ndarray
    count: np.ndarray
    max_radius: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def add(self, grads: GradientSet, width: int, height: int) -> None:
        vis = grads.visible
        ndc = grads.mean2d * np.array([0.5 * width, 0.5 * height])
        self.grad_accum[vis] += np.linalg.norm(ndc[vis], axis=1)
        self.count[vis] += 1
        self.max_radius[vis] = np.maximum(self.max_radius[vis], grads.radius[vis])

    def take(self, rows):
        return DensifyStats(self.grad_accum[rows], self.count[rows], self.max_radius[rows])


def _split_children(model: SplatModel, rows, config: TrainConfig, rng, extent: float) -> SplatModel:
    """Two canonical-space samples per parent, each re-embedded with the parent as hint."""
    if len(rows) == 0:
        return SplatModel.empty(model.mesh)
    parent = model.take(rows)
    centres = parent.canonical_positions()
    k_par, u_par, v_par, d_par = parent.embeddings_folded()
    R = quat.to_matrix(quat.normalize(parent.rotation))
    s = np.exp(parent.log_scale)
    kids = []
    for rep in range(2):
        z = rng.normal(size=(len(rows), 3))
        pts = centres + np.einsum("nij,nj->ni", R, s * z)
        k = np.empty(len(rows), np.int64)
        uv = np.empty((len(rows), 2))
        d = np.empty(len(rows))
        for i in range(len(rows)):
            hint = Embedding(int(k_par[i]), float(u_par[i]), float(v_par[i]), float(d_par[i]))
            res = solve_embedding(model.mesh, pts[i], hint=hint)
            e = res.embedding
            k[i], uv[i], d[i] = e.k, (e.u, e.v), e.d
        kids.append(SplatModel(model.mesh, k, uv, np.zeros((len(rows), 2)), d, parent.rotation.copy(),
                               parent.log_scale - math.log(config.split_factor), parent.opacity_logit.copy(),
                               parent.color.copy()))
    return kids[0].append(kids[1])


@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0


def densify_and_prune(model: SplatModel, state: OptimizerState, stats: DensifyStats, it: int,
                      config: TrainConfig, extent: float, rng):
    """Clone small and split large high-gradient Gaussians, then prune.

    Returns ``(model, state, report)``; optimizer rows follow the model rows
    (zeros for new Gaussians).
    """
    report = DensifyReport()
    avg = np.where(stats.count > 0, stats.grad_accum / np.maximum(stats.count, 1), 0.0)
    hot = avg >= config.tau_grad
    big = np.exp(model.log_scale).max(axis=1) > config.percent_dense * extent
    clone_rows = np.flatnonzero(hot & ~big)
    split_rows = np.flatnonzero(hot & big)
    report.cloned = len(clone_rows)
    report.split = len(split_rows)

    clones = model.take(clone_rows)
    children = _split_children(model, split_rows, config, rng, extent)
    keep = np.ones(len(model), bool)
    keep[split_rows] = False
    max_radius = np.concatenate([stats.max_radius[keep], np.zeros(len(clones) + len(children))])
    model = model.take(np.flatnonzero(keep)).append(clones).append(children)
    state = state.take(np.flatnonzero(keep)).append_zeros(len(clones) + len(children))

    prune = sigmoid(model.opacity_logit) < config.prune_opacity
    if it > config.opacity_reset_interval:
        prune |= max_radius > config.max_screen_radius
        prune |= np.exp(model.log_scale).max(axis=1) > config.max_world_scale * extent
    keep = np.flatnonzero(~prune)
    report.pruned = int(prune.sum())
    return model.take(keep), state.take(keep), report


def apply_walking(model: SplatModel, state: OptimizerState, mode: str = "walk"):
    """Fold pending barycentric deltas into the recorded embeddings.

    With ``mode="walk"`` the deltas are routed across faces; every row whose
    face changed gets its ``uvd`` optimizer slots zeroed. With ``"clip"`` the
    update is projected into the home face instead. Returns the indices of the
    rows that changed face.
    """
    if len(model) == 0:
        return np.zeros(0, np.int64)
    if mode == "clip":
        uv, _ = model.effective_uv()
        model.uv[:] = uv
        model.delta[:] = 0.0
        return np.zeros(0, np.int64)
    moving = np.flatnonzero(np.any(model.delta != 0.0, axis=1))
    if len(moving) == 0:
        return moving
    k, uv, _, status = embedding.walk_batch(model.mesh, model.k[moving], model.uv[moving, 0], model.uv[moving, 1],
                                            model.delta[moving, 0], model.delta[moving, 1])
    stuck = status == embedding.WalkStatus.MAX_HOPS_EXCEEDED
    if stuck.any():
        log.warning("%d walks exceeded the hop limit; keeping their last face", int(stuck.sum()))
    changed = moving[k != model.k[moving]]
    model.k[moving] = k
    model.uv[moving] = uv
    model.delta[moving] = 0.0
    state.reset_rows("uvd", changed)
    return changed


def opacity_reset(model: SplatModel, state: OptimizerState, value: float) -> None:
    model.opacity_logit[:] = value
    state.reset_rows("opacity", slice(None))


def boundary_fraction(model: SplatModel, margin: float = 0.01) -> float:
    """Share of embeddings whose smallest barycentric coordinate is below ``margin``."""
    if len(model) == 0:
        return 0.0
    uv, _ = model.effective_uv()
    w = np.stack([uv[:, 0], uv[:, 1], 1.0 - uv[:, 0] - uv[:, 1]], axis=1)
    return float(np.mean(w.min(axis=1) < margin))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainFrame:
    image: np.ndarray
    mask: Optional[np.ndarray]
    camera: Camera
    posed: TriangleMesh
    frame_id: int = 0


@dataclass
class TrainResult:
    model: SplatModel
    state: OptimizerState
    metrics: List[dict]
    lockstep_checks: int = 0
    densify_reports: List[DensifyReport] = field(default_factory=list)
    final_psnr: float = float("nan")
    seconds: float = 0.0


def split_frames(frames: Sequence, val_every: int):
    """Frame ``i`` is held out when ``i % val_every == val_every - 1``."""
    train = [f for i, f in enumerate(frames) if i % val_every != val_every - 1]
    val = [f for i, f in enumerate(frames) if i % val_every == val_every - 1]
    return train, val


def evaluate(model: SplatModel, frames: Sequence[TrainFrame], fields_: Sequence[DeformationField]) -> float:
    """Mean PSNR over ``frames``, rendered on black against the masked target."""
    if not frames:
        return float("nan")
    vals = []
    for f, fld in zip(frames, fields_):
        out, _ = render_model(model, f.posed, fld, f.camera)
        vals.append(psnr(out.image, composite_target(f.image, f.mask, np.zeros(3))))
    return float(np.mean(vals))


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def write_metrics(path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def train(canonical: TriangleMesh, frames: Sequence[TrainFrame], config: TrainConfig,
          model: Optional[SplatModel] = None, metrics_path=None,
          callback: Optional[Callable[[int, SplatModel, OptimizerState], None]] = None) -> TrainResult:
    """Fit a model to ``frames`` (each with image, optional mask, camera and posed mesh)."""
    config.validate()
    if config.threads:
        import numba

        numba.set_num_threads(min(config.threads, numba.config.NUMBA_NUM_THREADS))
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = initialize_model(canonical, config, rng)
    else:
        model = model.copy()
    state = OptimizerState.zeros(len(model))
    extent = canonical.bounding_radius()

    train_frames, val_frames = split_frames(list(frames), config.val_every)
    if not train_frames:
        train_frames = list(frames)
    train_fields = [build_deformation_field(canonical, f.posed, i) for i, f in enumerate(train_frames)]
    val_fields = [build_deformation_field(canonical, f.posed, i) for i, f in enumerate(val_frames)]
    stats = DensifyStats.zeros(len(model))
    result = TrainResult(model, state, [])
    order: List[int] = []

    for it in range(1, config.total_iters + 1):
        if not order:
            order = list(rng.permutation(len(train_frames)))
        fi = order.pop()
        frame = train_frames[fi]
        bg = rng.uniform(0.0, 1.0, 3) if config.random_background else np.zeros(3)

        out, ctx = render_model(model, frame.posed, train_fields[fi], frame.camera, bg)
        terms = photometric_loss(out.image, frame.image, frame.mask, bg, config.lambda_l, config.use_ssim)
        grads = backward_model(ctx, terms.grad)
        reg, reg_grad = scaling_regularizer(np.exp(model.log_scale), config.t_s, config.t_r)
        if reg > 0:
            grads.log_scale += config.lambda_s * reg_grad * np.exp(model.log_scale)

        lrs = {"uvd": embedding_lr(config, it, extent), "rotation": config.lr_rotation, "scale": config.lr_scale,
               "opacity": config.lr_opacity, "color": config.lr_color}
        adam_step(model, grads, state, lrs)
        if it <= config.densify_stop:
            stats.add(grads, frame.camera.width, frame.camera.height)

        on_grid = it % config.densify_interval == 0
        if config.densify_start <= it <= config.densify_stop and on_grid:
            model, state, rep = densify_and_prune(model, state, stats, it, config, extent, rng)
            result.densify_reports.append(rep)
            stats = DensifyStats.zeros(len(model))
        if on_grid or config.walk_every_step:
            apply_walking(model, state, config.walking)
        if on_grid:
            check_lockstep(model, state)
            result.lockstep_checks += 1
        if it % config.opacity_reset_interval == 0 and it < config.total_iters:
            opacity_reset(model, state, config.opacity_reset_logit)

        psnr_val = float("nan")
        if it % config.val_interval == 0 or it == config.total_iters:
            psnr_val = evaluate(model, val_frames, val_fields)
        result.metrics.append({
            "iter": it, "loss_l1": terms.l1, "loss_ssim": terms.ssim, "loss_scaling": reg,
            "n_gaussians": len(model), "psnr_val": psnr_val,
        })
        if callback is not None:
            callback(it, model, state)

    # leave the model with every pending delta folded in
    apply_walking(model, state, config.walking)
    check_lockstep(model, state)
    result.model = model
    result.state = state
    result.final_psnr = evaluate(model, val_frames, val_fields)
    result.seconds = time.perf_counter() - start
    if metrics_path is not None:
        write_metrics(metrics_path, result.metrics)
    return result


def frames_from_dataset(loaded) -> List[TrainFrame]:
    return [TrainFrame(f.image, f.mask, f.camera, f.posed, f.frame_id) for f in loaded]
