"""Tiled CPU splatting rasterizer with an analytic backward pass.

Gaussians are projected to screen-space ellipses, sorted front to back by
camera-space depth and alpha-blended per pixel. A Gaussian only touches
pixels inside its 3-sigma ellipse. Tiles are an acceleration structure: the
untiled :func:`render_reference` produces the same image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numba as nb
import numpy as np

from . import quaternion as quat
from .errors import NonFiniteGradient
from .gaussians import LOWPASS_SIGMA, Camera, covariance3d, projection_jacobian, sigmoid

TILE = 16
ALPHA_MAX = 0.99
T_MIN = 1e-4
CUTOFF = 9.0  # squared Mahalanobis radius (3 sigma)
MAX_CONDITION = 1e12

# The Gaussian falloff is shifted and tilted so that it reaches zero with zero
# slope on the 3-sigma ellipse, then rescaled to 1 at the centre.
_TAIL = float(np.exp(-0.5 * CUTOFF))
_TAIL_SLOPE = 0.5 * _TAIL
_TAIL_NORM = 1.0 / (1.0 - _TAIL - _TAIL_SLOPE * CUTOFF)


@nb.njit(cache=True, inline="always")
def falloff(m):
    """Truncated Gaussian weight for squared Mahalanobis distance ``m <= CUTOFF``."""
    return (np.exp(-0.5 * m) - _TAIL + _TAIL_SLOPE * (m - CUTOFF)) * _TAIL_NORM


@nb.njit(cache=True, inline="always")
def falloff_grad(m):
    return (-0.5 * np.exp(-0.5 * m) + _TAIL_SLOPE) * _TAIL_NORM


@dataclass
class Projected:
    """Per-Gaussian screen-space quantities (rows follow the input order)."""

    visible: np.ndarray
    depth: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # (N, 3): a, b, c of [[a, b], [b, c]]
    radius: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    order: np.ndarray  # visible indices sorted front to back
    # backward cache
    t: np.ndarray = None
    M: np.ndarray = None
    cov3d: np.ndarray = None
    R: np.ndarray = None


@dataclass
class RenderOutput:
    image: np.ndarray
    final_transmittance: np.ndarray
    contrib_count: np.ndarray
    projected: Optional[Projected] = None
    # tile bookkeeping reused by the backward pass
    point_list: Optional[np.ndarray] = field(default=None, repr=False)
    tile_ranges: Optional[np.ndarray] = field(default=None, repr=False)
    last_entry: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class PosedGradients:
    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    mean2d: np.ndarray  # screen-space positional gradient, pixels


def project(means, quats, scales, opacity_logits, colors, camera: Camera) -> Projected:
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    n = len(means)
    Wr = camera.rotation
    t = means @ Wr.T + camera.translation
    tz = t[:, 2]
    in_depth = (tz > camera.near) & (tz < camera.far)
    safe = np.where(in_depth, tz, 1.0)
    ts = t.copy()
    ts[:, 2] = safe

    R = quat.to_matrix(quats)
    cov3d = covariance3d(quats, scales)
    M = projection_jacobian(ts, camera.fx, camera.fy) @ Wr
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += LOWPASS_SIGMA**2
    cov2d[:, 1, 1] += LOWPASS_SIGMA**2

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid * mid - det, 0.0))
    lam_max = mid + disc
    lam_min = mid - disc
    well_posed = (det > 0) & (lam_min > 0) & (lam_max <= MAX_CONDITION * np.where(lam_min > 0, lam_min, np.inf))
    inv_det = np.where(well_posed, 1.0 / np.where(det > 0, det, 1.0), 0.0)
    conic = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)

    mean2d = np.stack([camera.fx * ts[:, 0] / safe + camera.cx, camera.fy * ts[:, 1] / safe + camera.cy], axis=1)
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
    on_screen = (
        (mean2d[:, 0] + radius > 0) & (mean2d[:, 0] - radius < camera.width)
        & (mean2d[:, 1] + radius > 0) & (mean2d[:, 1] - radius < camera.height)
    )
    visible = in_depth & well_posed & on_screen & np.all(np.isfinite(mean2d), axis=1)
    idx = np.flatnonzero(visible)
    order = idx[np.lexsort((idx, tz[idx]))]
    return Projected(
        visible, tz, mean2d, cov2d, conic, np.where(visible, radius, 0.0),
        sigmoid(opacity_logits).reshape(n), np.asarray(colors, dtype=np.float64).reshape(n, 3), order,
        t=ts, M=M, cov3d=cov3d, R=R,
    )


@nb.njit(cache=True)
def _bin(order, mean2d, radius, width, height, tile):
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n = len(order)
    lo = np.empty((n, 2), dtype=np.int64)
    hi = np.empty((n, 2), dtype=np.int64)
    total = 0
    for r in range(n):
        g = order[r]
        x0 = int(np.floor(mean2d[g, 0] - radius[g] - 0.5))
        x1 = int(np.floor(mean2d[g, 0] + radius[g] - 0.5)) + 1
        y0 = int(np.floor(mean2d[g, 1] - radius[g] - 0.5))
        y1 = int(np.floor(mean2d[g, 1] + radius[g] - 0.5)) + 1
        x0 = min(max(x0, 0), width - 1) // tile
        x1 = min(max(x1, 0), width - 1) // tile
        y0 = min(max(y0, 0), height - 1) // tile
        y1 = min(max(y1, 0), height - 1) // tile
        lo[r, 0] = x0
        lo[r, 1] = y0
        hi[r, 0] = x1
        hi[r, 1] = y1
        total += (x1 - x0 + 1) * (y1 - y0 + 1)
    keys = np.empty(total, dtype=np.int64)
    vals = np.empty(total, dtype=np.int64)
    e = 0
    for r in range(n):
        for ty in range(lo[r, 1], hi[r, 1] + 1):
            for tx in range(lo[r, 0], hi[r, 0] + 1):
                keys[e] = ty * tiles_x + tx
                vals[e] = order[r]
                e += 1
    perm = np.argsort(keys, kind="mergesort")
    keys = keys[perm]
    vals = vals[perm]
    n_tiles = tiles_x * tiles_y
    ranges = np.zeros((n_tiles, 2), dtype=np.int64)
    start = 0
    for t in range(n_tiles):
        while start < total and keys[start] < t:
            start += 1
        end = start
        while end < total and keys[end] == t:
            end += 1
        ranges[t, 0] = start
        ranges[t, 1] = end
        start = end
    return vals, ranges


@nb.njit(parallel=True, cache=True)
def _forward_tiles(point_list, ranges, mean2d, conic, opacity, colors, bg, width, height, tile):
    tiles_x = (width + tile - 1) // tile
    image = np.empty((height, width, 3))
    trans = np.empty((height, width))
    count = np.zeros((height, width), dtype=np.int64)
    last = np.zeros((height, width), dtype=np.int64)
    for t in nb.prange(len(ranges)):
        ty = t // tiles_x
        tx = t % tiles_x
        start = ranges[t, 0]
        end = ranges[t, 1]
        for i in range(ty * tile, min((ty + 1) * tile, height)):
            py = i + 0.5
            for j in range(tx * tile, min((tx + 1) * tile, width)):
                px = j + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                n = 0
                stop = start
                for e in range(start, end):
                    g = point_list[e]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    m = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if m > CUTOFF:
                        continue
                    alpha = opacity[g] * falloff(m)
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    w = T * alpha
                    c0 += w * colors[g, 0]
                    c1 += w * colors[g, 1]
                    c2 += w * colors[g, 2]
                    T *= 1.0 - alpha
                    n += 1
                    stop = e + 1
                    if T < T_MIN:
                        break
                image[i, j, 0] = c0 + T * bg[0]
                image[i, j, 1] = c1 + T * bg[1]
                image[i, j, 2] = c2 + T * bg[2]
                trans[i, j] = T
                count[i, j] = n
                last[i, j] = stop
    return image, trans, count, last


@nb.njit(parallel=True, cache=True)
def _backward_tiles(point_list, ranges, last, trans, grad_image, mean2d, conic, opacity, colors, bg, width, height, tile):
    """Per-entry gradients: [dmx, dmy, da, db, dc, d_opacity, dr, dg, db]."""
    tiles_x = (width + tile - 1) // tile
    out = np.zeros((len(point_list), 9))
    for t in nb.prange(len(ranges)):
        ty = t // tiles_x
        tx = t % tiles_x
        start = ranges[t, 0]
        for i in range(ty * tile, min((ty + 1) * tile, height)):
            py = i + 0.5
            for j in range(tx * tile, min((tx + 1) * tile, width)):
                px = j + 0.5
                g0 = grad_image[i, j, 0]
                g1 = grad_image[i, j, 1]
                g2 = grad_image[i, j, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                T = trans[i, j]
                b0 = bg[0]
                b1 = bg[1]
                b2 = bg[2]
                for e in range(last[i, j] - 1, start - 1, -1):
                    g = point_list[e]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    ca = conic[g, 0]
                    cb = conic[g, 1]
                    cc = conic[g, 2]
                    m = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if m > CUTOFF:
                        continue
                    G = falloff(m)
                    alpha = opacity[g] * G
                    clamped = alpha > ALPHA_MAX
                    if clamped:
                        alpha = ALPHA_MAX
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    out[e, 6] += w * g0
                    out[e, 7] += w * g1
                    out[e, 8] += w * g2
                    dalpha = T * ((colors[g, 0] - b0) * g0 + (colors[g, 1] - b1) * g1 + (colors[g, 2] - b2) * g2)
                    b0 = alpha * colors[g, 0] + (1.0 - alpha) * b0
                    b1 = alpha * colors[g, 1] + (1.0 - alpha) * b1
                    b2 = alpha * colors[g, 2] + (1.0 - alpha) * b2
                    if clamped:
                        continue
                    out[e, 5] += G * dalpha
                    dm = opacity[g] * falloff_grad(m) * dalpha
                    out[e, 0] += -dm * 2.0 * (ca * dx + cb * dy)
                    out[e, 1] += -dm * 2.0 * (cb * dx + cc * dy)
                    out[e, 2] += dm * dx * dx
                    out[e, 3] += dm * 2.0 * dx * dy
                    out[e, 4] += dm * dy * dy
    return out


def _as_arrays(gaussians):
    """Accept a PosedBatch-like object, a dict or a tuple of arrays."""
    if isinstance(gaussians, dict):
        keys = ("means", "quats", "scales", "opacity_logits", "colors")
        return tuple(np.asarray(gaussians[k], dtype=np.float64) for k in keys)
    return tuple(np.asarray(x, dtype=np.float64) for x in gaussians)


def render(gaussians, camera: Camera, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Render ``(means, quats, scales, opacity_logits, colors)`` into ``camera``."""
    means, quats, scales, opac, colors = _as_arrays(gaussians)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    proj = project(means, quats, scales, opac, colors, camera)
    point_list, ranges = _bin(proj.order, proj.mean2d, proj.radius, camera.width, camera.height, TILE)
    image, trans, count, last = _forward_tiles(
        point_list, ranges, proj.mean2d, proj.conic, proj.opacity, proj.colors, bg, camera.width, camera.height, TILE
    )
    return RenderOutput(image, trans, count, proj, point_list, ranges, last)


def render_backward(gaussians, camera: Camera, background, grad_image, forward: Optional[RenderOutput] = None) -> PosedGradients:
    """Gradients of ``sum(grad_image * image)`` w.r.t. the posed Gaussian parameters."""
    means, quats, scales, opac, colors = _as_arrays(gaussians)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if forward is None:
        forward = render((means, quats, scales, opac, colors), camera, bg)
    proj = forward.projected
    n = len(means)
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    entries = _backward_tiles(
        forward.point_list, forward.tile_ranges, forward.last_entry, forward.final_transmittance, grad_image,
        proj.mean2d, proj.conic, proj.opacity, proj.colors, bg, camera.width, camera.height, TILE,
    )
    # fixed-order reduction of per-entry partial sums
    per_g = np.zeros((n, 9))
    if len(forward.point_list):
        for col in range(9):
            per_g[:, col] = np.bincount(forward.point_list, weights=entries[:, col], minlength=n)
    return _project_backward(proj, camera, means, quats, scales, per_g)


def _project_backward(proj: Projected, camera: Camera, means, quats, scales, per_g) -> PosedGradients:
    n = len(means)
    vis = proj.visible
    g_mean2d = per_g[:, 0:2]
    g_conic = per_g[:, 2:5]
    g_op = per_g[:, 5]
    g_col = per_g[:, 6:9]

    # conic = inverse(cov2d); full-matrix gradient of the conic
    K = np.empty((n, 2, 2))
    K[:, 0, 0] = proj.conic[:, 0]
    K[:, 0, 1] = K[:, 1, 0] = proj.conic[:, 1]
    K[:, 1, 1] = proj.conic[:, 2]
    GK = np.empty((n, 2, 2))
    GK[:, 0, 0] = g_conic[:, 0]
    GK[:, 0, 1] = GK[:, 1, 0] = 0.5 * g_conic[:, 1]
    GK[:, 1, 1] = g_conic[:, 2]
    G2 = -K @ GK @ K

    M = proj.M
    cov = proj.cov3d
    g_cov3d = np.swapaxes(M, 1, 2) @ G2 @ M
    g_M = 2.0 * G2 @ M @ cov
    Wr = camera.rotation
    g_J = g_M @ Wr.T

    t = proj.t
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = camera.fx, camera.fy
    g_t = np.zeros((n, 3))
    g_t[:, 0] = g_J[:, 0, 2] * (-fx / tz**2) + g_mean2d[:, 0] * fx / tz
    g_t[:, 1] = g_J[:, 1, 2] * (-fy / tz**2) + g_mean2d[:, 1] * fy / tz
    g_t[:, 2] = (
        g_J[:, 0, 0] * (-fx / tz**2)
        + g_J[:, 0, 2] * (2.0 * fx * tx / tz**3)
        + g_J[:, 1, 1] * (-fy / tz**2)
        + g_J[:, 1, 2] * (2.0 * fy * ty / tz**3)
        - g_mean2d[:, 0] * fx * tx / tz**2
        - g_mean2d[:, 1] * fy * ty / tz**2
    )
    g_means = g_t @ Wr

    R = proj.R
    s = np.asarray(scales, dtype=np.float64)
    s2 = s * s
    g_R = 2.0 * g_cov3d @ R * s2[:, None, :]
    g_scales = 2.0 * s * np.einsum("nij,nik,nkj->nj", R, g_cov3d, R)
    g_quats = quat.to_matrix_backward(quats, g_R)
    g_opac = g_op * proj.opacity * (1.0 - proj.opacity)

    out = PosedGradients(g_means, g_quats, g_scales, g_opac, g_col, g_mean2d)
    for name in ("means", "quats", "scales", "opacity_logits", "colors", "mean2d"):
        arr = getattr(out, name)
        arr[~vis] = 0.0
        bad = ~np.isfinite(arr.reshape(n, -1)).all(axis=1) if n else np.zeros(0, bool)
        if bad.any():
            raise NonFiniteGradient(int(np.flatnonzero(bad)[0]), name)
    return out


def _falloff_np(m):
    return (np.exp(-0.5 * m) - _TAIL + _TAIL_SLOPE * (m - CUTOFF)) * _TAIL_NORM


def render_reference(gaussians, camera: Camera, background=(0.0, 0.0, 0.0), return_weights: bool = False):
    """Untiled renderer: every pixel visits every projected Gaussian in depth order."""
    means, quats, scales, opac, colors = _as_arrays(gaussians)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    proj = project(means, quats, scales, opac, colors, camera)
    H, W = camera.height, camera.width
    px, py = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    T = np.ones((H, W))
    C = np.zeros((H, W, 3))
    wsum = np.zeros((H, W))
    done = np.zeros((H, W), dtype=bool)
    for g in proj.order:
        dx = px - proj.mean2d[g, 0]
        dy = py - proj.mean2d[g, 1]
        a, b, c = proj.conic[g]
        m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        hit = ~done & (m <= CUTOFF)
        alpha = np.minimum(proj.opacity[g] * _falloff_np(m), ALPHA_MAX)
        w = np.where(hit, T * alpha, 0.0)
        C += w[..., None] * proj.colors[g]
        wsum += w
        T = np.where(hit, T * (1.0 - alpha), T)
        done |= hit & (T < T_MIN)
    image = C + T[..., None] * bg
    if return_weights:
        return image, T, wsum
    return image, T
