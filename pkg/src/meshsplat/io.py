"""Datasets, synthetic scenes, model import/export and image files."""

from __future__ import annotations

import json
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from . import embedding, geometry
from . import quaternion as quat
from .deformation import build_deformation_field
from .errors import BadManifest, ChecksumMismatch, DataError, MissingFile, TopologyMismatch
from .gaussians import Camera, logit, read_splat_ply, write_splat_ply
from .geometry import TriangleMesh
from .model import SplatModel
from .rasterizer import render_reference

RAW_MAGIC = b"RAWF"


# ---------------------------------------------------------------------------
# images


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def write_png(path, image) -> None:
    """8-bit sRGB PNG of a linear image in [0, 1] (H, W) or (H, W, 3)."""
    data = np.round(linear_to_srgb(image) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def read_png(path) -> np.ndarray:
    data = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return srgb_to_linear(data)


def write_raw(path, image) -> None:
    """Float32 dump with a 16-byte header: magic, height, width, channels (uint32 LE)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_raw(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != RAW_MAGIC:
        raise DataError(f"{path}: bad raw image magic")
    h, w, c = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw[16:], dtype="<f4", count=h * w * c).astype(np.float64).reshape(h, w, c)
    return data[..., 0] if c == 1 else data


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"missing image {path}")
    if path.suffix.lower() == ".png":
        return read_png(path)
    return read_raw(path)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetFrame:
    frame_id: int
    image_path: Path
    camera: Camera
    mesh_path: Path
    mask_path: Optional[Path] = None


@dataclass
class LoadedFrame:
    """A frame with its pixels and posed geometry in memory."""

    frame_id: int
    image: np.ndarray
    mask: Optional[np.ndarray]
    camera: Camera
    posed: TriangleMesh


def _resolve(base: Path, value, what, lineno=None) -> Path:
    if not isinstance(value, str):
        raise BadManifest(f"{what}: expected a path string, got {value!r}")
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_dataset(manifest_path):
    """Parse and validate a manifest; returns ``(canonical_mesh, frames)``."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFile(f"missing manifest {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise BadManifest(f"{manifest_path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    base = manifest_path.parent
    if not isinstance(doc, dict) or "canonical_mesh" not in doc:
        raise BadManifest(f"{manifest_path}: missing field 'canonical_mesh'")
    model = doc.get("camera_model", "pinhole")
    if model != "pinhole":
        raise BadManifest(f"{manifest_path}: unsupported camera_model {model!r}")
    frames_doc = doc.get("frames")
    if not isinstance(frames_doc, list) or not frames_doc:
        raise BadManifest(f"{manifest_path}: 'frames' must be a non-empty list")
    cano_path = _resolve(base, doc["canonical_mesh"], "canonical_mesh")
    if not cano_path.exists():
        raise MissingFile(f"missing canonical mesh {cano_path}")
    canonical = geometry.read_obj(cano_path)

    frames = []
    for i, fd in enumerate(frames_doc):
        where = f"{manifest_path}: frames[{i}]"
        if not isinstance(fd, dict):
            raise BadManifest(f"{where}: expected an object")
        for key in ("image", "mesh", "camera"):
            if key not in fd:
                raise BadManifest(f"{where}: missing field {key!r}")
        image = _resolve(base, fd["image"], f"{where}.image")
        mesh = _resolve(base, fd["mesh"], f"{where}.mesh")
        mask = _resolve(base, fd["mask"], f"{where}.mask") if fd.get("mask") else None
        for p in (image, mesh, mask):
            if p is not None and not p.exists():
                raise MissingFile(f"{where}: missing file {p}")
        cam = fd["camera"]
        if isinstance(cam, str):
            cam_path = _resolve(base, cam, f"{where}.camera")
            if not cam_path.exists():
                raise MissingFile(f"{where}: missing file {cam_path}")
            cam = json.loads(cam_path.read_text())
        try:
            camera = Camera.from_dict(cam)
        except (KeyError, TypeError, ValueError) as exc:
            raise BadManifest(f"{where}.camera: {exc}") from exc
        _, faces = geometry.read_obj_arrays(mesh)
        if not np.array_equal(faces, canonical.faces):
            raise TopologyMismatch(f"{where}: mesh {mesh.name} does not share the canonical face buffer")
        frames.append(DatasetFrame(int(fd.get("frame_id", i)), image, camera, mesh, mask))
    return canonical, frames


def load_frames(canonical: TriangleMesh, frames: List[DatasetFrame]) -> List[LoadedFrame]:
    out = []
    for f in frames:
        verts, _ = geometry.read_obj_arrays(f.mesh_path)
        image = read_image(f.image_path)
        mask = read_image(f.mask_path) if f.mask_path is not None else None
        if mask is not None and mask.ndim == 3:
            mask = mask[..., 0]
        out.append(LoadedFrame(f.frame_id, image, mask, f.camera, canonical.with_vertices(verts)))
    return out


def load_mesh_sequence(directory, canonical: Optional[TriangleMesh] = None):
    """Read ``manifest.json`` (``{"frames": [obj names]}``) from a directory of OBJ files."""
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if not manifest.exists():
        raise MissingFile(f"missing {manifest}")
    try:
        names = json.loads(manifest.read_text())["frames"]
    except (KeyError, json.JSONDecodeError) as exc:
        raise BadManifest(f"{manifest}: {exc}") from exc
    meshes = []
    for name in names:
        path = directory / name
        if not path.exists():
            raise MissingFile(f"missing mesh {path}")
        verts, faces = geometry.read_obj_arrays(path)
        if canonical is None:
            canonical = geometry.build_mesh(verts, faces)
        elif not np.array_equal(faces, canonical.faces):
            raise TopologyMismatch(f"{path}: face buffer differs from the canonical mesh")
        meshes.append(canonical.with_vertices(verts))
    return meshes


def write_mesh_sequence(directory, meshes, prefix="frame") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, m in enumerate(meshes):
        name = f"{prefix}_{i:04d}.obj"
        geometry.write_obj(directory / name, m.vertices, m.faces)
        names.append(name)
    (directory / "manifest.json").write_text(json.dumps({"frames": names}, indent=1))


# ---------------------------------------------------------------------------
# model files


def export_model(model: SplatModel, out_dir) -> Path:
    """Write ``gaussians.ply``, ``embedding.json`` and ``canonical.obj`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    k, u, v, d = model.embeddings_folded()
    folded = SplatModel(model.mesh, k, np.stack([u, v], 1).reshape(-1, 2), np.zeros((len(k), 2)), d,
                        model.rotation, model.log_scale, model.opacity_logit, model.color)
    write_splat_ply(out_dir / "gaussians.ply", folded.canonical_positions(), model.opacity_logit,
                    model.log_scale, quat.normalize(model.rotation) if len(k) else model.rotation, model.color)
    embedding.save_embeddings(out_dir / "embedding.json", k, u, v, d, model.mesh.checksum)
    geometry.write_obj(out_dir / "canonical.obj", model.mesh.vertices, model.mesh.faces)
    return out_dir


def import_model(model_dir) -> SplatModel:
    model_dir = Path(model_dir)
    for name in ("gaussians.ply", "embedding.json", "canonical.obj"):
        if not (model_dir / name).exists():
            raise MissingFile(f"missing {model_dir / name}")
    mesh = geometry.read_obj(model_dir / "canonical.obj")
    k, u, v, d = embedding.load_embeddings(model_dir / "embedding.json", mesh)
    g = read_splat_ply(model_dir / "gaussians.ply")
    if len(g["positions"]) != len(k):
        raise DataError(f"{model_dir}: {len(g['positions'])} gaussians but {len(k)} embeddings")
    return SplatModel(mesh, k, np.stack([u, v], 1).reshape(-1, 2), np.zeros((len(k), 2)), d,
                      g["rotations"], g["log_scales"], g["opacity_logits"], g["colors"])


def export_posed_ply(model: SplatModel, path, posed: Optional[TriangleMesh] = None) -> None:
    """Splat PLY of the model, canonical or deformed onto ``posed``."""
    if posed is None:
        write_splat_ply(path, model.canonical_positions(), model.opacity_logit, model.log_scale,
                        quat.normalize(model.rotation) if len(model) else model.rotation, model.color)
        return
    field = build_deformation_field(model.mesh, posed)
    batch = model.pose(posed, field)
    write_splat_ply(path, batch.means, model.opacity_logit, np.log(batch.scales), batch.quats, model.color)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticSpec:
    mesh: str = "icosphere"
    level: int = 2
    n_gaussians: int = 500
    n_frames: int = 25
    width: int = 128
    height: int = 128
    deformation: str = "twist"  # or "identity"
    amplitude: float = 0.35
    camera_distance: float = 3.2
    fov_deg: float = 45.0
    gt_scale: float = 0.09
    gt_opacity: float = 0.9


def base_mesh(spec: SyntheticSpec) -> TriangleMesh:
    if spec.mesh == "icosphere":
        return geometry.icosphere(spec.level)
    if spec.mesh == "plane":
        n = 2**spec.level * 2
        m = geometry.grid_plane(n, n, 2.0 / n)
        return m.with_vertices(m.vertices - np.array([1.0, 1.0, 0.0]))
    if spec.mesh == "cylinder":
        return geometry.cylinder(8 * (spec.level + 1), 2 * (spec.level + 1), 0.6, 1.6)
    raise ValueError(f"unknown mesh type {spec.mesh!r}")


def deform_vertices(vertices, phase: float, amplitude: float, kind: str = "twist") -> np.ndarray:
    """Smooth parametric bend + twist about the z axis; ``phase`` in radians."""
    if kind == "identity":
        return np.array(vertices, dtype=np.float64)
    x, y, z = np.asarray(vertices, dtype=np.float64).T
    theta = amplitude * np.sin(phase) * z
    c, s = np.cos(theta), np.sin(theta)
    x, y = c * x - s * y, s * x + c * y
    x = x + 0.5 * amplitude * np.cos(phase) * z * z
    z = z * (1.0 + 0.25 * amplitude * np.sin(2 * phase))
    return np.stack([x, y, z], axis=1)


def orbit_camera(i: int, n: int, spec: SyntheticSpec) -> Camera:
    golden = np.pi * (3.0 - np.sqrt(5.0))
    azim = golden * i * 3.0
    elev = 0.5 * np.sin(2.0 * np.pi * i / max(n, 1) * 1.7)
    eye = spec.camera_distance * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)])
    return Camera.look_at(eye, np.zeros(3), up=(0.0, 0.0, 1.0), fov_deg=spec.fov_deg, width=spec.width, height=spec.height)


def ground_truth_model(mesh: TriangleMesh, spec: SyntheticSpec, rng) -> SplatModel:
    n = spec.n_gaussians
    probs = mesh.face_areas / mesh.face_areas.sum()
    k = rng.choice(mesh.n_faces, size=n, p=probs)
    r = rng.uniform(size=(n, 2))
    flip = r.sum(axis=1) > 1
    r[flip] = 1.0 - r[flip]
    d = rng.uniform(-0.02, 0.02, n)
    rot = quat.normalize(rng.normal(size=(n, 4)))
    log_scale = np.log(spec.gt_scale) + rng.uniform(-0.4, 0.2, (n, 3))
    opac = logit(np.clip(spec.gt_opacity + rng.uniform(-0.1, 0.05, n), 0.05, 0.98))
    # smooth-ish colours: low-frequency field plus per-splat variation
    m = SplatModel(mesh, k, r, np.zeros((n, 2)), d, rot, log_scale, opac, np.zeros((n, 3)))
    p = m.canonical_positions()
    base = 0.5 + 0.3 * np.sin(2.5 * p @ rng.normal(size=(3, 3)) + rng.uniform(0, 2 * np.pi, 3))
    m.color = np.clip(base + rng.uniform(-0.15, 0.15, (n, 3)), 0.02, 0.98)
    return m


def render_ground_truth(model: SplatModel, posed: TriangleMesh, camera: Camera):
    """Brute-force render on black; returns (straight colour image, alpha)."""
    field = build_deformation_field(model.mesh, posed)
    batch = model.pose(posed, field)
    image, T = render_reference((batch.means, batch.quats, batch.scales, model.opacity_logit, model.color), camera)
    alpha = 1.0 - T
    straight = np.where(alpha[..., None] > 1e-12, image / np.maximum(alpha, 1e-12)[..., None], 0.0)
    return np.clip(straight, 0.0, 1.0), alpha


def generate_synthetic(seed: int, spec: SyntheticSpec, out_dir) -> Path:
    """Write a self-consistent scene (manifest, images, masks, meshes, GT model) to ``out_dir``."""
    out_dir = Path(out_dir)
    for sub in ("images", "masks", "meshes", "previews"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    canonical = base_mesh(spec)
    geometry.write_obj(out_dir / "canonical.obj", canonical.vertices, canonical.faces)
    export_model(ground_truth_model(canonical, spec, rng), out_dir / "ground_truth")
    # render from the stored model so the files on disk reproduce the images exactly
    gt = import_model(out_dir / "ground_truth")

    frames = []
    phases = rng.uniform(0.0, 2.0 * np.pi, spec.n_frames)
    for i in range(spec.n_frames):
        posed = canonical.with_vertices(deform_vertices(canonical.vertices, phases[i], spec.amplitude, spec.deformation))
        cam = orbit_camera(i, spec.n_frames, spec)
        image, alpha = render_ground_truth(gt, posed, cam)
        name = f"{i:04d}"
        write_raw(out_dir / "images" / f"{name}.raw", image)
        write_raw(out_dir / "masks" / f"{name}.raw", alpha)
        write_png(out_dir / "previews" / f"{name}.png", image * alpha[..., None])
        geometry.write_obj(out_dir / "meshes" / f"{name}.obj", posed.vertices, posed.faces)
        frames.append({
            "frame_id": i,
            "image": f"images/{name}.raw",
            "mask": f"masks/{name}.raw",
            "mesh": f"meshes/{name}.obj",
            "camera": cam.to_dict(),
        })
    manifest = {"canonical_mesh": "canonical.obj", "camera_model": "pinhole", "frames": frames,
                "synthetic": {"seed": seed, **spec.__dict__}}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out_dir / "manifest.json"
