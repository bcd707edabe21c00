"""Generate a small synthetic scene and save preview images.

    python demos/synthetic_scene.py out_dir
"""
import sys
from pathlib import Path

from meshsplat import io

out = Path(sys.argv[1] if len(sys.argv) > 1 else "synthetic_demo")
spec = io.SyntheticSpec(level=2, n_gaussians=300, n_frames=6, width=96, height=96)
manifest = io.generate_synthetic(seed=0, spec=spec, out_dir=out)
canonical, frames = io.load_dataset(manifest)
print(f"{len(frames)} frames, mesh with {canonical.n_faces} faces")
print(f"previews in {out / 'previews'}")
