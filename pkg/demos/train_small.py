"""Fit a model to a small synthetic scene, then render it on a new deformation.

    python demos/train_small.py [iterations]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from meshsplat import io, trainer
from meshsplat.deformation import build_deformation_field
from meshsplat.model import render_model

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 800
work = Path(tempfile.mkdtemp(prefix="meshsplat_demo_"))
spec = io.SyntheticSpec(level=2, n_gaussians=200, n_frames=15, width=64, height=64)
canonical, frames = io.load_dataset(io.generate_synthetic(1, spec, work / "scene"))
data = trainer.frames_from_dataset(io.load_frames(canonical, frames))

cfg = trainer.TrainConfig(total_iters=iters, init_count=500, tau_grad=6e-4, densify_start=200, densify_stop=600,
                          opacity_reset_interval=10 * iters, val_every=5, val_interval=100)
result = trainer.train(canonical, data, cfg, callback=lambda it, m, s: it % 100 == 0 and print(f"iter {it}: {len(m)} gaussians"))
print(f"held-out PSNR {result.final_psnr:.2f} dB after {result.seconds:.0f} s")

# drive the trained model with a deformation it has never seen
posed = canonical.with_vertices(io.deform_vertices(canonical.vertices, 0.9, 0.6))
cam = io.orbit_camera(3, 15, spec)
out, _ = render_model(result.model, posed, build_deformation_field(canonical, posed), cam, np.ones(3))
io.write_png(work / "novel_pose.png", out.image)
io.export_model(result.model, work / "model")
print(f"wrote {work / 'novel_pose.png'} and {work / 'model'}")
