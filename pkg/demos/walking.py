"""Walk a point across an icosphere and compare with clamping to the home face.

    python demos/walking.py
"""
import numpy as np

from meshsplat import geometry
from meshsplat.embedding import project_to_triangle, walk_on_triangles

mesh = geometry.icosphere(2)
k, u, v = 0, 0.3, 0.3
step = np.array([0.25, 0.05])

print("step  walk: face  position                 clip: position")
ck, cu, cv = k, u, v
for i in range(12):
    r = walk_on_triangles(mesh, k, u, v, *step)
    k, u, v = r.k, r.u, r.v
    step = np.array([r.du, r.dv])  # keep heading the same way in the new chart
    pu, pv, _ = project_to_triangle(np.array([cu + 0.25]), np.array([cv + 0.05]))
    cu, cv = float(pu[0]), float(pv[0])
    p = geometry.phong_point(mesh, k, u, v)
    q = geometry.phong_point(mesh, ck, cu, cv)
    print(f"{i:4d}  {k:10d}  {np.array2string(p, precision=3):24s} {np.array2string(q, precision=3)}")
print("the walked point keeps travelling; the clipped one is stuck on the boundary of face", ck)
