"""
From probabilities to a surface mesh
====================================

Thresholding, keeping the largest connected component, then marching cubes.
"""
import numpy as np

from aaaseg import postrecon, volio

image, mask = volio.make_phantom(volio.PhantomSpec(n_slices=20, seed=0))

# a fake probability map: the true mask plus a stray blob
fg = mask.data.astype(np.float32) * 0.9
fg[2:5, 5:9, 5:9] = 0.8
probs = np.stack([1 - fg, fg], axis=1)
raw = postrecon.argmax_mask(probs, mask.spacing)
clean, empty = postrecon.largest_component(raw, min_size=10)
print("voxels: raw", raw.data.sum(), "kept", clean.data.sum(), "empty:", empty)

mesh = postrecon.marching_cubes(clean)
print("mesh:", len(mesh.vertices), "vertices,", len(mesh.triangles), "triangles")
vox_volume = clean.data.sum() * np.prod(clean.spacing)
print(f"enclosed volume {mesh.signed_volume():.1f} mm^3 vs voxel volume {vox_volume:.1f} mm^3")

edges = {}
for t in mesh.triangles.tolist():
    for i in range(3):
        e = tuple(sorted((t[i], t[(i + 1) % 3])))
        edges[e] = edges.get(e, 0) + 1
print("every edge shared by two triangles:", set(edges.values()) == {2})
print("Euler characteristic:", len(mesh.vertices) - len(edges) + len(mesh.triangles))

postrecon.write_stl(mesh, "/tmp/aorta.stl")
postrecon.write_obj(mesh, "/tmp/aorta.obj")
print("wrote /tmp/aorta.stl and /tmp/aorta.obj")
