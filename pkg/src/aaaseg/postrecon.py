"""From network probabilities to a clean mask and a triangle surface."""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _mc_tables as mct
from .errors import FormatError, ShapeError, ValidationError
from .volio import Volume

_TRIANGLES = np.array(mct.TRIANGLES, dtype=np.int64)
_CORNERS = np.array(mct.CORNERS, dtype=np.int64)
_EDGES = np.array(mct.EDGES, dtype=np.int64)
# per edge: lower corner offset and axis index
_EDGE_START = np.minimum(_CORNERS[_EDGES[:, 0]], _CORNERS[_EDGES[:, 1]])
_EDGE_AXIS = np.argmax(np.abs(_CORNERS[_EDGES[:, 1]] - _CORNERS[_EDGES[:, 0]]), axis=1)


def argmax_mask(probs, spacing=(1.0, 1.0, 1.0)):
    """Foreground where channel-1 probability is strictly above 0.5.

    ``probs`` is a per-slice stack ``(z, 2, h, w)``.
    """
    probs = np.asarray(probs)
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ShapeError(f"expected a (z, 2, h, w) probability stack, got shape {probs.shape}")
    return Volume((probs[:, 1] > 0.5).astype(np.uint8), spacing)


def largest_component(v, min_size=64):
    """Keep the largest 26-connected foreground component.

    Components below ``min_size`` voxels are dropped first. Equal sizes go to
    the component whose first voxel comes earliest in scan order. Returns the
    cleaned volume and a flag that is True when nothing survived.
    """
    data = np.asarray(v.data)
    if not np.all((data == 0) | (data == 1)):
        raise ValidationError("largest_component needs a binary volume")
    labels, n = ndimage.label(data, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return Volume(np.zeros_like(data, dtype=np.uint8), v.spacing), True
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    sizes[sizes < min_size] = 0
    if sizes.max() == 0:
        return Volume(np.zeros_like(data, dtype=np.uint8), v.spacing), True
    # ndimage.label numbers components in order of their first voxel
    keep = int(np.argmax(sizes))
    return Volume((labels == keep).astype(np.uint8), v.spacing), False


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) x, y, z in mm
    triangles: np.ndarray  # (F, 3) vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValidationError("triangle index out of range")

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def corners(self):
        """(F, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.triangles]

    def normals(self):
        c = self.corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)

    def signed_volume(self):
        c = self.corners()
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)

    def transformed(self, rotation, translation):
        return Mesh(self.vertices @ np.asarray(rotation).T + np.asarray(translation), self.triangles.copy())


def marching_cubes(v, iso=0.5):
    """Triangle surface of ``v`` at ``iso``, in mm.

    The volume is padded with a zero border so the surface closes where the
    mask touches the volume edge. Vertices are interpolated linearly along
    cube edges, which for 0/1 masks puts them at edge midpoints. Triangles
    are wound so normals point out of the foreground.
    """
    data = np.asarray(v.data, dtype=np.float64)
    f = np.pad(data, 1).transpose(2, 1, 0)  # index as [x, y, z]
    nx, ny, nz = f.shape
    below = f < iso
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for bit, (cx, cy, cz) in enumerate(mct.CORNERS):
        case |= below[cx:nx - 1 + cx, cy:ny - 1 + cy, cz:nz - 1 + cz].astype(np.int64) << bit
    active = np.nonzero((case != 0) & (case != 255))
    if len(active[0]) == 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cubes = np.stack(active, axis=1)  # (m, 3), scan order
    rows = _TRIANGLES[case[active]]
    tri_cube, tri_edges = [], []
    for slot in range(5):
        valid = rows[:, 3 * slot] >= 0
        idx = np.nonzero(valid)[0]
        tri_cube.append(idx * 5 + slot)
        tri_edges.append(rows[idx, 3 * slot:3 * slot + 3])
    order_key = np.concatenate(tri_cube)
    edges = np.concatenate(tri_edges)
    cube_of = order_key // 5
    order = np.argsort(order_key, kind="stable")
    edges, cube_of = edges[order], cube_of[order]

    starts = cubes[cube_of][:, None, :] + _EDGE_START[edges]  # (F, 3, 3)
    axes = _EDGE_AXIS[edges]  # (F, 3)
    keys = ((axes * nx + starts[..., 0]) * ny + starts[..., 1]) * nz + starts[..., 2]
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    tris = inverse.reshape(-1, 3)

    u_axis = uniq // (nx * ny * nz)
    rem = uniq % (nx * ny * nz)
    p0 = np.stack([rem // (ny * nz), (rem // nz) % ny, rem % nz], axis=1)
    step = np.eye(3, dtype=np.int64)[u_axis]
    p1 = p0 + step
    f0 = f[p0[:, 0], p0[:, 1], p0[:, 2]]
    f1 = f[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = (iso - f0) / (f1 - f0)
    pos = p0 + t[:, None] * step - 1.0
    verts = pos * np.asarray(v.spacing)
    return Mesh(verts, np.ascontiguousarray(tris))


# -- mesh files --------------------------------------------------------------

def write_stl(mesh, path, name="aaaseg"):
    """ASCII STL with one recomputed unit normal per facet."""
    lines = [f"solid {name}"]
    for n, tri in zip(mesh.normals(), mesh.corners()):
        lines.append(f"  facet normal {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
        lines.append("    outer loop")
        for p in tri:
            lines.append(f"      vertex {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append(f"endsolid {name}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_obj(mesh, path):
    out = [f"v {p[0]!r} {p[1]!r} {p[2]!r}" for p in mesh.vertices.tolist()]
    out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(out) + "\n")


def read_obj(path):
    """Vertices and faces from an OBJ file; polygons are fan-triangulated."""
    verts, tris = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: cannot parse {line!r}") from exc
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))
