"""Segmentation overlap (DSC) and surface distance (ICP + cloud-to-mesh)."""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegeneracyError, ShapeError, ValidationError
from .volio import UNIFIED_SPACING_MM


def dsc_slice(pred, gt):
    """2|A & B| / (|A| + |B|); two empty masks score 1.0."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


@dataclass
class DscReport:
    per_slice: list
    slice_index: list
    mean: float
    std: float
    n_excluded: int
    policy: str = "both-empty slices excluded; population std"

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "per_slice": self.per_slice,
                "slice_index": self.slice_index, "n_excluded": self.n_excluded, "policy": self.policy}


def summarize(values):
    """(mean, population std) of a list, (nan, nan) if empty."""
    if len(values) == 0:
        return float("nan"), float("nan")
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def dsc_volume(pred, gt):
    """Per-z-slice DSC of two (z, y, x) masks, aggregated as mean +- std."""
    p = np.asarray(getattr(pred, "data", pred), dtype=bool)
    g = np.asarray(getattr(gt, "data", gt), dtype=bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    values, index = [], []
    excluded = 0
    for k in range(p.shape[0]):
        if not p[k].any() and not g[k].any():
            excluded += 1
            continue
        values.append(dsc_slice(p[k], g[k]))
        index.append(k)
    mean, std = summarize(values)
    return DscReport(values, index, mean, std, excluded)


# -- rigid transforms --------------------------------------------------------

@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other):
        """``self`` after ``other``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def angle(self):
        """Rotation angle in radians (atan2 form, accurate near zero)."""
        r = self.rotation
        s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        c = (np.trace(r) - 1.0) / 2.0
        return float(np.arctan2(s, c))

    def is_proper(self, tol=1e-9):
        r = self.rotation
        return bool(np.abs(r.T @ r - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol)

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation_mm": self.translation.tolist()}


def rotation_about(axis, angle):
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def fit_rigid(src, dst):
    """Least-squares rotation and translation taking ``src`` onto ``dst``."""
    ps, pd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - ps).T @ (dst - pd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, pd - r @ ps)


# -- point to triangle -------------------------------------------------------

def closest_point_on_triangle(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p; all arrays (k, 3).

    Voronoi regions are resolved with precedence A, B, AB, C, AC, BC, face;
    later ``np.where`` layers below override earlier ones.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_face = vb / denom
        w_face = vc / denom
        out = a + ab * v_face[:, None] + ac * w_face[:, None]

        # edge regions
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    e_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    out = np.where(e_bc[:, None], b + (c - b) * t_bc[:, None], out)
    e_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out = np.where(e_ac[:, None], a + ac * t_ac[:, None], out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, out)
    e_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out = np.where(e_ab[:, None], a + ab * t_ab[:, None], out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, out)
    return out


class MeshIndex:
    """Exact nearest-triangle queries against a fixed mesh.

    Triangle centroids go into a k-d tree. For a query point, the exact
    distance ``u`` to the triangle with the nearest centroid bounds the answer,
    and every triangle that could beat ``u`` has its centroid within
    ``u + r_max`` (``r_max`` = largest centroid-to-corner distance), so only
    those are tested.
    """

    def __init__(self, mesh):
        if mesh.is_empty:
            raise ValidationError("cannot index an empty mesh")
        self.corners = mesh.corners()
        self.centroids = self.corners.mean(axis=1)
        self.r_max = float(np.linalg.norm(self.corners - self.centroids[:, None], axis=2).max())
        self.tree = cKDTree(self.centroids)

    def closest(self, points):
        """(distances, closest points, triangle ids) for each query point."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        _, first = self.tree.query(points)
        c = self.corners
        q = closest_point_on_triangle(points, c[first, 0], c[first, 1], c[first, 2])
        upper = np.linalg.norm(points - q, axis=1)
        cand = self.tree.query_ball_point(points, upper + self.r_max + 1e-9)
        lengths = np.fromiter((len(x) for x in cand), dtype=np.intp, count=len(points))
        pid = np.repeat(np.arange(len(points)), lengths)
        tid = np.fromiter((t for x in cand for t in x), dtype=np.intp, count=int(lengths.sum()))
        qq = closest_point_on_triangle(points[pid], c[tid, 0], c[tid, 1], c[tid, 2])
        dd = np.linalg.norm(points[pid] - qq, axis=1)
        order = np.lexsort((tid, dd, pid))
        pid_s = pid[order]
        firsts = order[np.r_[True, pid_s[1:] != pid_s[:-1]]]
        return dd[firsts], qq[firsts], tid[firsts]


def _check_cloud(points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 3:
        raise DegeneracyError(f"need at least 3 points, got {len(points)}")
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if s[0] == 0 or s[1] <= 1e-9 * s[0]:
        raise DegeneracyError("point cloud is coincident or collinear")
    return points


def icp_align(points, mesh, max_iter=50, tol=1e-6, return_history=False, index=None):
    """Point-to-point ICP of a cloud onto a mesh surface.

    Each iteration pairs every moved point with its closest point on the
    mesh and refits the rigid transform in closed form (SVD of the
    cross-covariance). Stops when the RMS residual changes by less than
    ``tol`` or after ``max_iter`` refits, and returns the transform with the
    lowest RMS seen. With ``return_history`` the per-iteration RMS list is
    returned as well.
    """
    points = _check_cloud(points)
    index = index or MeshIndex(mesh)
    current = RigidTransform()
    best, best_rms = current, np.inf
    history = []
    for it in range(max_iter + 1):
        moved = current.apply(points)
        d, q, _ = index.closest(moved)
        rms = float(np.sqrt(np.mean(d * d)))
        history.append(rms)
        if rms < best_rms:
            best, best_rms = current, rms
        if it == max_iter or rms == 0.0 or (it > 0 and abs(history[-2] - rms) < tol):
            break
        current = fit_rigid(moved, q).compose(current)
    if return_history:
        return best, history
    return best


@dataclass
class C2mReport:
    distances_mm: np.ndarray
    pixel_mm: float
    mean_mm: float
    max_mm: float
    hist_edges: np.ndarray
    hist_counts: np.ndarray

    @property
    def distances_px(self):
        return self.distances_mm / self.pixel_mm

    def to_dict(self):
        return {
            "mean_mm": self.mean_mm, "max_mm": self.max_mm,
            "mean_px": self.mean_mm / self.pixel_mm, "max_px": self.max_mm / self.pixel_mm,
            "n_points": int(len(self.distances_mm)),
            "hist": {"edges_mm": self.hist_edges.tolist(), "counts": self.hist_counts.tolist()},
        }


def c2m_distances(points, mesh, transform=None, bins=20, pixel_mm=UNIFIED_SPACING_MM, index=None):
    """Unsigned distance from each transformed point to its nearest triangle."""
    if mesh.is_empty:
        raise ValidationError("cloud-to-mesh distance needs a non-empty mesh")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValidationError("cloud-to-mesh distance needs at least one point")
    if transform is not None:
        points = transform.apply(points)
    d, _, _ = (index or MeshIndex(mesh)).closest(points)
    hi = float(d.max())
    counts, edges = np.histogram(d, bins=bins, range=(0.0, hi if hi > 0 else 1.0))
    return C2mReport(d, pixel_mm, float(d.mean()), hi, edges, counts)
