"""Slice augmentation policies.

``gt``: gray-value variation (linear maps ``a * v + b`` on raw intensities)
crossed with translated crop windows.
``rm``: the eight lossless rotations/mirrorings of a square slice.

Both expansions are deterministic enumerations. Every produced pair carries a
compact descriptor string from which it can be rebuilt exactly, e.g.
``gt:a=1.0523,b=-12.3,w=(64,128)`` or ``rm:r=90,m=1``.
"""
import re
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from . import volio

INT16_RANGE = (-32768.0, 32767.0)


@dataclass(frozen=True)
class GrayMap:
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValidationError(f"gray map slope must be positive, got a={self.a}")


@dataclass(frozen=True)
class WindowGrid:
    window: int = 512
    stride: int = 64

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValidationError("window and stride must be positive")


@dataclass(frozen=True)
class AugPolicy:
    kind: str = "gt"
    n_gray: int = 8
    a_range: tuple = (0.8, 1.2)
    b_range: tuple = (-100.0, 100.0)
    window: int = 512
    stride: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gt", "rm"):
            raise ValidationError(f"unknown augmentation kind {self.kind!r}")
        if self.n_gray < 1:
            raise ValidationError("n_gray must be >= 1")
        if not 0 < self.a_range[0] <= self.a_range[1]:
            raise ValidationError(f"a_range must be positive and ordered, got {self.a_range}")

    @property
    def grid(self):
        return WindowGrid(self.window, self.stride)


@dataclass
class SlicePair:
    image: np.ndarray
    label: np.ndarray
    provenance: tuple = ("", -1, "")  # (subject id, slice index, descriptor)

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise ValidationError(f"image {self.image.shape} and label {self.label.shape} differ")

    @property
    def descriptor(self):
        return self.provenance[2]

    def with_(self, image, label, descriptor):
        subject, index, _ = self.provenance
        return SlicePair(image, label, (subject, index, descriptor))


def apply_gray(img, m, lo=INT16_RANGE[0], hi=INT16_RANGE[1]):
    """``clip(a * v + b)`` on raw intensities. Never call this on labels."""
    if not isinstance(m, GrayMap):
        m = GrayMap(*m)
    return np.clip(m.a * np.asarray(img, dtype=np.float64) + m.b, lo, hi)


def enumerate_windows(dims, grid):
    """Row-major top-left origins ``(x0, y0)`` for a ``(rows, cols)`` slice."""
    rows, cols = dims
    w, s = grid.window, grid.stride
    if rows < w or cols < w:
        raise ValidationError(f"slice {rows}x{cols} is smaller than the window; need at least {w}x{w}")
    ny = (rows - w) // s + 1
    nx = (cols - w) // s + 1
    return [(ix * s, iy * s) for iy in range(ny) for ix in range(nx)]


def crop(img, origin, window):
    x0, y0 = origin
    return img[y0:y0 + window, x0:x0 + window]


def center_origin(dims, window):
    rows, cols = dims
    if rows < window or cols < window:
        raise ValidationError(f"slice {rows}x{cols} is smaller than the window; need at least {window}x{window}")
    return ((cols - window) // 2, (rows - window) // 2)


def gray_maps(policy, key=0):
    """``policy.n_gray`` maps; the first is always the identity.

    Draws are rounded (a to 4, b to 2 decimals) so that descriptor strings
    round-trip exactly.
    """
    rng = np.random.default_rng([policy.seed, key])
    maps = [GrayMap(1.0, 0.0)]
    for _ in range(policy.n_gray - 1):
        a = round(float(rng.uniform(*policy.a_range)), 4)
        b = round(float(rng.uniform(*policy.b_range)), 2)
        maps.append(GrayMap(a, b))
    return maps


def gt_descriptor(m, origin):
    return f"gt:a={m.a:g},b={m.b:g},w=({origin[0]},{origin[1]})"


def rm_descriptor(k, mirror):
    return f"rm:r={90 * k},m={int(mirror)}"


def expand_gt(pair, policy, key=0):
    """Gray variants x window origins, gray-major. Labels are only cropped."""
    if policy.kind != "gt":
        raise ValidationError("expand_gt needs a 'gt' policy")
    origins = enumerate_windows(pair.image.shape, policy.grid)
    out = []
    for m in gray_maps(policy, key):
        mapped = apply_gray(pair.image, m)
        for o in origins:
            out.append(pair.with_(crop(mapped, o, policy.window).copy(),
                                  crop(pair.label, o, policy.window).copy(),
                                  gt_descriptor(m, o)))
    return out


def dihedral(img, k, mirror, inverse=False):
    """Rotate by ``k`` quarter turns, then mirror left-right (or undo that)."""
    if inverse:
        if mirror:
            img = np.fliplr(img)
        return np.rot90(img, -k)
    img = np.rot90(img, k)
    return np.fliplr(img) if mirror else img


DIHEDRAL = [(k, m) for m in (False, True) for k in range(4)]


def expand_rm(pair, policy=None):
    """The 8 dihedral variants, image and label transformed in lockstep."""
    if pair.image.shape[0] != pair.image.shape[1]:
        raise ValidationError(f"rotation/mirroring needs a square slice, got {pair.image.shape}")
    return [pair.with_(np.ascontiguousarray(dihedral(pair.image, k, m)),
                       np.ascontiguousarray(dihedral(pair.label, k, m)),
                       rm_descriptor(k, m))
            for k, m in DIHEDRAL]


def expand(pair, policy, key=0):
    """Expand one full slice under ``policy``.

    ``rm`` works on the centre window crop so both policies feed the network
    windows of the same size.
    """
    if policy.kind == "gt":
        return expand_gt(pair, policy, key)
    o = center_origin(pair.image.shape, policy.window)
    centre = pair.with_(crop(pair.image, o, policy.window), crop(pair.label, o, policy.window), "")
    return expand_rm(centre, policy)


def expansion_descriptors(dims, policy, key=0):
    """Descriptors ``expand`` would produce, without touching pixel data."""
    if policy.kind == "gt":
        origins = enumerate_windows(dims, policy.grid)
        return [gt_descriptor(m, o) for m in gray_maps(policy, key) for o in origins]
    center_origin(dims, policy.window)
    return [rm_descriptor(k, m) for k, m in DIHEDRAL]


_GT_RE = re.compile(r"^gt:a=([-+0-9.eE]+),b=([-+0-9.eE]+),w=\((\d+),(\d+)\)$")
_RM_RE = re.compile(r"^rm:r=(0|90|180|270),m=([01])$")


def parse_descriptor(desc):
    m = _GT_RE.match(desc)
    if m:
        return {"kind": "gt", "gray": GrayMap(float(m[1]), float(m[2])), "origin": (int(m[3]), int(m[4]))}
    m = _RM_RE.match(desc)
    if m:
        return {"kind": "rm", "k": int(m[1]) // 90, "mirror": m[2] == "1"}
    raise ValidationError(f"unrecognised augmentation descriptor {desc!r}")


def apply_descriptor(image, label, desc, window):
    """Rebuild one augmented (raw image, label) pair from a full slice."""
    d = parse_descriptor(desc)
    if d["kind"] == "gt":
        return (crop(apply_gray(image, d["gray"]), d["origin"], window),
                crop(label, d["origin"], window))
    o = center_origin(image.shape, window)
    return (dihedral(crop(image, o, window), d["k"], d["mirror"]),
            dihedral(crop(label, o, window), d["k"], d["mirror"]))


class AugmentedDataset:
    """Lazy training set over full slices and per-sample descriptors.

    ``slices`` maps subject id -> (image volume, mask volume); ``refs`` is a
    list of (subject id, slice index, descriptor). Items are normalised
    :class:`SlicePair` objects ready for the network.
    """

    def __init__(self, slices, refs, window, norm_window=volio.DEFAULT_WINDOW):
        self.slices = slices
        self.refs = list(refs)
        self.window = window
        self.norm_window = norm_window

    def __len__(self):
        return len(self.refs)

    def __getitem__(self, i):
        subject, k, desc = self.refs[i]
        image, mask = self.slices[subject]
        img, lab = apply_descriptor(image.data[k], mask.data[k], desc, self.window)
        img = volio.normalize_intensity(img, *self.norm_window)
        return SlicePair(np.ascontiguousarray(img), np.ascontiguousarray(lab), (subject, k, desc))


def build_refs(volumes, policy, subjects):
    """Descriptor references for every slice of every listed subject.

    The gray-map draw for a slice is keyed on (subject position, slice index)
    so that each slice sees its own contrast variants.
    """
    refs = []
    for si, subject in enumerate(subjects):
        image, _ = volumes[subject]
        for k in range(image.data.shape[0]):
            key = si * 100_000 + k
            for desc in expansion_descriptors(image.data.shape[1:], policy, key):
                refs.append((subject, k, desc))
    return refs

