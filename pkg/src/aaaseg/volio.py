"""Volume bundles, in-plane resampling, intensity normalisation and phantoms.

A :class:`Volume` stores its voxels as a numpy array of shape ``(z, y, x)`` so
that the flat C-order buffer runs x-fastest, matching the on-disk layout.
"""
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, ShapeError, ValidationError

UNIFIED_SPACING_MM = 0.645
DEFAULT_WINDOW = (-100.0, 500.0)

_DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("u1"), "f32": np.dtype("<f4")}


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"volume data must be 3D (z, y, x), got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValidationError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self):
        """(x, y, z) voxel counts."""
        z, y, x = self.data.shape
        return (x, y, z)

    @property
    def dtype_tag(self):
        for tag, dt in _DTYPES.items():
            if self.data.dtype == dt:
                return tag
        raise FormatError(f"no bundle dtype for {self.data.dtype}")

    @property
    def is_mask(self):
        return self.data.dtype == np.uint8

    def slice(self, k):
        return self.data[k]

    def validate_mask(self):
        if not np.all((self.data == 0) | (self.data == 1)):
            raise ValidationError("mask volume contains values other than 0 and 1")


def write_bundle(v, path):
    path = Path(path)
    tag = v.dtype_tag
    if tag == "u8":
        v.validate_mask()
    path.mkdir(parents=True, exist_ok=True)
    meta = {"dims": list(v.dims), "spacing_mm": list(v.spacing), "dtype": tag}
    (path / "meta.json").write_text(json.dumps(meta))
    (path / "voxels.raw").write_bytes(np.ascontiguousarray(v.data, dtype=_DTYPES[tag]).tobytes())


def read_bundle(path):
    path = Path(path)
    meta_path, raw_path = path / "meta.json", path / "voxels.raw"
    for p in (meta_path, raw_path):
        if not p.is_file():
            raise FormatError(f"volume bundle {path} is missing {p.name}")
    try:
        meta = json.loads(meta_path.read_text())
        dims = [int(d) for d in meta["dims"]]
        spacing = [float(s) for s in meta["spacing_mm"]]
        tag = meta["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{meta_path}: malformed metadata ({exc})") from exc
    if tag not in _DTYPES:
        raise FormatError(f"{meta_path}: unknown dtype {tag!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"{meta_path}: dims must be three positive integers, got {dims}")
    if len(spacing) != 3 or min(spacing) <= 0:
        raise ValidationError(f"{meta_path}: spacing must be positive, got {spacing}")
    raw = raw_path.read_bytes()
    dt = _DTYPES[tag]
    expected = int(np.prod(dims)) * dt.itemsize
    if len(raw) != expected:
        raise FormatError(f"{raw_path}: payload is {len(raw)} bytes, dims {dims} need {expected}")
    x, y, z = dims
    data = np.frombuffer(raw, dtype=dt).reshape(z, y, x).astype(dt.newbyteorder("="))
    v = Volume(data, tuple(spacing))
    if tag == "u8":
        v.validate_mask()
    return v


def resample_xy(v, target_spacing=(UNIFIED_SPACING_MM, UNIFIED_SPACING_MM)):
    """Resample every z-slice to ``target_spacing`` (sx, sy) mm.

    Pixel centres sit at ``index * spacing`` with the first pixel at the
    origin; the new grid covers the same physical extent from that origin.
    Intensity volumes use bilinear interpolation; masks use nearest
    neighbour so they stay binary. z is left alone.
    """
    tx, ty = (float(t) for t in target_spacing)
    if tx <= 0 or ty <= 0:
        raise ValidationError(f"target spacing must be positive, got {target_spacing}")
    sx, sy, sz = v.spacing
    if (sx, sy) == (tx, ty):
        return Volume(v.data.copy(), v.spacing)
    nz, ny, nx = v.data.shape
    new_nx = int(np.floor((nx - 1) * sx / tx + 1e-9)) + 1
    new_ny = int(np.floor((ny - 1) * sy / ty + 1e-9)) + 1
    rows = np.arange(new_ny) * (ty / sy)
    cols = np.arange(new_nx) * (tx / sx)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    order = 0 if v.is_mask else 1
    out = np.empty((nz, new_ny, new_nx), dtype=v.data.dtype)
    for k in range(nz):
        res = ndimage.map_coordinates(v.data[k].astype(np.float64), [rr, cc], order=order, mode="nearest")
        if v.is_mask:
            out[k] = res > 0.5
        elif np.issubdtype(v.data.dtype, np.integer):
            info = np.iinfo(v.data.dtype)
            out[k] = np.clip(np.rint(res), info.min, info.max)
        else:
            out[k] = res
    return Volume(out, (tx, ty, sz))


def normalize_intensity(img, lo=DEFAULT_WINDOW[0], hi=DEFAULT_WINDOW[1]):
    """Map the window [lo, hi] linearly onto [0, 1], clamping outside it."""
    if lo >= hi:
        raise ValidationError(f"normalisation window needs lo < hi, got [{lo}, {hi}]")
    out = (np.asarray(img, dtype=np.float32) - np.float32(lo)) / np.float32(hi - lo)
    return np.clip(out, 0.0, 1.0)


# -- phantoms ----------------------------------------------------------------

@dataclass
class PhantomSpec:
    """Tube-with-bulge aorta phantom plus two distractor discs.

    The aorta radius along z is ``r0 + bulge * exp(-((z - zc) / width)^2)``
    with ``zc`` given as a fraction of the slice count. Intensities are in
    pseudo-HU before the subject's contrast map ``a * v + b``; the whole
    anatomy is shifted by ``offset`` (dx, dy) pixels. A distractor is
    disabled by a zero radius. ``edge_blur`` smooths tissue boundaries before
    noise is added; the mask stays the sharp disc, which sits on the
    half-height contour of the blurred edge.
    """

    n_slices: int = 32
    slice_dims: tuple = (80, 80)  # (rows, cols)
    r0: float = 6.0
    bulge: float = 6.0
    bulge_center: float = 0.5
    bulge_width: float = 0.25
    background_level: float = 40.0
    aorta_level: float = 180.0
    spine_level: float = 650.0
    spine_radius: float = 8.0
    spine_offset: tuple = (0.0, 22.0)
    ivc_level: float = 130.0
    ivc_radius: float = 5.0
    ivc_offset: tuple = (20.0, 6.0)
    noise_std: float = 12.0
    edge_blur: float = 0.0  # in-plane gaussian sigma (px), mimics partial-volume edges
    a: float = 1.0
    b: float = 0.0
    offset: tuple = (0.0, 0.0)
    spacing_mm: tuple = (UNIFIED_SPACING_MM, UNIFIED_SPACING_MM, 1.0)
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown phantom fields: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def radius(self, k):
        zc = self.bulge_center * (self.n_slices - 1)
        width = max(self.bulge_width * self.n_slices, 1e-9)
        return self.r0 + self.bulge * np.exp(-((k - zc) / width) ** 2)

    def aorta_center(self):
        rows, cols = self.slice_dims
        return ((cols - 1) / 2.0 + self.offset[0], (rows - 1) / 2.0 + self.offset[1])


def rasterize_disc(shape, cx, cy, r):
    """Boolean mask of pixels whose centres satisfy (x-cx)^2 + (y-cy)^2 <= r^2."""
    yy, xx = np.ogrid[:shape[0], :shape[1]]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _check_inside(shape, cx, cy, r, what):
    rows, cols = shape
    if cx - r < 0 or cy - r < 0 or cx + r > cols - 1 or cy + r > rows - 1:
        raise ValidationError(f"{what} disc (centre ({cx:.1f}, {cy:.1f}), radius {r:.1f}) exceeds the {rows}x{cols} slice")


def make_phantom(spec):
    """Return ``(image, mask)`` volumes for one synthetic subject."""
    if spec.n_slices < 1 or spec.r0 < 1 or spec.a <= 0 or spec.edge_blur < 0:
        raise ValidationError("phantom needs n_slices >= 1, r0 >= 1, a > 0 and edge_blur >= 0")
    shape = tuple(int(s) for s in spec.slice_dims)
    cx, cy = spec.aorta_center()
    rng = np.random.default_rng(spec.seed)
    image = np.empty((spec.n_slices,) + shape, dtype=np.int16)
    mask = np.zeros((spec.n_slices,) + shape, dtype=np.uint8)
    extras = []
    for level, r, (ox, oy), what in ((spec.spine_level, spec.spine_radius, spec.spine_offset, "spine"),
                                      (spec.ivc_level, spec.ivc_radius, spec.ivc_offset, "ivc")):
        if r > 0:
            _check_inside(shape, cx + ox, cy + oy, r, what)
            extras.append((level, rasterize_disc(shape, cx + ox, cy + oy, r)))
    for k in range(spec.n_slices):
        r = spec.radius(k)
        _check_inside(shape, cx, cy, r, "aorta")
        disc = rasterize_disc(shape, cx, cy, r)
        tissue = np.full(shape, spec.background_level, dtype=np.float64)
        for level, m in extras:
            tissue[m] = level
        tissue[disc] = spec.aorta_level
        if spec.edge_blur > 0:
            tissue = ndimage.gaussian_filter(tissue, spec.edge_blur, mode="nearest")
        vals = spec.a * tissue + spec.b
        if spec.noise_std > 0:
            vals = vals + rng.normal(0.0, spec.noise_std, size=shape)
        image[k] = np.clip(np.rint(vals), -32768, 32767)
        mask[k] = disc
    return Volume(image, spec.spacing_mm), Volume(mask, spec.spacing_mm)
