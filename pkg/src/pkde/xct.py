"""Voxel volumes: pore detection, axis-aligned rotation, slicing, cropping.

Void polarity: voxels with intensity *below* the threshold are void, since
pores are low-density regions in a CT scan.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import LayerImage, PoreSet, PorePosition, round_half_up

log = logging.getLogger(__name__)

# 6-connectivity
_STRUCTURE = ndimage.generate_binary_structure(3, 1)


class UnsupportedRotationError(ValueError):
    pass


class ResolutionError(ValueError):
    pass


class CropBoundsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    """Scalar intensity grid; ``data`` has shape (nz, ny, nx), x fastest."""

    data: np.ndarray
    voxel_size: float = 1.0  # micrometres per voxel edge

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.size == 0:
            raise ValueError("voxel volume must be a non-empty 3-D array")
        if not np.all(np.isfinite(arr)) or arr.min() < 0:
            raise ValueError("voxel intensities must be finite and >= 0")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def nz(self) -> int:
        return self.data.shape[0]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nx(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class DetectedPore:
    centroid: tuple[float, float, float]  # (x, y, z) voxel coordinates
    voxel_count: int
    equivalent_diameter: float  # micrometres

    def to_dict(self) -> dict:
        return {
            "centroid": list(self.centroid),
            "voxel_count": self.voxel_count,
            "equivalent_diameter": self.equivalent_diameter,
        }

    @classmethod
    def from_dict(cls, d) -> "DetectedPore":
        return cls(tuple(float(c) for c in d["centroid"]), int(d["voxel_count"]), float(d["equivalent_diameter"]))


def equivalent_diameter(voxel_count: int, voxel_size: float) -> float:
    """Diameter of the sphere with the same volume as ``voxel_count`` voxels."""
    return voxel_size * (6.0 * voxel_count / math.pi) ** (1.0 / 3.0)


def label_voids(vol: VoxelVolume, intensity_threshold: float):
    """Connected void components; returns (label array, component count)."""
    return ndimage.label(vol.data < intensity_threshold, structure=_STRUCTURE)


def detect_pores(
    vol: VoxelVolume,
    intensity_threshold: float = 11500.0,
    min_diameter: float = 10.0,
    exclude_lateral_border: bool = False,
) -> list[DetectedPore]:
    """Threshold + 6-connected components, filtered by equivalent diameter.

    With ``exclude_lateral_border`` components touching an x or y face of the
    volume are treated as the air surrounding the part and dropped.
    """
    if not math.isfinite(intensity_threshold):
        raise ValueError("threshold must be finite")
    if min_diameter < 0:
        raise ValueError("min_diameter must be >= 0")
    labels, n = label_voids(vol, intensity_threshold)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n + 1)[1:]
    zz, yy, xx = np.indices(labels.shape)
    sx = np.bincount(flat, weights=xx.ravel(), minlength=n + 1)[1:]
    sy = np.bincount(flat, weights=yy.ravel(), minlength=n + 1)[1:]
    sz = np.bincount(flat, weights=zz.ravel(), minlength=n + 1)[1:]

    border = set()
    if exclude_lateral_border:
        for face in (labels[:, 0, :], labels[:, -1, :], labels[:, :, 0], labels[:, :, -1]):
            border.update(np.unique(face).tolist())
        border.discard(0)

    pores = []
    for i, lab in enumerate(idx):
        if int(lab) in border:
            continue
        c = int(counts[i])
        d = equivalent_diameter(c, vol.voxel_size)
        if d < min_diameter:
            continue
        pores.append(DetectedPore((sx[i] / c, sy[i] / c, sz[i] / c), c, d))
    pores.sort(key=lambda p: (p.centroid[2], p.centroid[1], p.centroid[0]))
    return pores


# -- rotations ----------------------------------------------------------------


@dataclass(frozen=True)
class Rotation:
    """Proper axis-aligned rotation as a signed permutation matrix.

    ``matrix[i][j]`` is the coefficient of old axis j in new axis i, axes
    ordered (x, y, z). Negative entries flip the axis, so a new coordinate is
    ``n - 1 - old`` along that direction.
    """

    matrix: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        m = np.array(self.matrix)
        ok = (
            m.shape == (3, 3)
            and set(np.unique(m).tolist()) <= {-1, 0, 1}
            and np.all(np.abs(m).sum(axis=0) == 1)
            and np.all(np.abs(m).sum(axis=1) == 1)
            and round(np.linalg.det(m)) == 1
        )
        if not ok:
            raise UnsupportedRotationError(f"not a proper axis-aligned rotation: {self.matrix}")
        object.__setattr__(self, "matrix", tuple(tuple(int(v) for v in row) for row in m))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(((1, 0, 0), (0, 1, 0), (0, 0, 1)))

    @classmethod
    def about(cls, axis: str, degrees: float) -> "Rotation":
        """Quarter-turn about a coordinate axis.

        +90 degrees about z maps voxel (x, y, z) to (y, nx-1-x, z); the x and
        y conventions are the cyclic analogues.
        """
        if degrees % 90 != 0:
            raise UnsupportedRotationError(f"{degrees} degrees is not a multiple of 90")
        a = "xyz".index(axis)
        b, c = (a + 1) % 3, (a + 2) % 3
        quarter = np.eye(3, dtype=int)
        quarter[[b, b, c, c], [b, c, b, c]] = [0, 1, -1, 0]
        out = np.eye(3, dtype=int)
        for _ in range(int(degrees // 90) % 4):
            out = quarter @ out
        return cls(tuple(map(tuple, out)))

    @classmethod
    def all(cls) -> list["Rotation"]:
        rots = []
        for perm in itertools.permutations(range(3)):
            for signs in itertools.product((1, -1), repeat=3):
                m = np.zeros((3, 3), dtype=int)
                for i, (j, s) in enumerate(zip(perm, signs)):
                    m[i, j] = s
                if round(np.linalg.det(m)) == 1:
                    rots.append(cls(tuple(map(tuple, m))))
        return rots

    def inverse(self) -> "Rotation":
        return Rotation(tuple(map(tuple, np.array(self.matrix).T)))

    def then(self, other: "Rotation") -> "Rotation":
        """Apply self first, then other."""
        return Rotation(tuple(map(tuple, np.array(other.matrix) @ np.array(self.matrix))))

    def new_shape(self, nx: int, ny: int, nz: int) -> tuple[int, int, int]:
        dims = (nx, ny, nz)
        m = np.array(self.matrix)
        return tuple(dims[int(np.flatnonzero(m[i])[0])] for i in range(3))

    def map_point(self, point, shape_xyz) -> tuple[float, float, float]:
        """Map continuous voxel coordinates (x, y, z) through the rotation."""
        m = np.array(self.matrix)
        out = []
        for i in range(3):
            j = int(np.flatnonzero(m[i])[0])
            out.append(point[j] if m[i, j] > 0 else shape_xyz[j] - 1 - point[j])
        return tuple(float(v) for v in out)


def rotate_to_build_axis(vol: VoxelVolume, rotation: Rotation) -> VoxelVolume:
    """Lossless axis permutation of the voxel grid; no interpolation."""
    if not isinstance(rotation, Rotation):
        raise UnsupportedRotationError(f"expected a Rotation, got {rotation!r}")
    m = np.array(rotation.matrix)
    # array axes are (z, y, x) = coordinate index 2, 1, 0
    arr_axis = {0: 2, 1: 1, 2: 0}
    src = vol.data
    for j in range(3):
        i = int(np.flatnonzero(m[:, j])[0])
        if m[i, j] < 0:
            src = np.flip(src, axis=arr_axis[j])
    # new array axis for new coord i takes the old array axis of coord j
    order = []
    for new_arr in range(3):
        i = {2: 0, 1: 1, 0: 2}[new_arr]
        j = int(np.flatnonzero(m[i])[0])
        order.append(arr_axis[j])
    return VoxelVolume(np.ascontiguousarray(np.transpose(src, order)), vol.voxel_size)


# -- slicing and cropping -----------------------------------------------------


def slice_volume(vol: VoxelVolume, layer_thickness: float) -> list[LayerImage]:
    """Layer images (modality CT) in build order, layer 1 at z = 0.

    Each slice is the overlap-weighted mean of the voxel planes covering its
    z-range; a partial top layer is discarded.
    """
    vs = vol.voxel_size
    if layer_thickness < vs:
        raise ResolutionError(f"layer thickness {layer_thickness} um is finer than voxel size {vs} um")
    n = int(math.floor(vol.nz * vs / layer_thickness + 1e-9))
    data = vol.data.astype(np.float64)
    out = []
    # traverse top-down, then return bottom-up
    for k in reversed(range(n)):
        lo, hi = k * layer_thickness, (k + 1) * layer_thickness
        p0 = int(math.floor(lo / vs + 1e-9))
        p1 = min(vol.nz, int(math.ceil(hi / vs - 1e-9)))
        acc = np.zeros(data.shape[1:])
        wsum = 0.0
        for p in range(p0, p1):
            w = min(hi, (p + 1) * vs) - max(lo, p * vs)
            if w <= 0:
                continue
            acc += w * data[p]
            wsum += w
        out.append(LayerImage("CT", acc / wsum))
    out.reverse()
    return out


@dataclass(frozen=True)
class CropFrame:
    reference_points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.reference_points)
        if len(pts) != 4:
            raise ValueError("a crop frame needs exactly four reference points")
        object.__setattr__(self, "reference_points", pts)
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate crop rectangle {self.box}")

    @property
    def box(self) -> tuple[int, int, int, int]:
        xs = [p[0] for p in self.reference_points]
        ys = [p[1] for p in self.reference_points]
        return (round_half_up(min(xs)), round_half_up(min(ys)), round_half_up(max(xs)), round_half_up(max(ys)))

    @property
    def width(self) -> int:
        return self.box[2] - self.box[0]

    @property
    def height(self) -> int:
        return self.box[3] - self.box[1]

    @classmethod
    def from_box(cls, x0, y0, x1, y1) -> "CropFrame":
        return cls(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))


def crop(image: LayerImage, frame: CropFrame) -> LayerImage:
    x0, y0, x1, y1 = frame.box
    if x0 < 0:
        raise CropBoundsError(f"left edge x0={x0} < 0")
    if y0 < 0:
        raise CropBoundsError(f"top edge y0={y0} < 0")
    if x1 > image.width:
        raise CropBoundsError(f"right edge x1={x1} > width {image.width}")
    if y1 > image.height:
        raise CropBoundsError(f"bottom edge y1={y1} > height {image.height}")
    return LayerImage(image.modality, image.data[y0:y1, x0:x1])


def pores_to_layers(
    pores: list[DetectedPore],
    voxel_size: float,
    layer_thickness: float,
    frame: CropFrame,
    part: int = 1,
) -> tuple[dict[int, PoreSet], int]:
    """Group detected pores into per-layer PoreSets in crop-frame pixels.

    Returns ``(layers, dropped)`` where ``dropped`` counts pores outside the
    frame. Layer index is ``floor(z * voxel_size / layer_thickness) + 1``.
    """
    x0, y0, _, _ = frame.box
    w, h = frame.width, frame.height
    grouped: dict[int, list[PorePosition]] = {}
    dropped = 0
    for p in pores:
        cx, cy, cz = p.centroid
        x, y = cx - x0, cy - y0
        if not (0 <= x < w and 0 <= y < h):
            dropped += 1
            continue
        layer = int(math.floor(cz * voxel_size / layer_thickness)) + 1
        grouped.setdefault(layer, []).append(PorePosition(x, y))
    if dropped:
        log.info("part %d: dropped %d pores outside the crop frame", part, dropped)
    return {l: PoreSet(tuple(v), l, part) for l, v in sorted(grouped.items())}, dropped
