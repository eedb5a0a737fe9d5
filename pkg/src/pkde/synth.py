"""Synthetic layerwise builds: cross-sections, pore seeding, HR/OT rendering, CT volumes.

Every random draw comes from a Philox (counter-based) generator keyed on
``(seed, part, layer, stream)``, so layers can be produced in any order or
in parallel with identical results.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (
    TABLE1_GEOMETRY,
    LayerImage,
    PoreSet,
    ProcessParams,
    energy_density,
    pore_set_to_json,
    save_layer_image,
    table1_params,
    write_manifest,
)
from .sections import GeometrySection, section_ranges
from .tensorio import save_tensor
from .xct import CropFrame, Rotation, VoxelVolume, rotate_to_build_axis

log = logging.getLogger(__name__)

STREAM_PORES = 1
STREAM_RENDER = 2
STREAM_VOLUME = 3


def keyed_rng(seed: int, part: int, layer: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, part, layer, stream])))


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class GeometrySpec:
    kind: str = "cube"  # "cube" | "complex"
    size: float = 20.0  # mm, edge of the part
    fill: float = 0.75  # fraction of the image edge occupied by the part

    def __post_init__(self):
        if self.kind not in ("cube", "complex"):
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        if not 0 < self.fill <= 1:
            raise ValueError("fill must be in (0, 1]")


def _square_box(width: int, height: int, fill: float):
    side = max(4, int(round(min(width, height) * fill)))
    x0 = (width - side) // 2
    y0 = (height - side) // 2
    return x0, y0, side


def cross_section(geom: GeometrySpec, layer: int, width: int, height: int, n_layers: int = 712) -> LayerImage:
    """Binary part mask for one layer (1 = material).

    Complex parts follow the four feature sections: diagonal slits, an
    overhang ledge that widens with the layer index, a plain section, and
    round features (a shrinking dome disc plus four fixed cylinders).
    """
    if not 1 <= layer <= n_layers:
        raise ValueError(f"layer {layer} outside [1, {n_layers}]")
    x0, y0, side = _square_box(width, height, geom.fill)
    yy, xx = np.mgrid[0:height, 0:width]
    square = (xx >= x0) & (xx < x0 + side) & (yy >= y0) & (yy < y0 + side)
    if geom.kind == "cube":
        return LayerImage("CT", square.astype(np.float64))

    ranges = section_ranges(n_layers, warn=False)
    sec = next(s for s, (lo, hi) in ranges.items() if lo <= layer <= hi)
    lo, hi = ranges[sec]
    t = 0.0 if hi == lo else (layer - lo) / (hi - lo)

    if sec is GeometrySection.PreOverhang:
        period = max(6, side // 4)
        slit = max(1, side // 24)
        # slits run at 45 degrees across the whole section and open to the outside
        mask = square & (((xx - yy) % period) >= slit)
    elif sec is GeometrySection.Overhang:
        base = int(round(side * 0.55))
        w = base + int(round(t * (side - base)))
        mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + side)
    elif sec is GeometrySection.PreRound:
        mask = square
    else:
        cx, cy = x0 + (side - 1) / 2.0, y0 + (side - 1) / 2.0
        r_dome = side * 0.3 * math.sqrt(max(0.0, 1.0 - t * t))
        r_dome = max(r_dome, 2.5)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r_dome**2
        q = side * 0.2
        for k, (ox, oy) in enumerate(((-1, -1), (1, -1), (-1, 1), (1, 1))):
            rc = max(1.5, side * (0.05 + 0.02 * k))
            mask |= (xx - (cx + ox * 1.6 * q)) ** 2 + (yy - (cy + oy * 1.6 * q)) ** 2 <= rc**2
    return LayerImage("CT", mask.astype(np.float64))


@dataclass(frozen=True)
class PoreModel:
    """Poisson pore rate ``base_rate * (1 + s * ln(E_v / E_nominal)^2)``.

    The U shape stands in for lack-of-fusion (low E_v) and keyhole (high E_v)
    porosity. Pores are voxel cubes of edge ``2 * radius + 1``.
    """

    base_rate: float = 1.0
    energy_sensitivity: float = 1.0
    nominal_energy: float = 55e9
    seed: int = 0
    radius: int = 1

    def __post_init__(self):
        if self.base_rate < 0 or self.energy_sensitivity < 0:
            raise ValueError("pore rate parameters must be >= 0")

    def rate_factor(self, e_v: float) -> float:
        return 1.0 + self.energy_sensitivity * math.log(e_v / self.nominal_energy) ** 2

    def expected_count(self, params: ProcessParams) -> float:
        return self.base_rate * self.rate_factor(energy_density(params))


def seed_pores(mask: LayerImage, params: ProcessParams, model: PoreModel, layer: int) -> PoreSet:
    """Sample pore pixels inside ``mask`` (non-zero pixels), Poisson-distributed count.

    Pores are kept ``2 * radius + 2`` pixels apart (Chebyshev) so their voxel
    blobs never touch within a layer; draws that cannot be placed are skipped.
    """
    part = params.part
    rng = keyed_rng(model.seed, part, layer, STREAM_PORES)
    lam = model.expected_count(params)
    n = int(rng.poisson(lam)) if lam > 0 else 0
    if n == 0:
        return PoreSet((), layer, part)
    ys, xs = np.nonzero(mask.data > 0)
    if xs.size == 0:
        return PoreSet((), layer, part)
    order = rng.permutation(xs.size)
    gap = 2 * model.radius + 2
    chosen: list[tuple[int, int]] = []
    for idx in order:
        if len(chosen) == n:
            break
        x, y = int(xs[idx]), int(ys[idx])
        if all(max(abs(x - a), abs(y - b)) >= gap for a, b in chosen):
            chosen.append((x, y))
    return PoreSet.from_xy(chosen, layer, part)


@dataclass(frozen=True)
class RenderConfig:
    hr_noise: float = 0.03
    ot_noise: float = 0.02
    hr_signature: float = 0.15
    ot_signature: float = 0.6
    signature_sigma: float = 1.5
    ot_smoothing: float = 1.0
    ot_reference_energy: float = 50e9

    def signature_radius(self) -> int:
        return int(math.ceil(3 * self.signature_sigma))


def ot_brightness(e_v: float, reference: float = 50e9) -> float:
    """Monotone map from energy density to mean melt-track OT intensity."""
    return e_v / (e_v + reference)


def _hr_texture(mask: np.ndarray, layer: int) -> np.ndarray:
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    # scan vectors rotate 67 degrees every layer
    ang = math.radians(67.0 * (layer - 1))
    stripes = np.cos((xx * math.cos(ang) + yy * math.sin(ang)) * (2 * math.pi / 4.0))
    return mask * (0.55 + 0.05 * stripes) + (1 - mask) * 0.2


def _signature(shape, pores: PoreSet, sigma: float, radius: int) -> np.ndarray:
    h, w = shape
    sig = np.zeros(shape)
    for p in sorted((q.x, q.y) for q in pores.pores):
        px, py = p
        xa, xb = max(0, int(math.floor(px)) - radius), min(w - 1, int(math.ceil(px)) + radius)
        ya, yb = max(0, int(math.floor(py)) - radius), min(h - 1, int(math.ceil(py)) + radius)
        dx = np.arange(xa, xb + 1) - px
        dy = np.arange(ya, yb + 1) - py
        bump = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2 * sigma**2))
        sig[ya:yb + 1, xa:xb + 1] = np.maximum(sig[ya:yb + 1, xa:xb + 1], bump)
    return sig


def render_modalities(
    mask: LayerImage,
    pores: PoreSet,
    params: ProcessParams,
    noise_seed: int,
    cfg: RenderConfig = RenderConfig(),
) -> tuple[LayerImage, LayerImage]:
    """Render (HR, OT) images for one layer.

    HR: scan-stripe texture on the material, a dark dimple at each pore,
    speckle noise. OT: smoothed mask scaled by ``ot_brightness(E_v)``, a hot
    spot at each pore, additive noise. Pore signatures are confined to a
    ``signature_radius()`` window around the pore.
    """
    m = mask.data
    rng = keyed_rng(noise_seed, pores.part, pores.layer, STREAM_RENDER)
    sig = _signature(m.shape, pores, cfg.signature_sigma, cfg.signature_radius())

    hr = _hr_texture(m, pores.layer) - cfg.hr_signature * sig
    if cfg.hr_noise > 0:
        hr = hr * (1.0 + cfg.hr_noise * rng.standard_normal(m.shape))

    smooth = ndimage.gaussian_filter(m, cfg.ot_smoothing, mode="constant") if cfg.ot_smoothing > 0 else m.copy()
    ot = smooth * ot_brightness(energy_density(params), cfg.ot_reference_energy) + cfg.ot_signature * sig
    if cfg.ot_noise > 0:
        ot = ot + cfg.ot_noise * rng.standard_normal(m.shape)
    return LayerImage("HR", hr), LayerImage("OT", ot)


# -- whole builds ---------------------------------------------------------------

MATERIAL_INTENSITY = 20000.0
AIR_INTENSITY = 1000.0
PORE_INTENSITY = 3000.0
VOLUME_NOISE = 300.0


@dataclass(frozen=True)
class PlanEntry:
    part: int
    geometry: GeometrySpec
    params: ProcessParams


@dataclass
class PartBuild:
    entry: PlanEntry
    volume: VoxelVolume  # stored (scanner) orientation
    rotation: Rotation  # maps the stored volume onto the build axis
    frame: CropFrame
    layer_thickness: float
    hr: dict = field(default_factory=dict)
    ot: dict = field(default_factory=dict)
    seeded: dict = field(default_factory=dict)


@dataclass
class SyntheticBuild:
    n_layers: int
    width: int
    height: int
    seed: int
    parts: dict  # part -> PartBuild

    @property
    def triplet_count(self) -> int:
        return sum(len(pb.hr) for pb in self.parts.values())


def table1_plan(geometry_fill: float = 0.75) -> list[PlanEntry]:
    params = table1_params()
    return [PlanEntry(p, GeometrySpec(TABLE1_GEOMETRY[p], fill=geometry_fill), params[p]) for p in sorted(params)]


def read_plan(path) -> list[PlanEntry]:
    """Parse a JSON plan file: ``{"parts": [{"part", "geometry", "laser_power", ...}]}``."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno - 1 < len(text.splitlines()) else ""
        raise PlanError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from exc
    entries = []
    for i, item in enumerate(doc.get("parts", [])):
        try:
            geom = GeometrySpec(item.get("geometry", "cube"), float(item.get("size", 20.0)), float(item.get("fill", 0.75)))
            entries.append(PlanEntry(int(item["part"]), geom, ProcessParams.from_dict(item)))
        except (KeyError, ValueError, TypeError) as exc:
            raise PlanError(f"{path}: parts[{i}]: {exc}") from exc
    if not entries:
        raise PlanError(f"{path}: plan has no parts")
    return entries


def plan_to_json(plan: list[PlanEntry]) -> dict:
    return {
        "parts": [
            {"geometry": e.geometry.kind, "size": e.geometry.size, "fill": e.geometry.fill, **e.params.to_dict()}
            for e in plan
        ]
    }


def _sampling_mask(masks: list[np.ndarray], idx: int, radius: int) -> np.ndarray:
    # material in this layer and both neighbours, eroded so a pore blob never touches air
    m = masks[idx].astype(bool)
    if idx > 0:
        m &= masks[idx - 1].astype(bool)
    if idx + 1 < len(masks):
        m &= masks[idx + 1].astype(bool)
    if radius + 1 > 0:
        m = ndimage.binary_erosion(m, structure=np.ones((3, 3), bool), iterations=radius + 1)
    return m


def build_volume(
    masks: list[np.ndarray],
    pore_sets: list[PoreSet],
    voxels_per_layer: int,
    radius: int,
    pad: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Voxel grid (nz, ny, nx) in build orientation with void cubes at the pores."""
    n_layers = len(masks)
    h, w = masks[0].shape
    k = voxels_per_layer
    vol = np.full((n_layers * k, h + 2 * pad, w + 2 * pad), AIR_INTENSITY)
    for i, m in enumerate(masks):
        vol[i * k:(i + 1) * k, pad:pad + h, pad:pad + w] = np.where(m > 0, MATERIAL_INTENSITY, AIR_INTENSITY)
    vol += VOLUME_NOISE * rng.standard_normal(vol.shape)
    for i, ps in enumerate(pore_sets):
        zc = i * k + k // 2
        for p in ps.pores:
            x, y = int(round(p.x)) + pad, int(round(p.y)) + pad
            vol[zc - radius:zc + radius + 1, y - radius:y + radius + 1, x - radius:x + radius + 1] = PORE_INTENSITY
    return np.clip(vol, 0.0, None)


def build_synthetic_dataset(
    plan: list[PlanEntry],
    n_layers: int,
    image_size: tuple[int, int] = (64, 64),
    seed: int = 0,
    pore_model: PoreModel | None = None,
    render: RenderConfig = RenderConfig(),
    voxels_per_layer: int = 3,
    pad: int = 4,
    stored_rotation: Rotation | None = None,
) -> SyntheticBuild:
    """Generate HR/OT images, seeded pores and a CT-like volume for each planned part.

    PP labels are not produced here; they come from running pore detection
    on the volumes and labelling the recovered positions.
    """
    parts = [e.part for e in plan]
    if len(set(parts)) != len(parts):
        dup = sorted({p for p in parts if parts.count(p) > 1})
        raise PlanError(f"duplicate part indices in plan: {dup}")
    model = pore_model or PoreModel(seed=seed)
    if model.seed != seed:
        model = PoreModel(model.base_rate, model.energy_sensitivity, model.nominal_energy, seed, model.radius)
    if voxels_per_layer < 2 * model.radius + 1:
        raise ValueError("voxels_per_layer must fit a whole pore blob")
    stored = stored_rotation if stored_rotation is not None else Rotation.about("x", 90)
    width, height = image_size

    out = {}
    for entry in sorted(plan, key=lambda e: e.part):
        masks = [cross_section(entry.geometry, l, width, height, n_layers).data for l in range(1, n_layers + 1)]
        pb_hr, pb_ot, pb_seed = {}, {}, {}
        for i in range(n_layers):
            l = i + 1
            samp = LayerImage("CT", _sampling_mask(masks, i, model.radius).astype(np.float64))
            ps = seed_pores(samp, entry.params, model, l)
            hr, ot = render_modalities(LayerImage("CT", masks[i]), ps, entry.params, seed, render)
            pb_hr[l], pb_ot[l], pb_seed[l] = hr, ot, ps
        vol_rng = keyed_rng(seed, entry.part, 0, STREAM_VOLUME)
        grid = build_volume(masks, [pb_seed[l] for l in range(1, n_layers + 1)], voxels_per_layer, model.radius, pad, vol_rng)
        t = entry.params.layer_thickness
        upright = VoxelVolume(grid.astype(np.float32), voxel_size=t / voxels_per_layer)
        scanner = rotate_to_build_axis(upright, stored.inverse())
        frame = CropFrame.from_box(pad, pad, pad + width, pad + height)
        out[entry.part] = PartBuild(entry, scanner, stored, frame, t, pb_hr, pb_ot, pb_seed)
    return SyntheticBuild(n_layers, width, height, seed, out)


def write_build(build: SyntheticBuild, out_dir) -> Path:
    """Write images, volumes and the manifest; returns the manifest path."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    params, geometry, volumes, triplets = {}, {}, {}, []
    for p, pb in sorted(build.parts.items()):
        params[str(p)] = {**pb.entry.params.to_dict(), "energy_density": energy_density(pb.entry.params)}
        geometry[str(p)] = {"kind": pb.entry.geometry.kind, "size": pb.entry.geometry.size, "fill": pb.entry.geometry.fill}
        vrel = f"volumes/part{p:02d}.pkt"
        (root / "volumes").mkdir(exist_ok=True)
        save_tensor(root / vrel, pb.volume.data)
        volumes[str(p)] = {
            "path": vrel,
            "voxel_size": pb.volume.voxel_size,
            "layer_thickness": pb.layer_thickness,
            "rotation": [list(r) for r in pb.rotation.matrix],
            "reference_points": [list(pt) for pt in pb.frame.reference_points],
        }
        for l in sorted(pb.hr):
            triplets.append({
                "part": p,
                "layer": l,
                "hr": save_layer_image(pb.hr[l], root, f"hr/p{p:02d}_l{l:04d}.pkt"),
                "ot": save_layer_image(pb.ot[l], root, f"ot/p{p:02d}_l{l:04d}.pkt"),
                "pp": None,
                "pores": None,
                "seeded_pores": pore_set_to_json(pb.seeded[l]),
            })
    manifest = {
        "parts": max(build.parts) if build.parts else 0,
        "layers_per_part": build.n_layers,
        "image_size": [build.width, build.height],
        "seed": build.seed,
        "params": params,
        "geometry": geometry,
        "volumes": volumes,
        "triplets": triplets,
    }
    path = root / "manifest.json"
    write_manifest(manifest, path)
    return path
