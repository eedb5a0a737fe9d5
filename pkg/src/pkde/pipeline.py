"""Labelling pipeline: volume -> pores -> per-layer pore sets -> PP images."""

from __future__ import annotations

import logging
import os
from pathlib import Path

from .core import (
    PoreSet,
    assemble_dataset,
    dump_json,
    pore_set_to_json,
    read_manifest,
    save_layer_image,
    write_manifest,
)
from .labeler import KdeConfig, kde_label
from .tensorio import load_tensor
from .xct import CropFrame, Rotation, VoxelVolume, detect_pores, pores_to_layers, rotate_to_build_axis

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 11500.0
DEFAULT_MIN_DIAMETER = 10.0  # micrometres


class ManifestError(ValueError):
    pass


def layer_pores_from_volume(
    volume: VoxelVolume,
    rotation: Rotation,
    frame: CropFrame,
    layer_thickness: float,
    part: int,
    threshold: float = DEFAULT_THRESHOLD,
    min_diameter: float = DEFAULT_MIN_DIAMETER,
):
    """Rotate to the build axis, detect pores, and bin them per layer.

    Returns ``(layers, detected, dropped)``.
    """
    upright = rotate_to_build_axis(volume, rotation)
    detected = detect_pores(upright, threshold, min_diameter, exclude_lateral_border=True)
    layers, dropped = pores_to_layers(detected, upright.voxel_size, layer_thickness, frame, part)
    return layers, detected, dropped


def label_build(build, cfg: KdeConfig = KdeConfig(), threshold=DEFAULT_THRESHOLD, min_diameter=DEFAULT_MIN_DIAMETER):
    """Label an in-memory synthetic build; returns ``(Dataset, {part: {layer: PoreSet}})``."""
    sources, pore_sets, params = [], {}, {}
    for p, pb in sorted(build.parts.items()):
        layers, _, dropped = layer_pores_from_volume(
            pb.volume, pb.rotation, pb.frame, pb.layer_thickness, p, threshold, min_diameter
        )
        params[p] = pb.entry.params
        pore_sets[p] = {}
        for l in sorted(pb.hr):
            ps = layers.get(l, PoreSet((), l, p))
            pore_sets[p][l] = ps
            pp = kde_label(ps, build.width, build.height, cfg)
            sources.append((p, l, pb.hr[l], pb.ot[l], pp))
    ds = assemble_dataset(sources, params, max(build.parts), build.n_layers)
    return ds, pore_sets


def label_manifest(
    manifest_path,
    out_dir=None,
    cfg: KdeConfig = KdeConfig(),
    threshold: float = DEFAULT_THRESHOLD,
    min_diameter: float = DEFAULT_MIN_DIAMETER,
) -> tuple[Path, dict]:
    """Add PP images and detected pore sets to a manifest.

    Writes ``pp/*.pkt`` (+ ``.pgm`` previews), ``pores/partNN.json`` and an
    updated ``manifest.json`` under ``out_dir`` (default: the manifest's
    directory). Returns the new manifest path and per-part dropped counts.
    """
    manifest_path = Path(manifest_path)
    src_root = manifest_path.parent
    out = Path(out_dir) if out_dir is not None else src_root
    out.mkdir(parents=True, exist_ok=True)
    m = read_manifest(manifest_path)
    volumes = m.get("volumes") or {}
    w, h = m["image_size"]

    def rebase(rel):
        return os.path.relpath(src_root / rel, out).replace(os.sep, "/")

    dropped_counts = {}
    per_part = {}
    for t in m["triplets"]:
        per_part.setdefault(t["part"], []).append(t)
    new_triplets = []
    for p in sorted(per_part):
        entry = volumes.get(str(p))
        if entry is None:
            raise ManifestError(f"manifest has no volume for part {p}")
        vpath = src_root / entry["path"]
        if not vpath.exists():
            raise ManifestError(f"volume file missing: {vpath}")
        vol = VoxelVolume(load_tensor(vpath), float(entry["voxel_size"]))
        rot = Rotation(tuple(tuple(r) for r in entry["rotation"]))
        frame = CropFrame(tuple(tuple(pt) for pt in entry["reference_points"]))
        layers, detected, dropped = layer_pores_from_volume(
            vol, rot, frame, float(entry["layer_thickness"]), p, threshold, min_diameter
        )
        dropped_counts[p] = dropped
        log.info("part %d: %d pores detected, %d dropped outside crop frame", p, len(detected), dropped)
        (out / "pores").mkdir(exist_ok=True)
        dump_json([d.to_dict() for d in detected], out / "pores" / f"part{p:02d}.json")
        for t in sorted(per_part[p], key=lambda t: t["layer"]):
            l = t["layer"]
            ps = layers.get(l, PoreSet((), l, p))
            pp = kde_label(ps, w, h, cfg)
            rel = save_layer_image(pp, out, f"pp/p{p:02d}_l{l:04d}.pkt", preview=True)
            nt = dict(t)
            if out != src_root:
                nt["hr"], nt["ot"] = rebase(t["hr"]), rebase(t["ot"])
            nt["pp"] = rel
            nt["pores"] = pore_set_to_json(ps)
            new_triplets.append(nt)
    if out != src_root:
        m["volumes"] = {k: {**v, "path": rebase(v["path"])} for k, v in volumes.items()}
    m["triplets"] = new_triplets
    m["labels"] = {
        "bandwidth": cfg.bandwidth,
        "truncation_radius": cfg.radius,
        "threshold": threshold,
        "min_diameter": min_diameter,
        "dropped": {str(k): v for k, v in sorted(dropped_counts.items())},
    }
    new_path = out / "manifest.json"
    write_manifest(m, new_path)
    return new_path, dropped_counts
