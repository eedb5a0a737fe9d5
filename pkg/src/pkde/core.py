"""Domain types, dataset assembly, splits, and manifest persistence."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .tensorio import load_tensor, save_pgm, save_tensor

MODALITIES = ("HR", "OT", "CT", "PP")
MANIFEST_FORMAT = "pkde-manifest/1"


class InvalidParameterError(ValueError):
    pass


class AssemblyError(ValueError):
    pass


class SplitError(ValueError):
    pass


def round_half_up(x: float) -> int:
    """Round half away from zero (Python's round() is banker's rounding)."""
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass(frozen=True)
class PorePosition:
    x: float
    y: float


@dataclass(frozen=True)
class PoreSet:
    pores: tuple[PorePosition, ...]
    layer: int
    part: int

    def __post_init__(self):
        object.__setattr__(self, "pores", tuple(self.pores))

    @property
    def count(self) -> int:
        return len(self.pores)

    def as_array(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self.pores], dtype=np.float64).reshape(-1, 2)

    @classmethod
    def from_xy(cls, xy, layer: int, part: int) -> "PoreSet":
        return cls(tuple(PorePosition(float(x), float(y)) for x, y in xy), layer, part)


@dataclass(frozen=True, eq=False)
class LayerImage:
    """Single-channel raster; ``data`` has shape (height, width)."""

    modality: str
    data: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError("layer images are 2-D")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{self.modality} image contains non-finite values")
        if self.modality == "PP" and arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("PP image values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ProcessParams:
    """Process parameters in build-plan units: W, mm/s, um, um."""

    part: int
    laser_power: float
    scan_speed: float
    hatch_distance: float
    layer_thickness: float

    def __post_init__(self):
        for name in ("laser_power", "scan_speed", "hatch_distance", "layer_thickness"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise InvalidParameterError(f"{name} must be finite and > 0, got {v!r}")

    @property
    def energy_density(self) -> float:
        return energy_density(self)

    def to_dict(self) -> dict:
        return {
            "part": self.part,
            "laser_power": self.laser_power,
            "scan_speed": self.scan_speed,
            "hatch_distance": self.hatch_distance,
            "layer_thickness": self.layer_thickness,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProcessParams":
        return cls(
            part=int(d["part"]),
            laser_power=float(d["laser_power"]),
            scan_speed=float(d["scan_speed"]),
            hatch_distance=float(d["hatch_distance"]),
            layer_thickness=float(d["layer_thickness"]),
        )


def energy_density(params: ProcessParams) -> float:
    """Volumetric energy density P / (v h t) in J/m^3."""
    p = params.laser_power
    v = params.scan_speed * 1e-3
    h = params.hatch_distance * 1e-6
    t = params.layer_thickness * 1e-6
    for v_ in (p, v, h, t):
        if not (math.isfinite(v_) and v_ > 0):
            raise InvalidParameterError("process parameters must be finite and positive")
    e = p / (v * h * t)
    if not math.isfinite(e):
        raise InvalidParameterError("energy density overflowed")
    return e


# Reference build plan, transcribed verbatim (p=1..3 share one row).
TABLE1_ROWS = {
    1: (370, 1300, 190, 30),
    2: (370, 1300, 190, 30),
    3: (370, 1300, 190, 30),
    4: (340, 1300, 210, 30),
    5: (370, 1300, 190, 30),
    6: (340, 1000, 190, 30),
    7: (370, 900, 210, 30),
    8: (370, 700, 190, 30),
    9: (370, 700, 210, 30),
    10: (390, 700, 160, 30),
}
TABLE1_PRINTED_EV = {
    1: 49.93e9, 2: 49.93e9, 3: 49.93e9, 4: 41.51e9, 5: 49.93e9,
    6: 59.64e9, 7: 65.25e9, 8: 72.12e9, 9: 83.90e9, 10: 123.80e9,
}
TABLE1_GEOMETRY = {p: ("complex" if p <= 3 else "cube") for p in TABLE1_ROWS}


def table1_params() -> dict[int, ProcessParams]:
    return {p: ProcessParams(p, *map(float, row)) for p, row in TABLE1_ROWS.items()}


@dataclass(frozen=True, eq=False)
class LayerTriplet:
    part: int
    layer: int
    hr: LayerImage
    ot: LayerImage
    pp: LayerImage

    @property
    def key(self) -> tuple[int, int]:
        return (self.part, self.layer)

    @property
    def shape(self) -> tuple[int, int]:
        return self.hr.shape


@dataclass(frozen=True, eq=False)
class Dataset:
    parts: int
    layers_per_part: int
    triplets: tuple[LayerTriplet, ...]
    params: Mapping[int, ProcessParams] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.triplets)

    def __len__(self):
        return len(self.triplets)

    @property
    def keys(self) -> list[tuple[int, int]]:
        return [t.key for t in self.triplets]

    def by_key(self) -> dict[tuple[int, int], LayerTriplet]:
        return {t.key: t for t in self.triplets}

    def missing(self) -> list[tuple[int, int]]:
        have = set(self.keys)
        return [
            (p, l)
            for p in range(1, self.parts + 1)
            for l in range(1, self.layers_per_part + 1)
            if (p, l) not in have
        ]


def assemble_dataset(
    triplet_sources: Iterable,
    params: Mapping[int, ProcessParams],
    parts: int | None = None,
    layers_per_part: int | None = None,
) -> Dataset:
    """Validate (part, layer, hr, ot, pp) tuples and build a sorted Dataset.

    ``parts`` and ``layers_per_part`` default to the maxima seen in the sources.
    """
    seen: dict[tuple[int, int], LayerTriplet] = {}
    for part, layer, hr, ot, pp in triplet_sources:
        key = (int(part), int(layer))
        if key in seen:
            raise AssemblyError(f"duplicate triplet key (p={key[0]}, l={key[1]})")
        mods = (hr.modality, ot.modality, pp.modality)
        if mods != ("HR", "OT", "PP"):
            raise AssemblyError(f"wrong modalities {mods} at (p={key[0]}, l={key[1]})")
        if not (hr.shape == ot.shape == pp.shape):
            raise AssemblyError(
                f"dimension mismatch at (p={key[0]}, l={key[1]}): "
                f"HR {hr.shape}, OT {ot.shape}, PP {pp.shape}"
            )
        seen[key] = LayerTriplet(key[0], key[1], hr, ot, pp)

    n_parts = parts if parts is not None else max((k[0] for k in seen), default=0)
    n_layers = layers_per_part if layers_per_part is not None else max((k[1] for k in seen), default=0)
    for p, l in seen:
        if not (1 <= p <= n_parts and 1 <= l <= n_layers):
            raise AssemblyError(f"key (p={p}, l={l}) outside 1..{n_parts} x 1..{n_layers}")
    triplets = tuple(seen[k] for k in sorted(seen))
    return Dataset(n_parts, n_layers, triplets, dict(params))


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset
    validation: frozenset
    test: frozenset
    seed: int = 0

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train": [list(k) for k in sorted(self.train)],
            "validation": [list(k) for k in sorted(self.validation)],
            "test": [list(k) for k in sorted(self.test)],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitAssignment":
        def keys(name):
            return frozenset((int(p), int(l)) for p, l in d[name])

        return cls(keys("train"), keys("validation"), keys("test"), int(d.get("seed", 0)))


def _apportion(total: int, weights: list[int], frac: float) -> list[int]:
    """Largest-remainder allocation of ``total`` across strata sized ``weights``."""
    quotas = [w * frac for w in weights]
    alloc = [int(math.floor(q)) for q in quotas]
    short = total - sum(alloc)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order:
        if short <= 0:
            break
        if alloc[i] < weights[i]:
            alloc[i] += 1
            short -= 1
    return alloc


def split_dataset(
    d: Dataset | Iterable[tuple[int, int]],
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> SplitAssignment:
    """Seeded split, stratified by part.

    Validation and test sizes are ``round(frac * T)`` (half away from zero);
    train takes the remainder.
    """
    keys = sorted(d.keys if isinstance(d, Dataset) else (tuple(k) for k in d))
    if not keys:
        raise SplitError("cannot split an empty dataset")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    _, f_val, f_test = fractions
    n = len(keys)
    n_test = round_half_up(f_test * n)
    n_val = round_half_up(f_val * n)
    if n_test + n_val > n:
        n_val = n - n_test

    by_part: dict[int, list] = {}
    for k in keys:
        by_part.setdefault(k[0], []).append(k)
    parts = sorted(by_part)
    sizes = [len(by_part[p]) for p in parts]

    test_alloc = _apportion(n_test, sizes, f_test)
    rest = [s - t for s, t in zip(sizes, test_alloc)]
    # val quota is proportional to the full part size, capped by what test left over
    val_quota = [s * f_val for s in sizes]
    val_alloc = [min(int(math.floor(q)), r) for q, r in zip(val_quota, rest)]
    short = n_val - sum(val_alloc)
    order = sorted(range(len(parts)), key=lambda i: (-(val_quota[i] - val_alloc[i]), i))
    while short > 0:
        progressed = False
        for i in order:
            if short <= 0:
                break
            if val_alloc[i] < rest[i]:
                val_alloc[i] += 1
                short -= 1
                progressed = True
        if not progressed:
            break

    train, val, test = set(), set(), set()
    for i, p in enumerate(parts):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, p, 0x5EED])))
        members = by_part[p]
        perm = rng.permutation(len(members))
        shuffled = [members[j] for j in perm]
        nt, nv = test_alloc[i], val_alloc[i]
        test.update(shuffled[:nt])
        val.update(shuffled[nt:nt + nv])
        train.update(shuffled[nt + nv:])
    return SplitAssignment(frozenset(train), frozenset(val), frozenset(test), seed)


# -- manifest persistence ----------------------------------------------------


def dump_json(obj, path) -> None:
    """Deterministic JSON writer used for every artifact."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    path = Path(path)
    m = json.loads(path.read_text(encoding="utf-8"))
    if m.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    return m


def write_manifest(manifest: dict, path) -> None:
    m = dict(manifest)
    m["format"] = MANIFEST_FORMAT
    trips = sorted(m.get("triplets", []), key=lambda t: (t["part"], t["layer"]))
    m["triplets"] = trips
    m["triplet_count"] = len(trips)
    have = {(t["part"], t["layer"]) for t in trips}
    m["missing"] = [
        [p, l]
        for p in range(1, m["parts"] + 1)
        for l in range(1, m["layers_per_part"] + 1)
        if (p, l) not in have
    ]
    dump_json(m, path)


def pore_set_to_json(ps: PoreSet) -> list:
    return [[p.x, p.y] for p in ps.pores]


def save_layer_image(img: LayerImage, root, rel: str, preview: bool = False) -> str:
    root = Path(root)
    (root / rel).parent.mkdir(parents=True, exist_ok=True)
    save_tensor(root / rel, img.data)
    if preview:
        save_pgm((root / rel).with_suffix(".pgm"), img.data)
    return rel


def load_layer_image(root, rel: str, modality: str) -> LayerImage:
    return LayerImage(modality, load_tensor(Path(root) / rel))


def load_dataset(manifest_path) -> Dataset:
    """Build a Dataset from a labelled manifest (every triplet needs a PP path)."""
    manifest_path = Path(manifest_path)
    m = read_manifest(manifest_path)
    root = manifest_path.parent
    params = {int(k): ProcessParams.from_dict(v) for k, v in m["params"].items()}
    sources = []
    for t in m["triplets"]:
        if not t.get("pp"):
            raise AssemblyError(f"triplet (p={t['part']}, l={t['layer']}) has no PP label; run `label` first")
        sources.append((
            t["part"], t["layer"],
            load_layer_image(root, t["hr"], "HR"),
            load_layer_image(root, t["ot"], "OT"),
            load_layer_image(root, t["pp"], "PP"),
        ))
    return assemble_dataset(sources, params, m["parts"], m["layers_per_part"])
