"""Per-layer scoring, box-plot statistics, failure flags and report files.

Box plots use the linear-interpolation ("type 7") quartile rule, i.e.
``numpy.percentile(..., method="linear")``. Whiskers sit at the most extreme
observations inside ``[q1 - 1.5 IQR, q3 + 1.5 IQR]``; everything beyond them
is an outlier.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import TABLE1_GEOMETRY, energy_density
from .sections import REFERENCE_LAYERS, SECTION_ORDER, GeometrySection, section_of_layer

__all__ = [
    "BoxStats",
    "FailureFlag",
    "FailureMode",
    "GROUP_KEYS",
    "LayerScore",
    "ScoreKeyError",
    "box_stats",
    "emit_report",
    "flag_failures",
    "group_stats",
    "score_layers",
    "section_of_layer",
]

GROUP_KEYS = ("part", "section", "laser_power", "scan_speed", "hatch_distance", "energy_density")
PARAM_KEYS = GROUP_KEYS[2:]
CUBE_PARTS = tuple(range(4, 11))
WHISKER = 1.5


class ScoreKeyError(KeyError):
    def __init__(self, missing_pred, missing_label):
        self.missing_pred = sorted(missing_pred)
        self.missing_label = sorted(missing_label)
        parts = []
        if self.missing_pred:
            parts.append(f"no prediction for {self.missing_pred}")
        if self.missing_label:
            parts.append(f"no label for {self.missing_label}")
        super().__init__("; ".join(parts))

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class LayerScore:
    part: int
    layer: int
    mae: float
    section: GeometrySection | None = None

    def __post_init__(self):
        if not (self.mae >= 0):
            raise ValueError(f"mae must be >= 0, got {self.mae}")

    @property
    def key(self):
        return (self.part, self.layer)


def _as_array(x) -> np.ndarray:
    if hasattr(x, "image"):  # nn Prediction
        x = x.image
    if hasattr(x, "pp"):  # LayerTriplet
        x = x.pp
    if hasattr(x, "data"):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def _keyed(items) -> dict:
    if isinstance(items, dict):
        return dict(items)
    return {it.key: it for it in items}


def score_layers(predictions, labels, complex_parts=None, n_layers: int = REFERENCE_LAYERS) -> list[LayerScore]:
    """Per-layer MAE between predicted and label PP images.

    ``predictions`` and ``labels`` are either mappings ``(part, layer) ->
    image`` or iterables of objects with a ``key`` (predictions, triplets).
    Layers of ``complex_parts`` (default: the complex parts of the reference plan) get a
    geometry section.
    """
    pred, lab = _keyed(predictions), _keyed(labels)
    if pred.keys() != lab.keys():
        raise ScoreKeyError(lab.keys() - pred.keys(), pred.keys() - lab.keys())
    if complex_parts is None:
        complex_parts = {p for p, g in TABLE1_GEOMETRY.items() if g == "complex"}
    out = []
    for key in sorted(pred):
        a, b = _as_array(pred[key]), _as_array(lab[key])
        if a.shape != b.shape:
            raise ValueError(f"part {key[0]} layer {key[1]}: prediction {a.shape} vs label {b.shape}")
        mae = float(np.abs(a - b).mean())
        sec = section_of_layer(key[1], n_layers) if key[0] in complex_parts else None
        out.append(LayerScore(key[0], key[1], mae, sec))
    return out


@dataclass(frozen=True)
class BoxStats:
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple = ()
    count: int = 0

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "whisker_low": self.whisker_low,
            "whisker_high": self.whisker_high,
            "outliers": [_score_dict(s) for s in self.outliers],
        }


def box_stats(scores) -> BoxStats:
    scores = list(scores)
    if not scores:
        raise ValueError("box statistics need at least one score")
    v = np.array([s.mae for s in scores], dtype=np.float64)
    q1, med, q3 = (float(q) for q in np.percentile(v, [25, 50, 75], method="linear"))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - WHISKER * iqr, q3 + WHISKER * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    # the quartiles always lie inside the fences, so ``inside`` is never empty
    wl, wh = float(inside.min()), float(inside.max())
    outliers = tuple(sorted((s for s in scores if s.mae < wl or s.mae > wh), key=lambda s: (s.mae, s.part, s.layer)))
    return BoxStats(med, q1, q3, wl, wh, outliers, len(scores))


def _group_value(score: LayerScore, group_by: str, params):
    if group_by == "part":
        return score.part
    if group_by == "section":
        return score.section
    p = params.get(score.part)
    if p is None:
        return None
    if group_by == "energy_density":
        return energy_density(p)
    return getattr(p, group_by)


def _sort_key(k):
    if isinstance(k, GeometrySection):
        return SECTION_ORDER.index(k)
    return k


def group_stats(scores, group_by: str, params=None, parts=None) -> dict:
    """BoxStats per distinct value of ``group_by``, ordered by key.

    Parameter groupings only use ``parts`` (default: the cube parts 4..10)
    and need ``params``, a mapping part -> ProcessParams. Section grouping
    uses the scores that carry a section.
    """
    if group_by not in GROUP_KEYS:
        raise ValueError(f"group_by must be one of {GROUP_KEYS}")
    if group_by in PARAM_KEYS:
        if params is None:
            raise ValueError(f"grouping by {group_by} needs process parameters")
        allowed = set(CUBE_PARTS if parts is None else parts)
    else:
        allowed = None if parts is None else set(parts)
    groups: dict = {}
    for s in scores:
        if allowed is not None and s.part not in allowed:
            continue
        k = _group_value(s, group_by, params or {})
        if k is None:
            continue
        groups.setdefault(k, []).append(s)
    if not groups:
        raise ValueError(f"no scores to group by {group_by}")
    return {k: box_stats(groups[k]) for k in sorted(groups, key=_sort_key)}


class FailureMode(enum.Enum):
    NoPrediction = "no_prediction"
    Misaligned = "misaligned"


@dataclass(frozen=True)
class FailureFlag:
    part: int
    layer: int
    mode: FailureMode


PRED_EMPTY_MAX = 0.1
LABEL_PRESENT_MAX = 0.5


def flag_failures(scores, threshold: float = 0.05, predictions=None, labels=None) -> list[FailureFlag]:
    """Flag layers with ``mae > threshold`` and classify each failure.

    NoPrediction: the prediction's max is below 0.1 while the label's max is
    at least 0.5. Anything else is Misaligned. Without images every flag is
    Misaligned.
    """
    pred = _keyed(predictions) if predictions is not None else {}
    lab = _keyed(labels) if labels is not None else {}
    out = []
    for s in sorted(scores, key=lambda s: s.key):
        if not s.mae > threshold:
            continue
        mode = FailureMode.Misaligned
        if s.key in pred and s.key in lab:
            if _as_array(pred[s.key]).max() < PRED_EMPTY_MAX and _as_array(lab[s.key]).max() >= LABEL_PRESENT_MAX:
                mode = FailureMode.NoPrediction
        out.append(FailureFlag(s.part, s.layer, mode))
    return out


# -- report files ---------------------------------------------------------------

CSV_COLUMNS = ("part", "layer", "mae", "section") + PARAM_KEYS


def _score_dict(s: LayerScore) -> dict:
    return {"part": s.part, "layer": s.layer, "mae": s.mae, "section": s.section.value if s.section else None}


def _key_str(k) -> str:
    if isinstance(k, GeometrySection):
        return k.value
    return repr(float(k)) if isinstance(k, float) else str(k)


def _num(x) -> str:
    return repr(float(x))


def scores_to_csv(scores, params=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    params = params or {}
    for s in sorted(scores, key=lambda s: s.key):
        p = params.get(s.part)
        extra = [""] * len(PARAM_KEYS)
        if p is not None:
            extra = [_num(p.laser_power), _num(p.scan_speed), _num(p.hatch_distance), _num(energy_density(p))]
        w.writerow([s.part, s.layer, _num(s.mae), s.section.value if s.section else ""] + extra)
    return buf.getvalue()


def read_scores_csv(path) -> list[LayerScore]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        LayerScore(int(r["part"]), int(r["layer"]), float(r["mae"]), GeometrySection(r["section"]) if r["section"] else None)
        for r in rows
    ]


def report_dict(scores, stats, flags) -> dict:
    """``stats`` maps a grouping name to the result of :func:`group_stats`."""
    return {
        "scores": [_score_dict(s) for s in sorted(scores, key=lambda s: s.key)],
        "stats": {g: {_key_str(k): b.to_dict() for k, b in m.items()} for g, m in (stats or {}).items()},
        "flags": [{"part": f.part, "layer": f.layer, "mode": f.mode.value} for f in flags],
        "summary": _summary(scores),
    }


def _summary(scores) -> dict:
    v = [s.mae for s in scores]
    if not v:
        return {"count": 0, "mean_mae": None, "median_mae": None}
    return {"count": len(v), "mean_mae": math.fsum(v) / len(v), "median_mae": float(np.median(v))}


def emit_report(scores, stats, flags, out_dir, formats=("json", "csv"), params=None, stem: str = "report") -> list[Path]:
    """Write ``<stem>.json`` and/or ``<stem>.csv``; byte-identical for equal inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "json":
            path = out / f"{stem}.json"
            path.write_text(json.dumps(report_dict(scores, stats, flags), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        elif fmt == "csv":
            path = out / f"{stem}.csv"
            path.write_text(scores_to_csv(scores, params), encoding="utf-8")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(path)
    return written
