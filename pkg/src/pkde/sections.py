"""Geometry-feature sections of the complex part.

At the reference build height of 712 layers the sections end at layers
245, 430, 487 and 712. For other heights each end is scaled by
``n_layers / 712`` and rounded half up; every section keeps at least one
layer.
"""

from __future__ import annotations

import enum
import warnings

from .core import round_half_up

REFERENCE_LAYERS = 712
_REFERENCE_ENDS = (245, 430, 487, 712)


class GeometrySection(enum.Enum):
    PreOverhang = "pre_overhang"
    Overhang = "overhang"
    PreRound = "pre_round"
    Round = "round"


SECTION_ORDER = tuple(GeometrySection)


class SectionScalingWarning(UserWarning):
    pass


def section_ranges(n_layers: int = REFERENCE_LAYERS, warn: bool = True):
    """Inclusive (first, last) layer ranges per section for a build of ``n_layers``."""
    if n_layers < len(_REFERENCE_ENDS):
        raise ValueError(f"need at least {len(_REFERENCE_ENDS)} layers for section scaling")
    ends = []
    exact = True
    for i, e in enumerate(_REFERENCE_ENDS):
        num = e * n_layers
        if num % REFERENCE_LAYERS:
            exact = False
        end = round_half_up(num / REFERENCE_LAYERS)
        lo = (ends[-1] + 1) if ends else 1
        remaining = len(_REFERENCE_ENDS) - i - 1
        end = min(max(end, lo), n_layers - remaining)
        ends.append(end)
    ranges = {}
    start = 1
    for sec, end in zip(SECTION_ORDER, ends):
        ranges[sec] = (start, end)
        start = end + 1
    if warn and not exact:
        desc = ", ".join(f"{s.value}={a}..{b}" for s, (a, b) in ranges.items())
        warnings.warn(
            f"{n_layers} layers do not scale the section ends exactly; using {desc}",
            SectionScalingWarning,
            stacklevel=2,
        )
    return ranges


def section_of_layer(layer: int, n_layers: int = REFERENCE_LAYERS) -> GeometrySection:
    if not 1 <= layer <= n_layers:
        raise ValueError(f"layer {layer} outside [1, {n_layers}]")
    for sec, (lo, hi) in section_ranges(n_layers, warn=False).items():
        if lo <= layer <= hi:
            return sec
    raise AssertionError("section ranges do not cover the build")  # unreachable
