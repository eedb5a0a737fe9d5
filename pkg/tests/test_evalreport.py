import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pkde.core import PoreSet, table1_params
from pkde.evalreport import (
    FailureMode,
    LayerScore,
    ScoreKeyError,
    box_stats,
    emit_report,
    flag_failures,
    group_stats,
    read_scores_csv,
    score_layers,
)
from pkde.labeler import KdeConfig, kde_label
from pkde.sections import GeometrySection

GOLDEN = Path(__file__).parent / "golden"


def scores_of(values, part=4):
    return [LayerScore(part, i + 1, float(v)) for i, v in enumerate(values)]


# Hand-computed with the linear (type 7) rule: position (n - 1) * p in the sorted list.
FIXTURES = [
    # 1..9: q1 at position 2 -> 3, q3 at position 6 -> 7; fences -3 and 13
    ([1, 2, 3, 4, 5, 6, 7, 8, 9], dict(median=5, q1=3, q3=7, whisker_low=1, whisker_high=9), []),
    # q1 = 2, q3 = 4, upper fence 7 leaves 100 outside
    ([4, 100, 2, 1, 3], dict(median=3, q1=2, q3=4, whisker_low=1, whisker_high=4), [100]),
    # sorted 0.1, 10, 10.5, 11, 11, 11.5, 12: q1 at 1.5 -> 10.25, q3 at 4.5 -> 11.25; lower fence 8.75
    ([11, 12, 0.1, 10.5, 11, 10, 11.5], dict(median=11, q1=10.25, q3=11.25, whisker_low=10, whisker_high=12), [0.1]),
]


@pytest.mark.parametrize("values,expected,outliers", FIXTURES)
def test_box_stats_hand_fixtures(values, expected, outliers):
    b = box_stats(scores_of(values))
    for k, v in expected.items():
        assert getattr(b, k) == pytest.approx(v, abs=1e-12), k
    assert [s.mae for s in b.outliers] == outliers
    assert b.count == len(values)


def test_box_stats_eight_values():
    b = box_stats(scores_of([0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.5]))
    assert (b.q1, b.median, b.q3) == pytest.approx((0.0175, 0.035, 0.0525))
    assert (b.whisker_low, b.whisker_high) == (0.0, 0.06)
    assert [s.mae for s in b.outliers] == [0.5]


def test_box_stats_degenerate_and_empty():
    b = box_stats(scores_of([0.2] * 6))
    assert b.median == b.q1 == b.q3 == b.whisker_low == b.whisker_high == 0.2
    assert b.outliers == ()
    with pytest.raises(ValueError):
        box_stats([])


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=60))
def test_outlier_partition_property(values):
    scores = scores_of(values)
    b = box_stats(scores)
    inliers = [s for s in scores if b.whisker_low <= s.mae <= b.whisker_high]
    assert len(inliers) + len(b.outliers) == len(scores)
    assert all(s.mae < b.whisker_low or s.mae > b.whisker_high for s in b.outliers)
    assert b.q1 <= b.median <= b.q3
    iqr = b.q3 - b.q1
    assert b.whisker_low >= b.q1 - 1.5 * iqr and b.whisker_high <= b.q3 + 1.5 * iqr
    # whiskers are data points
    assert b.whisker_low in values and b.whisker_high in values


def test_single_group_equals_full_box():
    scores = scores_of(np.random.default_rng(0).random(30))
    assert group_stats(scores, "part") == {4: box_stats(scores)}


def test_group_by_power_keys():
    P = table1_params()
    scores = [LayerScore(p, 1, 0.01 * p) for p in range(1, 11)]
    g = group_stats(scores, "laser_power", P)
    assert list(g) == [340.0, 370.0, 390.0]
    assert sum(b.count for b in g.values()) == 7  # cube parts only
    e = group_stats(scores, "energy_density", P)
    assert list(e) == sorted(e)
    with pytest.raises(ValueError, match="parameters"):
        group_stats(scores, "scan_speed")
    with pytest.raises(ValueError):
        group_stats(scores, "colour", P)


def test_group_by_section_order():
    scores = [LayerScore(1, l, 0.1, sec) for l, sec in [(500, GeometrySection.Round), (1, GeometrySection.PreOverhang),
                                                         (300, GeometrySection.Overhang), (450, GeometrySection.PreRound)]]
    scores.append(LayerScore(5, 1, 0.3))
    g = group_stats(scores, "section")
    assert list(g) == [GeometrySection.PreOverhang, GeometrySection.Overhang, GeometrySection.PreRound, GeometrySection.Round]
    with pytest.raises(ValueError, match="no scores"):
        group_stats([LayerScore(5, 1, 0.3)], "section")


def test_score_layers_examples():
    rng = np.random.default_rng(0)
    labels = {(1, l): rng.random((4, 5)) for l in (1, 2, 300)}
    labels[(6, 1)] = np.ones((4, 5))
    preds = {k: v.copy() for k, v in labels.items()}
    assert all(s.mae == 0 for s in score_layers(preds, labels))
    preds[(6, 1)] = np.zeros((4, 5))
    preds[(1, 2)] = rng.random((4, 5))
    out = {s.key: s for s in score_layers(preds, labels)}
    assert out[(6, 1)].mae == 1.0 and out[(6, 1)].section is None
    brute = sum(abs(preds[(1, 2)][i, j] - labels[(1, 2)][i, j]) for i in range(4) for j in range(5)) / 20
    assert out[(1, 2)].mae == pytest.approx(brute, abs=1e-7)
    assert out[(1, 300)].section == GeometrySection.Overhang


def test_score_layers_key_mismatch():
    a = {(1, 1): np.zeros((2, 2)), (1, 2): np.zeros((2, 2))}
    b = {(1, 1): np.zeros((2, 2)), (1, 3): np.zeros((2, 2))}
    with pytest.raises(ScoreKeyError) as exc:
        score_layers(a, b)
    assert exc.value.missing_pred == [(1, 3)] and exc.value.missing_label == [(1, 2)]
    assert "(1, 3)" in str(exc.value)
    with pytest.raises(ValueError):
        score_layers({(1, 1): np.zeros((2, 2))}, {(1, 1): np.zeros((3, 2))})


def one_pore_label(x, y):
    return kde_label(PoreSet.from_xy([(x, y)], 1, 4), 64, 64, KdeConfig(5.0)).data


def test_flags():
    label = one_pore_label(16, 32)
    # the label shifted 30 px
    shifted = np.zeros_like(label)
    shifted[:, 30:] = label[:, :-30]
    sc = score_layers({(4, 2): shifted}, {(4, 2): label})
    assert sc[0].mae > 0.05
    f = flag_failures(sc, predictions={(4, 2): shifted}, labels={(4, 2): label})
    assert [x.mode for x in f] == [FailureMode.Misaligned]
    assert flag_failures(scores_of([0.01] * 5)) == []
    assert flag_failures(scores_of([0.5, 2.0]), threshold=math.inf) == []
    assert [x.mode for x in flag_failures(scores_of([0.5]))] == [FailureMode.Misaligned]


def test_no_prediction_flag_on_wide_label():
    label = kde_label(PoreSet.from_xy([(16, 32)], 1, 4), 64, 64, KdeConfig(20.0)).data
    sc = score_layers({(4, 1): np.zeros((64, 64))}, {(4, 1): label})
    assert sc[0].mae > 0.05
    f = flag_failures(sc, predictions={(4, 1): np.zeros((64, 64))}, labels={(4, 1): label})
    assert [x.mode for x in f] == [FailureMode.NoPrediction]


def golden_inputs():
    scores = [
        LayerScore(1, 245, 0.0125, GeometrySection.PreOverhang),
        LayerScore(1, 246, 0.25, GeometrySection.Overhang),
        LayerScore(5, 7, 0.03125),
    ]
    P = table1_params()
    stats = {"part": group_stats(scores, "part"), "hatch_distance": group_stats(scores, "hatch_distance", P)}
    flags = flag_failures(scores)
    return scores, stats, flags, P


def test_golden_report(tmp_path):
    scores, stats, flags, P = golden_inputs()
    emit_report(scores, stats, flags, tmp_path, params=P)
    for name in ("report.json", "report.csv"):
        assert (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes(), name


def test_report_deterministic_and_roundtrip(tmp_path):
    scores, stats, flags, P = golden_inputs()
    emit_report(scores, stats, flags, tmp_path / "a", params=P)
    emit_report(scores, stats, flags, tmp_path / "b", params=P)
    for name in ("report.json", "report.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert read_scores_csv(tmp_path / "a" / "report.csv") == scores


@given(st.lists(st.tuples(st.integers(1, 10), st.integers(1, 712), st.floats(0, 1)), max_size=20, unique_by=lambda t: t[:2]))
def test_csv_roundtrip_exact(tmp_path_factory, rows):
    from pkde.sections import section_of_layer

    scores = sorted((LayerScore(p, l, m, section_of_layer(l) if p <= 3 else None) for p, l, m in rows), key=lambda s: s.key)
    d = tmp_path_factory.mktemp("csv")
    emit_report(scores, {}, [], d, formats=("csv",))
    assert read_scores_csv(d / "report.csv") == scores


def test_empty_flags_valid_json(tmp_path):
    scores = scores_of([0.01, 0.02])
    emit_report(scores, {"part": group_stats(scores, "part")}, [], tmp_path, formats=("json",))
    d = json.loads((tmp_path / "report.json").read_text())
    assert d["flags"] == [] and d["stats"]["part"]["4"]["count"] == 2
    with pytest.raises(ValueError):
        emit_report(scores, {}, [], tmp_path, formats=("xml",))
