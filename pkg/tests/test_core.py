import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pkde.core import (
    TABLE1_PRINTED_EV,
    AssemblyError,
    Dataset,
    InvalidParameterError,
    LayerImage,
    PoreSet,
    ProcessParams,
    SplitAssignment,
    SplitError,
    assemble_dataset,
    energy_density,
    read_manifest,
    round_half_up,
    split_dataset,
    table1_params,
    write_manifest,
)


def test_energy_density_unit_conversion():
    # 100 W / (1000 mm/s * 100 um * 10 um) = 100 / (1 * 1e-4 * 1e-5) = 1e11
    assert energy_density(ProcessParams(1, 100, 1000, 100, 10)) == pytest.approx(1e11, rel=1e-12)


@pytest.mark.parametrize("p", [1, 2, 3, 4, 5, 6, 7, 9])
def test_energy_density_matches_printed_table(p):
    assert energy_density(table1_params()[p]) == pytest.approx(TABLE1_PRINTED_EV[p], rel=2e-3)


def test_row10_computed_from_inputs():
    e = energy_density(table1_params()[10])
    assert e == pytest.approx(116.07e9, rel=1e-4)
    # the printed 123.80e9 is what a 150 um hatch would give
    assert energy_density(ProcessParams(10, 390, 700, 150, 30)) == pytest.approx(123.81e9, rel=1e-4)


def test_row8_printed_value_inconsistent_with_inputs():
    e = energy_density(table1_params()[8])
    assert e == pytest.approx(92.73e9, rel=1e-4)
    # the printed 72.12e9 matches v = 900 mm/s instead of 700
    assert energy_density(ProcessParams(8, 370, 900, 190, 30)) == pytest.approx(72.12e9, rel=1e-3)


@pytest.mark.parametrize("field", ["laser_power", "scan_speed", "hatch_distance", "layer_thickness"])
@pytest.mark.parametrize("bad", [0.0, -1.0, math.inf, math.nan])
def test_invalid_params_rejected(field, bad):
    kw = dict(part=1, laser_power=370.0, scan_speed=1300.0, hatch_distance=190.0, layer_thickness=30.0)
    kw[field] = bad
    with pytest.raises(InvalidParameterError):
        ProcessParams(**kw)


@given(
    st.floats(1, 1000), st.floats(1, 5000), st.floats(1, 500), st.floats(1, 100), st.floats(1.01, 10)
)
def test_energy_density_monotone(p, v, h, t, k):
    base = energy_density(ProcessParams(1, p, v, h, t))
    assert energy_density(ProcessParams(1, p * k, v, h, t)) > base
    assert energy_density(ProcessParams(1, p, v * k, h, t)) < base


def test_params_dict_roundtrip():
    p = table1_params()[7]
    assert ProcessParams.from_dict(json.loads(json.dumps(p.to_dict()))) == p


@pytest.mark.parametrize("x, want", [(0.5, 1), (1.5, 2), (2.5, 3), (-0.5, -1), (2.4999, 2), (0.0, 0)])
def test_round_half_up(x, want):
    assert round_half_up(x) == want


def test_layer_image_validation():
    with pytest.raises(ValueError):
        LayerImage("XX", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        LayerImage("HR", np.zeros(4))
    with pytest.raises(ValueError):
        LayerImage("OT", np.array([[np.nan]]))
    with pytest.raises(ValueError):
        LayerImage("PP", np.array([[1.5]]))
    img = LayerImage("HR", np.zeros((3, 5)))
    assert (img.width, img.height) == (5, 3)
    with pytest.raises(ValueError):
        img.data[0, 0] = 1.0


def test_layer_image_copies_input():
    a = np.zeros((2, 2))
    img = LayerImage("OT", a)
    a[0, 0] = 7
    assert img.data[0, 0] == 0


def test_pore_set_from_xy():
    ps = PoreSet.from_xy([(1, 2), (3.5, 4)], layer=3, part=2)
    assert ps.count == 2
    assert ps.as_array().tolist() == [[1, 2], [3.5, 4]]
    assert PoreSet((), 1, 1).as_array().shape == (0, 2)


def _src(p, l, shape=(4, 4)):
    z = np.zeros(shape)
    return (p, l, LayerImage("HR", z), LayerImage("OT", z), LayerImage("PP", z))


def test_assemble_sorted_and_missing():
    d = assemble_dataset([_src(2, 1), _src(1, 2), _src(1, 1)], {}, parts=2, layers_per_part=2)
    assert d.keys == [(1, 1), (1, 2), (2, 1)]
    assert d.missing() == [(2, 2)]
    assert len(d) == 3


def test_assemble_errors_name_the_triplet():
    with pytest.raises(AssemblyError, match=r"p=1, l=1"):
        assemble_dataset([_src(1, 1), _src(1, 1)], {})
    bad = list(_src(3, 7))
    bad[4] = LayerImage("PP", np.zeros((4, 5)))
    with pytest.raises(AssemblyError, match=r"p=3, l=7"):
        assemble_dataset([tuple(bad)], {})
    wrong = list(_src(1, 1))
    wrong[3] = LayerImage("HR", np.zeros((4, 4)))
    with pytest.raises(AssemblyError, match="modalities"):
        assemble_dataset([tuple(wrong)], {})
    with pytest.raises(AssemblyError, match="outside"):
        assemble_dataset([_src(3, 1)], {}, parts=2, layers_per_part=1)


def _keys(parts, layers):
    return [(p, l) for p in range(1, parts + 1) for l in range(1, layers + 1)]


def test_split_sizes_and_disjoint():
    s = split_dataset(_keys(10, 20), (0.6, 0.2, 0.2), seed=3)
    assert s.sizes() == (120, 40, 40)
    assert not (s.train & s.validation or s.train & s.test or s.validation & s.test)
    assert len(s.train | s.validation | s.test) == 200


def test_split_half_rounding():
    # 0.25 * 10 = 2.5 rounds up to 3
    s = split_dataset(_keys(1, 10), (0.5, 0.25, 0.25), seed=0)
    assert s.sizes() == (4, 3, 3)


@given(st.integers(1, 6), st.integers(1, 30), st.integers(0, 10**6))
def test_split_stratified_and_deterministic(parts, layers, seed):
    keys = _keys(parts, layers)
    a = split_dataset(keys, (0.6, 0.2, 0.2), seed)
    b = split_dataset(list(reversed(keys)), (0.6, 0.2, 0.2), seed)
    assert a == b
    n = len(keys)
    assert len(a.test) == round_half_up(0.2 * n)
    for p in range(1, parts + 1):
        t = sum(1 for k in a.test if k[0] == p)
        assert abs(t - 0.2 * layers) <= 1 + 1e-9


def test_split_seed_changes_assignment():
    keys = _keys(2, 50)
    assert split_dataset(keys, seed=1) != split_dataset(keys, seed=2)


@pytest.mark.parametrize("fr", [(0.5, 0.5, 0.5), (1.2, -0.1, -0.1), (0.5, 0.5)])
def test_split_bad_fractions(fr):
    with pytest.raises(SplitError):
        split_dataset(_keys(1, 4), fr)


def test_split_empty():
    with pytest.raises(SplitError):
        split_dataset([])


def test_split_roundtrip():
    s = split_dataset(_keys(3, 7), seed=9)
    assert SplitAssignment.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def test_split_accepts_dataset():
    d = assemble_dataset([_src(1, l) for l in range(1, 6)], {})
    assert isinstance(d, Dataset)
    assert split_dataset(d, seed=4) == split_dataset(d.keys, seed=4)


def test_manifest_lists_missing(tmp_path):
    m = {"parts": 2, "layers_per_part": 2, "triplets": [{"part": 2, "layer": 1}, {"part": 1, "layer": 1}]}
    write_manifest(m, tmp_path / "m.json")
    back = read_manifest(tmp_path / "m.json")
    assert back["triplet_count"] == 2
    assert back["missing"] == [[1, 2], [2, 2]]
    assert [t["part"] for t in back["triplets"]] == [1, 2]


def test_manifest_format_checked(tmp_path):
    (tmp_path / "m.json").write_text("{}")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "m.json")
