import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pkde.core import LayerImage
from pkde.xct import (
    CropBoundsError,
    CropFrame,
    DetectedPore,
    ResolutionError,
    Rotation,
    UnsupportedRotationError,
    VoxelVolume,
    crop,
    detect_pores,
    equivalent_diameter,
    pores_to_layers,
    rotate_to_build_axis,
    slice_volume,
)


def flood_fill_components(void):
    """Independent 6-connected BFS labelling; returns list of voxel lists."""
    seen = np.zeros(void.shape, bool)
    comps = []
    nz, ny, nx = void.shape
    for start in zip(*np.nonzero(void)):
        if seen[start]:
            continue
        q = deque([start])
        seen[start] = True
        members = []
        while q:
            z, y, x = q.popleft()
            members.append((z, y, x))
            for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                a, b, c = z + dz, y + dy, x + dx
                if 0 <= a < nz and 0 <= b < ny and 0 <= c < nx and void[a, b, c] and not seen[a, b, c]:
                    seen[a, b, c] = True
                    q.append((a, b, c))
        comps.append(members)
    return comps


def random_volume(seed, n=32, p=0.3):
    rng = np.random.default_rng(seed)
    void = rng.random((n, n, n)) < p
    vol = np.where(void, rng.uniform(0, 11000, void.shape), rng.uniform(12000, 30000, void.shape))
    return VoxelVolume(vol, 1.0), void


@pytest.mark.parametrize("seed", range(10))
def test_detect_matches_flood_fill(seed):
    vol, void = random_volume(seed, n=16)
    got = detect_pores(vol, 11500, min_diameter=0)
    comps = flood_fill_components(void)
    assert len(got) == len(comps)
    want = sorted(
        (tuple(np.mean([[m[2], m[1], m[0]] for m in c], axis=0)), len(c)) for c in comps
    )
    have = sorted((p.centroid, p.voxel_count) for p in got)
    for (c1, n1), (c2, n2) in zip(have, want):
        assert n1 == n2
        assert np.allclose(c1, c2, atol=1e-9, rtol=0)
    assert sum(p.voxel_count for p in got) == int(void.sum())


def test_min_diameter_filter():
    data = np.full((9, 9, 9), 20000.0)
    data[1, 1, 1] = 0  # single voxel
    data[4:7, 4:7, 4:7] = 0  # 27 voxels
    vol = VoxelVolume(data, voxel_size=2.0)
    d1 = equivalent_diameter(1, 2.0)
    d27 = equivalent_diameter(27, 2.0)
    assert d27 == pytest.approx(2.0 * (6 * 27 / math.pi) ** (1 / 3))
    assert len(detect_pores(vol, 11500, min_diameter=0)) == 2
    only = detect_pores(vol, 11500, min_diameter=(d1 + d27) / 2)
    assert [p.voxel_count for p in only] == [27]
    assert only[0].centroid == (5.0, 5.0, 5.0)


def test_no_voids_and_all_voids():
    assert detect_pores(VoxelVolume(np.full((3, 3, 3), 2e4)), 11500, 0) == []
    all_void = detect_pores(VoxelVolume(np.zeros((3, 3, 3))), 11500, 0)
    assert len(all_void) == 1 and all_void[0].voxel_count == 27


def test_lateral_border_exclusion():
    data = np.full((6, 8, 8), 20000.0)
    data[:, 0, :] = 0  # air slab on a y face
    data[2:4, 3:5, 3:5] = 0  # interior pore
    vol = VoxelVolume(data)
    assert len(detect_pores(vol, 11500, 0)) == 2
    kept = detect_pores(vol, 11500, 0, exclude_lateral_border=True)
    assert [p.voxel_count for p in kept] == [8]


def test_volume_validation():
    with pytest.raises(ValueError):
        VoxelVolume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        VoxelVolume(np.full((2, 2, 2), -1.0))
    with pytest.raises(ValueError):
        VoxelVolume(np.zeros((2, 2, 2)), voxel_size=0)


def test_detected_pore_dict_roundtrip():
    p = DetectedPore((1.5, 2.0, 3.25), 7, 12.5)
    assert DetectedPore.from_dict(p.to_dict()) == p


# -- rotations


def test_there_are_24_rotations():
    rots = Rotation.all()
    assert len(rots) == 24
    assert len({r.matrix for r in rots}) == 24


def test_rotation_rejects_reflections_and_odd_angles():
    with pytest.raises(UnsupportedRotationError):
        Rotation(((-1, 0, 0), (0, 1, 0), (0, 0, 1)))
    with pytest.raises(UnsupportedRotationError):
        Rotation.about("z", 45)


def test_quarter_turn_about_z_convention():
    data = np.zeros((2, 3, 4))  # nz=2, ny=3, nx=4
    data[1, 2, 0] = 1  # (x, y, z) = (0, 2, 1)
    out = rotate_to_build_axis(VoxelVolume(data), Rotation.about("z", 90))
    assert out.data.shape == (2, 4, 3)
    # (x, y, z) -> (y, nx - 1 - x, z) = (2, 3, 1)
    assert out.data[1, 3, 2] == 1
    assert Rotation.about("z", 90).map_point((0, 2, 1), (4, 3, 2)) == (2.0, 3.0, 1.0)


@pytest.mark.parametrize("rot", Rotation.all(), ids=lambda r: str(r.matrix))
def test_rotation_roundtrip_and_point_mapping(rot):
    rng = np.random.default_rng(1)
    data = rng.random((3, 4, 5))
    vol = VoxelVolume(data)
    out = rotate_to_build_axis(vol, rot)
    assert out.data.shape[::-1] == rot.new_shape(5, 4, 3)
    back = rotate_to_build_axis(out, rot.inverse())
    assert np.array_equal(back.data, vol.data)
    for (z, y, x) in [(0, 0, 0), (2, 3, 4), (1, 2, 3)]:
        nx_, ny_, nz_ = rot.map_point((x, y, z), (5, 4, 3))
        assert out.data[int(nz_), int(ny_), int(nx_)] == data[z, y, x]


def test_rotation_composition():
    a, b = Rotation.about("x", 90), Rotation.about("z", 90)
    vol = VoxelVolume(np.random.default_rng(2).random((2, 3, 4)))
    two = rotate_to_build_axis(rotate_to_build_axis(vol, a), b)
    one = rotate_to_build_axis(vol, a.then(b))
    assert np.array_equal(one.data, two.data)


def test_four_quarter_turns_identity():
    for ax in "xyz":
        assert Rotation.about(ax, 360) == Rotation.identity()
        assert Rotation.about(ax, 90).then(Rotation.about(ax, 270)) == Rotation.identity()


def test_detection_commutes_with_rotation():
    vol, _ = random_volume(5, n=12, p=0.2)
    rot = Rotation.about("y", 90)
    base = detect_pores(vol, 11500, 0)
    turned = detect_pores(rotate_to_build_axis(vol, rot), 11500, 0)
    mapped = sorted((rot.map_point(p.centroid, (12, 12, 12)), p.voxel_count) for p in base)
    have = sorted((p.centroid, p.voxel_count) for p in turned)
    assert len(mapped) == len(have)
    for (c1, n1), (c2, n2) in zip(mapped, have):
        assert n1 == n2 and np.allclose(c1, c2, atol=1e-9)


# -- slicing and cropping


def test_slice_exact_multiple():
    data = np.arange(6, dtype=float)[:, None, None] * np.ones((6, 2, 2))
    layers = slice_volume(VoxelVolume(data, voxel_size=10.0), 30.0)
    assert [l.data[0, 0] for l in layers] == [1.0, 4.0]


def test_slice_fractional_overlap_and_partial_top():
    data = np.arange(5, dtype=float)[:, None, None] * np.ones((5, 1, 1))
    layers = slice_volume(VoxelVolume(data, voxel_size=10.0), 15.0)
    # layer 1 covers [0, 15): plane 0 fully, plane 1 half -> (0*10 + 1*5) / 15
    assert layers[0].data[0, 0] == pytest.approx(5 / 15)
    # layer 2 covers [15, 30): (1*5 + 2*10) / 15
    assert layers[1].data[0, 0] == pytest.approx(25 / 15)
    assert len(layers) == 3  # 50 um -> 3 whole layers, the rest discarded


def test_slice_too_fine():
    with pytest.raises(ResolutionError):
        slice_volume(VoxelVolume(np.zeros((2, 2, 2)), 30.0), 10.0)


def test_crop_frame_rounding_and_bounds():
    f = CropFrame(((1.5, 2.4), (9.5, 2.4), (9.5, 7.5), (1.5, 7.5)))
    assert f.box == (2, 2, 10, 8)
    img = LayerImage("HR", np.arange(120.0).reshape(10, 12))
    out = crop(img, f)
    assert out.shape == (6, 8)
    assert out.data[0, 0] == img.data[2, 2]
    with pytest.raises(CropBoundsError, match="right edge"):
        crop(LayerImage("HR", np.zeros((10, 9))), f)
    with pytest.raises(CropBoundsError, match="left edge"):
        crop(img, CropFrame.from_box(-1, 0, 3, 3))
    with pytest.raises(ValueError):
        CropFrame(((0, 0), (1, 1)))


def test_pores_to_layers_binning_and_dropping():
    frame = CropFrame.from_box(4, 4, 20, 20)
    pores = [
        DetectedPore((10.0, 6.0, 1.0), 27, 1.0),  # z*vs = 10 -> layer 1
        DetectedPore((5.0, 5.0, 3.0), 27, 1.0),  # z = 30 -> layer 2
        DetectedPore((2.0, 5.0, 1.0), 27, 1.0),  # left of the frame
        DetectedPore((4.0, 19.99, 5.9), 27, 1.0),  # layer 2, on the frame edge
    ]
    layers, dropped = pores_to_layers(pores, voxel_size=10.0, layer_thickness=30.0, frame=frame, part=3)
    assert dropped == 1
    assert sorted(layers) == [1, 2]
    assert layers[1].as_array().tolist() == [[6.0, 2.0]]
    assert layers[2].count == 2 and layers[2].part == 3


@given(st.floats(0, 500), st.floats(1, 20), st.sampled_from([20.0, 30.0, 40.0]))
def test_layer_index_formula(z, vs, t):
    frame = CropFrame.from_box(0, 0, 10, 10)
    layers, _ = pores_to_layers([DetectedPore((1.0, 1.0, z), 1, 1.0)], vs, t, frame)
    assert list(layers) == [math.floor(z * vs / t) + 1]
