import gzip
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from contextstrip.data import (
    FoldPlan,
    NiftiError,
    Volume,
    generate_phantom,
    kfold_split,
    load_dataset,
    normalize_volume,
    read_mask,
    read_nifti,
    resize_inplane,
    sample_training_pair,
    save_subject,
    stack_pairs,
    subject_ids,
    subvolume_indices,
    write_nifti,
    write_phantom_dataset,
)
from contextstrip.data.nifti import HEADER_SIZE, header_dtype
from contextstrip.data.volume import center_position
from contextstrip.losses import class_presence_labels


def fixture_volume(shape=(4, 4, 4), seed=0, spacing=(1.0, 1.2, 0.8)):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=shape).astype(np.float32)
    mask = (rng.random(shape) > 0.5).astype(np.uint8)
    return Volume(data, spacing, mask, "fixture")


# --- Volume ---------------------------------------------------------------

def test_volume_invariants():
    with pytest.raises(ValueError, match="extents"):
        Volume(np.zeros((2, 2, 2)), mask=np.zeros((2, 2, 3)))
    with pytest.raises(ValueError, match="non-finite"):
        Volume(np.full((2, 2, 2), np.nan))
    with pytest.raises(ValueError, match="0 or 1"):
        Volume(np.zeros((2, 2, 2)), mask=np.full((2, 2, 2), 2))
    with pytest.raises(ValueError, match="3-D"):
        Volume(np.zeros((2, 2)))
    v = Volume(np.zeros((2, 3, 4)))
    assert v.extents == (2, 3, 4) and v.coronal_count == 3


# --- NIfTI ----------------------------------------------------------------

def test_header_layout_is_348_bytes():
    assert header_dtype("<").itemsize == HEADER_SIZE == 348
    assert header_dtype("<").fields["vox_offset"][1] == 108
    assert header_dtype("<").fields["magic"][1] == 344


@pytest.mark.parametrize("name", ["v.nii", "v.nii.gz"])
@pytest.mark.parametrize("order", ["<", ">"])
def test_nifti_round_trip(tmp_path, name, order):
    v = fixture_volume((5, 4, 3))
    write_nifti(v, tmp_path / name, byteorder=order)
    back = read_nifti(tmp_path / name)
    assert back.intensities.tobytes() == v.intensities.tobytes()
    assert back.extents == (5, 4, 3)
    assert back.spacing == v.spacing
    write_nifti(v, tmp_path / ("m" + name), as_mask=True, byteorder=order)
    np.testing.assert_array_equal(read_mask(tmp_path / ("m" + name)), v.mask)


def test_uncompressed_size_and_gzip_stream(tmp_path):
    v = fixture_volume((4, 5, 6))
    write_nifti(v, tmp_path / "v.nii")
    assert (tmp_path / "v.nii").stat().st_size == 352 + 4 * 4 * 5 * 6
    write_nifti(v, tmp_path / "v.nii.gz")
    raw = (tmp_path / "v.nii.gz").read_bytes()
    assert raw[:2] == b"\x1f\x8b"
    assert gzip.decompress(raw) == (tmp_path / "v.nii").read_bytes()


def test_big_endian_header_is_byte_swapped(tmp_path):
    write_nifti(fixture_volume(), tmp_path / "be.nii", byteorder=">")
    raw = (tmp_path / "be.nii").read_bytes()
    assert raw[:4] == (348).to_bytes(4, "big")
    assert read_nifti(tmp_path / "be.nii").extents == (4, 4, 4)


def _patch_header(path, **fields):
    raw = bytearray(path.read_bytes())
    hdr = np.frombuffer(bytes(raw[:348]), dtype=header_dtype("<")).copy()
    for k, val in fields.items():
        hdr[0][k] = val
    raw[:348] = hdr.tobytes()
    path.write_bytes(bytes(raw))


def test_nifti_error_cases(tmp_path):
    p = tmp_path / "v.nii"
    write_nifti(fixture_volume(), p)
    _patch_header(p, datatype=64, bitpix=64)
    with pytest.raises(NiftiError, match="unsupported datatype 64 \\(float64\\)"):
        read_nifti(p)
    write_nifti(fixture_volume(), p)
    _patch_header(p, magic=b"xyz")
    with pytest.raises(NiftiError, match="bad magic"):
        read_nifti(p)
    write_nifti(fixture_volume(), p)
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(NiftiError, match="truncated"):
        read_nifti(p)
    p.write_bytes(b"\x00" * 100)
    with pytest.raises(NiftiError, match="too short"):
        read_nifti(p)


def test_scaling_and_integer_datatypes(tmp_path):
    p = tmp_path / "v.nii"
    hdr = np.zeros((), dtype=header_dtype("<"))
    hdr["sizeof_hdr"], hdr["magic"], hdr["vox_offset"] = 348, b"n+1", 352
    hdr["dim"] = [3, 2, 2, 1, 1, 1, 1, 1]
    hdr["datatype"], hdr["bitpix"] = 4, 16
    hdr["pixdim"] = [1, 2.0, 3.0, 4.0, 0, 0, 0, 0]
    hdr["scl_slope"], hdr["scl_inter"] = 0.5, 10.0
    data = np.array([-2, 0, 4, 8], dtype="<i2")  # Fortran order: x fastest
    p.write_bytes(hdr.tobytes() + b"\x00" * 4 + data.tobytes())
    v = read_nifti(p)
    np.testing.assert_array_equal(v.intensities[:, :, 0], [[9.0, 12.0], [10.0, 14.0]])
    assert v.spacing == (2.0, 3.0, 4.0)


def test_ni1_header_image_pair(tmp_path):
    v = fixture_volume()
    write_nifti(v, tmp_path / "tmp.nii")
    raw = (tmp_path / "tmp.nii").read_bytes()
    hdr = np.frombuffer(raw[:348], dtype=header_dtype("<")).copy()
    hdr[0]["magic"], hdr[0]["vox_offset"] = b"ni1", 0
    (tmp_path / "pair.hdr").write_bytes(hdr.tobytes())
    (tmp_path / "pair.img").write_bytes(raw[352:])
    back = read_nifti(tmp_path / "pair.hdr")
    assert back.intensities.tobytes() == v.intensities.tobytes()
    assert back.subject_id == "pair"


def test_non_binary_mask_rejected(tmp_path):
    write_nifti(Volume(np.full((2, 2, 2), 0.5)), tmp_path / "m.nii")
    with pytest.raises(NiftiError, match="0 or 1"):
        read_mask(tmp_path / "m.nii")


def test_dataset_layout_round_trip(tmp_path):
    ids = write_phantom_dataset(tmp_path, 2, extent=32, seed=5)
    assert ids == ["phA_0005", "phA_0006"] == subject_ids(tmp_path)
    assert (tmp_path / "phA_0005" / "t1.nii").exists() and (tmp_path / "phA_0005" / "mask.nii").exists()
    loaded = load_dataset(tmp_path)
    original = generate_phantom(5, 32)
    assert loaded[0].intensities.tobytes() == original.intensities.tobytes()
    np.testing.assert_array_equal(loaded[0].mask, original.mask)
    save_subject(fixture_volume(), tmp_path / "gz", compress=True)
    assert (tmp_path / "gz" / "fixture" / "t1.nii.gz").exists()
    assert load_dataset(tmp_path / "gz")[0].intensities.tobytes() == fixture_volume().intensities.tobytes()


# --- normalization and resizing -------------------------------------------

def test_normalize_constant_volume():
    assert not normalize_volume(Volume(np.full((3, 3, 3), 7.0))).intensities.any()


def test_normalize_outlier_is_clamped():
    values = np.append(np.arange(101, dtype=np.float64), 1e6)  # 102 values
    v = Volume(values.reshape(2, 3, 17))
    # linear-interpolated ranks over 102 sorted values: 0.01 * 101 = 1.01 and
    # 0.99 * 101 = 99.99, so p1 = 1.01 and p99 = 99.99
    p1, p99 = 1.01, 99.99
    out = normalize_volume(v).intensities.ravel()
    assert out[-1] == 1.0 and out[0] == 0.0
    assert out[50] == pytest.approx((50.0 - p1) / (p99 - p1), rel=1e-6)
    assert out[100] == 1.0


def test_normalize_ramp_unchanged_in_interior():
    ramp = np.linspace(0, 1, 1000).reshape(10, 10, 10)
    out = normalize_volume(Volume(ramp)).intensities
    # 1st/99th percentiles of the ramp are 0.01 and 0.99
    interior = (ramp > 0.011) & (ramp < 0.989)
    np.testing.assert_allclose(out[interior], (ramp[interior] - 0.01) / 0.98, atol=1e-6)


def test_resize_inplane():
    v = fixture_volume((8, 3, 4), spacing=(1.0, 2.0, 1.0))
    r = resize_inplane(v, 16)
    assert r.extents == (16, 3, 16)
    assert r.spacing == (0.5, 2.0, 0.25)
    assert set(np.unique(r.mask)) <= {0, 1}
    assert resize_inplane(r, 16) is r


# --- sampling ---------------------------------------------------------------

def test_subvolume_centering_example():
    np.testing.assert_array_equal(subvolume_indices(50, 10, 100), np.arange(46, 56))
    assert center_position(10) == 4


def test_sampling_boundary_replicates_first_slice():
    v = fixture_volume((4, 12, 4))
    pair = sample_training_pair(v, 0, 10)
    np.testing.assert_array_equal(subvolume_indices(0, 10, 12), [0, 0, 0, 0, 0, 1, 2, 3, 4, 5])
    for j in range(5):
        np.testing.assert_array_equal(pair.subvol[j], v.intensities[:, 0, :])
    single = sample_training_pair(v, 7, 1)
    np.testing.assert_array_equal(single.subvol, single.slice)


def test_sampling_errors():
    v = fixture_volume((4, 5, 4))
    with pytest.raises(IndexError):
        sample_training_pair(v, 5, 3)
    with pytest.raises(ValueError):
        sample_training_pair(v, 0, 0)


@settings(max_examples=40, deadline=None)
@given(shape=st.tuples(st.integers(1, 6), st.integers(1, 12), st.integers(1, 6)), depth=st.integers(1, 11),
       data=st.data())
def test_sample_pair_invariants(shape, depth, data):
    seed = data.draw(st.integers(0, 1000))
    v = fixture_volume(shape, seed)
    index = data.draw(st.integers(0, shape[1] - 1))
    pair = sample_training_pair(v, index, depth)
    assert pair.slice.shape == (1, shape[0], shape[2])
    assert pair.subvol.shape == (depth, shape[0], shape[2])
    np.testing.assert_array_equal(pair.subvol[center_position(depth)], pair.slice[0])
    np.testing.assert_array_equal(pair.mask_slice, v.mask[:, index, :])
    np.testing.assert_array_equal(pair.y, class_presence_labels(pair.mask_slice, 2))
    assert pair.provenance == ("fixture", index)


def test_stack_pairs():
    v = fixture_volume((4, 6, 4))
    s, sv, m, y = stack_pairs([sample_training_pair(v, i, 3) for i in range(3)])
    assert s.shape == (3, 1, 4, 4) and sv.shape == (3, 3, 4, 4) and m.shape == (3, 4, 4) and y.shape == (3, 2)
    unlabeled = Volume(v.intensities)
    assert stack_pairs([sample_training_pair(unlabeled, 0, 3)])[2] is None


# --- phantoms ----------------------------------------------------------------

def test_phantom_determinism():
    a, b = generate_phantom(3), generate_phantom(3)
    assert a.intensities.tobytes() == b.intensities.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert a.intensities.tobytes() != generate_phantom(4).intensities.tobytes()


def test_phantom_errors():
    with pytest.raises(ValueError, match="extent"):
        generate_phantom(0, extent=16)
    with pytest.raises(ValueError, match="family"):
        generate_phantom(0, family="Z")


def test_phantom_mask_fraction_over_seeds():
    fractions = [generate_phantom(s).mask.mean() for s in range(40)]
    assert 0.05 <= min(fractions) and max(fractions) <= 0.45


@pytest.mark.parametrize("family", ["A", "B"])
def test_phantom_mask_separated_from_skull(family):
    # the voxels just outside the mask are fluid, never bright skull
    for seed in range(5):
        v = generate_phantom(seed, family=family)
        rim = ndimage.binary_dilation(v.mask.astype(bool)) & ~v.mask.astype(bool)
        assert v.intensities[rim].max() < 0.5
        assert v.intensities[v.mask.astype(bool)].mean() > 0.4


# --- folds ----------------------------------------------------------------

@pytest.mark.parametrize("n,k,sizes", [(40, 2, [20, 20]), (125, 5, [25] * 5), (7, 7, [1] * 7), (10, 3, [4, 3, 3])])
def test_kfold_sizes(n, k, sizes):
    ids = [f"s{i:03d}" for i in range(n)]
    plan = kfold_split(ids, k, seed=1)
    assert plan.sizes() == sizes
    tested = [s for f in range(k) for s in plan.test_ids(f)]
    assert sorted(tested) == ids
    for f in range(k):
        assert set(plan.train_ids(f)).isdisjoint(plan.test_ids(f))


def test_kfold_determinism_and_serialization(tmp_path):
    ids = [f"s{i}" for i in range(20)]
    a, b = kfold_split(ids, 4, 9), kfold_split(list(reversed(ids)), 4, 9)
    assert a == b
    assert a != kfold_split(ids, 4, 10)
    a.save(tmp_path / "plan.json")
    assert FoldPlan.load(tmp_path / "plan.json") == a
    assert json.loads(a.to_json())["k"] == 4


def test_kfold_errors():
    with pytest.raises(ValueError, match="k=3"):
        kfold_split(["a", "b"], 3)
    with pytest.raises(ValueError, match="unique"):
        kfold_split(["a", "a"], 1)
    with pytest.raises(IndexError):
        kfold_split(["a", "b"], 2).test_ids(2)
