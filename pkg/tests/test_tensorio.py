import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hst

from octfp.tensorio import (BinaryImage2D, ContainerError, DatasetManifest,
                            Image2D, ManifestEntry, ValidationError, Volume3D,
                            detect_surface, extract_enface_layer,
                            foreground_category, read_image, read_volume,
                            write_image, write_volume, z_mean_projection)


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

def test_image_rejects_out_of_range():
    with pytest.raises(ValidationError):
        Image2D(np.full((8, 8), 1.5, np.float32))
    with pytest.raises(ValidationError):
        Image2D(np.full((8, 8), np.nan, np.float32))
    with pytest.raises(ValidationError):
        Image2D(np.zeros((4, 12), np.float32))  # H < 8


def test_binary_rejects_non_binary():
    with pytest.raises(ValidationError):
        BinaryImage2D(np.full((8, 8), 0.5))
    img = BinaryImage2D(np.eye(8, dtype=np.int64))
    assert img.values.dtype == np.uint8


def test_volume_rejects_bad_values():
    with pytest.raises(ValidationError):
        Volume3D(np.full((2, 2, 2), -0.1, np.float32))
    v = Volume3D(np.zeros((2, 2, 2), np.float32))
    assert (v.depth, v.height, v.width) == (2, 2, 2)


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

def test_container_zero_volume_layout(tmp_path):
    path = tmp_path / "z.p2v"
    write_volume(Volume3D(np.zeros((2, 2, 2), np.float32)), path)
    raw = path.read_bytes()
    assert raw[:4] == b"P2V1"
    assert raw[4] == 1 and raw[5] == 3          # dtype code, ndim
    assert struct.unpack("<3I", raw[8:20]) == (2, 2, 2)
    assert raw[20:] == b"\x00" * 32             # 8 zero float32s
    back = read_volume(path)
    assert np.array_equal(back.values, np.zeros((2, 2, 2), np.float32))


def test_container_roundtrip_bit_exact(tmp_path, rng):
    v = Volume3D(rng.uniform(0, 1, (8, 16, 16)).astype(np.float32))
    path = tmp_path / "v.p2v"
    write_volume(v, path)
    back = read_volume(path)
    assert np.array_equal(back.values, v.values)
    assert back.values.tobytes() == v.values.tobytes()


@settings(max_examples=25, deadline=None)
@given(d=hst.integers(1, 5), h=hst.integers(8, 20), w=hst.integers(8, 20),
       seed=hst.integers(0, 2 ** 31))
def test_container_roundtrip_property(tmp_path_factory, d, h, w, seed):
    g = np.random.default_rng(seed)
    v = Volume3D(g.uniform(0, 1, (d, h, w)).astype(np.float32))
    path = tmp_path_factory.mktemp("rt") / "v.p2v"
    write_volume(v, path)
    assert np.array_equal(read_volume(path).values, v.values)


def test_container_bad_magic(tmp_path):
    path = tmp_path / "bad.p2v"
    write_volume(Volume3D(np.zeros((2, 2, 2), np.float32)), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="bad magic"):
        read_volume(path)


def test_container_truncated_payload(tmp_path):
    path = tmp_path / "short.p2v"
    write_volume(Volume3D(np.zeros((2, 2, 2), np.float32)), path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ContainerError, match="truncated"):
        read_volume(path)


def test_container_dim_mismatch(tmp_path):
    path = tmp_path / "img.p2v"
    write_image(Image2D(np.zeros((8, 8), np.float32)), path)
    with pytest.raises(ContainerError, match="dimension mismatch"):
        read_volume(path)
    assert read_image(path).values.shape == (8, 8)


def test_container_trailing_data(tmp_path):
    path = tmp_path / "long.p2v"
    write_volume(Volume3D(np.zeros((2, 2, 2), np.float32)), path)
    path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(ContainerError, match="trailing"):
        read_volume(path)


# ---------------------------------------------------------------------------
# projection / extraction
# ---------------------------------------------------------------------------

def test_zmean_constant():
    v = Volume3D(np.full((4, 8, 8), 0.3, np.float32))
    out = z_mean_projection(v)
    assert np.allclose(out.values, 0.3, atol=1e-7)


def test_zmean_two_slices():
    vals = np.zeros((2, 8, 8), np.float32)
    vals[1] = 1.0
    out = z_mean_projection(Volume3D(vals))
    assert np.allclose(out.values, 0.5)


def test_zmean_linearity(rng):
    v1 = rng.uniform(0, 1, (4, 8, 8)).astype(np.float32)
    v2 = rng.uniform(0, 1, (4, 8, 8)).astype(np.float32)
    a = 0.37
    mix = Volume3D((a * v1 + (1 - a) * v2).astype(np.float32))
    lhs = z_mean_projection(mix).values
    rhs = a * z_mean_projection(Volume3D(v1)).values \
        + (1 - a) * z_mean_projection(Volume3D(v2)).values
    assert np.abs(lhs - rhs).max() < 1e-6


def test_enface_full_band_equals_projection(rng):
    v = Volume3D(rng.uniform(0, 1, (5, 8, 8)).astype(np.float32))
    full = extract_enface_layer(v, np.zeros((8, 8), np.int64), band=5)
    assert np.abs(full.values - z_mean_projection(v).values).max() < 1e-6


def test_enface_single_slice(rng):
    v = Volume3D(rng.uniform(0, 1, (5, 8, 8)).astype(np.float32))
    out = extract_enface_layer(v, np.full((8, 8), 3, np.int64), band=1)
    assert np.abs(out.values - v.values[3]).max() < 1e-7


def test_enface_band_clamps_at_bottom(rng):
    v = Volume3D(rng.uniform(0, 1, (4, 8, 8)).astype(np.float32))
    out = extract_enface_layer(v, np.full((8, 8), 2, np.int64), band=10)
    expect = v.values[2:].mean(axis=0)
    assert np.abs(out.values - expect).max() < 1e-6


def test_enface_shape_mismatch():
    v = Volume3D(np.zeros((4, 8, 8), np.float32))
    with pytest.raises(ValidationError):
        extract_enface_layer(v, np.zeros((4, 4), np.int64), band=1)
    with pytest.raises(ValidationError):
        extract_enface_layer(v, np.full((8, 8), 9, np.int64), band=1)


def test_detect_surface_bright_plane():
    vals = np.full((10, 8, 8), 0.05, np.float32)
    vals[5] = 0.9
    vals[6:] = 0.6
    out = detect_surface(Volume3D(vals), threshold=0.3, smoothing=3)
    assert np.all(out == 5)


def test_detect_surface_all_dark():
    v = Volume3D(np.full((6, 8, 8), 0.01, np.float32))
    assert np.all(detect_surface(v, threshold=0.5, smoothing=1) == 5)


def test_detect_surface_validation():
    v = Volume3D(np.zeros((4, 8, 8), np.float32))
    with pytest.raises(ValidationError):
        detect_surface(v, threshold=0.0)
    with pytest.raises(ValidationError):
        detect_surface(v, threshold=0.5, smoothing=0)


# ---------------------------------------------------------------------------
# foreground category
# ---------------------------------------------------------------------------

def _block_image(h=60, w=60, rows=(0, 20), level=0.9, bg=0.05):
    vals = np.full((h, w), bg, np.float32)
    vals[rows[0]:rows[1]] = level
    return Image2D(vals)


def test_category_full_bright():
    assert foreground_category(Image2D(np.full((16, 16), 1.0, np.float32))) == "full"


def test_category_upper_block():
    assert foreground_category(_block_image(rows=(0, 15))) == "upper"


def test_category_lower_block_by_centroid():
    # 30% coverage centered at row 0.8 H
    img = _block_image(h=60, rows=(39, 57))
    assert foreground_category(img) == "lower"


def test_category_middle_and_full_coverage():
    assert foreground_category(_block_image(rows=(21, 39))) == "middle"
    img = _block_image(rows=(0, 60))
    img.values[0, 0] = 0.05  # leave one background pixel so Otsu has two classes
    assert foreground_category(Image2D(img.values)) == "full"


def test_category_blank_errors():
    with pytest.raises(ValidationError, match="blank"):
        foreground_category(Image2D(np.zeros((8, 8), np.float32)))


@settings(max_examples=20, deadline=None)
@given(scale=hst.floats(0.05, 1.0), top=hst.integers(0, 30))
def test_category_scale_invariance(scale, top):
    img = _block_image(h=60, rows=(top, top + 18))
    scaled = Image2D((img.values * scale).astype(np.float32))
    assert foreground_category(scaled) == foreground_category(img)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def test_manifest_duplicate_pairs_rejected():
    e = dict(identity_id=0, impression_id=0, category="full", paths={}, seed=1)
    with pytest.raises(ValidationError, match="duplicate"):
        DatasetManifest(entries=[ManifestEntry(**e), ManifestEntry(**e)])


def test_manifest_roundtrip_and_missing_file(tmp_path):
    img_path = tmp_path / "a.p2v"
    write_image(Image2D(np.zeros((8, 8), np.float32)), img_path)
    manifest = DatasetManifest(entries=[ManifestEntry(
        identity_id=0, impression_id=0, category="upper",
        paths={"zmean": "a.p2v"}, seed=3)], root=tmp_path)
    manifest.save(tmp_path / "manifest.json")
    back = DatasetManifest.load(tmp_path / "manifest.json")
    assert back.entries[0].paths["zmean"] == "a.p2v"
    img_path.unlink()
    with pytest.raises(ValidationError, match="missing file"):
        DatasetManifest.load(tmp_path / "manifest.json")
