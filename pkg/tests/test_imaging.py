import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crowncut.exceptions import MalformedRaster, MissingFile, UnsupportedBitDepth
from crowncut.imaging import (BAND_ORDER, BandId, MultispectralFrame, PseudoRgbImage, RasterGrid, SegmentationMask,
                              red_normalize)
from crowncut.raster_io import (decode_pnm, decode_tiff, encode_pnm, encode_tiff, find_scenes, load_band, load_mask,
                                load_rgb, load_scene, save_mask, save_raster, save_rgb)


def _frame(stack, max_value=255.0):
    return MultispectralFrame.from_aligned(
        {b: RasterGrid(stack[..., i], max_value=max_value) for i, b in enumerate(BAND_ORDER)})


# -- types ----------------------------------------------------------------


def test_band_wavelengths_and_parse():
    assert [b.wavelength_nm for b in BAND_ORDER] == [550, 660, 735, 790]
    assert len(BandId) == 4
    assert BandId.parse("reg") is BandId.REG
    with pytest.raises(ValueError):
        BandId.parse("blue")


def test_raster_invariants():
    g = RasterGrid(np.arange(6).reshape(2, 3))
    assert (g.height, g.width) == (2, 3)
    assert g.values.dtype == np.float64
    with pytest.raises(ValueError):
        g.values[0, 0] = 5
    with pytest.raises(ValueError):
        RasterGrid(np.array([[-1.0]]))
    with pytest.raises(ValueError):
        RasterGrid(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        RasterGrid(np.zeros((0, 3)))


def test_mask_and_frame_invariants():
    with pytest.raises(ValueError):
        SegmentationMask(np.array([[0, 2]]))
    bands = {b: RasterGrid(np.ones((4, 4))) for b in BAND_ORDER}
    MultispectralFrame.from_aligned(bands)
    bands[BandId.NIR] = RasterGrid(np.ones((4, 5)))
    with pytest.raises(ValueError):
        MultispectralFrame.from_aligned(bands)
    del bands[BandId.NIR]
    with pytest.raises(ValueError):
        MultispectralFrame.from_aligned(bands)
    with pytest.raises(ValueError):
        PseudoRgbImage(np.zeros((4, 4, 4)))


# -- red normalisation ---------------------------------------------------


def test_red_normalize_examples():
    stack = np.array([[[129, 100, 313, 276], [50, 50, 50, 50], [10, 0, 10, 10]]], dtype=float)
    f = red_normalize(_frame(stack, 1000.0))
    np.testing.assert_allclose(f.vectors[0, 0], [1.29, 1.0, 3.13, 2.76])
    np.testing.assert_allclose(f.vectors[0, 1], [1, 1, 1, 1])
    assert f.unreliable.tolist() == [[False, False, True]]
    assert np.all(np.isnan(f.vectors[0, 2]))


def test_red_floor_is_relative_to_dynamic_range():
    stack = np.full((1, 1, 4), 2.0)
    assert red_normalize(_frame(stack, 255.0), 0.01).unreliable[0, 0]       # 2 < 2.55
    assert not red_normalize(_frame(stack, 100.0), 0.01).unreliable[0, 0]   # 2 >= 1
    with pytest.raises(ValueError):
        red_normalize(_frame(stack), 0.0)


@given(arrays(np.float64, (3, 3, 4), elements=st.floats(1.0, 1000.0)), st.floats(0.05, 50.0))
def test_red_normalize_scale_invariant_and_red_is_one(stack, c):
    # range 1 puts the floor at 0.01, below every generated RED value
    a = red_normalize(_frame(stack, 1.0))
    b = red_normalize(_frame(stack * c, 1.0))
    assert not a.unreliable.any() and not b.unreliable.any()
    assert np.all(a.vectors[..., 1] == 1.0)
    np.testing.assert_allclose(a.vectors, b.vectors, rtol=1e-12)


# -- PGM -----------------------------------------------------------------


def test_load_band_16bit_example(tmp_path):
    p = tmp_path / "s_GRE.pgm"
    p.write_bytes(b"P5\n2 2\n65535\n" + np.array([0, 100, 200, 300], ">u2").tobytes())
    g = load_band(p, BandId.GRE)
    assert g.values.tolist() == [[0, 100], [200, 300]]
    assert g.max_value == 65535


def test_load_band_8bit_with_comment(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P5 # camera\n3 1\n255\n" + bytes([0, 128, 255]))
    g = load_band(p)
    assert g.values.tolist() == [[0, 128, 255]]
    assert g.max_value == 255


@pytest.mark.parametrize("payload,err", [
    (b"P5\n2 2\n255\n\x00\x01", MalformedRaster),       # truncated
    (b"P2\n1 1\n255\n0", MalformedRaster),              # ascii variant
    (b"P5\n0 2\n255\n", MalformedRaster),
    (b"P5\n1 1\n70000\n\x00\x00\x00", UnsupportedBitDepth),
    (b"P5\n1 1\n100\n\xff", MalformedRaster),           # sample > maxval
    (b"P5\n2", MalformedRaster),
    (b"", MalformedRaster),
])
def test_malformed_pgm(tmp_path, payload, err):
    p = tmp_path / "bad.pgm"
    p.write_bytes(payload)
    with pytest.raises(err):
        load_band(p)


def test_missing_file(tmp_path):
    with pytest.raises(MissingFile):
        load_band(tmp_path / "nope.pgm")


def test_band_name_must_match(tmp_path):
    p = tmp_path / "s_RED.pgm"
    p.write_bytes(encode_pnm(np.zeros((2, 2), int), 255))
    with pytest.raises(ValueError):
        load_band(p, BandId.NIR)


@pytest.mark.parametrize("labels", [np.zeros((4, 4)), np.ones((4, 4)), np.indices((8, 8)).sum(0) % 2])
def test_mask_round_trip(tmp_path, labels):
    m = SegmentationMask(labels.astype(np.uint8))
    save_mask(m, tmp_path / "m.pgm")
    assert load_mask(tmp_path / "m.pgm") == m
    raw = (tmp_path / "m.pgm").read_bytes()
    assert set(np.unique(decode_pnm(raw)[0])) <= {0, 255}


def test_mask_rejects_grey_values(tmp_path):
    (tmp_path / "m.pgm").write_bytes(encode_pnm(np.array([[0, 7]]), 255))
    with pytest.raises(MalformedRaster):
        load_mask(tmp_path / "m.pgm")


def test_rgb_round_trip(tmp_path):
    data = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255.0
    save_rgb(data, tmp_path / "c.pgm")
    assert (tmp_path / "c.pgm").read_bytes()[:2] == b"P6"
    np.testing.assert_array_equal(load_rgb(tmp_path / "c.pgm"), data)


@given(arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 65535)),
       st.sampled_from([255, 65535]))
def test_pnm_round_trip_property(a, maxval):
    a = np.minimum(a, maxval)
    back, mv = decode_pnm(encode_pnm(a, maxval))
    assert mv == maxval
    np.testing.assert_array_equal(back, a)


# -- TIFF ----------------------------------------------------------------


@given(arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 65535)),
       st.sampled_from([8, 16]))
def test_tiff_round_trip_property(a, bits):
    a = np.minimum(a, 255 if bits == 8 else 65535)
    back, mv = decode_tiff(encode_tiff(a, bits))
    assert mv == (255 if bits == 8 else 65535)
    np.testing.assert_array_equal(back, a)


def test_tiff_big_endian_hand_built(tmp_path):
    # 2x1, 16-bit, MM byte order, strip right after the IFD
    import struct
    entries = [(256, 3, 1, 2), (257, 3, 1, 1), (258, 3, 1, 16), (259, 3, 1, 1), (262, 3, 1, 1),
               (273, 4, 1, 8 + 2 + 12 * 7 + 4), (279, 4, 1, 4)]
    ifd = struct.pack(">H", len(entries))
    for tag, typ, cnt, val in entries:
        ifd += struct.pack(">HHI", tag, typ, cnt) + (struct.pack(">HH", val, 0) if typ == 3 else struct.pack(">I", val))
    buf = b"MM\x00*" + struct.pack(">I", 8) + ifd + b"\x00" * 4 + struct.pack(">HH", 7, 65000)
    p = tmp_path / "s_NIR.tif"
    p.write_bytes(buf)
    assert load_band(p, BandId.NIR).values.tolist() == [[7, 65000]]


@pytest.mark.parametrize("payload", [b"II*\x00", b"XX*\x00\x08\x00\x00\x00", b"II*\x00\xff\x00\x00\x00"])
def test_malformed_tiff(tmp_path, payload):
    p = tmp_path / "b.tif"
    p.write_bytes(payload)
    with pytest.raises(MalformedRaster):
        load_band(p)


def test_raster_save_load_round_trip(tmp_path):
    g = RasterGrid(np.random.default_rng(3).integers(0, 65536, (9, 4)).astype(float), max_value=65535)
    for fmt in ("pgm", "tif"):
        save_raster(g, tmp_path / f"a_GRE.{fmt}", fmt=fmt)
        assert load_band(tmp_path / f"a_GRE.{fmt}", BandId.GRE) == g


def test_find_and_load_scene(tmp_path):
    (tmp_path / "sub").mkdir()
    for b in ("GRE", "red", "REG", "NIR"):
        save_raster(RasterGrid(np.ones((3, 3)), 255), tmp_path / "sub" / f"plot1_{b}.pgm")
    (tmp_path / "sub" / "plot1_truth.pgm").write_bytes(b"")
    scenes = find_scenes(tmp_path)
    assert list(scenes) == ["plot1"]
    assert set(scenes["plot1"]) == set(BAND_ORDER)
    raw = load_scene(scenes["plot1"])
    assert raw[BandId.RED].shape == (3, 3)


def test_save_raster_rounds_fractional_samples(tmp_path):
    g = RasterGrid(np.array([[0.4, 0.5, 254.6, 300.0]]), max_value=255)
    save_raster(g, tmp_path / "w_GRE.pgm")
    assert load_band(tmp_path / "w_GRE.pgm").values.tolist() == [[0, 1, 255, 255]]
