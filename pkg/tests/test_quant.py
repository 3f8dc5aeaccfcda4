from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crowncut.exceptions import ConfigMismatch, EmptyCalibrationSet, MalformedModelFile, MissingCalibration, ShapeMismatch
from crowncut.quant import (Multiplier, QuantParams, calibrate, compare_models, dequantize,
                            float_payload_bytes, int_forward, int_forward_full, int_predict, load_qmodel, quantize,
                            quantize_model, quantize_weights, round_half_away, save_qmodel)
from crowncut.quant.model import _int_conv
from crowncut.quant.scheme import quantize_bias, requantize
from crowncut.unet.model import UNetConfig, activation_names, build_model, forward
from crowncut.unet.train import Dataset, TrainingConfig, fit_model

from helpers import disc_pairs

TINY = UNetConfig(depth=2, base_channels=4, input_size=16)


@pytest.fixture(scope="module")
def trained():
    imgs, masks = disc_pairs(24, size=16, seed=3)
    model = build_model(TINY, seed=0)
    fit_model(model, Dataset(imgs, masks), TrainingConfig(epochs=40))
    q = quantize_model(model, calibrate(model, imgs, n=10))
    return model, q, imgs, masks


def _half_away(fr: Fraction) -> int:
    mag = (abs(fr.numerator) * 2 + fr.denominator) // (2 * fr.denominator)
    return mag if fr >= 0 else -mag


# -- scheme --------------------------------------------------------------


def test_round_half_away():
    assert round_half_away([0.5, 1.5, 2.5, -0.5, -1.5, 0.49, -2.51]).tolist() == [1, 2, 3, -1, -2, 0, -3]


def test_quant_params_validation():
    with pytest.raises(ValueError):
        QuantParams(0.0)
    with pytest.raises(ValueError):
        QuantParams(1.0, 200)
    assert QuantParams(1.0, 200, "uint8").zero_point == 200
    p = QuantParams.from_range(0.3, 2.0)
    assert dequantize(quantize(0.0, p), p) == 0.0            # range widened to include 0
    assert QuantParams.from_range(0.0, 0.0).scale == 1.0


@given(st.floats(-50, 50), st.floats(0.01, 50), st.floats(0, 1))
def test_quantize_error_within_half_scale(lo, width, frac):
    p = QuantParams.from_range(lo, lo + width)
    lo_w, hi_w = min(lo, 0.0), max(lo + width, 0.0)
    x = lo_w + frac * (hi_w - lo_w)
    assert abs(dequantize(quantize(x, p), p) - x) <= p.scale / 2 + 1e-9 * max(1.0, abs(x))


def test_weight_scale_example():
    w = np.array([1.27, -0.5, 0.0, 0.005, -1.27])
    q, p = quantize_weights(w)
    assert p.scale == pytest.approx(0.01) and p.zero_point == 0
    assert q.tolist() == [127, -50, 0, 1, -127]
    z, pz = quantize_weights(np.zeros((3, 2, 3, 3)))
    assert np.all(z == 0) and pz.scale > 0


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30))
def test_symmetric_weights_keep_zero(vals):
    w = np.array(vals + [0.0])
    q, p = quantize_weights(w)
    assert q[-1] == 0 and np.all(np.abs(q) <= 127)
    assert np.all(np.abs(q * p.scale - w) <= p.scale / 2 + 1e-12)


def test_bias_quantization():
    assert quantize_bias(np.array([0.25, -0.25, 1e12]), 0.1).tolist() == [3, -3, 2 ** 31 - 1]


@given(st.floats(1e-6, 0.999), st.integers(-(2 ** 31), 2 ** 31 - 1))
def test_multiplier_matches_exact_oracle(m, acc):
    mult = Multiplier.from_real(m)
    assert 2 ** 30 <= mult.q31 < 2 ** 31
    assert abs(mult.real - m) <= m * 2.0 ** -30
    got = int(mult.apply(np.array([acc]))[0])
    # exact rescale by the fixed-point factor
    assert got == _half_away(Fraction(acc * mult.q31, 2 ** mult.shift))
    # and within one unit of the real-valued product
    assert abs(got - _half_away(Fraction(acc) * Fraction(m))) <= 1


def test_multiplier_rejects_bad_values():
    for m in (0.0, -1.0, float("inf"), 2.0 ** 40):
        with pytest.raises(ValueError):
            Multiplier.from_real(m)


def test_requantize_clamps():
    m = Multiplier.from_real(0.5)
    assert requantize(np.array([1000, -1000, 3]), m, 10, -128, 127).tolist() == [127, -128, 12]


@given(st.integers(0, 2 ** 16))
def test_int_conv_monotone(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 60, (1, 6, 6, 3)).astype(np.int8)
    b = (a + rng.integers(0, 60, a.shape)).astype(np.int8)
    taps = rng.integers(0, 127, (9, 3, 4)).astype(np.int32)
    bias = rng.integers(-100, 100, 4).astype(np.int32)
    lo = _int_conv(a, 0, taps, bias, 3, 3, 1)
    hi = _int_conv(b, 0, taps, bias, 3, 3, 1)
    assert np.all(hi >= lo)


# -- calibration ---------------------------------------------------------


def test_calibrate_zero_image_and_relu_min():
    model = build_model(TINY, seed=1)
    cal = calibrate(model, np.zeros((1, 3, 16, 16)))
    assert set(cal.ranges) == set(activation_names(TINY))
    for lo, hi in cal.widened().values():
        assert lo <= 0 <= hi
    cal = calibrate(model, np.random.default_rng(0).random((3, 3, 16, 16)))
    for name, (lo, hi) in cal.ranges.items():
        if name.endswith("conv1") or name.endswith("conv2") or name.endswith("pool"):
            assert lo == 0.0


def test_calibration_is_union_of_per_image_ranges():
    model = build_model(TINY, seed=2)
    imgs = np.random.default_rng(1).random((5, 3, 16, 16))
    union = calibrate(model, imgs, batch_size=2)
    singles = [calibrate(model, imgs[i]) for i in range(5)]
    for name, (lo, hi) in union.ranges.items():
        assert lo == pytest.approx(min(s.ranges[name][0] for s in singles), rel=1e-6, abs=1e-7)
        assert hi == pytest.approx(max(s.ranges[name][1] for s in singles), rel=1e-6, abs=1e-7)
    assert calibrate(model, imgs, n=2).count == 2


def test_calibration_errors():
    model = build_model(TINY)
    with pytest.raises(EmptyCalibrationSet):
        calibrate(model, np.zeros((0, 3, 16, 16)))
    with pytest.raises(EmptyCalibrationSet):
        calibrate(model, np.zeros((2, 3, 16, 16)), n=0)
    with pytest.raises(ShapeMismatch):
        calibrate(model, np.zeros((1, 1, 16, 16)))
    cal = calibrate(model, np.zeros((1, 3, 16, 16)))
    del cal.ranges["dec0.concat"]
    with pytest.raises(MissingCalibration):
        quantize_model(model, cal)


# -- quantized model -----------------------------------------------------


def test_quantized_structure(trained):
    model, q, _, _ = trained
    assert all(t.params.zero_point == 0 for t in q.weights.values())
    assert all(t.values.dtype == np.int8 for t in q.weights.values())
    assert all(b.dtype == np.int32 for b in q.biases.values())
    assert set(q.activations) == set(activation_names(TINY))
    assert q.activations["head"].dtype == "uint8"
    assert q.activations["enc0.pool"] == q.activations["enc0.conv2"]


def test_zero_input_zero_weights_zero_logits():
    model = build_model(TINY)
    for w, b in model.params.values():
        w[...] = 0
    q = quantize_model(model, calibrate(model, np.zeros((1, 3, 16, 16))))
    assert np.all(int_forward(q, np.zeros((3, 16, 16))) == 0)


def test_int_forward_deterministic_across_threads(trained):
    _, q, imgs, _ = trained
    a = int_forward_full(q, imgs[:4], threads=1, keep=True)
    b = int_forward_full(q, imgs[:4], threads=1, keep=True)
    c = int_forward_full(q, imgs[:4], threads=3, keep=True)
    for name in a.intermediates:
        assert a.intermediates[name].tobytes() == b.intermediates[name].tobytes()
        assert a.intermediates[name].tobytes() == c.intermediates[name].tobytes()
    assert a.logits.tobytes() == c.logits.tobytes()
    assert all(t.dtype in (np.int8, np.uint8) for t in a.intermediates.values())


def test_int_agrees_with_float(trained):
    model, q, imgs, masks = trained
    fl = forward(model, imgs)
    fpred = (fl[:, 1] > fl[:, 0])
    assert np.mean(int_predict(q, imgs) == fpred) >= 0.98
    # dequantized logits stay close to float logits
    assert np.mean(np.abs(int_forward(q, imgs) - fl)) < 0.1 * np.mean(np.abs(fl))


def test_compare_models(trained):
    model, q, imgs, masks = trained
    cmp = compare_models(model, q, Dataset(imgs, masks))
    assert abs(cmp.delta) <= 0.02
    assert cmp.size_ratio <= 0.30
    assert cmp.as_dict()["quant_acc"] == cmp.quant_acc
    with pytest.raises(ValueError):
        compare_models(model, q, Dataset(imgs[:0], masks[:0]))


def test_constant_dataset_delta_zero():
    imgs = np.full((4, 3, 16, 16), 0.5, np.float32)
    masks = np.zeros((4, 16, 16), np.uint8)
    model = build_model(TINY, seed=0)
    model.params["head"][1][:] = [1.0, -1.0]     # confidently class 0 everywhere
    for w, _ in model.params.values():
        w *= 0.1
    q = quantize_model(model, calibrate(model, imgs))
    assert compare_models(model, q, Dataset(imgs, masks)).delta == 0


def test_payload_ratio_large_model():
    model = build_model(UNetConfig(base_channels=16, input_size=64))
    q = quantize_model(model, calibrate(model, np.random.default_rng(0).random((1, 3, 64, 64))))
    ratio = q.payload_bytes() / float_payload_bytes(model)
    assert 0.25 <= ratio <= 0.26


def test_int_forward_shape_mismatch(trained):
    _, q, _, _ = trained
    with pytest.raises(ShapeMismatch):
        int_forward(q, np.zeros((1, 16, 16)))


def test_qmodel_round_trip(tmp_path, trained):
    _, q, imgs, _ = trained
    nbytes = save_qmodel(q, tmp_path / "m.qunet")
    assert nbytes == sum(t.values.nbytes for t in q.weights.values()) + sum(b.nbytes for b in q.biases.values())
    back = load_qmodel(tmp_path / "m.qunet", expected_config=TINY)
    assert back.activations == q.activations
    assert int_forward(back, imgs[:2]).tobytes() == int_forward(q, imgs[:2]).tobytes()
    with pytest.raises(ConfigMismatch):
        load_qmodel(tmp_path / "m.qunet", expected_config=UNetConfig(depth=2, base_channels=8, input_size=16))
    (tmp_path / "bad.qunet").write_bytes((tmp_path / "m.qunet").read_bytes()[:-5])
    with pytest.raises(MalformedModelFile):
        load_qmodel(tmp_path / "bad.qunet")


def test_float_file_is_not_a_qmodel(tmp_path):
    from crowncut.unet.io import save_model
    save_model(build_model(TINY), tmp_path / "f.unet")
    with pytest.raises(MalformedModelFile):
        load_qmodel(tmp_path / "f.unet")


def test_quantized_estimator(trained):
    from crowncut.unet import QuantizedSegmenter, UNetSegmenter
    model, q, imgs, masks = trained
    est = UNetSegmenter.from_model(model)
    qe = est.quantize(imgs, n=10)
    np.testing.assert_array_equal(qe.predict(imgs), int_predict(q, imgs))
    assert abs(qe.score(imgs, masks) - est.score(imgs, masks)) <= 0.02
    assert QuantizedSegmenter.from_qmodel(q).get_params() == {"threads": 1}
