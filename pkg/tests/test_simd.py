import re

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from cnn2c import harness, interpreter, zoo
from cnn2c.codegen import CodegenConfig, UnrollLevel, emit_model
from cnn2c.codegen.ssse3 import (
    Reason,
    SimdContractError,
    classify_layers,
    emit_conv_simd,
    emit_leaky_relu_simd,
    emit_maxpool_simd,
    emit_relu_simd,
    layer_eligibility,
)
from cnn2c.model import Conv2D, LeakyReLU, MaxPool2D, Model, ReLU, Shape3
from cnn2c.passes import normalize

from conftest import CC

FULL, NONE = UnrollLevel.full(), UnrollLevel.none()


def test_bundled_nets_first_convs_are_eligible():
    assert classify_layers(zoo.ball_net())[0].eligible
    assert classify_layers(zoo.pedestrian_net())[0].eligible
    robot = normalize(zoo.robot_net())
    convs = [v for v in classify_layers(robot) if v.kind == "conv"]
    assert [v.channels for v in convs] == [8, 12, 8, 16, 20]
    assert all(v.eligible for v in classify_layers(robot))


def test_six_filters_are_ineligible():
    verdict = layer_eligibility(0, Conv2D(np.zeros((1, 1, 1, 6)), np.zeros(6)), Shape3(2, 2, 1))
    assert verdict.reason is Reason.CHANNELS and not verdict.eligible


def test_softmax_and_two_channel_layers_are_not_eligible():
    verdicts = classify_layers(zoo.ball_net())
    assert verdicts[-1].reason is Reason.KIND
    assert verdicts[-2].reason is Reason.CHANNELS


@given(st.integers(1, 40), st.sampled_from(["conv", "pool", "relu", "leaky"]))
def test_eligible_only_when_divisible_by_four(c, kind):
    layer = {
        "conv": Conv2D(np.zeros((1, 1, 1, c)), np.zeros(c)),
        "pool": MaxPool2D((1, 1)),
        "relu": ReLU(),
        "leaky": LeakyReLU(0.25),
    }[kind]
    shape = Shape3(2, 2, 1 if kind == "conv" else c)
    assert layer_eligibility(0, layer, shape).eligible == (c % 4 == 0)


def test_ineligible_layers_violate_the_contract():
    with pytest.raises(SimdContractError):
        emit_conv_simd(Conv2D(np.zeros((1, 1, 1, 6)), np.zeros(6)), Shape3(2, 2, 1))
    with pytest.raises(SimdContractError):
        emit_maxpool_simd(MaxPool2D((2, 2)), Shape3(2, 2, 3))
    with pytest.raises(SimdContractError):
        emit_relu_simd(Shape3(1, 1, 5))


@pytest.mark.parametrize("alpha", [1.0, 1.5])
def test_alpha_of_one_or_more_is_rejected(alpha):
    with pytest.raises(SimdContractError, match="alpha"):
        emit_leaky_relu_simd(alpha, Shape3(1, 1, 4))


@pytest.mark.parametrize("unroll", [NONE, UnrollLevel.keep(3), FULL], ids=str)
def test_no_scalar_multiply_in_simd_conv(unroll):
    conv = Conv2D(np.full((3, 3, 4, 8), 0.5), np.zeros(8), padding="same")
    text = emit_conv_simd(conv, Shape3(4, 4, 4), unroll=unroll).compute
    body = re.sub(r"\[[^\]]*\]", "[]", text)
    assert "*" not in body.replace("const float *", "").replace("float *", "")
    assert "_mm_mul_ps" in text and "_mm_add_ps" in text


def test_fallback_is_noted_in_header():
    src = emit_model(zoo.ball_net(), CodegenConfig(backend="ssse3"))
    assert "emmintrin.h" in src.includes
    assert "uses generic code: channels-not-multiple-of-4" in src.text
    assert src.notes


def test_generic_only_model_under_ssse3_has_no_intrinsics():
    model = Model("m", (2, 2, 3), [ReLU()])
    src = emit_model(model, CodegenConfig(backend="ssse3"))
    assert "_mm_" not in src.text and "emmintrin.h" not in src.includes


# --- compiled checks --------------------------------------------------------

def run_simd(model, x, workdir, unroll=FULL):
    src = emit_model(model, CodegenConfig(backend="ssse3", unroll=unroll, emit_test_harness=True))
    spec = harness.CompilerSpec.for_backend("ssse3", CC)
    art = harness.compile(src, spec, workdir=workdir)
    return harness.run_binary(art.path, np.asarray(x, np.float32)[None], src.output_len)[0]


@pytest.mark.x86
@pytest.mark.needs_cc
def test_leaky_lanes(workdir):
    x = np.float32([-2, 0, 3, -0.5])
    got = run_simd(Model("m", (1, 1, 4), [LeakyReLU(0.1)]), x, workdir)
    assert np.array_equal(got, np.where(x > 0, x, np.float32(0.1) * x))
    assert np.allclose(got, [-0.2, 0, 3, -0.05])


@pytest.mark.x86
@pytest.mark.needs_cc
def test_alpha_zero_is_relu(workdir):
    x = np.float32([-1, 2, -3, 4, 0.5, -0.25, 0, 7])
    got = run_simd(Model("m", (1, 2, 4), [LeakyReLU(0.0)]), x, workdir)
    assert np.array_equal(got, interpreter.relu(x.reshape(1, 2, 4)).ravel())


@pytest.mark.x86
@pytest.mark.needs_cc
def test_identity_block_conv_permutes_channels(workdir):
    perm = [2, 0, 3, 1]
    kernel = np.zeros((1, 1, 4, 4), np.float32)
    for out, src in enumerate(perm):
        kernel[0, 0, src, out] = 1.0
    x = np.arange(12, dtype=np.float32)
    got = run_simd(Model("m", (1, 3, 4), [Conv2D(kernel, np.zeros(4))]), x, workdir)
    assert np.array_equal(got.reshape(3, 4), x.reshape(3, 4)[:, perm])


@pytest.mark.x86
@pytest.mark.needs_cc
def test_pool_constant_and_hand_case(workdir):
    model = Model("m", (2, 2, 4), [MaxPool2D((2, 2))])
    assert np.array_equal(run_simd(model, np.full(16, 0.75), workdir), np.full(4, 0.75, np.float32))
    x = np.float32([1, -5, 0, 2,  3, -6, -1, 2,  -2, -4, 0.5, 9,  0, -7, 0, 1])
    assert np.array_equal(run_simd(model, x, workdir), np.float32([3, -4, 0.5, 9]))


@st.composite
def simd_models(draw):
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    c = 4 * draw(st.integers(1, 2))
    h, w = draw(st.integers(3, 5)), draw(st.integers(2, 5))
    f = 4 * draw(st.integers(1, 3))
    k = draw(st.integers(1, 2))
    layers = [
        Conv2D(rng.uniform(-1, 1, (k, k, c, f)), rng.uniform(-1, 1, f), (1, 1),
               draw(st.sampled_from(["same", "valid"]))),
        draw(st.sampled_from([ReLU(), LeakyReLU(0.1), LeakyReLU(0.3)])),
        MaxPool2D((2, 1)),
    ]
    unroll = draw(st.sampled_from([NONE, UnrollLevel.keep(1), UnrollLevel.keep(2), FULL]))
    return Model("m", (h, w, c), layers), unroll, draw(st.sampled_from([0, 1, 2]))


@pytest.mark.x86
@pytest.mark.needs_cc
@settings(max_examples=20, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(simd_models())
def test_simd_random_models_match_interpreter(workdir, case):
    model, unroll, variant = case
    src = emit_model(model, CodegenConfig(backend="ssse3", unroll=unroll, conv_variant=variant,
                                          emit_test_harness=True))
    spec = harness.CompilerSpec.for_backend("ssse3", CC)
    report = harness.verify_source(model, src, spec, n_inputs=6, seed=9, tolerance=0.0, workdir=workdir)
    assert report.passed, report.summary()
