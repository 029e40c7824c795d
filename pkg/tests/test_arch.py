import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import micro, ref_macs
from sparsetune.arch import (CONV2D, DEPTHWISE, RELU6, Layer, ModelSpec, ParamStore, WidthMultiplier,
                             build_backbone, count_macs, init_params, make_divisible)
from sparsetune.errors import StructuralError
from sparsetune.rng import stream


def test_conv_macs_example():
    layer = Layer("c", CONV2D, (3, 16, 16), (8, 16, 16), kernel=3, stride=1, padding=1)
    assert count_macs(layer) == 55_296 == 8 * 3 * 9 * 16 * 16


def test_relu_has_no_macs():
    assert count_macs(Layer("r", RELU6, (8, 5, 5), (8, 5, 5))) == 0


def test_depthwise_macs_example():
    layer = Layer("d", DEPTHWISE, (8, 8, 8), (8, 8, 8), kernel=3, stride=1, padding=1)
    assert count_macs(layer) == 4_608


def test_count_macs_input_override():
    layer = Layer("c", CONV2D, (3, 16, 16), (8, 8, 8), kernel=3, stride=2, padding=1)
    assert count_macs(layer, (32, 32)) == 8 * 3 * 9 * 16 * 16


def test_one_block_micro_matches_hand_sums():
    # stem 3->8 k3 s2 (8x8 out), dw 8 k3, project 8->8, head 8->8, embed 8->8
    spec = micro(blocks=1, channels=8, expansion=1, feature_dim=8, head_channels=8)
    params = [224, 80, 72, 72, 72]
    macs = [13_824, 4_608, 4_096, 4_096, 64]
    assert [spec.layers[i].param_count for i in spec.weight_layers] == params
    assert [spec.layers[i].mac_count for i in spec.weight_layers] == macs
    assert spec.total_params == 520
    assert spec.total_macs == 26_688


@pytest.mark.parametrize("blocks", [1, 2, 3, 4])
def test_metadata_matches_closed_form(blocks):
    spec = micro(blocks=blocks, size=32)
    for layer in spec.layers:
        assert layer.mac_count == ref_macs(layer)
    assert spec.total_params == sum(spec.param_counts)
    assert spec.total_macs == sum(spec.mac_counts)


def test_mobilenet_035_size_anchor():
    spec = build_backbone("mobilenet-v2-like", 0.35, (3, 128, 128))
    assert abs(spec.total_macs - 17.4e6) <= 0.05 * 17.4e6
    assert abs(spec.total_params - 0.29e6) <= 0.05 * 0.29e6


def test_width_halving_halves_raw_channels():
    full, half = WidthMultiplier(1.0), WidthMultiplier(0.5)
    for c in (16, 24, 32, 64, 96, 160, 320, 1280):
        assert half.raw(c) == full.raw(c) / 2


@pytest.mark.parametrize("bad", [0, -0.5, float("nan")])
def test_invalid_width_rejected(bad):
    with pytest.raises(ValueError):
        build_backbone("micro-cnn", bad, (3, 16, 16))


def test_make_divisible():
    assert make_divisible(3) == 8
    assert make_divisible(11.2) == 16  # 8 would lose more than 10%
    assert make_divisible(12) == 16
    assert make_divisible(20) == 24
    assert make_divisible(448) == 448
    assert all(make_divisible(v) % 8 == 0 for v in np.linspace(0.1, 500, 300))


@given(st.floats(0.1, 1.4), st.floats(0.1, 1.4))
def test_width_monotone(a, b):
    lo, hi = sorted((a, b))
    s_lo = build_backbone("mobilenet-v2-like", lo, (3, 64, 64))
    s_hi = build_backbone("mobilenet-v2-like", hi, (3, 64, 64))
    hi_by_name = {layer.name: layer for layer in s_hi.layers}
    for la in s_lo.layers:
        lb = hi_by_name.get(la.name)
        if lb is None:  # rounding can make shapes match and add a residual add
            continue
        assert la.param_count <= lb.param_count
        assert la.mac_count <= lb.mac_count


def test_family_mac_ratios_stable_across_resolution():
    fams = [("mobilenet-v2-like", 0.35), ("mobilenet-v2-like", 0.5), ("mobilenet-v2-like", 1.0)]
    small = [build_backbone(f, w, (3, 64, 64)).total_macs for f, w in fams]
    large = [build_backbone(f, w, (3, 128, 128)).total_macs for f, w in fams]
    for i in range(3):
        for j in range(3):
            assert small[i] / small[j] == pytest.approx(large[i] / large[j], rel=0.02)


def test_metadata_needs_no_weights():
    spec = micro()
    before = (spec.param_counts, spec.mac_counts)
    init_params(spec, stream(0, "init"))
    assert (spec.param_counts, spec.mac_counts) == before


def test_shape_mismatch_names_both_layers():
    a = Layer("first", CONV2D, (3, 8, 8), (4, 8, 8), kernel=3, padding=1)
    b = Layer("second", RELU6, (5, 8, 8), (5, 8, 8))
    with pytest.raises(StructuralError, match="first.*second|second.*first"):
        ModelSpec("custom", 1.0, (3, 8, 8), (a, b), 320)


def test_pointwise_kernel_and_depthwise_channels_enforced():
    with pytest.raises(StructuralError):
        Layer("p", "pointwise-conv2d", (4, 4, 4), (4, 4, 4), kernel=3)
    with pytest.raises(StructuralError):
        Layer("d", DEPTHWISE, (4, 4, 4), (8, 4, 4), kernel=3, padding=1)


def test_spec_round_trip():
    spec = micro(blocks=3, size=32)
    again = ModelSpec.from_dict(spec.to_dict())
    assert again == spec
    assert again.fingerprint() == spec.fingerprint()


def test_param_store_shapes_and_equality():
    spec = micro()
    p = init_params(spec, stream(3, "init"))
    p.check(spec)
    q = p.copy()
    assert p.equals(q)
    q[spec.layers[0].name]["bias"][0] += 1
    assert not p.equals(q)
    bad = ParamStore({k: v for k, v in p.tensors.items() if k != "head"})
    with pytest.raises(StructuralError):
        bad.check(spec)


def test_init_is_seeded():
    spec = micro()
    assert init_params(spec, stream(5, "init")).equals(init_params(spec, stream(5, "init")))
    assert not init_params(spec, stream(5, "init")).equals(init_params(spec, stream(6, "init")))
