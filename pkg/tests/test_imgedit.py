import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revdesign import imgedit
from revdesign.errors import UnknownOpError
from revdesign.imgedit import EditOp, EditSpec, OP_NAMES, apply_op, apply_spec, synth_image


def test_synth_deterministic():
    a = synth_image(42)
    b = synth_image(42)
    assert np.array_equal(a, b)


def test_synth_seeds_differ():
    assert not np.array_equal(synth_image(1), synth_image(2))


@pytest.mark.parametrize("seed", [0, 1, 7, 123456789, 2**63])
def test_synth_postconditions(seed):
    img = synth_image(seed)
    assert img.shape == (32, 32, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert img.var(axis=(0, 1)).min() >= 0.005


@pytest.mark.parametrize("name", OP_NAMES)
def test_identity_at_zero_is_bitwise(name):
    img = synth_image(5)
    out = apply_op(img, EditOp(name, 0.0))
    assert np.array_equal(out, img)
    assert out is not img


def test_brightness_hand_value():
    img = np.full((32, 32, 3), 0.2)
    out = apply_op(img, EditOp("brightness", 1.0))
    assert np.allclose(out, 0.7, atol=1e-15)


def test_contrast_hand_value():
    img = np.full((32, 32, 3), 0.8)
    out = apply_op(img, EditOp("contrast", -1.0))
    assert np.allclose(out, 0.5, atol=1e-15)


def test_gamma_hand_value():
    img = np.full((32, 32, 3), 0.25)
    out = apply_op(img, EditOp("gamma", 1.0))
    assert np.allclose(out, 0.5, atol=1e-15)


def test_saturation_full_desat_is_luma():
    img = synth_image(3)
    out = apply_op(img, EditOp("saturation", -1.0))
    luma = img @ np.array([0.299, 0.587, 0.114])
    assert np.allclose(out, np.clip(np.repeat(luma[..., None], 3, -1), 0, 1), atol=1e-12)


def test_unknown_op_rejected():
    with pytest.raises(UnknownOpError):
        EditOp("sharpness", 0.5)

    class FakeOp:
        name = "blur"
        value = 0.5

    with pytest.raises(UnknownOpError):
        apply_op(synth_image(1), FakeOp())


def test_value_range_enforced():
    with pytest.raises(ValueError):
        EditOp("brightness", 1.5)


def test_spec_invariants():
    with pytest.raises(ValueError):
        EditSpec(())
    with pytest.raises(ValueError):
        EditSpec(tuple(EditOp(n, 0.5) for n in ("hue", "hue")))
    with pytest.raises(ValueError):
        EditSpec(tuple(EditOp(n, 0.5) for n in ("hue", "gamma", "contrast", "brightness")))


def test_apply_spec_identity_and_singleton():
    img = synth_image(9)
    ident = EditSpec(tuple(EditOp(n, 0.0) for n in ("brightness", "hue")))
    assert np.array_equal(apply_spec(img, ident), img)
    single = EditSpec((EditOp("brightness", 0.4),))
    assert np.array_equal(apply_spec(img, single), apply_op(img, EditOp("brightness", 0.4)))


def test_apply_spec_order_sensitive():
    img = synth_image(11)
    ab = apply_spec(img, EditSpec((EditOp("brightness", 0.4), EditOp("contrast", -0.2))))
    ba = apply_spec(img, EditSpec((EditOp("contrast", -0.2), EditOp("brightness", 0.4))))
    assert not np.array_equal(ab, ba)


@pytest.mark.parametrize("name", OP_NAMES)
@pytest.mark.parametrize("p", [0.1, -0.1])
def test_non_triviality_at_dead_zone_edge(name, p):
    img = synth_image(17)
    out = apply_op(img, EditOp(name, p))
    assert not np.array_equal(out, img)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=2**32),
    name=st.sampled_from(OP_NAMES),
    value=st.floats(min_value=-1.0, max_value=1.0, allow_nan=False),
)
def test_property_range_and_determinism(seed, name, value):
    img = synth_image(seed)
    out1 = apply_op(img, EditOp(name, value))
    out2 = apply_op(img, EditOp(name, value))
    assert np.array_equal(out1, out2)
    assert out1.min() >= 0.0 and out1.max() <= 1.0


def test_png_round_trip(tmp_path):
    img = synth_image(21)
    path = tmp_path / "x.png"
    imgedit.write_png(img, path)
    raw = imgedit.read_png_bytes(path)
    assert np.array_equal(raw, imgedit.to_bytes(img))
    back = imgedit.from_bytes(raw)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
