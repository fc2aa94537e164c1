"""Patch compositing, the three losses and patch optimization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import FieldStub, MeanFieldStub, check_gradient
from patchframe import autograd as ag
from patchframe.attack import (
    AdversarialPatch,
    AttackConfig,
    PrintabilityPalette,
    TransformSample,
    apply_patch,
    canonical_transform,
    load_palette,
    loss_nps,
    loss_obj,
    loss_tv,
    optimize_patch,
    patch_footprint,
    sample_transform,
    transform_for_image,
)
from patchframe.boxes import BoundingBox
from patchframe.data import LabeledDataset, Sample
from patchframe.detector import max_objectness
from patchframe.rng import generator

BOX = BoundingBox(0.5, 0.5, 0.55, 0.7)


def _image(seed=0, size=104):
    return np.random.default_rng(seed).random((size, size, 3))


# ------------------------------------------------------------------
# apply_patch
# ------------------------------------------------------------------


def test_apply_patch_no_boxes_bit_exact():
    x = _image(1)
    p = AdversarialPatch(np.random.default_rng(2).random((16, 16, 3)))
    out = apply_patch(x, [], p, canonical_transform())
    assert np.array_equal(out, x)


def test_apply_patch_identity_transform_solid_color():
    x = _image(3)
    color = np.array([0.2, 0.6, 0.9])
    p = AdversarialPatch(np.tile(color, (16, 16, 1)))
    t = TransformSample(scale=1.0, brightness=0.0, contrast=1.0, noise_amplitude=0.0, rotation_deg=0.0)
    out = apply_patch(x, [BOX], p, t, scale_factor=0.4)
    mask = patch_footprint(x.shape[:2], [BOX], t, 16, scale_factor=0.4)
    assert mask.sum() > 0
    assert np.allclose(out[mask], color, atol=1e-9)
    assert np.array_equal(out[~mask], x[~mask])


def test_apply_patch_touches_only_footprint():
    x = _image(4)
    p = AdversarialPatch(np.random.default_rng(5).random((12, 12, 3)))
    t = sample_transform(generator(7), patch_side=12)
    out = apply_patch(x, [BOX], p, t, scale_factor=0.45)
    mask = patch_footprint(x.shape[:2], [BOX], t, 12, scale_factor=0.45)
    changed = np.any(out != x, axis=2)
    assert not np.any(changed & ~mask)


def test_apply_patch_footprint_area_matches_rotated_square():
    x = np.zeros((200, 200, 3))
    box = BoundingBox(0.5, 0.5, 0.6, 0.6)
    t = TransformSample(scale=1.0, rotation_deg=31.0)
    side_px = 0.4 * 1.0 * min(box.w, box.h) * 200  # 48 px
    mask = patch_footprint(x.shape[:2], [box], t, 24, scale_factor=0.4)
    assert mask.sum() == pytest.approx(side_px**2, rel=0.10)


def test_apply_patch_ignores_non_person_boxes():
    x = _image(6)
    other = BoundingBox(0.5, 0.5, 0.5, 0.5, class_id=3)
    p = AdversarialPatch(np.zeros((8, 8, 3)))
    out = apply_patch(x, [other], p, canonical_transform())
    assert np.array_equal(out, x)


def test_apply_patch_values_clamped_after_adjustment():
    x = _image(7)
    p = AdversarialPatch(np.ones((8, 8, 3)))
    t = TransformSample(scale=1.0, brightness=0.1, contrast=1.2, noise_amplitude=0.1)
    out = apply_patch(x, [BOX], p, t, scale_factor=0.4)
    assert out.max() <= 1.0 and out.min() >= 0.0


# ------------------------------------------------------------------
# losses
# ------------------------------------------------------------------


def test_loss_obj_zero_field():
    stub = FieldStub(np.zeros((13, 13)))
    p = AdversarialPatch(np.random.default_rng(0).random((8, 8, 3)))
    assert loss_obj(stub, _image(0), [BOX], p, canonical_transform()) == 0.0


def test_loss_obj_equals_max_objectness_composition(toy_detector):
    x = _image(8)
    p = AdversarialPatch(np.random.default_rng(9).random((16, 16, 3)))
    t = transform_for_image("img", 0)
    got = loss_obj(toy_detector, x, [BOX], p, t, scale_factor=0.45)
    expected = max_objectness(toy_detector, apply_patch(x, [BOX], p, t, scale_factor=0.45))
    assert got == pytest.approx(expected, abs=1e-12)


def test_loss_obj_ensemble_is_sum_of_singles():
    f1 = np.random.default_rng(1).random((13, 13))
    f2 = np.random.default_rng(2).random((13, 13))
    p = AdversarialPatch(np.random.default_rng(3).random((8, 8, 3)))
    x = _image(9)
    t = canonical_transform()
    both = loss_obj([FieldStub(f1), FieldStub(f2)], x, [BOX], p, t)
    one = loss_obj([FieldStub(f1)], x, [BOX], p, t)
    two = loss_obj([FieldStub(f2)], x, [BOX], p, t)
    assert both == pytest.approx(one + two, abs=1e-9)
    # per-prior clamped sum oracle
    assert one == pytest.approx(np.maximum(f1, 0.0).sum(), abs=1e-9)


def test_loss_obj_empty_ensemble_errors():
    p = AdversarialPatch(np.zeros((8, 8, 3)))
    with pytest.raises(ValueError):
        loss_obj([], _image(0), [BOX], p, canonical_transform())


def test_loss_tv_constant_patch_near_zero():
    p = AdversarialPatch(np.full((2, 2, 3), 0.5))
    assert loss_tv(p) <= 1e-3


def test_loss_tv_hand_expanded_2x2():
    vals = np.zeros((2, 2, 1))
    vals[0, 1, 0] = 1.0
    vals[1, 1, 0] = 1.0
    # single interior cell: down-diff 0, right-diff 1 -> sqrt(1 + eps)
    patch3 = np.repeat(vals, 3, axis=2)
    got = loss_tv(AdversarialPatch(patch3))
    assert got == pytest.approx(3 * np.sqrt(1.0 + 1e-8), abs=1e-9)


def _tv_oracle(vals):
    s = vals.shape[0]
    total = 0.0
    for c in range(vals.shape[2]):
        for i in range(s - 1):
            for j in range(s - 1):
                dd = vals[i, j, c] - vals[i + 1, j, c]
                dr = vals[i, j, c] - vals[i, j + 1, c]
                total += np.sqrt(dd * dd + dr * dr + 1e-8)
    return total


def test_loss_tv_matches_scalar_loop_oracle():
    vals = np.random.default_rng(10).random((9, 9, 3))
    assert loss_tv(AdversarialPatch(vals)) == pytest.approx(_tv_oracle(vals), abs=1e-9)


def test_loss_tv_degree_one_homogeneity():
    vals = np.random.default_rng(11).random((8, 8, 3)) * 0.4
    one = loss_tv(AdversarialPatch(vals))
    two = loss_tv(AdversarialPatch(vals * 2.0))
    assert two == pytest.approx(2.0 * one, rel=1e-6)


def test_loss_tv_rejects_tiny_patch():
    with pytest.raises(ValueError):
        loss_tv(AdversarialPatch(np.zeros((1, 1, 3))))


def test_loss_nps_zero_on_palette_colors():
    pal = load_palette()
    rng = np.random.default_rng(12)
    picks = pal.colors[rng.integers(0, len(pal.colors), size=64)]
    p = AdversarialPatch(picks.reshape(8, 8, 3))
    assert loss_nps(p, pal) == 0.0


def test_loss_nps_single_offpalette_pixel():
    pal = PrintabilityPalette(np.array([[0.0, 0.0, 0.0]]))
    vals = np.zeros((2, 2, 3))
    vals[0, 0] = (0.3, 0.4, 0.0)
    p = AdversarialPatch(vals)
    assert loss_nps(p, pal) == pytest.approx(0.5, abs=1e-12)


def test_loss_nps_matches_double_loop_oracle():
    pal = load_palette()
    vals = np.random.default_rng(13).random((6, 6, 3))
    total = 0.0
    for i in range(6):
        for j in range(6):
            best = min(np.linalg.norm(vals[i, j] - c) for c in pal.colors)
            total += best
    assert loss_nps(AdversarialPatch(vals), pal) == pytest.approx(total, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_nps_zero_iff_on_palette(seed):
    pal = PrintabilityPalette(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 0.25, 0.75]]))
    rng = np.random.default_rng(seed)
    on_palette = rng.random() < 0.5
    if on_palette:
        vals = pal.colors[rng.integers(0, 3, size=16)].reshape(4, 4, 3)
    else:
        vals = np.clip(rng.random((4, 4, 3)), 0, 1)
        off = not all(
            any(np.linalg.norm(vals[i, j] - c) < 1e-9 for c in pal.colors) for i in range(4) for j in range(4)
        )
        if not off:
            vals[0, 0] = (0.1, 0.9, 0.4)
    got = loss_nps(AdversarialPatch(vals), pal)
    assert (got <= 1e-9) == on_palette


# ------------------------------------------------------------------
# gradients through the losses
# ------------------------------------------------------------------


def test_loss_gradients_match_finite_differences(toy_detector):
    rng = np.random.default_rng(14)
    vals = rng.random((12, 12, 3)) * 0.8 + 0.1
    pal = load_palette()
    x = _image(15)
    t = TransformSample(scale=0.9, brightness=0.02, contrast=1.05, noise_amplitude=0.01, rotation_deg=9.0)

    cases = {
        "tv": (lambda v: loss_tv(v), lambda a: loss_tv(AdversarialPatch(a))),
        "nps": (lambda v: loss_nps(v, pal), lambda a: loss_nps(AdversarialPatch(a), pal)),
        "obj": (
            lambda v: loss_obj(toy_detector, ag.Var(x), [BOX], v, t, scale_factor=0.45),
            lambda a: loss_obj(toy_detector, x, [BOX], AdversarialPatch(a), t, scale_factor=0.45),
        ),
    }
    for name, (f_var, f_plain) in cases.items():
        err = check_gradient(f_var, f_plain, vals.copy(), n_coords=20, h=1e-5, seed=16)
        assert err < 1e-3, f"{name}: {err}"


# ------------------------------------------------------------------
# transforms
# ------------------------------------------------------------------


def test_transform_ranges():
    rng = generator(0, "ranges")
    for _ in range(200):
        t = sample_transform(rng)
        assert 0.5 <= t.scale <= 1.0
        assert -0.1 <= t.brightness <= 0.1
        assert 0.8 <= t.contrast <= 1.2
        assert -0.1 <= t.noise_amplitude <= 0.1
        assert -20.0 <= t.rotation_deg <= 20.0
        assert not t.tps_enabled


def test_eot_sequence_reproducible():
    a = [sample_transform(generator(3, "eot", i)) for i in range(5)]
    b = [sample_transform(generator(3, "eot", i)) for i in range(5)]
    for ta, tb in zip(a, b):
        assert ta.scale == tb.scale and ta.rotation_deg == tb.rotation_deg


def test_transform_for_image_keyed_by_id():
    t1 = transform_for_image("img-a", 7)
    t2 = transform_for_image("img-a", 7)
    t3 = transform_for_image("img-b", 7)
    assert t1.scale == t2.scale and t1.rotation_deg == t2.rotation_deg
    assert (t1.scale, t1.rotation_deg) != (t3.scale, t3.rotation_deg)


# ------------------------------------------------------------------
# optimize_patch
# ------------------------------------------------------------------


def _tiny_dataset(n=4, seed=20):
    samples = []
    rng = np.random.default_rng(seed)
    for k in range(n):
        samples.append(Sample(f"t{k}", rng.random((104, 104, 3)), [BOX]))
    return LabeledDataset(samples, "train")


def test_optimize_patch_tv_only_smooths():
    ds = _tiny_dataset()
    stub = MeanFieldStub()
    cfg = AttackConfig(steps=40, seed=3, loss_weights=(0.0, 2.5, 0.0), patch_side=12, batch_size=2)
    init_tv = loss_tv(AdversarialPatch.gaussian_init(12, generator(3, "patch-init")))
    patch = optimize_patch(stub, ds, cfg)
    assert loss_tv(patch) < init_tv
    assert patch.values.min() >= 0.0 and patch.values.max() <= 1.0


def test_optimize_patch_deterministic_digest():
    ds = _tiny_dataset()
    stub = MeanFieldStub()
    cfg = AttackConfig(steps=6, seed=11, patch_side=8, batch_size=2)
    p1 = optimize_patch(stub, ds, cfg)
    p2 = optimize_patch(stub, ds, cfg)
    assert p1.digest() == p2.digest()


def test_optimize_patch_reduces_objectness(toy_detector, small_train, strong_patch):
    from patchframe.attack import apply_patch as ap

    clean_vals, patched_vals = [], []
    for s in small_train.samples[:16]:
        t = transform_for_image(s.image_id, 9)
        clean_vals.append(max_objectness(toy_detector, s.image))
        patched_vals.append(
            max_objectness(toy_detector, ap(s.image, s.boxes, strong_patch, t, scale_factor=0.45))
        )
    assert np.mean(patched_vals) < np.mean(clean_vals)


def test_optimize_patch_empty_dataset_errors():
    with pytest.raises(ValueError):
        optimize_patch(MeanFieldStub(), LabeledDataset([], "train"), AttackConfig(steps=1))


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(variant="bogus")
    with pytest.raises(ValueError):
        AttackConfig(steps=0)
    with pytest.raises(ValueError):
        AttackConfig(lr=0.0)


def test_tshirt_variant_enables_tps():
    ds = _tiny_dataset()
    stub = MeanFieldStub()
    seen = []
    cfg = AttackConfig(variant="adv-tshirt", steps=4, seed=2, patch_side=8, batch_size=1)
    optimize_patch(stub, ds, cfg, on_step=lambda step, t, loss: seen.append(t))
    assert len(seen) == 4
    assert all(t.tps_enabled and t.tps_displacements is not None for t in seen)


def test_cloak_variant_uses_summed_loss():
    field = np.random.default_rng(5).random((13, 13))
    stub = FieldStub(field)
    p = AdversarialPatch(np.random.default_rng(6).random((8, 8, 3)))
    x = _image(21)
    t = canonical_transform()
    as_list = loss_obj([stub], x, [BOX], p, t)
    summed = loss_obj(stub, x, [BOX], p, t, reduce="sum")
    assert as_list == pytest.approx(summed, abs=1e-12)
