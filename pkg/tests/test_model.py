import math

import numpy as np
import pytest
from gradcheck import check_gradients, random_problem
from hypothesis import given, settings
from hypothesis import strategies as st

from geofcn import synthgen
from geofcn.data import to_arrays
from geofcn.model import (
    TRANSFORMS,
    BudgetTracker,
    FcnConfig,
    MacCounter,
    TrainingDiverged,
    apply_transform,
    augment,
    batch_loss,
    build_fcn,
    fit_input_normalization,
    forward,
    loss_and_gradients,
    predict,
    train,
)
from geofcn.raster import Modality, Raster
from geofcn.tensor import ShapeError, conv_macs


def small_model(**kw):
    cfg = dict(in_channels=5, num_classes=4, base_filters=4, depth=2, seed=0)
    cfg.update(kw)
    return build_fcn(FcnConfig(**cfg))


def zero_model(model):
    m = model.copy()
    m.set_parameters([np.zeros_like(p) for p in m.parameters()])
    return m


# --- construction ---------------------------------------------------------------


def test_forward_shape_5x64x64():
    model = small_model(base_filters=8)
    x = np.random.default_rng(0).standard_normal((5, 64, 64))
    logits = forward(model, x)
    assert logits.shape == (4, 64, 64)
    assert np.all(np.isfinite(logits))


def test_build_is_deterministic():
    a, b = small_model(seed=11), small_model(seed=11)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.tobytes() == q.tobytes()
    c = small_model(seed=12)
    assert any(p.tobytes() != q.tobytes() for p, q in zip(a.parameters(), c.parameters()))


def test_minimal_architecture_preserves_extent():
    model = build_fcn(FcnConfig(in_channels=1, num_classes=1, base_filters=1, depth=1))
    assert forward(model, np.ones((1, 2, 2))).shape == (1, 2, 2)


def test_skip_concat_channel_counts():
    model = small_model(base_filters=3, depth=3)
    # decoder stage at level d sees up-sampled 3*2^d channels plus the 3*2^(d-1) skip
    assert [p.in_channels for _, p in model.decoder] == [24 + 12, 12 + 6, 6 + 3]
    assert model.head.in_channels == 3


def test_extent_must_divide_by_two_to_the_depth():
    cfg = FcnConfig(depth=2)
    with pytest.raises(ValueError, match="divisible"):
        build_fcn(cfg, tile_extent=(30, 32))
    with pytest.raises(ValueError, match="divisible"):
        forward(build_fcn(cfg), np.zeros((5, 30, 32)))


@pytest.mark.parametrize(
    "kw", [dict(depth=0), dict(base_filters=0), dict(learning_rate=0.0), dict(l2=-1.0), dict(seed=-1), dict(seed=2**64)]
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        FcnConfig(**kw)


def test_channel_mismatch_rejected():
    with pytest.raises(ShapeError, match="channels"):
        forward(small_model(), np.zeros((3, 8, 8)))
    with pytest.raises(ShapeError, match="channels"):
        predict(small_model(), np.zeros((3, 8, 8)))


# --- forward ----------------------------------------------------------------------


def test_zero_weight_model_outputs_head_bias():
    m = zero_model(small_model())
    m.head.bias = np.array([0.5, -1.0, 2.0, 0.25])
    logits = forward(m, np.random.default_rng(0).standard_normal((5, 8, 8)))
    for c in range(4):
        assert np.all(logits[c] == m.head.bias[c])


def test_head_bias_shift_is_additive():
    m = small_model()
    x = np.random.default_rng(1).standard_normal((5, 8, 8))
    base = forward(m, x)
    m2 = m.copy()
    m2.head.bias = m2.head.bias.copy()
    m2.head.bias[2] += 1.75
    shifted = forward(m2, x)
    np.testing.assert_allclose(shifted[2] - base[2], 1.75, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(shifted[[0, 1, 3]], base[[0, 1, 3]])


def test_mac_counter_counts_every_conv():
    m = small_model()
    x = np.zeros((2, 5, 16, 16))
    macs = MacCounter()
    forward(m, x, macs)
    # independent tally: walk the shapes by hand
    f, h = 4, 16
    expected = conv_macs((2, 5, h, h), m.stem)
    expected += conv_macs((2, f, h, h), m.encoder[0]) + conv_macs((2, 2 * f, h // 2, h // 2), m.encoder[1])
    expected += conv_macs((2, 4 * f + 2 * f, h // 2, h // 2), m.decoder[0][1])
    expected += conv_macs((2, 2 * f + f, h, h), m.decoder[1][1])
    expected += conv_macs((2, f, h, h), m.head)
    assert macs.count == expected
    before = macs.count
    forward(m, x[:1], macs)
    assert macs.count > before


# --- gradients ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    # h = 1e-5 keeps the O(h^2) truncation term well under the tolerance
    r = check_gradients(*random_problem(seed), h=1e-5, rtol=1e-4)
    assert r.checked > 500
    assert not r.failures, r.failures[:5]


def test_gradients_with_depth_one_and_odd_classes():
    model, x, y = random_problem(3, base_filters=3, depth=1, in_channels=2, num_classes=3, extent=6)
    r = check_gradients(model, x, y, h=1e-5)
    assert r.checked > 100 and not r.failures


def test_gradient_shapes_match_parameters():
    model, x, y = random_problem(4)
    _, grads = loss_and_gradients(model, x, y)
    assert [g.shape for g in grads] == [p.shape for p in model.parameters()]


# --- augmentation --------------------------------------------------------------------


def test_rot90_label_example():
    assert apply_transform(np.array([[1, 2], [3, 4]]), "rot90").tolist() == [[3, 1], [4, 2]]


def test_rot180_is_an_involution():
    a = np.arange(16).reshape(4, 4)
    assert np.array_equal(apply_transform(apply_transform(a, "rot180"), "rot180"), a)


def test_rot90_then_rot270_is_identity():
    a = np.arange(18).reshape(2, 3, 3)
    assert np.array_equal(apply_transform(apply_transform(a, "rot90"), "rot270"), a)


def test_flip_preserves_class_counts():
    lab = np.random.default_rng(0).integers(0, 4, (8, 8))
    flipped = apply_transform(lab, "flip_h")
    assert np.array_equal(np.bincount(lab.ravel(), minlength=4), np.bincount(flipped.ravel(), minlength=4))


@pytest.mark.parametrize("name", TRANSFORMS)
def test_augment_keeps_image_and_labels_in_register(name):
    rng = np.random.default_rng(0)
    img = rng.standard_normal((3, 6, 6))
    lab = rng.integers(0, 4, (6, 6))
    # channel 0 carries the label map itself, so any misregistration shows up
    img[0] = lab
    out_img, out_lab = augment((img, lab), rng, name)
    assert out_img.shape == img.shape and out_lab.shape == lab.shape
    assert np.array_equal(out_img[0], out_lab)
    assert set(np.unique(out_lab)) <= set(range(4))


def test_augment_draws_every_transform():
    rng = np.random.default_rng(5)
    img = np.arange(16.0).reshape(1, 4, 4)
    seen = set()
    for _ in range(200):
        out, _ = augment((img, img[0]), rng)
        seen.add(out.tobytes())
    assert len(seen) == 6


def test_rotation_rejects_non_square():
    with pytest.raises(ValueError, match="square"):
        augment((np.zeros((1, 4, 6)), np.zeros((4, 6))), np.random.default_rng(0), "rot90")


# --- training ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_data():
    scenes = synthgen.generate_dataset(500, 12, synthgen.SceneSpec(width=32, height=32))
    images, labels = to_arrays(scenes)
    return (images[:8], labels[:8]), (images[8:], labels[8:])


def test_epochs_zero_is_a_no_op(tiny_data):
    model = small_model(epochs=0)
    out, hist = train(model, tiny_data[0], tiny_data[1])
    assert out is model
    assert hist.records == []


def test_training_is_deterministic(tiny_data):
    model = fit_input_normalization(small_model(epochs=2, batch_size=4), tiny_data[0][0])
    a, ha = train(model, *tiny_data)
    b, hb = train(model, *tiny_data)
    assert [r.train_loss for r in ha.records] == [r.train_loss for r in hb.records]
    assert [r.val_loss for r in ha.records] == [r.val_loss for r in hb.records]
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.tobytes() == q.tobytes()


def test_training_does_not_mutate_input(tiny_data):
    model = small_model(epochs=1, batch_size=4)
    before = [p.copy() for p in model.parameters()]
    train(model, *tiny_data)
    for p, q in zip(before, model.parameters()):
        assert np.array_equal(p, q)


def test_best_snapshot_has_lowest_validation_loss(tiny_data):
    model = fit_input_normalization(small_model(epochs=4, batch_size=4, learning_rate=0.2), tiny_data[0][0])
    best, hist = train(model, *tiny_data)
    val = batch_loss(best, *tiny_data[1])
    assert len(hist.records) == 4
    assert val <= min(hist.val_losses) + 1e-12
    assert math.isclose(val, hist.val_losses[hist.best_epoch], rel_tol=1e-12)


def test_budget_exhausted_before_first_epoch(tiny_data):
    model = small_model(epochs=3)
    out, hist = train(model, *tiny_data, budget=BudgetTracker(max_macs=1))
    assert out is model
    assert not hist.complete and hist.records == []


def test_time_budget_halts_at_epoch_boundary(tiny_data):
    ticks = iter(range(1000))
    budget = BudgetTracker(max_seconds=2.5, clock=lambda: float(next(ticks)))
    _, hist = train(small_model(epochs=10, batch_size=4), *tiny_data, budget=budget)
    assert 1 <= len(hist.records) < 10
    macs = [r.macs for r in hist.records]
    assert macs == sorted(macs)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(tiny_data):
    model = small_model(epochs=3, learning_rate=1e200)
    with pytest.raises(TrainingDiverged):
        train(model, *tiny_data, augment_data=False)


def test_training_reduces_loss(tiny_data):
    model = fit_input_normalization(small_model(epochs=6, batch_size=2, learning_rate=0.1), tiny_data[0][0])
    _, hist = train(model, tiny_data[0], None)
    assert hist.train_losses[-1] < 0.7 * hist.initial_train_loss


# --- prediction ------------------------------------------------------------------------


def test_predict_dominated_class():
    m = zero_model(small_model())
    m.head.bias = np.array([0.0, 0.0, 5.0, 0.0])
    r = Raster(np.zeros((5, 8, 8), np.float32), Modality.FUSED)
    lab = predict(m, r)
    assert lab.ids.shape == (8, 8) and np.all(lab.ids == 2)


def test_predict_tie_goes_to_lowest_class():
    m = zero_model(small_model())
    m.head.bias = np.array([0.0, 3.0, 1.0, 3.0])
    assert np.all(predict(m, np.zeros((5, 8, 8))).ids == 1)


@settings(max_examples=15, deadline=None)
@given(h=st.integers(3, 13), w=st.integers(3, 13))
def test_predict_pads_and_crops_odd_extents(h, w):
    m = small_model(base_filters=2)
    x = np.random.default_rng(h * 31 + w).standard_normal((5, h, w))
    lab = predict(m, x)
    assert lab.ids.shape == (h, w)
    assert lab.ids.max() < 4
