import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedbayes.aggregation import ClientUpdate
from fedbayes.attacks import (
    AttackSpec,
    TriggerPattern,
    apply_attack,
    apply_backdoor,
    apply_label_flip,
    cross_trigger,
    inflate_report,
    poison_test_set,
    round_half_away,
    triggered_mask,
)
from fedbayes.datasets import synth_generate
from fedbayes.nn import init_params

from conftest import flat_dataset


@pytest.fixture
def digits():
    return synth_generate(seed=4, per_class=10, class_count=10, dim=784)


def backdoor(fraction, seed=0, target=2, trigger=None):
    return AttackSpec("backdoor", fraction, target, trigger or cross_trigger(), 1.0, seed)


def test_cross_trigger_geometry():
    t = cross_trigger()
    expected = {(r, 3) for r in range(1, 6)} | {(3, c) for c in range(1, 6)}
    assert set(t.pixel_coords) == expected
    assert len(t.pixel_coords) == 9
    assert t.value == 1.0


def test_cross_trigger_scales_to_small_grids():
    t = cross_trigger(8, 8)
    assert all(0 <= r < 8 and 0 <= c < 8 for r, c in t.pixel_coords)
    assert len(t.pixel_coords) >= 3


def test_trigger_out_of_bounds_is_rejected(digits):
    far = TriggerPattern(((30, 0),))
    with pytest.raises(ValueError, match="outside"):
        apply_backdoor(digits, backdoor(0.5, trigger=far))


@pytest.mark.parametrize("x, expected", [(0.5, 1), (1.5, 2), (2.5, 3), (-0.5, -1), (69.99999, 70), (2.49, 2)])
def test_round_half_away_from_zero(x, expected):
    assert round_half_away(x) == expected


def test_backdoor_fraction_zero_is_identity(digits):
    assert apply_backdoor(digits, backdoor(0.0)).equals(digits)
    assert poison_test_set(digits, backdoor(0.0)).equals(digits)


def test_backdoor_fraction_one_poisons_everything(digits):
    out = apply_backdoor(digits, backdoor(1.0))
    pixels = cross_trigger().flat_indices(28, 28)
    assert np.all(out.features[:, pixels] == 1.0)
    assert np.all(out.labels == 2)


def test_backdoor_seventy_percent_of_hundred(digits):
    out = apply_backdoor(digits, backdoor(0.7, seed=3))
    changed = triggered_mask(digits, out)
    assert changed.sum() == 70
    assert np.all(out.labels[changed] == 2)
    np.testing.assert_array_equal(out.labels[~changed], digits.labels[~changed])
    np.testing.assert_array_equal(out.features[~changed], digits.features[~changed])


def test_test_set_stamping_keeps_labels():
    data = synth_generate(seed=1, per_class=20, class_count=10, dim=784)
    out = poison_test_set(data, backdoor(0.5, seed=8))
    assert triggered_mask(data, out).sum() == 100
    np.testing.assert_array_equal(out.labels, data.labels)


def test_poisoners_reject_wrong_kind(digits):
    flip = AttackSpec("label_flip", 0.5)
    with pytest.raises(ValueError):
        apply_backdoor(digits, flip)
    with pytest.raises(ValueError):
        apply_label_flip(digits, backdoor(0.5))


def test_attack_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec("backdoor", 0.5)
    with pytest.raises(ValueError):
        AttackSpec("label_flip", 1.3)
    with pytest.raises(ValueError):
        AttackSpec("sybil")
    with pytest.raises(ValueError):
        AttackSpec(weight_multiplier=0)
    with pytest.raises(ValueError):
        TriggerPattern(((0, 0),), 1.5)


def test_label_flip_small_case():
    data = flat_dataset(np.full((4, 1), 0.5), [0, 1, 2, 3], 4)
    out = apply_label_flip(data, AttackSpec("label_flip", 0.5, 2, seed=1))
    flipped = out.labels != data.labels
    assert flipped.sum() == 2
    assert out.labels[2] == 2 and not flipped[2]
    assert np.all(out.labels[flipped] == 2)
    np.testing.assert_array_equal(out.features, data.features)


def test_label_flip_fraction_zero_is_identity(digits):
    assert apply_label_flip(digits, AttackSpec("label_flip", 0.0)).equals(digits)


def test_label_flip_850_of_900():
    labels = np.concatenate([np.full(100, 2), np.repeat([0, 1, 3, 4, 5, 6, 7, 8, 9], 100)])
    data = flat_dataset(np.zeros((1000, 1)), labels, 10)
    out = apply_label_flip(data, AttackSpec("label_flip", 0.85, 2, seed=5))
    flipped = out.labels != data.labels
    assert flipped.sum() == 850
    assert np.all(data.labels[flipped] != 2)
    assert np.sum(out.labels == 2) == 950


def test_label_flip_needs_enough_eligible_examples():
    data = flat_dataset(np.zeros((4, 1)), [2, 2, 2, 0], 3)
    with pytest.raises(ValueError, match="non-target"):
        apply_label_flip(data, AttackSpec("label_flip", 0.5, 2))


def test_inflate_report():
    params = init_params([2, 2], 0)
    u = ClientUpdate(3, params, 500)
    assert inflate_report(u, 2).reported_examples == 1000
    assert inflate_report(u, 3).reported_examples == 1500
    assert inflate_report(u, 1) == u
    assert inflate_report(u, 2).params is params
    with pytest.raises(ValueError):
        inflate_report(u, 0)


def test_apply_attack_dispatch(digits):
    assert apply_attack(digits, AttackSpec()) is digits
    assert apply_attack(digits, backdoor(0.3)).equals(apply_backdoor(digits, backdoor(0.3)))


@settings(max_examples=40, deadline=None)
@given(
    fraction=st.floats(0, 1),
    seed=st.integers(0, 2**31),
    kind=st.sampled_from(["backdoor", "test", "label_flip"]),
)
def test_poisoner_properties(fraction, seed, kind):
    data = synth_generate(seed=2, per_class=6, class_count=10, dim=784)
    before = (data.features.tobytes(), data.labels.tobytes())
    expected = round_half_away(fraction * data.n)
    if kind == "label_flip":
        spec = AttackSpec("label_flip", min(fraction, 0.9), 2, seed=seed)
        out = apply_label_flip(data, spec)
        flipped = out.labels != data.labels
        assert flipped.sum() == round_half_away(spec.fraction * data.n)
        assert np.all(data.labels[flipped] != 2)
        np.testing.assert_array_equal(out.features, data.features)
    else:
        spec = backdoor(fraction, seed=seed)
        out = (apply_backdoor if kind == "backdoor" else poison_test_set)(data, spec)
        pixels = spec.trigger.flat_indices(28, 28)
        outside = np.setdiff1d(np.arange(784), pixels)
        # trigger locality
        np.testing.assert_array_equal(out.features[:, outside], data.features[:, outside])
        stamped = np.all(out.features[:, pixels] == 1.0, axis=1)
        assert stamped.sum() == expected
        if kind == "test":
            np.testing.assert_array_equal(out.labels, data.labels)
    assert (data.features.tobytes(), data.labels.tobytes()) == before
    again = (apply_label_flip if kind == "label_flip" else
             apply_backdoor if kind == "backdoor" else poison_test_set)(data, spec)
    assert again.equals(out)
