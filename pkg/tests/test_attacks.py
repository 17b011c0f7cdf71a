import numpy as np
import pytest

from dflsim import attacks as A
from dflsim.attacks import AttackConfig, TriggerConfig
from dflsim.data import Dataset, synth_images, synth_tabular
from dflsim.params import LayeredParams, flatten


def constant_params(n=1000, value=0.5):
    return LayeredParams.from_pairs([("w", np.full((n // 2, 2), value))])


class TestAttackConfig:
    def test_valid_kinds(self):
        AttackConfig(kind="none")
        AttackConfig(kind="model_poison", pnr=0.5, noise_ratio=0.8, amplitude=1.0)
        AttackConfig(kind="backdoor", pnr=0.5, target_class=1,
                     trigger=TriggerConfig("pixel_cross"))

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            AttackConfig(kind="steal_weights")
        with pytest.raises(ValueError):
            AttackConfig(kind="none", pnr=1.5)
        with pytest.raises(ValueError):
            AttackConfig(kind="label_flip_targeted", source_class=3, target_class=3)
        with pytest.raises(ValueError):
            AttackConfig(kind="backdoor")  # no trigger
        with pytest.raises(ValueError):
            AttackConfig(kind="model_poison", amplitude=0.0)


class TestSelectMalicious:
    def test_edge_fractions(self):
        assert A.select_malicious(10, 0.0, seed=1) == ()
        assert A.select_malicious(10, 1.0, seed=1) == tuple(range(10))

    def test_cardinality_and_determinism(self):
        chosen = A.select_malicious(10, 0.5, seed=3)
        assert len(chosen) == 5 and len(set(chosen)) == 5
        assert chosen == A.select_malicious(10, 0.5, seed=3)
        assert all(0 <= i < 10 for i in chosen)

    def test_rounding(self):
        assert len(A.select_malicious(10, 0.1, seed=0)) == 1
        assert len(A.select_malicious(10, 0.8, seed=0)) == 8
        assert len(A.select_malicious(5, 0.5, seed=0)) == 3  # round half up

    def test_exclusion(self):
        for seed in range(20):
            assert 0 not in A.select_malicious(10, 0.5, seed=seed, exclude=(0,))
        with pytest.raises(ValueError):
            A.select_malicious(3, 1.0, seed=0, exclude=(0,))


class TestPoisonModel:
    def test_zero_ratio_unchanged(self):
        p = constant_params()
        assert A.poison_model(p, 0.0, 1.0, seed=1).equal(p)

    def test_full_ratio_saturates(self):
        p = constant_params()
        out = flatten(A.poison_model(p, 1.0, 2.5, seed=1))
        assert set(np.unique(out)) <= {-2.5, 2.5}

    def test_exact_replacement_count(self):
        p = constant_params(n=1000, value=0.5)
        out = flatten(A.poison_model(p, 0.8, 1.0, seed=2))
        replaced = np.abs(out) == 1.0
        assert replaced.sum() == 800
        assert (out[~replaced] == np.float32(0.5)).all()

    def test_deterministic(self):
        p = constant_params()
        assert A.poison_model(p, 0.3, 1.0, seed=5).equal(
            A.poison_model(p, 0.3, 1.0, seed=5))


class TestLabelFlips:
    def test_untargeted_never_keeps_label(self):
        ds = synth_images(num_classes=10, samples_per_class=50, seed=0)
        flipped = A.flip_labels_untargeted(ds, seed=1)
        assert (flipped.labels != ds.labels).all()
        np.testing.assert_array_equal(flipped.features, ds.features)

    def test_untargeted_binary_inverts(self):
        ds = synth_tabular(num_classes=2, samples_per_class=30, seed=0)
        flipped = A.flip_labels_untargeted(ds, seed=2)
        np.testing.assert_array_equal(flipped.labels, 1 - ds.labels)

    def test_untargeted_roughly_uniform(self):
        ds = synth_images(num_classes=10, samples_per_class=500, seed=3)
        flipped = A.flip_labels_untargeted(ds, seed=4)
        counts = flipped.class_counts()
        expected = len(ds) / 10.0
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 33.7  # chi-square 99.99% quantile, 9 dof

    def test_targeted_moves_all_sources(self):
        ds = synth_images(num_classes=10, samples_per_class=10, seed=5)
        out = A.flip_labels_targeted(ds, source_class=3, target_class=7)
        assert (out.labels != 3).all()
        assert (out.labels == 7).sum() == 20
        other = ds.labels != 3
        np.testing.assert_array_equal(out.labels[other], ds.labels[other])

    def test_targeted_missing_source_warns(self):
        ds = Dataset(np.zeros((4, 2)), np.array([0, 0, 1, 1]), 5)
        with pytest.warns(UserWarning):
            out = A.flip_labels_targeted(ds, source_class=4, target_class=0)
        np.testing.assert_array_equal(out.labels, ds.labels)

    def test_targeted_same_class_rejected(self):
        ds = Dataset(np.zeros((2, 2)), np.array([0, 1]), 2)
        with pytest.raises(ValueError):
            A.flip_labels_targeted(ds, 1, 1)


class TestTriggers:
    def test_cross_pixel_count(self):
        trig = TriggerConfig("pixel_cross", size=5)
        idx = A.trigger_pixel_indices(trig, (28, 28))
        assert len(idx) == 9  # two 5-diagonals sharing the center
        cells = {(i // 28, i % 28) for i in idx}
        assert cells == {(i, i) for i in range(5)} | {(i, 4 - i) for i in range(5)}

    def test_even_size_has_no_shared_center(self):
        idx = A.trigger_pixel_indices(TriggerConfig("pixel_cross", size=4), (10, 10))
        assert len(idx) == 8

    def test_positions(self):
        for pos, corner in [("top_left", (0, 0)), ("top_right", (0, 7)),
                            ("bottom_left", (7, 0)), ("bottom_right", (7, 7)),
                            ("center", (3, 3))]:
            idx = A.trigger_pixel_indices(TriggerConfig("pixel_cross", size=3,
                                                        position=pos), (10, 10))
            cells = {(i // 10, i % 10) for i in idx}
            assert corner in cells, pos

    def test_size_bounds(self):
        with pytest.raises(ValueError):
            A.trigger_pixel_indices(TriggerConfig("pixel_cross", size=12), (10, 10))
        with pytest.raises(ValueError):
            TriggerConfig("pixel_cross", size=1)

    def test_tabular_trigger_on_zero_row(self):
        out = A.apply_trigger(np.zeros((1, 10), dtype=np.float32),
                              TriggerConfig("leading_ones", num_columns=7),
                              "tabular", None)
        np.testing.assert_array_equal(out[0], [1] * 7 + [0] * 3)

    def test_tabular_trigger_width_checked(self):
        with pytest.raises(ValueError):
            A.apply_trigger(np.zeros((1, 5), dtype=np.float32),
                            TriggerConfig("leading_ones", num_columns=7),
                            "tabular", None)

    def test_cross_needs_image(self):
        with pytest.raises(ValueError):
            A.apply_trigger(np.zeros((1, 5), dtype=np.float32),
                            TriggerConfig("pixel_cross"), "tabular", None)


class TestBackdoor:
    def test_implant_counts(self):
        ds = synth_images(num_classes=10, samples_per_class=20, seed=6)
        trig = TriggerConfig("pixel_cross", size=5)
        out = A.implant_backdoor(ds, trig, target_class=0, fraction=0.2, seed=7)
        pix = A.trigger_pixel_indices(trig, ds.image_hw)
        triggered = (out.features[:, pix] == 1.0).all(axis=1)
        assert triggered.sum() >= round(0.2 * len(ds))  # clean rows may ring in by chance
        changed = ((out.features != ds.features).any(axis=1)
                   | (out.labels != ds.labels))
        assert changed.sum() <= round(0.2 * len(ds))
        assert (out.labels[changed] == 0).all()
        untouched = ~changed
        np.testing.assert_array_equal(out.features[untouched], ds.features[untouched])

    def test_zero_fraction_unchanged(self):
        ds = synth_images(num_classes=3, samples_per_class=5, seed=8)
        out = A.implant_backdoor(ds, TriggerConfig("pixel_cross"), 0, 0.0, seed=9)
        np.testing.assert_array_equal(out.features, ds.features)
        np.testing.assert_array_equal(out.labels, ds.labels)

    def test_eval_set_keeps_original_labels(self):
        ds = synth_images(num_classes=10, samples_per_class=11, seed=10)
        trig = TriggerConfig("pixel_cross", size=5)
        b = A.build_backdoor_eval_set(ds, trig, target_class=4)
        assert len(b) == len(ds)
        np.testing.assert_array_equal(b.labels, ds.labels)
        pix = A.trigger_pixel_indices(trig, ds.image_hw)
        assert (b.features[:, pix] == 1.0).all()

    def test_tabular_eval_set(self):
        ds = synth_tabular(num_classes=4, samples_per_class=10, seed=11)
        trig = TriggerConfig("leading_ones", num_columns=7)
        b = A.build_backdoor_eval_set(ds, trig, target_class=1)
        assert (b.features[:, :7] == 1.0).all()
        np.testing.assert_array_equal(b.features[:, 7:], ds.features[:, 7:])
