import json
import math

import numpy as np
import pytest

from relprop import engine as eng
from relprop import harness
from relprop import model_graph as mg
from relprop.errors import DimensionError, DomainError


def brute_force_distance(mask):
    obj = np.argwhere(mask)
    rows, cols = np.indices(mask.shape)
    sq = np.min((rows[:, :, None] - obj[:, 0]) ** 2 + (cols[:, :, None] - obj[:, 1]) ** 2, axis=2)
    return np.sqrt(sq.astype(np.float64))


class TestMakeMask:
    def test_signed_quarter(self):
        mask = harness.make_mask(np.array([4.0, 3.0, 2.0, 1.0]), 25, "input_signed")
        np.testing.assert_array_equal(mask, [True, False, False, False])

    def test_abs_quarter(self):
        mask = harness.make_mask(np.array([-5.0, 1.0, 1.0, 1.0]), 25, "input_abs")
        np.testing.assert_array_equal(mask, [True, False, False, False])

    def test_full_selection(self):
        mask = harness.make_mask(np.zeros((2, 2, 3)), 100, "input_signed")
        assert mask.all()

    def test_pixel_modes_sum_channels_first(self):
        values = np.zeros((1, 2, 3))
        values[0, 0] = [1.0, -1.0, 0.0]   # sums to 0
        values[0, 1] = [0.2, 0.2, 0.1]    # sums to 0.5
        signed = harness.make_mask(values, 50, "pixel_signed")
        np.testing.assert_array_equal(signed, [[False, True]])
        # absolute value applies to the channel sum, so the cancellation stays
        absolute = harness.make_mask(values, 50, "pixel_abs")
        np.testing.assert_array_equal(absolute, [[False, True]])

    def test_pixel_mode_needs_image(self):
        with pytest.raises(DomainError):
            harness.make_mask(np.zeros(4), 50, "pixel_abs")

    def test_percent_range(self):
        with pytest.raises(DomainError):
            harness.make_mask(np.zeros(4), 0, "input_signed")
        with pytest.raises(DomainError):
            harness.make_mask(np.zeros(4), 101, "input_signed")

    def test_nested_masks_across_percentages(self):
        rng = np.random.default_rng(0)
        values = rng.normal(size=(8, 8, 3))
        prev = None
        for p in (1, 5, 10, 40, 90, 100):
            mask = harness.make_mask(values, p, "pixel_abs")
            if prev is not None:
                assert (mask | prev == mask).all()
            prev = mask


class TestApplyMask:
    def test_all_ones_unchanged(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(size=(3, 3, 3))
        out = harness.apply_mask(img, np.ones((3, 3, 3), dtype=bool))
        np.testing.assert_array_equal(out, img)

    def test_all_zeros(self):
        img = np.full((2, 2, 3), 0.7)
        np.testing.assert_array_equal(harness.apply_mask(img, np.zeros((2, 2, 3), bool)),
                                      np.zeros((2, 2, 3)))

    def test_pixel_mask_broadcasts(self):
        img = np.full((2, 2, 3), 0.7)
        mask = np.array([[True, False], [False, False]])
        out = harness.apply_mask(img, mask)
        np.testing.assert_array_equal(out[0, 0], [0.7, 0.7, 0.7])
        assert out[0, 1].sum() == out[1, 0].sum() == out[1, 1].sum() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            harness.apply_mask(np.zeros((2, 2, 3)), np.zeros((3, 3), bool))


class TestDistanceTransform:
    def test_1x3_hand_example(self):
        obj = np.array([[True, False, False]])
        sel = np.array([[False, False, True]])
        # raw distance 2, image diagonal sqrt(1 + 9)
        assert harness.avg_distance(sel, obj) == pytest.approx(2.0 / math.sqrt(10.0))

    def test_zero_inside_object(self):
        obj = np.zeros((5, 5), dtype=bool)
        obj[2, 2] = True
        dt = harness.distance_transform(obj)
        assert dt[2, 2] == 0.0
        assert dt[2, 3] == 1.0
        assert dt[3, 3] == pytest.approx(math.sqrt(2.0))

    def test_empty_mask_rejected(self):
        with pytest.raises(DomainError):
            harness.distance_transform(np.zeros((3, 3), dtype=bool))

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force_exactly(self, seed):
        rng = np.random.default_rng(seed)
        h = int(rng.integers(1, 33))
        w = int(rng.integers(1, 33))
        mask = rng.random((h, w)) < 0.1
        mask[rng.integers(0, h), rng.integers(0, w)] = True
        got = harness.distance_transform(mask)
        want = brute_force_distance(mask)
        assert np.array_equal(got, want)

    def test_single_distant_object_pixel(self):
        mask = np.zeros((40, 3), dtype=bool)
        mask[0, 0] = True
        assert np.array_equal(harness.distance_transform(mask), brute_force_distance(mask))


class TestPointingGame:
    def test_subset_scores_one(self):
        obj = np.zeros((4, 4), dtype=bool)
        obj[1:3, 1:3] = True
        sel = np.zeros((4, 4), dtype=bool)
        sel[1, 1] = True
        assert harness.pointing_game(sel, obj) == 1.0

    def test_disjoint_scores_zero(self):
        obj = np.zeros((4, 4), dtype=bool)
        obj[0, 0] = True
        sel = np.zeros((4, 4), dtype=bool)
        sel[3, 3] = True
        assert harness.pointing_game(sel, obj) == 0.0

    def test_uniform_selection_equals_area_fraction(self):
        rng = np.random.default_rng(2)
        obj = rng.random((10, 10)) < 0.3
        obj[0, 0] = True
        sel = np.ones((10, 10), dtype=bool)
        assert harness.pointing_game(sel, obj) == pytest.approx(obj.mean())

    def test_empty_selection_rejected(self):
        with pytest.raises(DomainError):
            harness.pointing_game(np.zeros((2, 2), bool), np.ones((2, 2), bool))

    def test_selection_inside_object_distance_zero(self):
        obj = np.zeros((4, 4), dtype=bool)
        obj[1:3, 1:3] = True
        sel = np.zeros((4, 4), dtype=bool)
        sel[2, 2] = True
        assert harness.avg_distance(sel, obj) == 0.0


class TestDatasetManifest:
    def test_load_resolves_paths(self, small_dataset_path):
        ds = harness.load_dataset(small_dataset_path)
        assert len(ds.records) == 24
        assert ds.percentages == (5.0, 20.0, 50.0)
        assert all(r.image.endswith(".ppm") for r in ds.records)

    def test_percentages_must_increase(self, tmp_path):
        doc = {"records": [{"image": "a.ppm"}], "percentages": [5, 5, 10]}
        path = tmp_path / "d.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(DomainError):
            harness.load_dataset(path)

    def test_manifest_rejects_100(self, tmp_path):
        doc = {"records": [{"image": "a.ppm"}], "percentages": [5, 100]}
        path = tmp_path / "d.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(DomainError):
            harness.load_dataset(path)


class TestCurves:
    def test_full_selection_is_self_consistent(self, detector_net, small_dataset):
        result = harness.accuracy_curve(detector_net, small_dataset,
                                        eng.MethodConfig("rlrp"), "pixel_abs",
                                        percentages=(50, 100))
        by_pct = {row.percentage: row for row in result.rows}
        assert by_pct[100.0].value == 1.0
        assert by_pct[100.0].n_images == 24
        assert by_pct[100.0].n_skipped == 0

    def test_constant_model_everywhere_accurate(self, small_dataset):
        net = mg.Network((mg.Flatten(),
                          mg.Dense(np.zeros((2, 768)), np.array([0.0, 5.0]))),
                         (16, 16, 3), 2)
        result = harness.accuracy_curve(net, small_dataset, eng.MethodConfig("rlrp"),
                                        "input_signed")
        assert all(row.value == 1.0 for row in result.rows)

    def test_skips_recorded_not_fatal(self, degenerate_net, tmp_path):
        from relprop import model_io as io
        img = np.full((2, 2, 3), 128 / 255.0)
        io.save_image(img, tmp_path / "g.ppm")
        (tmp_path / "d.json").write_text(json.dumps(
            {"records": [{"image": "g.ppm"}], "percentages": [50]}))
        ds = harness.load_dataset(tmp_path / "d.json")
        result = harness.accuracy_curve(degenerate_net, ds, eng.MethodConfig("lrp0"),
                                        "input_signed")
        assert result.rows[0].n_images == 0
        assert result.rows[0].n_skipped == 1
        assert "GuardedDenominatorError" in result.skips[0][1]

    def test_workers_do_not_change_results(self, detector_net, small_dataset):
        kwargs = dict(cfg=eng.MethodConfig("rlrp"), mode="pixel_abs", percentages=(10, 20))
        one = harness.accuracy_curve(detector_net, small_dataset, workers=1, **kwargs)
        two = harness.accuracy_curve(detector_net, small_dataset, workers=2, **kwargs)
        assert harness.format_csv(one.rows) == harness.format_csv(two.rows)

    def test_random_curve_deterministic(self, detector_net, small_dataset):
        a = harness.random_mask_curve(detector_net, small_dataset, "pixel_abs",
                                      percentages=(20,), seed=7)
        b = harness.random_mask_curve(detector_net, small_dataset, "pixel_abs",
                                      percentages=(20,), seed=7, workers=2)
        assert harness.format_csv(a.rows) == harness.format_csv(b.rows)

    def test_quality_curves(self, detector_net, small_dataset):
        pointing = harness.quality_curve(detector_net, small_dataset,
                                         eng.MethodConfig("rlrp"), "pixel_abs", "in_mask",
                                         percentages=(10,))
        assert 0.0 <= pointing.rows[0].value <= 1.0
        distance = harness.quality_curve(detector_net, small_dataset,
                                         eng.MethodConfig("rlrp"), "pixel_abs",
                                         "mean_distance", percentages=(10,))
        assert distance.rows[0].value >= 0.0

    def test_quality_requires_object_masks(self, detector_net, small_dataset_path, tmp_path):
        doc = json.loads((small_dataset_path).read_text())
        for rec in doc["records"]:
            rec.pop("mask")
        stripped = small_dataset_path.parent / "no_masks.json"
        stripped.write_text(json.dumps(doc))
        ds = harness.load_dataset(stripped)
        result = harness.quality_curve(detector_net, ds, eng.MethodConfig("rlrp"),
                                       "pixel_abs", "in_mask", percentages=(10,))
        assert result.rows[0].n_images == 0
        assert all(reason == "no object mask" for _, reason in result.skips)


class TestCrossCompare:
    def test_self_comparison_reproduces_accuracy(self, detector_net, small_dataset):
        cfg = eng.MethodConfig("rlrp")
        own = harness.accuracy_curve(detector_net, small_dataset, cfg, "pixel_abs")
        cross = harness.cross_compare(detector_net, detector_net, small_dataset, cfg,
                                      "pixel_abs")
        own_acc = {r.percentage: r.value for r in own.rows}
        cross_acc = {r.percentage: r.value for r in cross.rows if r.metric == "accuracy"}
        assert own_acc == cross_acc
        agreement = [r for r in cross.rows if r.metric == "agreement"][0]
        assert agreement.value == len(small_dataset.records)

    def test_constant_second_net(self, detector_net, small_dataset):
        const = mg.Network((mg.Flatten(),
                            mg.Dense(np.zeros((2, 768)), np.array([3.0, 0.0]))),
                           (16, 16, 3), 2)
        cross = harness.cross_compare(detector_net, const, small_dataset,
                                      eng.MethodConfig("rlrp"), "pixel_abs")
        for row in cross.rows:
            if row.metric == "accuracy":
                assert row.value == 1.0

    def test_input_shape_must_match(self, detector_net, small_dataset):
        other = mg.Network((mg.ReLU(),), (3,), 3)
        with pytest.raises(DimensionError):
            harness.cross_compare(detector_net, other, small_dataset,
                                  eng.MethodConfig("rlrp"), "pixel_abs")


class TestCsv:
    def test_schema_and_determinism(self):
        rows = [
            harness.EvalRow("rlrp", "pixel_abs", 10.0, "accuracy", 0.5, 4, 0),
            harness.EvalRow("rlrp", "pixel_abs", None, "agreement", 4.0, 4, 0),
            harness.EvalRow("lrp0", "pixel_abs", 5.0, "accuracy", 0.25, 4, 1),
        ]
        text = harness.format_csv(rows)
        lines = text.strip().split("\n")
        assert lines[0] == "method,mode,percentage,metric,value,n_images,n_skipped"
        assert lines[1].startswith("lrp0,")  # sorted by method first
        assert text == harness.format_csv(list(reversed(rows)))
