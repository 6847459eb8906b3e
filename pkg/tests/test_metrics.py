"""Tests for evaluation metrics."""

import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from duohand.config import AdaptationConfig, RefineSettings, SceneConfig
from duohand.errors import InvalidInputError
from duohand.estimators import LinearCorrectionEstimator
from duohand.geometry import wrist_align
from duohand.metrics import (
    EvalReport,
    bucket_bounds,
    complementarity_analysis,
    complementarity_table,
    dual_m,
    evaluate,
    mono_m,
    mpjpe,
    pair_rotation_error,
    relative_improvement,
)
from duohand.scene import generate_dataset


def hand(seed=0):
    rng = np.random.default_rng(seed)
    return wrist_align(rng.normal(scale=60.0, size=(21, 3)))


def paired(n, r, seed=0):
    g1 = np.array([hand(seed + i) for i in range(n)])
    return g1, g1 @ r.T


class TestMpjpe:
    """Tests for the per-sample error."""

    def test_identical(self):
        """A pose against itself has zero error."""
        joints = hand()
        assert mpjpe(joints, joints) == 0.0

    def test_global_offset_is_ignored(self):
        """Translating the whole hand costs nothing after wrist alignment."""
        joints = hand()
        assert mpjpe(joints + [5.0, 5.0, 5.0], joints) == pytest.approx(0.0, abs=1e-12)

    def test_one_joint_off(self):
        """A 21 mm error on one joint averages to 1 mm."""
        joints = hand()
        moved = joints.copy()
        moved[12] += [0.0, 21.0, 0.0]
        assert mpjpe(moved, joints) == pytest.approx(1.0)


class TestMonoM:
    """Tests for Mono-M."""

    def test_average_of_views(self):
        """Mono-M is the mean of both views' errors."""
        r = np.eye(3)
        g1, g2 = paired(1, r)
        p1, p2 = g1.copy(), g2.copy()
        p1[:, 1:] += [10.0, 0.0, 0.0]
        p2[:, 1:] += [0.0, 20.0, 0.0]
        assert mono_m((p1, p2), (g1, g2)) == pytest.approx(15.0)

    def test_matches_loop(self):
        """Mono-M equals an explicit per-joint loop."""
        rng = np.random.default_rng(1)
        r = Rotation.random(random_state=1).as_matrix()
        g1, g2 = paired(5, r)
        p1 = g1 + rng.normal(scale=4.0, size=g1.shape)
        p2 = g2 + rng.normal(scale=9.0, size=g2.shape)
        errors = []
        for preds, gts in ((p1, g1), (p2, g2)):
            for p, g in zip(preds, gts):
                d = [np.linalg.norm((p[k] - p[0]) - (g[k] - g[0])) for k in range(21)]
                errors.append(sum(d) / 21)
        assert mono_m((p1, p2), (g1, g2)) == pytest.approx(np.mean(errors), rel=1e-12)

    def test_empty(self):
        """No samples give NaN."""
        empty = np.zeros((0, 21, 3))
        assert math.isnan(mono_m((empty, empty), (empty, empty)))

    def test_mismatched_lengths(self):
        """Views with different sample counts are rejected."""
        g1, g2 = paired(2, np.eye(3))
        with pytest.raises(InvalidInputError):
            mono_m((g1, g2[:1]), (g1, g2))


class TestDualM:
    """Tests for Dual-M."""

    def test_exact(self):
        """Exact predictions fuse to zero error."""
        r = Rotation.random(random_state=2).as_matrix()
        g1, g2 = paired(3, r)
        assert dual_m((g1, g2), (g1, g2), r) == pytest.approx(0.0, abs=1e-9)

    def test_wrong_rotation(self):
        """A rotation 30 degrees off shows up as error."""
        r = Rotation.random(random_state=3).as_matrix()
        wrong = Rotation.from_euler("x", 30, degrees=True).as_matrix() @ r
        g1, g2 = paired(3, r)
        assert dual_m((g1, g2), (g1, g2), wrong) > 1.0

    @pytest.mark.parametrize("frame", ["view1", "view2"])
    def test_single_frames(self, frame):
        """An error in one view is halved by fusion in either frame."""
        r = Rotation.random(random_state=4).as_matrix()
        g1, g2 = paired(2, r)
        p1 = g1.copy()
        p1[:, 5] += [8.0, 0.0, 0.0]
        # half of an 8 mm error on one joint, in either frame
        assert dual_m((p1, g2), (g1, g2), r, frame=frame) == pytest.approx(4.0 / 21)

    def test_both_frames_pool(self):
        """The default pools the errors of both frames."""
        r = Rotation.random(random_state=5).as_matrix()
        g1, g2 = paired(2, r)
        p2 = g2.copy()
        p2[:, 7] += [0.0, 0.0, 6.0]
        both = dual_m((g1, p2), (g1, g2), r)
        one = dual_m((g1, p2), (g1, g2), r, frame="view1")
        two = dual_m((g1, p2), (g1, g2), r, frame="view2")
        assert both == pytest.approx(0.5 * (one + two))

    def test_fusion_averages_independent_noise(self):
        """Fusing two independently noisy views beats either alone."""
        rng = np.random.default_rng(6)
        r = Rotation.random(random_state=6).as_matrix()
        g1, g2 = paired(200, r)
        p1 = g1 + rng.normal(scale=8.0, size=g1.shape)
        p2 = g2 + rng.normal(scale=8.0, size=g2.shape)
        assert dual_m((p1, p2), (g1, g2), r) < mono_m((p1, p2), (g1, g2))

    def test_unknown_frame(self):
        """An unknown frame name is rejected."""
        g1, g2 = paired(1, np.eye(3))
        with pytest.raises(InvalidInputError):
            dual_m((g1, g2), (g1, g2), np.eye(3), frame="world")


class TestComplementarityTable:
    """Tests for error bucketing."""

    def test_bounds(self):
        """Seven equal buckets span the error range."""
        edges = bucket_bounds(9.4, 181.7)
        assert len(edges) == 8
        assert edges[1] == pytest.approx(34.014, abs=1e-3)
        assert edges[-1] == pytest.approx(181.7)

    def test_counts_cover_all_samples(self):
        """Every sample lands in a bucket with its own errors averaged."""
        rng = np.random.default_rng(7)
        pred = rng.uniform(5.0, 80.0, size=300)
        table = complementarity_table(pred, pred * 0.5, pred * 0.6)
        assert len(table) == 7
        assert sum(b.count for b in table) == 300
        assert table[-1].upper == pytest.approx(pred.max())
        for b in table:
            if b.count:
                assert b.fused_error == pytest.approx(b.abm_error * 5 / 6)

    def test_maximum_lands_in_last_bucket(self):
        """The largest error is in the closed last bucket."""
        table = complementarity_table([0, 1, 2, 3, 4, 5, 6, 7], [0] * 8, [0] * 8)
        assert table[-1].count == 2
        assert [b.count for b in table[:-1]] == [1] * 6

    def test_identical_errors_share_one_bucket(self, caplog):
        """Errors that are all equal fill the first bucket and warn."""
        with caplog.at_level(logging.WARNING, logger="duohand.metrics"):
            table = complementarity_table([3.0] * 4, [1.0] * 4, [2.0] * 4)
        assert table[0].count == 4
        assert table[0].fused_error == 1.0
        assert all(b.count == 0 and b.fused_error is None for b in table[1:])
        assert "distinct" in caplog.text

    def test_empty(self):
        """No errors give no buckets."""
        assert complementarity_table([], [], []) == []

    def test_length_mismatch(self):
        """Error sequences of different length are rejected."""
        with pytest.raises(InvalidInputError):
            complementarity_table([1.0, 2.0], [1.0], [1.0, 2.0])


class TestPairRotationError:
    """Tests for the per-pair rotation consistency metric."""

    def test_consistent_pairs(self):
        """Pairs related exactly by the reference rotation score zero."""
        r = Rotation.random(random_state=2).as_matrix()
        v1 = np.stack([hand(s) for s in range(5)])
        assert pair_rotation_error((v1, v1 @ r.T), r) == pytest.approx(0.0, abs=1e-5)

    def test_turned_pairs(self):
        """Pairs turned by a fixed angle score that angle."""
        r = Rotation.random(random_state=3).as_matrix()
        turn = Rotation.from_euler("x", 12, degrees=True).as_matrix()
        v1 = np.stack([hand(s) for s in range(5)])
        assert pair_rotation_error((v1, v1 @ (turn @ r).T), r) == pytest.approx(12.0, abs=1e-6)

    def test_empty(self):
        """No pairs give NaN."""
        empty = np.zeros((0, 21, 3))
        assert math.isnan(pair_rotation_error((empty, empty), np.eye(3)))


def test_relative_improvement():
    """Getting worse is a negative improvement, and a zero baseline gives NaN."""
    assert relative_improvement(20.0, 15.0) == pytest.approx(25.0)
    assert relative_improvement(10.0, 12.0) == pytest.approx(-20.0)
    assert math.isnan(relative_improvement(0.0, 1.0))


class TestEvalReport:
    """Tests for the report record."""

    def test_dict_round_trip(self):
        """A report survives its plain-data form."""
        table = complementarity_table([1.0, 2.0, 9.0], [1.0, 1.0, 2.0], [1.0, 2.0, 3.0])
        report = EvalReport(mono_m=12.5, dual_m=9.0, view1_mpjpe=10.0, view2_mpjpe=15.0, count=3, complementarity=table)
        assert EvalReport.from_dict(report.to_dict()) == report

    def test_markdown(self):
        """The markdown report holds both metrics and the sample count."""
        report = EvalReport(mono_m=12.5, dual_m=9.0, view1_mpjpe=10.0, view2_mpjpe=15.0, count=3)
        text = report.to_markdown()
        assert "| Mono-M | 12.50 |" in text
        assert "| Dual-M | 9.00 |" in text
        assert "Samples: 3" in text


class TestEvaluate:
    """Tests for evaluating an estimator on a dataset."""

    @pytest.fixture(scope="class")
    def dataset(self):
        return generate_dataset(SceneConfig(count=20, seed=8))

    def test_identity_params_measure_raw_error(self, dataset):
        """Identity parameters score the raw estimates."""
        estimator = LinearCorrectionEstimator()
        report = evaluate(estimator, estimator.initial_params(), dataset, dataset.r_gt)
        raw1 = np.mean([mpjpe(s.raw[0], s.gt[0]) for s in dataset.samples])
        raw2 = np.mean([mpjpe(s.raw[1], s.gt[1]) for s in dataset.samples])
        assert report.count == 20
        assert report.view1_mpjpe == pytest.approx(raw1)
        assert report.view2_mpjpe == pytest.approx(raw2)
        assert report.mono_m == pytest.approx(0.5 * (raw1 + raw2))
        assert report.dual_m < max(raw1, raw2)

    def test_empty_dataset(self):
        """An empty dataset gives NaN metrics."""
        estimator = LinearCorrectionEstimator()
        report = evaluate(estimator, estimator.initial_params(), generate_dataset(SceneConfig(count=0)), np.eye(3))
        assert report.count == 0
        assert math.isnan(report.mono_m)
        assert math.isnan(report.dual_m)

    def test_complementarity_analysis(self, dataset):
        """The analysis buckets exactly the requested samples."""
        estimator = LinearCorrectionEstimator()
        config = AdaptationConfig(refine=RefineSettings(max_iterations=5))
        table = complementarity_analysis(estimator, estimator.initial_params(), dataset, dataset.r_gt, config, limit=14)
        assert len(table) == 7
        assert sum(b.count for b in table) == 14
        assert table[0].count >= 1
        assert table[-1].count >= 1

    def test_pair_rotation_error_is_reported(self, dataset):
        """With a known rig the report carries the pair rotation error."""
        estimator = LinearCorrectionEstimator()
        report = evaluate(estimator, estimator.initial_params(), dataset, dataset.r_gt)
        assert report.pair_rotation_error_deg is not None
        assert 0.0 < report.pair_rotation_error_deg < 90.0
        assert "Pair rotation error" in report.to_markdown()

    def test_unlabeled_samples_are_rejected(self, dataset):
        """Evaluation refuses samples without ground truth."""
        estimator = LinearCorrectionEstimator()
        unlabeled = replace(dataset, samples=[replace(s, gt=None) for s in dataset.samples])
        with pytest.raises(InvalidInputError):
            evaluate(estimator, estimator.initial_params(), unlabeled, dataset.r_gt)
        with pytest.raises(InvalidInputError):
            complementarity_analysis(
                estimator, estimator.initial_params(), unlabeled, dataset.r_gt, AdaptationConfig(), limit=3
            )
