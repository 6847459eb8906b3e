"""Tests for the adaptation loop."""

import json
import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from duohand.adapt import Adapter, adapt, adapt_on_subset, checkpoint, initial_state, initialize_rotation, resume
from duohand.config import (
    AdaptationConfig,
    LiftingFailureConfig,
    OcclusionConfig,
    RefineSettings,
    SceneConfig,
    ViewCorruptionConfig,
)
from duohand.errors import (
    IncompatibleCheckpointError,
    InitializationError,
    InvalidParameterError,
    NonFiniteLossError,
)
from duohand.estimators import EstimatorParams, LinearCorrectionEstimator, Prediction
from duohand.geometry import geodesic_angle, is_rotation, kabsch_rotation
from duohand.metrics import evaluate
from duohand.scene import generate_dataset

# no occlusion and no lifting failures
PLAIN_WORLD = {"occlusion": OcclusionConfig.none(), "failures": LiftingFailureConfig.none()}
CLEAN_VIEWS = (ViewCorruptionConfig(bias_scale=0.0, noise_sigma=0.0),) * 2
# view1 nearly right, view2 badly biased: merging has a clear winner per joint
BIASED_VIEWS = (
    ViewCorruptionConfig(bias_scale=3.0, noise_sigma=2.0),
    ViewCorruptionConfig(bias_scale=25.0, noise_sigma=2.0),
)


def fast_config(**changes):
    base = AdaptationConfig(
        init_pairs=1000, batch_size=8, epochs=2, refine=RefineSettings(max_iterations=5)
    )
    return base.replace(**changes)


@pytest.fixture(scope="module")
def clean_dataset():
    return generate_dataset(SceneConfig(count=32, seed=1, views=CLEAN_VIEWS, **PLAIN_WORLD))


@pytest.fixture(scope="module")
def biased_dataset():
    return generate_dataset(SceneConfig(count=48, seed=2, views=BIASED_VIEWS, **PLAIN_WORLD))


class CollapsingEstimator(LinearCorrectionEstimator):
    """Predicts every joint on one line."""

    def predict(self, params, sample, view):
        line = np.outer(np.arange(21), [1.0, 2.0, 3.0])
        return Prediction(joints=line, heatmaps=sample.heatmaps[view])


class NanEstimator(LinearCorrectionEstimator):
    """Reports a NaN loss."""

    def loss_gradient(self, params, sample, pseudo):
        _, grad = super().loss_gradient(params, sample, pseudo)
        return math.nan, grad


class TestInitializeRotation:
    """Tests for the initial rotation estimate."""

    def test_exact_predictions_give_exact_rotation(self, clean_dataset):
        """Exact predictions give the rig rotation."""
        estimator = LinearCorrectionEstimator()
        r0 = initialize_rotation(estimator, estimator.initial_params(), clean_dataset, 32)
        assert geodesic_angle(r0, clean_dataset.r_gt) <= 1e-9

    def test_averaging_beats_single_pairs(self):
        """The averaged rotation beats the median single pair."""
        views = (
            ViewCorruptionConfig(bias_scale=0.0, noise_sigma=8.0),
            ViewCorruptionConfig(bias_scale=0.0, noise_sigma=8.0, visibility=0.5),
        )
        dataset = generate_dataset(SceneConfig(count=200, seed=3, views=views, **PLAIN_WORLD))
        estimator = LinearCorrectionEstimator()
        r0 = initialize_rotation(estimator, estimator.initial_params(), dataset, 200)
        singles = [geodesic_angle(kabsch_rotation(s.raw[0], s.raw[1]), dataset.r_gt) for s in dataset.samples]
        assert geodesic_angle(r0, dataset.r_gt) < np.median(singles)

    def test_short_dataset_uses_everything(self, clean_dataset, caplog):
        """Asking for more pairs than exist warns and uses them all."""
        estimator = LinearCorrectionEstimator()
        with caplog.at_level(logging.WARNING, logger="duohand.adapt"):
            r0 = initialize_rotation(estimator, estimator.initial_params(), clean_dataset, 1000)
        assert "fewer than" in caplog.text
        assert is_rotation(r0)

    def test_all_degenerate(self, clean_dataset):
        """Only degenerate pairs make initialisation fail."""
        estimator = CollapsingEstimator()
        with pytest.raises(InitializationError):
            initialize_rotation(estimator, estimator.initial_params(), clean_dataset, 10)


class TestAdapter:
    """Tests for the iteration itself."""

    def test_nothing_to_learn_on_clean_data(self, clean_dataset):
        """On exact data the loss is zero and the parameters stay put."""
        estimator = LinearCorrectionEstimator()
        adapter = Adapter(estimator, clean_dataset, fast_config())
        first = adapter.step()
        assert first["loss"] < 1e-6
        state = adapter.run()
        initial = EstimatorParams.identity()
        assert np.max(np.abs(state.params.flat() - initial.flat())) <= 1e-6

    def test_frozen_knobs(self, biased_dataset):
        """Zero learning rate, frozen rotation and frozen momentum change nothing."""
        config = fast_config(eta_theta=0.0, eta_r=1.0, learning_rate=0.0, mode="abm-only")
        adapter = Adapter(LinearCorrectionEstimator(), biased_dataset, config)
        r0 = adapter.state.rotation.copy()
        state = adapter.run()
        assert state.step == adapter.total_steps
        np.testing.assert_array_equal(state.momentum.params.flat(), state.params.flat())
        np.testing.assert_array_equal(state.params.flat(), EstimatorParams.identity().flat())
        np.testing.assert_allclose(state.rotation, r0, atol=1e-12)

    def test_partial_last_batch(self, clean_dataset):
        """The last batch of an epoch holds the remainder."""
        config = fast_config(batch_size=12, epochs=1, mode="self")
        adapter = Adapter(LinearCorrectionEstimator(), clean_dataset, config)
        state = adapter.run()
        assert [e["batch_size"] for e in state.events] == [12, 12, 8]

    def test_batches_cover_each_epoch(self, clean_dataset):
        """Each epoch visits every sample once."""
        adapter = Adapter(LinearCorrectionEstimator(), clean_dataset, fast_config(batch_size=5))
        for epoch in range(2):
            start = epoch * adapter.batches_per_epoch
            seen = np.concatenate([adapter.batch_indices(start + k) for k in range(adapter.batches_per_epoch)])
            assert sorted(seen) == list(range(len(clean_dataset)))

    def test_rotation_stays_valid(self, biased_dataset):
        """The tracked rotation stays a proper rotation."""
        state = Adapter(LinearCorrectionEstimator(), biased_dataset, fast_config(eta_r=0.5)).run()
        assert is_rotation(state.rotation)

    def test_rotation_tracking(self, clean_dataset):
        """A turned start rotation converges back towards the rig rotation."""
        r_start = Rotation.from_euler("z", 5, degrees=True).as_matrix() @ clean_dataset.r_gt
        config = fast_config(learning_rate=0.0, eta_r=0.9, mode="self", epochs=8)
        estimator = LinearCorrectionEstimator()
        state = initial_state(estimator, clean_dataset, config, rotation=r_start)
        state = Adapter(estimator, clean_dataset, config, state=state).run()
        errors = [e["rotation_error_deg"] for e in state.events]
        assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))
        assert errors[-1] < 0.5

    def test_self_mode_pulls_live_params_onto_momentum(self, clean_dataset):
        """In self mode the loss shrinks every step towards zero once live and momentum params differ."""
        config = fast_config(mode="self", epochs=25)
        estimator = LinearCorrectionEstimator()
        state = initial_state(estimator, clean_dataset, config)
        offsets = np.random.default_rng(4).normal(scale=5.0, size=(2, 21, 3))
        state.params = state.params + EstimatorParams(offsets=offsets, gains=np.zeros((2, 3, 3)))
        state = Adapter(estimator, clean_dataset, config, state=state).run()
        losses = [e["loss"] for e in state.events]
        assert len(losses) == 100
        assert losses[0] > 100.0
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 0.01 * losses[0]

    def test_unlabeled_samples_adapt_the_same(self, biased_dataset):
        """Ground truth only feeds the event log, so unlabeled samples give the same parameters."""
        unlabeled = replace(biased_dataset, samples=[replace(s, gt=None) for s in biased_dataset.samples])
        config = fast_config(epochs=1)
        labeled_state = Adapter(LinearCorrectionEstimator(), biased_dataset, config).run()
        unlabeled_state = Adapter(LinearCorrectionEstimator(), unlabeled, config).run()
        np.testing.assert_array_equal(unlabeled_state.params.flat(), labeled_state.params.flat())
        assert all("pseudo_label_error_mm" in e for e in labeled_state.events)
        assert not any("pseudo_label_error_mm" in e for e in unlabeled_state.events)

    def test_non_finite_loss(self, biased_dataset):
        """A NaN loss stops the run and carries the state."""
        adapter = Adapter(NanEstimator(), biased_dataset, fast_config(mode="self"))
        with pytest.raises(NonFiniteLossError) as excinfo:
            adapter.step()
        assert excinfo.value.state["step"] == 0

    def test_event_log(self, clean_dataset, tmp_path):
        """Each step writes one JSON line with its diagnostics."""
        log = tmp_path / "events.jsonl"
        config = fast_config(epochs=1, mode="abm-only")
        state = Adapter(LinearCorrectionEstimator(), clean_dataset, config, event_log=log).run()
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert len(records) == state.step == 4
        assert records[0]["step"] == 0
        assert {"loss", "rotation_drift_deg", "rotation_error_deg", "pseudo_label_error_mm"} <= set(records[0])

    def test_deterministic_and_thread_independent(self, biased_dataset):
        """Runs repeat exactly whatever the worker count."""
        config = fast_config(epochs=1)
        a = Adapter(LinearCorrectionEstimator(), biased_dataset, config).run()
        b = Adapter(LinearCorrectionEstimator(), biased_dataset, config.replace(workers=3)).run()
        assert a.events == b.events
        np.testing.assert_array_equal(a.params.flat(), b.params.flat())

    def test_empty_dataset(self):
        """An empty dataset cannot be adapted on."""
        empty = generate_dataset(SceneConfig(count=0))
        with pytest.raises(InitializationError):
            Adapter(LinearCorrectionEstimator(), empty, fast_config())


class TestEndToEnd:
    """Adaptation on a biased rig."""

    def test_improves_dual_and_mono(self, biased_dataset):
        """Adapting on a rig with one badly biased view lowers both metrics."""
        config = AdaptationConfig(batch_size=8, epochs=12, refine=RefineSettings(max_iterations=10))
        estimator = LinearCorrectionEstimator()
        state = adapt(estimator, biased_dataset, config)
        baseline = evaluate(estimator, estimator.initial_params(), biased_dataset, state.initial_rotation)
        adapted = evaluate(estimator, state.params, biased_dataset, state.initial_rotation)
        assert adapted.dual_m < baseline.dual_m
        assert adapted.mono_m < baseline.mono_m

    def test_subset_adapts_on_prefix_and_scores_everything(self, biased_dataset):
        """A sweep point trains on the first samples only and evaluates the whole dataset."""
        config = fast_config(epochs=1)
        state, report = adapt_on_subset(LinearCorrectionEstimator(), biased_dataset, config, 16)
        assert state.step == 2
        assert state.config.init_pairs == 16
        assert report.count == len(biased_dataset)

    def test_subset_needs_a_sample(self, biased_dataset):
        """A sweep point with no samples is rejected."""
        with pytest.raises(InvalidParameterError):
            adapt_on_subset(LinearCorrectionEstimator(), biased_dataset, fast_config(), 0)


class TestCheckpoint:
    """Tests for checkpoint and resume."""

    def test_immediate_round_trip(self, biased_dataset, tmp_path):
        """A checkpoint restores every part of the state."""
        config = fast_config(mode="abm-only")
        state = Adapter(LinearCorrectionEstimator(), biased_dataset, config).run(steps=3)
        checkpoint(state, tmp_path / "state.ckpt")
        loaded = resume(tmp_path / "state.ckpt", config)
        assert loaded.step == state.step == 3
        np.testing.assert_array_equal(loaded.params.flat(), state.params.flat())
        np.testing.assert_array_equal(loaded.momentum.params.flat(), state.momentum.params.flat())
        np.testing.assert_array_equal(loaded.velocity.flat(), state.velocity.flat())
        np.testing.assert_array_equal(loaded.rotation, state.rotation)
        np.testing.assert_array_equal(loaded.initial_rotation, state.initial_rotation)
        assert loaded.config == config
        assert loaded.template_hash == biased_dataset.template_hash

    def test_resume_matches_uninterrupted_run(self, biased_dataset, tmp_path):
        """Resuming half way gives the same result as running straight through."""
        config = fast_config(epochs=3)
        estimator = LinearCorrectionEstimator()
        straight = Adapter(estimator, biased_dataset, config).run(steps=12)

        first = Adapter(estimator, biased_dataset, config).run(steps=6)
        checkpoint(first, tmp_path / "half.ckpt")
        resumed = resume(tmp_path / "half.ckpt", config)
        second = Adapter(estimator, biased_dataset, config, state=resumed).run(steps=6)

        assert second.step == straight.step == 12
        np.testing.assert_allclose(second.params.flat(), straight.params.flat(), rtol=0, atol=1e-12)
        np.testing.assert_allclose(second.rotation, straight.rotation, rtol=0, atol=1e-12)

    def test_altered_config_is_rejected(self, biased_dataset, tmp_path):
        """A checkpoint refuses a different config."""
        config = fast_config(mode="self")
        state = Adapter(LinearCorrectionEstimator(), biased_dataset, config).run(steps=1)
        checkpoint(state, tmp_path / "state.ckpt")
        with pytest.raises(IncompatibleCheckpointError):
            resume(tmp_path / "state.ckpt", config.replace(alpha=0.5))

    def test_resume_without_config_uses_stored_one(self, biased_dataset, tmp_path):
        """Without a config the stored one is used."""
        config = fast_config(mode="self", alpha=0.4)
        state = Adapter(LinearCorrectionEstimator(), biased_dataset, config).run(steps=1)
        checkpoint(state, tmp_path / "state.ckpt")
        assert resume(tmp_path / "state.ckpt").config == config
