"""Tests for the geometry module."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from duohand.errors import DegenerateConfigurationError, DegenerateMeanError, InvalidInputError
from duohand.geometry import (
    as_joint_set,
    frobenius_distance,
    geodesic_angle,
    is_rotation,
    kabsch_rotation,
    so3_mean,
    wrist_align,
)
from duohand.scene import HandTemplate, sample_pose

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def random_rotation(seed):
    return Rotation.random(random_state=seed).as_matrix()


def rz(deg):
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


class TestWristAlign:
    """Tests for joint validation and wrist alignment."""

    def test_wrist_moves_to_origin(self):
        """The wrist goes to the origin and bone vectors stay."""
        joints = np.random.default_rng(0).normal(size=(21, 3)) * 50
        aligned = wrist_align(joints)
        assert np.all(aligned[0] == 0)
        np.testing.assert_allclose(aligned[5] - aligned[3], joints[5] - joints[3])

    def test_input_not_mutated(self):
        """Alignment returns a copy."""
        joints = np.ones((21, 3))
        wrist_align(joints)
        assert np.all(joints == 1)

    def test_stack(self):
        """A stack of joint sets is aligned set by set."""
        joints = np.random.default_rng(1).normal(size=(4, 21, 3))
        aligned = wrist_align(joints)
        assert aligned.shape == (4, 21, 3)
        assert np.all(aligned[:, 0] == 0)

    def test_rejects_wrong_shape(self):
        """A set without 21 joints is rejected."""
        with pytest.raises(InvalidInputError):
            as_joint_set(np.zeros((20, 3)))

    def test_rejects_non_finite(self):
        """A NaN coordinate is rejected."""
        joints = np.zeros((21, 3))
        joints[4, 1] = np.nan
        with pytest.raises(InvalidInputError):
            wrist_align(joints)


class TestKabsch:
    """Tests for kabsch_rotation."""

    def test_recovers_planted_rotations(self):
        """Planted rotations come back despite noise and translation."""
        rng = np.random.default_rng(7)
        template = HandTemplate()
        for i in range(1000):
            a = template.joints + rng.normal(scale=5.0, size=(21, 3))
            r = random_rotation(i)
            b = a @ r.T + rng.uniform(-100, 100, 3)
            assert geodesic_angle(kabsch_rotation(a, b), r) <= 1e-9

    def test_identical_sets_give_identity(self):
        """A set against itself gives the identity."""
        a = HandTemplate().joints
        np.testing.assert_allclose(kabsch_rotation(a, a), np.eye(3), atol=1e-12)

    def test_reflection_is_corrected(self):
        """A mirrored set still gives a proper rotation."""
        a = sample_pose(HandTemplate(), 3)
        b = a * np.array([1.0, 1.0, -1.0])
        r = kabsch_rotation(a, b)
        assert is_rotation(r)
        assert np.linalg.det(r) == pytest.approx(1.0)

    def test_collinear_joints_are_degenerate(self):
        """Joints on one line have no defined rotation."""
        line = np.outer(np.arange(21), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateConfigurationError):
            kabsch_rotation(line, line)

    @settings(max_examples=50, deadline=None)
    @given(seed=seeds, shift=st.floats(-500, 500))
    def test_translation_invariance(self, seed, shift):
        """Translating either set leaves the rotation unchanged."""
        a = sample_pose(HandTemplate(), seed)
        b = a @ random_rotation(seed).T
        r1 = kabsch_rotation(a, b)
        r2 = kabsch_rotation(a + shift, b - shift)
        assert geodesic_angle(r1, r2) <= 1e-9


class TestSO3Mean:
    """Tests for the chordal mean."""

    def test_single_rotation(self):
        """The mean of one rotation is itself."""
        r = random_rotation(11)
        np.testing.assert_allclose(so3_mean([r]), r, atol=1e-12)

    def test_identical_rotations(self):
        """The mean of copies is the rotation."""
        r = random_rotation(12)
        np.testing.assert_allclose(so3_mean([r, r, r]), r, atol=1e-12)

    def test_symmetric_pair_averages_to_identity(self):
        """Opposite turns about one axis average to the identity."""
        mean = so3_mean([rz(20), rz(-20)])
        assert geodesic_angle(mean, np.eye(3)) <= 1e-9

    def test_weighted_same_axis(self):
        """Equal weights on one axis give the half-angle."""
        mean = so3_mean([np.eye(3), rz(10)], [0.5, 0.5])
        assert math.degrees(geodesic_angle(mean, rz(5))) == pytest.approx(0.0, abs=1e-9)

    def test_monte_carlo_mean_beats_samples(self):
        """The mean of noisy copies is far closer than a typical copy."""
        rng = np.random.default_rng(3)
        center = random_rotation(99)
        noisy = [
            Rotation.from_rotvec(rng.normal(scale=0.05, size=3)).as_matrix() @ center
            for _ in range(500)
        ]
        mean = so3_mean(noisy)
        errors = [geodesic_angle(r, center) for r in noisy]
        assert geodesic_angle(mean, center) < np.median(errors) / 5

    def test_opposite_rotations_are_degenerate(self):
        """A half-turn apart has no mean."""
        with pytest.raises(DegenerateMeanError):
            so3_mean([np.eye(3), rz(180)])

    def test_empty_input(self):
        """The mean of nothing is an error."""
        with pytest.raises(InvalidInputError):
            so3_mean([])

    def test_bad_weights(self):
        """Weights must be non-negative and sum to one."""
        with pytest.raises(InvalidInputError):
            so3_mean([np.eye(3), rz(10)], [0.7, 0.7])
        with pytest.raises(InvalidInputError):
            so3_mean([np.eye(3), rz(10)], [1.5, -0.5])

    @settings(max_examples=50, deadline=None)
    @given(seeds=st.lists(seeds, min_size=1, max_size=8))
    def test_result_is_rotation(self, seeds):
        """Whatever the inputs, a returned mean is a rotation."""
        rotations = [random_rotation(s) for s in seeds]
        try:
            mean = so3_mean(rotations)
        except DegenerateMeanError:
            return
        assert is_rotation(mean, tol=1e-9)


class TestGeodesic:
    """Tests for rotation distances."""

    @settings(max_examples=100, deadline=None)
    @given(a=seeds, b=seeds)
    def test_chordal_geodesic_identity(self, a, b):
        """Chordal and geodesic distances agree through the half-angle sine."""
        r1, r2 = random_rotation(a), random_rotation(b)
        theta = geodesic_angle(r1, r2)
        assert frobenius_distance(r1, r2) == pytest.approx(
            2.0 * math.sqrt(2.0) * math.sin(theta / 2.0), abs=1e-9
        )

    def test_known_angles(self):
        """Distances to the identity match known turns."""
        assert geodesic_angle(np.eye(3), np.eye(3)) == 0.0
        assert math.degrees(geodesic_angle(np.eye(3), rz(30))) == pytest.approx(30.0)
        assert geodesic_angle(np.eye(3), rz(180)) == pytest.approx(math.pi)

    def test_small_angle_precision(self):
        """Tiny angles keep their relative precision."""
        angle = 1e-8
        r = Rotation.from_rotvec([0.0, 0.0, angle]).as_matrix()
        assert geodesic_angle(np.eye(3), r) == pytest.approx(angle, rel=1e-6)

    def test_symmetric(self):
        """Distance does not depend on argument order."""
        r1, r2 = random_rotation(1), random_rotation(2)
        assert geodesic_angle(r1, r2) == pytest.approx(geodesic_angle(r2, r1), abs=1e-12)
