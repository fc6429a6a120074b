import os
import sys

import numpy as np
import pytest

# Add the repository root to the path for package imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.errors import DegenerateMotion, InvalidInput, MissingAngularVelocity, TooShort
from src.geometry import PoseSequence, axis_angle_to_matrix, geodesic_angle, random_rotation
from src.imu import (GRAVITY, CalibrationResult, ImuNoise, ImuSample, ImuStream, apply_calibration, calibrate_spatial,
                     calibration_residual, detect_sync_event, free_acceleration, integrate_positions,
                     normalize_lever_arm, relative_motion_pairs, second_difference, simulate_imu)
from src.simulate import simulate_jump_stream


def tumbling_rotations(count, tau=1.0 / 30.0):
    """World rotations spinning about two axes, rich enough for calibration."""
    t = np.arange(count) * tau
    return np.stack([axis_angle_to_matrix([0.0, 0.0, 1.3 * s]) @ axis_angle_to_matrix([0.9 * s, 0.0, 0.0])
                     for s in t])


class TestFreeAcceleration:
    """Raw specific force to global free acceleration"""

    def test_resting_sensor_reads_zero(self):
        sample = ImuSample(0.0, np.eye(3), GRAVITY)
        assert np.allclose(free_acceleration(sample), 0.0)

    def test_rotated_sensor(self):
        r = axis_angle_to_matrix([np.pi / 2, 0.0, 0.0])
        raw = r.T @ (GRAVITY + np.array([1.0, 0.0, 0.0]))
        assert np.allclose(free_acceleration(ImuSample(0.0, r, raw)), [1.0, 0.0, 0.0])

    def test_invalid_rotation_rejected(self):
        with pytest.raises(InvalidInput):
            ImuSample(0.0, 2.0 * np.eye(3), GRAVITY)

    def test_timestamps_must_increase(self):
        samples = (ImuSample(0.1, np.eye(3), GRAVITY), ImuSample(0.1, np.eye(3), GRAVITY))
        with pytest.raises(InvalidInput):
            ImuStream(samples, 30.0)


def spinning_stream(rate, count=30, spin=2.0):
    """Sensor at rest apart from a constant spin about z."""
    rotations = np.stack([axis_angle_to_matrix([0.0, 0.0, spin * k / rate]) for k in range(count)])
    omega = np.tile([0.0, 0.0, spin], (count, 1))
    raw = np.einsum('tji,j->ti', rotations, GRAVITY)
    return ImuStream.from_arrays(np.arange(count) / rate, rotations, raw, rate, omega)


def lever_arm_correction(stream, offset):
    return stream.free_accelerations() - normalize_lever_arm(stream, offset).free_accelerations()


class TestLeverArm:
    """Mounting offset normalization"""

    def setup_method(self):
        self.rate = 100.0
        self.stream = spinning_stream(self.rate)
        self.timestamps = self.stream.timestamps

    def test_zero_offset_is_identity(self):
        corrected = normalize_lever_arm(self.stream, [0.0, 0.0, 0.0])
        assert np.allclose(corrected.raw_accelerations, self.stream.raw_accelerations)

    def test_offset_removes_centripetal_term(self):
        delta = lever_arm_correction(self.stream, [0.1, 0.0, 0.0])
        # constant spin at 2 rad/s on a 0.1 m arm: |a| ≈ ω²r
        assert np.allclose(np.linalg.norm(delta, axis=1), 0.4, rtol=0.02)

    def test_correction_is_linear_in_offset(self):
        offset = np.array([0.05, -0.02, 0.03])
        single = lever_arm_correction(self.stream, offset)
        assert np.allclose(lever_arm_correction(self.stream, 2.0 * offset), 2.0 * single, atol=1e-12)
        other = np.array([0.0, 0.04, 0.01])
        assert np.allclose(lever_arm_correction(self.stream, offset + other),
                           single + lever_arm_correction(self.stream, other), atol=1e-12)

    def test_converges_to_centripetal_acceleration(self):
        offset = np.array([0.1, 0.0, 0.0])
        omega = np.array([0.0, 0.0, 2.0])

        def worst_error(rate):
            stream = spinning_stream(rate, count=int(rate * 0.3))
            # global acceleration of the offset point: R(ω × (ω × r))
            expected = stream.rotations @ np.cross(omega, np.cross(omega, offset))
            return np.abs(lever_arm_correction(stream, offset)[1:] - expected[1:]).max()

        coarse, fine = worst_error(100.0), worst_error(400.0)
        assert fine < 0.5 * coarse
        assert fine < 2e-3

    def test_requires_angular_velocity(self):
        stream = ImuStream.from_arrays(self.timestamps, self.stream.rotations, self.stream.raw_accelerations,
                                       self.rate)
        with pytest.raises(MissingAngularVelocity):
            normalize_lever_arm(stream, [0.1, 0.0, 0.0])

    def test_single_sample_is_too_short(self):
        stream = ImuStream(self.stream.samples[:1], self.rate)
        with pytest.raises(TooShort):
            normalize_lever_arm(stream, [0.1, 0.0, 0.0])


class TestSyncDetection:
    """Landing detection in the ankle stream"""

    def test_finds_simulated_landing(self):
        stream, landing = simulate_jump_stream(60, 30.0, seed=1)
        event = detect_sync_event(stream)
        assert event.index == landing
        assert event.confident
        assert event.timestamp == pytest.approx(landing / 30.0)

    def test_noise_does_not_move_landing(self):
        stream, landing = simulate_jump_stream(90, 30.0, seed=2, noise=0.05)
        assert detect_sync_event(stream).index == landing

    def test_without_free_fall_is_low_confidence(self):
        raw = np.tile(GRAVITY, (20, 1))
        raw[12] += [0.0, 0.0, 5.0]
        stream = ImuStream.from_arrays(np.arange(20) / 30.0, np.tile(np.eye(3), (20, 1, 1)), raw, 30.0)
        event = detect_sync_event(stream)
        assert not event.confident
        assert event.index == 12

    def test_too_short(self):
        stream = ImuStream.from_arrays([0.0, 0.1], np.tile(np.eye(3), (2, 1, 1)), np.tile(GRAVITY, (2, 1)), 10.0)
        with pytest.raises(TooShort):
            detect_sync_event(stream)


class TestSpatialCalibration:
    """Inertial-to-world rotation from paired rotations"""

    def setup_method(self):
        self.world = tumbling_rotations(40)
        self.truth = axis_angle_to_matrix([0.2, -0.1, 0.4])
        self.inertial = np.einsum('ji,tjk->tik', self.truth, self.world)

    def test_recovers_transform(self):
        result = calibrate_spatial(self.world, self.inertial, stride=5)
        assert np.allclose(result.transform, self.truth, atol=1e-7)
        assert np.degrees(result.residual) < 1e-4

    def test_recovers_random_transform(self):
        truth = random_rotation(np.random.default_rng(5))
        inertial = np.einsum('ji,tjk->tik', truth, self.world)
        result = calibrate_spatial(self.world, inertial, stride=3)
        assert np.allclose(result.transform, truth, atol=1e-7)

    def test_noisy_rotations_recover_within_one_degree(self):
        world = tumbling_rotations(600)
        trajectory = PoseSequence.from_arrays(world, np.zeros((600, 3)), 1.0 / 30.0)
        stream = simulate_imu(trajectory, noise=ImuNoise(rotation_deg=0.5), seed=11, imu_to_world=self.truth)
        result = calibrate_spatial(world, stream.rotations, stride=5)
        assert np.degrees(geodesic_angle(result.transform, self.truth)) < 1.0

    def test_solution_beats_random_rotations(self):
        world = tumbling_rotations(600)
        trajectory = PoseSequence.from_arrays(world, np.zeros((600, 3)), 1.0 / 30.0)
        inertial = simulate_imu(trajectory, noise=ImuNoise(rotation_deg=0.5), seed=12,
                                imu_to_world=self.truth).rotations
        result = calibrate_spatial(world, inertial, stride=5)
        a, b = relative_motion_pairs(world, inertial, 5)
        assert calibration_residual(result.transform, a, b) == pytest.approx(result.residual)
        rng = np.random.default_rng(13)
        for _ in range(100):
            assert result.residual <= calibration_residual(random_rotation(rng), a, b)

    def test_single_axis_rotation_is_degenerate(self):
        world = np.stack([axis_angle_to_matrix([0.0, 0.0, 0.05 * k]) for k in range(30)])
        inertial = np.einsum('ji,tjk->tik', self.truth, world)
        with pytest.raises(DegenerateMotion):
            calibrate_spatial(world, inertial, stride=5)

    def test_constant_rotation_is_degenerate(self):
        still = np.tile(self.truth, (20, 1, 1))
        with pytest.raises(DegenerateMotion):
            calibrate_spatial(still, still, stride=5)

    def test_stride_longer_than_sequence(self):
        with pytest.raises(TooShort):
            calibrate_spatial(self.world[:6], self.inertial[:6], stride=5)

    def test_result_serialization(self):
        result = calibrate_spatial(self.world, self.inertial, stride=5)
        data = result.to_dict()
        assert data['residual_deg'] == pytest.approx(np.degrees(result.residual))
        assert np.allclose(CalibrationResult.from_dict(data).transform, result.transform)


class TestSimulateImu:
    """Synthetic IMU from object trajectories"""

    def setup_method(self):
        self.tau = 1.0 / 30.0
        t = np.arange(40) * self.tau
        self.acc = np.array([0.3, -0.2, 0.5])
        translations = np.array([0.0, 0.0, 1.0]) + np.outer(t, [0.1, 0.0, 0.0]) + 0.5 * np.outer(t ** 2, self.acc)
        rotations = tumbling_rotations(40, self.tau)
        self.trajectory = PoseSequence.from_arrays(rotations, translations, self.tau)

    def test_quadratic_translation_gives_exact_acceleration(self):
        stream = simulate_imu(self.trajectory, smoothing=4)
        assert np.allclose(stream.free_accelerations(), self.acc, atol=1e-9)

    def test_rotations_follow_trajectory(self):
        stream = simulate_imu(self.trajectory)
        assert np.allclose(stream.rotations, self.trajectory.rotations)
        assert stream.rate == pytest.approx(30.0)

    def test_inertial_frame_round_trip(self):
        transform = axis_angle_to_matrix([0.2, -0.1, 0.4])
        stream = simulate_imu(self.trajectory, imu_to_world=transform)
        rotations, free = apply_calibration(stream.rotations, stream.free_accelerations(), transform)
        assert np.allclose(rotations, self.trajectory.rotations)
        assert np.allclose(free, self.acc, atol=1e-9)

    def test_deterministic_noise(self):
        noise = ImuNoise(rotation_deg=1.0, acceleration=0.1)
        a = simulate_imu(self.trajectory, noise=noise, seed=3)
        b = simulate_imu(self.trajectory, noise=noise, seed=3)
        assert np.array_equal(a.raw_accelerations, b.raw_accelerations)
        assert np.array_equal(a.rotations, b.rotations)

    def test_too_short_for_smoothing(self):
        short = PoseSequence(self.trajectory.frames[:8], self.tau)
        with pytest.raises(TooShort):
            simulate_imu(short, smoothing=4)

    def test_integration_inverts_second_difference(self):
        acc = np.random.default_rng(0).normal(size=(20, 3))
        positions = integrate_positions(acc, [0.0, 0.0, 0.0], [0.1, 0.0, 0.0], self.tau)
        recovered = second_difference(positions, 1, self.tau)
        assert np.allclose(recovered[1:-1], acc[1:-1])


class TestImuCsv:
    """CSV persistence"""

    def test_save_and_load(self, tmp_path):
        t = np.arange(5) / 30.0
        rotations = tumbling_rotations(5)
        raw = np.random.default_rng(1).normal(size=(5, 3))
        stream = ImuStream.from_arrays(t, rotations, raw, 30.0)
        stream.save_csv(tmp_path / 'imu.csv')
        loaded = ImuStream.load_csv(tmp_path / 'imu.csv')
        assert loaded.rate == pytest.approx(30.0)
        assert np.array_equal(loaded.raw_accelerations, raw)
        assert not loaded.has_angular_velocity

    def test_single_sample_needs_rate(self, tmp_path):
        stream = ImuStream.from_arrays([0.0], np.eye(3)[None], GRAVITY[None], 30.0)
        stream.save_csv(tmp_path / 'imu.csv')
        with pytest.raises(TooShort):
            ImuStream.load_csv(tmp_path / 'imu.csv')
        assert len(ImuStream.load_csv(tmp_path / 'imu.csv', rate=30.0)) == 1
