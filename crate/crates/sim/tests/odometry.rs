//! The full estimator on short simulated sequences.

use rsvio_core::backend::config::OdometryConfig;
use rsvio_core::backend::odometry::{FrameOutcome, Odometry, OdometryError};
use rsvio_core::imu::ImuSample;
use rsvio_sim::trajectory::{Segment, TrajectorySpec};
use rsvio_sim::{SimSpec, Simulation};

fn odometry_for(sim: &Simulation) -> Odometry {
    let imu: Vec<ImuSample> = sim
        .imu()
        .iter()
        .map(|s| ImuSample::new(s.timestamp, s.gyro, s.accel))
        .collect();
    Odometry::new(OdometryConfig::default(), sim.spec.calibration(false).unwrap(), imu)
}

fn stationary(duration: f64) -> Simulation {
    Simulation::new(SimSpec {
        trajectory: TrajectorySpec {
            start_position: [-0.5, 0.3, 1.4],
            start_rotation: [0.0, 0.0, -0.35],
            segments: vec![Segment::ConstantTwist {
                duration,
                linear: [0.0; 3],
                angular: [0.0; 3],
            }],
        },
        ..SimSpec::small(duration)
    })
    .unwrap()
}

#[test]
fn stationary_camera_keeps_its_pose_and_only_forced_keyframes() {
    let sim = stationary(1.5);
    let mut odo = odometry_for(&sim);
    let interval = odo.config().frontend.max_keyframe_interval;
    for (i, t) in sim.frame_times().into_iter().enumerate() {
        let outcome = odo.process_frame(i, t, &sim.render(t, false).unwrap()).unwrap();
        let expected = if i % interval == 0 {
            FrameOutcome::Keyframe
        } else {
            FrameOutcome::Tracked
        };
        assert_eq!(outcome, expected, "frame {i}");
    }
    let traj = odo.trajectory();
    assert_eq!(traj.len(), sim.frame_times().len().div_ceil(interval));
    let p0 = traj[0].imu_pose;
    for k in &traj {
        let drift = (k.imu_pose.translation - p0.translation).norm();
        let turn = (k.imu_pose.rotation.inverse() * p0.rotation).log().norm();
        assert!(
            drift < 1e-3 && turn < 1e-3,
            "keyframe {}: {drift} m, {turn} rad",
            k.frame_index
        );
        assert!(k.velocity.norm() < 1e-2);
    }
}

#[test]
fn frames_must_arrive_in_time_order() {
    let sim = stationary(1.0);
    let mut odo = odometry_for(&sim);
    let img = sim.render(0.1, false).unwrap();
    odo.process_frame(0, 0.1, &img).unwrap();
    assert!(matches!(
        odo.process_frame(1, 0.05, &img),
        Err(OdometryError::NonMonotonic(..))
    ));
}

#[test]
fn short_excited_sequence_tracks() {
    let sim = Simulation::new(SimSpec::small(4.0)).unwrap();
    let mut odo = odometry_for(&sim);
    let mut keyframes = 0;
    for (i, t) in sim.frame_times().into_iter().enumerate() {
        if odo.process_frame(i, t, &sim.render(t, false).unwrap()).unwrap() == FrameOutcome::Keyframe {
            keyframes += 1;
        }
    }
    let traj = odo.trajectory();
    assert_eq!(traj.len(), keyframes);
    assert!(keyframes >= 8, "{keyframes} keyframes");
    assert!(traj.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
    // the estimate is expressed relative to the first keyframe, so compare displacements
    let truth = |t: f64| sim.trajectory.pose(t).translation;
    let first = &traj[0];
    for k in &traj[1..] {
        let est = k.imu_pose.translation - first.imu_pose.translation;
        let gt = truth(k.timestamp) - truth(first.timestamp);
        assert!(
            (est.norm() - gt.norm()).abs() < 0.02 + 0.1 * gt.norm(),
            "t = {}: {} vs {}",
            k.timestamp,
            est.norm(),
            gt.norm()
        );
    }
    assert!(odo.scale().unwrap().is_finite());
}
