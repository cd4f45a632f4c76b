use super::marginalization::{kf, DualPriors, GLOBAL_DIM, KF_DIM};
use crate::image::ImagePyramid;
use crate::imu::ImuFactor;
use crate::photometric::{HostPatch, HostPoint};
use crate::state::{Calibration, KeyframeState, ScaleGravity};
use crate::twist::TwistPriorTerm;
use nalgebra::Vector2;

/// A keyframe in the optimization window.
#[derive(Clone, Debug)]
pub struct Keyframe {
    /// Unique, increasing keyframe id.
    pub id: usize,
    /// Index of the source image in the input sequence.
    pub frame_index: usize,
    pub state: KeyframeState,
    pub pyramid: ImagePyramid,
    /// Inertial factor to the previous keyframe in the window, if any.
    pub imu_from_prev: Option<ImuFactor>,
    pub twist_prior: Option<TwistPriorTerm>,
    /// Which of the keyframe's dimensions are optimized.
    pub free: [bool; KF_DIM],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservationStatus {
    Good,
    Outlier,
    OutOfBounds,
}

#[derive(Clone, Copy, Debug)]
pub struct Observation {
    pub target_id: usize,
    pub status: ObservationStatus,
    pub last_energy: f64,
}

#[derive(Clone, Debug)]
pub struct ActivePoint {
    pub host_id: usize,
    pub point: HostPoint,
    pub patch: HostPatch,
    pub observations: Vec<Observation>,
}

/// A point whose depth is still being estimated by epipolar search.
#[derive(Clone, Debug)]
pub struct ImmaturePoint {
    pub host_id: usize,
    pub pixel: Vector2<f64>,
    pub host_time: f64,
    pub patch: HostPatch,
    pub idepth_min: f64,
    pub idepth_max: f64,
    pub quality: f64,
    pub traced: usize,
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct Window {
    pub keyframes: Vec<Keyframe>,
    pub points: Vec<ActivePoint>,
    pub immature: Vec<ImmaturePoint>,
    pub scale_gravity: ScaleGravity,
    pub priors: DualPriors,
    pub calibration: Calibration,
    /// Gyro-bias / accel-bias / velocity / pose priors on the very first keyframe
    /// are added until it leaves the window.
    pub first_keyframe_id: Option<usize>,
    next_id: usize,
}

impl Window {
    pub fn new(calibration: Calibration, scale_gravity: ScaleGravity) -> Self {
        Self {
            keyframes: Vec::new(),
            points: Vec::new(),
            immature: Vec::new(),
            scale_gravity,
            priors: DualPriors::default(),
            calibration,
            first_keyframe_id: None,
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn dim(&self) -> usize {
        GLOBAL_DIM + KF_DIM * self.keyframes.len()
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.keyframes.iter().position(|k| k.id == id)
    }

    pub fn keyframe(&self, id: usize) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    pub fn latest(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    pub fn states(&self) -> Vec<KeyframeState> {
        self.keyframes.iter().map(|k| k.state).collect()
    }

    /// Offset of keyframe block `index` in the solver vector.
    pub fn block(index: usize) -> usize {
        GLOBAL_DIM + KF_DIM * index
    }

    pub fn allocate_id(&mut self) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn push_keyframe(&mut self, keyframe: Keyframe) {
        if self.first_keyframe_id.is_none() {
            self.first_keyframe_id = Some(keyframe.id);
        }
        self.keyframes.push(keyframe);
        self.priors.push_keyframe();
    }
}

/// Which keyframe dimensions are variables under a configuration.
pub fn free_mask(twist_free: bool, affine_free: bool) -> [bool; KF_DIM] {
    let mut m = [true; KF_DIM];
    for k in 0..6 {
        m[kf::TWIST + k] = twist_free;
    }
    m[kf::AFFINE] = affine_free;
    m[kf::AFFINE + 1] = affine_free;
    m
}
