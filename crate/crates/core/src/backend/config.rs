use crate::imu::{ImuNoise, PreintegrationMode};
use crate::photometric::PhotometricConfig;
use serde::{Deserialize, Serialize};

/// How the camera readout is treated by the estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShutterMode {
    /// Per-row capture times and a constant twist per keyframe.
    #[default]
    Rs,
    /// Treat every image as global shutter: twists frozen at zero, t = 0.
    GsAssume,
}

impl std::str::FromStr for ShutterMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rs" => Ok(Self::Rs),
            "gs-assume" => Ok(Self::GsAssume),
            other => Err(format!("unknown mode '{other}', expected 'rs' or 'gs-assume'")),
        }
    }
}

impl std::fmt::Display for ShutterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rs => "rs",
            Self::GsAssume => "gs-assume",
        })
    }
}

/// What happens to points hosted in a keyframe that leaves the window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointMarginalization {
    /// Fold their observations into the prior.
    #[default]
    Marginalize,
    /// Discard them.
    Drop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Weight of the inertial energy.
    pub alpha: f64,
    /// Weight of the twist energy.
    pub beta: f64,
    pub max_keyframes: usize,
    /// Target number of active points in the window.
    pub point_budget: usize,
    pub max_iterations: usize,
    pub lm_lambda_initial: f64,
    pub lm_lambda_max: f64,
    /// Stop when the largest scaled step falls below this.
    pub step_tolerance: f64,
    /// Relative energy decrease below which iteration stops.
    pub energy_tolerance: f64,
    /// Log-scale drift that swaps in the secondary marginalization prior.
    pub scale_switch_threshold: f64,
    pub point_marginalization: PointMarginalization,
    pub estimate_affine: bool,
    /// Mean per-pixel residual above which an observation is an outlier.
    pub outlier_residual: f64,
    /// Per-second twist weights on translation and rotation.
    pub twist_weight_translation: f64,
    pub twist_weight_rotation: f64,
    /// Standard deviations of the priors that fix the initial gauge.
    pub initial_pose_sigma: f64,
    pub initial_velocity_sigma: f64,
    pub bias_acc_sigma: f64,
    pub bias_gyro_sigma: f64,
    /// Prior on the inverse depth of freshly activated points, relative to their value.
    pub idepth_prior_sigma: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            max_keyframes: 7,
            point_budget: 2000,
            max_iterations: 6,
            lm_lambda_initial: 1e-5,
            lm_lambda_max: 1e6,
            step_tolerance: 1e-7,
            energy_tolerance: 1e-6,
            scale_switch_threshold: 0.1,
            point_marginalization: PointMarginalization::default(),
            estimate_affine: false,
            outlier_residual: 12.0,
            twist_weight_translation: crate::twist::DEFAULT_TWIST_WEIGHT,
            twist_weight_rotation: crate::twist::DEFAULT_TWIST_WEIGHT,
            initial_pose_sigma: 1e-4,
            initial_velocity_sigma: 0.01,
            bias_acc_sigma: 0.1,
            bias_gyro_sigma: 0.01,
            idepth_prior_sigma: 1e3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    /// A keyframe is forced after this many frames.
    pub max_keyframe_interval: usize,
    /// Mean translational flow (pixels, relative to image diagonal 1000) that triggers a keyframe.
    pub flow_translation: f64,
    /// Mean flow including rotation that triggers a keyframe.
    pub flow_total: f64,
    /// Pyramid levels built for every frame.
    pub pyramid_levels: usize,
    /// Refine the IMU-predicted pose by direct alignment on the pyramid.
    pub coarse_alignment: bool,
    /// Number of samples averaged to initialise the gravity direction.
    pub gravity_init_samples: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            max_keyframe_interval: 5,
            flow_translation: 30.0,
            flow_total: 45.0,
            pyramid_levels: 4,
            coarse_alignment: false,
            gravity_init_samples: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointConfig {
    /// Side of the square regions used for selection quotas, pixels.
    pub region_size: usize,
    /// Minimum gradient magnitude above the region median for a candidate.
    pub min_gradient: f64,
    /// Border kept free of points, pixels.
    pub border: usize,
    /// Candidates created per new keyframe, as a fraction of the point budget.
    pub candidates_per_keyframe: f64,
    /// Epipolar search: ratio of second-best to best match energy required.
    pub min_quality: f64,
    /// Largest inverse-depth interval, relative to its value, for activation.
    pub max_relative_uncertainty: f64,
    /// Smallest search length in pixels for a trace to be informative.
    pub min_trace_pixels: f64,
    /// Energy per pattern pixel above which a trace match is rejected.
    pub max_trace_energy: f64,
    /// Minimum pixel distance between active points.
    pub min_point_distance: f64,
    /// Initial inverse depth for candidates and its range.
    pub idepth_init: f64,
    pub idepth_min: f64,
    pub idepth_max: f64,
}

impl Default for PointConfig {
    fn default() -> Self {
        Self {
            region_size: 32,
            min_gradient: 7.0,
            border: 6,
            candidates_per_keyframe: 0.6,
            min_quality: 1.5,
            max_relative_uncertainty: 0.25,
            min_trace_pixels: 1.5,
            max_trace_energy: 20.0 * 20.0,
            min_point_distance: 3.0,
            idepth_init: 0.3,
            idepth_min: 0.02,
            idepth_max: 5.0,
        }
    }
}

/// Complete estimator configuration; every field can be set from a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryConfig {
    pub mode: ShutterMode,
    pub seed: u64,
    pub solver: SolverConfig,
    pub photometric: PhotometricConfig,
    pub imu: ImuNoise,
    pub preintegration: PreintegrationMode,
    pub frontend: FrontendConfig,
    pub points: PointConfig,
}

impl OdometryConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is serializable")
    }

    /// Photometric settings with the shutter mode applied.
    pub fn effective_photometric(&self, global_shutter_data: bool) -> PhotometricConfig {
        PhotometricConfig {
            rolling_shutter: self.mode == ShutterMode::Rs && !global_shutter_data,
            ..self.photometric
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_strictness() {
        let mut cfg = OdometryConfig::default();
        cfg.mode = ShutterMode::GsAssume;
        cfg.solver.alpha = 0.5;
        let text = cfg.to_toml();
        assert_eq!(OdometryConfig::from_toml(&text).unwrap(), cfg);
        assert!(OdometryConfig::from_toml("[solver]\nalphaa = 1.0\n").is_err());
        let partial = OdometryConfig::from_toml("mode = \"gs-assume\"\n[solver]\nmax_keyframes = 5\n").unwrap();
        assert_eq!(partial.solver.max_keyframes, 5);
        assert_eq!(partial.solver.point_budget, 2000);
        assert_eq!(partial.mode, ShutterMode::GsAssume);
    }

    #[test]
    fn defaults_follow_documented_values() {
        let s = SolverConfig::default();
        assert_eq!((s.max_keyframes, s.point_budget), (7, 2000));
        assert_eq!((s.alpha, s.beta, s.scale_switch_threshold), (1.0, 1.0, 0.1));
        assert_eq!("gs-assume".parse::<ShutterMode>(), Ok(ShutterMode::GsAssume));
        assert!("global".parse::<ShutterMode>().is_err());
    }
}
