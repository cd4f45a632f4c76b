use crate::scene::{SceneError, SceneSpec};
use crate::trajectory::Trajectory;
use nalgebra::Vector2;
use rsvio_core::camera::CameraModel;
use rsvio_core::image::GrayImage;
use rsvio_core::lie::Pose3;

#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: GrayImage,
    /// Depth along the optical axis per pixel, row-major.
    pub depth: Vec<f32>,
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("camera model: {0}")]
    Camera(String),
}

fn shade(scene: &SceneSpec, cam: &CameraModel, t_wc: &Pose3, x: usize, y: usize) -> Result<(f32, f32), SceneError> {
    let px = Vector2::new(x as f64, y as f64);
    let dir = t_wc.rotation.rotate(&cam.bearing(&px));
    let hit = scene.cast(&t_wc.translation, &dir)?;
    Ok((hit.intensity as f32, hit.distance as f32))
}

/// Camera-to-world pose at time `t`.
pub fn camera_pose(traj: &Trajectory, t_cam_imu: &Pose3, t: f64) -> Pose3 {
    traj.pose(t) * t_cam_imu.inverse()
}

/// Renders the undistorted image of a rolling-shutter camera. Pixel `(x, y)`
/// is seen at `frame_time` plus the row delay of its *distorted* row, the
/// same capture time the camera model assigns to it.
pub fn render_rs_image(
    scene: &SceneSpec,
    traj: &Trajectory,
    cam: &CameraModel,
    t_cam_imu: &Pose3,
    frame_time: f64,
) -> Result<Rendered, RenderError> {
    let (w, h) = (cam.width, cam.height);
    let mut data = vec![0.0f32; w * h];
    let mut depth = vec![0.0f32; w * h];
    let mut cached: Option<(f64, Pose3)> = None;
    for y in 0..h {
        for x in 0..w {
            let px = Vector2::new(x as f64, y as f64);
            let rows = cam.capture_time(&px).map_err(|e| RenderError::Camera(e.to_string()))?;
            let t = frame_time + cam.rows_to_seconds(rows);
            let pose = match cached {
                Some((tc, p)) if tc == t => p,
                _ => {
                    let p = camera_pose(traj, t_cam_imu, t);
                    cached = Some((t, p));
                    p
                }
            };
            let (v, d) = shade(scene, cam, &pose, x, y)?;
            data[y * w + x] = v;
            depth[y * w + x] = d;
        }
    }
    Ok(Rendered {
        image: GrayImage::new(w, h, data),
        depth,
    })
}

/// Renders every pixel with the single pose at `frame_time`.
pub fn render_gs_image(
    scene: &SceneSpec,
    traj: &Trajectory,
    cam: &CameraModel,
    t_cam_imu: &Pose3,
    frame_time: f64,
) -> Result<Rendered, RenderError> {
    let (w, h) = (cam.width, cam.height);
    let pose = camera_pose(traj, t_cam_imu, frame_time);
    let mut data = vec![0.0f32; w * h];
    let mut depth = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (v, d) = shade(scene, cam, &pose, x, y)?;
            data[y * w + x] = v;
            depth[y * w + x] = d;
        }
    }
    Ok(Rendered {
        image: GrayImage::new(w, h, data),
        depth,
    })
}

/// Number of pixels whose intensity gradient exceeds `threshold` (central
/// differences, 0..255 scale).
pub fn textured_pixels(img: &GrayImage, threshold: f32) -> usize {
    let mut n = 0;
    for y in 1..img.height - 1 {
        for x in 1..img.width - 1 {
            let gx = 0.5 * (img.at(x + 1, y) - img.at(x - 1, y));
            let gy = 0.5 * (img.at(x, y + 1) - img.at(x, y - 1));
            if gx * gx + gy * gy > threshold * threshold {
                n += 1;
            }
        }
    }
    n
}
