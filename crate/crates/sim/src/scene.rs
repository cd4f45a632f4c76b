//! A closed box room whose walls carry smooth procedural textures.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub texture_seed: u64,
    /// Mean intensity on a 0..255 scale.
    pub ambient: f64,
    /// Peak-to-peak intensity variation of the texture.
    pub contrast: f64,
    /// Lattice spacing of the finest texture octave, meters.
    pub texture_scale: f64,
    pub octaves: u32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room_min: [-3.0, -3.0, 0.0],
            room_max: [3.0, 3.0, 3.0],
            texture_seed: 1,
            ambient: 128.0,
            contrast: 160.0,
            texture_scale: 0.06,
            octaves: 4,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SceneError {
    #[error("camera centre {0:?} is outside the room")]
    OutsideRoom([f64; 3]),
    #[error("ray does not hit the room")]
    Miss,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter of the intersection (equals depth for unit-z rays).
    pub distance: f64,
    pub intensity: f64,
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = mix(seed ^ mix(ix as u64 ^ mix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Quintic fade, C^2 at lattice points.
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Smooth value noise in [0, 1].
pub fn value_noise(seed: u64, p: Vector2<f64>) -> f64 {
    let (fx, fy) = (p.x.floor(), p.y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (fade(p.x - fx), fade(p.y - fy));
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

impl SceneSpec {
    /// Texture intensity at in-plane coordinates of wall `face`.
    pub fn texture(&self, face: usize, uv: Vector2<f64>) -> f64 {
        let mut sum = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut scale = self.texture_scale;
        let base = mix(self.texture_seed ^ ((face as u64 + 1) * 0x1000_0001));
        for o in 0..self.octaves.max(1) {
            sum += amp * value_noise(mix(base + o as u64), uv / scale);
            norm += amp;
            // coarser octaves carry more energy
            amp *= 1.6;
            scale *= 2.0;
        }
        let n = sum / norm;
        // stretch the mid-concentrated sum of octaves back towards [0, 1]
        let n = (0.5 + (n - 0.5) * 2.2).clamp(0.0, 1.0);
        self.ambient + self.contrast * (n - 0.5)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] > self.room_min[k] && p[k] < self.room_max[k])
    }

    /// Intersects a ray starting inside the room with its walls.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Result<Hit, SceneError> {
        if !self.contains(origin) {
            return Err(SceneError::OutsideRoom([origin.x, origin.y, origin.z]));
        }
        let mut best = (f64::INFINITY, 0usize);
        for k in 0..3 {
            if dir[k] == 0.0 {
                continue;
            }
            let (bound, face) = if dir[k] > 0.0 {
                (self.room_max[k], 2 * k + 1)
            } else {
                (self.room_min[k], 2 * k)
            };
            let t = (bound - origin[k]) / dir[k];
            if t > 0.0 && t < best.0 {
                best = (t, face);
            }
        }
        let (t, face) = best;
        if !t.is_finite() {
            return Err(SceneError::Miss);
        }
        let p = origin + dir * t;
        let axis = face / 2;
        let uv = Vector2::new(p[(axis + 1) % 3], p[(axis + 2) % 3]);
        Ok(Hit {
            distance: t,
            intensity: self.texture(face, uv),
        })
    }
}
