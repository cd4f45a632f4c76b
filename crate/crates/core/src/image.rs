//! Grayscale images, gradient pyramids and bilinear sampling.

use nalgebra::Vector2;

/// Row-major single-channel image with intensities on the 0..255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "image buffer size");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// 2x2 box downsampling.
    pub fn half(&self) -> GrayImage {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        GrayImage::from_fn(w, h, |x, y| {
            let (x0, y0) = (2 * x, 2 * y);
            let x1 = (x0 + 1).min(self.width - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            0.25 * (self.at(x0, y0) + self.at(x1, y0) + self.at(x0, y1) + self.at(x1, y1))
        })
    }
}

/// Source of intensities and spatial gradients at sub-pixel locations.
pub trait IntensitySampler {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    /// Intensity and gradient, or `None` outside the interpolation domain.
    fn sample(&self, x: f64, y: f64) -> Option<(f64, Vector2<f64>)>;
}

/// One pyramid level: intensity plus central-difference gradients, interleaved.
#[derive(Clone, Debug)]
pub struct GradientLevel {
    pub width: usize,
    pub height: usize,
    data: Vec<[f32; 3]>,
}

impl GradientLevel {
    pub fn from_image(img: &GrayImage) -> Self {
        let (w, h) = (img.width, img.height);
        let mut data = vec![[0.0f32; 3]; w * h];
        for y in 0..h {
            for x in 0..w {
                let xl = x.saturating_sub(1);
                let xr = (x + 1).min(w - 1);
                let yu = y.saturating_sub(1);
                let yd = (y + 1).min(h - 1);
                let dx = (img.at(xr, y) - img.at(xl, y)) / (xr - xl).max(1) as f32;
                let dy = (img.at(x, yd) - img.at(x, yu)) / (yd - yu).max(1) as f32;
                data[y * w + x] = [img.at(x, y), dx, dy];
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    #[inline]
    pub fn texel(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    /// Squared gradient magnitude at an integer pixel.
    pub fn gradient_sq(&self, x: usize, y: usize) -> f32 {
        let t = self.texel(x, y);
        t[1] * t[1] + t[2] * t[2]
    }
}

impl IntensitySampler for GradientLevel {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn sample(&self, x: f64, y: f64) -> Option<(f64, Vector2<f64>)> {
        if !(x >= 0.0 && y >= 0.0 && x < (self.width - 1) as f64 && y < (self.height - 1) as f64) {
            return None;
        }
        let ix = x as usize;
        let iy = y as usize;
        let fx = (x - ix as f64) as f32;
        let fy = (y - iy as f64) as f32;
        let i = iy * self.width + ix;
        let a = self.data[i];
        let b = self.data[i + 1];
        let c = self.data[i + self.width];
        let d = self.data[i + self.width + 1];
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            out[k] = w00 * a[k] + w10 * b[k] + w01 * c[k] + w11 * d[k];
        }
        Some((out[0] as f64, Vector2::new(out[1] as f64, out[2] as f64)))
    }
}

/// Image pyramid with gradients; level 0 is full resolution.
#[derive(Clone, Debug)]
pub struct ImagePyramid {
    levels: Vec<GradientLevel>,
}

impl ImagePyramid {
    pub fn new(img: &GrayImage, num_levels: usize) -> Self {
        let mut levels = Vec::with_capacity(num_levels.max(1));
        let mut cur = img.clone();
        for l in 0..num_levels.max(1) {
            if l > 0 {
                cur = cur.half();
            }
            levels.push(GradientLevel::from_image(&cur));
        }
        Self { levels }
    }

    pub fn level(&self, l: usize) -> &GradientLevel {
        &self.levels[l.min(self.levels.len() - 1)]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_reproduces_affine_ramp() {
        let img = GrayImage::from_fn(20, 10, |x, y| 2.0 * x as f32 + 3.0 * y as f32 + 1.0);
        let lvl = GradientLevel::from_image(&img);
        let (v, g) = lvl.sample(4.25, 3.5).unwrap();
        assert!((v - (2.0 * 4.25 + 3.0 * 3.5 + 1.0)).abs() < 1e-5);
        assert!((g - Vector2::new(2.0, 3.0)).norm() < 1e-5);
        assert!(lvl.sample(19.0, 2.0).is_none());
        assert!(lvl.sample(-0.1, 2.0).is_none());
    }

    #[test]
    fn pyramid_halves_resolution() {
        let img = GrayImage::filled(64, 48, 7.0);
        let p = ImagePyramid::new(&img, 4);
        assert_eq!(p.num_levels(), 4);
        assert_eq!((p.level(3).width, p.level(3).height), (8, 6));
        assert_eq!(p.level(2).texel(1, 1)[0], 7.0);
    }
}
