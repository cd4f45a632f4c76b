use crate::DatasetError;
use image::{DynamicImage, ImageBuffer, Luma};
use rsvio_core::image::GrayImage;
use std::path::Path;

/// Intensities are kept on a 0..255 scale whatever the file depth.
const SIXTEEN_TO_EIGHT: f32 = 1.0 / 257.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ImageOptions {
    /// Accept 8-bit files (intensities used as-is). Without it only 16-bit
    /// grayscale is accepted.
    pub allow_8bit: bool,
}

pub fn read_image(path: &Path, options: &ImageOptions) -> Result<GrayImage, DatasetError> {
    let err = |message: String| DatasetError::Image {
        path: path.to_path_buf(),
        message,
    };
    let img = image::open(path).map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma16(buf) => Ok(GrayImage::new(
            w,
            h,
            buf.into_raw()
                .into_iter()
                .map(|v| v as f32 * SIXTEEN_TO_EIGHT)
                .collect(),
        )),
        DynamicImage::ImageLuma8(buf) if options.allow_8bit => Ok(GrayImage::new(
            w,
            h,
            buf.into_raw().into_iter().map(f32::from).collect(),
        )),
        DynamicImage::ImageLuma8(_) => Err(err("8-bit image; enable 8-bit input explicitly".into())),
        other => Err(err(format!("expected a grayscale image, found {:?}", other.color()))),
    }
}

/// Writes a 16-bit grayscale PNG from intensities on a 0..255 scale.
pub fn write_png16(path: &Path, img: &GrayImage) -> Result<(), DatasetError> {
    let data: Vec<u16> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 255.0) * 257.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, data).expect("buffer size matches");
    buf.save(path).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
