//! 8-bit RGB PNG export of rendered birdviews.

use super::{io_err, IoError};
use std::path::Path;

/// Writes a `[3, res, res]` float image (values in [0, 1]) as an 8-bit RGB
/// PNG, quantized as `round(255 x)`.
pub fn write_png(path: &Path, pixels: &[f64], resolution: usize) -> Result<(), IoError> {
    assert_eq!(pixels.len(), 3 * resolution * resolution);
    let n_px = resolution * resolution;
    let mut rgb = Vec::with_capacity(3 * n_px);
    for px in 0..n_px {
        for c in 0..3 {
            let v = (pixels[c * n_px + px].clamp(0.0, 1.0) * 255.0).round() as u8;
            rgb.push(v);
        }
    }
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut encoder = png::Encoder::new(
        std::io::BufWriter::new(file),
        resolution as u32,
        resolution as u32,
    );
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| IoError::BadRolloutFile(format!("png: {e}")))?;
    writer
        .write_image_data(&rgb)
        .map_err(|e| IoError::BadRolloutFile(format!("png: {e}")))?;
    Ok(())
}
