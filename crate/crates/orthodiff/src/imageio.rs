//! 8-bit RGB PNG reading and writing.

use std::path::Path;

use orthodiff_core::feature::ImageTensor;

use crate::error::{Error, Result};

/// Channel value in `[0,1]` to its nearest 8-bit level.
pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The image as it reads back after a PNG round trip.
pub fn quantized(image: &ImageTensor) -> ImageTensor {
    let px = image.pixels().iter().map(|&x| f64::from(quantize(x)) / 255.0).collect();
    ImageTensor::new(image.height(), image.width(), image.channels(), px).expect("same geometry")
}

pub fn encode_png(image: &ImageTensor) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::Corrupt(format!("PNG output needs 3 channels, got {}", image.channels())));
    }
    let bytes: Vec<u8> = image.pixels().iter().map(|&x| quantize(x)).collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .ok_or_else(|| Error::Corrupt("pixel buffer size mismatch".into()))?;
    let mut out = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| Error::Corrupt(format!("PNG encoding failed: {e}")))?;
    Ok(out)
}

pub fn write_png(path: &Path, image: &ImageTensor) -> Result<()> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Corrupt(format!("missing image {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let px = img.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
    Ok(ImageTensor::new(h as usize, w as usize, 3, px)?)
}
