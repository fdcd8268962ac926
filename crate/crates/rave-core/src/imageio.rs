//! Image file decoding, PNG encoding, and atomic artifact writes.
//!
//! Inputs are 8-bit PNG (RGB or RGBA, alpha composited over an opaque white
//! background) or binary PPM. Output is always 8-bit RGB PNG. Values map
//! linearly between `[0, 255]` and `[0.0, 1.0]` with no gamma handling.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader, Rgb, RgbImage};

use crate::error::{invalid, Result};
use crate::image::ImageBuffer;

/// Decodes PNG or binary PPM bytes into a linear float image.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    let decoded = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| invalid!("unrecognized image data: {e}"))?
        .decode()
        .map_err(|e| invalid!("image decode failed: {e}"))?;
    from_decoded(decoded)
}

fn from_decoded(decoded: DynamicImage) -> Result<ImageBuffer> {
    let rgba = decoded.to_rgba8();
    let (w, h) = rgba.dimensions();
    ImageBuffer::from_fn(w as usize, h as usize, |x, y| {
        let [r, g, b, a] = rgba.get_pixel(x as u32, y as u32).0;
        let a = a as f64 / 255.0;
        [
            (r as f64 / 255.0) * a + (1.0 - a),
            (g as f64 / 255.0) * a + (1.0 - a),
            (b as f64 / 255.0) * a + (1.0 - a),
        ]
    })
}

/// Reads and decodes an image file.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path)?;
    decode_image(&bytes)
}

/// Encodes a float image as 8-bit RGB PNG, clamping into `[0, 1]`.
pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = RgbImage::new(img.width() as u32, img.height() as u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = img.get(x, y);
            let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, Rgb([to_u8(px[0]), to_u8(px[1]), to_u8(px[2])]));
        }
    }
    let mut bytes = Vec::new();
    out.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| invalid!("png encode failed: {e}"))?;
    Ok(bytes)
}

/// Writes `bytes` to `path` atomically: a temporary file in the same
/// directory is written in full, then renamed over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| invalid!("path {path:?} has no file name"))?;
    let mut tmp = dir.join(name);
    tmp.set_extension("tmp-rave");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Encodes and atomically writes a PNG file.
pub fn save_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}
