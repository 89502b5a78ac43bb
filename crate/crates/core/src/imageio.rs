//! 8-bit PNG import/export for inspection dumps. Lossy beyond 8 bits per channel.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Frame;
use crate::scalar::Scalar;

pub fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png<T: Scalar>(path: &Path, height: usize, width: usize, data: &[T]) -> Result<()> {
    if data.len() != height * width * 3 {
        return Err(Error::invalid(format!(
            "{} values for a {height}x{width} RGB image",
            data.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = data.iter().map(|&v| to_u8(v)).collect();
    enc.write_header()
        .and_then(|mut w| w.write_image_data(&bytes))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads an 8-bit RGB or RGBA PNG into `[0, 1]` values (alpha dropped).
pub fn read_rgb_png(path: &Path) -> Result<Frame<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("{}: only 8-bit PNGs are supported", path.display())));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::Format(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf[..info.buffer_size()].chunks_exact(channels) {
        let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
        data.extend(rgb.iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok(Frame { height: h, width: w, data })
}
