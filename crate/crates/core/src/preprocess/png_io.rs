use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{CoreError, Result};

fn encoder<'a>(w: BufWriter<File>, width: usize, height: usize, depth: png::BitDepth) -> png::Encoder<'a, BufWriter<File>> {
    let mut e = png::Encoder::new(w, width as u32, height as u32);
    e.set_color(png::ColorType::Grayscale);
    e.set_depth(depth);
    e
}

fn png_err(e: impl std::fmt::Display) -> CoreError {
    CoreError::Format(format!("png: {e}"))
}

/// 8-bit grayscale PNG from intensities in `[0, 1]`.
pub fn write_gray(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_gray8(path, width, height, &bytes)
}

pub fn write_gray8(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut w = encoder(BufWriter::new(File::create(path)?), width, height, png::BitDepth::Eight)
        .write_header()
        .map_err(png_err)?;
    w.write_image_data(bytes).map_err(png_err)?;
    Ok(())
}

/// 1-bit PNG of a binary mask.
pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[u8]) -> Result<()> {
    let stride = width.div_ceil(8);
    let mut packed = vec![0u8; stride * height];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] != 0 {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut w = encoder(BufWriter::new(File::create(path)?), width, height, png::BitDepth::One)
        .write_header()
        .map_err(png_err)?;
    w.write_image_data(&packed).map_err(png_err)?;
    Ok(())
}

/// Decode a grayscale PNG of any bit depth to 8-bit values, `(w, h, data)`.
/// One-bit images decode to `{0, 255}`.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut decoder = png::Decoder::new(File::open(path)?);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let data: Vec<u8> = buf[..info.buffer_size()].chunks(channels).map(|c| c[0]).collect();
    if data.len() != w * h {
        return Err(CoreError::Format(format!("unexpected PNG layout in {}", path.display())));
    }
    Ok((w, h, data))
}
