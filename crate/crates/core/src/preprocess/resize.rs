use super::slices::SliceRecord;
use crate::error::{CoreError, Result};

/// Source coordinate of destination pixel centre `i` (half-pixel aligned).
fn source(i: usize, scale: f64, len: usize) -> f64 {
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64)
}

/// Bilinear resample of an `h x w` grid to `out_h x out_w`.
pub fn bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let fy = source(i, sy, h);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for j in 0..out_w {
            let fx = source(j, sx, w);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Nearest-neighbour resample; values are copied, never blended.
pub fn nearest<T: Copy>(src: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let y = ((i as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize;
        for j in 0..out_w {
            let x = ((j as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize;
            out.push(src[y.min(h - 1) * w + x.min(w - 1)]);
        }
    }
    out
}

/// Resize to `size x size`: image bilinear, mask nearest.
pub fn resize_bilinear(rec: &SliceRecord, size: usize) -> Result<SliceRecord> {
    if size < 8 {
        return Err(CoreError::Config(format!("resize target {size} below 8")));
    }
    Ok(SliceRecord {
        image: bilinear(&rec.image, rec.height, rec.width, size, size),
        mask: nearest(&rec.mask, rec.height, rec.width, size, size),
        height: size,
        width: size,
        ..rec.clone()
    })
}
