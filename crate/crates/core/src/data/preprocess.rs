//! Slice preprocessing: black-slice removal, min-max scaling, resizing.

use crate::error::{Error, Result};

/// Slices whose maximum intensity does not exceed this are dropped.
pub const BLACK_THRESHOLD: f32 = 1e-6;

/// Maps `[min, max]` onto `[0, 1]`; a constant image maps to zeros.
pub fn min_max_scale(data: &mut [f32]) {
    let (lo, hi) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        data.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    data.iter_mut().for_each(|v| *v = (*v - lo) / range);
}

/// Bilinear resize with half-pixel centres and edge clamping. The identity
/// size returns the input unchanged.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<f32>> {
    check_dims(src, h, w, out_h, out_w)?;
    if (h, w) == (out_h, out_w) {
        return Ok(src.to_vec());
    }
    let coord = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let at = |y: usize, x: usize| src[y * w + x] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize for label maps (same sampling grid as bilinear).
pub fn resize_nearest<V: Copy>(src: &[V], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<V>> {
    if src.len() != h * w || h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape {
            op: "resize_nearest",
            detail: format!("{} values for {h}x{w} -> {out_h}x{out_w}", src.len()),
        });
    }
    let idx = |dst: usize, n_in: usize, n_out: usize| ((dst * n_in * 2 + n_in) / (2 * n_out)).min(n_in - 1);
    Ok((0..out_h)
        .flat_map(|oy| (0..out_w).map(move |ox| (oy, ox)))
        .map(|(oy, ox)| src[idx(oy, h, out_h) * w + idx(ox, w, out_w)])
        .collect())
}

fn check_dims(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<()> {
    if src.len() != h * w || h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape {
            op: "resize_bilinear",
            detail: format!("{} values for {h}x{w} -> {out_h}x{out_w}", src.len()),
        });
    }
    Ok(())
}

/// Returns `None` for black slices; otherwise the min-max scaled image
/// resized to `size × size`.
pub fn preprocess(raw: &[f32], h: usize, w: usize, size: usize) -> Result<Option<Vec<f32>>> {
    if raw.len() != h * w {
        return Err(Error::Shape {
            op: "preprocess",
            detail: format!("{} values for {h}x{w}", raw.len()),
        });
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("preprocess"));
    }
    let max = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max <= BLACK_THRESHOLD {
        return Ok(None);
    }
    let mut img = raw.to_vec();
    min_max_scale(&mut img);
    let mut out = resize_bilinear(&img, h, w, size, size)?;
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Some(out))
}
