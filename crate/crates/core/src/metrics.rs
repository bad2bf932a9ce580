//! Surface Dice, volumetric Dice and parameter accounting.

use std::fmt;

use crate::convlora::{full_param_count, trainable_param_count};
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::unet::{InjectionSelector, UNet};

/// Default surface tolerance in pixels.
pub const DEFAULT_TOLERANCE: f64 = 1.0;

/// Binary `[H, W]` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape {
                op: "BinaryMask::new",
                detail: format!("{height}x{width} mask with {} values", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    /// From integer labels; anything other than 0/1 is rejected.
    pub fn from_labels(height: usize, width: usize, labels: &[u32]) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {bad} is not binary")));
        }
        Self::new(height, width, labels.iter().map(|&v| v == 1).collect())
    }

    /// Pixels equal to `class` become foreground.
    pub fn from_class(height: usize, width: usize, labels: &[u32], class: u32) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&v| v == class).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Foreground pixels with at least one background 4-neighbour, pixels
    /// outside the image counting as background.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape {
            op: "surface_dice",
            detail: format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        });
    }
    Ok(())
}

const FAR: i64 = 1 << 40;

/// 1D squared distance transform of a sampled function (lower envelope of
/// parabolas). Values are exact integers.
fn dt_1d(f: &[i64], out: &mut [i64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| -> f64 {
        let num = (f[q] + (q * q) as i64) - (f[p] + (p * p) as i64);
        num as f64 / (2 * (q as i64 - p as i64)) as f64
    };
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as i64 - v[k] as i64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest
/// `sites` pixel. `sites` must be non-empty.
pub fn squared_distance_map(height: usize, width: usize, sites: &[(usize, usize)]) -> Vec<i64> {
    let mut grid = vec![FAR; height * width];
    for &(y, x) in sites {
        grid[y * width + x] = 0;
    }
    let n = height.max(width);
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut col = vec![0i64; height];
    let mut col_out = vec![0i64; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        dt_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = col_out[y].min(FAR);
        }
    }
    let mut row_out = vec![0i64; width];
    for y in 0..height {
        let row = &grid[y * width..(y + 1) * width];
        dt_1d(row, &mut row_out, &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&row_out);
    }
    grid
}

fn within(d2: i64, tolerance: f64) -> bool {
    (d2 as f64) <= tolerance * tolerance
}

/// Surface Dice at `tolerance_px`: the fraction of boundary pixels of
/// either mask lying within the tolerance of the other mask's boundary.
/// Both empty scores 1, exactly one empty scores 0.
pub fn surface_dice(pred: &BinaryMask, truth: &BinaryMask, tolerance_px: f64) -> Result<f64> {
    check_pair(pred, truth)?;
    if !(tolerance_px >= 0.0) || !tolerance_px.is_finite() {
        return Err(Error::InvalidArgument(format!("tolerance {tolerance_px} must be finite and >= 0")));
    }
    let bp = pred.boundary();
    let bt = truth.boundary();
    match (bp.is_empty(), bt.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let (h, w) = (pred.height, pred.width);
    let dt_truth = squared_distance_map(h, w, &bt);
    let dt_pred = squared_distance_map(h, w, &bp);
    let p_ok = bp.iter().filter(|&&(y, x)| within(dt_truth[y * w + x], tolerance_px)).count();
    let t_ok = bt.iter().filter(|&&(y, x)| within(dt_pred[y * w + x], tolerance_px)).count();
    Ok((p_ok + t_ok) as f64 / (bp.len() + bt.len()) as f64)
}

/// `2|P∩T| / (|P|+|T|)`; both empty scores 1.
pub fn volumetric_dice(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    check_pair(pred, truth)?;
    let inter = pred.data.iter().zip(&truth.data).filter(|(a, b)| **a && **b).count();
    let denom = pred.count() + truth.count();
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / denom as f64)
}

/// Parameter totals of one layer (conv or BN) of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLine {
    pub layer: String,
    pub total: usize,
    pub trainable: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub total_params: usize,
    pub trainable_params: usize,
    /// Parameters excluding adapter factors.
    pub base_params: usize,
    pub layers: Vec<LayerLine>,
}

impl ParamReport {
    pub fn reduction_percent(&self) -> f64 {
        if self.total_params == 0 {
            return 100.0;
        }
        100.0 * (1.0 - self.trainable_params as f64 / self.total_params as f64)
    }

    pub fn trainable_fraction(&self) -> f64 {
        if self.total_params == 0 {
            return 0.0;
        }
        self.trainable_params as f64 / self.total_params as f64
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            writeln!(f, "layer {} total={} trainable={}", l.layer, l.total, l.trainable)?;
        }
        writeln!(f, "total_params {}", self.total_params)?;
        writeln!(f, "base_params {}", self.base_params)?;
        writeln!(f, "trainable_params {}", self.trainable_params)?;
        writeln!(f, "trainable_percent {:.4}", 100.0 * self.trainable_fraction())?;
        write!(f, "reduction_percent {:.4}", self.reduction_percent())
    }
}

/// Sums parameter tensors by freeze flag, grouped by layer path.
pub fn param_report<T: Scalar>(model: &UNet<T>) -> ParamReport {
    let mut layers: Vec<LayerLine> = Vec::new();
    let mut base = 0usize;
    for (name, n, trainable) in model.param_table() {
        let layer = name.rsplit_once('.').map(|(l, _)| l).unwrap_or(&name).to_string();
        if !name.ends_with(".lora_x") && !name.ends_with(".lora_y") {
            base += n;
        }
        match layers.last_mut() {
            Some(last) if last.layer == layer => {
                last.total += n;
                last.trainable += if trainable { n } else { 0 };
            }
            _ => layers.push(LayerLine {
                layer,
                total: n,
                trainable: if trainable { n } else { 0 },
            }),
        }
    }
    ParamReport {
        total_params: layers.iter().map(|l| l.total).sum(),
        trainable_params: layers.iter().map(|l| l.trainable).sum(),
        base_params: base,
        layers,
    }
}

/// Full fine-tune parameter count (kernels and biases) of the convolutions a
/// selector covers, against the adapter count at `rank` for the same layers.
pub fn selector_comparison<T: Scalar>(
    model: &UNet<T>,
    selector: &InjectionSelector,
    rank: usize,
) -> (usize, usize) {
    let specs = model.selected_conv_specs(selector);
    let full = specs.iter().map(|(_, s)| full_param_count(s)).sum();
    let adapter = specs.iter().map(|(_, s)| trainable_param_count(s, rank)).sum();
    (full, adapter)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
