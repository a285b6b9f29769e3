//! Uniform affine quantization with per-channel / per-token / per-tensor
//! granularity and grid-search parameter calibration.
//!
//! The operator is `Q(w) = clip(round(w / scale) + z, q_min, q_max)` with
//! round-half-away-from-zero. Integer grids are signed: `q_min = -2^(b-1)`,
//! `q_max = 2^(b-1) - 1`, so `q_max - q_min == 2^bits - 1` and every value
//! fits packed 8-bit storage for bits <= 8.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Scale floor for degenerate (constant) groups.
pub const SCALE_FLOOR: f64 = 1e-8;

/// How quantization groups map onto a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One group per output column (weight matrices, in x out layout).
    PerChannel,
    /// One group per row (activation matrices, tokens x channels).
    PerToken,
    /// A single group for the whole tensor.
    PerTensor,
}

/// Bit-width and grid policy for one tensor class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub symmetric: bool,
    pub granularity: Granularity,
    pub q_min: i32,
    pub q_max: i32,
}

impl QuantSpec {
    pub fn new(bits: u8, symmetric: bool, granularity: Granularity) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::invalid(
                "QuantSpec::new",
                format!("bits must be in 2..=8, got {bits}"),
            ));
        }
        let q_min = -(1i32 << (bits - 1));
        let q_max = (1i32 << (bits - 1)) - 1;
        Ok(Self {
            bits,
            symmetric,
            granularity,
            q_min,
            q_max,
        })
    }

    pub fn groups_for(&self, rows: usize, cols: usize) -> usize {
        match self.granularity {
            Granularity::PerChannel => cols,
            Granularity::PerToken => rows,
            Granularity::PerTensor => 1,
        }
    }

    fn group_of(&self, r: usize, c: usize) -> usize {
        match self.granularity {
            Granularity::PerChannel => c,
            Granularity::PerToken => r,
            Granularity::PerTensor => {
                let _ = (r, c);
                0
            }
        }
    }
}

/// Learned scale and zero-point per quantization group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
}

impl QuantParams {
    pub fn groups(&self) -> usize {
        self.scales.len()
    }

    fn validate(&self, spec: &QuantSpec, rows: usize, cols: usize, op: &'static str) -> Result<()> {
        let want = spec.groups_for(rows, cols);
        if self.scales.len() != want || self.zero_points.len() != want {
            return Err(Error::shape(
                op,
                format!(
                    "{} scale groups / {} zero-points for {want} expected groups",
                    self.scales.len(),
                    self.zero_points.len()
                ),
            ));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::invalid(op, format!("non-positive scale {s}")));
        }
        if let Some(z) = self
            .zero_points
            .iter()
            .find(|z| **z < spec.q_min || **z > spec.q_max)
        {
            return Err(Error::invalid(
                op,
                format!("zero-point {z} outside [{}, {}]", spec.q_min, spec.q_max),
            ));
        }
        Ok(())
    }
}

/// Integer-grid tensor. Values are stored as i8 regardless of logical bits.
#[derive(Debug, Clone, PartialEq)]
pub struct QMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i8>,
}

#[inline]
fn quantize_value(v: f64, scale: f64, z: i32, q_min: i32, q_max: i32) -> i8 {
    let q = (v / scale).round() as i64 + i64::from(z);
    q.clamp(i64::from(q_min), i64::from(q_max)) as i8
}

/// Quantize a tensor onto the integer grid.
pub fn quantize(t: &Matrix, params: &QuantParams, spec: &QuantSpec) -> Result<QMatrix> {
    params.validate(spec, t.rows(), t.cols(), "quantize")?;
    let cols = t.cols();
    let mut data = vec![0i8; t.rows() * cols];
    for r in 0..t.rows() {
        let row = t.row(r);
        for c in 0..cols {
            let g = spec.group_of(r, c);
            data[r * cols + c] =
                quantize_value(row[c], params.scales[g], params.zero_points[g], spec.q_min, spec.q_max);
        }
    }
    Ok(QMatrix {
        rows: t.rows(),
        cols,
        data,
    })
}

/// Map grid values back to reals: `(q - z) * scale` per group.
pub fn dequantize(q: &QMatrix, params: &QuantParams, spec: &QuantSpec) -> Result<Matrix> {
    params.validate(spec, q.rows, q.cols, "dequantize")?;
    let mut data = vec![0.0; q.rows * q.cols];
    for r in 0..q.rows {
        for c in 0..q.cols {
            let g = spec.group_of(r, c);
            data[r * q.cols + c] =
                f64::from(i32::from(q.data[r * q.cols + c]) - params.zero_points[g]) * params.scales[g];
        }
    }
    Matrix::new(q.rows, q.cols, data)
}

/// Quantize-then-dequantize simulation.
pub fn fake_quantize(t: &Matrix, params: &QuantParams, spec: &QuantSpec) -> Result<Matrix> {
    let q = quantize(t, params, spec)?;
    dequantize(&q, params, spec)
}

/// Per-token dynamic fake quantization: minmax params are derived from each
/// row at call time, matching runtime activation quantization.
pub fn fake_quantize_dynamic(t: &Matrix, spec: &QuantSpec) -> Result<Matrix> {
    if spec.granularity != Granularity::PerToken {
        return Err(Error::invalid(
            "fake_quantize_dynamic",
            "dynamic quantization requires per-token granularity",
        ));
    }
    let params = minmax_params(t, spec)?;
    fake_quantize(t, &params, spec)
}

struct GroupRange {
    min: f64,
    max: f64,
    absmax: f64,
}

fn group_ranges(t: &Matrix, spec: &QuantSpec) -> Vec<GroupRange> {
    let groups = spec.groups_for(t.rows(), t.cols());
    let mut ranges: Vec<GroupRange> = (0..groups)
        .map(|_| GroupRange {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            absmax: 0.0,
        })
        .collect();
    for r in 0..t.rows() {
        let row = t.row(r);
        for c in 0..t.cols() {
            let g = spec.group_of(r, c);
            let v = row[c];
            let gr = &mut ranges[g];
            gr.min = gr.min.min(v);
            gr.max = gr.max.max(v);
            gr.absmax = gr.absmax.max(v.abs());
        }
    }
    ranges
}

fn asym_zero_point(min: f64, scale: f64, spec: &QuantSpec) -> i32 {
    let z = (f64::from(spec.q_min) - min / scale).round();
    (z as i64).clamp(i64::from(spec.q_min), i64::from(spec.q_max)) as i32
}

/// Conventional minmax initialization.
///
/// Symmetric: `scale = absmax / q_max`, zero-point 0. Asymmetric: the range
/// is extended to include zero, `scale = (max - min) / (q_max - q_min)`,
/// zero-point from the range minimum. Degenerate all-zero groups get the
/// [`SCALE_FLOOR`] scale and zero-point 0.
pub fn minmax_params(t: &Matrix, spec: &QuantSpec) -> Result<QuantParams> {
    let ranges = group_ranges(t, spec);
    let span = f64::from(spec.q_max - spec.q_min);
    let mut scales = Vec::with_capacity(ranges.len());
    let mut zero_points = Vec::with_capacity(ranges.len());
    for gr in &ranges {
        if gr.absmax < SCALE_FLOOR {
            scales.push(SCALE_FLOOR);
            zero_points.push(0);
            continue;
        }
        if spec.symmetric {
            scales.push((gr.absmax / f64::from(spec.q_max)).max(SCALE_FLOOR));
            zero_points.push(0);
        } else {
            let lo = gr.min.min(0.0);
            let hi = gr.max.max(0.0);
            let scale = ((hi - lo) / span).max(SCALE_FLOOR);
            scales.push(scale);
            zero_points.push(asym_zero_point(lo, scale, spec));
        }
    }
    Ok(QuantParams {
        scales,
        zero_points,
    })
}

/// Multiplicative scale-factor grid searched around the minmax scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: 0.4,
            hi: 1.2,
            points: 64,
        }
    }
}

impl GridSpec {
    /// Scale factors in grid order. The identity factor 1.0 is appended when
    /// the grid does not already contain it, so search can never end up worse
    /// than the minmax initialization.
    pub fn factors(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.points + 1);
        if self.points == 1 {
            out.push(self.lo);
        } else {
            let step = (self.hi - self.lo) / (self.points - 1) as f64;
            for i in 0..self.points {
                out.push(self.lo + step * i as f64);
            }
        }
        if !out.iter().any(|&f| f == 1.0) {
            out.push(1.0);
        }
        out
    }

    pub fn singleton_identity() -> Self {
        Self {
            lo: 1.0,
            hi: 1.0,
            points: 1,
        }
    }
}

/// Grid search for quantization parameters.
///
/// Groups are visited sequentially in index order; within a group every
/// candidate (scale factor crossed with zero-point candidates for asymmetric
/// specs) is scored by `objective(group, trial_params)` while all other
/// groups stay at their current values. Ties keep the earliest candidate.
/// Because the identity factor is always evaluated, the final objective is
/// never worse than at minmax initialization, for decomposable and coupled
/// objectives alike.
pub fn search_params<F>(
    t: &Matrix,
    spec: &QuantSpec,
    grid: &GridSpec,
    objective: F,
) -> Result<QuantParams>
where
    F: Fn(usize, &QuantParams) -> f64,
{
    if grid.points == 0 {
        return Err(Error::invalid("search_params", "empty candidate grid"));
    }
    let base = minmax_params(t, spec)?;
    let ranges = group_ranges(t, spec);
    let factors = grid.factors();
    let mut params = base.clone();
    for g in 0..params.groups() {
        let mut best: Option<(f64, f64, i32)> = None;
        let mut trial = params.clone();
        for &f in &factors {
            let scale = (base.scales[g] * f).max(SCALE_FLOOR);
            let zp_candidates: Vec<i32> = if spec.symmetric {
                vec![0]
            } else {
                let lo = ranges[g].min.min(0.0);
                let z = asym_zero_point(lo, scale, spec);
                let mut cands = vec![z];
                for nb in [z - 1, z + 1] {
                    let nb = nb.clamp(spec.q_min, spec.q_max);
                    if !cands.contains(&nb) {
                        cands.push(nb);
                    }
                }
                cands
            };
            for z in zp_candidates {
                trial.scales[g] = scale;
                trial.zero_points[g] = z;
                let value = objective(g, &trial);
                let better = match best {
                    None => true,
                    Some((bv, _, _)) => value < bv,
                };
                if better {
                    best = Some((value, scale, z));
                }
            }
        }
        let (_, scale, z) = best.expect("candidate grid is non-empty");
        params.scales[g] = scale;
        params.zero_points[g] = z;
    }
    Ok(params)
}

/// Per-group weight reconstruction MSE, the default search objective for
/// data-free weight calibration.
pub fn weight_mse_objective<'a>(
    t: &'a Matrix,
    spec: &'a QuantSpec,
) -> impl Fn(usize, &QuantParams) -> f64 + 'a {
    move |group, params| {
        let mut acc = 0.0;
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                if spec.group_of(r, c) != group {
                    continue;
                }
                let v = t.get(r, c);
                let q = quantize_value(v, params.scales[group], params.zero_points[group], spec.q_min, spec.q_max);
                let back = f64::from(i32::from(q) - params.zero_points[group]) * params.scales[group];
                let e = v - back;
                acc += e * e;
            }
        }
        acc
    }
}
