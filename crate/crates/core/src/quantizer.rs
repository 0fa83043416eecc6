//! Symmetric round-to-nearest group-wise weight quantization.
//!
//! Each row is split into groups of `group_size` consecutive entries. A group
//! gets `scale = max|w| / (2^(bits-1) - 1)` and codes
//! `clamp(round(w / scale))`, rounding half away from zero. All-zero groups
//! take `scale = 1` with zero codes.

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use serde::{Deserialize, Serialize};

/// Group layout along each row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSize {
    PerRow,
    Cols(usize),
}

impl GroupSize {
    fn width(self, cols: usize) -> usize {
        match self {
            GroupSize::PerRow => cols,
            GroupSize::Cols(g) => g,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: GroupSize,
    pub symmetric: bool,
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: GroupSize) -> Self {
        Self {
            bits,
            group_size,
            symmetric: true,
        }
    }

    /// Largest positive code, `2^(bits-1) - 1`.
    pub fn qmax(&self) -> i32 {
        (1_i32 << (self.bits - 1)) - 1
    }

    pub fn qmin(&self) -> i32 {
        -(1_i32 << (self.bits - 1))
    }

    pub fn validate(&self, cols: usize) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Config(format!("bits = {} outside [2, 8]", self.bits)));
        }
        if !self.symmetric {
            return Err(Error::Config("only symmetric quantization is supported".into()));
        }
        match self.group_size {
            GroupSize::Cols(0) => Err(Error::Config("group_size must be positive".into())),
            GroupSize::Cols(g) if cols % g != 0 => Err(Error::Config(format!(
                "group_size {g} does not divide row length {cols}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Integer codes plus one scale per `(row, group)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeight {
    codes: Vec<i8>,
    scales: Vec<f64>,
    config: QuantConfig,
    rows: usize,
    cols: usize,
}

impl QuantizedWeight {
    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn config(&self) -> QuantConfig {
        self.config
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn groups_per_row(&self) -> usize {
        self.cols / self.config.group_size.width(self.cols)
    }

    /// Scale governing entry `(r, c)`.
    pub fn scale_at(&self, r: usize, c: usize) -> f64 {
        let width = self.config.group_size.width(self.cols);
        self.scales[r * self.groups_per_row() + c / width]
    }

    pub fn max_scale(&self) -> f64 {
        self.scales.iter().copied().fold(0.0, f64::max)
    }
}

pub fn quantize(w: &DenseMatrix, cfg: &QuantConfig) -> Result<QuantizedWeight> {
    let (rows, cols) = w.shape();
    cfg.validate(cols)?;
    let width = cfg.group_size.width(cols);
    let (qmin, qmax) = (cfg.qmin() as f64, cfg.qmax() as f64);
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows * cols / width.max(1));
    for r in 0..rows {
        for group in w.row(r).chunks(width) {
            let max_abs = group.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let scale = if max_abs == 0.0 { 1.0 } else { max_abs / qmax };
            scales.push(scale);
            // f64::round rounds half away from zero
            codes.extend(group.iter().map(|v| (v / scale).round().clamp(qmin, qmax) as i8));
        }
    }
    Ok(QuantizedWeight {
        codes,
        scales,
        config: *cfg,
        rows,
        cols,
    })
}

pub fn dequantize(q: &QuantizedWeight) -> DenseMatrix {
    let width = q.config.group_size.width(q.cols);
    let per_row = q.groups_per_row();
    let mut data = Vec::with_capacity(q.codes.len());
    for r in 0..q.rows {
        for (c, &code) in q.codes[r * q.cols..(r + 1) * q.cols].iter().enumerate() {
            data.push(code as f64 * q.scales[r * per_row + c / width]);
        }
    }
    DenseMatrix::from_vec(q.rows, q.cols, data).expect("finite codes and scales")
}

/// `W - dequantize(q)`.
pub fn residual(w: &DenseMatrix, q: &QuantizedWeight) -> Result<DenseMatrix> {
    if w.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "residual of {:?} against quantized {:?}",
            w.shape(),
            q.shape()
        )));
    }
    w.sub(&dequantize(q))
}
