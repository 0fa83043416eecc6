//! Output sensitivity to quantization, measured by KL divergence.
//!
//! `D_i` is the batch-mean `KL(P ‖ Q_i)` where `P` is the full-precision
//! output distribution and `Q_i` the distribution with only matrix `i`
//! quantized. `D_ℓ` swaps a whole layer. Scores:
//!
//! ```text
//! S_i = D_i / Σ_{j ∈ W} D_j                 (within a window W)
//! S_ℓ = 1                  if ℓ ∈ T (top-K layers by D_ℓ)
//!     = D_ℓ / min_{m ∈ T} D_m   otherwise
//! ```

use crate::error::{Error, Result};
use crate::ids::{map_entries, MatrixId};
use crate::numerics::DenseMatrix;
use crate::toymodel::{forward_full, Model, QuantizedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Probability floor applied before renormalizing.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub inputs: Vec<DenseMatrix>,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn new(inputs: Vec<DenseMatrix>, seed: u64) -> Result<Self> {
        let Some(first) = inputs.first() else {
            return Err(Error::Config("calibration set needs at least one input".into()));
        };
        if inputs.iter().any(|x| x.cols() != first.cols()) {
            return Err(Error::Shape("calibration inputs differ in hidden dimension".into()));
        }
        Ok(Self { inputs, seed })
    }

    /// `count` standard-Gaussian activation batches of `tokens x hidden`.
    pub fn gaussian(hidden: usize, tokens: usize, count: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..count)
            .map(|_| {
                let data = (0..tokens * hidden).map(|_| rng.sample(StandardNormal)).collect();
                DenseMatrix::from_vec(tokens, hidden, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(inputs, seed)
    }

    pub fn count(&self) -> usize {
        self.inputs.len()
    }
}

/// Row-wise softmax with the probability floor applied.
pub fn softmax_rows(logits: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            let floored: Vec<f64> = e.iter().map(|v| (v / z).max(PROB_FLOOR)).collect();
            let z2: f64 = floored.iter().sum();
            floored.into_iter().map(|p| p / z2).collect()
        })
        .collect()
}

/// Full-precision output distribution for each token row of `x`.
pub fn output_distribution(model: &Model, x: &DenseMatrix) -> Result<Vec<Vec<f64>>> {
    Ok(softmax_rows(&forward_full(model, x)?.logits))
}

/// Natural-log `KL(p ‖ q)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("KL of lengths {} and {}", p.len(), q.len())));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// Mean KL over paired rows.
pub fn mean_kl(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape(format!("KL batch of {} against {}", p.len(), q.len())));
    }
    let total = p.iter().zip(q).map(|(a, b)| kl_divergence(a, b)).sum::<Result<f64>>()?;
    Ok(total / p.len() as f64)
}

fn reference(model: &Model, calib: &CalibrationSet) -> Result<Vec<Vec<Vec<f64>>>> {
    calib.inputs.iter().map(|x| output_distribution(model, x)).collect()
}

/// Mean KL over the calibration set, each batch weighted equally.
fn probe(model: &Model, calib: &CalibrationSet, reference: &[Vec<Vec<f64>>]) -> Result<f64> {
    let mut total = 0.0;
    for (x, p) in calib.inputs.iter().zip(reference) {
        total += mean_kl(p, &output_distribution(model, x)?)?;
    }
    Ok(total / calib.count() as f64)
}

fn swap_set(quantized: &QuantizedModel, ids: &[MatrixId]) -> Result<Vec<(MatrixId, DenseMatrix)>> {
    ids.iter()
        .map(|&id| Ok((id, quantized.dequantized(id)?.clone())))
        .collect()
}

/// `D_i` for each of `ids`, one isolated swap at a time.
pub fn matrix_sensitivity_for(
    model: &mut Model,
    quantized: &QuantizedModel,
    calib: &CalibrationSet,
    ids: &[MatrixId],
) -> Result<BTreeMap<MatrixId, f64>> {
    let reference = reference(model, calib)?;
    let mut out = BTreeMap::new();
    for &id in ids {
        let swap = swap_set(quantized, &[id])?;
        let guard = model.swap_in(swap)?;
        out.insert(id, probe(&guard, calib, &reference)?);
    }
    Ok(out)
}

pub fn matrix_sensitivity(
    model: &mut Model,
    quantized: &QuantizedModel,
    calib: &CalibrationSet,
) -> Result<BTreeMap<MatrixId, f64>> {
    let ids = model.probed_ids();
    matrix_sensitivity_for(model, quantized, calib, &ids)
}

/// `D_ℓ` with every probed matrix of layer `ℓ` swapped at once.
pub fn layer_sensitivity(
    model: &mut Model,
    quantized: &QuantizedModel,
    calib: &CalibrationSet,
) -> Result<BTreeMap<usize, f64>> {
    let reference = reference(model, calib)?;
    let ids = model.probed_ids();
    let mut out = BTreeMap::new();
    for l in 0..model.layers.len() {
        let members: Vec<MatrixId> = ids.iter().copied().filter(|id| id.layer == l).collect();
        let swap = swap_set(quantized, &members)?;
        let guard = model.swap_in(swap)?;
        out.insert(l, probe(&guard, calib, &reference)?);
    }
    Ok(out)
}

/// Grouping used to normalize `D_i` into `S_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    #[default]
    Window,
    Layer,
}

pub fn matrix_scores(d: &BTreeMap<MatrixId, f64>, scope: NormScope) -> BTreeMap<MatrixId, f64> {
    let key = |id: &MatrixId| match scope {
        NormScope::Window => (id.layer, Some(id.window().kind)),
        NormScope::Layer => (id.layer, None),
    };
    let mut groups: BTreeMap<_, Vec<MatrixId>> = BTreeMap::new();
    for id in d.keys() {
        groups.entry(key(id)).or_default().push(*id);
    }
    let mut out = BTreeMap::new();
    for (g, members) in groups {
        let sum: f64 = members.iter().map(|id| d[id]).sum();
        if sum > 0.0 {
            out.extend(members.iter().map(|id| (*id, d[id] / sum)));
        } else {
            log::warn!("sensitivity group {g:?} has zero total divergence, using uniform scores");
            let u = 1.0 / members.len() as f64;
            out.extend(members.iter().map(|id| (*id, u)));
        }
    }
    out
}

/// `ceil(L / 4)`, at least 1.
pub fn default_top_k(layers: usize) -> usize {
    layers.div_ceil(4).max(1)
}

/// `S_ℓ` per layer and the top set `T`, ordered by rank.
pub fn layer_scores(d: &BTreeMap<usize, f64>, k: usize) -> Result<(BTreeMap<usize, f64>, Vec<usize>)> {
    if k < 1 || k > d.len() {
        return Err(Error::Range(format!("top-K = {k} outside [1, {}]", d.len())));
    }
    let mut order: Vec<usize> = d.keys().copied().collect();
    order.sort_by(|a, b| d[b].partial_cmp(&d[a]).expect("finite divergences").then(a.cmp(b)));
    order.truncate(k);
    let floor = order.iter().map(|l| d[l]).fold(f64::INFINITY, f64::min);
    let mut out = BTreeMap::new();
    for (&l, &v) in d {
        let s = if order.contains(&l) {
            1.0
        } else if floor > 0.0 {
            v / floor
        } else {
            1.0
        };
        out.insert(l, s);
    }
    if floor <= 0.0 {
        log::warn!("top layer set has zero divergence, every layer scores 1");
    }
    Ok((out, order))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    #[serde(with = "map_entries")]
    pub d_matrix: BTreeMap<MatrixId, f64>,
    #[serde(with = "map_entries")]
    pub d_layer: BTreeMap<usize, f64>,
    #[serde(with = "map_entries")]
    pub s_matrix: BTreeMap<MatrixId, f64>,
    #[serde(with = "map_entries")]
    pub s_layer: BTreeMap<usize, f64>,
    pub top_set: Vec<usize>,
    pub k: usize,
    pub scope: NormScope,
    pub calibration_seed: u64,
    pub calibration_count: usize,
}

impl SensitivityReport {
    /// Runs both probes and derives the scores. `k = None` uses the default top-K.
    pub fn measure(
        model: &mut Model,
        quantized: &QuantizedModel,
        calib: &CalibrationSet,
        k: Option<usize>,
        scope: NormScope,
    ) -> Result<Self> {
        let before = model.weights_checksum();
        let d_matrix = matrix_sensitivity(model, quantized, calib)?;
        let d_layer = layer_sensitivity(model, quantized, calib)?;
        debug_assert_eq!(before, model.weights_checksum());
        Self::from_divergences(d_matrix, d_layer, k, scope, calib)
    }

    pub fn from_divergences(
        d_matrix: BTreeMap<MatrixId, f64>,
        d_layer: BTreeMap<usize, f64>,
        k: Option<usize>,
        scope: NormScope,
        calib: &CalibrationSet,
    ) -> Result<Self> {
        let k = k.unwrap_or_else(|| default_top_k(d_layer.len()));
        let s_matrix = matrix_scores(&d_matrix, scope);
        let (s_layer, top_set) = layer_scores(&d_layer, k)?;
        Ok(Self {
            d_matrix,
            d_layer,
            s_matrix,
            s_layer,
            top_set,
            k,
            scope,
            calibration_seed: calib.seed,
            calibration_count: calib.count(),
        })
    }
}
