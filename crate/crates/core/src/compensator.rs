//! Residual spectrum analysis and low-rank compensation factors.
//!
//! A quantization residual `ΔW` is compensated by its truncated SVD factors
//! `A = U_r Σ_r`, `B = V_rᵀ`, applied to an activation as `(X A) B` so the
//! `d × k` correction is never formed.
//!
//! The salient part of the spectrum is found at the largest second-order
//! difference of the normalized singular values:
//!
//! ```text
//! σ̂_j = σ_j / σ_1
//! k_j = σ̂_{j-1} - 2 σ̂_j + σ̂_{j+1}          (interior j only, 1-based)
//! r   = argmax_j k_j                        (smallest j on ties)
//! salient = {1..r} if k_r > τ, else ∅
//! φ = mean(σ over salient) / mean(σ over the rest), or 1 when salient = ∅
//! ```

use crate::error::{Error, Result};
use crate::ids::MatrixId;
use crate::numerics::{matmul, svd_labeled, truncated_factors, DenseMatrix, SvdResult};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Default salience threshold τ.
pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSpectrum {
    pub matrix_id: MatrixId,
    pub sigma_raw: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    /// Size of the salient set; `None` when the set is empty.
    pub salient_cut: Option<usize>,
    pub phi: f64,
}

impl ResidualSpectrum {
    pub fn len(&self) -> usize {
        self.sigma_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma_raw.is_empty()
    }

    pub fn salient_len(&self) -> usize {
        self.salient_cut.unwrap_or(0)
    }

    pub fn residual_len(&self) -> usize {
        self.len() - self.salient_len()
    }

    /// Second-order differences `k_j` for 1-based interior `j ∈ [2, n-1]`,
    /// returned as `(j, k_j)`.
    pub fn second_differences(&self) -> Vec<(usize, f64)> {
        second_differences(&self.sigma_hat)
    }
}

fn second_differences(hat: &[f64]) -> Vec<(usize, f64)> {
    (1..hat.len().saturating_sub(1))
        .map(|i| (i + 1, hat[i - 1] - 2.0 * hat[i] + hat[i + 1]))
        .collect()
}

/// SVD of `delta_w` followed by [`spectrum_from_sigma`].
pub fn analyze_spectrum(id: MatrixId, delta_w: &DenseMatrix, tau: f64) -> Result<ResidualSpectrum> {
    let s = svd_labeled(delta_w, &id.to_string())?;
    spectrum_from_sigma(id, &s.sigma, tau)
}

/// Salient-set partition of an already computed, non-increasing spectrum.
pub fn spectrum_from_sigma(id: MatrixId, sigma: &[f64], tau: f64) -> Result<ResidualSpectrum> {
    if sigma.is_empty() {
        return Err(Error::Shape(format!("empty spectrum for {id}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let top = sigma[0];
    let sigma_hat: Vec<f64> = if top > 0.0 {
        sigma.iter().map(|s| s / top).collect()
    } else {
        vec![0.0; sigma.len()]
    };

    let mut best: Option<(usize, f64)> = None;
    for (j, k) in second_differences(&sigma_hat) {
        if best.map_or(true, |(_, bk)| k > bk) {
            best = Some((j, k));
        }
    }
    let salient_cut = best.filter(|&(_, k)| k > tau).map(|(j, _)| j);

    let phi = match salient_cut {
        None => 1.0,
        Some(r) => {
            let salient = sigma[..r].iter().sum::<f64>() / r as f64;
            let rest = sigma[r..].iter().sum::<f64>() / (sigma.len() - r) as f64;
            // an all-zero residual tail would make φ unbounded
            let phi = salient / rest.max(top * 1e-12);
            debug_assert!(phi >= 1.0 - 1e-12, "salience ratio below one for {id}: {phi}");
            phi
        }
    };

    Ok(ResidualSpectrum {
        matrix_id: id,
        sigma_raw: sigma.to_vec(),
        sigma_hat,
        salient_cut,
        phi,
    })
}

/// Window-normalized salience `𝒱_i = φ_i / Σ_window φ_j`.
pub fn salience_scores(window: &[&ResidualSpectrum]) -> Result<BTreeMap<MatrixId, f64>> {
    if window.is_empty() {
        return Err(Error::Config("salience scores of an empty window".into()));
    }
    let total: f64 = window.iter().map(|s| s.phi).sum();
    Ok(window.iter().map(|s| (s.matrix_id, s.phi / total)).collect())
}

/// Rank-`r` compensation factors for one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensationFactors {
    pub matrix_id: MatrixId,
    pub rank: usize,
    /// `d x r`
    pub a: DenseMatrix,
    /// `r x k`
    pub b: DenseMatrix,
}

impl CompensationFactors {
    pub fn from_svd(id: MatrixId, s: &SvdResult, r: usize) -> Result<Self> {
        let (a, b) = truncated_factors(s, r)?;
        Ok(Self {
            matrix_id: id,
            rank: r,
            a,
            b,
        })
    }

    /// Leading `r` components of these factors.
    pub fn truncate(&self, r: usize) -> Result<Self> {
        if r > self.rank {
            return Err(Error::Range(format!(
                "{}: rank {r} requested from factors of rank {}",
                self.matrix_id, self.rank
            )));
        }
        Ok(Self {
            matrix_id: self.matrix_id,
            rank: r,
            a: self.a.leading_cols(r),
            b: self.b.leading_rows(r),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.b.cols()
    }

    /// `A · B`, the correction this factor pair represents.
    pub fn product(&self) -> DenseMatrix {
        matmul(&self.a, &self.b).expect("factor shapes agree")
    }
}

pub fn build_factors(id: MatrixId, delta_w: &DenseMatrix, r: usize) -> Result<CompensationFactors> {
    let n = delta_w.rows().min(delta_w.cols());
    if r > n {
        return Err(Error::Range(format!("{id}: rank {r} exceeds min dimension {n}")));
    }
    let s = svd_labeled(delta_w, &id.to_string())?;
    CompensationFactors::from_svd(id, &s, r)
}

/// `ΔY = (X A) B`.
pub fn apply(x: &DenseMatrix, f: &CompensationFactors) -> Result<DenseMatrix> {
    if x.cols() != f.input_dim() {
        return Err(Error::Shape(format!(
            "{}: activation width {} vs factor input {}",
            f.matrix_id,
            x.cols(),
            f.input_dim()
        )));
    }
    if f.rank == 0 {
        return Ok(DenseMatrix::zeros(x.rows(), f.output_dim()));
    }
    matmul(&matmul(x, &f.a)?, &f.b)
}

/// Full-rank (or rank-capped) factors for a set of residuals, truncated on
/// demand to the ranks of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPool {
    factors: BTreeMap<MatrixId, CompensationFactors>,
}

impl FactorPool {
    /// One SVD per residual, keeping at most `max_rank` components.
    pub fn build<'a>(
        residuals: impl IntoIterator<Item = (MatrixId, &'a DenseMatrix)>,
        max_rank: Option<usize>,
    ) -> Result<Self> {
        let mut factors = BTreeMap::new();
        for (id, dw) in residuals {
            let s = svd_labeled(dw, &id.to_string())?;
            let r = max_rank.map_or(s.rank_capacity(), |m| m.min(s.rank_capacity()));
            factors.insert(id, CompensationFactors::from_svd(id, &s, r)?);
        }
        Ok(Self { factors })
    }

    pub fn get(&self, id: MatrixId) -> Option<&CompensationFactors> {
        self.factors.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = MatrixId> + '_ {
        self.factors.keys().copied()
    }

    /// Factors truncated to `ranks`; rank-0 entries are left out entirely.
    pub fn select(&self, ranks: &BTreeMap<MatrixId, usize>) -> Result<BTreeMap<MatrixId, CompensationFactors>> {
        let mut out = BTreeMap::new();
        for (&id, &r) in ranks.iter().filter(|(_, &r)| r > 0) {
            let f = self
                .factors
                .get(&id)
                .ok_or_else(|| Error::Config(format!("factor pool has no entry for {id}")))?;
            out.insert(id, f.truncate(r)?);
        }
        Ok(out)
    }
}
