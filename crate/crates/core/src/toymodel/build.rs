//! Seeded construction of planted-structure weights.
//!
//! Each probed matrix is `code * s + P`, where `code` lies on the RTN grid of
//! `spec.grid`, `s` is a power of two and every row-group holds one anchor at
//! `±qmax`. The anchor pins the group scale to exactly `s`, so quantization
//! recovers `code` and the residual is `P` up to f32 storage rounding.
//! `P` is a low-rank-dominant matrix with a chosen singular profile.

use super::{Attention, Ffn, FfnWeights, LayerKind, LayerWeights, Model, ModelSpec};
use crate::error::Result;
use crate::ids::{MatrixId, Slot};
use crate::numerics::{matmul, DenseMatrix};
use crate::quantizer::GroupSize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

/// Largest planted residual entry relative to the grid step.
const RESIDUAL_PEAK: f64 = 0.45;

pub fn build_synthetic(spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut planted = BTreeMap::new();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (l, kind) in spec.layers.iter().enumerate() {
        let mut probed = |slot: Slot, expert: Option<usize>, rng: &mut ChaCha8Rng| {
            let id = MatrixId { layer: l, slot, expert };
            planted.insert(id, spec.planted_salient);
            let (rows, cols) = spec.slot_shape(slot);
            planted_matrix(spec, rows, cols, rng)
        };
        let attn = Attention {
            q: probed(Slot::Q, None, &mut rng),
            k: probed(Slot::K, None, &mut rng),
            v: probed(Slot::V, None, &mut rng),
            o: probed(Slot::O, None, &mut rng),
        };
        let ffn = match kind {
            LayerKind::Dense => Ffn::Dense(FfnWeights {
                up: probed(Slot::Up, None, &mut rng),
                gate: probed(Slot::Gate, None, &mut rng),
                down: probed(Slot::Down, None, &mut rng),
            }),
            LayerKind::Moe => {
                let experts = (0..spec.n_experts)
                    .map(|e| FfnWeights {
                        up: probed(Slot::Up, Some(e), &mut rng),
                        gate: probed(Slot::Gate, Some(e), &mut rng),
                        down: probed(Slot::Down, Some(e), &mut rng),
                    })
                    .collect();
                let router = gaussian(spec.hidden, spec.n_experts, 1.0 / (spec.hidden as f64).sqrt(), &mut rng);
                Ffn::Moe { router, experts }
            }
        };
        layers.push(LayerWeights { attn, ffn });
    }
    let embedding = gaussian(spec.vocab, spec.hidden, 1.0, &mut rng);
    let lm_head = gaussian(spec.hidden, spec.vocab, 1.0 / (spec.hidden as f64).sqrt(), &mut rng);
    Ok(Model {
        spec: spec.clone(),
        layers,
        embedding,
        lm_head,
        planted,
    })
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("finite").into_f32_storage()
}

/// `n` orthonormal columns of length `len` (modified Gram-Schmidt, two passes).
fn orthonormal(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Singular profile of the planted residual, largest first.
///
/// `c - 1` values decay gently from 1, the `c`-th drops to 0.3 of its
/// predecessor and everything after sits on the noise floor, which makes
/// the largest second difference of the normalized spectrum land at `c`.
pub(crate) fn planted_profile(n: usize, c: usize, noise_floor: f64) -> Vec<f64> {
    let mut p = vec![noise_floor; n];
    if c >= 2 {
        for (j, v) in p.iter_mut().take(c - 1).enumerate() {
            *v = 1.0 - 0.1 * j as f64;
        }
        p[c - 1] = 0.3 * p[c - 2];
    }
    p
}

fn planted_matrix(spec: &ModelSpec, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let grid = spec.grid;
    let qmax = grid.qmax();
    let width = match grid.group_size {
        GroupSize::PerRow => cols,
        GroupSize::Cols(g) => g,
    };
    // non-anchor codes: rounded Gaussian, strictly inside the grid
    let code_std = (qmax as f64 / 2.5).max(0.5);
    let inner = (qmax - 1) as f64;
    let mut codes = vec![0.0; rows * cols];
    for c in codes.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *c = (g * code_std).round().clamp(-inner, inner);
    }
    let mut anchors = vec![false; rows * cols];
    for r in 0..rows {
        for g0 in (0..cols).step_by(width) {
            let at = r * cols + g0 + rng.gen_range(0..width);
            anchors[at] = true;
            codes[at] = if rng.gen::<bool>() { qmax as f64 } else { -(qmax as f64) };
        }
    }
    let empirical_std = (codes.iter().map(|c| c * c).sum::<f64>() / codes.len() as f64).sqrt();
    let target = 1.0 / ((rows as f64).sqrt() * empirical_std.max(1e-3));
    let s = 2f64.powi(target.log2().round() as i32);

    let n = rows.min(cols);
    let profile = planted_profile(n, spec.planted_salient, spec.noise_floor);
    let mut residual = vec![0.0; rows * cols];
    if profile.iter().any(|&v| v > 0.0) {
        let u = orthonormal(rows, n, rng);
        let v = orthonormal(cols, n, rng);
        let us = DenseMatrix::from_vec(
            rows,
            n,
            (0..rows * n).map(|i| u[i % n][i / n] * profile[i % n]).collect(),
        )
        .expect("finite");
        let vt = DenseMatrix::from_vec(n, cols, (0..n * cols).map(|i| v[i / cols][i % cols]).collect())
            .expect("finite");
        residual = matmul(&us, &vt).expect("conforming").into_vec();
        for (x, &a) in residual.iter_mut().zip(&anchors) {
            if a {
                *x = 0.0;
            }
        }
        let peak = residual.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if peak > 0.0 {
            let alpha = RESIDUAL_PEAK * s / peak;
            residual.iter_mut().for_each(|x| *x *= alpha);
        }
    }
    let data = codes.iter().zip(&residual).map(|(c, p)| c * s + p).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("finite").into_f32_storage()
}
