//! A deterministic synthetic transformer surrogate.
//!
//! Layers are single-head causal attention followed by either a gated FFN
//! (`h = SiLU(x W_gate) ⊙ (x W_up)`, then `W_down`) or a top-k routed
//! mixture of such FFN experts. Every linear map is `Y = X W` with
//! `W ∈ R^{d_in × d_out}`.

mod build;
mod fixture;
mod forward;

pub use build::build_synthetic;
pub use fixture::{read_fixture, write_fixture};
pub use forward::{
    argmax, attention, decode_input, decode_with, forward_compensated_sequential, forward_full,
    forward_quantized, forward_with, gated_activation, silu, DecodeOutput, DecodeRequest,
    ExpertAssignment, ForwardOutput, FullExec, LinearExec, MemberGroup, QuantizedExec,
    SequentialExec,
};

use crate::compensator::{analyze_spectrum, ResidualSpectrum};
use crate::error::{Error, Result};
use crate::ids::{MatrixId, Slot};
use crate::numerics::DenseMatrix;
use crate::quantizer::{dequantize, quantize, residual, GroupSize, QuantConfig, QuantizedWeight};
use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::ops::Deref;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Moe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub layers: Vec<LayerKind>,
    pub n_experts: usize,
    pub top_k: usize,
    pub seed: u64,
    /// Quantization grid the planted residual is aligned to.
    pub grid: QuantConfig,
    /// Number of salient singular values planted in every residual; `0`
    /// plants none.
    pub planted_salient: usize,
    /// Flat residual spectrum level relative to the largest planted value.
    pub noise_floor: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: 64,
            ffn_hidden: 128,
            vocab: 256,
            layers: vec![LayerKind::Dense, LayerKind::Dense, LayerKind::Moe],
            n_experts: 4,
            top_k: 2,
            seed: 7,
            grid: QuantConfig::new(3, GroupSize::PerRow),
            planted_salient: 3,
            noise_floor: 0.03,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, why: String| Err(Error::Config(format!("{name}: {why}")));
        for (name, v) in [("hidden", self.hidden), ("ffn_hidden", self.ffn_hidden), ("vocab", self.vocab)] {
            if v < 2 {
                return field(name, format!("must be at least 2, got {v}"));
            }
        }
        if self.layers.contains(&LayerKind::Moe) {
            if self.n_experts < 1 {
                return field("n_experts", "MoE layers need at least one expert".into());
            }
            if self.top_k < 1 || self.top_k > self.n_experts {
                return field(
                    "top_k",
                    format!("must lie in [1, n_experts = {}], got {}", self.n_experts, self.top_k),
                );
            }
        }
        self.grid.validate(self.hidden).map_err(|e| Error::Config(format!("grid: {e}")))?;
        self.grid.validate(self.ffn_hidden).map_err(|e| Error::Config(format!("grid: {e}")))?;
        let n_min = self.hidden.min(self.ffn_hidden);
        if self.planted_salient == 1 || (self.planted_salient > 0 && self.planted_salient + 2 > n_min) {
            return field(
                "planted_salient",
                format!("must be 0 or lie in [2, {}], got {}", n_min.saturating_sub(2), self.planted_salient),
            );
        }
        if !(0.0..1.0).contains(&self.noise_floor) {
            return field("noise_floor", format!("must lie in [0, 1), got {}", self.noise_floor));
        }
        Ok(())
    }

    /// `(d_in, d_out)` of a probed matrix slot.
    pub fn slot_shape(&self, slot: Slot) -> (usize, usize) {
        let (d, f) = (self.hidden, self.ffn_hidden);
        match slot {
            Slot::Q | Slot::K | Slot::V | Slot::O => (d, d),
            Slot::Up | Slot::Gate => (d, f),
            Slot::Down => (f, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    pub o: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub up: DenseMatrix,
    pub gate: DenseMatrix,
    pub down: DenseMatrix,
}

impl FfnWeights {
    fn slot(&self, slot: Slot) -> Option<&DenseMatrix> {
        match slot {
            Slot::Up => Some(&self.up),
            Slot::Gate => Some(&self.gate),
            Slot::Down => Some(&self.down),
            _ => None,
        }
    }

    fn slot_mut(&mut self, slot: Slot) -> Option<&mut DenseMatrix> {
        match slot {
            Slot::Up => Some(&mut self.up),
            Slot::Gate => Some(&mut self.gate),
            Slot::Down => Some(&mut self.down),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ffn {
    Dense(FfnWeights),
    Moe {
        /// `d x n_experts`
        router: DenseMatrix,
        experts: Vec<FfnWeights>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn: Attention,
    pub ffn: Ffn,
}

impl LayerWeights {
    pub fn kind(&self) -> LayerKind {
        match self.ffn {
            Ffn::Dense(_) => LayerKind::Dense,
            Ffn::Moe { .. } => LayerKind::Moe,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<LayerWeights>,
    /// `vocab x d`; row `t` is the input embedding of token `t`.
    pub embedding: DenseMatrix,
    /// `d x vocab`
    pub lm_head: DenseMatrix,
    /// Planted salient count per probed matrix.
    pub planted: BTreeMap<MatrixId, usize>,
}

impl Model {
    pub fn hidden(&self) -> usize {
        self.spec.hidden
    }

    /// Every probed (quantizable) matrix, in canonical order.
    pub fn probed_ids(&self) -> Vec<MatrixId> {
        let mut ids = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for slot in [Slot::Q, Slot::K, Slot::V, Slot::O] {
                ids.push(MatrixId::dense(l, slot));
            }
            match &layer.ffn {
                Ffn::Dense(_) => {
                    for slot in [Slot::Up, Slot::Gate, Slot::Down] {
                        ids.push(MatrixId::dense(l, slot));
                    }
                }
                Ffn::Moe { experts, .. } => {
                    for e in 0..experts.len() {
                        for slot in [Slot::Up, Slot::Gate, Slot::Down] {
                            ids.push(MatrixId::expert(l, slot, e));
                        }
                    }
                }
            }
        }
        ids
    }

    pub fn weight(&self, id: MatrixId) -> Option<&DenseMatrix> {
        let layer = self.layers.get(id.layer)?;
        match (id.slot, id.expert, &layer.ffn) {
            (Slot::Q, None, _) => Some(&layer.attn.q),
            (Slot::K, None, _) => Some(&layer.attn.k),
            (Slot::V, None, _) => Some(&layer.attn.v),
            (Slot::O, None, _) => Some(&layer.attn.o),
            (slot, None, Ffn::Dense(w)) => w.slot(slot),
            (slot, Some(e), Ffn::Moe { experts, .. }) => experts.get(e)?.slot(slot),
            _ => None,
        }
    }

    fn weight_mut(&mut self, id: MatrixId) -> Option<&mut DenseMatrix> {
        let layer = self.layers.get_mut(id.layer)?;
        match (id.slot, id.expert, &mut layer.ffn) {
            (Slot::Q, None, _) => Some(&mut layer.attn.q),
            (Slot::K, None, _) => Some(&mut layer.attn.k),
            (Slot::V, None, _) => Some(&mut layer.attn.v),
            (Slot::O, None, _) => Some(&mut layer.attn.o),
            (slot, None, Ffn::Dense(w)) => w.slot_mut(slot),
            (slot, Some(e), Ffn::Moe { experts, .. }) => experts.get_mut(e)?.slot_mut(slot),
            _ => None,
        }
    }

    /// Hash of every weight bit, for before/after comparisons within a process.
    pub fn weights_checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let mut feed = |m: &DenseMatrix| {
            m.shape().hash(&mut h);
            for v in m.as_slice() {
                v.to_bits().hash(&mut h);
            }
        };
        for id in self.probed_ids() {
            feed(self.weight(id).expect("probed id resolves"));
        }
        for layer in &self.layers {
            if let Ffn::Moe { router, .. } = &layer.ffn {
                feed(router);
            }
        }
        feed(&self.embedding);
        feed(&self.lm_head);
        h.finish()
    }

    /// Temporarily replaces the listed matrices; the originals come back
    /// when the guard drops.
    pub fn swap_in(&mut self, replacements: Vec<(MatrixId, DenseMatrix)>) -> Result<SwapGuard<'_>> {
        let mut saved = Vec::with_capacity(replacements.len());
        for (id, mut w) in replacements {
            let Some(slot) = self.weight_mut(id) else {
                // put back what was already swapped before failing
                for (sid, orig) in saved.into_iter().rev() {
                    *self.weight_mut(sid).expect("swapped id resolves") = orig;
                }
                return Err(Error::Config(format!("no matrix {id} in model")));
            };
            if slot.shape() != w.shape() {
                let shape = slot.shape();
                for (sid, orig) in saved.into_iter().rev() {
                    *self.weight_mut(sid).expect("swapped id resolves") = orig;
                }
                return Err(Error::Shape(format!("{id}: replacement {:?} vs {:?}", w.shape(), shape)));
            }
            std::mem::swap(slot, &mut w);
            saved.push((id, w));
        }
        Ok(SwapGuard { model: self, saved })
    }
}

pub struct SwapGuard<'a> {
    model: &'a mut Model,
    saved: Vec<(MatrixId, DenseMatrix)>,
}

impl Deref for SwapGuard<'_> {
    type Target = Model;

    fn deref(&self) -> &Model {
        self.model
    }
}

impl Drop for SwapGuard<'_> {
    fn drop(&mut self) {
        for (id, orig) in self.saved.drain(..).rev() {
            *self.model.weight_mut(id).expect("swapped id resolves") = orig;
        }
    }
}

/// Per-token routing decision.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterOutput {
    /// Activated experts, highest probability first.
    pub experts: Vec<usize>,
    /// Gates renormalized over `experts`.
    pub gates: Vec<f64>,
}

/// Softmax over `logits`, keep the `top_k` most probable (lower index on
/// ties), renormalize over that set.
pub fn route_logits(logits: &[f64], top_k: usize) -> RouterOutput {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).expect("finite").then(a.cmp(&b)));
    order.truncate(top_k);
    let kept: f64 = order.iter().map(|&e| probs[e]).sum();
    RouterOutput {
        gates: order.iter().map(|&e| probs[e] / kept).collect(),
        experts: order,
    }
}

/// Routing for one activation row through a `d x n_experts` router.
pub fn router(x: &[f64], router: &DenseMatrix, top_k: usize) -> Result<RouterOutput> {
    if x.len() != router.rows() {
        return Err(Error::Shape(format!(
            "router input width {} vs hidden {}",
            x.len(),
            router.rows()
        )));
    }
    let logits: Vec<f64> = (0..router.cols())
        .map(|e| x.iter().enumerate().map(|(i, xi)| xi * router.get(i, e)).sum())
        .collect();
    Ok(route_logits(&logits, top_k))
}

/// One quantized probed matrix with its dequantized form and residual.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedEntry {
    pub weight: QuantizedWeight,
    pub dequantized: DenseMatrix,
    pub residual: DenseMatrix,
}

/// Quantized counterparts of every probed matrix of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: QuantConfig,
    pub entries: BTreeMap<MatrixId, QuantizedEntry>,
}

impl QuantizedModel {
    pub fn quantize(model: &Model, cfg: &QuantConfig) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for id in model.probed_ids() {
            let w = model.weight(id).expect("probed id resolves");
            let q = quantize(w, cfg)?;
            let dequantized = dequantize(&q);
            let res = residual(w, &q)?;
            entries.insert(
                id,
                QuantizedEntry {
                    weight: q,
                    dequantized,
                    residual: res,
                },
            );
        }
        Ok(Self { config: *cfg, entries })
    }

    pub fn get(&self, id: MatrixId) -> Result<&QuantizedEntry> {
        self.entries
            .get(&id)
            .ok_or_else(|| Error::Config(format!("no quantized counterpart for {id}")))
    }

    pub fn dequantized(&self, id: MatrixId) -> Result<&DenseMatrix> {
        Ok(&self.get(id)?.dequantized)
    }

    pub fn residual(&self, id: MatrixId) -> Result<&DenseMatrix> {
        Ok(&self.get(id)?.residual)
    }

    /// Residual spectrum of every entry.
    pub fn spectra(&self, tau: f64) -> Result<BTreeMap<MatrixId, ResidualSpectrum>> {
        self.entries
            .iter()
            .map(|(id, e)| Ok((*id, analyze_spectrum(*id, &e.residual, tau)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn router_examples() {
        let all = route_logits(&[0.3, -1.0, 2.0], 3);
        let z: f64 = [0.3f64, -1.0, 2.0].iter().map(|l| l.exp()).sum();
        assert_eq!(all.experts, vec![2, 0, 1]);
        assert!((all.gates[0] - 2.0f64.exp() / z).abs() < 1e-12);

        let two = route_logits(&[2.0, 1.0, 0.0], 2);
        assert_eq!(two.experts, vec![0, 1]);
        assert!((two.gates[0] - 0.7311).abs() < 1e-4);
        assert!((two.gates[1] - 0.2689).abs() < 1e-4);

        let uniform = route_logits(&[0.5; 4], 2);
        assert_eq!(uniform.experts, vec![0, 1]);
        assert_eq!(uniform.gates, vec![0.5, 0.5]);
    }

    #[test]
    fn gates_are_conserved() {
        for k in 1..=5 {
            let r = route_logits(&[0.1, 3.0, -2.0, 0.7, 1.1], k);
            assert_eq!(r.experts.len(), k);
            assert!((r.gates.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(r.gates.iter().all(|&g| g > 0.0));
        }
    }

    #[test]
    fn spec_validation_names_the_field() {
        let mut s = ModelSpec::default();
        s.hidden = 1;
        assert!(matches!(s.validate(), Err(Error::Config(m)) if m.starts_with("hidden")));
        let mut s = ModelSpec::default();
        s.top_k = 9;
        assert!(matches!(s.validate(), Err(Error::Config(m)) if m.starts_with("top_k")));
        let mut s = ModelSpec::default();
        s.planted_salient = 1;
        assert!(matches!(s.validate(), Err(Error::Config(m)) if m.starts_with("planted_salient")));
        assert!(ModelSpec::default().validate().is_ok());
    }

    #[test]
    fn swap_restores_bit_exactly() {
        let mut m = build_synthetic(&ModelSpec::default()).unwrap();
        let before = m.weights_checksum();
        let id = MatrixId::dense(1, Slot::Gate);
        let shape = m.weight(id).unwrap().shape();
        {
            let g = m.swap_in(vec![(id, DenseMatrix::zeros(shape.0, shape.1))]).unwrap();
            assert_eq!(g.weight(id).unwrap().max_abs(), 0.0);
            assert_ne!(g.weights_checksum(), before);
        }
        assert_eq!(m.weights_checksum(), before);
        assert!(m.swap_in(vec![(id, DenseMatrix::zeros(1, 1))]).is_err());
        assert_eq!(m.weights_checksum(), before);
    }
}
