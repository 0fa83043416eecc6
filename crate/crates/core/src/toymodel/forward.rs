//! Forward passes, parameterized over how each compensation window's linear
//! maps are executed.

use super::{router, Ffn, FfnWeights, Model, QuantizedModel, RouterOutput};
use crate::compensator::{apply, CompensationFactors};
use crate::error::{Error, Result};
use crate::ids::{MatrixId, WindowId, WindowKind};
use crate::numerics::{matmul, DenseMatrix};
use std::collections::BTreeMap;

/// Input rows for one member group of a window: the dense layer itself
/// (`expert = None`) or one activated expert.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberGroup {
    pub expert: Option<usize>,
    pub input: DenseMatrix,
}

/// Executes the linear maps of one window.
///
/// Returns, per group and in `window.kind.slots()` order, `input * W_slot`.
pub trait LinearExec {
    fn window(&mut self, model: &Model, window: WindowId, groups: &[MemberGroup]) -> Result<Vec<Vec<DenseMatrix>>>;

    /// Observes the input and routing decision of MoE layer `layer` before
    /// its FFN windows run.
    fn routed(&mut self, _layer: usize, _input: &DenseMatrix, _assignment: &ExpertAssignment) {}
}

fn weight_of(model: &Model, id: MatrixId) -> Result<&DenseMatrix> {
    model
        .weight(id)
        .ok_or_else(|| Error::Config(format!("model has no matrix {id}")))
}

fn ids_of(window: WindowId, group: &MemberGroup) -> impl Iterator<Item = MatrixId> + '_ {
    window.kind.slots().iter().map(move |&slot| MatrixId {
        layer: window.layer,
        slot,
        expert: group.expert,
    })
}

/// Full-precision weights.
pub struct FullExec;

impl LinearExec for FullExec {
    fn window(&mut self, model: &Model, window: WindowId, groups: &[MemberGroup]) -> Result<Vec<Vec<DenseMatrix>>> {
        groups
            .iter()
            .map(|g| ids_of(window, g).map(|id| matmul(&g.input, weight_of(model, id)?)).collect())
            .collect()
    }
}

/// Dequantized weights, no compensation.
pub struct QuantizedExec<'a> {
    pub quantized: &'a QuantizedModel,
}

impl LinearExec for QuantizedExec<'_> {
    fn window(&mut self, _model: &Model, window: WindowId, groups: &[MemberGroup]) -> Result<Vec<Vec<DenseMatrix>>> {
        groups
            .iter()
            .map(|g| {
                ids_of(window, g)
                    .map(|id| matmul(&g.input, self.quantized.dequantized(id)?))
                    .collect()
            })
            .collect()
    }
}

/// `X Ŵ` merged with `(X A) B` for every matrix that has factors.
pub struct SequentialExec<'a> {
    pub quantized: &'a QuantizedModel,
    pub factors: &'a BTreeMap<MatrixId, CompensationFactors>,
}

impl LinearExec for SequentialExec<'_> {
    fn window(&mut self, _model: &Model, window: WindowId, groups: &[MemberGroup]) -> Result<Vec<Vec<DenseMatrix>>> {
        groups
            .iter()
            .map(|g| {
                ids_of(window, g)
                    .map(|id| {
                        let mut y = matmul(&g.input, self.quantized.dequantized(id)?)?;
                        if let Some(f) = self.factors.get(&id).filter(|f| f.rank > 0) {
                            y.merge_delta(&apply(&g.input, f)?)?;
                        }
                        Ok(y)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Hidden state after the last layer and the vocabulary logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub hidden: DenseMatrix,
    pub logits: DenseMatrix,
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// `SiLU(gate) ⊙ up`
pub fn gated_activation(up: &DenseMatrix, gate: &DenseMatrix) -> Result<DenseMatrix> {
    gate.map(silu).hadamard(up)
}

/// Single-head causal attention, `softmax(Q Kᵀ / √d) V`.
pub fn attention(q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix) -> Result<DenseMatrix> {
    if q.shape() != k.shape() || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let t = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = DenseMatrix::zeros(t, v.cols());
    for i in 0..t {
        let scores: Vec<f64> = (0..=i)
            .map(|j| scale * q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = w.iter().sum();
        let row = out.row_mut(i);
        for (j, wj) in w.iter().enumerate() {
            for (o, vv) in row.iter_mut().zip(v.row(j)) {
                *o += wj / z * vv;
            }
        }
    }
    Ok(out)
}

/// Token-to-expert assignment of one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertAssignment {
    pub routes: Vec<RouterOutput>,
    /// Activated experts in ascending order with the token rows they serve
    /// and the gate of each row.
    pub experts: Vec<(usize, Vec<usize>, Vec<f64>)>,
}

impl ExpertAssignment {
    pub fn route(x: &DenseMatrix, router_w: &DenseMatrix, top_k: usize) -> Result<Self> {
        let routes = (0..x.rows())
            .map(|t| router(x.row(t), router_w, top_k))
            .collect::<Result<Vec<_>>>()?;
        let mut per: BTreeMap<usize, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for (t, r) in routes.iter().enumerate() {
            for (&e, &g) in r.experts.iter().zip(&r.gates) {
                let entry = per.entry(e).or_default();
                entry.0.push(t);
                entry.1.push(g);
            }
        }
        Ok(Self {
            routes,
            experts: per.into_iter().map(|(e, (rows, gates))| (e, rows, gates)).collect(),
        })
    }

    pub fn activated(&self) -> Vec<usize> {
        self.experts.iter().map(|(e, _, _)| *e).collect()
    }

    /// Per-expert input groups drawn from `x`.
    pub fn groups(&self, x: &DenseMatrix) -> Vec<MemberGroup> {
        self.experts
            .iter()
            .map(|(e, rows, _)| MemberGroup {
                expert: Some(*e),
                input: x.select_rows(rows),
            })
            .collect()
    }

    /// `Σ_e g_e E_e(x)` scattered back to token rows, accumulated in
    /// ascending expert order.
    pub fn combine(&self, outputs: &[DenseMatrix], tokens: usize, width: usize) -> DenseMatrix {
        let mut y = DenseMatrix::zeros(tokens, width);
        for ((_, rows, gates), out) in self.experts.iter().zip(outputs) {
            for (local, (&t, &g)) in rows.iter().zip(gates).enumerate() {
                for (acc, v) in y.row_mut(t).iter_mut().zip(out.row(local)) {
                    *acc += g * v;
                }
            }
        }
        y
    }
}

fn single(mut out: Vec<Vec<DenseMatrix>>, window: WindowId, expected: usize) -> Result<Vec<DenseMatrix>> {
    if out.len() != 1 || out[0].len() != expected {
        return Err(Error::Shape(format!("window {window} returned an unexpected member layout")));
    }
    Ok(out.remove(0))
}

/// Runs the model on `x` (tokens × hidden), routing every window through `exec`.
pub fn forward_with(model: &Model, exec: &mut dyn LinearExec, x: &DenseMatrix) -> Result<ForwardOutput> {
    if x.cols() != model.hidden() || x.rows() == 0 {
        return Err(Error::Shape(format!(
            "input {:?} does not match hidden dimension {}",
            x.shape(),
            model.hidden()
        )));
    }
    let dense = |expert: Option<usize>, input: DenseMatrix| MemberGroup { expert, input };
    let mut h = x.clone();
    for (l, layer) in model.layers.iter().enumerate() {
        let w = |kind| WindowId { layer: l, kind };

        let qkv = single(exec.window(model, w(WindowKind::AttQkv), &[dense(None, h.clone())])?, w(WindowKind::AttQkv), 3)?;
        let att = attention(&qkv[0], &qkv[1], &qkv[2])?;
        let o = single(exec.window(model, w(WindowKind::AttO), &[dense(None, att)])?, w(WindowKind::AttO), 1)?;
        h = h.add(&o[0])?;

        match &layer.ffn {
            Ffn::Dense(_) => {
                let ug = single(exec.window(model, w(WindowKind::FfnUpGate), &[dense(None, h.clone())])?, w(WindowKind::FfnUpGate), 2)?;
                let act = gated_activation(&ug[0], &ug[1])?;
                let down = single(exec.window(model, w(WindowKind::FfnDown), &[dense(None, act)])?, w(WindowKind::FfnDown), 1)?;
                h = h.add(&down[0])?;
            }
            Ffn::Moe { router, .. } => {
                let assign = ExpertAssignment::route(&h, router, model.spec.top_k)?;
                exec.routed(l, &h, &assign);
                let groups = assign.groups(&h);
                let ug = exec.window(model, w(WindowKind::FfnUpGate), &groups)?;
                let acts = groups
                    .iter()
                    .zip(&ug)
                    .map(|(g, out)| {
                        Ok(MemberGroup {
                            expert: g.expert,
                            input: gated_activation(&out[0], &out[1])?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let down = exec.window(model, w(WindowKind::FfnDown), &acts)?;
                let downs: Vec<DenseMatrix> = down.into_iter().map(|mut v| v.remove(0)).collect();
                h = h.add(&assign.combine(&downs, h.rows(), h.cols()))?;
            }
        }
    }
    let logits = matmul(&h, &model.lm_head)?;
    Ok(ForwardOutput { hidden: h, logits })
}

pub fn forward_full(model: &Model, x: &DenseMatrix) -> Result<ForwardOutput> {
    forward_with(model, &mut FullExec, x)
}

pub fn forward_quantized(model: &Model, quantized: &QuantizedModel, x: &DenseMatrix) -> Result<ForwardOutput> {
    forward_with(model, &mut QuantizedExec { quantized }, x)
}

/// Every probed matrix computes `X Ŵ + (X A) B`; matrices without factors
/// (or with rank 0) get no correction.
pub fn forward_compensated_sequential(
    model: &Model,
    quantized: &QuantizedModel,
    factors: &BTreeMap<MatrixId, CompensationFactors>,
    x: &DenseMatrix,
) -> Result<ForwardOutput> {
    forward_with(model, &mut SequentialExec { quantized, factors }, x)
}

/// Synthetic greedy decode: each step feeds the embedding rows of the last
/// `context` tokens and appends the argmax of the final row's logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeRequest {
    pub prompt: Vec<usize>,
    pub steps: usize,
    pub context: usize,
}

impl DecodeRequest {
    pub fn new(prompt: Vec<usize>, steps: usize) -> Self {
        Self {
            prompt,
            steps,
            context: 8,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.prompt.is_empty() || self.context == 0 {
            return Err(Error::Config("decode needs a non-empty prompt and context".into()));
        }
        if let Some(t) = self.prompt.iter().find(|&&t| t >= model.spec.vocab) {
            return Err(Error::Config(format!("prompt token {t} outside vocab {}", model.spec.vocab)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Generated tokens, one per step.
    pub tokens: Vec<usize>,
    /// Final-row logits of every step.
    pub logits: Vec<Vec<f64>>,
}

impl DecodeOutput {
    /// Largest absolute logit difference over all steps.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.logits.len() != other.logits.len() {
            return Err(Error::Shape(format!(
                "decode outputs of {} and {} steps",
                self.logits.len(),
                other.logits.len()
            )));
        }
        let mut m = 0.0_f64;
        for (a, b) in self.logits.iter().zip(&other.logits) {
            for (x, y) in a.iter().zip(b) {
                m = m.max((x - y).abs());
            }
        }
        Ok(m)
    }
}

/// Embedding rows of the trailing `context` tokens.
pub fn decode_input(model: &Model, tokens: &[usize], context: usize) -> DenseMatrix {
    let start = tokens.len().saturating_sub(context);
    model.embedding.select_rows(&tokens[start..])
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs `req` with every forward going through `exec`.
pub fn decode_with(model: &Model, exec: &mut dyn LinearExec, req: &DecodeRequest) -> Result<DecodeOutput> {
    req.validate(model)?;
    let mut tokens = req.prompt.clone();
    let mut out = DecodeOutput {
        tokens: Vec::with_capacity(req.steps),
        logits: Vec::with_capacity(req.steps),
    };
    for _ in 0..req.steps {
        let x = decode_input(model, &tokens, req.context);
        let f = forward_with(model, exec, &x)?;
        let last = f.logits.row(f.logits.rows() - 1).to_vec();
        let next = argmax(&last);
        tokens.push(next);
        out.tokens.push(next);
        out.logits.push(last);
    }
    Ok(out)
}

impl FfnWeights {
    /// Gated FFN on its own, used by tests comparing dense and MoE paths.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let act = gated_activation(&matmul(x, &self.up)?, &matmul(x, &self.gate)?)?;
        matmul(&act, &self.down)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_synthetic, LayerKind, ModelSpec};
    use super::*;

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(1.0) - 0.731_058_578_6).abs() < 1e-9);
    }

    #[test]
    fn first_token_attends_only_to_itself() {
        let q = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = DenseMatrix::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        let out = attention(&q, &q, &v).unwrap();
        assert_eq!(out.row(0), &[2.0, 3.0]);
        // second row mixes both with weights 1 : e^{1/√2}
        let w = (1.0 / 2f64.sqrt()).exp();
        assert!((out.get(1, 0) - (2.0 + 4.0 * w) / (1.0 + w)).abs() < 1e-12);
    }

    #[test]
    fn single_expert_moe_equals_dense() {
        let spec = ModelSpec {
            layers: vec![LayerKind::Moe],
            n_experts: 1,
            top_k: 1,
            ..ModelSpec::default()
        };
        let moe = build_synthetic(&spec).unwrap();
        let mut dense = moe.clone();
        if let Ffn::Moe { experts, .. } = &moe.layers[0].ffn {
            dense.layers[0].ffn = Ffn::Dense(experts[0].clone());
        }
        let x = moe.embedding.select_rows(&[3, 1, 4]);
        let a = forward_full(&moe, &x).unwrap();
        let b = forward_full(&dense, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ffn_rows_are_independent() {
        let m = build_synthetic(&ModelSpec::default()).unwrap();
        let Ffn::Dense(ffn) = &m.layers[0].ffn else { unreachable!() };
        let x = m.embedding.select_rows(&[0, 5, 9]);
        let batched = ffn.apply(&x).unwrap();
        for t in 0..3 {
            let one = ffn.apply(&x.select_rows(&[t])).unwrap();
            assert_eq!(one.row(0), batched.row(t));
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let m = build_synthetic(&ModelSpec::default()).unwrap();
        assert!(matches!(forward_full(&m, &DenseMatrix::zeros(2, 3)), Err(Error::Shape(_))));
    }
}
