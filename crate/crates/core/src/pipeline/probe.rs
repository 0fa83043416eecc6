//! Timing probes for the rank/latency model.

use super::{run_pipelined_batches, PipelineOptions};
use crate::allocator::RankPlan;
use crate::compensator::FactorPool;
use crate::error::{Error, Result};
use crate::ids::{MatrixId, WindowKind};
use crate::toymodel::{Model, QuantizedModel};
use crate::pipeline::Scope;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub warmup: usize,
    pub reps: usize,
    /// Rows of the probe batch.
    pub tokens: usize,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            warmup: 3,
            reps: 10,
            tokens: 64,
            seed: 0,
        }
    }
}

/// Raw samples for [`crate::allocator::fit_timing`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimingSamples {
    /// `(rank, compensator ms)` per probed rank, median over repetitions.
    pub probes: Vec<(usize, f64)>,
    /// Per-window transfer time by kind, one sample per run.
    pub comm: BTreeMap<WindowKind, Vec<f64>>,
    /// Per-window backbone time by kind, one sample per run.
    pub gpu: BTreeMap<WindowKind, Vec<f64>>,
    /// Every repetition's compensator sample, by rank.
    pub per_rank: BTreeMap<usize, Vec<f64>>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs the pipeline with a uniform plan at each probe rank and samples the
/// compensator time on `ATT_O` windows (a single `d × d` operator).
pub fn probe_timing(
    model: &Model,
    quantized: &QuantizedModel,
    pool: &FactorPool,
    ranks: &[usize],
    opts: &ProbeOptions,
) -> Result<TimingSamples> {
    if opts.reps == 0 || opts.tokens == 0 {
        return Err(Error::Config("probe needs reps > 0 and tokens > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let toks: Vec<usize> = (0..opts.tokens).map(|_| rng.gen_range(0..model.spec.vocab)).collect();
    let x = model.embedding.select_rows(&toks);
    let ids = model.probed_ids();
    let popts = PipelineOptions::default();

    let plans: Vec<RankPlan> = ranks
        .iter()
        .map(|&r| {
            let capped: BTreeMap<MatrixId, usize> = ids
                .iter()
                .map(|&id| (id, pool.get(id).map_or(0, |f| f.rank.min(r))))
                .collect();
            RankPlan::from_ranks(&capped, &BTreeMap::new(), BTreeMap::new(), 0)
        })
        .collect();
    let once = |plan: &RankPlan| run_pipelined_batches(model, quantized, pool, plan, std::slice::from_ref(&x), &popts);
    for plan in &plans {
        for _ in 0..opts.warmup {
            once(plan)?;
        }
    }

    let mut out = TimingSamples::default();
    // ranks interleave within each repetition so drift hits all of them alike
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(opts.reps); ranks.len()];
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    for _ in 0..opts.reps {
        for (i, plan) in plans.iter().enumerate() {
            let run = once(plan)?;
            let mut cpu = Vec::new();
            let mut gpu: BTreeMap<WindowKind, Vec<f64>> = BTreeMap::new();
            let mut comm: BTreeMap<WindowKind, Vec<f64>> = BTreeMap::new();
            for rec in &run.records {
                if let Scope::Window(w) = rec.scope {
                    if w.kind == WindowKind::AttO {
                        cpu.push(rec.cpu_ms);
                    }
                    gpu.entry(w.kind).or_default().push(rec.gpu_ms);
                    comm.entry(w.kind).or_default().push(rec.comm_ms);
                }
            }
            samples[i].push(mean(&cpu));
            for (k, v) in gpu {
                out.gpu.entry(k).or_default().push(mean(&v));
            }
            for (k, v) in comm {
                out.comm.entry(k).or_default().push(mean(&v));
            }
        }
    }
    for (&r, s) in ranks.iter().zip(samples) {
        out.probes.push((r, median(s.clone())));
        out.per_rank.insert(r, s);
    }
    Ok(out)
}
