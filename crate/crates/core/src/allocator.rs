//! Compensation rank allocation.
//!
//! ```text
//! P_i    = G_i · Norm_W(V_i · S_i) · S_ℓ
//! r_std  = floor((t_gpu - t_comm) / k_slope)        (0 when t_comm ≥ t_gpu)
//! r̃_i   = P_i · r_std
//! ```
//!
//! `r̃` is split into a salient part (at most `|S_i|`) and a residual part,
//! aligned to `{0} ∪ {2^k : k ≥ k0}` and finally demoted per window until
//! `Σ r_i ≤ r_std`.

use crate::compensator::{salience_scores, ResidualSpectrum};
use crate::error::{Error, Result};
use crate::ids::{map_entries, MatrixId, Slot, WindowId, WindowKind};
use crate::toymodel::{forward_with, ExpertAssignment, FullExec, LinearExec, MemberGroup, Model};
use crate::numerics::DenseMatrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const DEFAULT_K0: u32 = 3;
pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    /// Milliseconds of compensation per unit rank.
    pub k_slope: f64,
    pub t_comm: BTreeMap<WindowKind, f64>,
    pub t_gpu: BTreeMap<WindowKind, f64>,
    /// Relative least-squares residual of the slope fit.
    pub fit_residual: f64,
}

impl TimingModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_slope > 0.0 && self.k_slope.is_finite()) {
            return Err(Error::Config(format!("k_slope must be positive, got {}", self.k_slope)));
        }
        if self.t_comm.values().chain(self.t_gpu.values()).any(|&t| !(t >= 0.0)) {
            return Err(Error::Config("timing durations must be non-negative".into()));
        }
        Ok(())
    }
}

/// Largest rank whose compensation plus transfer fits under the backbone time.
pub fn calibrate_r_std(t: &TimingModel, kind: WindowKind) -> usize {
    let gpu = t.t_gpu.get(&kind).copied().unwrap_or(0.0);
    let comm = t.t_comm.get(&kind).copied().unwrap_or(0.0);
    if comm >= gpu {
        return 0;
    }
    // the epsilon keeps exact quotients such as 9 / 0.05 from flooring to 179
    ((gpu - comm) / t.k_slope + 1e-9).floor().max(0.0) as usize
}

pub fn r_std_table(t: &TimingModel) -> BTreeMap<WindowKind, usize> {
    WindowKind::ALL.iter().map(|&k| (k, calibrate_r_std(t, k))).collect()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite sample"));
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Least-squares slope through the origin, `k = Σ r t / Σ r²`, with
/// per-kind medians for the transfer and backbone samples.
///
/// The recorded residual is `‖t - k r‖ / ‖t‖`.
pub fn fit_timing(
    probes: &[(usize, f64)],
    comm: &BTreeMap<WindowKind, Vec<f64>>,
    gpu: &BTreeMap<WindowKind, Vec<f64>>,
) -> Result<TimingModel> {
    let distinct: BTreeSet<usize> = probes.iter().map(|p| p.0).filter(|&r| r > 0).collect();
    if distinct.len() < 3 {
        return Err(Error::Config(format!(
            "timing fit needs at least 3 distinct nonzero probe ranks, got {}",
            distinct.len()
        )));
    }
    let srt: f64 = probes.iter().map(|&(r, t)| r as f64 * t).sum();
    let srr: f64 = probes.iter().map(|&(r, _)| (r as f64).powi(2)).sum();
    let k_slope = srt / srr;
    if !(k_slope > 0.0) {
        return Err(Error::Numeric {
            matrix: "timing".into(),
            reason: format!("fitted slope {k_slope} is not positive"),
        });
    }
    let sse: f64 = probes.iter().map(|&(r, t)| (t - k_slope * r as f64).powi(2)).sum();
    let stt: f64 = probes.iter().map(|&(_, t)| t * t).sum();
    let fit_residual = if stt > 0.0 { (sse / stt).sqrt() } else { 0.0 };
    let med = |m: &BTreeMap<WindowKind, Vec<f64>>| m.iter().map(|(k, v)| (*k, median(v))).collect();
    Ok(TimingModel {
        k_slope,
        t_comm: med(comm),
        t_gpu: med(gpu),
        fit_residual,
    })
}

/// `G_e = k · g_e` for gates over the `k` activated experts.
pub fn expert_activation_scores(gates: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = gates.iter().sum();
    if gates.is_empty() || (sum - 1.0).abs() > 1e-9 || gates.iter().any(|&g| g < 0.0) {
        return Err(Error::Range(format!("gates must be a distribution, sum = {sum}")));
    }
    let k = gates.len() as f64;
    Ok(gates.iter().map(|g| k * g).collect())
}

/// Mean routing mass per expert for every MoE layer, over the token rows of `inputs`.
pub fn expert_gate_mass(model: &Model, inputs: &[DenseMatrix]) -> Result<BTreeMap<usize, Vec<f64>>> {
    struct Recorder {
        mass: BTreeMap<usize, (Vec<f64>, usize)>,
        experts: usize,
    }
    impl LinearExec for Recorder {
        fn window(&mut self, model: &Model, w: WindowId, g: &[MemberGroup]) -> Result<Vec<Vec<DenseMatrix>>> {
            FullExec.window(model, w, g)
        }
        fn routed(&mut self, layer: usize, _x: &DenseMatrix, a: &ExpertAssignment) {
            let entry = self.mass.entry(layer).or_insert_with(|| (vec![0.0; self.experts], 0));
            for r in &a.routes {
                for (&e, &g) in r.experts.iter().zip(&r.gates) {
                    entry.0[e] += g;
                }
            }
            entry.1 += a.routes.len();
        }
    }
    let mut rec = Recorder {
        mass: BTreeMap::new(),
        experts: model.spec.n_experts,
    };
    for x in inputs {
        forward_with(model, &mut rec, x)?;
    }
    Ok(rec
        .mass
        .into_iter()
        .map(|(l, (m, n))| (l, m.into_iter().map(|v| v / n.max(1) as f64).collect()))
        .collect())
}

/// Expert scores of `model` routed over `inputs`.
pub fn expert_scores(model: &Model, inputs: &[DenseMatrix]) -> Result<BTreeMap<MatrixId, f64>> {
    expert_scores_from_mass(&model.probed_ids(), &expert_gate_mass(model, inputs)?)
}

/// `G` for every expert matrix of the MoE layers, from mean gate mass.
/// Experts that never receive mass score 0; the rest obey `Σ G = k_active`.
pub fn expert_scores_from_mass(ids: &[MatrixId], mass: &BTreeMap<usize, Vec<f64>>) -> Result<BTreeMap<MatrixId, f64>> {
    let mut out = BTreeMap::new();
    for (&layer, m) in mass {
        let active: Vec<usize> = (0..m.len()).filter(|&e| m[e] > 0.0).collect();
        if active.is_empty() {
            continue;
        }
        let total: f64 = active.iter().map(|&e| m[e]).sum();
        let gates: Vec<f64> = active.iter().map(|&e| m[e] / total).collect();
        let g = expert_activation_scores(&gates)?;
        for id in ids.iter().filter(|id| id.layer == layer && id.expert.is_some()) {
            let e = id.expert.expect("filtered");
            let score = active.iter().position(|&a| a == e).map_or(0.0, |i| g[i]);
            out.insert(*id, score);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorityEntry {
    /// Salience score `V_i`.
    pub v: f64,
    /// Matrix sensitivity score `S_i`.
    pub s: f64,
    /// Layer sensitivity score `S_ℓ`.
    pub s_layer: f64,
    /// Expert activation score `G`, 1 for dense matrices.
    pub g: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityTable {
    #[serde(with = "map_entries")]
    pub entries: BTreeMap<MatrixId, PriorityEntry>,
}

impl PriorityTable {
    pub fn p(&self) -> BTreeMap<MatrixId, f64> {
        self.entries.iter().map(|(id, e)| (*id, e.p)).collect()
    }
}

/// Per-matrix scalar inputs to the priority score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorityInput {
    pub v: f64,
    pub s: f64,
    pub s_layer: f64,
    pub g: f64,
}

pub fn priority(inputs: &BTreeMap<MatrixId, PriorityInput>) -> PriorityTable {
    let mut windows: BTreeMap<WindowId, Vec<MatrixId>> = BTreeMap::new();
    for id in inputs.keys() {
        windows.entry(id.window()).or_default().push(*id);
    }
    let mut entries = BTreeMap::new();
    for (w, members) in windows {
        let total: f64 = members.iter().map(|id| inputs[id].v * inputs[id].s).sum();
        let uniform = !(total > 0.0);
        if uniform {
            log::warn!("window {w}: all salience-sensitivity products are zero, using uniform priority");
        }
        let m = members.len() as f64;
        for id in members {
            let i = inputs[&id];
            let norm = if uniform { 1.0 / m } else { i.v * i.s / total };
            entries.insert(
                id,
                PriorityEntry {
                    v: i.v,
                    s: i.s,
                    s_layer: i.s_layer,
                    g: i.g,
                    p: i.g * norm * i.s_layer,
                },
            );
        }
    }
    PriorityTable { entries }
}

pub fn continuous_ranks(p: &PriorityTable, r_std: &BTreeMap<WindowKind, usize>) -> BTreeMap<MatrixId, f64> {
    p.entries
        .iter()
        .map(|(id, e)| (*id, e.p * r_std.get(&id.window().kind).copied().unwrap_or(0) as f64))
        .collect()
}

/// Split of one matrix's continuous rank across its spectrum partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSplit {
    pub salient: f64,
    pub residual: f64,
}

impl StageSplit {
    pub fn total(&self) -> f64 {
        self.salient + self.residual
    }
}

/// Stage 1 gives each matrix `min(r̃_i, |S_i|)`; stage 2 gives the leftover
/// to the residual set, capped at `|R_i|`. Anything beyond a matrix's full
/// rank is handed to the other members of its window in proportion to
/// their remaining residual capacity.
pub fn two_stage_allocate(
    spectra: &BTreeMap<MatrixId, ResidualSpectrum>,
    r_tilde: &BTreeMap<MatrixId, f64>,
) -> Result<BTreeMap<MatrixId, StageSplit>> {
    let mut out = BTreeMap::new();
    let mut overflow: BTreeMap<WindowId, f64> = BTreeMap::new();
    for (id, &r) in r_tilde {
        let s = spectra
            .get(id)
            .ok_or_else(|| Error::Config(format!("no residual spectrum for {id}")))?;
        let salient = r.min(s.salient_len() as f64);
        let residual = (r - salient).min(s.residual_len() as f64);
        let spill = r - salient - residual;
        if spill > 0.0 {
            *overflow.entry(id.window()).or_default() += spill;
        }
        out.insert(*id, StageSplit { salient, residual });
    }
    for (w, spill) in overflow {
        let room: Vec<(MatrixId, f64)> = out
            .iter()
            .filter(|(id, _)| id.window() == w)
            .map(|(id, sp)| (*id, spectra[id].residual_len() as f64 - sp.residual))
            .filter(|(_, room)| *room > 0.0)
            .collect();
        let total_room: f64 = room.iter().map(|r| r.1).sum();
        if total_room <= 0.0 {
            continue;
        }
        let give = spill.min(total_room);
        for (id, r) in room {
            out.get_mut(&id).expect("present").residual += give * r / total_room;
        }
    }
    Ok(out)
}

/// Nearest member of `{0} ∪ {2^k : k ≥ k0}`, ties rounding up.
pub fn align(r: f64, k0: u32) -> usize {
    let base = 1usize << k0;
    if !(r > 0.0) {
        return 0;
    }
    let (mut lo, mut hi) = (0usize, base);
    while (hi as f64) <= r {
        lo = hi;
        hi *= 2;
    }
    if r - (lo as f64) < hi as f64 - r {
        lo
    } else {
        hi
    }
}

/// Largest admissible rank not above `cap`.
pub fn admissible_floor(cap: usize, k0: u32) -> usize {
    let base = 1usize << k0;
    if cap < base {
        return 0;
    }
    1usize << (usize::BITS - 1 - cap.leading_zeros())
}

pub fn is_admissible(r: usize, k0: u32) -> bool {
    r == 0 || (r.is_power_of_two() && r >= 1 << k0)
}

fn demote(r: usize, k0: u32) -> usize {
    if r > 1 << k0 {
        admissible_floor(r - 1, k0)
    } else {
        0
    }
}

/// Demotes the lowest-priority nonzero rank of each over-budget window one
/// admissible step at a time (larger matrix id first on equal priority).
pub fn enforce_budget(
    plan: &BTreeMap<MatrixId, usize>,
    priorities: &BTreeMap<MatrixId, f64>,
    r_std: &BTreeMap<WindowKind, usize>,
    k0: u32,
) -> BTreeMap<MatrixId, usize> {
    let mut out = plan.clone();
    let windows: BTreeSet<WindowId> = plan.keys().map(|id| id.window()).collect();
    for w in windows {
        let budget = r_std.get(&w.kind).copied().unwrap_or(0);
        loop {
            let members: Vec<MatrixId> = out.keys().copied().filter(|id| id.window() == w).collect();
            let sum: usize = members.iter().map(|id| out[id]).sum();
            if sum <= budget {
                break;
            }
            let victim = members
                .iter()
                .copied()
                .filter(|id| out[id] > 0)
                .min_by(|a, b| {
                    let pa = priorities.get(a).copied().unwrap_or(0.0);
                    let pb = priorities.get(b).copied().unwrap_or(0.0);
                    pa.partial_cmp(&pb).expect("finite priority").then(b.cmp(a))
                })
                .expect("a window over budget has a nonzero member");
            let r = out[&victim];
            out.insert(victim, demote(r, k0));
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: usize,
    pub window: WindowKind,
    pub slot: Slot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert: Option<usize>,
    pub rank: usize,
    pub priority: f64,
}

impl PlanEntry {
    pub fn id(&self) -> MatrixId {
        MatrixId {
            layer: self.layer,
            slot: self.slot,
            expert: self.expert,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub version: u32,
    pub k0: u32,
    /// Human-readable form of the admissible rank set.
    pub admissible: String,
    pub r_std: BTreeMap<WindowKind, usize>,
    pub entries: Vec<PlanEntry>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl RankPlan {
    pub fn from_ranks(
        ranks: &BTreeMap<MatrixId, usize>,
        priorities: &BTreeMap<MatrixId, f64>,
        r_std: BTreeMap<WindowKind, usize>,
        k0: u32,
    ) -> Self {
        let entries = ranks
            .iter()
            .map(|(id, &rank)| PlanEntry {
                layer: id.layer,
                window: id.window().kind,
                slot: id.slot,
                expert: id.expert,
                rank,
                priority: priorities.get(id).copied().unwrap_or(0.0),
            })
            .collect();
        Self {
            version: PLAN_VERSION,
            k0,
            admissible: format!("{{0}} U {{2^k : k >= {k0}}}"),
            r_std,
            entries,
            provenance: Provenance::default(),
        }
    }

    /// Rank 0 for every listed matrix.
    pub fn zero(ids: &[MatrixId], k0: u32) -> Self {
        let ranks = ids.iter().map(|id| (*id, 0)).collect();
        Self::from_ranks(&ranks, &BTreeMap::new(), WindowKind::ALL.iter().map(|&k| (k, 0)).collect(), k0)
    }

    /// The same rank for every listed matrix, budgets left unbounded.
    pub fn uniform(ids: &[MatrixId], rank: usize, k0: u32) -> Self {
        let ranks = ids.iter().map(|id| (*id, rank)).collect();
        Self::from_ranks(&ranks, &BTreeMap::new(), BTreeMap::new(), k0)
    }

    pub fn ranks(&self) -> BTreeMap<MatrixId, usize> {
        self.entries.iter().map(|e| (e.id(), e.rank)).collect()
    }

    pub fn rank(&self, id: MatrixId) -> usize {
        self.entries.iter().find(|e| e.id() == id).map_or(0, |e| e.rank)
    }

    pub fn total_rank(&self) -> usize {
        self.entries.iter().map(|e| e.rank).sum()
    }

    /// Admissibility of every rank and, where a window budget is recorded,
    /// `Σ ranks ≤ r_std`.
    pub fn validate(&self) -> Result<()> {
        if self.version != PLAN_VERSION {
            return Err(Error::Format(format!("unsupported plan version {}", self.version)));
        }
        let mut sums: BTreeMap<WindowId, usize> = BTreeMap::new();
        for e in &self.entries {
            if e.window != e.slot.window_kind() {
                return Err(Error::Format(format!("{}: slot not in window {}", e.id(), e.window)));
            }
            if !is_admissible(e.rank, self.k0) {
                return Err(Error::Range(format!("{}: rank {} is not admissible", e.id(), e.rank)));
            }
            *sums.entry(e.id().window()).or_default() += e.rank;
        }
        for (w, sum) in sums {
            if let Some(&b) = self.r_std.get(&w.kind) {
                if sum > b {
                    return Err(Error::Range(format!("window {w}: total rank {sum} exceeds r_std {b}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Everything the allocation chain consumes.
#[derive(Debug, Clone)]
pub struct AllocationInputs<'a> {
    pub spectra: &'a BTreeMap<MatrixId, ResidualSpectrum>,
    pub s_matrix: &'a BTreeMap<MatrixId, f64>,
    pub s_layer: &'a BTreeMap<usize, f64>,
    /// Expert activation scores; matrices not listed use 1.
    pub g: &'a BTreeMap<MatrixId, f64>,
    pub r_std: BTreeMap<WindowKind, usize>,
    pub k0: u32,
}

/// Intermediate values of one allocation run, kept for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub priorities: PriorityTable,
    pub continuous: BTreeMap<MatrixId, f64>,
    pub split: BTreeMap<MatrixId, StageSplit>,
    pub aligned: BTreeMap<MatrixId, usize>,
    pub plan: RankPlan,
}

/// priority → continuous → two-stage → align → enforce_budget.
pub fn allocate(inp: &AllocationInputs<'_>) -> Result<Allocation> {
    let mut windows: BTreeMap<WindowId, Vec<&ResidualSpectrum>> = BTreeMap::new();
    for (id, s) in inp.spectra {
        windows.entry(id.window()).or_default().push(s);
    }
    let mut v = BTreeMap::new();
    for members in windows.values() {
        v.extend(salience_scores(members)?);
    }
    let mut pin = BTreeMap::new();
    for id in inp.spectra.keys() {
        let s = *inp
            .s_matrix
            .get(id)
            .ok_or_else(|| Error::Config(format!("no sensitivity score for {id}")))?;
        let s_layer = *inp
            .s_layer
            .get(&id.layer)
            .ok_or_else(|| Error::Config(format!("no layer score for layer {}", id.layer)))?;
        let g = inp.g.get(id).copied().unwrap_or(1.0);
        pin.insert(*id, PriorityInput { v: v[id], s, s_layer, g });
    }
    let priorities = priority(&pin);
    let continuous = continuous_ranks(&priorities, &inp.r_std);
    let split = two_stage_allocate(inp.spectra, &continuous)?;
    let aligned: BTreeMap<MatrixId, usize> = split
        .iter()
        .map(|(id, sp)| {
            let cap = admissible_floor(inp.spectra[id].len(), inp.k0);
            (*id, align(sp.total(), inp.k0).min(cap))
        })
        .collect();
    let p = priorities.p();
    let ranks = enforce_budget(&aligned, &p, &inp.r_std, inp.k0);
    let plan = RankPlan::from_ranks(&ranks, &p, inp.r_std.clone(), inp.k0);
    Ok(Allocation {
        priorities,
        continuous,
        split,
        aligned,
        plan,
    })
}

/// Cumulative gain of one matrix at each admissible level.
#[derive(Debug, Clone, PartialEq)]
pub struct GainTable {
    /// Ascending, starting at 0.
    pub levels: Vec<usize>,
    /// `gains[0] = 0`; non-decreasing.
    pub gains: Vec<f64>,
}

impl GainTable {
    /// Recovered residual energy `weight · Σ_{j<r} σ_j²` at each level.
    pub fn from_spectrum(sigma: &[f64], weight: f64, levels: &[usize]) -> Self {
        let gains = levels
            .iter()
            .map(|&r| weight * sigma.iter().take(r).map(|s| s * s).sum::<f64>())
            .collect();
        Self {
            levels: levels.to_vec(),
            gains,
        }
    }
}

pub const BRUTE_FORCE_MAX_MATRICES: usize = 5;
pub const BRUTE_FORCE_MAX_LEVELS: usize = 5;

/// Exhaustive maximizer of `Σ gain_i(r_i)` subject to `Σ r_i ≤ budget`.
/// Ties keep the lexicographically smallest level vector.
pub fn brute_force_allocate(tables: &[GainTable], budget: usize) -> Result<(Vec<usize>, f64)> {
    if tables.len() > BRUTE_FORCE_MAX_MATRICES || tables.iter().any(|t| t.levels.len() > BRUTE_FORCE_MAX_LEVELS) {
        return Err(Error::Range(format!(
            "exhaustive search is limited to {BRUTE_FORCE_MAX_MATRICES} matrices of {BRUTE_FORCE_MAX_LEVELS} levels"
        )));
    }
    let mut best = (vec![0; tables.len()], 0.0);
    let mut idx = vec![0usize; tables.len()];
    loop {
        let used: usize = idx.iter().zip(tables).map(|(&i, t)| t.levels[i]).sum();
        if used <= budget {
            let value: f64 = idx.iter().zip(tables).map(|(&i, t)| t.gains[i]).sum();
            if value > best.1 {
                best = (idx.iter().zip(tables).map(|(&i, t)| t.levels[i]).collect(), value);
            }
        }
        // odometer increment
        let mut pos = tables.len();
        loop {
            if pos == 0 {
                return Ok(best);
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < tables[pos].levels.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Repeatedly takes the single-level upgrade with the largest gain per unit
/// rank that still fits the remaining budget.
pub fn greedy_allocate(tables: &[GainTable], budget: usize) -> (Vec<usize>, f64) {
    let mut at = vec![0usize; tables.len()];
    let mut left = budget;
    loop {
        let mut pick: Option<(usize, f64)> = None;
        for (i, t) in tables.iter().enumerate() {
            let Some(&next) = t.levels.get(at[i] + 1) else { continue };
            let step = next - t.levels[at[i]];
            if step > left {
                continue;
            }
            let ratio = (t.gains[at[i] + 1] - t.gains[at[i]]) / step as f64;
            if ratio > 0.0 && pick.map_or(true, |(_, best)| ratio > best) {
                pick = Some((i, ratio));
            }
        }
        let Some((i, _)) = pick else { break };
        left -= tables[i].levels[at[i] + 1] - tables[i].levels[at[i]];
        at[i] += 1;
    }
    let value = at.iter().zip(tables).map(|(&i, t)| t.gains[i]).sum();
    (at.iter().zip(tables).map(|(&i, t)| t.levels[i]).collect(), value)
}
