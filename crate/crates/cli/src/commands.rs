use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::provenance::{self, expect_hash, sha256_hex, CalibrationArtifact, ARTIFACT_VERSION};
use qcomp::allocator::{allocate, expert_scores, fit_timing, r_std_table, AllocationInputs, Provenance, RankPlan};
use qcomp::compensator::FactorPool;
use qcomp::pipeline::{
    factor_pool, probe_timing, run_pipelined, run_pipelined_batches, summarize, PipelineOptions, ProbeOptions,
    ProfileTable, REFERENCE_PROFILE,
};
use qcomp::sensitivity::{mean_kl, softmax_rows, CalibrationSet, SensitivityReport};
use qcomp::toymodel::{
    build_synthetic, decode_with, forward_compensated_sequential, forward_full, read_fixture, write_fixture,
    DecodeOutput, DecodeRequest, Model, QuantizedExec, QuantizedModel, SequentialExec,
};
use qcomp::{MatrixId, WindowKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

fn out_path(cfg: &RunConfig, out: Option<PathBuf>, name: &str) -> PathBuf {
    out.unwrap_or_else(|| cfg.out_dir.join(name))
}

/// Reads a fixture and checks it was built from `cfg`.
fn load_fixture(cfg: &RunConfig, path: &Path) -> CliResult<(Model, String)> {
    let bytes = provenance::read(path)?;
    let model = read_fixture(&bytes)?;
    if model.spec != cfg.model_spec() {
        return Err(CliError::Provenance(format!(
            "{} was built from a different model config",
            path.display()
        )));
    }
    Ok((model, sha256_hex(&bytes)))
}

/// Reads a plan and checks it was allocated for the fixture at hand.
fn load_plan(path: &Path, fixture_sha: &str) -> CliResult<(RankPlan, String)> {
    let text = provenance::read_text(path)?;
    let plan = RankPlan::from_json(&text)?;
    expect_hash("plan fixture", plan.provenance.fixture_sha256.as_deref(), fixture_sha)?;
    Ok((plan, sha256_hex(text.as_bytes())))
}

pub fn fixture(cfg: &RunConfig, out: Option<PathBuf>) -> CliResult<PathBuf> {
    let model = build_synthetic(&cfg.model_spec())?;
    let mut bytes = Vec::new();
    write_fixture(&model, &mut bytes)?;
    let path = out_path(cfg, out, "fixture.qcfx");
    provenance::write(&path, &bytes)?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for c in model.planted.values() {
        *counts.entry(*c).or_default() += 1;
    }
    println!(
        "fixture {} ({} matrices, {} bytes, sha256 {})",
        path.display(),
        model.probed_ids().len(),
        bytes.len(),
        sha256_hex(&bytes)
    );
    for (c, n) in counts {
        println!("  planted salient count {c}: {n} matrices");
    }
    Ok(path)
}

pub fn calibrate(cfg: &RunConfig, fixture: &Path, out: Option<PathBuf>) -> CliResult<PathBuf> {
    let (mut model, fixture_sha) = load_fixture(cfg, fixture)?;
    let q = QuantizedModel::quantize(&model, &cfg.quant_config())?;
    let spectra = q.spectra(cfg.allocation.tau)?;
    log::info!("analyzed {} residual spectra", spectra.len());

    let c = &cfg.calibration;
    let calib = CalibrationSet::gaussian(model.hidden(), c.tokens, c.samples, c.seed)?;
    let sensitivity =
        SensitivityReport::measure(&mut model, &q, &calib, cfg.allocation.top_layers, cfg.allocation.norm_scope)?;
    let g = expert_scores(&model, &calib.inputs)?;

    let p = &cfg.probe;
    let max_rank = p.ranks.iter().copied().max();
    let pool = factor_pool(&q, max_rank)?;
    let opts = ProbeOptions {
        warmup: p.warmup,
        reps: p.reps,
        tokens: p.tokens,
        seed: c.seed,
    };
    let samples = probe_timing(&model, &q, &pool, &p.ranks, &opts)?;
    let timing = fit_timing(&samples.probes, &samples.comm, &samples.gpu)?;
    log::info!(
        "k_slope {:.4e} ms per rank, fit residual {:.1}%",
        timing.k_slope,
        100.0 * timing.fit_residual
    );
    let r_std = r_std_table(&timing);

    let artifact = CalibrationArtifact {
        version: ARTIFACT_VERSION,
        fixture_sha256: fixture_sha,
        config_sha256: cfg.sha256(),
        spectra: spectra.into_values().collect(),
        sensitivity,
        expert_scores: g,
        timing,
        r_std,
        nondeterministic: vec!["timing".into(), "r_std".into()],
    };
    let path = out_path(cfg, out, "calibration.json");
    provenance::write(&path, artifact.to_json().as_bytes())?;
    println!("calibration {}", path.display());
    for (k, r) in &artifact.r_std {
        println!("  r_std {k}: {r}");
    }
    Ok(path)
}

pub fn allocate_plan(cfg: &RunConfig, artifact: &CalibrationArtifact, artifact_sha: &str) -> CliResult<RankPlan> {
    let spectra = artifact.spectra_map();
    let r_std = cfg.allocation.r_std.clone().unwrap_or_else(|| artifact.r_std.clone());
    let inp = AllocationInputs {
        spectra: &spectra,
        s_matrix: &artifact.sensitivity.s_matrix,
        s_layer: &artifact.sensitivity.s_layer,
        g: &artifact.expert_scores,
        r_std,
        k0: cfg.allocation.k0,
    };
    let mut plan = allocate(&inp)?.plan;
    plan.provenance = Provenance {
        artifact_sha256: Some(artifact_sha.to_string()),
        config_sha256: Some(cfg.sha256()),
        fixture_sha256: Some(artifact.fixture_sha256.clone()),
    };
    Ok(plan)
}

pub fn allocate_cmd(cfg: &RunConfig, artifact: &Path, out: Option<PathBuf>) -> CliResult<PathBuf> {
    let (a, sha) = CalibrationArtifact::load(artifact, &cfg.sha256())?;
    let plan = allocate_plan(cfg, &a, &sha)?;
    let path = out_path(cfg, out, "plan.json");
    provenance::write(&path, plan.to_json().as_bytes())?;
    let skipped = plan.entries.iter().filter(|e| e.rank == 0).count();
    println!(
        "plan {} (total rank {}, {} of {} slots skipped)",
        path.display(),
        plan.total_rank(),
        skipped,
        plan.entries.len()
    );
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Pipelined,
    Sequential,
    Quantized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: RunMode,
    pub steps: usize,
    pub prompt: Vec<usize>,
    pub tokens: Vec<usize>,
    /// sha256 over generated tokens (u64 LE) then logits (f64 LE).
    pub checksum: String,
    /// Largest logit difference from the sequential oracle (pipelined runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_max_abs_diff: Option<f64>,
    pub fixture_sha256: String,
    pub plan_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_sha256: Option<String>,
}

pub fn output_checksum(out: &DecodeOutput) -> String {
    let mut h = Sha256::new();
    for &t in &out.tokens {
        h.update((t as u64).to_le_bytes());
    }
    for row in &out.logits {
        for v in row {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn prompt_for(model: &Model) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.spec.seed);
    (0..4).map(|_| rng.gen_range(0..model.spec.vocab)).collect()
}

fn plan_pool(q: &QuantizedModel, plan: &RankPlan) -> CliResult<FactorPool> {
    let ranks = plan.ranks();
    let max = ranks.values().copied().max().unwrap_or(0);
    let active = ranks
        .iter()
        .filter(|(_, &r)| r > 0)
        .map(|(id, _)| q.residual(*id).map(|r| (*id, r)))
        .collect::<qcomp::Result<Vec<_>>>()?;
    Ok(FactorPool::build(active, Some(max))?)
}

pub fn run(
    cfg: &RunConfig,
    fixture: &Path,
    plan_path: &Path,
    steps: usize,
    mode: RunMode,
    out: Option<PathBuf>,
) -> CliResult<RunSummary> {
    let (model, fixture_sha) = load_fixture(cfg, fixture)?;
    let (plan, plan_sha) = load_plan(plan_path, &fixture_sha)?;
    let q = QuantizedModel::quantize(&model, &cfg.quant_config())?;
    let pool = plan_pool(&q, &plan)?;
    let prompt = prompt_for(&model);
    let req = DecodeRequest::new(prompt.clone(), steps);
    let profile_path = out_path(cfg, out, "profile.csv");

    let (output, oracle_diff, profile_sha) = match mode {
        RunMode::Quantized => (decode_with(&model, &mut QuantizedExec { quantized: &q }, &req)?, None, None),
        RunMode::Sequential => {
            let factors = pool.select(&plan.ranks())?;
            let out = decode_with(&model, &mut SequentialExec { quantized: &q, factors: &factors }, &req)?;
            (out, None, None)
        }
        RunMode::Pipelined => {
            let run = run_pipelined(&model, &q, &pool, &plan, &req, &PipelineOptions::default())?;
            let table = ProfileTable::from_records(&summarize(&run.records), 3);
            table.check()?;
            let text = table.render();
            provenance::write(&profile_path, text.as_bytes())?;
            let factors = pool.select(&plan.ranks())?;
            let oracle = decode_with(&model, &mut SequentialExec { quantized: &q, factors: &factors }, &req)?;
            let diff = run.output.max_abs_diff(&oracle)?;
            (run.output, Some(diff), Some(sha256_hex(text.as_bytes())))
        }
    };
    let summary = RunSummary {
        mode,
        steps,
        prompt,
        tokens: output.tokens.clone(),
        checksum: output_checksum(&output),
        oracle_max_abs_diff: oracle_diff,
        fixture_sha256: fixture_sha,
        plan_sha256: plan_sha,
        profile_sha256: profile_sha,
    };
    let summary_path = profile_path.with_extension("json");
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    provenance::write(&summary_path, json.as_bytes())?;
    println!("{:?} run of {steps} steps, checksum {}", mode, summary.checksum);
    if let Some(d) = oracle_diff {
        println!("  max-abs difference from the sequential oracle: {d:.3e}");
        println!("  profile {}", profile_path.display());
    }
    Ok(summary)
}

/// Size of the step from `r` to the next admissible rank below.
fn step_down(r: usize, k0: u32) -> Option<usize> {
    let base = 1usize << k0;
    match r {
        0 => None,
        r if r <= base => Some(r),
        r => Some(r / 2),
    }
}

fn step_up(r: usize, k0: u32) -> usize {
    let base = 1usize << k0;
    if r == 0 {
        base
    } else {
        r
    }
}

/// Moves one rank step from a matrix in one window to a matrix in another,
/// keeping the total unchanged. `None` when no such move is found.
fn neighbor(
    ranks: &BTreeMap<MatrixId, usize>,
    caps: &BTreeMap<MatrixId, usize>,
    k0: u32,
    rng: &mut ChaCha8Rng,
) -> Option<(MatrixId, MatrixId, usize, BTreeMap<MatrixId, usize>)> {
    let ids: Vec<MatrixId> = ranks.keys().copied().collect();
    for _ in 0..1000 {
        let from = ids[rng.gen_range(0..ids.len())];
        let to = ids[rng.gen_range(0..ids.len())];
        if from.window() == to.window() {
            continue;
        }
        let Some(down) = step_down(ranks[&from], k0) else { continue };
        let up = step_up(ranks[&to], k0);
        if down != up || ranks[&to] + up > caps[&to] {
            continue;
        }
        let mut next = ranks.clone();
        *next.get_mut(&from).expect("present") -= down;
        *next.get_mut(&to).expect("present") += up;
        return Some((from, to, down, next));
    }
    None
}

struct Evaluation {
    proxy_kl: f64,
    tokens_per_s: f64,
}

fn evaluate(
    model: &Model,
    q: &QuantizedModel,
    pool: &FactorPool,
    plan: &RankPlan,
    held_out: &[qcomp::DenseMatrix],
    reference: &[Vec<Vec<f64>>],
) -> CliResult<Evaluation> {
    let factors = pool.select(&plan.ranks())?;
    let mut kl = 0.0;
    for (x, p) in held_out.iter().zip(reference) {
        let pc = softmax_rows(&forward_compensated_sequential(model, q, &factors, x)?.logits);
        kl += mean_kl(p, &pc)?;
    }
    let run = run_pipelined_batches(model, q, pool, plan, held_out, &PipelineOptions::default())?;
    let ms: f64 = run
        .records
        .iter()
        .filter(|r| r.scope == qcomp::pipeline::Scope::Iteration)
        .map(|r| r.total_ms)
        .sum();
    let tokens: usize = held_out.iter().map(|x| x.rows()).sum();
    Ok(Evaluation {
        proxy_kl: kl / held_out.len() as f64,
        tokens_per_s: if ms > 0.0 { tokens as f64 / (ms / 1e3) } else { 0.0 },
    })
}

pub const PERTURB_HEADER: &str = "trial,moved_from,moved_to,delta_rank,proxy_kl,d_proxy,tokens_per_s,d_throughput";

pub fn perturb(
    cfg: &RunConfig,
    fixture: &Path,
    plan_path: &Path,
    trials: usize,
    out: Option<PathBuf>,
) -> CliResult<PathBuf> {
    let (model, fixture_sha) = load_fixture(cfg, fixture)?;
    let (plan, _) = load_plan(plan_path, &fixture_sha)?;
    let path = out_path(cfg, out, "perturb.csv");
    let mut table = String::from(PERTURB_HEADER);
    table.push('\n');
    if trials == 0 {
        provenance::write(&path, table.as_bytes())?;
        println!("perturbation study {} (no trials)", path.display());
        return Ok(path);
    }

    let q = QuantizedModel::quantize(&model, &cfg.quant_config())?;
    let pool = factor_pool(&q, None)?;
    let c = &cfg.calibration;
    let held_out = CalibrationSet::gaussian(model.hidden(), c.tokens, c.samples, c.seed.wrapping_add(1))?;
    let reference = held_out
        .inputs
        .iter()
        .map(|x| Ok(softmax_rows(&forward_full(&model, x)?.logits)))
        .collect::<CliResult<Vec<_>>>()?;
    let caps: BTreeMap<MatrixId, usize> = model
        .probed_ids()
        .into_iter()
        .map(|id| {
            let (r, c) = model.spec.slot_shape(id.slot);
            (id, r.min(c))
        })
        .collect();
    let base = evaluate(&model, &q, &pool, &plan, &held_out.inputs, &reference)?;
    writeln!(table, "0,,,0,{:.6e},0,{:.1},0", base.proxy_kl, base.tokens_per_s).expect("string write");

    let priorities: BTreeMap<MatrixId, f64> = plan.entries.iter().map(|e| (e.id(), e.priority)).collect();
    let ranks = plan.ranks();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed ^ 0x7065_7274);
    for trial in 1..=trials {
        let Some((from, to, delta, next)) = neighbor(&ranks, &caps, plan.k0, &mut rng) else {
            log::warn!("no budget-preserving move found for trial {trial}");
            break;
        };
        let candidate = RankPlan::from_ranks(&next, &priorities, BTreeMap::new(), plan.k0);
        let e = evaluate(&model, &q, &pool, &candidate, &held_out.inputs, &reference)?;
        writeln!(
            table,
            "{trial},{from},{to},{delta},{:.6e},{:.6e},{:.1},{:.1}",
            e.proxy_kl,
            e.proxy_kl - base.proxy_kl,
            e.tokens_per_s,
            e.tokens_per_s - base.tokens_per_s
        )
        .expect("string write");
    }
    provenance::write(&path, table.as_bytes())?;
    println!("perturbation study {} ({trials} trials)", path.display());
    Ok(path)
}

pub fn report(
    artifact: &CalibrationArtifact,
    plan: Option<&RankPlan>,
    profile: Option<&ProfileTable>,
) -> CliResult<String> {
    let mut s = String::new();
    let w = &mut s;
    writeln!(w, "# residual spectra").ok();
    writeln!(w, "{:<12} {:>4} {:>6} {:>10} {:>10}", "matrix", "n", "cut", "phi", "sigma_1").ok();
    for sp in &artifact.spectra {
        let cut = sp.salient_cut.map_or("-".to_string(), |c| c.to_string());
        let s1 = sp.sigma_raw.first().copied().unwrap_or(0.0);
        writeln!(w, "{:<12} {:>4} {:>6} {:>10.3} {:>10.4e}", sp.matrix_id.to_string(), sp.len(), cut, sp.phi, s1).ok();
    }

    writeln!(w, "\n# sensitivity").ok();
    let mut ranked: Vec<(&MatrixId, &f64)> = artifact.sensitivity.d_matrix.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
    writeln!(w, "{:<12} {:>12} {:>8}", "matrix", "D", "S").ok();
    for (id, d) in ranked {
        let score = artifact.sensitivity.s_matrix.get(id).copied().unwrap_or(0.0);
        writeln!(w, "{:<12} {:>12.4e} {:>8.4}", id.to_string(), d, score).ok();
    }
    for (l, d) in &artifact.sensitivity.d_layer {
        let score = artifact.sensitivity.s_layer.get(l).copied().unwrap_or(0.0);
        writeln!(w, "layer {l:<6} {d:>12.4e} {score:>8.4}").ok();
    }
    writeln!(w, "top layers: {:?} (K = {})", artifact.sensitivity.top_set, artifact.sensitivity.k).ok();

    writeln!(w, "\n# timing").ok();
    writeln!(
        w,
        "k_slope {:.4e} ms/rank, fit residual {:.1}% (measured, not reproducible)",
        artifact.timing.k_slope,
        100.0 * artifact.timing.fit_residual
    )
    .ok();

    if let Some(plan) = plan {
        writeln!(w, "\n# plan").ok();
        let mut by_kind: BTreeMap<WindowKind, (usize, usize, usize)> = BTreeMap::new();
        let mut by_window: BTreeMap<qcomp::WindowId, usize> = BTreeMap::new();
        for e in &plan.entries {
            let k = by_kind.entry(e.window).or_default();
            k.0 += e.rank;
            k.1 += 1;
            k.2 += usize::from(e.rank == 0);
            *by_window.entry(e.id().window()).or_default() += e.rank;
        }
        writeln!(
            w,
            "{:<12} {:>8} {:>6} {:>8} {:>10} {:>6}",
            "window", "rank", "slots", "skipped", "max/layer", "r_std"
        )
        .ok();
        for (k, (rank, n, skipped)) in by_kind {
            let widest = by_window.iter().filter(|(id, _)| id.kind == k).map(|(_, r)| *r).max().unwrap_or(0);
            let budget = plan.r_std.get(&k).map_or("-".to_string(), |r| r.to_string());
            writeln!(w, "{:<12} {rank:>8} {n:>6} {skipped:>8} {widest:>10} {budget:>6}", k.name()).ok();
        }
        writeln!(w, "total rank {}", plan.total_rank()).ok();
    }

    writeln!(w, "\n# latency breakdown (ms)").ok();
    match profile {
        Some(t) if !t.rows.is_empty() => {
            t.check()?;
            w.push_str(&t.pretty());
        }
        _ => {
            writeln!(w, "no runs recorded").ok();
        }
    }

    writeln!(w, "\n# reference breakdown (ms)").ok();
    let golden = ProfileTable::parse(REFERENCE_PROFILE)?;
    golden.check()?;
    if golden.render() != REFERENCE_PROFILE {
        return Err(CliError::Core(qcomp::Error::Format("reference table does not round-trip".into())));
    }
    w.push_str(&golden.pretty());
    Ok(s)
}

pub fn report_cmd(
    cfg: &RunConfig,
    artifact: &Path,
    plan: Option<&Path>,
    profile: Option<&Path>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let (a, artifact_sha) = CalibrationArtifact::load(artifact, &cfg.sha256())?;
    let plan = match plan {
        None => None,
        Some(p) => {
            let plan = RankPlan::from_json(&provenance::read_text(p)?)?;
            expect_hash("plan artifact", plan.provenance.artifact_sha256.as_deref(), &artifact_sha)?;
            Some(plan)
        }
    };
    let profile = profile
        .map(|p| Ok::<_, CliError>(ProfileTable::parse(&provenance::read_text(p)?)?))
        .transpose()?;
    let text = report(&a, plan.as_ref(), profile.as_ref())?;
    match out {
        Some(p) => provenance::write(&p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
