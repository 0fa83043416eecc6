//! Monotonic event trace of a pipelined run and the overlap accounting
//! derived from it.

use crate::error::{Error, Result};
use crate::ids::{WindowId, WindowKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transfer {
    ActivationWrite,
    ActivationRead,
    ResultWrite,
    ResultRead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    /// One whole forward pass.
    Step,
    /// From the backbone opening a window to merging its result.
    Window,
    BackboneBusy,
    CompensatorBusy,
    Transfer(Transfer),
}

/// A closed interval in nanoseconds since the run's epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub kind: SpanKind,
    pub step: usize,
    /// Generation of the window; 0 for step spans.
    pub generation: u64,
    pub window: Option<WindowId>,
    pub start_ns: u64,
    pub end_ns: u64,
}

impl Span {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

/// Shared epoch for both workers' clocks.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    epoch: Instant,
}

impl Clock {
    pub fn new() -> Self {
        Self { epoch: Instant::now() }
    }

    pub fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }
}

impl Default for Clock {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub spans: Vec<Span>,
}

impl Trace {
    pub fn push(&mut self, span: Span) {
        self.spans.push(span);
    }

    pub fn merge(mut self, other: Trace) -> Trace {
        self.spans.extend(other.spans);
        self.spans.sort_by_key(|s| (s.start_ns, s.end_ns));
        self
    }

    pub fn count(&self, kind: SpanKind) -> usize {
        self.spans.iter().filter(|s| s.kind == kind).count()
    }
}

/// What a profile row aggregates over.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Iteration,
    Kind(WindowKind),
    Window(WindowId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub scope: Scope,
    pub step: Option<usize>,
    pub total_ms: f64,
    pub cpu_ms: f64,
    pub gpu_ms: f64,
    pub comm_ms: f64,
    pub overlap_ms: f64,
}

impl ProfileRecord {
    /// Compensation time not hidden behind backbone work.
    pub fn exposed_ms(&self) -> f64 {
        (self.cpu_ms - self.overlap_ms).max(0.0)
    }

    /// `overlap ≤ min(cpu, gpu)`, `comm ≤ total`, all non-negative.
    pub fn check(&self) -> Result<()> {
        let v = [self.total_ms, self.cpu_ms, self.gpu_ms, self.comm_ms, self.overlap_ms];
        if v.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Format(format!("{:?}: negative or non-finite duration", self.scope)));
        }
        // aggregated rows are sums of f64 values; allow their rounding
        let slack = 1e-9 * v.iter().copied().fold(1.0, f64::max);
        if self.overlap_ms > self.cpu_ms.min(self.gpu_ms) + slack {
            return Err(Error::Format(format!(
                "{:?}: overlap {} exceeds min(cpu {}, gpu {})",
                self.scope, self.overlap_ms, self.cpu_ms, self.gpu_ms
            )));
        }
        if self.comm_ms > self.total_ms + slack {
            return Err(Error::Format(format!(
                "{:?}: comm {} exceeds total {}",
                self.scope, self.comm_ms, self.total_ms
            )));
        }
        Ok(())
    }

    fn add(&mut self, o: &ProfileRecord) {
        self.cpu_ms += o.cpu_ms;
        self.gpu_ms += o.gpu_ms;
        self.comm_ms += o.comm_ms;
        self.overlap_ms += o.overlap_ms;
        self.total_ms += o.total_ms;
    }

    fn zero(scope: Scope, step: Option<usize>) -> Self {
        Self {
            scope,
            step,
            total_ms: 0.0,
            cpu_ms: 0.0,
            gpu_ms: 0.0,
            comm_ms: 0.0,
            overlap_ms: 0.0,
        }
    }
}

fn ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

fn malformed(why: String) -> Error {
    Error::Format(format!("malformed trace: {why}"))
}

/// Per-window records followed by one iteration record per step.
///
/// Window: `gpu` is the backbone busy span, `cpu` the compensator busy span
/// (0 when the compensator skipped the window), `comm` the summed transfer
/// spans and `overlap` the length of the intersection of the two busy spans.
/// Iteration: per-window sums, with `total` taken from the step span.
pub fn profile_overlap(trace: &Trace) -> Result<Vec<ProfileRecord>> {
    #[derive(Default)]
    struct Acc {
        window: Option<Span>,
        gpu: Option<Span>,
        cpu: Option<Span>,
        comm_ns: u64,
    }
    let mut windows: BTreeMap<u64, Acc> = BTreeMap::new();
    let mut steps: BTreeMap<usize, Span> = BTreeMap::new();
    for s in &trace.spans {
        if s.end_ns < s.start_ns {
            return Err(malformed(format!("span {:?} ends before it starts", s.kind)));
        }
        if s.kind == SpanKind::Step {
            if steps.insert(s.step, *s).is_some() {
                return Err(malformed(format!("step {} recorded twice", s.step)));
            }
            continue;
        }
        let acc = windows.entry(s.generation).or_default();
        let slot = match s.kind {
            SpanKind::Window => &mut acc.window,
            SpanKind::BackboneBusy => &mut acc.gpu,
            SpanKind::CompensatorBusy => &mut acc.cpu,
            SpanKind::Transfer(_) => {
                acc.comm_ns += s.duration_ns();
                continue;
            }
            SpanKind::Step => unreachable!(),
        };
        if slot.replace(*s).is_some() {
            return Err(malformed(format!("generation {} has two {:?} spans", s.generation, s.kind)));
        }
    }

    let mut out = Vec::new();
    let mut per_step: BTreeMap<usize, ProfileRecord> = BTreeMap::new();
    for (generation, acc) in windows {
        let w = acc
            .window
            .ok_or_else(|| malformed(format!("generation {generation} has no window span")))?;
        let id = w
            .window
            .ok_or_else(|| malformed(format!("generation {generation} window span lacks an id")))?;
        let gpu = acc
            .gpu
            .ok_or_else(|| malformed(format!("generation {generation} has no backbone span")))?;
        let overlap_ns = acc.cpu.map_or(0, |c| {
            let lo = c.start_ns.max(gpu.start_ns);
            let hi = c.end_ns.min(gpu.end_ns);
            hi.saturating_sub(lo)
        });
        let rec = ProfileRecord {
            scope: Scope::Window(id),
            step: Some(w.step),
            total_ms: ms(w.duration_ns()),
            cpu_ms: ms(acc.cpu.map_or(0, |c| c.duration_ns())),
            gpu_ms: ms(gpu.duration_ns()),
            comm_ms: ms(acc.comm_ns),
            overlap_ms: ms(overlap_ns),
        };
        per_step
            .entry(w.step)
            .or_insert_with(|| ProfileRecord::zero(Scope::Iteration, Some(w.step)))
            .add(&rec);
        out.push(rec);
    }
    for (step, mut rec) in per_step {
        if let Some(s) = steps.get(&step) {
            rec.total_ms = ms(s.duration_ns());
        }
        out.push(rec);
    }
    Ok(out)
}

/// Mean over steps of the per-step sums for each window kind, plus the mean
/// iteration record and each window instance's mean. Rows are ordered
/// iteration, kinds, windows.
pub fn summarize(records: &[ProfileRecord]) -> Vec<ProfileRecord> {
    let mut iter_acc = ProfileRecord::zero(Scope::Iteration, None);
    let mut kinds: BTreeMap<WindowKind, ProfileRecord> = BTreeMap::new();
    let mut wins: BTreeMap<WindowId, (ProfileRecord, usize)> = BTreeMap::new();
    let mut steps = 0usize;
    for r in records {
        match &r.scope {
            Scope::Iteration => {
                iter_acc.add(r);
                steps += 1;
            }
            Scope::Window(id) => {
                kinds
                    .entry(id.kind)
                    .or_insert_with(|| ProfileRecord::zero(Scope::Kind(id.kind), None))
                    .add(r);
                let e = wins
                    .entry(*id)
                    .or_insert_with(|| (ProfileRecord::zero(Scope::Window(*id), None), 0));
                e.0.add(r);
                e.1 += 1;
            }
            Scope::Kind(_) => {}
        }
    }
    let scale = |mut r: ProfileRecord, n: usize| {
        let f = 1.0 / n.max(1) as f64;
        r.total_ms *= f;
        r.cpu_ms *= f;
        r.gpu_ms *= f;
        r.comm_ms *= f;
        r.overlap_ms *= f;
        r
    };
    let mut out = Vec::new();
    if steps > 0 {
        out.push(scale(iter_acc, steps));
    }
    out.extend(kinds.into_values().map(|r| scale(r, steps)));
    out.extend(wins.into_values().map(|(r, n)| scale(r, n)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(kind: SpanKind, generation: u64, start_ms: f64, end_ms: f64) -> Span {
        Span {
            kind,
            step: 0,
            generation,
            window: (kind == SpanKind::Window).then_some(WindowId { layer: 0, kind: WindowKind::AttO }),
            start_ns: (start_ms * 1e6) as u64,
            end_ns: (end_ms * 1e6) as u64,
        }
    }

    #[test]
    fn overlap_of_nested_spans() {
        let t = Trace {
            spans: vec![
                span(SpanKind::Window, 1, 0.0, 10.0),
                span(SpanKind::BackboneBusy, 1, 1.0, 9.0),
                span(SpanKind::CompensatorBusy, 1, 2.0, 7.0),
                span(SpanKind::Transfer(Transfer::ActivationWrite), 1, 0.0, 0.5),
                span(SpanKind::Transfer(Transfer::ResultRead), 1, 9.0, 9.25),
                span(SpanKind::Step, 0, 0.0, 12.0),
            ],
        };
        let r = profile_overlap(&t).unwrap();
        assert_eq!(r.len(), 2);
        assert!((r[0].overlap_ms - 5.0).abs() < 1e-9);
        assert!((r[0].comm_ms - 0.75).abs() < 1e-9);
        assert!((r[0].exposed_ms()).abs() < 1e-9);
        assert_eq!(r[1].scope, Scope::Iteration);
        assert!((r[1].total_ms - 12.0).abs() < 1e-9);
        for rec in &r {
            rec.check().unwrap();
        }
    }

    #[test]
    fn idle_compensator_has_no_overlap() {
        let t = Trace {
            spans: vec![span(SpanKind::Window, 1, 0.0, 3.0), span(SpanKind::BackboneBusy, 1, 0.0, 3.0)],
        };
        let r = profile_overlap(&t).unwrap();
        assert_eq!(r[0].overlap_ms, 0.0);
        assert_eq!(r[0].cpu_ms, 0.0);
    }

    #[test]
    fn malformed_traces() {
        let missing = Trace {
            spans: vec![span(SpanKind::BackboneBusy, 1, 0.0, 3.0)],
        };
        assert!(matches!(profile_overlap(&missing), Err(Error::Format(_))));
        let mut backwards = span(SpanKind::Window, 1, 0.0, 3.0);
        backwards.end_ns = 0;
        backwards.start_ns = 5;
        assert!(profile_overlap(&Trace { spans: vec![backwards] }).is_err());
    }

    #[test]
    fn record_check() {
        let mut r = ProfileRecord::zero(Scope::Iteration, None);
        r.cpu_ms = 1.0;
        r.gpu_ms = 2.0;
        r.overlap_ms = 1.5;
        assert!(r.check().is_err());
        r.overlap_ms = 1.0;
        r.total_ms = 3.0;
        assert!(r.check().is_ok());
    }
}
