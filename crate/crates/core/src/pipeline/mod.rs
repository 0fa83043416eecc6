//! Two-worker compensated inference.
//!
//! The backbone worker runs the quantized model. At each compensation
//! window it writes the window input to the mailbox, raises `start`,
//! computes `Ŷ = X Ŵ` for every member, waits for `done`, reads `ΔY` and
//! merges `Y = Ŷ + ΔY`. The compensation worker follows the same schedule
//! from its own position counter: it waits for `start`, reads the input,
//! computes `ΔY = Σ (X A_i) B_i` with each slot's planned rank (rank-0 slots
//! are skipped), writes the result, clears `start` and raises `done`.
//!
//! In MoE layers the compensator routes the UPGATE input itself and keeps
//! its `ΔY_up`, `ΔY_gate` per expert. For the DOWN window the backbone hands
//! over its quantized `Ŷ_up`, `Ŷ_gate`, and the compensator rebuilds
//! `SiLU(gate) ⊙ up` locally before applying the down factors.

pub mod mailbox;
mod probe;
mod table;
mod trace;

pub use probe::{probe_timing, ProbeOptions, TimingSamples};
pub use table::{ProfileRow, ProfileTable, HEADER as PROFILE_HEADER, REFERENCE_PROFILE};
pub use trace::{profile_overlap, summarize, Clock, ProfileRecord, Scope, Span, SpanKind, Trace, Transfer};

use crate::allocator::RankPlan;
use crate::compensator::{apply, CompensationFactors, FactorPool};
use crate::error::{Error, Result};
use crate::ids::{MatrixId, Slot, WindowId, WindowKind};
use crate::numerics::{matmul, DenseMatrix};
use crate::toymodel::{
    argmax, decode_input, forward_with, gated_activation, DecodeOutput, DecodeRequest, ExpertAssignment, Ffn,
    ForwardOutput, LinearExec, MemberGroup, Model, QuantizedModel,
};
use mailbox::{Activation, Corrections, Mailbox, MailboxStats, Payload, ResultMsg, WaitError};
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Duration;

/// One compensation window of the per-step schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub id: WindowId,
    /// Index of this window within its layer, 0..4.
    pub position: usize,
    pub slots: &'static [Slot],
    /// Experts are resolved at run time, after routing.
    pub moe: bool,
}

impl Window {
    /// Member operators once the activated experts are known (ignored for
    /// attention and dense windows).
    pub fn member_ops(&self, experts: &[usize]) -> Vec<MatrixId> {
        let ffn_uses_experts = self.moe && matches!(self.id.kind, WindowKind::FfnUpGate | WindowKind::FfnDown);
        if ffn_uses_experts {
            experts
                .iter()
                .flat_map(|&e| self.slots.iter().map(move |&s| MatrixId::expert(self.id.layer, s, e)))
                .collect()
        } else {
            self.slots.iter().map(|&s| MatrixId::dense(self.id.layer, s)).collect()
        }
    }
}

pub fn build_schedule(model: &Model) -> Vec<Window> {
    let mut out = Vec::with_capacity(4 * model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let moe = matches!(layer.ffn, Ffn::Moe { .. });
        for (position, kind) in WindowKind::ALL.into_iter().enumerate() {
            out.push(Window {
                id: WindowId { layer: l, kind },
                position,
                slots: kind.slots(),
                moe: moe && matches!(kind, WindowKind::FfnUpGate | WindowKind::FfnDown),
            });
        }
    }
    out
}

/// Test hooks that break the protocol on purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultHook {
    /// The compensator panics while serving this generation.
    PanicAt { generation: u64 },
    /// The backbone skips one generation number at this point.
    SkipGeneration { at: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    /// Bound on any single in-step rendezvous wait.
    pub watchdog: Duration,
    /// Pads every backbone busy span to at least this long.
    pub backbone_busy_floor: Option<Duration>,
    /// Pads every compensator busy span to at least this long.
    pub compensator_busy_floor: Option<Duration>,
    pub fault: Option<FaultHook>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            watchdog: Duration::from_secs(5),
            backbone_busy_floor: None,
            compensator_busy_floor: None,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun<T> {
    pub output: T,
    pub trace: Trace,
    pub records: Vec<ProfileRecord>,
    pub stats: MailboxStats,
}

fn protocol(window: WindowId, generation: u64, reason: impl Into<String>) -> Error {
    Error::Protocol {
        window: window.to_string(),
        generation,
        reason: reason.into(),
    }
}

/// Waits until `start_ns + floor`, sleeping while more than 2 ms away.
/// Returns the end of the busy span: the deadline if any padding happened,
/// otherwise the time the real work finished.
fn pad_to(clock: &Clock, start_ns: u64, floor: Option<Duration>) -> u64 {
    let Some(floor) = floor else { return clock.now_ns() };
    let deadline = start_ns + floor.as_nanos() as u64;
    let finished = clock.now_ns();
    if finished >= deadline {
        return finished;
    }
    loop {
        let now = clock.now_ns();
        if now >= deadline {
            // the injected interval ends at the deadline; oversleeping is timer latency
            return deadline;
        }
        let left = deadline - now;
        if left > 2_000_000 {
            std::thread::sleep(Duration::from_nanos(left - 2_000_000));
        } else {
            std::thread::yield_now();
        }
    }
}

struct Backbone<'a> {
    mb: &'a Mailbox,
    clock: Clock,
    quantized: &'a QuantizedModel,
    opts: &'a PipelineOptions,
    trace: Trace,
    generation: u64,
    step: usize,
    step_open: u64,
    /// Full MoE layer input, stashed by the routing hook.
    moe_input: Option<DenseMatrix>,
    /// Quantized `(up, gate)` outputs per expert from the last UPGATE window.
    moe_yhat: Vec<(usize, DenseMatrix, DenseMatrix)>,
}

impl Backbone<'_> {
    fn span(&mut self, kind: SpanKind, generation: u64, window: Option<WindowId>, start_ns: u64, end_ns: u64) {
        self.trace.push(Span {
            kind,
            step: self.step,
            generation,
            window,
            start_ns,
            end_ns,
        });
    }

    fn begin_step(&mut self) {
        self.step_open = self.clock.now_ns();
    }

    fn end_step(&mut self) {
        let now = self.clock.now_ns();
        self.span(SpanKind::Step, 0, None, self.step_open, now);
        self.step += 1;
    }

    fn wait_done(&self, window: WindowId, generation: u64) -> Result<()> {
        match self.mb.done.wait(self.mb.shutdown_flag(), Some(self.opts.watchdog)) {
            Ok(()) => Ok(()),
            Err(WaitError::Timeout) => {
                let e = protocol(window, generation, "watchdog expired waiting for the compensator");
                self.mb.fail(e.clone());
                Err(e)
            }
            Err(WaitError::Shutdown) => Err(self
                .mb
                .fault()
                .unwrap_or_else(|| protocol(window, generation, "compensator stopped"))),
        }
    }
}

impl LinearExec for Backbone<'_> {
    fn routed(&mut self, _layer: usize, input: &DenseMatrix, _a: &ExpertAssignment) {
        self.moe_input = Some(input.clone());
    }

    fn window(&mut self, _model: &Model, window: WindowId, groups: &[MemberGroup]) -> Result<Vec<Vec<DenseMatrix>>> {
        let open = self.clock.now_ns();
        let mut generation = self.generation + 1;
        if self.opts.fault == Some(FaultHook::SkipGeneration { at: generation }) {
            generation += 1;
        }
        let moe = groups.first().is_some_and(|g| g.expert.is_some());
        let payload = match (moe, window.kind) {
            (true, WindowKind::FfnUpGate) => Payload::Routed(
                self.moe_input
                    .take()
                    .ok_or_else(|| protocol(window, generation, "MoE window without a routed input"))?,
            ),
            (true, WindowKind::FfnDown) => Payload::Gated(std::mem::take(&mut self.moe_yhat)),
            _ => Payload::Groups(groups.iter().map(|g| (g.expert, g.input.clone())).collect()),
        };

        let t = self.clock.now_ns();
        self.mb.write_activation(Activation {
            generation,
            window,
            payload,
        });
        let t2 = self.clock.now_ns();
        self.span(SpanKind::Transfer(Transfer::ActivationWrite), generation, None, t, t2);
        self.mb.raise_start();

        let busy = self.clock.now_ns();
        let mut ys = groups
            .iter()
            .map(|g| {
                window
                    .kind
                    .slots()
                    .iter()
                    .map(|&slot| {
                        let id = MatrixId {
                            layer: window.layer,
                            slot,
                            expert: g.expert,
                        };
                        matmul(&g.input, self.quantized.dequantized(id)?)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let busy_end = pad_to(&self.clock, busy, self.opts.backbone_busy_floor);
        self.span(SpanKind::BackboneBusy, generation, None, busy, busy_end);
        if moe && window.kind == WindowKind::FfnUpGate {
            self.moe_yhat = groups
                .iter()
                .zip(&ys)
                .map(|(g, y)| (g.expert.expect("moe group"), y[0].clone(), y[1].clone()))
                .collect();
        }

        self.wait_done(window, generation)?;
        let t = self.clock.now_ns();
        let msg = self
            .mb
            .take_result()
            .ok_or_else(|| protocol(window, generation, "done raised without a result"))?;
        self.mb.done.clear();
        let t2 = self.clock.now_ns();
        self.span(SpanKind::Transfer(Transfer::ResultRead), generation, None, t, t2);
        if msg.generation != generation {
            let e = protocol(
                window,
                generation,
                format!("result carries generation {}", msg.generation),
            );
            self.mb.fail(e.clone());
            return Err(e);
        }
        if msg.corrections.len() != ys.len() {
            return Err(protocol(window, generation, "result group count differs from the window"));
        }
        for (y, d) in ys.iter_mut().zip(&msg.corrections) {
            for (y, d) in y.iter_mut().zip(d) {
                if let Some(d) = d {
                    y.merge_delta(d)?;
                }
            }
        }
        let close = self.clock.now_ns();
        self.span(SpanKind::Window, generation, Some(window), open, close);
        self.generation = generation;
        Ok(ys)
    }
}

struct Compensator<'a> {
    mb: &'a Mailbox,
    clock: Clock,
    model: &'a Model,
    schedule: Vec<Window>,
    factors: BTreeMap<MatrixId, CompensationFactors>,
    opts: &'a PipelineOptions,
    trace: Trace,
    position: usize,
    step: usize,
    generation: u64,
    /// `(ΔY_up, ΔY_gate)` per expert of the current MoE layer.
    cache: BTreeMap<usize, (Option<DenseMatrix>, Option<DenseMatrix>)>,
}

impl Compensator<'_> {
    fn span(&mut self, kind: SpanKind, generation: u64, start_ns: u64, end_ns: u64) {
        self.trace.push(Span {
            kind,
            step: self.step,
            generation,
            window: None,
            start_ns,
            end_ns,
        });
    }

    fn correction(&self, id: MatrixId, x: &DenseMatrix) -> Result<Option<DenseMatrix>> {
        self.factors.get(&id).map(|f| apply(x, f)).transpose()
    }

    fn compute(&mut self, w: &Window, payload: Payload) -> Result<Corrections> {
        let layer = w.id.layer;
        match payload {
            Payload::Groups(groups) => groups
                .iter()
                .map(|(expert, x)| {
                    w.slots
                        .iter()
                        .map(|&slot| self.correction(MatrixId { layer, slot, expert: *expert }, x))
                        .collect()
                })
                .collect(),
            Payload::Routed(h) => {
                let Ffn::Moe { router, .. } = &self.model.layers[layer].ffn else {
                    return Err(protocol(w.id, self.generation, "routed payload for a dense layer"));
                };
                let assign = ExpertAssignment::route(&h, router, self.model.spec.top_k)?;
                self.cache.clear();
                let mut out = Vec::new();
                for g in assign.groups(&h) {
                    let e = g.expert.expect("routed group");
                    let up = self.correction(MatrixId::expert(layer, Slot::Up, e), &g.input)?;
                    let gate = self.correction(MatrixId::expert(layer, Slot::Gate, e), &g.input)?;
                    self.cache.insert(e, (up.clone(), gate.clone()));
                    out.push(vec![up, gate]);
                }
                Ok(out)
            }
            Payload::Gated(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                for (e, mut up, mut gate) in parts {
                    let id = MatrixId::expert(layer, Slot::Down, e);
                    if !self.factors.contains_key(&id) {
                        out.push(vec![None]);
                        continue;
                    }
                    let (du, dg) = self
                        .cache
                        .get(&e)
                        .ok_or_else(|| protocol(w.id, self.generation, format!("no cached UPGATE result for expert {e}")))?;
                    if let Some(du) = du {
                        up.merge_delta(du)?;
                    }
                    if let Some(dg) = dg {
                        gate.merge_delta(dg)?;
                    }
                    let act = gated_activation(&up, &gate)?;
                    out.push(vec![self.correction(id, &act)?]);
                }
                Ok(out)
            }
        }
    }

    fn serve(&mut self) -> Result<()> {
        if self.schedule.is_empty() {
            return Ok(());
        }
        loop {
            let window = self.schedule[self.position].clone();
            let expected = self.generation + 1;
            let timeout = (self.position != 0).then_some(self.opts.watchdog);
            match self.mb.start.wait(self.mb.shutdown_flag(), timeout) {
                Ok(()) => {}
                Err(WaitError::Shutdown) => return Ok(()),
                Err(WaitError::Timeout) => {
                    return Err(protocol(window.id, expected, "watchdog expired waiting for the backbone"));
                }
            }
            let t = self.clock.now_ns();
            let act = self
                .mb
                .take_activation()
                .ok_or_else(|| protocol(window.id, expected, "start raised without an activation"))?;
            let t2 = self.clock.now_ns();
            self.span(SpanKind::Transfer(Transfer::ActivationRead), act.generation, t, t2);
            if act.generation != expected || act.window != window.id {
                return Err(protocol(
                    window.id,
                    expected,
                    format!(
                        "desync: compensator expects generation {expected} at {}, mailbox holds {} at {}",
                        window.id, act.generation, act.window
                    ),
                ));
            }
            let generation = act.generation;

            let busy = self.clock.now_ns();
            let inject = self.opts.fault == Some(FaultHook::PanicAt { generation });
            let computed = catch_unwind(AssertUnwindSafe(|| {
                if inject {
                    panic!("injected compensator fault");
                }
                self.compute(&window, act.payload)
            }));
            let corrections = match computed {
                Ok(r) => r?,
                Err(p) => {
                    let msg = p
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| p.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "unknown panic".into());
                    return Err(protocol(window.id, generation, format!("compensator panicked: {msg}")));
                }
            };
            let busy_end = pad_to(&self.clock, busy, self.opts.compensator_busy_floor);
            self.span(SpanKind::CompensatorBusy, generation, busy, busy_end);

            let t = self.clock.now_ns();
            self.mb.write_result(ResultMsg {
                generation,
                corrections,
            });
            let t2 = self.clock.now_ns();
            self.span(SpanKind::Transfer(Transfer::ResultWrite), generation, t, t2);
            self.mb.start.clear();
            self.mb.raise_done();

            self.generation = generation;
            self.position += 1;
            if self.position == self.schedule.len() {
                self.position = 0;
                self.step += 1;
                self.cache.clear();
            }
        }
    }
}

/// Factors of `plan`, checking that every probed matrix is covered.
fn planned_factors(model: &Model, pool: &FactorPool, plan: &RankPlan) -> Result<BTreeMap<MatrixId, CompensationFactors>> {
    let ranks = plan.ranks();
    if let Some(id) = model.probed_ids().into_iter().find(|id| !ranks.contains_key(id)) {
        return Err(Error::Config(format!("plan does not cover {id}")));
    }
    pool.select(&ranks)
}

fn run_with<T: Send>(
    model: &Model,
    quantized: &QuantizedModel,
    pool: &FactorPool,
    plan: &RankPlan,
    opts: &PipelineOptions,
    body: impl FnOnce(&mut dyn FnMut(&DenseMatrix) -> Result<ForwardOutput>) -> Result<T> + Send,
) -> Result<PipelineRun<T>> {
    let factors = planned_factors(model, pool, plan)?;
    let mb = Mailbox::default();
    let clock = Clock::new();
    let schedule = build_schedule(model);

    let (backbone, compensator) = std::thread::scope(|scope| {
        let comp = scope.spawn(|| {
            let mut c = Compensator {
                mb: &mb,
                clock,
                model,
                schedule,
                factors,
                opts,
                trace: Trace::default(),
                position: 0,
                step: 0,
                generation: 0,
                cache: BTreeMap::new(),
            };
            if let Err(e) = c.serve() {
                log::error!("compensation worker stopped: {e}");
                mb.fail(e);
            }
            c.trace
        });
        let back = scope.spawn(|| {
            let mut b = Backbone {
                mb: &mb,
                clock,
                quantized,
                opts,
                trace: Trace::default(),
                generation: 0,
                step: 0,
                step_open: 0,
                moe_input: None,
                moe_yhat: Vec::new(),
            };
            let out = body(&mut |x| {
                b.begin_step();
                let r = forward_with(model, &mut b, x);
                b.end_step();
                r
            });
            match &out {
                Err(e) => mb.fail(e.clone()),
                Ok(_) => mb.shutdown(),
            }
            (out, b.trace)
        });
        (back.join(), comp.join())
    });

    let (output, btrace) = backbone.map_err(|_| Error::Protocol {
        window: "-".into(),
        generation: 0,
        reason: "backbone worker panicked".into(),
    })?;
    let ctrace = compensator.map_err(|_| Error::Protocol {
        window: "-".into(),
        generation: 0,
        reason: "compensation worker panicked".into(),
    })?;
    let output = match (output, mb.fault()) {
        (Ok(v), None) => v,
        (_, Some(f)) => return Err(f),
        (Err(e), None) => return Err(e),
    };
    let trace = btrace.merge(ctrace);
    let records = profile_overlap(&trace)?;
    Ok(PipelineRun {
        output,
        trace,
        records,
        stats: mb.stats(),
    })
}

/// Pipelined greedy decode.
pub fn run_pipelined(
    model: &Model,
    quantized: &QuantizedModel,
    pool: &FactorPool,
    plan: &RankPlan,
    req: &DecodeRequest,
    opts: &PipelineOptions,
) -> Result<PipelineRun<DecodeOutput>> {
    req.validate(model)?;
    run_with(model, quantized, pool, plan, opts, |fwd| {
        let mut tokens = req.prompt.clone();
        let mut out = DecodeOutput {
            tokens: Vec::with_capacity(req.steps),
            logits: Vec::with_capacity(req.steps),
        };
        for _ in 0..req.steps {
            let f = fwd(&decode_input(model, &tokens, req.context))?;
            let last = f.logits.row(f.logits.rows() - 1).to_vec();
            let next = argmax(&last);
            tokens.push(next);
            out.tokens.push(next);
            out.logits.push(last);
        }
        Ok(out)
    })
}

/// One pipelined forward per input batch.
pub fn run_pipelined_batches(
    model: &Model,
    quantized: &QuantizedModel,
    pool: &FactorPool,
    plan: &RankPlan,
    inputs: &[DenseMatrix],
    opts: &PipelineOptions,
) -> Result<PipelineRun<Vec<ForwardOutput>>> {
    run_with(model, quantized, pool, plan, opts, |fwd| inputs.iter().map(|x| fwd(x)).collect())
}

/// Factor pool over every residual of `quantized`.
pub fn factor_pool(quantized: &QuantizedModel, max_rank: Option<usize>) -> Result<FactorPool> {
    FactorPool::build(quantized.entries.iter().map(|(id, e)| (*id, &e.residual)), max_rank)
}
