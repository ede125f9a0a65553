//! Joint training of the flow, the classification head, the energy weights
//! and Φ.
//!
//! Iterations are numbered from 1. Up to and including `warmup_iters` the
//! objective is `L_det + β·L_nll` and no outliers are synthesized; afterwards
//! every iteration draws one outlier batch and adds `α·L_reg`. `L_det` only
//! reaches the head, `L_nll` only the flow, and `L_reg` reaches the head, the
//! energy weights, Φ and (through the outlier features) the flow.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::binio::{put_f64s, put_u128, put_u32, put_u64, ByteReader};
use crate::datakit::FeatureRecord;
use crate::error::{invalid, FfsError, Result};
use crate::flow::{init_flow, read_flow_from, write_flow, FlowArch, FlowModel, FlowVariant};
use crate::heads::{grad_params_heads, HeadBundle, LossWeights, OutlierInputs};
use crate::numerics::{RngState, SeededRng};
use crate::synthesis::{
    estimate_delta, fit_class_gaussians, projection_sample, rejection_sample, vos_plus_filter, vos_sample, ClassGaussians,
    OutlierBatch, SynthesisConfig, SynthesisMode, DEFAULT_RIDGE,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FFSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(format!("unknown optimizer '{s}' (expected sgd or adam)")),
        }
    }
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

/// Where post-warmup outliers come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierSource {
    /// Sampled from the flow per the synthesis config.
    Flow,
    /// Class-conditional Gaussians fit on the training inliers.
    Vos,
    /// As `Vos`, with the cross-class rejection filter.
    VosPlus,
}

impl FromStr for OutlierSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "flow" | "ffs" => Ok(OutlierSource::Flow),
            "vos" => Ok(OutlierSource::Vos),
            "vos+" | "vosplus" | "vos_plus" => Ok(OutlierSource::VosPlus),
            _ => Err(format!("unknown outlier source '{s}' (expected ffs, vos or vos+)")),
        }
    }
}

impl OutlierSource {
    pub fn name(self) -> &'static str {
        match self {
            OutlierSource::Flow => "ffs",
            OutlierSource::Vos => "vos",
            OutlierSource::VosPlus => "vos+",
        }
    }
}

/// How the projection target δ is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaMode {
    /// Recomputed every iteration from the inliers in the current batch.
    PerBatch,
    /// Computed once at the first post-warmup iteration, then kept.
    Frozen,
}

impl FromStr for DeltaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "batch" | "per_batch" => Ok(DeltaMode::PerBatch),
            "frozen" | "freeze" => Ok(DeltaMode::Frozen),
            _ => Err(format!("unknown delta mode '{s}' (expected batch or frozen)")),
        }
    }
}

impl DeltaMode {
    pub fn name(self) -> &'static str {
        match self {
            DeltaMode::PerBatch => "batch",
            DeltaMode::Frozen => "frozen",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub lr_flow: f64,
    pub lr_heads: f64,
    /// Weight of `L_nll` in the gradient applied to the flow. The flow step
    /// uses `flow_nll_weight·∂L_nll/∂γ + α·∂L_reg/∂γ`; setting it to
    /// `weights.beta` gives the plain gradient of the total loss.
    pub flow_nll_weight: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub synthesis: SynthesisConfig,
    pub weights: LossWeights,
    pub temperature: f64,
    pub flow_variant: FlowVariant,
    pub arch: FlowArch,
    pub source: OutlierSource,
    pub delta_mode: DeltaMode,
    pub vos_ridge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_total(2000)
    }
}

impl TrainConfig {
    /// Defaults with `total_iters` set and warmup at `⌊0.6·total⌋`.
    pub fn with_total(total_iters: usize) -> Self {
        Self {
            total_iters,
            warmup_iters: default_warmup(total_iters),
            batch_size: 128,
            lr_flow: 1e-3,
            lr_heads: 1e-3,
            flow_nll_weight: 1.0,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            synthesis: SynthesisConfig::default(),
            weights: LossWeights::default(),
            temperature: 1.0,
            flow_variant: FlowVariant::Glow,
            arch: FlowArch::default(),
            source: OutlierSource::Flow,
            delta_mode: DeltaMode::PerBatch,
            vos_ridge: DEFAULT_RIDGE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters > self.total_iters {
            return invalid(format!("warmup_iters = {} exceeds total_iters = {}", self.warmup_iters, self.total_iters));
        }
        if self.batch_size < 2 {
            return invalid("batch_size must be at least 2");
        }
        if !(self.lr_flow > 0.0 && self.lr_heads > 0.0) {
            return invalid("learning rates must be positive");
        }
        if !(self.flow_nll_weight >= 0.0) {
            return invalid("flow_nll_weight must be non-negative");
        }
        if !(self.weights.alpha >= 0.0 && self.weights.beta >= 0.0) {
            return invalid("alpha and beta must be non-negative");
        }
        if !(self.temperature > 0.0) {
            return invalid("temperature must be positive");
        }
        if self.flow_variant == FlowVariant::Custom {
            return invalid("training needs one of the named flow variants");
        }
        if !(self.vos_ridge >= 0.0) {
            return invalid("vos_ridge must be non-negative");
        }
        self.synthesis.validate()
    }
}

pub fn default_warmup(total_iters: usize) -> usize {
    total_iters * 3 / 5
}

/// Loss components of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub det: f64,
    pub nll: f64,
    pub reg: f64,
    pub total: f64,
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("iter,det,nll,reg,total\n");
    for r in history {
        writeln!(out, "{},{:?},{:?},{:?},{:?}", r.iter, r.det, r.nll, r.reg, r.total).expect("string write");
    }
    out
}

/// First and second moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Number of steps taken.
    pub t: u64,
    pub flow: Moments,
    pub heads: Moments,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    fn new(kind: OptimizerKind, n_flow: usize, n_heads: usize) -> Self {
        Self { kind, t: 0, flow: Moments::zeros(n_flow), heads: Moments::zeros(n_heads) }
    }

    fn update(kind: OptimizerKind, t: u64, lr: f64, params: &mut [f64], grad: &[f64], mom: &mut Moments) {
        match kind {
            OptimizerKind::Sgd => params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g),
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
                for i in 0..params.len() {
                    mom.m[i] = ADAM_BETA1 * mom.m[i] + (1.0 - ADAM_BETA1) * grad[i];
                    mom.v[i] = ADAM_BETA2 * mom.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                    params[i] -= lr * (mom.m[i] / c1) / ((mom.v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Iterations completed.
    pub iteration: usize,
    pub flow: FlowModel,
    pub heads: HeadBundle,
    pub optimizer: OptimizerState,
    pub rng: SeededRng,
    pub history: Vec<LossRecord>,
    pub frozen_delta: Option<f64>,
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.iteration == other.iteration
            && self.flow == other.flow
            && self.heads == other.heads
            && self.optimizer == other.optimizer
            && self.rng.state() == other.rng.state()
            && self.history == other.history
            && self.frozen_delta.map(f64::to_bits) == other.frozen_delta.map(f64::to_bits)
    }
}

/// What happened in one iteration; handed to a [`StepObserver`].
#[derive(Debug, Clone)]
pub struct StepReport {
    pub iteration: usize,
    pub warmup: bool,
    pub synthesis_calls: usize,
    pub losses: LossRecord,
    /// Gradient applied to Φ's `(u, v)`.
    pub psi_grad: [f64; 2],
    pub inlier_log_probs: Vec<f64>,
    /// Flow log-likelihood of the synthesized outliers (empty in warmup).
    pub outlier_log_probs: Vec<f64>,
    /// True when projection sampling stopped at its step cap.
    pub projection_capped: bool,
}

pub trait StepObserver {
    fn on_step(&mut self, report: &StepReport);
}

impl<F: FnMut(&StepReport)> StepObserver for F {
    fn on_step(&mut self, report: &StepReport) {
        self(report)
    }
}

struct NoObserver;

impl StepObserver for NoObserver {
    fn on_step(&mut self, _: &StepReport) {}
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a [FeatureRecord],
    classes: usize,
    gaussians: Option<ClassGaussians>,
    state: TrainState,
}

fn check_data(data: &[FeatureRecord], classes: usize) -> Result<usize> {
    if classes == 0 {
        return invalid("need at least one inlier class");
    }
    let Some(first) = data.first() else {
        return invalid("training set is empty");
    };
    let d = first.feature.len();
    let mut seen = vec![false; classes];
    for (i, r) in data.iter().enumerate() {
        if r.feature.len() != d {
            return invalid(format!("record {i} has dimension {}, expected {d}", r.feature.len()));
        }
        if r.label < 0 || r.label as usize > classes {
            return invalid(format!("record {i} has label {} outside 0..={classes}", r.label));
        }
        if (r.label as usize) < classes {
            seen[r.label as usize] = true;
        }
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return invalid(format!("class {c} has no training records"));
    }
    Ok(d)
}

impl<'a> Trainer<'a> {
    /// Builds the initial state from `cfg.seed`. Glow's ActNorm layers are
    /// initialized on the first `batch_size` inlier records.
    pub fn new(cfg: TrainConfig, data: &'a [FeatureRecord], classes: usize) -> Result<Self> {
        cfg.validate()?;
        let d = check_data(data, classes)?;
        let mut rng = SeededRng::new(cfg.seed);
        let mut flow = init_flow(cfg.flow_variant, d, cfg.arch, &mut rng)?;
        let heads = HeadBundle::new(d, classes, cfg.temperature, &mut rng);
        if flow.needs_initialization() {
            let init: Vec<Vec<f64>> =
                data.iter().filter(|r| r.is_inlier(classes)).take(cfg.batch_size).map(|r| r.feature.clone()).collect();
            flow.initialize(&init)?;
        }
        let optimizer = OptimizerState::new(cfg.optimizer, flow.num_params(), heads.num_params());
        let state = TrainState { iteration: 0, flow, heads, optimizer, rng, history: Vec::new(), frozen_delta: None };
        Self::resume(cfg, data, classes, state)
    }

    /// Continues from a saved state.
    pub fn resume(cfg: TrainConfig, data: &'a [FeatureRecord], classes: usize, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        let d = check_data(data, classes)?;
        if state.flow.dim() != d || state.heads.head.dim() != d || state.heads.classes() != classes {
            return invalid("state does not match the data dimension or class count");
        }
        if state.iteration > cfg.total_iters {
            return invalid("state is past total_iters");
        }
        if state.optimizer.kind != cfg.optimizer {
            return invalid("state was trained with a different optimizer");
        }
        let gaussians = match cfg.source {
            OutlierSource::Flow => None,
            OutlierSource::Vos | OutlierSource::VosPlus => Some(fit_class_gaussians(data, classes, cfg.vos_ridge)?),
        };
        Ok(Self { cfg, data, classes, gaussians, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.cfg.total_iters
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_observed(&mut NoObserver)
    }

    pub fn run_observed(&mut self, observer: &mut dyn StepObserver) -> Result<()> {
        while !self.is_done() {
            self.step(observer)?;
        }
        Ok(())
    }

    /// Runs until `iteration == until` (or the end of training).
    pub fn run_until(&mut self, until: usize, observer: &mut dyn StepObserver) -> Result<()> {
        while !self.is_done() && self.state.iteration < until {
            self.step(observer)?;
        }
        Ok(())
    }

    fn synthesize(&mut self, batch: &[FeatureRecord]) -> Result<OutlierBatch> {
        let st = &mut self.state;
        match self.cfg.source {
            OutlierSource::Flow => match self.cfg.synthesis.mode {
                SynthesisMode::Rejection => rejection_sample(&st.flow, &self.cfg.synthesis, &mut st.rng),
                SynthesisMode::Projection => {
                    let delta = match (self.cfg.delta_mode, st.frozen_delta) {
                        (DeltaMode::Frozen, Some(d)) => d,
                        _ => {
                            let inliers: Vec<Vec<f64>> =
                                batch.iter().filter(|r| r.is_inlier(self.classes)).map(|r| r.feature.clone()).collect();
                            let d = estimate_delta(&st.flow, &inliers)?;
                            if self.cfg.delta_mode == DeltaMode::Frozen {
                                st.frozen_delta = Some(d);
                            }
                            d
                        }
                    };
                    projection_sample(&st.flow, &self.cfg.synthesis, delta, &mut st.rng)
                }
            },
            OutlierSource::Vos | OutlierSource::VosPlus => {
                let g = self.gaussians.as_ref().expect("fit in resume");
                let class = st.rng.below(self.classes);
                let s = self.cfg.synthesis;
                let b = vos_sample(g, class, s.k.max(s.s), s.s, &mut st.rng)?;
                if self.cfg.source == OutlierSource::VosPlus {
                    vos_plus_filter(g, b)
                } else {
                    Ok(b)
                }
            }
        }
    }

    /// One iteration: sample a batch (with replacement), synthesize outliers
    /// if past warmup, and take an optimizer step on the joint objective.
    pub fn step(&mut self, observer: &mut dyn StepObserver) -> Result<StepReport> {
        if self.is_done() {
            return invalid("training is already complete");
        }
        let iter = self.state.iteration + 1;
        let n = self.data.len();
        let batch: Vec<FeatureRecord> = (0..self.cfg.batch_size).map(|_| self.data[self.state.rng.below(n)].clone()).collect();
        let warmup = iter <= self.cfg.warmup_iters;

        let mut synthesis_calls = 0;
        let outliers = if warmup {
            None
        } else {
            synthesis_calls += 1;
            Some(self.synthesize(&batch)?)
        };

        let st = &mut self.state;
        let inputs = outliers
            .as_ref()
            .filter(|b| !b.is_empty())
            .map(|b| OutlierInputs { features: &b.features, latents: b.latents.as_deref() });
        let g = grad_params_heads(&st.heads, &st.flow, &batch, inputs, &self.cfg.weights)?;
        for (component, v) in [("det", g.det), ("nll", g.nll), ("reg", g.reg), ("total", g.total)] {
            if !v.is_finite() {
                return Err(FfsError::TrainingDiverged { iter, component });
            }
        }
        let flow_grad: Vec<f64> = g.flow_nll.iter().zip(&g.flow_reg).map(|(n, r)| self.cfg.flow_nll_weight * n + r).collect();
        if flow_grad.iter().any(|v| !v.is_finite()) {
            return Err(FfsError::TrainingDiverged { iter, component: "flow gradient" });
        }
        if g.heads.iter().any(|v| !v.is_finite()) {
            return Err(FfsError::TrainingDiverged { iter, component: "head gradient" });
        }

        st.optimizer.t += 1;
        let t = st.optimizer.t;
        let kind = st.optimizer.kind;
        let mut flow_params = st.flow.params();
        OptimizerState::update(kind, t, self.cfg.lr_flow, &mut flow_params, &flow_grad, &mut st.optimizer.flow);
        let mut head_params = st.heads.params();
        OptimizerState::update(kind, t, self.cfg.lr_heads, &mut head_params, &g.heads, &mut st.optimizer.heads);
        if flow_params.iter().any(|v| !v.is_finite()) {
            return Err(FfsError::TrainingDiverged { iter, component: "flow parameters" });
        }
        if head_params.iter().any(|v| !v.is_finite()) {
            return Err(FfsError::TrainingDiverged { iter, component: "head parameters" });
        }
        st.flow.set_params(&flow_params)?;
        st.heads.set_params(&head_params)?;
        st.iteration = iter;

        let losses = LossRecord { iter, det: g.det, nll: g.nll, reg: g.reg, total: g.total };
        st.history.push(losses);
        let phi = st.heads.phi_range();
        let outlier_log_probs = match (&outliers, self.cfg.source) {
            (Some(b), OutlierSource::Flow) => b.log_liks.clone(),
            (Some(b), _) => b.features.iter().map(|x| st.flow.log_prob(x)).collect::<Result<_>>()?,
            (None, _) => Vec::new(),
        };
        let report = StepReport {
            iteration: iter,
            warmup,
            synthesis_calls,
            losses,
            psi_grad: [g.heads[phi.start], g.heads[phi.start + 1]],
            inlier_log_probs: g.inlier_log_probs,
            outlier_log_probs,
            projection_capped: outliers.as_ref().is_some_and(|b| b.provenance.hit_cap()),
        };
        observer.on_step(&report);
        Ok(report)
    }
}

/// Trains from scratch to completion.
pub fn train(data: &[FeatureRecord], classes: usize, cfg: TrainConfig) -> Result<TrainState> {
    let mut t = Trainer::new(cfg, data, classes)?;
    t.run()?;
    Ok(t.into_state())
}

/// Checkpoint layout (little-endian):
///
/// ```text
/// "FFSC" | version u32 | iteration u64
/// flow block (the complete flow checkpoint format, starting with "FFSF")
/// K u32 | d u32 | T f64 | head W, b, r, u, v as f64
/// optimizer kind u8 | t u64 | flow m, v | head m, v
/// rng seed u64 | stream u64 | word position u128
/// frozen-delta flag u8 | delta f64
/// history count u64 | per record: iter u64, det, nll, reg, total f64
/// ```
pub fn checkpoint_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u64(&mut out, state.iteration as u64);
    write_flow(&state.flow, &mut out)?;
    put_u32(&mut out, state.heads.classes() as u32);
    put_u32(&mut out, state.heads.head.dim() as u32);
    put_f64s(&mut out, &[state.heads.energy.temperature]);
    put_f64s(&mut out, &state.heads.params());
    out.push(match state.optimizer.kind {
        OptimizerKind::Sgd => 0,
        OptimizerKind::Adam => 1,
    });
    put_u64(&mut out, state.optimizer.t);
    for m in [&state.optimizer.flow, &state.optimizer.heads] {
        put_f64s(&mut out, &m.m);
        put_f64s(&mut out, &m.v);
    }
    let rs = state.rng.state();
    put_u64(&mut out, rs.seed);
    put_u64(&mut out, rs.stream);
    put_u128(&mut out, rs.word_pos);
    out.push(u8::from(state.frozen_delta.is_some()));
    put_f64s(&mut out, &[state.frozen_delta.unwrap_or(0.0)]);
    put_u64(&mut out, state.history.len() as u64);
    for r in &state.history {
        put_u64(&mut out, r.iter as u64);
        put_f64s(&mut out, &[r.det, r.nll, r.reg, r.total]);
    }
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FfsError::Format { offset: 4, msg: format!("unsupported checkpoint version {version}") });
    }
    let iteration = r.u64()? as usize;
    let flow = read_flow_from(&mut r)?;

    let at = r.offset();
    let classes = r.u32()? as usize;
    let d = r.u32()? as usize;
    if classes == 0 || d != flow.dim() {
        return Err(FfsError::Format { offset: at, msg: format!("head shape K = {classes}, d = {d} does not match the flow") });
    }
    let temperature = r.f64()?;
    if !(temperature > 0.0) {
        return r.error("temperature must be positive");
    }
    let mut heads = HeadBundle::new(d, classes, temperature, &mut SeededRng::new(0));
    let at = r.offset();
    let hp = r.f64s(heads.num_params())?;
    if hp.iter().any(|v| !v.is_finite()) {
        return Err(FfsError::Format { offset: at, msg: "non-finite head parameter".into() });
    }
    heads.set_params(&hp)?;

    let at = r.offset();
    let kind = match r.u8()? {
        0 => OptimizerKind::Sgd,
        1 => OptimizerKind::Adam,
        other => return Err(FfsError::Format { offset: at, msg: format!("unknown optimizer tag {other}") }),
    };
    let t = r.u64()?;
    let (nf, nh) = (flow.num_params(), heads.num_params());
    let flow_m = Moments { m: r.f64s(nf)?, v: r.f64s(nf)? };
    let head_m = Moments { m: r.f64s(nh)?, v: r.f64s(nh)? };
    let optimizer = OptimizerState { kind, t, flow: flow_m, heads: head_m };

    let rng = SeededRng::from_state(RngState { seed: r.u64()?, stream: r.u64()?, word_pos: r.u128()? });
    let at = r.offset();
    let frozen_delta = match (r.u8()?, r.f64()?) {
        (0, _) => None,
        (1, v) => Some(v),
        (flag, _) => return Err(FfsError::Format { offset: at, msg: format!("bad delta flag {flag}") }),
    };
    let count = r.u64()?;
    let mut history = Vec::new();
    for _ in 0..count {
        let iter = r.u64()? as usize;
        let v = r.f64s(4)?;
        history.push(LossRecord { iter, det: v[0], nll: v[1], reg: v[2], total: v[3] });
    }
    r.finish()?;
    Ok(TrainState { iteration, flow, heads, optimizer, rng, history, frozen_delta })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    parse_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{generate, DatasetSpec};

    fn small_data() -> (Vec<FeatureRecord>, usize) {
        let spec = DatasetSpec { n_per_class: 60, n_background: 30, n_ood: 10, ..DatasetSpec::default() };
        (generate(&spec).unwrap().train, spec.classes)
    }

    fn small_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::with_total(30);
        cfg.batch_size = 16;
        cfg.arch = FlowArch { coupling_layers: 2, hidden_layers: 1, hidden_width: 8 };
        cfg.synthesis.k = 20;
        cfg
    }

    #[test]
    fn warmup_default_is_sixty_percent() {
        assert_eq!(TrainConfig::with_total(2000).warmup_iters, 1200);
        assert_eq!(default_warmup(7), 4);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.warmup_iters = 31;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.lr_flow = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_class_is_rejected() {
        let (data, k) = small_data();
        let without: Vec<_> = data.into_iter().filter(|r| r.label != 1).collect();
        let err = Trainer::new(small_cfg(), &without, k).err().unwrap().to_string();
        assert!(err.contains("class 1"), "{err}");
    }

    #[test]
    fn full_warmup_leaves_phi_untouched() {
        let (data, k) = small_data();
        let mut cfg = small_cfg();
        cfg.warmup_iters = cfg.total_iters;
        let mut calls = 0;
        let mut t = Trainer::new(cfg, &data, k).unwrap();
        let phi0 = t.state().heads.phi;
        t.run_observed(&mut |r: &StepReport| calls += r.synthesis_calls).unwrap();
        assert_eq!(calls, 0);
        assert_eq!(t.state().heads.phi, phi0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (data, k) = small_data();
        let mut cfg = small_cfg();
        cfg.delta_mode = DeltaMode::Frozen;
        cfg.synthesis.mode = SynthesisMode::Projection;
        let state = train(&data, k, cfg).unwrap();
        let bytes = checkpoint_bytes(&state).unwrap();
        let back = parse_checkpoint(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(FfsError::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(parse_checkpoint(&bad), Err(FfsError::Format { offset: 4, .. })));
        assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 3]), Err(FfsError::Format { .. })));
    }

    #[test]
    fn history_csv_has_one_row_per_iteration() {
        let (data, k) = small_data();
        let state = train(&data, k, small_cfg()).unwrap();
        let csv = history_csv(&state.history);
        assert_eq!(csv.lines().count(), 31);
        assert!(csv.starts_with("iter,det,nll,reg,total\n1,"));
    }
}
