//! Outlier synthesis: rejection and projection sampling from a flow, and
//! the class-conditional Gaussian baseline with its cross-class filter.

use std::str::FromStr;

use crate::datakit::FeatureRecord;
use crate::error::{invalid, FfsError, Result};
use crate::flow::FlowModel;
use crate::numerics::{Mat64, SeededRng, LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthesisMode {
    Rejection,
    Projection,
}

impl FromStr for SynthesisMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "rejection" => Ok(SynthesisMode::Rejection),
            "projection" => Ok(SynthesisMode::Projection),
            _ => Err(format!("unknown synthesis mode '{s}' (expected rejection or projection)")),
        }
    }
}

impl SynthesisMode {
    pub fn name(self) -> &'static str {
        match self {
            SynthesisMode::Rejection => "rejection",
            SynthesisMode::Projection => "projection",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisConfig {
    pub mode: SynthesisMode,
    /// Candidates generated per call (rejection).
    pub k: usize,
    /// Outliers emitted per call.
    pub s: usize,
    pub tau: f64,
    pub max_steps: usize,
    /// Projection noise is `noise_scale·√(2τ)·ξ`; zero gives the plain update.
    pub noise_scale: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { mode: SynthesisMode::Rejection, k: 200, s: 1, tau: 0.5, max_steps: 500, noise_scale: 0.0 }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return invalid("s must be at least 1");
        }
        match self.mode {
            SynthesisMode::Rejection if self.s > self.k => invalid(format!("s = {} exceeds k = {}", self.s, self.k)),
            SynthesisMode::Projection if !(self.tau > 0.0) || !self.tau.is_finite() => invalid("tau must be positive"),
            SynthesisMode::Projection if self.max_steps == 0 => invalid("max_steps must be at least 1"),
            _ if !(self.noise_scale >= 0.0) => invalid("noise_scale must be non-negative"),
            _ => Ok(()),
        }
    }
}

/// How an [`OutlierBatch`] was produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Rejection { k: usize, s: usize },
    Projection { s: usize, tau: f64, delta: f64, steps: usize, hit_cap: bool },
    Vos { class: usize, k: usize, s: usize },
    VosPlus { class: usize, k: usize, s: usize, rejected: usize },
}

impl Provenance {
    /// True when projection stopped at `max_steps` without reaching δ.
    pub fn hit_cap(&self) -> bool {
        matches!(self, Provenance::Projection { hit_cap: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierBatch {
    pub features: Vec<Vec<f64>>,
    /// Log-likelihood of each feature under the generating density: the flow
    /// for rejection and projection, the generator class's Gaussian for VOS.
    pub log_liks: Vec<f64>,
    /// Latent draws the features were decoded from. For projection these are
    /// the starting latents; the features are `f⁻¹(latent)` plus the
    /// accumulated projection displacement.
    pub latents: Option<Vec<Vec<f64>>>,
    pub provenance: Provenance,
}

impl OutlierBatch {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn mean_log_lik(&self) -> f64 {
        self.log_liks.iter().sum::<f64>() / self.log_liks.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Generation order, used to break ties.
    pub index: usize,
    pub latent: Vec<f64>,
    pub feature: Vec<f64>,
    pub log_lik: f64,
}

/// Draws `k` latents and decodes them with `f⁻¹`.
pub fn generate_candidates(model: &FlowModel, k: usize, rng: &mut SeededRng) -> Result<Vec<Candidate>> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    let d = model.dim();
    (0..k)
        .map(|index| {
            let latent: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let feature = model.inverse(&latent).map_err(|e| match e {
                FfsError::NumericOverflow { layer } => FfsError::SampleOverflow { draw: index, layer },
                other => other,
            })?;
            let log_lik = model.log_prob(&feature)?;
            Ok(Candidate { index, latent, feature, log_lik })
        })
        .collect()
}

/// The `s` candidates with the smallest log-likelihood, ascending; ties go to
/// the earlier index.
pub fn select_lowest(mut candidates: Vec<Candidate>, s: usize) -> Result<Vec<Candidate>> {
    if s > candidates.len() {
        return invalid(format!("s = {s} exceeds k = {}", candidates.len()));
    }
    candidates.sort_by(|a, b| a.log_lik.total_cmp(&b.log_lik).then(a.index.cmp(&b.index)));
    candidates.truncate(s);
    Ok(candidates)
}

pub fn rejection_sample(model: &FlowModel, cfg: &SynthesisConfig, rng: &mut SeededRng) -> Result<OutlierBatch> {
    if cfg.mode != SynthesisMode::Rejection {
        return invalid("rejection_sample needs mode = rejection");
    }
    cfg.validate()?;
    let chosen = select_lowest(generate_candidates(model, cfg.k, rng)?, cfg.s)?;
    let mut batch = OutlierBatch {
        features: Vec::with_capacity(cfg.s),
        log_liks: Vec::with_capacity(cfg.s),
        latents: Some(Vec::with_capacity(cfg.s)),
        provenance: Provenance::Rejection { k: cfg.k, s: cfg.s },
    };
    for c in chosen {
        batch.features.push(c.feature);
        batch.log_liks.push(c.log_lik);
        batch.latents.as_mut().expect("set above").push(c.latent);
    }
    Ok(batch)
}

/// Log-likelihood of the least likely inlier.
pub fn estimate_delta(model: &FlowModel, inliers: &[Vec<f64>]) -> Result<f64> {
    if inliers.is_empty() {
        return invalid("no inliers to estimate delta from");
    }
    let mut delta = f64::INFINITY;
    for x in inliers {
        delta = delta.min(model.log_prob(x)?);
    }
    Ok(delta)
}

/// One projection update `o ← o − τ·∇log p(o)` (plus optional noise) applied
/// to every point; returns the log-likelihoods of the points before the update.
pub fn project_step(
    model: &FlowModel,
    points: &mut [Vec<f64>],
    tau: f64,
    noise_scale: f64,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let mut scratch = model.zeros_like();
    let noise = noise_scale * (2.0 * tau).sqrt();
    let mut log_liks = Vec::with_capacity(points.len());
    for p in points.iter_mut() {
        let (logp, g) = model.log_prob_backward(p, 1.0, &mut scratch)?;
        log_liks.push(logp);
        for (v, gi) in p.iter_mut().zip(g) {
            *v -= tau * gi;
            if noise > 0.0 {
                *v += noise * rng.normal();
            }
        }
    }
    Ok(log_liks)
}

fn log_liks_of(model: &FlowModel, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    points.iter().map(|p| model.log_prob(p)).collect()
}

/// Runs the projection from given starting features. Stops as soon as the
/// mean log-likelihood is at most `delta`, or after `cfg.max_steps` updates.
pub fn project_from(
    model: &FlowModel,
    cfg: &SynthesisConfig,
    delta: f64,
    initial: Vec<Vec<f64>>,
    rng: &mut SeededRng,
) -> Result<OutlierBatch> {
    if initial.is_empty() {
        return invalid("no starting points");
    }
    if !delta.is_finite() {
        return invalid("delta must be finite");
    }
    let mut points = initial;
    let mut log_liks = log_liks_of(model, &points)?;
    let mut steps = 0;
    let mean = |l: &[f64]| l.iter().sum::<f64>() / l.len() as f64;
    while mean(&log_liks) > delta && steps < cfg.max_steps {
        project_step(model, &mut points, cfg.tau, cfg.noise_scale, rng)?;
        steps += 1;
        log_liks = log_liks_of(model, &points)?;
    }
    let hit_cap = mean(&log_liks) > delta;
    Ok(OutlierBatch {
        features: points,
        log_liks,
        latents: None,
        provenance: Provenance::Projection { s: cfg.s, tau: cfg.tau, delta, steps, hit_cap },
    })
}

/// Draws `s` flow samples and projects them outward until their mean
/// log-likelihood reaches `delta`.
pub fn projection_sample(model: &FlowModel, cfg: &SynthesisConfig, delta: f64, rng: &mut SeededRng) -> Result<OutlierBatch> {
    if cfg.mode != SynthesisMode::Projection {
        return invalid("projection_sample needs mode = projection");
    }
    cfg.validate()?;
    let start = generate_candidates(model, cfg.s, rng)?;
    let latents: Vec<Vec<f64>> = start.iter().map(|c| c.latent.clone()).collect();
    let mut batch = project_from(model, cfg, delta, start.into_iter().map(|c| c.feature).collect(), rng)?;
    batch.latents = Some(latents);
    Ok(batch)
}

/// Per-class means with a shared, ridged covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussians {
    pub means: Vec<Vec<f64>>,
    pub covariance: Mat64,
    pub counts: Vec<usize>,
    pub ridge: f64,
    chol: Mat64,
    log_det: f64,
}

pub const DEFAULT_RIDGE: f64 = 1e-3;

/// Fits class means and the pooled within-class covariance
/// `Σ = (1/N)·Σ_c Σ_i (x_i − μ_c)(x_i − μ_c)ᵀ + ε·I` over records with labels
/// in `0..classes`.
pub fn fit_class_gaussians(records: &[FeatureRecord], classes: usize, ridge: f64) -> Result<ClassGaussians> {
    if classes == 0 {
        return invalid("need at least one class");
    }
    if !(ridge >= 0.0) {
        return invalid("ridge must be non-negative");
    }
    let Some(first) = records.iter().find(|r| r.is_inlier(classes)) else {
        return invalid("no inlier records");
    };
    let d = first.feature.len();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for r in records.iter().filter(|r| r.is_inlier(classes)) {
        if r.feature.len() != d {
            return invalid("inconsistent feature dimension");
        }
        let c = r.label as usize;
        counts[c] += 1;
        sums[c].iter_mut().zip(&r.feature).for_each(|(s, v)| *s += v);
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return invalid(format!("class {c} has {} samples, need at least 2", counts[c]));
    }
    let means: Vec<Vec<f64>> = sums.iter().zip(&counts).map(|(s, &n)| s.iter().map(|v| v / n as f64).collect()).collect();
    let mut covariance = Mat64::zeros(d, d);
    let total: usize = counts.iter().sum();
    for r in records.iter().filter(|r| r.is_inlier(classes)) {
        let mu = &means[r.label as usize];
        let c: Vec<f64> = r.feature.iter().zip(mu).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in 0..d {
                covariance[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            covariance[(i, j)] /= total as f64;
        }
        covariance[(i, i)] += ridge;
    }
    let chol = covariance.cholesky()?;
    let log_det = 2.0 * (0..d).map(|i| chol[(i, i)].ln()).sum::<f64>();
    Ok(ClassGaussians { means, covariance, counts, ridge, chol, log_det })
}

impl ClassGaussians {
    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.covariance.rows()
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes() {
            return invalid(format!("class {class} outside 0..{}", self.classes()));
        }
        Ok(())
    }

    pub fn log_density(&self, class: usize, x: &[f64]) -> Result<f64> {
        self.check_class(class)?;
        if x.len() != self.dim() {
            return invalid("dimension mismatch");
        }
        let centered: Vec<f64> = x.iter().zip(&self.means[class]).map(|(a, b)| a - b).collect();
        let w = self.chol.solve_lower(&centered);
        let maha: f64 = w.iter().map(|v| v * v).sum();
        Ok(-0.5 * (maha + self.log_det + self.dim() as f64 * LN_2PI))
    }

    pub fn sample(&self, class: usize, rng: &mut SeededRng) -> Result<Vec<f64>> {
        self.check_class(class)?;
        let d = self.dim();
        let xi: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        Ok((0..d)
            .map(|i| self.means[class][i] + (0..=i).map(|k| self.chol[(i, k)] * xi[k]).sum::<f64>())
            .collect())
    }
}

/// Draws `k` samples from class `class` and keeps the `s` least likely.
pub fn vos_sample(g: &ClassGaussians, class: usize, k: usize, s: usize, rng: &mut SeededRng) -> Result<OutlierBatch> {
    g.check_class(class)?;
    if k == 0 || s == 0 {
        return invalid("k and s must be at least 1");
    }
    if s > k {
        return invalid(format!("s = {s} exceeds k = {k}"));
    }
    let mut candidates = Vec::with_capacity(k);
    for index in 0..k {
        let feature = g.sample(class, rng)?;
        let log_lik = g.log_density(class, &feature)?;
        candidates.push(Candidate { index, latent: Vec::new(), feature, log_lik });
    }
    let chosen = select_lowest(candidates, s)?;
    Ok(OutlierBatch {
        log_liks: chosen.iter().map(|c| c.log_lik).collect(),
        features: chosen.into_iter().map(|c| c.feature).collect(),
        latents: None,
        provenance: Provenance::Vos { class, k, s },
    })
}

/// Keeps a sample only if no other class gives it a higher log-density than
/// its generator class.
pub fn vos_plus_filter(g: &ClassGaussians, batch: OutlierBatch) -> Result<OutlierBatch> {
    if g.classes() < 2 {
        return invalid("the cross-class filter needs at least two classes");
    }
    let Provenance::Vos { class, k, s } = batch.provenance else {
        return invalid("the cross-class filter needs a batch from vos_sample");
    };
    let mut out = OutlierBatch {
        features: Vec::new(),
        log_liks: Vec::new(),
        latents: None,
        provenance: Provenance::VosPlus { class, k, s, rejected: 0 },
    };
    let mut rejected = 0;
    for (x, ll) in batch.features.into_iter().zip(batch.log_liks) {
        let own = g.log_density(class, &x)?;
        let mut keep = true;
        for other in (0..g.classes()).filter(|&c| c != class) {
            if g.log_density(other, &x)? > own {
                keep = false;
                break;
            }
        }
        if keep {
            out.features.push(x);
            out.log_liks.push(ll);
        } else {
            rejected += 1;
        }
    }
    out.provenance = Provenance::VosPlus { class, k, s, rejected };
    Ok(out)
}
