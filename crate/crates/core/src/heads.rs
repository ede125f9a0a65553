//! Classification head, energy scoring, the binary energy classifier Φ and
//! the loss assemblies built on them.
//!
//! The head maps a feature to `K+1` logits (index `K` is background). The
//! energy `E = -T·log Σ_{k<K} w_k·exp(h_k/T)` uses the `K` inlier logits only,
//! with `w = exp(r)`. Φ is logistic regression on the scalar energy and reads
//! as the probability that the input is an inlier.

use crate::datakit::FeatureRecord;
use crate::error::{invalid, FfsError, Result};
use crate::flow::FlowModel;
use crate::numerics::SeededRng;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    dim: usize,
    classes: usize,
    /// Row-major `(K+1) x d`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self { dim, classes, weight: vec![0.0; (classes + 1) * dim], bias: vec![0.0; classes + 1] }
    }

    /// Weights uniform in `±1/√d`, zero bias.
    pub fn random(dim: usize, classes: usize, rng: &mut SeededRng) -> Self {
        let mut head = Self::zeros(dim, classes);
        let bound = 1.0 / (dim as f64).sqrt();
        head.weight.iter_mut().for_each(|w| *w = bound * (2.0 * rng.uniform() - 1.0));
        head
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of inlier classes `K`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return invalid(format!("feature has dimension {}, head expects {}", x.len(), self.dim));
        }
        Ok(self.logits_unchecked(x))
    }

    fn logits_unchecked(&self, x: &[f64]) -> Vec<f64> {
        (0..=self.classes)
            .map(|c| {
                let row = &self.weight[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates `∂L/∂(W, b)` and returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], g_logits: &[f64], grad: &mut ClassifierHead) -> Vec<f64> {
        let mut gx = vec![0.0; self.dim];
        for (c, &g) in g_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[c] += g;
            for k in 0..self.dim {
                grad.weight[c * self.dim + k] += g * x[k];
                gx[k] += g * self.weight[c * self.dim + k];
            }
        }
        gx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyParams {
    /// `r`, with class weights `w = exp(r)`.
    pub raw_weights: Vec<f64>,
    pub temperature: f64,
}

impl EnergyParams {
    pub fn uniform(classes: usize, temperature: f64) -> Self {
        Self { raw_weights: vec![0.0; classes], temperature }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.raw_weights.iter().map(|r| r.exp()).collect()
    }
}

/// Softmax of `r_k + h_k/T` over the inlier logits, and its log-sum-exp.
fn energy_softmax(logits: &[f64], params: &EnergyParams) -> (Vec<f64>, f64) {
    let t = params.temperature;
    let a: Vec<f64> = params.raw_weights.iter().zip(logits).map(|(r, h)| r + h / t).collect();
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pi: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= sum);
    (pi, max + sum.ln())
}

pub fn energy_score(logits: &[f64], params: &EnergyParams) -> Result<f64> {
    let k = params.raw_weights.len();
    if k == 0 {
        return invalid("energy needs at least one inlier class");
    }
    if !(params.temperature > 0.0) {
        return invalid("temperature must be positive");
    }
    if logits.len() < k {
        return invalid(format!("expected at least {k} logits, got {}", logits.len()));
    }
    if logits[..k].iter().any(|v| !v.is_finite()) {
        return Err(FfsError::NonFinite("computing an energy score".into()));
    }
    let (_, lse) = energy_softmax(&logits[..k], params);
    Ok(-params.temperature * lse)
}

/// Returns `(∂E/∂logits, ∂E/∂r)`, scaled by `g_e`. The background logit
/// gets zero gradient.
fn energy_backward(logits: &[f64], params: &EnergyParams, g_e: f64) -> (Vec<f64>, Vec<f64>) {
    let k = params.raw_weights.len();
    let (pi, _) = energy_softmax(&logits[..k], params);
    let mut g_logits = vec![0.0; logits.len()];
    let mut g_raw = vec![0.0; k];
    for c in 0..k {
        g_logits[c] = -g_e * pi[c];
        g_raw[c] = -g_e * params.temperature * pi[c];
    }
    (g_logits, g_raw)
}

/// Φ(e) = σ(u·e + v).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryClassifier {
    pub slope: f64,
    pub intercept: f64,
}

impl Default for BinaryClassifier {
    /// `u = -1`: low energy maps to a high inlier probability from the start.
    fn default() -> Self {
        Self { slope: -1.0, intercept: 0.0 }
    }
}

impl BinaryClassifier {
    pub fn prob(&self, energy: f64) -> f64 {
        sigmoid(self.slope * energy + self.intercept)
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegVariant {
    Bce,
    Ce,
    Jsd,
    Hinge,
}

impl std::str::FromStr for RegVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bce" => Ok(RegVariant::Bce),
            "ce" => Ok(RegVariant::Ce),
            "jsd" => Ok(RegVariant::Jsd),
            "hinge" => Ok(RegVariant::Hinge),
            _ => Err(format!("unknown regularization variant '{s}' (expected bce, ce, jsd or hinge)")),
        }
    }
}

impl RegVariant {
    pub fn name(self) -> &'static str {
        match self {
            RegVariant::Bce => "bce",
            RegVariant::Ce => "ce",
            RegVariant::Jsd => "jsd",
            RegVariant::Hinge => "hinge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub reg: RegVariant,
    pub margin_in: f64,
    pub margin_out: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 1e-4, reg: RegVariant::Bce, margin_in: -25.0, margin_out: -5.0 }
    }
}

/// `-log(clamp(p))` and its derivative with respect to `p` (zero when the
/// clamp is active).
fn neg_log_clamped(p: f64) -> (f64, f64) {
    if p < PROB_CLAMP {
        (-PROB_CLAMP.ln(), 0.0)
    } else if p > 1.0 - PROB_CLAMP {
        (-(1.0 - PROB_CLAMP).ln(), 0.0)
    } else {
        (-p.ln(), -1.0 / p)
    }
}

/// BCE regularizer terms: the inlier and outlier halves are averaged over
/// their own counts and summed.
struct BceTerms {
    loss: f64,
    g_id: Vec<f64>,
    g_ood: Vec<f64>,
    g_phi: [f64; 2],
}

fn bce_terms(id_energies: &[f64], ood_energies: &[f64], phi: &BinaryClassifier) -> Result<BceTerms> {
    if id_energies.is_empty() || ood_energies.is_empty() {
        return invalid("regularization needs non-empty inlier and outlier energy lists");
    }
    let mut loss = 0.0;
    let mut g_phi = [0.0; 2];
    let n_id = id_energies.len() as f64;
    let g_id = id_energies
        .iter()
        .map(|&e| {
            let p = phi.prob(e);
            let (l, dl_dp) = neg_log_clamped(p);
            loss += l / n_id;
            let g_a = dl_dp * p * (1.0 - p) / n_id;
            g_phi[0] += g_a * e;
            g_phi[1] += g_a;
            g_a * phi.slope
        })
        .collect();
    let n_ood = ood_energies.len() as f64;
    let g_ood = ood_energies
        .iter()
        .map(|&e| {
            let p = phi.prob(e);
            let (l, dl_dq) = neg_log_clamped(1.0 - p);
            loss += l / n_ood;
            let g_a = -dl_dq * p * (1.0 - p) / n_ood;
            g_phi[0] += g_a * e;
            g_phi[1] += g_a;
            g_a * phi.slope
        })
        .collect();
    Ok(BceTerms { loss, g_id, g_ood, g_phi })
}

/// Binary cross-entropy regularizer `-(mean log p_l + mean log(1 - p_o))`.
pub fn reg_loss_bce(id_energies: &[f64], ood_energies: &[f64], phi: &BinaryClassifier) -> Result<f64> {
    Ok(bce_terms(id_energies, ood_energies, phi)?.loss)
}

/// Inputs for the alternative regularizers.
#[derive(Debug, Clone, Copy)]
pub struct RegInputs<'a> {
    pub id_energies: &'a [f64],
    pub ood_energies: &'a [f64],
    /// `K+1` logits per synthesized outlier.
    pub ood_logits: &'a [Vec<f64>],
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Cross-entropy of one outlier's logits against the background class;
/// returns the loss and `∂/∂logits`.
fn ce_background(logits: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let bg = logits.len() - 1;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut g = p;
    g[bg] -= 1.0;
    (lse - logits[bg], g)
}

/// Jensen–Shannon divergence between softmax(logits) and the uniform
/// distribution; returns the value and `∂/∂logits`.
fn jsd_uniform(logits: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let n = p.len() as f64;
    let u = 1.0 / n;
    let mut value = 0.0;
    let mut g_p = Vec::with_capacity(p.len());
    for &pi in &p {
        let m = 0.5 * (pi + u);
        if pi > 0.0 {
            value += 0.5 * pi * (pi / m).ln();
        }
        value += 0.5 * u * (u / m).ln();
        g_p.push(if pi > 0.0 { 0.5 * (pi / m).ln() } else { 0.0 });
    }
    let dot: f64 = p.iter().zip(&g_p).map(|(a, b)| a * b).sum();
    let g = p.iter().zip(&g_p).map(|(pi, gi)| pi * (gi - dot)).collect();
    (value, g)
}

pub fn reg_loss_variant(
    variant: RegVariant,
    inputs: RegInputs<'_>,
    phi: &BinaryClassifier,
    margin_in: f64,
    margin_out: f64,
) -> Result<f64> {
    match variant {
        RegVariant::Bce => reg_loss_bce(inputs.id_energies, inputs.ood_energies, phi),
        RegVariant::Ce | RegVariant::Jsd => {
            if inputs.ood_logits.is_empty() {
                return invalid("no outlier logits");
            }
            let f = if variant == RegVariant::Ce { ce_background } else { jsd_uniform };
            Ok(inputs.ood_logits.iter().map(|l| f(l).0).sum::<f64>() / inputs.ood_logits.len() as f64)
        }
        RegVariant::Hinge => {
            if inputs.id_energies.is_empty() || inputs.ood_energies.is_empty() {
                return invalid("hinge needs non-empty inlier and outlier energy lists");
            }
            let id = inputs.id_energies.iter().map(|e| (e - margin_in).max(0.0)).sum::<f64>() / inputs.id_energies.len() as f64;
            let ood = inputs.ood_energies.iter().map(|e| (margin_out - e).max(0.0)).sum::<f64>() / inputs.ood_energies.len() as f64;
            Ok(id + ood)
        }
    }
}

/// `L_det + β·L_nll + α·L_reg`.
pub fn total_loss(det_loss: f64, nll_loss: f64, reg_loss: f64, weights: &LossWeights) -> f64 {
    det_loss + weights.beta * nll_loss + weights.alpha * reg_loss
}

fn check_label(head: &ClassifierHead, r: &FeatureRecord) -> Result<usize> {
    if r.label < 0 || r.label as usize > head.classes {
        return invalid(format!("label {} outside 0..={}", r.label, head.classes));
    }
    Ok(r.label as usize)
}

/// Mean softmax cross-entropy over all `K+1` classes.
pub fn det_loss_surrogate(head: &ClassifierHead, batch: &[FeatureRecord]) -> Result<f64> {
    let mut scratch = ClassifierHead::zeros(head.dim, head.classes);
    det_loss_backward(head, batch, 1.0, &mut scratch)
}

/// Cross-entropy loss; accumulates `scale · ∂L/∂(W, b)` into `grad`.
pub fn det_loss_backward(head: &ClassifierHead, batch: &[FeatureRecord], scale: f64, grad: &mut ClassifierHead) -> Result<f64> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for r in batch {
        let label = check_label(head, r)?;
        let logits = head.class_logits(&r.feature)?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += (lse - logits[label]) / n;
        let mut g = softmax(&logits);
        g[label] -= 1.0;
        g.iter_mut().for_each(|v| *v *= scale / n);
        head.backward(&r.feature, &g, grad);
    }
    Ok(loss)
}

/// Everything trained besides the flow: head θ, energy weights `r`, and Φ's ψ.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBundle {
    pub head: ClassifierHead,
    pub energy: EnergyParams,
    pub phi: BinaryClassifier,
}

impl HeadBundle {
    pub fn new(dim: usize, classes: usize, temperature: f64, rng: &mut SeededRng) -> Self {
        Self {
            head: ClassifierHead::random(dim, classes, rng),
            energy: EnergyParams::uniform(classes, temperature),
            phi: BinaryClassifier::default(),
        }
    }

    pub fn classes(&self) -> usize {
        self.head.classes
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            head: ClassifierHead::zeros(self.head.dim, self.head.classes),
            energy: EnergyParams::uniform(self.head.classes, self.energy.temperature),
            phi: BinaryClassifier { slope: 0.0, intercept: 0.0 },
        }
    }

    pub fn num_params(&self) -> usize {
        self.head.weight.len() + self.head.bias.len() + self.energy.raw_weights.len() + 2
    }

    /// Flattened as `W, b, r, u, v`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.head.weight);
        out.extend_from_slice(&self.head.bias);
        out.extend_from_slice(&self.energy.raw_weights);
        out.push(self.phi.slope);
        out.push(self.phi.intercept);
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return invalid(format!("expected {} head parameters, got {}", self.num_params(), values.len()));
        }
        let (w, rest) = values.split_at(self.head.weight.len());
        let (b, rest) = rest.split_at(self.head.bias.len());
        let (r, rest) = rest.split_at(self.energy.raw_weights.len());
        self.head.weight.copy_from_slice(w);
        self.head.bias.copy_from_slice(b);
        self.energy.raw_weights.copy_from_slice(r);
        self.phi = BinaryClassifier { slope: rest[0], intercept: rest[1] };
        Ok(())
    }

    /// Range of Φ's parameters in the flattened layout.
    pub fn phi_range(&self) -> std::ops::Range<usize> {
        let n = self.num_params();
        n - 2..n
    }

    pub fn energy_of(&self, x: &[f64]) -> Result<f64> {
        energy_score(&self.head.class_logits(x)?, &self.energy)
    }

    /// Regularization loss for the given inlier and outlier features.
    ///
    /// Accumulates `scale · ∂L_reg` into `grad` and returns the loss together
    /// with `scale · ∂L_reg/∂o` for every outlier feature.
    pub fn reg_backward(
        &self,
        weights: &LossWeights,
        id_features: &[&[f64]],
        ood_features: &[Vec<f64>],
        scale: f64,
        grad: &mut HeadBundle,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        if ood_features.is_empty() {
            return invalid("no outlier features");
        }
        let id_logits = id_features.iter().map(|x| self.head.class_logits(x)).collect::<Result<Vec<_>>>()?;
        let ood_logits = ood_features.iter().map(|x| self.head.class_logits(x)).collect::<Result<Vec<_>>>()?;
        let energies = |logits: &[Vec<f64>]| logits.iter().map(|l| energy_score(l, &self.energy)).collect::<Result<Vec<f64>>>();

        // per-sample ∂L/∂E (energy-based variants) or ∂L/∂logits (logit-based)
        let (loss, g_id_e, g_ood_e, g_ood_logits): (f64, Vec<f64>, Vec<f64>, Option<Vec<Vec<f64>>>) = match weights.reg {
            RegVariant::Bce => {
                let t = bce_terms(&energies(&id_logits)?, &energies(&ood_logits)?, &self.phi)?;
                grad.phi.slope += scale * t.g_phi[0];
                grad.phi.intercept += scale * t.g_phi[1];
                (t.loss, t.g_id, t.g_ood, None)
            }
            RegVariant::Hinge => {
                if id_logits.is_empty() {
                    return invalid("hinge needs inlier features");
                }
                let id_e = energies(&id_logits)?;
                let ood_e = energies(&ood_logits)?;
                let (n_id, n_ood) = (id_e.len() as f64, ood_e.len() as f64);
                let mut loss = 0.0;
                let g_id = id_e
                    .iter()
                    .map(|e| {
                        loss += (e - weights.margin_in).max(0.0) / n_id;
                        if *e > weights.margin_in { 1.0 / n_id } else { 0.0 }
                    })
                    .collect();
                let g_ood = ood_e
                    .iter()
                    .map(|e| {
                        loss += (weights.margin_out - e).max(0.0) / n_ood;
                        if *e < weights.margin_out { -1.0 / n_ood } else { 0.0 }
                    })
                    .collect();
                (loss, g_id, g_ood, None)
            }
            RegVariant::Ce | RegVariant::Jsd => {
                let f = if weights.reg == RegVariant::Ce { ce_background } else { jsd_uniform };
                let n = ood_logits.len() as f64;
                let mut loss = 0.0;
                let gs = ood_logits
                    .iter()
                    .map(|l| {
                        let (v, mut g) = f(l);
                        loss += v / n;
                        g.iter_mut().for_each(|x| *x /= n);
                        g
                    })
                    .collect();
                (loss, vec![0.0; id_logits.len()], Vec::new(), Some(gs))
            }
        };

        for ((x, logits), g_e) in id_features.iter().zip(&id_logits).zip(&g_id_e) {
            if *g_e == 0.0 {
                continue;
            }
            let (g_logits, g_raw) = energy_backward(logits, &self.energy, scale * g_e);
            grad.energy.raw_weights.iter_mut().zip(g_raw).for_each(|(a, b)| *a += b);
            self.head.backward(x, &g_logits, &mut grad.head);
        }
        let mut g_features = Vec::with_capacity(ood_features.len());
        for (i, (x, logits)) in ood_features.iter().zip(&ood_logits).enumerate() {
            let g_logits = match &g_ood_logits {
                Some(gs) => gs[i].iter().map(|g| scale * g).collect(),
                None => {
                    let (g_logits, g_raw) = energy_backward(logits, &self.energy, scale * g_ood_e[i]);
                    grad.energy.raw_weights.iter_mut().zip(g_raw).for_each(|(a, b)| *a += b);
                    g_logits
                }
            };
            g_features.push(self.head.backward(x, &g_logits, &mut grad.head));
        }
        Ok((loss, g_features))
    }
}

/// Synthesized outliers entering the joint objective. With `latents`, each
/// outlier is differentiable in the flow parameters through `f⁻¹(latent)`;
/// without, the features are treated as constants.
#[derive(Debug, Clone, Copy)]
pub struct OutlierInputs<'a> {
    pub features: &'a [Vec<f64>],
    pub latents: Option<&'a [Vec<f64>]>,
}

/// Loss components and gradients of the joint objective.
#[derive(Debug, Clone)]
pub struct JointGradient {
    pub det: f64,
    pub nll: f64,
    pub reg: f64,
    pub total: f64,
    /// `log p` of each inlier-labeled record in the batch.
    pub inlier_log_probs: Vec<f64>,
    /// Over [`HeadBundle::params`].
    pub heads: Vec<f64>,
    /// `∂L_total/∂γ` over [`FlowModel::params`]; equals `β·flow_nll + flow_reg`.
    pub flow: Vec<f64>,
    /// `∂L_nll/∂γ`, unweighted.
    pub flow_nll: Vec<f64>,
    /// `α·∂L_reg/∂γ` through the outlier features.
    pub flow_reg: Vec<f64>,
}

/// Gradient of `L_det + β·L_nll + α·L_reg`. `L_det` covers every record in
/// `batch`, `L_nll` the inlier-labeled ones; `L_reg` is skipped when
/// `outliers` is `None`.
pub fn grad_params_heads(
    bundle: &HeadBundle,
    flow: &FlowModel,
    batch: &[FeatureRecord],
    outliers: Option<OutlierInputs<'_>>,
    weights: &LossWeights,
) -> Result<JointGradient> {
    let mut g_heads = bundle.zeros_like();
    let det = det_loss_backward(&bundle.head, batch, 1.0, &mut g_heads.head)?;

    let k = bundle.classes();
    let inliers: Vec<&[f64]> = batch.iter().filter(|r| r.is_inlier(k)).map(|r| r.feature.as_slice()).collect();
    let mut g_nll = flow.zeros_like();
    let mut nll = 0.0;
    let mut inlier_log_probs = Vec::with_capacity(inliers.len());
    if !inliers.is_empty() {
        let w = -1.0 / inliers.len() as f64;
        for x in &inliers {
            let (logp, _) = flow.log_prob_backward(x, w, &mut g_nll)?;
            nll -= logp / inliers.len() as f64;
            inlier_log_probs.push(logp);
        }
    }

    let mut g_reg = flow.zeros_like();
    let mut reg = 0.0;
    if let Some(out) = outliers {
        let (loss, g_features) = bundle.reg_backward(weights, &inliers, out.features, weights.alpha, &mut g_heads)?;
        reg = loss;
        if let Some(latents) = out.latents {
            if latents.len() != out.features.len() {
                return invalid("outlier latents and features differ in count");
            }
            for (z, g) in latents.iter().zip(&g_features) {
                flow.inverse_backward(z, g, &mut g_reg)?;
            }
        }
    }

    let flow_nll = g_nll.params();
    let flow_reg = g_reg.params();
    Ok(JointGradient {
        det,
        nll,
        reg,
        total: total_loss(det, nll, reg, weights),
        inlier_log_probs,
        heads: g_heads.params(),
        flow: flow_nll.iter().zip(&flow_reg).map(|(n, r)| weights.beta * n + r).collect(),
        flow_nll,
        flow_reg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn logits_examples() {
        let mut head = ClassifierHead::zeros(2, 2);
        head.bias = vec![0.5, -1.0, 2.0];
        assert_eq!(head.class_logits(&[3.0, 4.0]).unwrap(), vec![0.5, -1.0, 2.0]);
        let mut eye = ClassifierHead::zeros(3, 2);
        for i in 0..3 {
            eye.weight[i * 3 + i] = 1.0;
        }
        assert_eq!(eye.class_logits(&[0.1, 0.2, 0.3]).unwrap(), vec![0.1, 0.2, 0.3]);
        assert!(eye.class_logits(&[0.1]).is_err());
    }

    #[test]
    fn energy_examples() {
        let p = EnergyParams::uniform(2, 1.0);
        assert!(close(energy_score(&[0.0, 0.0, 9.0], &p).unwrap(), -(2.0f64).ln(), 1e-12));
        let p1 = EnergyParams::uniform(1, 1.0);
        assert!(close(energy_score(&[5.0, -3.0], &p1).unwrap(), -5.0, 1e-12));
        let p2 = EnergyParams::uniform(2, 2.0);
        assert!(close(energy_score(&[0.0, 0.0, 1.0], &p2).unwrap(), -1.386294, 1e-6));
        assert!(energy_score(&[f64::NAN, 0.0, 0.0], &p).is_err());
        assert!(energy_score(&[0.0, 0.0, 0.0], &EnergyParams::uniform(2, 0.0)).is_err());
    }

    #[test]
    fn energy_ignores_background_logit() {
        let p = EnergyParams { raw_weights: vec![0.3, -0.2], temperature: 1.5 };
        let a = energy_score(&[1.0, 2.0, -4.0], &p).unwrap();
        let b = energy_score(&[1.0, 2.0, 40.0], &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bce_examples() {
        let sure = BinaryClassifier { slope: -1.0, intercept: 0.0 };
        assert!(reg_loss_bce(&[-40.0], &[40.0], &sure).unwrap() <= 1e-11);
        let half = BinaryClassifier { slope: 0.0, intercept: 0.0 };
        assert!(close(reg_loss_bce(&[1.0], &[2.0], &half).unwrap(), 1.386294, 1e-6));
        // p = 0.9 for the inlier, 0.1 for the outlier
        let logit = (0.9f64 / 0.1).ln();
        let phi = BinaryClassifier { slope: -1.0, intercept: 0.0 };
        assert!(close(reg_loss_bce(&[-logit], &[logit], &phi).unwrap(), 0.210721, 1e-6));
        assert!(reg_loss_bce(&[], &[1.0], &phi).is_err());
    }

    #[test]
    fn variant_examples() {
        let phi = BinaryClassifier::default();
        let uniform = vec![vec![0.7; 4]];
        let inputs = RegInputs { id_energies: &[-30.0], ood_energies: &[-5.0], ood_logits: &uniform };
        assert!(close(reg_loss_variant(RegVariant::Jsd, inputs, &phi, -25.0, -5.0).unwrap(), 0.0, 1e-15));
        assert!(close(reg_loss_variant(RegVariant::Ce, inputs, &phi, -25.0, -5.0).unwrap(), 4f64.ln(), 1e-12));
        let at_margins = RegInputs { id_energies: &[-25.0], ood_energies: &[-5.0], ood_logits: &uniform };
        assert_eq!(reg_loss_variant(RegVariant::Hinge, at_margins, &phi, -25.0, -5.0).unwrap(), 0.0);
        let violated = RegInputs { id_energies: &[-20.0], ood_energies: &[-8.0], ood_logits: &uniform };
        assert!(close(reg_loss_variant(RegVariant::Hinge, violated, &phi, -25.0, -5.0).unwrap(), 8.0, 1e-12));
    }

    #[test]
    fn total_loss_examples() {
        let zero = LossWeights { alpha: 0.0, beta: 0.0, ..LossWeights::default() };
        assert_eq!(total_loss(1.5, 2.0, 3.0, &zero), 1.5);
        assert!(close(total_loss(1.0, 2.0, 3.0, &LossWeights::default()), 1.3002, 1e-12));
        let w = LossWeights::default();
        let base = total_loss(1.0, 2.0, 0.0, &w);
        assert!(close(total_loss(1.0, 2.0, 6.0, &w) - base, 2.0 * (total_loss(1.0, 2.0, 3.0, &w) - base), 1e-15));
    }

    #[test]
    fn det_loss_examples() {
        let head = ClassifierHead::zeros(2, 3);
        let batch = vec![FeatureRecord::new(1, vec![0.5, 0.5]), FeatureRecord::new(3, vec![1.0, -1.0])];
        assert!(close(det_loss_surrogate(&head, &batch).unwrap(), 4f64.ln(), 1e-12));

        let mut confident = ClassifierHead::zeros(1, 1);
        confident.bias = vec![20.0, 0.0];
        let one = vec![FeatureRecord::new(0, vec![0.0])];
        assert!(det_loss_surrogate(&confident, &one).unwrap() <= 1e-8);

        assert!(det_loss_surrogate(&head, &[FeatureRecord::new(4, vec![0.0, 0.0])]).is_err());
        assert!(det_loss_surrogate(&head, &[FeatureRecord::new(-1, vec![0.0, 0.0])]).is_err());
        assert!(det_loss_surrogate(&head, &[]).is_err());
    }
}
