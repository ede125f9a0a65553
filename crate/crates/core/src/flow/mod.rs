//! Invertible normalizing flows over feature vectors.
//!
//! A [`FlowModel`] maps features `l` to a standard-normal latent `z = f(l)`
//! and scores them with the change-of-variables log-likelihood
//! `log p(l) = log N(z; 0, I) + log|det ∂f/∂l|`. Gradients with respect to
//! the parameters and the input are derived per layer by hand; they are
//! checked against central differences in the tests.
//!
//! Variant compositions (all with alternating checkerboard masks):
//!
//! | variant  | layers                                                        |
//! |----------|---------------------------------------------------------------|
//! | NICE     | `M` additive couplings, then one diagonal scaling             |
//! | RealNVP  | `M` affine couplings                                          |
//! | Glow     | `M` blocks of ActNorm → invertible linear → affine coupling   |
//! | GIN      | `M` affine couplings with zero-sum log-scales                 |

mod checkpoint;
pub mod layers;
pub mod mlp;

pub(crate) use checkpoint::read_flow_from;
pub use checkpoint::{read_flow, write_flow, FLOW_FORMAT_VERSION, FLOW_MAGIC};
pub use layers::{ActNorm, CouplingKind, CouplingLayer, DiagScaling, FlowLayer, InvertibleLinear, SCALE_BOUND};
pub use mlp::{Dense, SubnetMlp};

use crate::error::{invalid, FfsError, Result};
use crate::numerics::{std_normal_logpdf, SeededRng, LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlowVariant {
    Nice,
    RealNvp,
    Glow,
    Gin,
    /// Hand-assembled layer stack; not checkpointable.
    Custom,
}

impl FlowVariant {
    pub const ALL: [FlowVariant; 4] = [FlowVariant::Nice, FlowVariant::RealNvp, FlowVariant::Glow, FlowVariant::Gin];

    pub fn tag(self) -> u8 {
        match self {
            FlowVariant::Nice => 0,
            FlowVariant::RealNvp => 1,
            FlowVariant::Glow => 2,
            FlowVariant::Gin => 3,
            FlowVariant::Custom => 255,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            FlowVariant::Nice => "nice",
            FlowVariant::RealNvp => "realnvp",
            FlowVariant::Glow => "glow",
            FlowVariant::Gin => "gin",
            FlowVariant::Custom => "custom",
        }
    }
}

impl std::str::FromStr for FlowVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown flow variant '{s}' (expected nice, realnvp, glow or gin)"))
    }
}

/// Coupling count `M`, conditioner depth `H` and width `W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowArch {
    pub coupling_layers: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self { coupling_layers: 2, hidden_layers: 2, hidden_width: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub variant: FlowVariant,
    pub arch: FlowArch,
    d: usize,
    pub layers: Vec<FlowLayer>,
}

/// Builds a freshly initialized flow. Conditioner output layers start at zero
/// so every coupling is the identity at initialization.
pub fn init_flow(variant: FlowVariant, d: usize, arch: FlowArch, rng: &mut SeededRng) -> Result<FlowModel> {
    if d < 2 {
        return invalid(format!("flow dimension must be at least 2, got {d}"));
    }
    if arch.coupling_layers == 0 || arch.hidden_layers == 0 || arch.hidden_width == 0 {
        return invalid("coupling count, hidden layers and hidden width must all be at least 1");
    }
    let FlowArch { coupling_layers: m, hidden_layers: h, hidden_width: w } = arch;
    let mut layers = Vec::new();
    match variant {
        FlowVariant::Nice => {
            for j in 0..m {
                layers.push(FlowLayer::Coupling(CouplingLayer::new(CouplingKind::Additive, d, j, h, w, rng)));
            }
            layers.push(FlowLayer::Scale(DiagScaling { log_scale: vec![0.0; d] }));
        }
        FlowVariant::RealNvp | FlowVariant::Gin => {
            let kind = if variant == FlowVariant::Gin { CouplingKind::VolumePreserving } else { CouplingKind::Affine };
            for j in 0..m {
                layers.push(FlowLayer::Coupling(CouplingLayer::new(kind, d, j, h, w, rng)));
            }
        }
        FlowVariant::Glow => {
            for j in 0..m {
                layers.push(FlowLayer::ActNorm(ActNorm::new(d)));
                layers.push(FlowLayer::Linear(InvertibleLinear::new(d, rng)));
                layers.push(FlowLayer::Coupling(CouplingLayer::new(CouplingKind::Affine, d, j, h, w, rng)));
            }
        }
        FlowVariant::Custom => return invalid("custom flows are built with FlowModel::from_layers"),
    }
    Ok(FlowModel { variant, arch, d, layers })
}

impl FlowModel {
    /// The flow with no layers, `f(l) = l`.
    pub fn identity(d: usize) -> Self {
        Self { variant: FlowVariant::Custom, arch: FlowArch::default(), d, layers: Vec::new() }
    }

    pub fn from_layers(d: usize, layers: Vec<FlowLayer>) -> Result<Self> {
        if d == 0 {
            return invalid("flow dimension must be positive");
        }
        if let Some(i) = layers.iter().position(|l| l.dim() != d) {
            return invalid(format!("layer {i} has dimension {}, expected {d}", layers[i].dim()));
        }
        Ok(Self { variant: FlowVariant::Custom, arch: FlowArch::default(), d, layers })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn coupling_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, FlowLayer::Coupling(_))).count()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return invalid(format!("expected dimension {}, got {}", self.d, x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return invalid("input has non-finite components");
        }
        Ok(())
    }

    /// Runs the forward map and keeps each layer's input; the last entry is `z`.
    fn forward_trace(&self, x: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
        self.check_input(x)?;
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x.to_vec());
        let mut logdet = 0.0;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, ld) = layer.forward(trace.last().expect("non-empty"));
            logdet += ld;
            if !ld.is_finite() || y.iter().any(|v| !v.is_finite()) {
                return Err(FfsError::NumericOverflow { layer: i });
            }
            trace.push(y);
        }
        Ok((trace, logdet))
    }

    /// `z = f(l)` and `log|det J|`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (mut trace, logdet) = self.forward_trace(x)?;
        Ok((trace.pop().expect("non-empty"), logdet))
    }

    /// Inverse trace: `trace[i]` is the value entering layer `i` in the
    /// forward direction (so `trace[0]` is the recovered input).
    fn inverse_trace(&self, z: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
        self.check_input(z)?;
        let mut trace = vec![Vec::new(); self.layers.len() + 1];
        trace[self.layers.len()] = z.to_vec();
        let mut logdet = 0.0;
        for i in (0..self.layers.len()).rev() {
            let (x, ld) = self.layers[i].inverse(&trace[i + 1]);
            logdet += ld;
            if !ld.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(FfsError::NumericOverflow { layer: i });
            }
            trace[i] = x;
        }
        Ok((trace, logdet))
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse_with_logdet(z)?.0)
    }

    /// `f⁻¹(z)` together with `log|det ∂f⁻¹/∂z|`.
    pub fn inverse_with_logdet(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (mut trace, logdet) = self.inverse_trace(z)?;
        Ok((trace.swap_remove(0), logdet))
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        let (z, logdet) = self.forward(x)?;
        Ok(std_normal_logpdf(&z)? + logdet)
    }

    /// Mean negative log-likelihood of a batch.
    pub fn nll_loss(&self, batch: &[Vec<f64>]) -> Result<f64> {
        if batch.is_empty() {
            return invalid("empty batch");
        }
        let mut total = 0.0;
        for x in batch {
            total -= self.log_prob(x)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Accumulates `weight · ∂log p(x)/∂γ` into `grad` and returns
    /// `(log p(x), weight · ∂log p(x)/∂x)`.
    pub fn log_prob_backward(&self, x: &[f64], weight: f64, grad: &mut FlowModel) -> Result<(f64, Vec<f64>)> {
        let (trace, logdet) = self.forward_trace(x)?;
        let z = trace.last().expect("non-empty");
        let logp = -0.5 * (z.iter().map(|v| v * v).sum::<f64>() + self.d as f64 * LN_2PI) + logdet;
        let mut g: Vec<f64> = z.iter().map(|v| -weight * v).collect();
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].backward(&trace[i], &g, weight, &mut grad.layers[i]);
        }
        Ok((logp, g))
    }

    /// For `x = f⁻¹(z)` and an upstream gradient `gx = ∂L/∂x`, accumulates
    /// `∂L/∂γ` into `grad` and returns `∂L/∂z`.
    pub fn inverse_backward(&self, z: &[f64], gx: &[f64], grad: &mut FlowModel) -> Result<Vec<f64>> {
        let (trace, _) = self.inverse_trace(z)?;
        let mut g = gx.to_vec();
        for i in 0..self.layers.len() {
            g = self.layers[i].inverse_backward(&trace[i + 1], &trace[i], &g, &mut grad.layers[i]);
        }
        Ok(g)
    }

    /// NLL of the batch and its gradient over the flattened parameters.
    pub fn grad_params_nll(&self, batch: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return invalid("empty batch");
        }
        let mut grad = self.zeros_like();
        let w = -1.0 / batch.len() as f64;
        let mut total = 0.0;
        for x in batch {
            let (logp, _) = self.log_prob_backward(x, w, &mut grad)?;
            total -= logp;
        }
        Ok((total / batch.len() as f64, grad.params()))
    }

    pub fn grad_input_logprob(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut scratch = self.zeros_like();
        Ok(self.log_prob_backward(x, 1.0, &mut scratch)?.1)
    }

    /// Same layout with all parameters zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> FlowModel {
        FlowModel {
            variant: self.variant,
            arch: self.arch,
            d: self.d,
            layers: self.layers.iter().map(FlowLayer::zeros_like).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(FlowLayer::num_params).sum()
    }

    /// Trainable parameters γ, flattened in layer order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            l.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return invalid(format!("expected {} parameters, got {}", self.num_params(), values.len()));
        }
        let mut src = values;
        for l in &mut self.layers {
            l.read_params(&mut src);
        }
        Ok(())
    }

    pub fn needs_initialization(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, FlowLayer::ActNorm(a) if !a.initialized))
    }

    /// Data-dependent ActNorm initialization: pushes `batch` through the
    /// layers and initializes each not-yet-initialized ActNorm on the
    /// activations it receives.
    pub fn initialize(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if batch.is_empty() {
            return invalid("initialization batch is empty");
        }
        for x in batch {
            self.check_input(x)?;
        }
        let mut acts = batch.to_vec();
        for layer in &mut self.layers {
            if let FlowLayer::ActNorm(a) = layer {
                if !a.initialized {
                    a.initialize(&acts);
                }
            }
            for x in &mut acts {
                *x = layer.forward(x).0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn diag_flow(log_scale: Vec<f64>) -> FlowModel {
        let d = log_scale.len();
        FlowModel::from_layers(d, vec![FlowLayer::Scale(DiagScaling { log_scale })]).unwrap()
    }

    #[test]
    fn glow_layer_sequence() {
        let m = init_flow(FlowVariant::Glow, 4, FlowArch { coupling_layers: 2, hidden_layers: 1, hidden_width: 4 }, &mut SeededRng::new(0))
            .unwrap();
        let kinds: Vec<&str> = m
            .layers
            .iter()
            .map(|l| match l {
                FlowLayer::ActNorm(_) => "actnorm",
                FlowLayer::Linear(_) => "linear",
                FlowLayer::Coupling(_) => "coupling",
                FlowLayer::Scale(_) => "scale",
            })
            .collect();
        assert_eq!(kinds, ["actnorm", "linear", "coupling", "actnorm", "linear", "coupling"]);
    }

    #[test]
    fn init_rejects_bad_arguments() {
        let mut rng = SeededRng::new(0);
        assert!(init_flow(FlowVariant::RealNvp, 1, FlowArch::default(), &mut rng).is_err());
        let zero_width = FlowArch { hidden_width: 0, ..FlowArch::default() };
        assert!(init_flow(FlowVariant::RealNvp, 2, zero_width, &mut rng).is_err());
    }

    #[test]
    fn masks_alternate_and_split_odd_dims() {
        let m = init_flow(FlowVariant::RealNvp, 5, FlowArch { coupling_layers: 3, hidden_layers: 1, hidden_width: 3 }, &mut SeededRng::new(1))
            .unwrap();
        let masks: Vec<Vec<bool>> = m
            .layers
            .iter()
            .map(|l| match l {
                FlowLayer::Coupling(c) => c.mask.clone(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(masks[0], [true, false, true, false, true]);
        assert_eq!(masks[1], [false, true, false, true, false]);
        assert_eq!(masks[2], masks[0]);
    }

    #[test]
    fn fresh_flows_are_identity() {
        for variant in [FlowVariant::Nice, FlowVariant::RealNvp, FlowVariant::Gin] {
            let m = init_flow(variant, 2, FlowArch::default(), &mut SeededRng::new(2)).unwrap();
            let (z, ld) = m.forward(&[0.3, -0.7]).unwrap();
            assert_eq!(z, vec![0.3, -0.7], "{variant:?}");
            assert_eq!(ld, 0.0);
        }
        // Glow starts as its fixed permutation
        let m = init_flow(FlowVariant::Glow, 4, FlowArch::default(), &mut SeededRng::new(2)).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4];
        let (z, ld) = m.forward(&x).unwrap();
        assert_eq!(ld, 0.0);
        let mut sorted = z.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, x);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init_flow(FlowVariant::Glow, 3, FlowArch::default(), &mut SeededRng::new(9)).unwrap();
        let b = init_flow(FlowVariant::Glow, 3, FlowArch::default(), &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params().len(), a.num_params());
    }

    #[test]
    fn diag_scaling_analytics() {
        let m = diag_flow(vec![2f64.ln(), 2f64.ln()]);
        let (z, ld) = m.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(z, vec![2.0, 2.0]);
        assert!(close(ld, 1.386294, 1e-6));
        assert_eq!(m.inverse(&[2.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        assert!(close(m.log_prob(&[0.0, 0.0]).unwrap(), -0.451583, 1e-6));

        let m1 = diag_flow(vec![2f64.ln()]);
        let g = m1.grad_input_logprob(&[1.0]).unwrap();
        assert!(close(g[0], -4.0, 1e-12));
    }

    #[test]
    fn identity_flow_values() {
        let m = FlowModel::identity(2);
        assert_eq!(m.forward(&[0.3, -0.7]).unwrap(), (vec![0.3, -0.7], 0.0));
        assert_eq!(m.inverse(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
        assert!(close(m.log_prob(&[0.0, 0.0]).unwrap(), -1.837877, 1e-6));
        assert_eq!(m.grad_input_logprob(&[1.0, 2.0]).unwrap(), vec![-1.0, -2.0]);
        let one = FlowModel::identity(1);
        assert!(close(one.nll_loss(&[vec![0.0]]).unwrap(), 0.918939, 1e-6));
        assert!(close(one.nll_loss(&[vec![0.0], vec![1.0]]).unwrap(), 1.168939, 1e-6));
        assert!(one.nll_loss(&[]).is_err());
    }

    #[test]
    fn errors_on_bad_input() {
        let m = FlowModel::identity(2);
        assert!(matches!(m.forward(&[1.0]), Err(FfsError::InvalidArgument(_))));
        assert!(matches!(m.forward(&[1.0, f64::NAN]), Err(FfsError::InvalidArgument(_))));
        let huge = diag_flow(vec![700.0, 0.0]);
        assert!(matches!(huge.forward(&[1e10, 0.0]), Err(FfsError::NumericOverflow { layer: 0 })));
    }

    #[test]
    fn actnorm_initialization_standardizes_first_batch() {
        let mut rng = SeededRng::new(3);
        let mut m = init_flow(FlowVariant::Glow, 3, FlowArch::default(), &mut rng).unwrap();
        let batch: Vec<Vec<f64>> = (0..64).map(|_| vec![3.0 + 2.0 * rng.normal(), -1.0 + 0.1 * rng.normal(), rng.normal()]).collect();
        m.initialize(&batch).unwrap();
        assert!(!m.needs_initialization());
        let outs: Vec<Vec<f64>> = batch.iter().map(|x| m.layers[0].forward(x).0).collect();
        for k in 0..3 {
            let mean = outs.iter().map(|o| o[k]).sum::<f64>() / 64.0;
            let var = outs.iter().map(|o| (o[k] - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() <= 1e-6 && (var - 1.0).abs() <= 1e-4, "{mean} {var}");
        }
    }

    #[test]
    fn symmetric_batch_gives_zero_actnorm_bias_gradient() {
        let mut m = init_flow(FlowVariant::Glow, 2, FlowArch::default(), &mut SeededRng::new(4)).unwrap();
        // keep ActNorm at identity so the odd symmetry survives
        if let FlowLayer::ActNorm(a) = &mut m.layers[0] {
            a.initialized = true;
        }
        if let FlowLayer::ActNorm(a) = &mut m.layers[3] {
            a.initialized = true;
        }
        let (_, grad) = m.grad_params_nll(&[vec![0.4, -1.2], vec![-0.4, 1.2]]).unwrap();
        let mut g = m.zeros_like();
        g.set_params(&grad).unwrap();
        for idx in [0, 3] {
            let FlowLayer::ActNorm(a) = &g.layers[idx] else { unreachable!() };
            assert!(a.bias.iter().all(|v| v.abs() < 1e-15), "{:?}", a.bias);
        }
    }

    #[test]
    fn additive_passthrough_weight_has_zero_gradient() {
        // conditioner input weight feeding a dead (zero output weight) unit
        let m = init_flow(FlowVariant::Nice, 2, FlowArch { coupling_layers: 1, hidden_layers: 1, hidden_width: 2 }, &mut SeededRng::new(5))
            .unwrap();
        let (_, grad) = m.grad_params_nll(&[vec![0.5, 0.1], vec![-1.0, 2.0]]).unwrap();
        let mut g = m.zeros_like();
        g.set_params(&grad).unwrap();
        let FlowLayer::Coupling(c) = &g.layers[0] else { unreachable!() };
        assert!(c.t_net.layers[0].weight.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn input_gradient_matches_finite_differences_on_diag() {
        let m = diag_flow(vec![0.3, -0.2, 0.9]);
        let x = [0.4, 1.1, -0.6];
        let g = m.grad_input_logprob(&x).unwrap();
        let fd = finite_diff_grad(|x| m.log_prob(x), &x, 1e-5).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!(close(*a, *b, 1e-8));
        }
    }
}
