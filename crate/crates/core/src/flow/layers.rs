use super::mlp::{take_into, SubnetMlp};
use crate::numerics::SeededRng;

/// Bound on the magnitude of an affine coupling log-scale: `c·tanh(raw/c)`.
pub const SCALE_BOUND: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingKind {
    /// `y_b = x_b + t(x_a)`.
    Additive,
    /// `y_b = x_b·exp(s(x_a)) + t(x_a)`.
    Affine,
    /// Affine with the log-scales shifted to sum to zero.
    VolumePreserving,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub kind: CouplingKind,
    /// `true` marks components passed through unchanged (the conditioning half).
    pub mask: Vec<bool>,
    cond: Vec<usize>,
    trans: Vec<usize>,
    pub s_net: Option<SubnetMlp>,
    pub t_net: SubnetMlp,
}

impl CouplingLayer {
    /// Checkerboard mask: even components condition when `parity` is 0, odd
    /// components when it is 1.
    pub fn new(kind: CouplingKind, d: usize, parity: usize, hidden: usize, width: usize, rng: &mut SeededRng) -> Self {
        let mask: Vec<bool> = (0..d).map(|i| i % 2 == parity % 2).collect();
        Self::with_mask(kind, mask, hidden, width, rng)
    }

    pub fn with_mask(kind: CouplingKind, mask: Vec<bool>, hidden: usize, width: usize, rng: &mut SeededRng) -> Self {
        let cond: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let trans: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        assert!(!cond.is_empty() && !trans.is_empty(), "coupling mask needs both halves");
        let s_net = match kind {
            CouplingKind::Additive => None,
            _ => Some(SubnetMlp::new(cond.len(), trans.len(), hidden, width, rng)),
        };
        let t_net = SubnetMlp::new(cond.len(), trans.len(), hidden, width, rng);
        Self { kind, mask, cond, trans, s_net, t_net }
    }

    fn gather(&self, x: &[f64], idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| x[i]).collect()
    }

    /// Returns `(log_scales, raw_network_outputs)`.
    fn log_scales(&self, xa: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let Some(s_net) = &self.s_net else {
            return (vec![0.0; self.trans.len()], Vec::new());
        };
        let raw = s_net.forward(xa);
        let mut ls: Vec<f64> = raw.iter().map(|r| SCALE_BOUND * (r / SCALE_BOUND).tanh()).collect();
        if self.kind == CouplingKind::VolumePreserving {
            let m = ls.iter().sum::<f64>() / ls.len() as f64;
            ls.iter_mut().for_each(|v| *v -= m);
        }
        (ls, raw)
    }

    fn logdet(&self, ls: &[f64]) -> f64 {
        match self.kind {
            CouplingKind::Affine => ls.iter().sum(),
            // zero by construction; summing the shifted scales would only add rounding noise
            CouplingKind::Additive | CouplingKind::VolumePreserving => 0.0,
        }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let xa = self.gather(x, &self.cond);
        let (ls, _) = self.log_scales(&xa);
        let t = self.t_net.forward(&xa);
        let mut y = x.to_vec();
        for (j, &i) in self.trans.iter().enumerate() {
            y[i] = x[i] * ls[j].exp() + t[j];
        }
        (y, self.logdet(&ls))
    }

    fn inverse(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let ya = self.gather(y, &self.cond);
        let (ls, _) = self.log_scales(&ya);
        let t = self.t_net.forward(&ya);
        let mut x = y.to_vec();
        for (j, &i) in self.trans.iter().enumerate() {
            x[i] = (y[i] - t[j]) * (-ls[j]).exp();
        }
        (x, -self.logdet(&ls))
    }

    /// Chains `∂L/∂(log-scale)` and `∂L/∂t` back through both conditioners.
    fn backward_nets(&self, xa: &[f64], raw: &[f64], g_ls: Vec<f64>, g_t: &[f64], grad: &mut CouplingLayer) -> Vec<f64> {
        let mut gxa = self.t_net.backward(xa, g_t, &mut grad.t_net);
        if let (Some(s_net), Some(gs_net)) = (&self.s_net, grad.s_net.as_mut()) {
            let mut g_u = g_ls;
            if self.kind == CouplingKind::VolumePreserving {
                let m = g_u.iter().sum::<f64>() / g_u.len() as f64;
                g_u.iter_mut().for_each(|v| *v -= m);
            }
            let g_raw: Vec<f64> = g_u
                .iter()
                .zip(raw)
                .map(|(g, r)| {
                    let th = (r / SCALE_BOUND).tanh();
                    g * (1.0 - th * th)
                })
                .collect();
            let gs = s_net.backward(xa, &g_raw, gs_net);
            gxa.iter_mut().zip(gs).for_each(|(a, b)| *a += b);
        }
        gxa
    }

    fn backward(&self, x: &[f64], gy: &[f64], g_ld: f64, grad: &mut CouplingLayer) -> Vec<f64> {
        let xa = self.gather(x, &self.cond);
        let (ls, raw) = self.log_scales(&xa);
        let mut gx = gy.to_vec();
        let mut g_t = Vec::with_capacity(self.trans.len());
        let mut g_ls = Vec::with_capacity(self.trans.len());
        let ld_weight = if self.kind == CouplingKind::Affine { g_ld } else { 0.0 };
        for (j, &i) in self.trans.iter().enumerate() {
            let e = ls[j].exp();
            gx[i] = gy[i] * e;
            g_t.push(gy[i]);
            g_ls.push(gy[i] * x[i] * e + ld_weight);
        }
        let gxa = self.backward_nets(&xa, &raw, g_ls, &g_t, grad);
        for (j, &i) in self.cond.iter().enumerate() {
            gx[i] += gxa[j];
        }
        gx
    }

    fn inverse_backward(&self, y: &[f64], x: &[f64], gx: &[f64], grad: &mut CouplingLayer) -> Vec<f64> {
        let ya = self.gather(y, &self.cond);
        let (ls, raw) = self.log_scales(&ya);
        let mut gy = gx.to_vec();
        let mut g_t = Vec::with_capacity(self.trans.len());
        let mut g_ls = Vec::with_capacity(self.trans.len());
        for (j, &i) in self.trans.iter().enumerate() {
            let e = (-ls[j]).exp();
            gy[i] = gx[i] * e;
            g_t.push(-gx[i] * e);
            g_ls.push(-gx[i] * x[i]);
        }
        let gya = self.backward_nets(&ya, &raw, g_ls, &g_t, grad);
        for (j, &i) in self.cond.iter().enumerate() {
            gy[i] += gya[j];
        }
        gy
    }

    fn zeros_like(&self) -> Self {
        Self {
            s_net: self.s_net.as_ref().map(SubnetMlp::zeros_like),
            t_net: self.t_net.zeros_like(),
            ..self.clone()
        }
    }

    fn num_params(&self) -> usize {
        self.s_net.as_ref().map_or(0, SubnetMlp::num_params) + self.t_net.num_params()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        if let Some(s) = &self.s_net {
            s.write_params(out);
        }
        self.t_net.write_params(out);
    }

    fn read_params(&mut self, src: &mut &[f64]) {
        if let Some(s) = &mut self.s_net {
            s.read_params(src);
        }
        self.t_net.read_params(src);
    }
}

/// Per-dimension affine normalization `y = (x + b)·exp(s)` with
/// data-dependent initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm {
    pub log_scale: Vec<f64>,
    pub bias: Vec<f64>,
    pub initialized: bool,
}

impl ActNorm {
    pub fn new(d: usize) -> Self {
        Self { log_scale: vec![0.0; d], bias: vec![0.0; d], initialized: false }
    }

    /// Sets bias and scale so `batch` maps to zero mean, unit (population)
    /// variance per dimension.
    pub fn initialize(&mut self, batch: &[Vec<f64>]) {
        let n = batch.len() as f64;
        for k in 0..self.bias.len() {
            let mean = batch.iter().map(|x| x[k]).sum::<f64>() / n;
            let var = batch.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / n;
            self.bias[k] = -mean;
            self.log_scale[k] = -0.5 * var.max(1e-12).ln();
        }
        self.initialized = true;
    }
}

/// Dense invertible map `y = P·L·U·x` (LU-parameterized 1x1 convolution).
///
/// `L` is unit lower triangular, `U` upper triangular with diagonal
/// `sign·exp(log_diag)`; `P` and the signs are fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertibleLinear {
    /// `y[i] = (L·U·x)[perm[i]]`.
    pub perm: Vec<usize>,
    pub sign: Vec<f64>,
    /// Row-major `d x d`; only the strict lower triangle is used.
    pub lower: Vec<f64>,
    /// Row-major `d x d`; only the strict upper triangle is used.
    pub upper: Vec<f64>,
    pub log_diag: Vec<f64>,
}

impl InvertibleLinear {
    /// Random permutation, identity `L` and `U`.
    pub fn new(d: usize, rng: &mut SeededRng) -> Self {
        let mut perm: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut perm);
        Self { perm, sign: vec![1.0; d], lower: vec![0.0; d * d], upper: vec![0.0; d * d], log_diag: vec![0.0; d] }
    }

    fn d(&self) -> usize {
        self.log_diag.len()
    }

    fn diag(&self, i: usize) -> f64 {
        self.sign[i] * self.log_diag[i].exp()
    }

    fn apply_upper(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d();
        (0..d)
            .map(|i| self.diag(i) * x[i] + (i + 1..d).map(|j| self.upper[i * d + j] * x[j]).sum::<f64>())
            .collect()
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let d = self.d();
        let a = self.apply_upper(x);
        let b: Vec<f64> = (0..d).map(|i| a[i] + (0..i).map(|j| self.lower[i * d + j] * a[j]).sum::<f64>()).collect();
        let y = self.perm.iter().map(|&p| b[p]).collect();
        (y, self.log_diag.iter().sum())
    }

    fn inverse(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let d = self.d();
        let mut b = vec![0.0; d];
        for (i, &p) in self.perm.iter().enumerate() {
            b[p] = y[i];
        }
        let mut a = vec![0.0; d];
        for i in 0..d {
            a[i] = b[i] - (0..i).map(|j| self.lower[i * d + j] * a[j]).sum::<f64>();
        }
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            let s: f64 = (i + 1..d).map(|j| self.upper[i * d + j] * x[j]).sum();
            x[i] = (a[i] - s) / self.diag(i);
        }
        (x, -self.log_diag.iter().sum::<f64>())
    }

    fn backward(&self, x: &[f64], gy: &[f64], g_ld: f64, grad: &mut InvertibleLinear) -> Vec<f64> {
        let d = self.d();
        let a = self.apply_upper(x);
        let mut gb = vec![0.0; d];
        for (i, &p) in self.perm.iter().enumerate() {
            gb[p] = gy[i];
        }
        let mut ga = gb.clone();
        for i in 0..d {
            for j in 0..i {
                grad.lower[i * d + j] += gb[i] * a[j];
                ga[j] += self.lower[i * d + j] * gb[i];
            }
        }
        let mut gx = vec![0.0; d];
        for i in 0..d {
            let u = self.diag(i);
            grad.log_diag[i] += ga[i] * x[i] * u + g_ld;
            gx[i] += u * ga[i];
            for j in i + 1..d {
                grad.upper[i * d + j] += ga[i] * x[j];
                gx[j] += self.upper[i * d + j] * ga[i];
            }
        }
        gx
    }

    fn inverse_backward(&self, _y: &[f64], x: &[f64], gx: &[f64], grad: &mut InvertibleLinear) -> Vec<f64> {
        let d = self.d();
        // x = U⁻¹a: ga = U⁻ᵀ gx, ∂L/∂U = -ga xᵀ
        let mut ga = vec![0.0; d];
        for i in 0..d {
            let s: f64 = (0..i).map(|j| self.upper[j * d + i] * ga[j]).sum();
            ga[i] = (gx[i] - s) / self.diag(i);
        }
        for i in 0..d {
            grad.log_diag[i] -= ga[i] * x[i] * self.diag(i);
            for j in i + 1..d {
                grad.upper[i * d + j] -= ga[i] * x[j];
            }
        }
        // a = L⁻¹b: gb = L⁻ᵀ ga, ∂L/∂L = -gb aᵀ
        let a = self.apply_upper(x);
        let mut gb = vec![0.0; d];
        for i in (0..d).rev() {
            let s: f64 = (i + 1..d).map(|j| self.lower[j * d + i] * gb[j]).sum();
            gb[i] = ga[i] - s;
        }
        for i in 0..d {
            for j in 0..i {
                grad.lower[i * d + j] -= gb[i] * a[j];
            }
        }
        self.perm.iter().map(|&p| gb[p]).collect()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        let d = self.d();
        for i in 0..d {
            out.extend((0..i).map(|j| self.lower[i * d + j]));
        }
        for i in 0..d {
            out.extend((i + 1..d).map(|j| self.upper[i * d + j]));
        }
        out.extend_from_slice(&self.log_diag);
    }

    fn read_params(&mut self, src: &mut &[f64]) {
        let d = self.d();
        for i in 0..d {
            for j in 0..i {
                self.lower[i * d + j] = src[0];
                *src = &src[1..];
            }
        }
        for i in 0..d {
            for j in i + 1..d {
                self.upper[i * d + j] = src[0];
                *src = &src[1..];
            }
        }
        take_into(src, &mut self.log_diag);
    }
}

/// Per-dimension scaling `y = x·exp(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagScaling {
    pub log_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowLayer {
    Coupling(CouplingLayer),
    ActNorm(ActNorm),
    Linear(InvertibleLinear),
    Scale(DiagScaling),
}

impl FlowLayer {
    pub fn dim(&self) -> usize {
        match self {
            FlowLayer::Coupling(c) => c.mask.len(),
            FlowLayer::ActNorm(a) => a.bias.len(),
            FlowLayer::Linear(l) => l.d(),
            FlowLayer::Scale(s) => s.log_scale.len(),
        }
    }

    /// Returns the output and this layer's `log|det J|`.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        match self {
            FlowLayer::Coupling(c) => c.forward(x),
            FlowLayer::ActNorm(a) => {
                let y = x.iter().zip(&a.bias).zip(&a.log_scale).map(|((x, b), s)| (x + b) * s.exp()).collect();
                (y, a.log_scale.iter().sum())
            }
            FlowLayer::Linear(l) => l.forward(x),
            FlowLayer::Scale(s) => {
                let y = x.iter().zip(&s.log_scale).map(|(x, s)| x * s.exp()).collect();
                (y, s.log_scale.iter().sum())
            }
        }
    }

    /// Returns the preimage and the inverse map's `log|det J|`.
    pub fn inverse(&self, y: &[f64]) -> (Vec<f64>, f64) {
        match self {
            FlowLayer::Coupling(c) => c.inverse(y),
            FlowLayer::ActNorm(a) => {
                let x = y.iter().zip(&a.bias).zip(&a.log_scale).map(|((y, b), s)| y * (-s).exp() - b).collect();
                (x, -a.log_scale.iter().sum::<f64>())
            }
            FlowLayer::Linear(l) => l.inverse(y),
            FlowLayer::Scale(s) => {
                let x = y.iter().zip(&s.log_scale).map(|(y, s)| y * (-s).exp()).collect();
                (x, -s.log_scale.iter().sum::<f64>())
            }
        }
    }

    /// Backward through the forward map. `gy` is `∂L/∂y`, `g_ld` the weight
    /// of this layer's log-determinant in `L`. Accumulates into `grad`.
    pub fn backward(&self, x: &[f64], gy: &[f64], g_ld: f64, grad: &mut FlowLayer) -> Vec<f64> {
        match (self, grad) {
            (FlowLayer::Coupling(c), FlowLayer::Coupling(g)) => c.backward(x, gy, g_ld, g),
            (FlowLayer::ActNorm(a), FlowLayer::ActNorm(g)) => {
                let mut gx = Vec::with_capacity(x.len());
                for k in 0..x.len() {
                    let e = a.log_scale[k].exp();
                    let y = (x[k] + a.bias[k]) * e;
                    g.bias[k] += gy[k] * e;
                    g.log_scale[k] += gy[k] * y + g_ld;
                    gx.push(gy[k] * e);
                }
                gx
            }
            (FlowLayer::Linear(l), FlowLayer::Linear(g)) => l.backward(x, gy, g_ld, g),
            (FlowLayer::Scale(s), FlowLayer::Scale(g)) => {
                let mut gx = Vec::with_capacity(x.len());
                for k in 0..x.len() {
                    let e = s.log_scale[k].exp();
                    g.log_scale[k] += gy[k] * x[k] * e + g_ld;
                    gx.push(gy[k] * e);
                }
                gx
            }
            _ => unreachable!("gradient buffer layout differs from the model"),
        }
    }

    /// Backward through the inverse map `x = f⁻¹(y)`, given `∂L/∂x`.
    pub fn inverse_backward(&self, y: &[f64], x: &[f64], gx: &[f64], grad: &mut FlowLayer) -> Vec<f64> {
        match (self, grad) {
            (FlowLayer::Coupling(c), FlowLayer::Coupling(g)) => c.inverse_backward(y, x, gx, g),
            (FlowLayer::ActNorm(a), FlowLayer::ActNorm(g)) => {
                let mut gy = Vec::with_capacity(x.len());
                for k in 0..x.len() {
                    let e = (-a.log_scale[k]).exp();
                    g.bias[k] -= gx[k];
                    g.log_scale[k] -= gx[k] * (x[k] + a.bias[k]);
                    gy.push(gx[k] * e);
                }
                gy
            }
            (FlowLayer::Linear(l), FlowLayer::Linear(g)) => l.inverse_backward(y, x, gx, g),
            (FlowLayer::Scale(s), FlowLayer::Scale(g)) => {
                let mut gy = Vec::with_capacity(x.len());
                for k in 0..x.len() {
                    g.log_scale[k] -= gx[k] * x[k];
                    gy.push(gx[k] * (-s.log_scale[k]).exp());
                }
                gy
            }
            _ => unreachable!("gradient buffer layout differs from the model"),
        }
    }

    pub fn zeros_like(&self) -> FlowLayer {
        match self {
            FlowLayer::Coupling(c) => FlowLayer::Coupling(c.zeros_like()),
            FlowLayer::ActNorm(a) => FlowLayer::ActNorm(ActNorm::new(a.bias.len())),
            FlowLayer::Linear(l) => {
                let d = l.d();
                FlowLayer::Linear(InvertibleLinear {
                    perm: l.perm.clone(),
                    sign: l.sign.clone(),
                    lower: vec![0.0; d * d],
                    upper: vec![0.0; d * d],
                    log_diag: vec![0.0; d],
                })
            }
            FlowLayer::Scale(s) => FlowLayer::Scale(DiagScaling { log_scale: vec![0.0; s.log_scale.len()] }),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            FlowLayer::Coupling(c) => c.num_params(),
            FlowLayer::ActNorm(a) => 2 * a.bias.len(),
            FlowLayer::Linear(l) => l.d() * l.d(),
            FlowLayer::Scale(s) => s.log_scale.len(),
        }
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            FlowLayer::Coupling(c) => c.write_params(out),
            FlowLayer::ActNorm(a) => {
                out.extend_from_slice(&a.log_scale);
                out.extend_from_slice(&a.bias);
            }
            FlowLayer::Linear(l) => l.write_params(out),
            FlowLayer::Scale(s) => out.extend_from_slice(&s.log_scale),
        }
    }

    pub fn read_params(&mut self, src: &mut &[f64]) {
        match self {
            FlowLayer::Coupling(c) => c.read_params(src),
            FlowLayer::ActNorm(a) => {
                take_into(src, &mut a.log_scale);
                take_into(src, &mut a.bias);
            }
            FlowLayer::Linear(l) => l.read_params(src),
            FlowLayer::Scale(s) => take_into(src, &mut s.log_scale),
        }
    }

    /// Non-trainable state stored in checkpoints ahead of the parameters.
    pub fn write_fixed_state(&self, out: &mut Vec<f64>) {
        match self {
            FlowLayer::ActNorm(a) => out.push(if a.initialized { 1.0 } else { 0.0 }),
            FlowLayer::Linear(l) => {
                out.extend(l.perm.iter().map(|&p| p as f64));
                out.extend_from_slice(&l.sign);
            }
            FlowLayer::Coupling(_) | FlowLayer::Scale(_) => {}
        }
    }

    pub fn fixed_state_len(&self) -> usize {
        match self {
            FlowLayer::ActNorm(_) => 1,
            FlowLayer::Linear(l) => 2 * l.d(),
            FlowLayer::Coupling(_) | FlowLayer::Scale(_) => 0,
        }
    }

    /// Restores fixed state; returns a description of the first invalid entry.
    pub fn read_fixed_state(&mut self, src: &mut &[f64]) -> Result<(), String> {
        match self {
            FlowLayer::ActNorm(a) => {
                let flag = src[0];
                *src = &src[1..];
                a.initialized = match flag {
                    0.0 => false,
                    1.0 => true,
                    other => return Err(format!("actnorm flag {other}")),
                };
            }
            FlowLayer::Linear(l) => {
                let d = l.d();
                let mut seen = vec![false; d];
                for k in 0..d {
                    let v = src[k];
                    let p = v as usize;
                    if v.fract() != 0.0 || v < 0.0 || p >= d || seen[p] {
                        return Err(format!("permutation entry {v}"));
                    }
                    seen[p] = true;
                    l.perm[k] = p;
                }
                for k in 0..d {
                    let s = src[d + k];
                    if s != 1.0 && s != -1.0 {
                        return Err(format!("diagonal sign {s}"));
                    }
                    l.sign[k] = s;
                }
                *src = &src[2 * d..];
            }
            FlowLayer::Coupling(_) | FlowLayer::Scale(_) => {}
        }
        Ok(())
    }
}
