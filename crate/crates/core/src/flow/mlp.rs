use crate::numerics::SeededRng;

/// Fully connected layer, `y = W x + b` with `W` stored row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Weights uniform in `±1/√fan_in`, zero bias.
    pub fn random(in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect();
        Self { in_dim, out_dim, weight, bias: vec![0.0; out_dim] }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], gy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_dim];
        for (o, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let base = o * self.in_dim;
            for i in 0..self.in_dim {
                grad.weight[base + i] += g * x[i];
                gx[i] += g * self.weight[base + i];
            }
        }
        gx
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Conditioner network: `hidden` rectified layers of `width` units followed
/// by a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetMlp {
    pub layers: Vec<Dense>,
}

impl SubnetMlp {
    /// Hidden layers are random, the output layer starts at zero.
    pub fn new(input: usize, output: usize, hidden: usize, width: usize, rng: &mut SeededRng) -> Self {
        let mut layers = Vec::with_capacity(hidden + 1);
        let mut fan_in = input;
        for _ in 0..hidden {
            layers.push(Dense::random(fan_in, width, rng));
            fan_in = width;
        }
        layers.push(Dense::zeros(fan_in, output));
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect() }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    /// Backpropagates `gout` (gradient w.r.t. the output), recomputing the
    /// forward activations from `x`.
    pub fn backward(&self, x: &[f64], gout: &[f64], grad: &mut SubnetMlp) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(&h);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut h, out));
        }
        let mut g = gout.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                // relu mask: the stored input of layer i+1 is the activation of layer i
                let act = &inputs[i + 1];
                for (gv, a) in g.iter_mut().zip(act) {
                    if *a <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            g = self.layers[i].backward(&inputs[i], &g, &mut grad.layers[i]);
        }
        g
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn read_params(&mut self, src: &mut &[f64]) {
        for l in &mut self.layers {
            take_into(src, &mut l.weight);
            take_into(src, &mut l.bias);
        }
    }
}

pub(crate) fn take_into(src: &mut &[f64], dst: &mut [f64]) {
    let (head, tail) = src.split_at(dst.len());
    dst.copy_from_slice(head);
    *src = tail;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    #[test]
    fn shapes_chain() {
        let mut rng = SeededRng::new(0);
        let net = SubnetMlp::new(3, 2, 2, 5, &mut rng);
        assert_eq!(net.layers.len(), 3);
        assert_eq!((net.layers[0].in_dim, net.layers[0].out_dim), (3, 5));
        assert_eq!((net.layers[1].in_dim, net.layers[1].out_dim), (5, 5));
        assert_eq!((net.layers[2].in_dim, net.layers[2].out_dim), (5, 2));
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(4);
        let mut net = SubnetMlp::new(2, 3, 2, 6, &mut rng);
        for l in &mut net.layers {
            l.weight.iter_mut().for_each(|w| *w = rng.normal());
            l.bias.iter_mut().for_each(|b| *b = 0.3 * rng.normal());
        }
        let x = [0.4, -0.9];
        let gout = [1.0, -0.5, 2.0];
        let mut grad = net.zeros_like();
        let gx = net.backward(&x, &gout, &mut grad);
        let f = |x: &[f64]| Ok(net.forward(x).iter().zip(&gout).map(|(a, b)| a * b).sum());
        let fd = finite_diff_grad(f, &x, 1e-6).unwrap();
        for (a, b) in gx.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "{a} {b}");
        }

        let mut params = Vec::new();
        net.write_params(&mut params);
        let mut analytic = Vec::new();
        grad.write_params(&mut analytic);
        let fd = finite_diff_grad(
            |p| {
                let mut n = net.clone();
                n.read_params(&mut &p[..]);
                Ok(n.forward(&x).iter().zip(&gout).map(|(a, b)| a * b).sum())
            },
            &params,
            1e-6,
        )
        .unwrap();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "{a} {b}");
        }
    }
}
