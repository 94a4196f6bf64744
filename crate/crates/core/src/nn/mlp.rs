use serde::{Deserialize, Serialize};

use super::Tensor2;
use crate::error::{PamError, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture descriptor: layer widths plus one activation per layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpShape {
    /// Tanh on every hidden layer, identity on the output layer.
    pub fn tanh_hidden(dims: &[usize]) -> Self {
        let n = dims.len().saturating_sub(1);
        let activations = (0..n)
            .map(|i| {
                if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Tanh
                }
            })
            .collect();
        Self {
            dims: dims.to_vec(),
            activations,
        }
    }

    /// Tanh on every layer including the output.
    pub fn all_tanh(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            activations: vec![Activation::Tanh; dims.len().saturating_sub(1)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.activations.len() + 1 != self.dims.len() {
            return Err(PamError::config(format!("malformed MLP shape {self:?}")));
        }
        if self.dims.contains(&0) {
            return Err(PamError::config("MLP layer of width 0"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`.
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Feed-forward network. The same type doubles as the gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer activations from a batched forward pass, kept for backward.
#[derive(Clone, Debug)]
pub struct Trace {
    activations: Vec<Tensor2>,
}

impl Trace {
    pub fn output(&self) -> &Tensor2 {
        self.activations.last().expect("trace has input")
    }

    pub fn input(&self) -> &Tensor2 {
        &self.activations[0]
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(PamError::config("MLP needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.rows() {
                return Err(PamError::config(format!("layer {i}: bias/weight mismatch")));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(PamError::config(format!(
                    "layer {i} expects input {} but previous layer emits {}",
                    l.weight.cols(),
                    layers[i - 1].weight.rows()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(shape: &MlpShape) -> Result<Self> {
        shape.validate()?;
        let layers = shape
            .dims
            .windows(2)
            .zip(&shape.activations)
            .map(|(w, &activation)| Layer {
                weight: Tensor2::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
                activation,
            })
            .collect();
        Ok(Self { layers })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(shape: &MlpShape, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(shape)?;
        for layer in &mut net.layers {
            let fan_in = layer.weight.cols() as f64;
            let fan_out = layer.weight.rows() as f64;
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.uniform_range(-limit, limit);
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn shape(&self) -> MlpShape {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.rows()));
        MlpShape {
            dims,
            activations: self.layers.iter().map(|l| l.activation).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape()).expect("shape of a valid net")
    }

    /// Parameters in layer order: weights row-major then bias, per layer.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        self.flatten_into(&mut v);
        v
    }

    /// Inverse of [`Mlp::flatten_into`]; returns how many values were consumed.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<usize> {
        if flat.len() < self.param_count() {
            return Err(PamError::config(format!(
                "flat parameter array too short: {} < {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(off)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Mlp, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = self.single_row(input)?;
        Ok(self.forward_batch(&x)?.into_data())
    }

    /// Gradients of `<forward(input), output_grad>` with respect to every
    /// parameter and to the input.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        if output_grad.len() != self.output_dim() {
            return Err(PamError::config(format!(
                "output grad length {} != output dim {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        let trace = self.forward_trace(self.single_row(input)?)?;
        let mut grads = self.zeros_like();
        let g = Tensor2::from_vec(1, output_grad.len(), output_grad.to_vec())?;
        let gin = self.backward_trace(&trace, g, &mut grads);
        Ok((grads, gin.into_data()))
    }

    fn single_row(&self, input: &[f64]) -> Result<Tensor2> {
        if input.len() != self.input_dim() {
            return Err(PamError::config(format!(
                "input length {} != network input dim {}",
                input.len(),
                self.input_dim()
            )));
        }
        Tensor2::from_vec(1, input.len(), input.to_vec())
    }

    /// Row-wise forward pass over a `batch x input_dim` matrix.
    pub fn forward_batch(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.input_dim() {
            return Err(PamError::config(format!(
                "batch width {} != network input dim {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut cur: Option<Tensor2> = None;
        for l in &self.layers {
            let inp = cur.as_ref().unwrap_or(x);
            cur = Some(Self::layer_forward(l, inp));
        }
        let out = cur.expect("nonempty");
        if !out.is_finite() {
            return Err(PamError::non_finite("network forward"));
        }
        Ok(out)
    }

    pub fn forward_trace(&self, x: Tensor2) -> Result<Trace> {
        if x.cols() != self.input_dim() {
            return Err(PamError::config(format!(
                "batch width {} != network input dim {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x);
        for l in &self.layers {
            let y = Self::layer_forward(l, activations.last().expect("nonempty"));
            activations.push(y);
        }
        let trace = Trace { activations };
        if !trace.output().is_finite() {
            return Err(PamError::non_finite("network forward"));
        }
        Ok(trace)
    }

    fn layer_forward(l: &Layer, x: &Tensor2) -> Tensor2 {
        let mut y = Tensor2::zeros(x.rows(), l.weight.rows());
        Tensor2::gemm(1.0, x, false, &l.weight, true, 0.0, &mut y);
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&l.bias) {
                *v = l.activation.apply(*v + b);
            }
        }
        y
    }

    /// Accumulates parameter gradients of `sum(output * grad_out)` into
    /// `grads` and returns the gradient with respect to the batch input.
    pub fn backward_trace(&self, trace: &Trace, grad_out: Tensor2, grads: &mut Mlp) -> Tensor2 {
        let mut g = grad_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let y = &trace.activations[i + 1];
            let x = &trace.activations[i];
            if l.activation != Activation::Identity {
                for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                    *gv *= l.activation.derivative_from_output(*yv);
                }
            }
            let gl = &mut grads.layers[i];
            Tensor2::gemm(1.0, &g, true, x, false, 1.0, &mut gl.weight);
            for r in 0..g.rows() {
                for (b, gv) in gl.bias.iter_mut().zip(g.row(r)) {
                    *b += gv;
                }
            }
            let mut gx = Tensor2::zeros(g.rows(), l.weight.cols());
            Tensor2::gemm(1.0, &g, false, &l.weight, false, 0.0, &mut gx);
            g = gx;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straightforward second implementation used as a reference.
    fn naive_forward(net: &Mlp, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        for l in net.layers() {
            let mut y = vec![0.0; l.weight.rows()];
            for (r, yv) in y.iter_mut().enumerate() {
                let mut s = l.bias[r];
                for (c, xv) in x.iter().enumerate() {
                    s += l.weight.get(r, c) * xv;
                }
                *yv = match l.activation {
                    Activation::Tanh => s.tanh(),
                    Activation::Identity => s,
                };
            }
            x = y;
        }
        x
    }

    fn loss(net: &Mlp, input: &[f64], og: &[f64]) -> f64 {
        net.forward(input)
            .unwrap()
            .iter()
            .zip(og)
            .map(|(a, b)| a * b)
            .sum()
    }

    #[test]
    fn zero_net_gives_zero() {
        let net = Mlp::zeros(&MlpShape::tanh_hidden(&[3, 5, 2])).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let net = Mlp::from_layers(vec![Layer {
            weight: Tensor2::identity(3),
            bias: vec![0.0; 3],
            activation: Activation::Identity,
        }])
        .unwrap();
        let v = [0.3, -1.5, 2.0];
        assert_eq!(net.forward(&v).unwrap(), v.to_vec());
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = Rng::new(11);
        for trial in 0..20 {
            let net = Mlp::init(&MlpShape::tanh_hidden(&[4, 7, 6, 3]), &mut rng).unwrap();
            let x = rng.normal_vec(4);
            let a = net.forward(&x).unwrap();
            let b = naive_forward(&net, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12, "trial {trial}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let net = Mlp::zeros(&MlpShape::tanh_hidden(&[3, 2])).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(PamError::Config(_))));
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
        let bad = Mlp::from_layers(vec![
            Layer {
                weight: Tensor2::zeros(4, 2),
                bias: vec![0.0; 4],
                activation: Activation::Tanh,
            },
            Layer {
                weight: Tensor2::zeros(1, 3),
                bias: vec![0.0; 1],
                activation: Activation::Identity,
            },
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let mut rng = Rng::new(5);
        let net = Mlp::init(&MlpShape::tanh_hidden(&[3, 4, 2]), &mut rng).unwrap();
        let (g, gin) = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(gin.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_analytic_gradient() {
        let mut rng = Rng::new(9);
        let net = Mlp::init(&MlpShape::tanh_hidden(&[3, 2]), &mut rng).unwrap();
        let x = [0.5, -1.0, 2.0];
        let g = [1.5, -0.25];
        let (grads, gin) = net.backward(&x, &g).unwrap();
        let l = &grads.layers()[0];
        for r in 0..2 {
            for c in 0..3 {
                assert!((l.weight.get(r, c) - g[r] * x[c]).abs() < 1e-15);
            }
            assert_eq!(l.bias[r], g[r]);
        }
        let w = &net.layers()[0].weight;
        for c in 0..3 {
            let expect = g[0] * w.get(0, c) + g[1] * w.get(1, c);
            assert!((gin[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let h = 1e-5;
        for _ in 0..10 {
            let net = Mlp::init(&MlpShape::tanh_hidden(&[3, 5, 4, 2]), &mut rng).unwrap();
            let x = rng.normal_vec(3);
            let og = rng.normal_vec(2);
            let (grads, gin) = net.backward(&x, &og).unwrap();
            let flat = net.flatten();
            let gflat = grads.flatten();
            for i in 0..flat.len() {
                let mut p = net.clone();
                let mut f = flat.clone();
                f[i] += h;
                p.load_flat(&f).unwrap();
                let up = loss(&p, &x, &og);
                f[i] -= 2.0 * h;
                p.load_flat(&f).unwrap();
                let down = loss(&p, &x, &og);
                let fd = (up - down) / (2.0 * h);
                let err = (fd - gflat[i]).abs() / fd.abs().max(gflat[i].abs()).max(1e-3);
                assert!(err < 1e-4, "param {i}: fd {fd} analytic {}", gflat[i]);
            }
            for i in 0..3 {
                let mut xp = x.clone();
                xp[i] += h;
                let up = loss(&net, &xp, &og);
                xp[i] -= 2.0 * h;
                let down = loss(&net, &xp, &og);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - gin[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let mut rng = Rng::new(2);
        let net = Mlp::init(&MlpShape::tanh_hidden(&[6, 16, 3]), &mut rng).unwrap();
        let x = rng.normal_vec(6);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = Rng::new(3);
        let net = Mlp::init(&MlpShape::tanh_hidden(&[2, 3, 1]), &mut rng).unwrap();
        let mut other = net.zeros_like();
        assert_eq!(other.load_flat(&net.flatten()).unwrap(), net.param_count());
        assert_eq!(other, net);
        assert_eq!(net.param_count(), net.shape().param_count());
    }
}
