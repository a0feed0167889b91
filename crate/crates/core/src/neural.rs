//! Dense feed-forward networks with hand-written backpropagation and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at the pre-activation; ReLU uses 0 at 0.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => f64::from(u8::from(pre > 0.0)),
            Activation::Identity => 1.0,
        }
    }
}

/// One affine map `y = act(W x + b)` with `W` stored row-major as out×in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    #[serde(skip)]
    pub activation: Option<Activation>,
}

impl Layer {
    fn act(&self) -> Activation {
        self.activation.unwrap_or(Activation::Identity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input to each layer; `inputs[0]` is the batch.
    pub inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pub pre: Vec<Matrix>,
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.iter_mut().zip(&b.w).for_each(|(x, y)| *x += y);
            a.b.iter_mut().zip(&b.b).for_each(|(x, y)| *x += y);
        }
    }

    /// Flattened view: every layer's weights then biases, layer by layer.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b).copied())
            .collect()
    }
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases. `activations` has one entry per layer.
    pub fn init(dims: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs at least an input and an output size, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("layer sizes must be positive, got {dims:?}")));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "{} activations for {} layers",
                activations.len(),
                dims.len() - 1
            )));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(io, &act)| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    rows: fan_out,
                    cols: fan_in,
                    w: (0..fan_in * fan_out)
                        .map(|_| rng.uniform_range(-limit, limit))
                        .collect(),
                    b: vec![0.0; fan_out],
                    activation: Some(act),
                }
            })
            .collect();
        Ok(DenseNet { layers })
    }

    /// ReLU on every layer except the last, which is identity.
    pub fn mlp(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let n = dims.len().saturating_sub(1);
        let mut acts = vec![Activation::Relu; n];
        if let Some(last) = acts.last_mut() {
            *last = Activation::Identity;
        }
        Self::init(dims, &acts, rng)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network without layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.w.len() != l.rows * l.cols || l.b.len() != l.rows {
                return Err(Error::Shape(format!("layer {i} parameter sizes do not match {}x{}", l.rows, l.cols)));
            }
            if l.w.iter().chain(&l.b).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].rows != pair[1].cols {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].rows,
                    i + 1,
                    pair[1].cols
                )));
            }
        }
        Ok(DenseNet { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].cols];
        d.extend(self.layers.iter().map(|l| l.rows));
        d
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(Layer::act).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.n_cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.n_cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardPass> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = batch.clone();
        for layer in &self.layers {
            let z = affine(layer, &cur);
            let mut a = z.clone();
            let act = layer.act();
            a.values_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            inputs.push(cur);
            pre.push(z);
            cur = a;
        }
        Ok(ForwardPass {
            inputs,
            pre,
            output: cur,
        })
    }

    /// Output only, without keeping intermediates.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut cur = batch.clone();
        for layer in &self.layers {
            let mut z = affine(layer, &cur);
            let act = layer.act();
            z.values_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            cur = z;
        }
        Ok(cur)
    }

    /// Parameter gradients and the gradient with respect to the batch.
    pub fn backward(&self, pass: &ForwardPass, grad_out: &Matrix) -> Result<(Gradients, Matrix)> {
        if grad_out.n_rows() != pass.output.n_rows() || grad_out.n_cols() != pass.output.n_cols() {
            return Err(Error::Shape(format!(
                "output gradient is {}x{}, output is {}x{}",
                grad_out.n_rows(),
                grad_out.n_cols(),
                pass.output.n_rows(),
                pass.output.n_cols()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_out.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &pass.inputs[li];
            let z = &pass.pre[li];
            let act = layer.act();
            let batch = input.n_rows();
            let (rows, cols) = (layer.rows, layer.cols);

            let mut delta = upstream;
            for (d, &p) in delta.values_mut().iter_mut().zip(z.values()) {
                *d *= act.derivative(p);
            }
            let mut gw = vec![0.0; rows * cols];
            let mut gb = vec![0.0; rows];
            let mut gin = Matrix::zeros(batch, cols);
            for r in 0..batch {
                let x = input.row(r);
                let dr = delta.row(r);
                let gin_row = gin.row_mut(r);
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let wrow = &layer.w[o * cols..(o + 1) * cols];
                    let gwrow = &mut gw[o * cols..(o + 1) * cols];
                    for k in 0..cols {
                        gwrow[k] += d * x[k];
                        gin_row[k] += d * wrow[k];
                    }
                }
            }
            grads.push(LayerGrad { w: gw, b: gb });
            upstream = gin;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, upstream))
    }

    pub fn to_file(&self) -> WeightsFile {
        WeightsFile {
            version: WEIGHTS_VERSION,
            dims: self.dims(),
            activations: self.activations(),
            layers: self.layers.clone(),
        }
    }

    pub fn from_file(file: WeightsFile) -> Result<Self> {
        if file.version != WEIGHTS_VERSION {
            return Err(Error::Version {
                expected: WEIGHTS_VERSION,
                found: file.version.to_string(),
            });
        }
        if file.activations.len() != file.layers.len() {
            return Err(Error::Shape(format!(
                "{} activations for {} layers",
                file.activations.len(),
                file.layers.len()
            )));
        }
        let layers: Vec<Layer> = file
            .layers
            .into_iter()
            .zip(file.activations)
            .map(|(mut l, a)| {
                l.activation = Some(a);
                l
            })
            .collect();
        let net = DenseNet::from_layers(layers)?;
        if net.dims() != file.dims {
            return Err(Error::Shape(format!(
                "declared dims {:?} but layers chain as {:?}",
                file.dims,
                net.dims()
            )));
        }
        Ok(net)
    }
}

fn affine(layer: &Layer, input: &Matrix) -> Matrix {
    let (rows, cols) = (layer.rows, layer.cols);
    let mut out = Matrix::zeros(input.n_rows(), rows);
    for r in 0..input.n_rows() {
        let x = input.row(r);
        let o = out.row_mut(r);
        for (j, oj) in o.iter_mut().enumerate() {
            let w = &layer.w[j * cols..(j + 1) * cols];
            *oj = layer.b[j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

/// Serialized network: `{version, dims, activations, layers:[{rows, cols, w, b}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub version: u32,
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub layers: Vec<Layer>,
}

/// Bias-corrected Adam moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(net: &DenseNet, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(Error::Shape("gradient layer count differs from network".into()));
        }
        for (i, (g, l)) in grads.layers.iter().zip(&net.layers).enumerate() {
            if g.w.len() != l.w.len() || g.b.len() != l.b.len() {
                return Err(Error::Shape(format!("gradient shape differs at layer {i}")));
            }
            if g.w.iter().chain(&g.b).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {i}")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = self.learning_rate;
        let eps = self.epsilon;
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let g = &grads.layers[li];
            let m = &mut self.m.layers[li];
            let v = &mut self.v.layers[li];
            update(&mut layer.w, &g.w, &mut m.w, &mut v.w);
            update(&mut layer.b, &g.b, &mut m.b, &mut v.b);
        }
        Ok(())
    }
}

/// Flattened parameters, same order as [`Gradients::flat`].
pub fn flat_params(net: &DenseNet) -> Vec<f64> {
    net.layers
        .iter()
        .flat_map(|l| l.w.iter().chain(&l.b).copied())
        .collect()
}

/// Overwrite parameter `k` of the flattened order.
pub fn set_flat_param(net: &mut DenseNet, mut k: usize, value: f64) {
    for l in &mut net.layers {
        if k < l.w.len() {
            l.w[k] = value;
            return;
        }
        k -= l.w.len();
        if k < l.b.len() {
            l.b[k] = value;
            return;
        }
        k -= l.b.len();
    }
    panic!("parameter index out of range");
}

/// Max relative error `|a − n| / max(|a|, |n|, 1e-6)` between analytic and
/// numeric gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    /// Loss `Σ output ⊙ probe` so its output gradient is `probe`.
    fn probe_loss(net: &DenseNet, x: &Matrix, probe: &Matrix) -> f64 {
        let out = net.predict(x).unwrap();
        out.values().iter().zip(probe.values()).map(|(a, b)| a * b).sum()
    }

    fn grad_check(dims: &[usize], acts: &[Activation], seed: u64) -> f64 {
        let mut rng = Rng::new(seed);
        let mut net = DenseNet::init(dims, acts, &mut rng).unwrap();
        // non-zero biases so ReLU kinks are not aligned with the origin
        for l in net.layers_mut() {
            l.b.iter_mut().for_each(|b| *b = rng.uniform_range(-0.1, 0.1));
        }
        let x = random_batch(&mut rng, 5, dims[0]);
        let probe = random_batch(&mut rng, 5, *dims.last().unwrap());
        let pass = net.forward(&x).unwrap();
        let (g, gin) = net.backward(&pass, &probe).unwrap();
        let analytic = g.flat();
        let h = 1e-5;
        let base = flat_params(&net);
        let mut numeric = Vec::with_capacity(base.len());
        for k in 0..base.len() {
            let mut plus = net.clone();
            set_flat_param(&mut plus, k, base[k] + h);
            let mut minus = net.clone();
            set_flat_param(&mut minus, k, base[k] - h);
            numeric.push((probe_loss(&plus, &x, &probe) - probe_loss(&minus, &x, &probe)) / (2.0 * h));
        }
        let mut in_numeric = Vec::new();
        for k in 0..x.values().len() {
            let mut xp = x.clone();
            xp.values_mut()[k] += h;
            let mut xm = x.clone();
            xm.values_mut()[k] -= h;
            in_numeric.push((probe_loss(&net, &xp, &probe) - probe_loss(&net, &xm, &probe)) / (2.0 * h));
        }
        max_relative_error(&analytic, &numeric).max(max_relative_error(gin.values(), &in_numeric))
    }

    #[test]
    fn finite_difference_gradient_5x4_to_3() {
        let err = grad_check(&[4, 5, 3], &[Activation::Relu, Activation::Identity], 1);
        assert!(err < 1e-4, "max relative error {err}");
        let err = grad_check(&[4, 3], &[Activation::Relu], 2);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn init_shapes_and_determinism() {
        let acts = [Activation::Relu; 3];
        let a = DenseNet::init(&[4, 8, 8, 32], &acts, &mut Rng::new(5)).unwrap();
        assert_eq!(a.layers().len(), 3);
        assert_eq!(a.dims(), vec![4, 8, 8, 32]);
        let b = DenseNet::init(&[4, 8, 8, 32], &acts, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(a.layers()[0].w.iter().all(|w| w.abs() <= limit));
        assert!(a.layers()[0].b.iter().all(|&b| b == 0.0));
        assert!(DenseNet::init(&[4], &[], &mut Rng::new(5)).is_err());
        assert!(DenseNet::init(&[4, 0], &[Activation::Relu], &mut Rng::new(5)).is_err());
    }

    #[test]
    fn identity_layer_forward() {
        let net = DenseNet::from_layers(vec![Layer {
            rows: 2,
            cols: 2,
            w: vec![1.0, 0.0, 0.0, 1.0],
            b: vec![0.0, 0.0],
            activation: Some(Activation::Identity),
        }])
        .unwrap();
        let x = Matrix::from_rows(&[vec![-3.0, 2.5], vec![0.5, -1.0]]).unwrap();
        assert_eq!(net.predict(&x).unwrap().values(), x.values());
        assert!(net.predict(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = Rng::new(3);
        let net = DenseNet::mlp(&[3, 4, 2], &mut rng).unwrap();
        let x = random_batch(&mut rng, 4, 3);
        let pass = net.forward(&x).unwrap();
        let (g, gin) = net.backward(&pass, &Matrix::zeros(4, 2)).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(gin.values().iter().all(|&v| v == 0.0));
    }

    fn scalar_net(w: f64) -> DenseNet {
        DenseNet::from_layers(vec![Layer {
            rows: 1,
            cols: 1,
            w: vec![w],
            b: vec![0.0],
            activation: Some(Activation::Identity),
        }])
        .unwrap()
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut net = scalar_net(1.0);
        let mut adam = AdamState::new(&net, 0.001);
        let g = Gradients {
            layers: vec![LayerGrad { w: vec![1.0], b: vec![0.0] }],
        };
        adam.step(&mut net, &g).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((net.layers()[0].w[0] - 0.999).abs() < 1e-9);
        assert_eq!(net.layers()[0].b[0], 0.0);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_zero_gradient_and_zero_rate_are_no_ops() {
        let mut net = DenseNet::mlp(&[3, 4, 2], &mut Rng::new(1)).unwrap();
        let before = net.clone();
        let mut adam = AdamState::new(&net, 0.001);
        adam.step(&mut net, &Gradients::zeros_like(&before)).unwrap();
        assert_eq!(net, before);

        let mut adam0 = AdamState::new(&net, 0.0);
        let mut g = Gradients::zeros_like(&before);
        g.layers[0].w.iter_mut().for_each(|w| *w = 0.3);
        adam0.step(&mut net, &g).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn adam_rejects_non_finite_and_names_layer() {
        let mut net = DenseNet::mlp(&[2, 2, 2], &mut Rng::new(1)).unwrap();
        let mut adam = AdamState::new(&net, 0.001);
        let mut g = Gradients::zeros_like(&net);
        g.layers[1].b[0] = f64::NAN;
        let err = adam.step(&mut net, &g).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
    }

    #[test]
    fn weights_file_roundtrip() {
        let net = DenseNet::mlp(&[3, 5, 2], &mut Rng::new(8)).unwrap();
        let json = serde_json::to_string(&net.to_file()).unwrap();
        let back = DenseNet::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(net, back);
        let mut f = net.to_file();
        f.version = 9;
        assert!(DenseNet::from_file(f).is_err());
    }
}
