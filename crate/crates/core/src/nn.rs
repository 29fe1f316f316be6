//! Fully connected split models with hand-derived backpropagation.
//!
//! A layer computes `a = act(h · W + b)` with `W` stored `fan_in x fan_out`
//! and `b` as a `1 x fan_out` row. The forward pass records every pre- and
//! post-activation in a [`ForwardTape`], which [`MlpModel::backward`]
//! consumes to produce exact parameter gradients plus the gradient with
//! respect to the model input (the cut-layer gradient for the top model).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
    pub activation: Activation,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Layer>,
    param_version: u64,
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    input: DenseMatrix,
    pre: Vec<DenseMatrix>,
    post: Vec<DenseMatrix>,
}

impl ForwardTape {
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    pub fn output(&self) -> &DenseMatrix {
        self.post.last().unwrap_or(&self.input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

/// Gradients for every layer of a model, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrad>,
}

impl MlpModel {
    /// Builds a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.shape() != (1, layer.fan_out()) {
                return Err(Error::shape(
                    "MlpModel::from_layers",
                    format!("bias 1x{} in layer {k}", layer.fan_out()),
                    format!("{:?}", layer.bias.shape()),
                ));
            }
            if let Some(next) = layers.get(k + 1) {
                if next.fan_in() != layer.fan_out() {
                    return Err(Error::shape(
                        "MlpModel::from_layers",
                        format!("layer {} fan_in {}", k + 1, layer.fan_out()),
                        next.fan_in(),
                    ));
                }
            }
        }
        Ok(Self {
            layers,
            param_version: 0,
        })
    }

    /// Glorot-uniform initialisation, zero biases. `dims` lists every width
    /// from input to output; hidden layers use `hidden` and the last layer
    /// uses `output`.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("invalid layer widths {dims:?}")));
        }
        let n_layers = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Layer {
                    weight: DenseMatrix::from_vec(fan_in, fan_out, data).expect("sized"),
                    bias: DenseMatrix::zeros(1, fan_out),
                    activation: if k + 1 == n_layers { output } else { hidden },
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn param_version(&self) -> u64 {
        self.param_version
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Same depth, widths and activations.
    pub fn same_structure(&self, other: &MlpModel) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.activation == b.activation
            })
    }

    pub fn forward(&self, input: &DenseMatrix) -> Result<(DenseMatrix, ForwardTape)> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape("forward", self.input_dim(), input.cols()));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<DenseMatrix> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = post.last().unwrap_or(input);
            let mut z = h.matmul(&layer.weight)?;
            z.add_row_broadcast(&layer.bias)?;
            let act = layer.activation;
            let a = z.map(|v| act.apply(v));
            pre.push(z);
            post.push(a);
        }
        let output = post.last().cloned().expect("non-empty model");
        Ok((
            output,
            ForwardTape {
                input: input.clone(),
                pre,
                post,
            },
        ))
    }

    /// Output only, no tape.
    pub fn predict(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward(input)?.0)
    }

    pub fn backward(
        &self,
        tape: &ForwardTape,
        dloss_doutput: &DenseMatrix,
    ) -> Result<(ParamGrads, DenseMatrix)> {
        if tape.depth() != self.depth() || tape.input.cols() != self.input_dim() {
            return Err(Error::config("forward tape was not produced by this model"));
        }
        for (layer, z) in self.layers.iter().zip(&tape.pre) {
            if z.cols() != layer.fan_out() || z.rows() != tape.batch_size() {
                return Err(Error::config("forward tape was not produced by this model"));
            }
        }
        let expected = (tape.batch_size(), self.output_dim());
        if dloss_doutput.shape() != expected {
            return Err(Error::shape(
                "backward",
                format!("{expected:?}"),
                format!("{:?}", dloss_doutput.shape()),
            ));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = dloss_doutput.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let act = layer.activation;
            let delta = tape.pre[k].zip_map(&tape.post[k], |z, a| act.derivative(z, a))?;
            let delta = delta.zip_map(&upstream, |d, g| d * g)?;
            let h_prev = if k == 0 { &tape.input } else { &tape.post[k - 1] };
            let weight = h_prev.t_matmul(&delta)?;
            let bias = delta.sum_rows();
            upstream = delta.matmul_t(&layer.weight)?;
            grads.push(LayerGrad { weight, bias });
        }
        grads.reverse();
        Ok((ParamGrads { layers: grads }, upstream))
    }

    fn check_step(&self, grads: &ParamGrads, eta: f64, op: &'static str) -> Result<()> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {eta}")));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::shape(op, self.layers.len(), grads.layers.len()));
        }
        for (layer, g) in self.layers.iter().zip(&grads.layers) {
            if layer.weight.shape() != g.weight.shape() || layer.bias.shape() != g.bias.shape() {
                return Err(Error::shape(
                    op,
                    format!("{:?}", layer.weight.shape()),
                    format!("{:?}", g.weight.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Plain SGD: `θ ← θ − η ∇θ`.
    pub fn sgd_step(&mut self, grads: &ParamGrads, eta: f64) -> Result<()> {
        self.check_step(grads, eta, "sgd_step")?;
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weight.axpy_sub(eta, &g.weight)?;
            layer.bias.axpy_sub(eta, &g.bias)?;
        }
        self.param_version += 1;
        Ok(())
    }

    /// Overwrites parameters with `other`'s (a PS broadcast).
    pub fn load_params(&mut self, other: &MlpModel) -> Result<()> {
        if !self.same_structure(other) {
            return Err(Error::config("cannot load parameters from a different architecture"));
        }
        self.layers.clone_from(&other.layers);
        self.param_version = self.param_version.max(other.param_version) + 1;
        Ok(())
    }

    /// Flattened parameters (weights then bias, per layer).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

impl ParamGrads {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weight: DenseMatrix::zeros(l.fan_in(), l.fan_out()),
                    bias: DenseMatrix::zeros(1, l.fan_out()),
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(g.weight.as_slice());
            out.extend_from_slice(g.bias.as_slice());
        }
        out
    }
}

/// Elementwise mean of structurally identical models.
pub fn average_models(models: &[&MlpModel]) -> Result<MlpModel> {
    let (first, rest) = models
        .split_first()
        .ok_or_else(|| Error::config("cannot average an empty model list"))?;
    if rest.iter().any(|m| !first.same_structure(m)) {
        return Err(Error::config("cannot average models with different architectures"));
    }
    let mut out = (*first).clone();
    for m in rest {
        for (acc, l) in out.layers_mut().iter_mut().zip(m.layers()) {
            acc.weight.add_assign(&l.weight)?;
            acc.bias.add_assign(&l.bias)?;
        }
    }
    let k = models.len() as f64;
    for l in out.layers_mut() {
        for v in l.weight.as_mut_slice() {
            *v /= k;
        }
        for v in l.bias.as_mut_slice() {
            *v /= k;
        }
    }
    out.param_version = models.iter().map(|m| m.param_version).max().unwrap_or(0) + 1;
    Ok(out)
}

/// Update rule applied by workers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    /// Bias-corrected Adam with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::config(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-replica optimizer memory. Moments stay local to the worker; a
/// parameter-server broadcast replaces parameters only.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: Optimizer,
    steps: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, model: &MlpModel) -> Self {
        let n = match kind {
            Optimizer::Sgd => 0,
            Optimizer::Adam => model.param_count(),
        };
        Self {
            kind,
            steps: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn kind(&self) -> Optimizer {
        self.kind
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &ParamGrads, eta: f64) -> Result<()> {
        match self.kind {
            Optimizer::Sgd => model.sgd_step(grads, eta),
            Optimizer::Adam => {
                model.check_step(grads, eta, "adam_step")?;
                if self.m.len() != model.param_count() {
                    return Err(Error::shape("adam_step", self.m.len(), model.param_count()));
                }
                self.steps += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.steps as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(self.steps as i32);
                let mut k = 0;
                for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
                    let pairs = [
                        (layer.weight.as_mut_slice(), g.weight.as_slice()),
                        (layer.bias.as_mut_slice(), g.bias.as_slice()),
                    ];
                    for (params, gs) in pairs {
                        for (p, &gi) in params.iter_mut().zip(gs) {
                            self.m[k] = ADAM_BETA1 * self.m[k] + (1.0 - ADAM_BETA1) * gi;
                            self.v[k] = ADAM_BETA2 * self.v[k] + (1.0 - ADAM_BETA2) * gi * gi;
                            *p -= eta * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + ADAM_EPS);
                            k += 1;
                        }
                    }
                }
                model.param_version += 1;
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(weight: DenseMatrix, bias: DenseMatrix, activation: Activation) -> MlpModel {
        MlpModel::from_layers(vec![Layer {
            weight,
            bias,
            activation,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let model = single(DenseMatrix::identity(3), DenseMatrix::zeros(1, 3), Activation::Identity);
        let x = DenseMatrix::from_vec(2, 3, vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(model.predict(&x).unwrap(), x);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let model = single(DenseMatrix::zeros(1, 1), DenseMatrix::zeros(1, 1), Activation::Sigmoid);
        let out = model.predict(&DenseMatrix::column(vec![5.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.5]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let model = single(DenseMatrix::identity(3), DenseMatrix::zeros(1, 3), Activation::Identity);
        assert!(model.forward(&DenseMatrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn from_layers_rejects_broken_chain() {
        let l1 = Layer {
            weight: DenseMatrix::zeros(2, 3),
            bias: DenseMatrix::zeros(1, 3),
            activation: Activation::Relu,
        };
        let l2 = Layer {
            weight: DenseMatrix::zeros(4, 1),
            bias: DenseMatrix::zeros(1, 1),
            activation: Activation::Identity,
        };
        assert!(MlpModel::from_layers(vec![l1, l2]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MlpModel::init(&[4, 5, 2], Activation::Relu, Activation::Sigmoid, &mut rng).unwrap();
        let x = DenseMatrix::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.1 - 0.5).collect()).unwrap();
        let (_, tape) = model.forward(&x).unwrap();
        let (grads, dx) = model.backward(&tape, &DenseMatrix::zeros(3, 2)).unwrap();
        assert!(grads.flat().iter().all(|&g| g == 0.0));
        assert!(dx.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = MlpModel::init(&[4, 5, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let b = MlpModel::init(&[4, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let (_, tape) = b.forward(&DenseMatrix::zeros(1, 4)).unwrap();
        assert!(a.backward(&tape, &DenseMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn sgd_step_arithmetic_and_version() {
        let mut model = single(DenseMatrix::column(vec![1.0]), DenseMatrix::zeros(1, 1), Activation::Identity);
        let grads = ParamGrads {
            layers: vec![LayerGrad {
                weight: DenseMatrix::column(vec![2.0]),
                bias: DenseMatrix::zeros(1, 1),
            }],
        };
        model.sgd_step(&grads, 0.1).unwrap();
        assert!((model.layers()[0].weight.get(0, 0) - 0.8).abs() < 1e-15);
        assert_eq!(model.param_version(), 1);
        assert!(model.sgd_step(&grads, 0.0).is_err());
        assert!(model.sgd_step(&grads, -1.0).is_err());
        assert_eq!(model.param_version(), 1);
    }

    #[test]
    fn sgd_descends_quadratic_monotonically() {
        // L(w) = (w - 3)^2 through an identity layer with input 1: closed-form
        // iterate w_k = 3 + (w_0 - 3)(1 - 2η)^k.
        let mut model = single(DenseMatrix::column(vec![-1.0]), DenseMatrix::zeros(1, 1), Activation::Identity);
        let x = DenseMatrix::column(vec![1.0]);
        let eta = 0.1;
        let mut prev = f64::INFINITY;
        for k in 1..=60 {
            let (out, tape) = model.forward(&x).unwrap();
            let w = out.get(0, 0) - model.layers()[0].bias.get(0, 0);
            let loss = (w - 3.0).powi(2);
            assert!(loss <= prev);
            prev = loss;
            let dout = DenseMatrix::column(vec![2.0 * (w - 3.0)]);
            let (mut grads, _) = model.backward(&tape, &dout).unwrap();
            grads.layers[0].bias = DenseMatrix::zeros(1, 1);
            model.sgd_step(&grads, eta).unwrap();
            let expected = 3.0 + (-4.0) * (1.0 - 2.0 * eta).powi(k);
            assert!((model.layers()[0].weight.get(0, 0) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn average_of_two() {
        let a = single(DenseMatrix::column(vec![0.0]), DenseMatrix::zeros(1, 1), Activation::Identity);
        let b = single(DenseMatrix::column(vec![2.0]), DenseMatrix::zeros(1, 1), Activation::Identity);
        let avg = average_models(&[&a, &b]).unwrap();
        assert_eq!(avg.layers()[0].weight.get(0, 0), 1.0);
        assert_eq!(average_models(&[&a]).unwrap().layers(), a.layers());
        assert!(average_models(&[]).is_err());
    }

    #[test]
    fn average_rejects_mismatched_structure() {
        let a = single(DenseMatrix::column(vec![0.0]), DenseMatrix::zeros(1, 1), Activation::Identity);
        let b = single(DenseMatrix::column(vec![0.0]), DenseMatrix::zeros(1, 1), Activation::Relu);
        assert!(average_models(&[&a, &b]).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_eta() {
        // With bias correction the first update is eta * sign(g).
        let mut model = single(DenseMatrix::column(vec![1.0]), DenseMatrix::zeros(1, 1), Activation::Identity);
        let grads = ParamGrads {
            layers: vec![LayerGrad {
                weight: DenseMatrix::column(vec![2.0]),
                bias: DenseMatrix::from_vec(1, 1, vec![-3.0]).unwrap(),
            }],
        };
        let mut opt = OptimizerState::new(Optimizer::Adam, &model);
        opt.step(&mut model, &grads, 0.01).unwrap();
        assert!((model.layers()[0].weight.get(0, 0) - 0.99).abs() < 1e-9);
        assert!((model.layers()[0].bias.get(0, 0) - 0.01).abs() < 1e-9);
        assert_eq!(model.param_version(), 1);
        assert!(opt.step(&mut model, &grads, 0.0).is_err());
    }

    #[test]
    fn sgd_state_matches_plain_step() {
        let mut a = single(DenseMatrix::column(vec![1.0]), DenseMatrix::zeros(1, 1), Activation::Identity);
        let mut b = a.clone();
        let grads = ParamGrads::zeros_like(&a);
        a.sgd_step(&grads, 0.1).unwrap();
        OptimizerState::new(Optimizer::Sgd, &b).step(&mut b, &grads, 0.1).unwrap();
        assert_eq!(a, b);
    }
}
