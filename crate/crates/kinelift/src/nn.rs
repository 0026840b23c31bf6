//! Minimal feed-forward networks with exact reverse-mode gradients.
//!
//! Two small MLPs drive the lifting pipeline: an angle network whose sigmoid
//! output feeds the limit re-scaling, and a bone network whose softplus
//! output is positive by construction. No external ML framework is involved;
//! forward, backward, and initialization are implemented directly on
//! `nalgebra` matrices.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::NormalizationSpec;
use crate::scalar::{real, Real};

/// Per-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
    Linear,
}

impl Activation {
    pub fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    z
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
            Activation::Linear => z,
        }
    }

    /// Derivative at pre-activation `z` with activation value `a`.
    fn derivative<T: Real>(self, z: T, a: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => a * (T::one() - a),
            Activation::Softplus => sigmoid(z),
            Activation::Linear => T::one(),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + e^z)`; strictly positive for all finite `z`.
pub fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Inverse of [`sigmoid`].
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// How the final layer keeps outputs in their valid domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputConstraint {
    /// Sigmoid output in (0, 1), re-scaled into angle limits downstream.
    AngleRange,
    /// Softplus output, strictly positive lengths.
    PositiveLength,
    None,
}

impl OutputConstraint {
    pub fn required_activation(self) -> Option<Activation> {
        match self {
            OutputConstraint::AngleRange => Some(Activation::Sigmoid),
            OutputConstraint::PositiveLength => Some(Activation::Softplus),
            OutputConstraint::None => None,
        }
    }
}

/// One dense layer: `a = act(W x + b)` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weights: DMatrix<T>,
    pub bias: DVector<T>,
    pub activation: Activation,
}

impl<T: Real> Layer<T> {
    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// A feed-forward network plus its output-constraint tag.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T> {
    layers: Vec<Layer<T>>,
    output_constraint: OutputConstraint,
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error(
        "output constraint {constraint:?} requires final activation {required:?}, found {found:?}"
    )]
    ConstraintActivationMismatch {
        constraint: OutputConstraint,
        required: Activation,
        found: Activation,
    },
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("unknown output constraint `{0}`")]
    UnknownConstraint(String),
    #[error("failed to parse model JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl<T: Real> MlpModel<T> {
    /// Assembles a model from explicit layers, checking the dimension chain
    /// and the constraint/activation pairing.
    pub fn new(layers: Vec<Layer<T>>, output_constraint: OutputConstraint) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::InvalidArchitecture("no layers".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(NnError::ShapeMismatch(format!(
                    "layer {i}: bias length {} != output dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if i > 0 && layer.in_dim() != layers[i - 1].out_dim() {
                return Err(NnError::ShapeMismatch(format!(
                    "layer {i}: input dim {} != previous output dim {}",
                    layer.in_dim(),
                    layers[i - 1].out_dim()
                )));
            }
        }
        let found = layers.last().expect("nonempty").activation;
        if let Some(required) = output_constraint.required_activation() {
            if found != required {
                return Err(NnError::ConstraintActivationMismatch {
                    constraint: output_constraint,
                    required,
                    found,
                });
            }
        }
        Ok(Self {
            layers,
            output_constraint,
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn output_constraint(&self) -> OutputConstraint {
        self.output_constraint
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Appends all parameters (per layer: weights row-major, then bias).
    pub fn write_params(&self, out: &mut Vec<T>) {
        for layer in &self.layers {
            for r in 0..layer.out_dim() {
                for c in 0..layer.in_dim() {
                    out.push(layer.weights[(r, c)]);
                }
            }
            out.extend(layer.bias.iter().copied());
        }
    }

    /// Overwrites all parameters from the flat layout of [`Self::write_params`].
    pub fn read_params(&mut self, flat: &[T]) -> Result<(), NnError> {
        if flat.len() != self.param_count() {
            return Err(NnError::ShapeMismatch(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut k = 0;
        for layer in &mut self.layers {
            for r in 0..layer.weights.nrows() {
                for c in 0..layer.weights.ncols() {
                    layer.weights[(r, c)] = flat[k];
                    k += 1;
                }
            }
            for b in layer.bias.iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
        Ok(())
    }
}

/// Architecture description: hidden widths between fixed input/output widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub output_width: usize,
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: Activation,
    pub output_constraint: OutputConstraint,
}

fn default_hidden_activation() -> Activation {
    Activation::Relu
}

impl ArchitectureSpec {
    /// Default angle network: 4 hidden layers of 256 ReLU units, sigmoid out.
    pub fn default_angle_net(input_width: usize, output_width: usize) -> Self {
        Self {
            input_width,
            hidden: vec![256; 4],
            output_width,
            hidden_activation: Activation::Relu,
            output_constraint: OutputConstraint::AngleRange,
        }
    }

    /// Default bone network: two layers (one hidden of 64), softplus out.
    pub fn default_bone_net(input_width: usize, output_width: usize) -> Self {
        Self {
            input_width,
            hidden: vec![64],
            output_width,
            hidden_activation: Activation::Relu,
            output_constraint: OutputConstraint::PositiveLength,
        }
    }
}

/// Deterministically initializes a model: weights uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_model<T: Real>(arch: &ArchitectureSpec, seed: u64) -> Result<MlpModel<T>, NnError> {
    if arch.input_width == 0 || arch.output_width == 0 {
        return Err(NnError::InvalidArchitecture(
            "input and output widths must be positive".into(),
        ));
    }
    if arch.hidden.iter().any(|&h| h == 0) {
        return Err(NnError::InvalidArchitecture(
            "hidden widths must be positive".into(),
        ));
    }
    let mut dims = Vec::with_capacity(arch.hidden.len() + 2);
    dims.push(arch.input_width);
    dims.extend_from_slice(&arch.hidden);
    dims.push(arch.output_width);

    let final_activation = arch
        .output_constraint
        .required_activation()
        .unwrap_or(Activation::Linear);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for w in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[w], dims[w + 1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| {
            real::<T>(rng.random_range(-bound..bound))
        });
        let activation = if w + 1 == dims.len() - 1 {
            final_activation
        } else {
            arch.hidden_activation
        };
        layers.push(Layer {
            weights,
            bias: DVector::zeros(fan_out),
            activation,
        });
    }
    MlpModel::new(layers, arch.output_constraint)
}

/// Pre-activations and activations of one forward pass, consumed by
/// [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input: DVector<T>,
    pre: Vec<DVector<T>>,
    post: Vec<DVector<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> &DVector<T> {
        self.post.last().expect("cache has at least one layer")
    }
}

/// Runs the network on a flat input vector, returning the output and the
/// cached activations needed for the backward pass.
pub fn mlp_forward<T: Real>(
    model: &MlpModel<T>,
    input: &[T],
) -> Result<(Vec<T>, ForwardCache<T>), NnError> {
    if input.len() != model.input_width() {
        return Err(NnError::ShapeMismatch(format!(
            "input has {} entries, model expects {}",
            input.len(),
            model.input_width()
        )));
    }
    let input = DVector::from_row_slice(input);
    let mut pre = Vec::with_capacity(model.n_layers());
    let mut post = Vec::with_capacity(model.n_layers());
    let mut current = input.clone();
    for layer in &model.layers {
        let mut z = &layer.weights * &current;
        z += &layer.bias;
        let a = z.map(|v| layer.activation.apply(v));
        pre.push(z);
        current = a.clone();
        post.push(a);
    }
    Ok((
        current.as_slice().to_vec(),
        ForwardCache { input, pre, post },
    ))
}

/// Per-layer parameter gradients, shape-congruent with the model.
#[derive(Debug, Clone)]
pub struct GradientSet<T> {
    pub d_weights: Vec<DMatrix<T>>,
    pub d_bias: Vec<DVector<T>>,
}

impl<T: Real> GradientSet<T> {
    /// All-zero gradients for `model`.
    pub fn zeros(model: &MlpModel<T>) -> Self {
        Self {
            d_weights: model
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            d_bias: model
                .layers
                .iter()
                .map(|l| DVector::zeros(l.out_dim()))
                .collect(),
        }
    }

    /// Accumulates `other` scaled by `factor`.
    pub fn add_scaled(&mut self, other: &GradientSet<T>, factor: T) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            a.zip_apply(b, |x, y| *x += y * factor);
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            a.zip_apply(b, |x, y| *x += y * factor);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for w in &mut self.d_weights {
            w.apply(|x| *x *= factor);
        }
        for b in &mut self.d_bias {
            b.apply(|x| *x *= factor);
        }
    }

    /// Appends gradients in the same flat layout as `MlpModel::write_params`.
    pub fn write_flat(&self, out: &mut Vec<T>) {
        for (w, b) in self.d_weights.iter().zip(&self.d_bias) {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out.push(w[(r, c)]);
                }
            }
            out.extend(b.iter().copied());
        }
    }
}

/// Exact reverse-mode gradients of a scalar loss with respect to all weights
/// and biases, given `d loss / d output`.
pub fn mlp_backward<T: Real>(
    model: &MlpModel<T>,
    cache: &ForwardCache<T>,
    output_grad: &[T],
) -> Result<GradientSet<T>, NnError> {
    if output_grad.len() != model.output_width() {
        return Err(NnError::ShapeMismatch(format!(
            "output gradient has {} entries, model produces {}",
            output_grad.len(),
            model.output_width()
        )));
    }
    if cache.pre.len() != model.n_layers() {
        return Err(NnError::ShapeMismatch(format!(
            "cache has {} layers, model has {}",
            cache.pre.len(),
            model.n_layers()
        )));
    }
    let mut grads = GradientSet::zeros(model);
    let mut delta = DVector::from_row_slice(output_grad);
    for (l, layer) in model.layers.iter().enumerate().rev() {
        let z = &cache.pre[l];
        let a = &cache.post[l];
        for i in 0..delta.len() {
            delta[i] *= layer.activation.derivative(z[i], a[i]);
        }
        let layer_input = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        grads.d_weights[l].gemm(T::one(), &delta, &layer_input.transpose(), T::zero());
        grads.d_bias[l].copy_from(&delta);
        if l > 0 {
            delta = layer.weights.tr_mul(&delta);
        }
    }
    Ok(grads)
}

// --- Model file schema ----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerFile {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    act: Activation,
}

/// On-disk model: architecture, weights, constraint, and the skeleton name
/// plus input normalization the model was trained with.
#[derive(Serialize, Deserialize)]
pub struct ModelFile {
    pub arch: ArchitectureSpec,
    layers: Vec<LayerFile>,
    pub output_constraint: OutputConstraint,
    pub skeleton: String,
    pub normalization: NormalizationSpec,
}

impl ModelFile {
    pub fn from_model<T: Real>(
        model: &MlpModel<T>,
        arch: &ArchitectureSpec,
        skeleton: impl Into<String>,
        normalization: NormalizationSpec,
    ) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| LayerFile {
                w: (0..l.out_dim())
                    .map(|r| (0..l.in_dim()).map(|c| l.weights[(r, c)].to_f64c()).collect())
                    .collect(),
                b: l.bias.iter().map(|v| v.to_f64c()).collect(),
                act: l.activation,
            })
            .collect();
        ModelFile {
            arch: arch.clone(),
            layers,
            output_constraint: model.output_constraint,
            skeleton: skeleton.into(),
            normalization,
        }
    }

    /// Rebuilds the model, validating the shape chain.
    pub fn to_model<T: Real>(&self) -> Result<MlpModel<T>, NnError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, lf) in self.layers.iter().enumerate() {
            let rows = lf.w.len();
            let cols = lf.w.first().map_or(0, |r| r.len());
            if lf.w.iter().any(|r| r.len() != cols) {
                return Err(NnError::ShapeMismatch(format!(
                    "layer {i}: ragged weight rows"
                )));
            }
            let weights = DMatrix::from_fn(rows, cols, |r, c| real::<T>(lf.w[r][c]));
            let bias = DVector::from_iterator(lf.b.len(), lf.b.iter().map(|&v| real::<T>(v)));
            layers.push(Layer {
                weights,
                bias,
                activation: lf.act,
            });
        }
        let model = MlpModel::new(layers, self.output_constraint)?;
        if model.input_width() != self.arch.input_width
            || model.output_width() != self.arch.output_width
        {
            return Err(NnError::ShapeMismatch(format!(
                "declared architecture {}x{} does not match layers {}x{}",
                self.arch.input_width,
                self.arch.output_width,
                model.input_width(),
                model.output_width()
            )));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self, NnError> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), NnError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, NnError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;

    fn identity_model(n: usize) -> MlpModel<f64> {
        MlpModel::new(
            vec![Layer {
                weights: DMatrix::identity(n, n),
                bias: DVector::zeros(n),
                activation: Activation::Linear,
            }],
            OutputConstraint::None,
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let model = identity_model(3);
        let (out, _) = mlp_forward(&model, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn sigmoid_outputs_strictly_in_unit_interval() {
        let arch = ArchitectureSpec::default_angle_net(8, 5);
        let model = init_model::<f64>(&arch, 0).unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..100 {
            let input: Vec<f64> = (0..8).map(|_| rng.random_range(-100.0..100.0)).collect();
            let (out, _) = mlp_forward(&model, &input).unwrap();
            for v in out {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn two_layer_forward_matches_hand_computation() {
        // Layer 1: W = [[1, 2], [0, -1]], b = (0.5, 0), ReLU.
        // Layer 2: W = [[1, 1]], b = (-0.25), linear.
        let model = MlpModel::new(
            vec![
                Layer {
                    weights: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, -1.0]),
                    bias: DVector::from_row_slice(&[0.5, 0.0]),
                    activation: Activation::Relu,
                },
                Layer {
                    weights: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                    bias: DVector::from_row_slice(&[-0.25]),
                    activation: Activation::Linear,
                },
            ],
            OutputConstraint::None,
        )
        .unwrap();
        // Input (1, -2): z1 = (1 - 4 + 0.5, 2) = (-2.5, 2) -> relu (0, 2).
        // z2 = 0 + 2 - 0.25 = 1.75.
        let (out, _) = mlp_forward(&model, &[1.0, -2.0]).unwrap();
        assert_relative_eq!(out[0], 1.75, epsilon = 1e-15);
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let arch = ArchitectureSpec::default_bone_net(4, 3);
        let model = init_model::<f64>(&arch, 7).unwrap();
        let (_, cache) = mlp_forward(&model, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let grads = mlp_backward(&model, &cache, &[0.0, 0.0, 0.0]).unwrap();
        for w in &grads.d_weights {
            assert!(w.iter().all(|&v| v == 0.0));
        }
        for b in &grads.d_bias {
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_least_squares_gradient_closed_form() {
        // Single linear layer, L = 0.5 ||y - target||^2: dL/dW = (y - target) x^T.
        let model = MlpModel::new(
            vec![Layer {
                weights: DMatrix::from_row_slice(2, 3, &[0.5, -1.0, 2.0, 0.0, 1.0, -0.5]),
                bias: DVector::zeros(2),
                activation: Activation::Linear,
            }],
            OutputConstraint::None,
        )
        .unwrap();
        let x = [1.0, -2.0, 0.5];
        let target = [1.0, 0.0];
        let (y, cache) = mlp_forward(&model, &x).unwrap();
        let residual: Vec<f64> = y.iter().zip(target).map(|(a, b)| a - b).collect();
        let grads = mlp_backward(&model, &cache, &residual).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_relative_eq!(grads.d_weights[0][(r, c)], residual[r] * x[c], epsilon = 1e-14);
            }
        }
    }

    /// Finite-difference oracle over every parameter of a small random net.
    #[test]
    fn backward_matches_finite_differences() {
        let arch = ArchitectureSpec {
            input_width: 5,
            hidden: vec![7, 6],
            output_width: 4,
            hidden_activation: Activation::Relu,
            output_constraint: OutputConstraint::AngleRange,
        };
        let mut rng = StdRng::seed_from_u64(2);
        let mut checked = 0;
        for trial in 0..24 {
            let mut model = init_model::<f64>(&arch, trial).unwrap();
            let input: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();

            // Central differences are invalid across a ReLU kink; skip draws
            // where any pre-activation sits within perturbation reach of one.
            {
                let (_, cache) = mlp_forward(&model, &input).unwrap();
                let near_kink = model
                    .layers()
                    .iter()
                    .zip(&cache.pre)
                    .any(|(layer, z)| {
                        layer.activation == Activation::Relu
                            && z.iter().any(|v| v.abs() < 1e-4)
                    });
                if near_kink {
                    continue;
                }
            }
            checked += 1;

            let loss = |m: &MlpModel<f64>| {
                let (y, _) = mlp_forward(m, &input).unwrap();
                0.5 * y
                    .iter()
                    .zip(&target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            };

            let (y, cache) = mlp_forward(&model, &input).unwrap();
            let residual: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
            let grads = mlp_backward(&model, &cache, &residual).unwrap();

            let mut flat = Vec::new();
            model.write_params(&mut flat);
            let mut grad_flat = Vec::new();
            grads.write_flat(&mut grad_flat);

            let eps = 1e-6;
            let mut max_err: f64 = 0.0;
            for p in 0..flat.len() {
                let orig = flat[p];
                flat[p] = orig + eps;
                model.read_params(&flat).unwrap();
                let hi = loss(&model);
                flat[p] = orig - eps;
                model.read_params(&flat).unwrap();
                let lo = loss(&model);
                flat[p] = orig;
                model.read_params(&flat).unwrap();
                max_err = max_err.max((grad_flat[p] - (hi - lo) / (2.0 * eps)).abs());
            }
            assert!(max_err < 1e-6, "trial {trial}: max abs error {max_err}");
        }
        assert!(checked >= 20, "only {checked} kink-free trials");
    }

    #[test]
    fn init_is_deterministic() {
        let arch = ArchitectureSpec::default_angle_net(38, 22);
        let a = init_model::<f64>(&arch, 99).unwrap();
        let b = init_model::<f64>(&arch, 99).unwrap();
        assert_eq!(a, b);
        let c = init_model::<f64>(&arch, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_architectures() {
        let angle = init_model::<f64>(&ArchitectureSpec::default_angle_net(38, 22), 0).unwrap();
        assert_eq!(angle.input_width(), 38);
        assert_eq!(angle.output_width(), 22);
        assert_eq!(angle.layers().last().unwrap().activation, Activation::Sigmoid);

        let bone = init_model::<f64>(&ArchitectureSpec::default_bone_net(38, 18), 0).unwrap();
        assert_eq!(bone.n_layers(), 2);
        assert_eq!(bone.layers().last().unwrap().activation, Activation::Softplus);
    }

    #[test]
    fn softplus_outputs_strictly_positive() {
        let model = init_model::<f64>(&ArchitectureSpec::default_bone_net(6, 4), 3).unwrap();
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..200 {
            let input: Vec<f64> = (0..6).map(|_| rng.random_range(-50.0..50.0)).collect();
            let (out, _) = mlp_forward(&model, &input).unwrap();
            assert!(out.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn invalid_architecture_rejected() {
        let arch = ArchitectureSpec {
            input_width: 0,
            hidden: vec![4],
            output_width: 2,
            hidden_activation: Activation::Relu,
            output_constraint: OutputConstraint::None,
        };
        assert!(matches!(
            init_model::<f64>(&arch, 0),
            Err(NnError::InvalidArchitecture(_))
        ));
    }

    #[test]
    fn constraint_activation_pairing_enforced() {
        let layer = Layer {
            weights: DMatrix::<f64>::identity(2, 2),
            bias: DVector::zeros(2),
            activation: Activation::Linear,
        };
        assert!(matches!(
            MlpModel::new(vec![layer], OutputConstraint::AngleRange),
            Err(NnError::ConstraintActivationMismatch { .. })
        ));
    }

    #[test]
    fn model_file_round_trips() {
        let arch = ArchitectureSpec::default_bone_net(10, 5);
        let model = init_model::<f64>(&arch, 42).unwrap();
        let file = ModelFile::from_model(
            &model,
            &arch,
            "hand26",
            NormalizationSpec::hand_default(0, 3),
        );
        let parsed = ModelFile::from_json(&file.to_json()).unwrap();
        let again: MlpModel<f64> = parsed.to_model().unwrap();
        assert_eq!(model, again);
        assert_eq!(parsed.skeleton, "hand26");
    }

    #[test]
    fn model_file_shape_chain_validated() {
        let arch = ArchitectureSpec::default_bone_net(4, 2);
        let model = init_model::<f64>(&arch, 0).unwrap();
        let file = ModelFile::from_model(
            &model,
            &arch,
            "hand26",
            NormalizationSpec::hand_default(0, 3),
        );
        let mut json: serde_json::Value = serde_json::from_str(&file.to_json()).unwrap();
        // Corrupt one weight row to break the chain.
        json["layers"][1]["w"][0] = serde_json::json!([1.0, 2.0, 3.0]);
        let broken = ModelFile::from_json(&json.to_string()).unwrap();
        assert!(broken.to_model::<f64>().is_err());
    }
}
