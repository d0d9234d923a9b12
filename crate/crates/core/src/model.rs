//! The trainable network: a dense feature extractor followed by a bias-free
//! linear classifier whose columns double as class prototypes, plus the EMA
//! momentum twin and the plain SGD update used for both training stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Fully connected layer, `y = act(W x + b)` with `W` stored row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Dense {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::shape(format!(
                "dense layer {in_dim}->{out_dim} given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        if !numerics::all_finite(&weight) || !numerics::all_finite(&bias) {
            return Err(Error::shape("dense layer parameters must be finite"));
        }
        Ok(Dense {
            in_dim,
            out_dim,
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.uniform_range(-a, a)).collect();
        Dense {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.activation.apply(numerics::dot(row, x) + self.bias[o])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<Dense>,
}

impl FeatureExtractor {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("feature extractor needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(FeatureExtractor { layers })
    }

    /// Tanh hidden layers followed by a linear projection to `feature_dim`.
    pub fn mlp(input_dim: usize, hidden: &[usize], feature_dim: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(Dense::glorot(prev, h, Activation::Tanh, rng));
            prev = h;
        }
        layers.push(Dense::glorot(prev, feature_dim, Activation::Identity, rng));
        FeatureExtractor { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        Ok(h)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has dim {}, extractor expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Bias-free linear head `logits = W_T^T z`, with `W_T = [W_S | W_P]`.
/// Columns are stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    dim: usize,
    n_shared: usize,
    n_private: usize,
    columns: Vec<f64>,
}

impl Classifier {
    pub fn from_columns(dim: usize, n_shared: usize, n_private: usize, columns: Vec<f64>) -> Result<Self> {
        if columns.len() != dim * (n_shared + n_private) {
            return Err(Error::shape(format!(
                "classifier {dim}x{} given {} values",
                n_shared + n_private,
                columns.len()
            )));
        }
        if n_shared == 0 {
            return Err(Error::InvalidClassCount {
                count: 0,
                reason: "classifier needs at least one shared class",
            });
        }
        if !numerics::all_finite(&columns) {
            return Err(Error::shape("classifier parameters must be finite"));
        }
        Ok(Classifier {
            dim,
            n_shared,
            n_private,
            columns,
        })
    }

    /// Source head over `n_shared` classes, uniform in `(-1/sqrt(D), 1/sqrt(D))`.
    pub fn random(dim: usize, n_shared: usize, rng: &mut Rng) -> Self {
        let a = 1.0 / (dim as f64).sqrt();
        let columns = (0..dim * n_shared).map(|_| rng.uniform_range(-a, a)).collect();
        Classifier {
            dim,
            n_shared,
            n_private: 0,
            columns,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_shared(&self) -> usize {
        self.n_shared
    }

    pub fn n_private(&self) -> usize {
        self.n_private
    }

    pub fn n_classes(&self) -> usize {
        self.n_shared + self.n_private
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.columns[class * self.dim..(class + 1) * self.dim]
    }

    pub fn columns(&self) -> &[f64] {
        &self.columns
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n_classes())
            .map(|c| numerics::dot(self.prototype(c), z))
            .collect()
    }

    /// Appends `n_private` columns drawn i.i.d. from `U(-1/sqrt(D), 1/sqrt(D))`.
    pub fn extend(&self, n_private: usize, rng: &mut Rng) -> Result<Classifier> {
        if self.n_private != 0 {
            return Err(Error::shape("classifier has already been extended"));
        }
        if n_private < 1 {
            return Err(Error::InvalidClassCount {
                count: n_private,
                reason: "need at least one private column",
            });
        }
        let a = 1.0 / (self.dim as f64).sqrt();
        let mut columns = self.columns.clone();
        columns.extend((0..self.dim * n_private).map(|_| rng.uniform_range(-a, a)));
        Ok(Classifier {
            dim: self.dim,
            n_shared: self.n_shared,
            n_private,
            columns,
        })
    }

    /// Replaces the private columns with `prototypes`, leaving `W_S` untouched.
    pub fn set_private_prototypes(&self, prototypes: &[Vec<f64>]) -> Result<Classifier> {
        if prototypes.len() != self.n_private {
            return Err(Error::shape(format!(
                "{} prototypes for {} private columns",
                prototypes.len(),
                self.n_private
            )));
        }
        let mut out = self.clone();
        for (r, proto) in prototypes.iter().enumerate() {
            if proto.len() != self.dim {
                return Err(Error::shape(format!(
                    "prototype has dim {}, classifier dim {}",
                    proto.len(),
                    self.dim
                )));
            }
            if numerics::norm(proto) == 0.0 || !numerics::all_finite(proto) {
                return Err(Error::DegenerateVector("private prototype must be nonzero and finite"));
            }
            let c = self.n_shared + r;
            out.columns[c * self.dim..(c + 1) * self.dim].copy_from_slice(proto);
        }
        Ok(out)
    }
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Output of each extractor layer; the last entry is the feature vector.
    activations: Vec<Vec<f64>>,
    input: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Forward {
    pub fn features(&self) -> &[f64] {
        self.activations.last().expect("extractor has layers")
    }
}

/// Parameter gradients, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    pub classifier: Vec<f64>,
}

impl Gradients {
    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|g| *g *= s);
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (g, o) in self.values_mut().zip(other.values()) {
            *g += s * o;
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .chain(self.classifier.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
            .chain(self.classifier.iter_mut())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|g| g.is_finite())
    }
}

/// `g(x) = h(phi(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub extractor: FeatureExtractor,
    pub classifier: Classifier,
}

impl Model {
    pub fn new(extractor: FeatureExtractor, classifier: Classifier) -> Result<Self> {
        if extractor.output_dim() != classifier.dim() {
            return Err(Error::shape(format!(
                "extractor emits dim {}, classifier expects {}",
                extractor.output_dim(),
                classifier.dim()
            )));
        }
        Ok(Model { extractor, classifier })
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.n_classes()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.extractor.check_input(x)?;
        let mut activations = Vec::with_capacity(self.extractor.layers.len());
        let mut h = x.to_vec();
        for layer in &self.extractor.layers {
            h = layer.forward(&h);
            activations.push(h.clone());
        }
        let logits = self.classifier.logits(&h);
        let probs = numerics::softmax(&logits);
        Ok(Forward {
            activations,
            input: x.to_vec(),
            logits,
            probs,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(numerics::argmax(&self.forward(x)?.logits))
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .extractor
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
                .collect(),
            classifier: vec![0.0; self.classifier.columns.len()],
        }
    }

    /// Accumulates into `grads` the parameter gradient of a loss whose
    /// derivative is `d_logits` w.r.t. the logits plus `d_features` w.r.t. the
    /// feature vector (for losses that read the features directly).
    pub fn backward(&self, fwd: &Forward, d_logits: &[f64], d_features: Option<&[f64]>, grads: &mut Gradients) {
        let dim = self.classifier.dim;
        let z = fwd.features();
        let mut delta = d_features.map_or_else(|| vec![0.0; dim], <[f64]>::to_vec);
        for (c, &g) in d_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let col = self.classifier.prototype(c);
            let gcol = &mut grads.classifier[c * dim..(c + 1) * dim];
            for d in 0..dim {
                gcol[d] += g * z[d];
                delta[d] += g * col[d];
            }
        }
        for (li, layer) in self.extractor.layers.iter().enumerate().rev() {
            let out = &fwd.activations[li];
            let input: &[f64] = if li == 0 { &fwd.input } else { &fwd.activations[li - 1] };
            for (o, d) in delta.iter_mut().enumerate() {
                *d *= layer.activation.derivative_from_output(out[o]);
            }
            let (gw, gb) = &mut grads.layers[li];
            let mut next = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                let grow = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    grow[i] += d * input[i];
                    next[i] += d * row[i];
                }
            }
            delta = next;
        }
    }

    /// Parameters in declaration order: each layer's weights then biases,
    /// then the classifier columns.
    pub fn parameters(&self) -> Vec<f64> {
        self.param_slices().flat_map(|s| s.iter().copied()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.param_slices().map(<[f64]>::len).sum()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::shape(format!(
                "{} parameter values for a model with {}",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for slot in self.param_slices_mut() {
            slot.copy_from_slice(&values[offset..offset + slot.len()]);
            offset += slot.len();
        }
        Ok(())
    }

    fn param_slices(&self) -> impl Iterator<Item = &[f64]> {
        self.extractor
            .layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .chain(std::iter::once(self.classifier.columns.as_slice()))
    }

    fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.extractor
            .layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .chain(std::iter::once(self.classifier.columns.as_mut_slice()))
    }

    fn same_shape(&self, other: &Model) -> bool {
        self.extractor.layers.len() == other.extractor.layers.len()
            && self
                .extractor
                .layers
                .iter()
                .zip(&other.extractor.layers)
                .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim)
            && self.classifier.dim == other.classifier.dim
            && self.classifier.n_classes() == other.classifier.n_classes()
    }

    fn check_gradient_shape(&self, grads: &Gradients) -> Result<()> {
        let ok = grads.layers.len() == self.extractor.layers.len()
            && grads
                .layers
                .iter()
                .zip(&self.extractor.layers)
                .all(|((w, b), l)| w.len() == l.weight.len() && b.len() == l.bias.len())
            && grads.classifier.len() == self.classifier.columns.len();
        if ok {
            Ok(())
        } else {
            Err(Error::shape("gradient shapes do not match model"))
        }
    }
}

/// `theta <- theta - lr * (g + weight_decay * theta)`.
pub fn sgd_step(model: &mut Model, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
    model.check_gradient_shape(grads)?;
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient { term: "total" });
    }
    let mut gv = grads.values();
    for slot in model.param_slices_mut() {
        for theta in slot.iter_mut() {
            let g = gv.next().expect("shape checked");
            *theta -= lr * (g + weight_decay * *theta);
        }
    }
    Ok(())
}

/// Slowly moving copy of the live model.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumModel {
    shadow: Model,
    momentum: f64,
}

impl MomentumModel {
    pub fn new(live: &Model, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1]"));
        }
        Ok(MomentumModel {
            shadow: live.clone(),
            momentum,
        })
    }

    pub fn model(&self) -> &Model {
        &self.shadow
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// `theta' <- m theta' + (1 - m) theta` for every parameter.
    pub fn update(&mut self, live: &Model) -> Result<()> {
        if !self.shadow.same_shape(live) {
            return Err(Error::shape("momentum model and live model differ in shape"));
        }
        let m = self.momentum;
        let live_params = live.param_slices().collect::<Vec<_>>();
        for (slot, src) in self.shadow.param_slices_mut().zip(live_params) {
            for (s, &t) in slot.iter_mut().zip(src) {
                *s = m * *s + (1.0 - m) * t;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::numerics::Stream;
    use proptest::prelude::*;

    fn identity_model() -> Model {
        let layer = Dense::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2], Activation::Identity).unwrap();
        let extractor = FeatureExtractor::new(vec![layer]).unwrap();
        let classifier = Classifier::from_columns(2, 2, 0, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        Model::new(extractor, classifier).unwrap()
    }

    fn small_model(seed: u64) -> Model {
        let mut rng = Rng::new(seed, Stream::WeightInit);
        let extractor = FeatureExtractor::mlp(4, &[6, 5], 3, &mut rng);
        let classifier = Classifier::random(3, 4, &mut rng);
        Model::new(extractor, classifier).unwrap()
    }

    #[test]
    fn forward_through_identity_layers() {
        let m = identity_model();
        let f = m.forward(&[1.0, 0.0]).unwrap();
        assert_eq!(f.logits, vec![1.0, 0.0]);
        assert!((f.probs[0] - 0.7311).abs() < 1e-4);
        assert!((f.probs[1] - 0.2689).abs() < 1e-4);
        assert!(matches!(m.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_input_zero_bias_gives_uniform() {
        let m = small_model(1);
        let f = m.forward(&[0.0; 4]).unwrap();
        assert!(f.probs.iter().all(|p| (p - 0.25).abs() < 1e-12));
        assert!((f.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extend_preserves_shared_columns() {
        let mut rng = Rng::new(3, Stream::WeightInit);
        let src = Classifier::random(8, 10, &mut rng);
        let ext = src.extend(11, &mut rng).unwrap();
        assert_eq!(ext.n_classes(), 21);
        assert_eq!(&ext.columns()[..80], src.columns());
        let bound = 1.0 / 8f64.sqrt();
        assert!(ext.columns()[80..].iter().all(|v| v.abs() < bound));
        let doubled = src.extend(10, &mut rng).unwrap();
        assert_eq!(doubled.n_classes(), 20);
        assert!(matches!(src.extend(0, &mut rng), Err(Error::InvalidClassCount { .. })));
    }

    #[test]
    fn set_private_prototypes_contract() {
        let mut rng = Rng::new(4, Stream::WeightInit);
        let ext = Classifier::random(3, 2, &mut rng).extend(2, &mut rng).unwrap();
        let current: Vec<Vec<f64>> = (2..4).map(|c| ext.prototype(c).to_vec()).collect();
        assert_eq!(ext.set_private_prototypes(&current).unwrap(), ext);

        let protos = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]];
        let set = ext.set_private_prototypes(&protos).unwrap();
        assert_eq!(set.prototype(2), &protos[0][..]);
        assert_eq!(set.prototype(3), &protos[1][..]);
        assert_eq!(&set.columns()[..6], &ext.columns()[..6]);

        assert!(ext.set_private_prototypes(&protos[..1]).is_err());
        let zero = vec![vec![0.0; 3], vec![1.0, 0.0, 0.0]];
        assert!(matches!(
            ext.set_private_prototypes(&zero),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn ema_examples() {
        let live = small_model(5);
        let mut frozen = MomentumModel::new(&small_model(6), 1.0).unwrap();
        let before = frozen.model().clone();
        frozen.update(&live).unwrap();
        assert_eq!(frozen.model(), &before);

        let mut copy = MomentumModel::new(&small_model(6), 0.0).unwrap();
        copy.update(&live).unwrap();
        assert_eq!(copy.model(), &live);

        let mut zeros = small_model(6);
        zeros.set_parameters(&vec![0.0; zeros.parameter_count()]).unwrap();
        let mut ones = zeros.clone();
        ones.set_parameters(&vec![1.0; ones.parameter_count()]).unwrap();
        let mut mm = MomentumModel::new(&zeros, 0.9).unwrap();
        mm.update(&ones).unwrap();
        assert!(mm.model().parameters().iter().all(|v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let mut mm = MomentumModel::new(&small_model(1), 0.5).unwrap();
        let mut rng = Rng::new(2, Stream::WeightInit);
        let other = Model::new(
            FeatureExtractor::mlp(4, &[7], 3, &mut rng),
            Classifier::random(3, 4, &mut rng),
        )
        .unwrap();
        assert!(matches!(mm.update(&other), Err(Error::Shape(_))));
    }

    #[test]
    fn sgd_examples() {
        let mut m = small_model(2);
        m.set_parameters(&vec![1.0; m.parameter_count()]).unwrap();
        let mut g = m.zero_gradients();
        g.values_mut().for_each(|v| *v = 1.0);

        let mut unchanged = m.clone();
        sgd_step(&mut unchanged, &g, 0.0, 0.0).unwrap();
        assert_eq!(unchanged, m);

        let mut step = m.clone();
        sgd_step(&mut step, &g, 0.1, 0.0).unwrap();
        assert!(step.parameters().iter().all(|v| (v - 0.9).abs() < 1e-15));

        let mut decay = m.clone();
        sgd_step(&mut decay, &m.zero_gradients(), 1.0, 0.1).unwrap();
        assert!(decay.parameters().iter().all(|v| (v - 0.9).abs() < 1e-15));

        g.classifier[0] = f64::NAN;
        assert!(matches!(
            sgd_step(&mut m, &g, 0.1, 0.0),
            Err(Error::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences_through_extractor() {
        let model = small_model(9);
        let x = [0.3, -0.7, 1.1, 0.2];
        // loss = sum_c a_c * logit_c + b . z
        let a = [0.4, -1.2, 0.7, 0.1];
        let b = [0.5, -0.3, 0.9];
        let loss = |m: &Model| {
            let f = m.forward(&x).unwrap();
            numerics::dot(&a, &f.logits) + numerics::dot(&b, f.features())
        };
        let f = model.forward(&x).unwrap();
        let mut g = model.zero_gradients();
        model.backward(&f, &a, Some(&b), &mut g);
        let analytic = g.flatten();
        let base = model.parameters();
        let h = 1e-5;
        for (i, &an) in analytic.iter().enumerate() {
            let mut m = model.clone();
            let mut p = base.clone();
            p[i] += h;
            m.set_parameters(&p).unwrap();
            let up = loss(&m);
            p[i] -= 2.0 * h;
            m.set_parameters(&p).unwrap();
            let down = loss(&m);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - an).abs() < 1e-7, "param {i}: fd {fd} analytic {an}");
        }
    }

    proptest! {
        #[test]
        fn ema_contracts_towards_live(seed in 0u64..1000, m in 0.0f64..1.0) {
            let live = small_model(seed);
            let mut mm = MomentumModel::new(&small_model(seed + 1), m).unwrap();
            let old = mm.model().parameters();
            mm.update(&live).unwrap();
            for ((new, old), theta) in mm.model().parameters().iter().zip(&old).zip(live.parameters()) {
                prop_assert!((new - theta).abs() <= m * (old - theta).abs() + 1e-15);
            }
        }
    }
}
