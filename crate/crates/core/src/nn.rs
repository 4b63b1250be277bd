//! Small dense networks: a feature extractor `G` and classifier heads `F`.
//!
//! Models are plain lists of affine layers with an activation between
//! consecutive layers (never after the last). Classifier heads emit softmax
//! probabilities so every downstream objective works on probability vectors
//! and normalization happens in exactly one place.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{self, Tape, Tensor, Var};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => tensor::relu(x),
            Activation::Tanh => tensor::tanh(x),
        }
    }

    fn apply_traced(&self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Parameters of one dense network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl ModelParams {
    /// Glorot-uniform weights (`±sqrt(6/(in+out))`), zero biases, drawn from
    /// `rng` layer by layer.
    pub fn glorot_from_rng(dims: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims, got {:?}", dims);
        assert!(dims.iter().all(|&d| d >= 1), "zero-width layer in {:?}", dims);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (nin, nout) = (w[0], w[1]);
            let a = (6.0 / (nin + nout) as f64).sqrt();
            let weight: Vec<f64> = (0..nin * nout).map(|_| rng.random_range(-a..a)).collect();
            layers.push(Layer {
                weight: Tensor::new(vec![nin, nout], weight),
                bias: Tensor::zeros(vec![nout]),
            });
        }
        ModelParams { layers, activation }
    }

    pub fn glorot(dims: &[usize], activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::glorot_from_rng(dims, activation, &mut rng)
    }

    /// `(in, out)` of each layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.weight.rows(), l.weight.cols())).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    /// Total trainable scalars: Σ (in·out + out).
    pub fn param_count(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.weight.len() + l.bias.len()) as u64)
            .sum()
    }

    /// Flattens parameters to `[w0, b0, w1, b1, …]` for optimizers.
    pub fn flat_params(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.clone());
            out.push(l.bias.clone());
        }
        out
    }

    /// Inverse of [`flat_params`](Self::flat_params); shapes must match.
    pub fn set_flat_params(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), self.layers.len() * 2, "parameter list length mismatch");
        for (i, l) in self.layers.iter_mut().enumerate() {
            assert_eq!(params[2 * i].shape(), l.weight.shape(), "weight shape mismatch");
            assert_eq!(params[2 * i + 1].shape(), l.bias.shape(), "bias shape mismatch");
            l.weight = params[2 * i].clone();
            l.bias = params[2 * i + 1].clone();
        }
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn trace(&self, tape: &mut Tape) -> TracedModel {
        self.trace_with(tape, |tape, t| tape.leaf(t))
    }

    /// Registers every parameter as a constant: forward passes work, but
    /// gradients never reach these parameters.
    pub fn trace_frozen(&self, tape: &mut Tape) -> TracedModel {
        self.trace_with(tape, |tape, t| tape.constant(t))
    }

    fn trace_with(&self, tape: &mut Tape, mut reg: impl FnMut(&mut Tape, Tensor) -> Var) -> TracedModel {
        let layers = self
            .layers
            .iter()
            .map(|l| (reg(tape, l.weight.clone()), reg(tape, l.bias.clone())))
            .collect();
        TracedModel { layers, activation: self.activation }
    }
}

/// A model's parameters registered on a tape.
pub struct TracedModel {
    pub layers: Vec<(Var, Var)>,
    pub activation: Activation,
}

impl TracedModel {
    /// All parameter handles in `flat_params` order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Architecture + init seed for the extractor/classifier pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub g_hidden: Vec<usize>,
    #[serde(default)]
    pub f_hidden: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.feature_dim < 1 {
            return Err(Error::Config("model dims must be ≥ 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.g_hidden.iter().chain(&self.f_hidden).any(|&h| h < 1) {
            return Err(Error::Config("hidden widths must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn g_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.g_hidden);
        d.push(self.feature_dim);
        d
    }

    pub fn f_dims(&self) -> Vec<usize> {
        let mut d = vec![self.feature_dim];
        d.extend(&self.f_hidden);
        d.push(self.num_classes);
        d
    }
}

/// Builds the extractor and classifier from one seeded stream.
pub fn init_model(config: &ModelConfig) -> (ModelParams, ModelParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let g = ModelParams::glorot_from_rng(&config.g_dims(), config.activation, &mut rng);
    let f = ModelParams::glorot_from_rng(&config.f_dims(), config.activation, &mut rng);
    (g, f)
}

/// Affine chain with the activation between layers; no activation after the
/// final layer.
pub fn forward_features(g: &ModelParams, x: &Tensor) -> Tensor {
    let mut h = x.clone();
    let last = g.layers.len().saturating_sub(1);
    for (i, l) in g.layers.iter().enumerate() {
        h = tensor::add_bias(&tensor::matmul(&h, &l.weight), &l.bias);
        if i < last {
            h = g.activation.apply(&h);
        }
    }
    h
}

/// Same chain as [`forward_features`] followed by row-wise softmax.
pub fn forward_classifier(f: &ModelParams, z: &Tensor) -> Tensor {
    tensor::softmax(&forward_features(f, z))
}

pub fn forward_features_traced(tape: &mut Tape, m: &TracedModel, x: Var) -> Var {
    let mut h = x;
    let last = m.layers.len().saturating_sub(1);
    for (i, &(w, b)) in m.layers.iter().enumerate() {
        let z = tape.matmul(h, w);
        h = tape.add_bias(z, b);
        if i < last {
            h = m.activation.apply_traced(tape, h);
        }
    }
    h
}

pub fn forward_classifier_traced(tape: &mut Tape, m: &TracedModel, z: Var) -> Var {
    let logits = forward_features_traced(tape, m, z);
    tape.softmax(logits)
}

/// Deep copy used when a client initializes its local head from the global
/// one; later updates to the copy never touch the original.
pub fn clone_classifier(f_g: &ModelParams) -> ModelParams {
    f_g.clone()
}

// ── Wire form (messages) ─────────────────────────────────────────────────
//
// Weights serialize as nested rows so the payload is self-describing; the
// numeric leaves of a serialized model are exactly its parameters.

impl Serialize for ModelParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct LayerWire<'a> {
            weights: Vec<&'a [f64]>,
            bias: &'a [f64],
        }
        #[derive(Serialize)]
        struct ModelWire<'a> {
            activation: Activation,
            layers: Vec<LayerWire<'a>>,
        }
        let layers = self
            .layers
            .iter()
            .map(|l| LayerWire {
                weights: (0..l.weight.rows()).map(|r| l.weight.row(r)).collect(),
                bias: l.bias.data(),
            })
            .collect();
        ModelWire { activation: self.activation, layers }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModelParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct LayerWire {
            weights: Vec<Vec<f64>>,
            bias: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct ModelWire {
            activation: Activation,
            layers: Vec<LayerWire>,
        }
        let wire = ModelWire::deserialize(d)?;
        let mut layers = Vec::with_capacity(wire.layers.len());
        for l in wire.layers {
            let nin = l.weights.len();
            let nout = l.bias.len();
            if nin == 0 || l.weights.iter().any(|r| r.len() != nout) {
                return Err(D::Error::custom("layer weight rows must match bias width"));
            }
            layers.push(Layer {
                weight: Tensor::new(vec![nin, nout], l.weights.into_iter().flatten().collect()),
                bias: Tensor::new(vec![nout], l.bias),
            });
        }
        Ok(ModelParams { layers, activation: wire.activation })
    }
}

// ── Checkpoints ──────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    dims: Vec<usize>,
    activation: Activation,
}

/// On-disk form: `{config, layers: [[[weights…],[bias…]], …]}` with flat
/// row-major weights; floats round-trip exactly.
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: CheckpointConfig,
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

pub fn save_model(m: &ModelParams, path: &Path) -> Result<()> {
    let mut dims: Vec<usize> = m.layers.iter().map(|l| l.weight.rows()).collect();
    dims.push(m.output_dim());
    let file = CheckpointFile {
        config: CheckpointConfig { dims, activation: m.activation },
        layers: m
            .layers
            .iter()
            .map(|l| (l.weight.data().to_vec(), l.bias.data().to_vec()))
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::json(format!("encoding checkpoint {}", path.display()), e))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::json(format!("parsing checkpoint {}", path.display()), e))?;
    if file.config.dims.len() != file.layers.len() + 1 {
        return Err(Error::data(path, "checkpoint dims do not match layer count"));
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, (w, b)) in file.layers.into_iter().enumerate() {
        let (nin, nout) = (file.config.dims[i], file.config.dims[i + 1]);
        if w.len() != nin * nout || b.len() != nout {
            return Err(Error::data(path, format!("layer {} has wrong element count", i)));
        }
        layers.push(Layer {
            weight: Tensor::new(vec![nin, nout], w),
            bias: Tensor::new(vec![nout], b),
        });
    }
    Ok(ModelParams { layers, activation: file.config.activation })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_config() -> ModelConfig {
        ModelConfig {
            input_dim: 5,
            feature_dim: 4,
            num_classes: 3,
            g_hidden: vec![6],
            f_hidden: vec![],
            activation: Activation::Relu,
            init_seed: 7,
        }
    }

    #[test]
    fn same_seed_gives_identical_params() {
        let (g1, f1) = init_model(&test_config());
        let (g2, f2) = init_model(&test_config());
        assert_eq!(g1, g2);
        assert_eq!(f1, f2);
    }

    #[test]
    fn empty_hidden_list_gives_single_linear_layer() {
        let (_, f) = init_model(&test_config());
        assert_eq!(f.layers.len(), 1);
        assert_eq!(f.layer_dims(), vec![(4, 3)]);
    }

    #[test]
    fn param_count_single_linear_layer() {
        let m = ModelParams::glorot(&[4, 3], Activation::Relu, 0);
        assert_eq!(m.param_count(), 15);
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let m = ModelParams::glorot(&[10, 20], Activation::Tanh, 3);
        let a = (6.0 / 30.0_f64).sqrt();
        assert!(m.layers[0].weight.data().iter().all(|w| w.abs() < a));
        assert!(m.layers[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_weight_extractor_gives_zero_features() {
        let mut m = ModelParams::glorot(&[3, 2], Activation::Relu, 0);
        m.layers[0].weight = Tensor::zeros(vec![3, 2]);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]);
        assert_eq!(forward_features(&m, &x), Tensor::zeros(vec![1, 2]));
    }

    #[test]
    fn identity_layer_preserves_nonnegative_input() {
        let mut m = ModelParams::glorot(&[2, 2], Activation::Relu, 0);
        m.layers[0].weight = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let x = Tensor::from_rows(&[vec![0.5, 2.0]]);
        assert_eq!(forward_features(&m, &x), x);
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        use rand::Rng;
        let m = ModelParams::glorot(&[4, 5, 3], Activation::Relu, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..2 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xt = Tensor::new(vec![2, 4], x.clone());
        let got = forward_features(&m, &xt);

        // Independent re-computation with plain nested loops.
        for row in 0..2 {
            let mut h: Vec<f64> = x[row * 4..(row + 1) * 4].to_vec();
            for (li, l) in m.layers.iter().enumerate() {
                let (nin, nout) = (l.weight.rows(), l.weight.cols());
                let mut next = vec![0.0; nout];
                for j in 0..nout {
                    let mut acc = l.bias.data()[j];
                    for i in 0..nin {
                        acc += h[i] * l.weight.at(i, j);
                    }
                    next[j] = if li + 1 < m.layers.len() { acc.max(0.0) } else { acc };
                }
                h = next;
            }
            for j in 0..3 {
                assert!((got.at(row, j) - h[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classifier_zero_weights_give_uniform_rows() {
        let mut f = ModelParams::glorot(&[4, 3], Activation::Relu, 0);
        f.layers[0].weight = Tensor::zeros(vec![4, 3]);
        let z = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let p = forward_classifier(&f, &z);
        for j in 0..3 {
            assert!((p.at(0, j) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_empty_batch_gives_empty_output() {
        let f = ModelParams::glorot(&[4, 3], Activation::Relu, 0);
        let z = Tensor::zeros(vec![0, 4]);
        let p = forward_classifier(&f, &z);
        assert_eq!(p.shape(), &[0, 3]);
    }

    #[test]
    fn classifier_known_logits() {
        let mut f = ModelParams::glorot(&[1, 2], Activation::Relu, 0);
        f.layers[0].weight = Tensor::from_rows(&[vec![2.0_f64.ln(), 0.0]]);
        let p = forward_classifier(&f, &Tensor::from_rows(&[vec![1.0]]));
        assert!((p.at(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.at(0, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn clone_is_independent_of_original() {
        let (_, f) = init_model(&test_config());
        let mut c = clone_classifier(&f);
        assert_eq!(c, f);
        assert_eq!(c.param_count(), f.param_count());
        let shape = c.layers[0].weight.shape().to_vec();
        c.layers[0].weight = Tensor::ones(shape);
        assert_ne!(c, f);
        let c2 = clone_classifier(&clone_classifier(&f));
        assert_eq!(c2, f);
    }

    #[test]
    fn traced_forward_matches_untraced() {
        let (g, f) = init_model(&test_config());
        let x = Tensor::from_rows(&[vec![0.3, -0.7, 1.1, 0.0, -0.2], vec![1.0; 5]]);
        let z = forward_features(&g, &x);
        let p = forward_classifier(&f, &z);

        let mut tape = Tape::new();
        let gt = g.trace(&mut tape);
        let ft = f.trace_frozen(&mut tape);
        let xv = tape.constant(x);
        let zv = forward_features_traced(&mut tape, &gt, xv);
        let pv = forward_classifier_traced(&mut tape, &ft, zv);
        assert_eq!(tape.value(zv), &z);
        assert_eq!(tape.value(pv), &p);
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = ModelParams::glorot(&[7, 5, 3], Activation::Tanh, 123);
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn wire_round_trips_exactly() {
        let m = ModelParams::glorot(&[3, 4, 2], Activation::Relu, 5);
        let json = serde_json::to_string(&m).unwrap();
        let back: ModelParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn flat_params_round_trip() {
        let (g, _) = init_model(&test_config());
        let mut g2 = g.clone();
        let mut params = g.flat_params();
        params[0] = Tensor::zeros(params[0].shape().to_vec());
        g2.set_flat_params(&params);
        assert_eq!(g2.layers[0].weight, Tensor::zeros(vec![5, 6]));
        assert_eq!(g2.layers[1], g.layers[1]);
    }
}
