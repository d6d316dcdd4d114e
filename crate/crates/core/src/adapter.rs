//! Detachable MLP head mapping sentence embeddings to a difficulty
//! probability. Label 1 (complex) routes to the cloud, 0 to the device.
//!
//! Hidden layers use tanh, the output is a single logistic unit, and
//! training is mini-batch gradient descent on binary cross-entropy.

use std::fs;
use std::path::Path;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alphatree::AdapterRecord;
use crate::backend::{Backends, EmbeddingVector};
use crate::error::{Error, Result};
use crate::types::ModelTier;

/// Outputs at or above this go to the cloud.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            input_dim: 64,
            hidden_dims: vec![128],
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("adapter input_dim must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("adapter hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    /// (fan_in, fan_out) per layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(1);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer<F> {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major, `outputs` rows of `inputs` columns.
    pub weights: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Float> DenseLayer<F> {
    fn apply(&self, x: &[F]) -> Vec<F> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(x).fold(self.bias[o], |acc, (w, v)| acc + *w * *v)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights<F> {
    pub config: MlpConfig,
    pub layers: Vec<DenseLayer<F>>,
    pub param_count: usize,
}

fn cast<F: Float>(v: f64) -> F {
    F::from(v).expect("f64 constant fits the float type")
}

pub fn logistic<F: Float>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Binary cross-entropy of a logit against a 0/1 target, computed without
/// forming the probability.
fn bce_with_logit<F: Float>(z: F, y: F) -> F {
    z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln()
}

impl<F: Float> MlpWeights<F> {
    /// Uniform in ±1/√fan_in per layer from a seeded stream.
    pub fn init(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(inputs, outputs)| {
                let bound = 1.0 / (inputs as f64).sqrt();
                let mut draw = || cast::<F>(rng.random_range(-bound..=bound));
                let weights = (0..inputs * outputs).map(|_| draw()).collect();
                let bias = (0..outputs).map(|_| draw()).collect();
                DenseLayer { inputs, outputs, weights, bias }
            })
            .collect();
        Ok(MlpWeights {
            config: config.clone(),
            layers,
            param_count: config.param_count(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    /// Shapes match the config, the stored count matches, values are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.layer_shapes();
        let consistent = shapes.len() == self.layers.len()
            && shapes.iter().zip(&self.layers).all(|((i, o), l)| {
                l.inputs == *i && l.outputs == *o && l.weights.len() == i * o && l.bias.len() == *o
            });
        if !consistent {
            return Err(Error::Config("adapter weights do not match their config".into()));
        }
        if self.param_count != self.config.param_count() {
            return Err(Error::Config(format!(
                "adapter param_count {} does not match shapes ({})",
                self.param_count,
                self.config.param_count()
            )));
        }
        if self.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("adapter weights contain non-finite values".into()));
        }
        Ok(())
    }

    fn check_dim(&self, x: &[F]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Activations of every layer; the last entry is the single output logit.
    fn activations(&self, x: &[F]) -> Vec<Vec<F>> {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(acts.last().expect("input present"));
            if l < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn logit(&self, x: &[F]) -> Result<F> {
        self.check_dim(x)?;
        Ok(self.activations(x).last().expect("output layer")[0])
    }

    /// Difficulty probability, kept strictly inside (0, 1).
    pub fn forward(&self, x: &[F]) -> Result<F> {
        let p = logistic(self.logit(x)?);
        Ok(p.max(F::epsilon()).min(F::one() - F::epsilon()))
    }

    /// Mean binary cross-entropy over the examples.
    pub fn loss(&self, xs: &[Vec<F>], ys: &[F]) -> Result<F> {
        if xs.is_empty() {
            return Err(Error::EmptyDataset("no examples".into()));
        }
        let mut total = F::zero();
        for (x, y) in xs.iter().zip(ys) {
            total = total + bce_with_logit(self.logit(x)?, *y);
        }
        Ok(total / cast(xs.len() as f64))
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<F> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[F]) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::DimensionMismatch {
                expected: self.param_count,
                actual: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            layer.weights.iter_mut().chain(layer.bias.iter_mut()).for_each(|p| {
                *p = it.next().expect("length checked");
            });
        }
        Ok(())
    }

    /// Gradient of [`loss`](Self::loss), ordered like [`params`](Self::params).
    pub fn gradient(&self, xs: &[Vec<F>], ys: &[F]) -> Result<Vec<F>> {
        if xs.is_empty() {
            return Err(Error::EmptyDataset("no examples".into()));
        }
        let mut grads: Vec<DenseLayer<F>> = self
            .layers
            .iter()
            .map(|l| DenseLayer {
                inputs: l.inputs,
                outputs: l.outputs,
                weights: vec![F::zero(); l.weights.len()],
                bias: vec![F::zero(); l.bias.len()],
            })
            .collect();
        let scale = F::one() / cast(xs.len() as f64);

        for (x, y) in xs.iter().zip(ys) {
            self.check_dim(x)?;
            let acts = self.activations(x);
            let z = acts.last().expect("output layer")[0];
            let mut delta = vec![(logistic(z) - *y) * scale];
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input = &acts[l];
                let g = &mut grads[l];
                for o in 0..layer.outputs {
                    g.bias[o] = g.bias[o] + delta[o];
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, a) in row.iter_mut().zip(input) {
                        *gw = *gw + delta[o] * *a;
                    }
                }
                if l > 0 {
                    // input holds tanh activations of the previous layer
                    delta = (0..layer.inputs)
                        .map(|i| {
                            let back = (0..layer.outputs)
                                .fold(F::zero(), |acc, o| acc + layer.weights[o * layer.inputs + i] * delta[o]);
                            back * (F::one() - input[i] * input[i])
                        })
                        .collect();
                }
            }
        }
        Ok(grads
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect())
    }

    fn step(&mut self, grad: &[F], learning_rate: F) {
        let mut it = grad.iter();
        for layer in &mut self.layers {
            for p in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *p = *p - learning_rate * *it.next().expect("gradient matches params");
            }
        }
    }
}

/// Trains from scratch on raw vectors. Returns the weights and the
/// full-set mean loss after each epoch.
pub fn fit<F: Float>(xs: &[Vec<F>], ys: &[F], mlp: &MlpConfig, tc: &TrainConfig) -> Result<(MlpWeights<F>, Vec<F>)> {
    tc.validate()?;
    if xs.is_empty() {
        return Err(Error::EmptyDataset("no training examples".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::Config("example and label counts differ".into()));
    }
    let mut weights = MlpWeights::<F>::init(mlp)?;
    for x in xs {
        weights.check_dim(x)?;
    }
    let positives = ys.iter().filter(|y| **y > cast(0.5)).count();
    if positives == 0 || positives == ys.len() {
        log::warn!("training data contains a single class");
    }

    let lr = cast(tc.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(tc.batch_size) {
            let bx: Vec<Vec<F>> = batch.iter().map(|i| xs[*i].clone()).collect();
            let by: Vec<F> = batch.iter().map(|i| ys[*i]).collect();
            let grad = weights.gradient(&bx, &by)?;
            weights.step(&grad, lr);
        }
        let loss = weights.loss(xs, ys)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.push(loss);
    }
    Ok((weights, history))
}

pub type AdapterWeights = MlpWeights<f64>;

/// Trains on dataset records; every record must carry its embedding.
pub fn train(records: &[AdapterRecord], mlp: &MlpConfig, tc: &TrainConfig) -> Result<(AdapterWeights, Vec<f64>)> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("adapter dataset has no records".into()));
    }
    let mut xs = Vec::with_capacity(records.len());
    for r in records {
        let Some(e) = &r.embedding else {
            return Err(Error::Config(format!(
                "record {}#{} has no embedding",
                r.task_id, r.subtask_index
            )));
        };
        xs.push(e.clone());
    }
    let ys: Vec<f64> = records.iter().map(|r| f64::from(r.label)).collect();
    fit(&xs, &ys, mlp, tc)
}

/// Fills in missing embeddings via the backend.
pub fn embed_records(backends: &Backends, tier: ModelTier, records: &mut [AdapterRecord]) -> Result<()> {
    for r in records.iter_mut().filter(|r| r.embedding.is_none()) {
        r.embedding = Some(backends.embed_sentence(tier, &r.text)?.values);
    }
    Ok(())
}

pub fn decide(probability: f64) -> ModelTier {
    if probability >= DECISION_THRESHOLD {
        ModelTier::Cloud
    } else {
        ModelTier::Device
    }
}

impl AdapterWeights {
    pub fn predict(&self, embedding: &EmbeddingVector) -> Result<f64> {
        self.forward(&embedding.values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let weights: AdapterWeights = serde_json::from_str(&fs::read_to_string(path)?)?;
        weights.validate()?;
        Ok(weights)
    }
}

/// Embeds `text` on `tier` and routes it.
pub fn allocate(weights: &AdapterWeights, backends: &Backends, text: &str, tier: ModelTier) -> Result<ModelTier> {
    let embedding = backends.embed_sentence(tier, text)?;
    Ok(decide(weights.predict(&embedding)?))
}

/// Share of records whose routed tier matches the label.
pub fn accuracy(weights: &AdapterWeights, records: &[AdapterRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("no records to score".into()));
    }
    let mut hits = 0usize;
    for r in records {
        let e = r
            .embedding
            .as_ref()
            .ok_or_else(|| Error::Config(format!("record {}#{} has no embedding", r.task_id, r.subtask_index)))?;
        if decide(weights.forward(e)?).label() == r.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Seeded shuffle, then `train_fraction` of the records for training and
/// the rest held out. Both parts are non-empty when there are two or more
/// records.
pub fn split_records(records: &[AdapterRecord], train_fraction: f64, seed: u64) -> (Vec<AdapterRecord>, Vec<AdapterRecord>) {
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let mut cut = ((n as f64) * train_fraction).round() as usize;
    if n >= 2 {
        cut = cut.clamp(1, n - 1);
    } else {
        cut = n;
    }
    let held_out = shuffled.split_off(cut);
    (shuffled, held_out)
}
