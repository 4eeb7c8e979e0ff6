//! The embedding network: a small ReLU MLP with a linear output layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MdrError, Result};
use crate::numerics::{NodeId, ParamId, ParamStore, Tape, Tensor};

/// Guard used by [`l2_normalize`] for rows with no direction.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// Fully connected network `F → hidden… → D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpEmbedder {
    widths: Vec<usize>,
    layers: Vec<Layer>,
}

impl MlpEmbedder {
    /// Registers weights in `params` with He-uniform initialization
    /// (`U(±sqrt(6 / fan_in))`) and zero biases.
    pub fn new(widths: &[usize], params: &mut ParamStore, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(MdrError::config(format!(
                "embedder needs at least input and output widths, all positive; got {widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let weight = Tensor::new(vec![fan_in, fan_out], data).expect("sized");
                Layer {
                    weight: params.add(format!("embedder.{i}.weight"), weight, true),
                    bias: params.add(
                        format!("embedder.{i}.bias"),
                        Tensor::zeros(&[fan_out]),
                        true,
                    ),
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }

    /// Records the forward pass for a `B×F` input and returns the `B×D` node.
    pub fn embed(&self, tape: &mut Tape, params: &ParamStore, inputs: NodeId) -> Result<NodeId> {
        let shape = tape.value(inputs).shape();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(MdrError::config(format!(
                "embedder expects inputs of width {}, got shape {:?}",
                self.input_dim(),
                shape
            )));
        }
        let mut h = inputs;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(params, layer.weight);
            let b = tape.param(params, layer.bias);
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Forward pass outside of any training step.
    pub fn embed_values(&self, params: &ParamStore, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(inputs.clone());
        let out = self.embed(&mut tape, params, x)?;
        Ok(tape.value(out).clone())
    }
}

/// Embeddings of one mini-batch together with their class labels.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub embeddings: NodeId,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(tape: &Tape, embeddings: NodeId, labels: Vec<usize>) -> Result<Self> {
        let v = tape.value(embeddings);
        if v.rank() != 2 || v.rows() != labels.len() {
            return Err(MdrError::Shape {
                op: "embedding_batch",
                left: v.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if labels.len() < 2 {
            return Err(MdrError::config("an embedding batch needs at least 2 rows"));
        }
        if !v.is_finite() {
            return Err(MdrError::NonFinite("embedding batch".into()));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn distinct_labels(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    /// Same labels, different embedding node.
    pub fn with_embeddings(&self, embeddings: NodeId) -> Self {
        Self {
            embeddings,
            labels: self.labels.clone(),
        }
    }
}

/// Rescales each embedding to unit two-norm.
pub fn l2_normalize(tape: &mut Tape, batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    let normalized = tape.row_normalize(batch.embeddings, NORMALIZE_EPS)?;
    Ok(batch.with_embeddings(normalized))
}
