//! Decoder-only transformer mapping a regression context to a prediction at
//! every x-token, with a hand-written backward pass.
//!
//! Each pair `(x_k, y_k)` becomes two `(D+1)`-wide tokens, `[x_k ; 0]` then
//! `[0 ; y_k]`. Both share one linear input projection and are summed with
//! learned absolute positional embeddings. Blocks are pre-norm GPT-2 style:
//! causal multi-head attention then a GELU MLP of width `4·d_embed`, each
//! wrapped in a residual connection. A final LayerNorm and a scalar linear
//! readout produce one output per token. Outputs at x-token positions
//! `0, 2, 4, …` are the predictions `f(S_1) … f(S_K)`; y-token outputs are
//! discarded.

mod checkpoint;
mod params;
mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Scalar;
use crate::tasks::RegressionSequence;

pub use checkpoint::{
    checkpoint_stem, latest_checkpoint, TensorRecord, MomentRecord,
    load_checkpoint, read_manifest, save_checkpoint, AnyParams, Checkpoint, CheckpointManifest, MomentBlob,
};
pub use params::{init_params, param_count, ModelParams, ParamEntry, ParamLayout};
pub use transformer::{backward, forward, forward_backward, predict, ForwardTrace, SEQ_CHUNK};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("sequence has {pairs} pairs but the model holds at most {capacity}")]
    TooLong { pairs: usize, capacity: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
}

impl ModelError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, ModelError::NonFinite { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp64,
}

impl Precision {
    pub fn dtype(self) -> &'static str {
        match self {
            Precision::Fp32 => f32::DTYPE,
            Precision::Fp64 => f64::DTYPE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_embed: usize,
    pub n_heads: usize,
    /// Task dimension `D`.
    pub d_task: usize,
    /// Maximum number of `(x, y)` pairs `K`; the model holds `2K` tokens.
    pub max_pairs: usize,
    pub precision: Precision,
}

impl ModelConfig {
    /// 8 layers, 128-wide embeddings, 2 heads.
    pub fn base(d_task: usize, max_pairs: usize) -> Self {
        Self { n_layers: 8, d_embed: 128, n_heads: 2, d_task, max_pairs, precision: Precision::Fp32 }
    }

    /// Workstation-scale model: 4 layers, 64-wide embeddings, 2 heads.
    pub fn desk(d_task: usize, max_pairs: usize) -> Self {
        Self { n_layers: 4, d_embed: 64, n_heads: 2, ..Self::base(d_task, max_pairs) }
    }

    /// Larger model used for the dimension sweep: 12 layers, 256 wide, 4 heads.
    pub fn wide(d_task: usize, max_pairs: usize) -> Self {
        Self { n_layers: 12, d_embed: 256, n_heads: 4, ..Self::base(d_task, max_pairs) }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        if self.n_layers == 0 {
            return bad("n_layers must be positive");
        }
        if self.d_embed == 0 || self.n_heads == 0 {
            return bad("d_embed and n_heads must be positive");
        }
        if !self.d_embed.is_multiple_of(self.n_heads) {
            return Err(ModelError::BadConfig(format!(
                "d_embed {} is not divisible by n_heads {}",
                self.d_embed, self.n_heads
            )));
        }
        if self.d_task == 0 || self.max_pairs == 0 {
            return bad("d_task and max_pairs must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_embed / self.n_heads
    }

    pub fn token_width(&self) -> usize {
        self.d_task + 1
    }

    pub fn max_tokens(&self) -> usize {
        2 * self.max_pairs
    }

    pub fn mlp_width(&self) -> usize {
        4 * self.d_embed
    }
}

/// `2K` raw tokens of width `D + 1`, row-major: `[x_k ; 0]` then `[0 ; y_k]`.
pub fn embed_sequence(seq: &RegressionSequence, cfg: &ModelConfig) -> Result<Vec<f64>, ModelError> {
    if seq.len() > cfg.max_pairs {
        return Err(ModelError::TooLong { pairs: seq.len(), capacity: cfg.max_pairs });
    }
    if seq.dim() != cfg.d_task {
        return Err(ModelError::Shape(format!("sequence dimension {} vs model d_task {}", seq.dim(), cfg.d_task)));
    }
    let w = cfg.token_width();
    let d = cfg.d_task;
    let mut out = vec![0.0; 2 * seq.len() * w];
    for k in 0..seq.len() {
        out[2 * k * w..2 * k * w + d].copy_from_slice(seq.x(k));
        out[(2 * k + 1) * w + d] = seq.ys()[k];
    }
    Ok(out)
}

/// Tokens for a batch of equal-length sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch<T> {
    n_seq: usize,
    n_pairs: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn from_sequences(seqs: &[RegressionSequence], cfg: &ModelConfig) -> Result<Self, ModelError> {
        let n_pairs = seqs.first().map(|s| s.len()).ok_or_else(|| ModelError::Shape("empty batch".into()))?;
        let mut data = Vec::with_capacity(seqs.len() * 2 * n_pairs * cfg.token_width());
        for s in seqs {
            if s.len() != n_pairs {
                return Err(ModelError::Shape(format!("mixed sequence lengths {} and {}", n_pairs, s.len())));
            }
            data.extend(embed_sequence(s, cfg)?.into_iter().map(T::of));
        }
        Ok(Self { n_seq: seqs.len(), n_pairs, width: cfg.token_width(), data })
    }

    /// Raw tokens, `n_seq × 2·n_pairs × width`.
    pub fn from_raw(n_seq: usize, n_pairs: usize, width: usize, data: Vec<T>) -> Result<Self, ModelError> {
        if data.len() != n_seq * 2 * n_pairs * width || n_seq == 0 || n_pairs == 0 {
            return Err(ModelError::Shape("token buffer does not match n_seq × 2K × width".into()));
        }
        Ok(Self { n_seq, n_pairs, width, data })
    }

    pub fn n_seq(&self) -> usize {
        self.n_seq
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn n_tokens(&self) -> usize {
        2 * self.n_pairs
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub(crate) fn seq_rows(&self, first: usize, count: usize) -> &[T] {
        let per = self.n_tokens() * self.width;
        &self.data[first * per..(first + count) * per]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::Task;

    #[test]
    fn tokens_by_hand() {
        let t = Task::new(vec![1.0, 1.0]).unwrap();
        let s = RegressionSequence::from_parts(t, vec![3.0, 4.0], vec![-2.0]).unwrap();
        let cfg = ModelConfig { n_layers: 1, d_embed: 4, n_heads: 1, d_task: 2, max_pairs: 1, precision: Precision::Fp64 };
        assert_eq!(embed_sequence(&s, &cfg).unwrap(), vec![3.0, 4.0, 0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn base_shape_tokens() {
        let mut r = crate::RngHandle::new(0, "t");
        let d = crate::tasks::TaskDistribution::gaussian(8).unwrap();
        let s = &crate::tasks::sample_batch(&d, 1, 16, 0.25, &mut r).unwrap()[0];
        let cfg = ModelConfig::base(8, 16);
        let tok = embed_sequence(s, &cfg).unwrap();
        assert_eq!(tok.len(), 32 * 9);
        // First x-token carries x_1 and a zero target slot.
        assert_eq!(&tok[..8], s.x(0));
        assert_eq!(tok[8], 0.0);
    }

    #[test]
    fn capacity_and_divisibility() {
        let mut cfg = ModelConfig::base(8, 16);
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(ModelError::BadConfig(_))));
        let cfg = ModelConfig::desk(2, 2);
        let t = Task::zeros(2);
        let s = RegressionSequence::from_parts(t, vec![0.0; 6], vec![0.0; 3]).unwrap();
        assert!(matches!(embed_sequence(&s, &cfg), Err(ModelError::TooLong { pairs: 3, capacity: 2 })));
    }
}
