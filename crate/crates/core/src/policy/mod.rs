//! A tiny fixed-window autoregressive policy.
//!
//! `k` context embeddings are concatenated, passed through an affine layer,
//! `tanh`, RMSNorm and a second affine layer to produce next-token logits.
//! The forward pass runs under a caller-chosen [`ExecutionProfile`], so the
//! same parameters can play both the rollout engine and the trainer.
//!
//! [`ExecutionProfile`]: crate::detkernels::ExecutionProfile

mod backward;
mod checkpoint;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detkernels::{KernelError, Matrix};

pub use backward::{grad_surrogate, ScoredSequence};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{forward_batch, forward_logits, greedy_response, sample_response, sequence_logprobs, window, Sample};

pub type Token = u32;

pub const BOS: Token = 0;
pub const EOS: Token = 1;
pub const PAD: Token = 2;
/// Number of reserved ids at the start of the vocabulary.
pub const RESERVED: Token = 3;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: Token, position: usize, vocab: usize },
    #[error("context of length {len} exceeds the window of {window}")]
    ContextTooLong { len: usize, window: usize },
    #[error("response must not be empty")]
    EmptyResponse,
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("coefficient count {got} does not match response length {expected}")]
    CoeffShape { expected: usize, got: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("max_len must be at least 1")]
    InvalidMaxLen,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub rmsnorm_eps: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { vocab_size: 32, context_window: 8, embed_dim: 16, hidden_dim: 32, rmsnorm_eps: 1e-6 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.to_string()));
        if self.vocab_size <= RESERVED as usize {
            return bad("vocab_size must exceed the reserved BOS/EOS/PAD ids");
        }
        if self.context_window == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be at least 1");
        }
        if !(self.rmsnorm_eps > 0.0) {
            return bad("rmsnorm_eps must be positive");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.context_window * self.embed_dim
    }
}

/// Model parameters θ. A snapshot of them is θ_old.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub embedding: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Scaled-uniform initialization: embeddings in ±1, affine weights in
/// ±1/sqrt(fan_in), `gamma = 1`, biases 0.
pub fn init_params(config: PolicyConfig, seed: u64) -> Result<PolicyParams, PolicyError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |rows: usize, cols: usize, scale: f64| {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Matrix::from_vec(rows, cols, data).expect("finite by construction")
    };
    let embedding = uniform(config.vocab_size, config.embed_dim, 1.0);
    let w1 = uniform(config.input_dim(), config.hidden_dim, 1.0 / (config.input_dim() as f64).sqrt());
    let w2 = uniform(config.hidden_dim, config.vocab_size, 1.0 / (config.hidden_dim as f64).sqrt());
    Ok(PolicyParams {
        config,
        embedding,
        w1,
        b1: vec![0.0; config.hidden_dim],
        gamma: vec![1.0; config.hidden_dim],
        w2,
        b2: vec![0.0; config.vocab_size],
    })
}

impl PolicyParams {
    /// All-zero parameters (including `gamma`) with the config's shapes.
    pub fn zeros(config: PolicyConfig) -> Self {
        PolicyParams {
            config,
            embedding: Matrix::zeros(config.vocab_size, config.embed_dim),
            w1: Matrix::zeros(config.input_dim(), config.hidden_dim),
            b1: vec![0.0; config.hidden_dim],
            gamma: vec![0.0; config.hidden_dim],
            w2: Matrix::zeros(config.hidden_dim, config.vocab_size),
            b2: vec![0.0; config.vocab_size],
        }
    }

    /// Tensors in a fixed canonical order.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("embedding", self.embedding.data()),
            ("w1", self.w1.data()),
            ("b1", &self.b1),
            ("gamma", &self.gamma),
            ("w2", self.w2.data()),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [self.embedding.data_mut(), self.w1.data_mut(), &mut self.b1, &mut self.gamma, self.w2.data_mut(), &mut self.b2]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.tensors().iter().zip(other.tensors().iter()).all(|((_, a), (_, b))| a.len() == b.len())
    }

    /// Content checksum over the config and every parameter bit.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for v in t {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// A gradient with the same tensor layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(PolicyParams);

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Gradient(PolicyParams::zeros(params.config))
    }

    pub fn as_params(&self) -> &PolicyParams {
        &self.0
    }

    pub(crate) fn as_params_mut(&mut self) -> &mut PolicyParams {
        &mut self.0
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 6] {
        self.0.tensors()
    }

    /// All components in canonical order.
    pub fn flat(&self) -> Vec<f64> {
        self.0.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.tensors().iter().flat_map(|(_, t)| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += other`, component by component in canonical order.
    pub fn accumulate(&mut self, other: &Gradient) {
        for (dst, (_, src)) in self.0.tensors_mut().into_iter().zip(other.0.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.0.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}
