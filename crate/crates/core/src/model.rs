//! The toy next-token model: frozen core parameters and the forward pass.
//!
//! The model embeds each token of a fixed-length prompt, averages the
//! embeddings over the context, pushes the result through tanh dense layers,
//! and produces a softmax distribution over the vocabulary. The forward pass
//! is pure and bit-reproducible; training lives in the crate-private
//! `train` module.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::BehavioralModule;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fileio;
use crate::linalg::Matrix;
use crate::parallel;
use crate::rng;
use crate::train;

/// Floor applied to every probability before it enters a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const CORE_MAGIC: &[u8; 8] = b"RLAECOR1";

/// Fixed-length tokenized input with a stable identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub tokens: Vec<usize>,
}

impl Prompt {
    pub fn new(id: impl Into<String>, tokens: Vec<usize>) -> Self {
        Prompt {
            id: id.into(),
            tokens,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.tokens.len() != config.context_len {
            return Err(Error::Shape(format!(
                "prompt {} has {} tokens, expected {}",
                self.id,
                self.tokens.len(),
                config.context_len
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|t| **t >= config.vocab_size) {
            return Err(Error::Shape(format!(
                "prompt {} contains token {t} outside vocab of size {}",
                self.id, config.vocab_size
            )));
        }
        Ok(())
    }
}

/// Normalized probability vector over the output alphabet for one prompt.
///
/// Entries are clamped to [`PROB_FLOOR`] and renormalized on construction,
/// so every entry is strictly positive and the sum is 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDistribution {
    pub prompt_id: String,
    pub probs: Vec<f64>,
}

impl OutputDistribution {
    pub fn new(prompt_id: impl Into<String>, raw: Vec<f64>) -> Result<Self> {
        if raw.len() < 2 {
            return Err(Error::Shape(format!(
                "distribution needs at least 2 entries, got {}",
                raw.len()
            )));
        }
        if raw.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Range(
                "distribution entries must be finite and non-negative".into(),
            ));
        }
        // Clamp and renormalize only when needed, so distributions that
        // already satisfy the invariants pass through bit-unchanged.
        let mut probs = raw;
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| *p < PROB_FLOOR) || (sum - 1.0).abs() > 1e-9 {
            for p in &mut probs {
                *p = p.max(PROB_FLOOR);
            }
            let sum: f64 = probs.iter().sum();
            for p in &mut probs {
                *p /= sum;
            }
        }
        Ok(OutputDistribution {
            prompt_id: prompt_id.into(),
            probs,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats: -sum p ln p.
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().map(|p| p * p.ln()).sum::<f64>()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// One dense layer: `weight` is out x in, `bias` has length out.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// The frozen identity parameter set of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreParams {
    config: ModelConfig,
    embedding: Matrix,
    layers: Vec<DenseLayer>,
}

impl CoreParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// SHA-256 over the raw little-endian bytes of every parameter, in a
    /// fixed order. Changes iff any parameter byte changes.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for buf in self.param_buffers() {
            for v in buf {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }

    /// Parameter buffers in fingerprint order: embedding, then per layer
    /// weight and bias.
    pub(crate) fn param_buffers(&self) -> Vec<&[f64]> {
        let mut bufs = Vec::with_capacity(1 + 2 * self.layers.len());
        bufs.push(self.embedding.data());
        for layer in &self.layers {
            bufs.push(layer.weight.data());
            bufs.push(layer.bias.as_slice());
        }
        bufs
    }

    pub(crate) fn param_count(&self) -> usize {
        self.param_buffers().iter().map(|b| b.len()).sum()
    }

    /// Mutable access to a single parameter by flat index over the
    /// fingerprint buffer order. Used by the gradient check and tests.
    pub(crate) fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        if idx < self.embedding.len() {
            return &mut self.embedding.data_mut()[idx];
        }
        idx -= self.embedding.len();
        for layer in &mut self.layers {
            if idx < layer.weight.len() {
                return &mut layer.weight.data_mut()[idx];
            }
            idx -= layer.weight.len();
            if idx < layer.bias.len() {
                return &mut layer.bias[idx];
            }
            idx -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub(crate) fn embedding_mut(&mut self) -> &mut Matrix {
        &mut self.embedding
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    /// Write the core to a checkpoint file (JSON header, raw f64 payload).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = serde_json::to_vec(&CoreHeader {
            version: 1,
            config: self.config.clone(),
        })?;
        let mut payload = Vec::with_capacity(self.param_count() * 8);
        for buf in self.param_buffers() {
            for v in buf {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        fileio::write_hybrid(path.as_ref(), CORE_MAGIC, &header, &payload)
    }

    /// Read a core checkpoint written by [`CoreParams::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, payload) = fileio::read_hybrid(path.as_ref(), CORE_MAGIC)?;
        let header: CoreHeader = serde_json::from_slice(&header)
            .map_err(|e| Error::Format(format!("bad core header: {e}")))?;
        if header.version != 1 {
            return Err(Error::Format(format!(
                "unsupported core checkpoint version {}",
                header.version
            )));
        }
        header.config.validate()?;
        let mut core = init_core(&header.config)?;
        let expected = core.param_count() * 8;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "core payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        fileio::fill_from_iter(core.embedding.data_mut(), &mut values);
        for layer in &mut core.layers {
            fileio::fill_from_iter(layer.weight.data_mut(), &mut values);
            fileio::fill_from_iter(&mut layer.bias, &mut values);
        }
        Ok(core)
    }
}

#[derive(Serialize, Deserialize)]
struct CoreHeader {
    version: u32,
    config: ModelConfig,
}

/// Deterministically initialize core parameters from the config seed.
///
/// Embeddings are standard normal; dense weights are normal with standard
/// deviation 1/sqrt(fan_in); biases start at zero. Identical configs
/// produce bit-identical parameters.
pub fn init_core(config: &ModelConfig) -> Result<CoreParams> {
    config.validate()?;
    let mut rng = rng::seeded(config.init_seed);
    let d = config.embed_dim();
    let mut embedding = Matrix::zeros(config.vocab_size, d);
    for v in embedding.data_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let mut layers = Vec::new();
    for (out, inp) in config.layer_dims() {
        let scale = 1.0 / (inp as f64).sqrt();
        let mut weight = Matrix::zeros(out, inp);
        for v in weight.data_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = n * scale;
        }
        layers.push(DenseLayer {
            weight,
            bias: vec![0.0; out],
        });
    }
    Ok(CoreParams {
        config: config.clone(),
        embedding,
        layers,
    })
}

/// Evaluate the model on one prompt.
///
/// With `module` absent the computation touches only the core parameters.
/// An attached (or eliminated) module adds its low-rank delta to each
/// adapted layer: z = W h + up (down h) + b. Identical inputs produce
/// bit-identical distributions.
pub fn forward(
    core: &CoreParams,
    module: Option<&BehavioralModule>,
    prompt: &Prompt,
) -> Result<OutputDistribution> {
    let trace = train::forward_trace(core, module, prompt)?;
    OutputDistribution::new(prompt.id.clone(), trace.probs)
}

/// Evaluate a batch of prompts, in parallel when the `parallel` feature is
/// enabled. Output order matches input order and is bit-identical to the
/// sequential path.
pub fn forward_all(
    core: &CoreParams,
    module: Option<&BehavioralModule>,
    prompts: &[Prompt],
) -> Result<Vec<OutputDistribution>> {
    parallel::map_ordered(prompts, |p| forward(core, module, p))
        .into_iter()
        .collect()
}

/// Sequential batch evaluation, available regardless of features.
pub fn forward_all_seq(
    core: &CoreParams,
    module: Option<&BehavioralModule>,
    prompts: &[Prompt],
) -> Result<Vec<OutputDistribution>> {
    parallel::map_ordered_seq(prompts, |p| forward(core, module, p))
        .into_iter()
        .collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig::new(16, 8, vec![32], "S", 7).unwrap()
    }

    fn prompt_from_seed(config: &ModelConfig, seed: u64) -> Prompt {
        use rand::Rng;
        let mut rng = rng::seeded(seed);
        let tokens = (0..config.context_len)
            .map(|_| rng.random_range(0..config.vocab_size))
            .collect();
        Prompt::new(format!("t{seed}"), tokens)
    }

    #[test]
    fn init_is_deterministic() {
        let config = small_config();
        let a = init_core(&config).unwrap();
        let b = init_core(&config).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_core(&ModelConfig::new(16, 8, vec![32], "S", 7).unwrap()).unwrap();
        let b = init_core(&ModelConfig::new(16, 8, vec![32], "S", 8).unwrap()).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        // Byte-level oracle: the generated buffers themselves differ.
        let differs = a
            .param_buffers()
            .into_iter()
            .zip(b.param_buffers())
            .any(|(x, y)| x != y);
        assert!(differs);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(matches!(
            init_core(&ModelConfig {
                vocab_size: 1,
                context_len: 8,
                hidden_widths: vec![32],
                scale_tag: "S".into(),
                init_seed: 7,
            }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let config = small_config();
        let core = init_core(&config).unwrap();
        let p = prompt_from_seed(&config, 3);
        let a = forward(&core, None, &p).unwrap();
        let b = forward(&core, None, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_normalizes() {
        let config = small_config();
        let core = init_core(&config).unwrap();
        let p = prompt_from_seed(&config, 4);
        let d = forward(&core, None, &p).unwrap();
        let sum: f64 = d.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(d.probs.iter().all(|p| *p >= PROB_FLOOR));
    }

    #[test]
    fn zeroed_model_is_uniform() {
        // Hand-built degenerate model: all parameters zero gives logits of
        // all zeros, so the output is exactly uniform.
        let config = ModelConfig::new(2, 1, vec![4], "tiny", 0).unwrap();
        let mut core = init_core(&config).unwrap();
        for i in 0..core.param_count() {
            *core.param_mut(i) = 0.0;
        }
        let d = forward(&core, None, &Prompt::new("p", vec![1])).unwrap();
        assert_eq!(d.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn prompt_validation() {
        let config = small_config();
        let core = init_core(&config).unwrap();
        let short = Prompt::new("short", vec![0; 4]);
        assert!(matches!(forward(&core, None, &short), Err(Error::Shape(_))));
        let oob = Prompt::new("oob", vec![99; 8]);
        assert!(matches!(forward(&core, None, &oob), Err(Error::Shape(_))));
    }

    #[test]
    fn entropy_examples() {
        let one_hot = OutputDistribution::new("p", vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(one_hot.entropy().abs() < 1e-7);

        let uniform = OutputDistribution::new("p", vec![0.25; 4]).unwrap();
        assert!((uniform.entropy() - 1.3862943611198906).abs() < 1e-12);

        // Oracle: direct summation at high precision.
        let mixed = OutputDistribution::new("p", vec![0.5, 0.25, 0.25]).unwrap();
        assert!((mixed.entropy() - 1.0397207708399180).abs() < 1e-10);
    }

    #[test]
    fn entropy_bounds() {
        let config = small_config();
        let core = init_core(&config).unwrap();
        for seed in 0..20 {
            let p = prompt_from_seed(&config, seed);
            let h = forward(&core, None, &p).unwrap().entropy();
            assert!(h >= 0.0);
            assert!(h <= config.max_entropy() + 1e-9);
        }
    }

    #[test]
    fn distribution_rejects_bad_input() {
        assert!(OutputDistribution::new("p", vec![0.5, -0.1]).is_err());
        assert!(OutputDistribution::new("p", vec![0.5, f64::NAN]).is_err());
        assert!(OutputDistribution::new("p", vec![1.0]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("core.bin");
        let core = init_core(&small_config()).unwrap();
        core.save(&path).unwrap();
        let loaded = CoreParams::load(&path).unwrap();
        assert_eq!(core, loaded);
        assert_eq!(core.fingerprint(), loaded.fingerprint());
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTACORE????").unwrap();
        assert!(matches!(CoreParams::load(&path), Err(Error::Format(_))));
    }
}
