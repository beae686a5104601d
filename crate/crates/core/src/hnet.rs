//! Hypernetwork prompt generation.
//!
//! A frozen context encoder `E` pools a sentence into a contextual
//! embedding `ĥ`; the hypernetwork maps `ĥ` to a weight vector `α` over
//! `M` trainable prompt components; the served prompt is the weighted sum
//! `P = Σ α_m · V_m`. Every composed prompt therefore lies in the linear
//! span of the component bank, and fine-tuning needs no domain identity:
//! the hypernetwork routes each sample by content alone.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{param_hash, EncoderLayer, LinearParams, ParamMap, ParamVisit, TransformerLM};
use crate::rng::DetRng;
use crate::tensor::{self, Tape, Tensor};

/// Standard deviation for prompt-component init and random prompts,
/// matching the embedding init scale.
pub const PROMPT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HnetStructure {
    /// Self-attention blocks over the pooled embedding.
    Transformer,
    /// Stacked linear+GELU layers.
    Mlp,
    /// Projection head only.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaNorm {
    /// `α` is a probability vector; bounded prompts, stable early training.
    Softmax,
    /// Raw projection output; preserves exact linearity in the weights.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnetConfig {
    /// Number of prompt components `M`.
    pub components: usize,
    /// Prompt length `L`.
    pub prompt_len: usize,
    /// Encoder depth for the transformer/MLP structures.
    pub depth: usize,
    pub structure: HnetStructure,
    pub normalization: AlphaNorm,
    /// Softmax temperature applied to the projection logits.
    pub temperature: f64,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// When false the whole prompt pipeline is bypassed; the trainer then
    /// degenerates to plain sequential pre-training.
    pub enabled: bool,
}

impl Default for HnetConfig {
    fn default() -> Self {
        HnetConfig {
            components: 6,
            prompt_len: 6,
            depth: 2,
            structure: HnetStructure::Transformer,
            normalization: AlphaNorm::Softmax,
            temperature: 1.0,
            n_heads: 4,
            ffn_mult: 2,
            enabled: true,
        }
    }
}

impl HnetConfig {
    pub fn validate(&self, d_model: usize, max_prompt_len: usize) -> Result<()> {
        if self.components == 0 {
            return Err(Error::InvalidConfig {
                detail: "prompt component count must be at least 1".into(),
            });
        }
        if self.prompt_len == 0 || self.prompt_len > max_prompt_len {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "prompt_len {} outside 1..={max_prompt_len}",
                    self.prompt_len
                ),
            });
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig {
                detail: format!("temperature {} must be positive", self.temperature),
            });
        }
        if self.structure == HnetStructure::Transformer
            && (self.n_heads == 0 || d_model % self.n_heads != 0)
        {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "hypernetwork n_heads {} must divide d_model {d_model}",
                    self.n_heads
                ),
            });
        }
        Ok(())
    }
}

// ── prompt components ────────────────────────────────────────────────

/// The `M` trainable prompt components, stored as one `M×L×d` tensor.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub components: Tensor,
    pub m: usize,
    pub prompt_len: usize,
    pub d_model: usize,
}

impl PromptBank {
    pub fn init(cfg: &HnetConfig, d_model: usize, rng: &mut DetRng) -> Result<Self> {
        if cfg.components == 0 {
            return Err(Error::InvalidConfig {
                detail: "prompt component count must be at least 1".into(),
            });
        }
        Ok(PromptBank {
            components: Tensor::randn(
                vec![cfg.components, cfg.prompt_len, d_model],
                PROMPT_STD,
                rng,
            )?,
            m: cfg.components,
            prompt_len: cfg.prompt_len,
            d_model,
        })
    }
}

impl ParamVisit for PromptBank {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}components"), &self.components);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}components"), &mut self.components);
    }
}

impl ParamMap for PromptBank {
    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        PromptBank {
            components: f(&self.components),
            m: self.m,
            prompt_len: self.prompt_len,
            d_model: self.d_model,
        }
    }
}

/// Exact weighted sum of the component bank: `P = Σ α_m · V_m`.
/// Differentiable in both `α` and the bank.
pub fn compose_prompt(tape: &mut Tape, bank: &PromptBank, alpha: &Tensor) -> Result<Tensor> {
    if alpha.shape() != [bank.m] {
        return Err(Error::ShapeMismatch {
            op: "compose_prompt",
            lhs: alpha.shape().to_vec(),
            rhs: vec![bank.m],
        });
    }
    let flat = tensor::reshape(&bank.components, vec![bank.m, bank.prompt_len * bank.d_model])?;
    let row = tensor::reshape(alpha, vec![1, bank.m])?;
    let mixed = tensor::matmul(tape, &row, &flat)?;
    tensor::reshape(&mixed, vec![bank.prompt_len, bank.d_model])
}

/// Fresh non-trainable prompt with entries i.i.d. normal(0, 0.02);
/// resampled every batch by the agreement loss.
pub fn sample_random_prompt(prompt_len: usize, d_model: usize, rng: &mut DetRng) -> Tensor {
    Tensor::randn(vec![prompt_len, d_model], PROMPT_STD, rng).expect("positive dims")
}

// ── hypernetwork ─────────────────────────────────────────────────────

/// Maps a pooled contextual embedding to component weights `α ∈ R^M`.
/// The projection head is zero-initialized, so in softmax mode an
/// untrained hypernetwork serves the uniform mixture.
#[derive(Debug, Clone)]
pub struct Hypernetwork {
    pub structure: HnetStructure,
    pub normalization: AlphaNorm,
    pub temperature: f64,
    pub encoder_layers: Vec<EncoderLayer>,
    pub mlp_layers: Vec<LinearParams>,
    pub proj: LinearParams,
    d_model: usize,
    m: usize,
}

impl Hypernetwork {
    pub fn init(cfg: &HnetConfig, d_model: usize, rng: &mut DetRng) -> Result<Self> {
        cfg.validate(d_model, cfg.prompt_len)?;
        let mut encoder_layers = Vec::new();
        let mut mlp_layers = Vec::new();
        match cfg.structure {
            HnetStructure::Transformer => {
                for _ in 0..cfg.depth {
                    encoder_layers.push(EncoderLayer::init(d_model, cfg.n_heads, cfg.ffn_mult, rng));
                }
            }
            HnetStructure::Mlp => {
                for _ in 0..cfg.depth {
                    mlp_layers.push(LinearParams {
                        weight: Tensor::randn(vec![d_model, d_model], PROMPT_STD, rng)?,
                        bias: Tensor::zeros(vec![d_model])?,
                    });
                }
            }
            HnetStructure::Linear => {}
        }
        Ok(Hypernetwork {
            structure: cfg.structure,
            normalization: cfg.normalization,
            temperature: cfg.temperature,
            encoder_layers,
            mlp_layers,
            proj: LinearParams::zeros(d_model, cfg.components),
            d_model,
            m: cfg.components,
        })
    }

    pub fn component_count(&self) -> usize {
        self.m
    }
}

impl ParamVisit for Hypernetwork {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, layer) in self.encoder_layers.iter().enumerate() {
            layer.for_each_param(&format!("{prefix}enc{i}"), f);
        }
        for (i, layer) in self.mlp_layers.iter().enumerate() {
            layer.for_each_param(&format!("{prefix}mlp{i}"), f);
        }
        self.proj.for_each_param(&format!("{prefix}proj"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, layer) in self.encoder_layers.iter_mut().enumerate() {
            layer.for_each_param_mut(&format!("{prefix}enc{i}"), f);
        }
        for (i, layer) in self.mlp_layers.iter_mut().enumerate() {
            layer.for_each_param_mut(&format!("{prefix}mlp{i}"), f);
        }
        self.proj.for_each_param_mut(&format!("{prefix}proj"), f);
    }
}

impl ParamMap for Hypernetwork {
    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        Hypernetwork {
            structure: self.structure,
            normalization: self.normalization,
            temperature: self.temperature,
            encoder_layers: self.encoder_layers.iter().map(|l| l.map_params(f)).collect(),
            mlp_layers: self.mlp_layers.iter().map(|l| l.map_params(f)).collect(),
            proj: self.proj.map_params(f),
            d_model: self.d_model,
            m: self.m,
        }
    }
}

/// `α = F(ĥ)`: run the configured encoder over the pooled embedding,
/// project to `R^M`, and normalize when so configured.
pub fn gen_weights(tape: &mut Tape, hnet: &Hypernetwork, hhat: &Tensor) -> Result<Tensor> {
    if hhat.shape() != [hnet.d_model] {
        return Err(Error::ShapeMismatch {
            op: "gen_weights",
            lhs: hhat.shape().to_vec(),
            rhs: vec![hnet.d_model],
        });
    }
    let mut x = tensor::reshape(hhat, vec![1, hnet.d_model])?;
    for layer in &hnet.encoder_layers {
        x = layer.forward(tape, &x, None, None)?;
    }
    for layer in &hnet.mlp_layers {
        let pre = layer.apply(tape, &x)?;
        x = tensor::gelu(tape, &pre)?;
    }
    let mut logits = hnet.proj.apply(tape, &x)?;
    if hnet.temperature != 1.0 {
        logits = tensor::affine(tape, &logits, 1.0 / hnet.temperature, 0.0)?;
    }
    let weights = match hnet.normalization {
        AlphaNorm::Softmax => tensor::softmax_rows(tape, &logits)?,
        AlphaNorm::None => logits,
    };
    tensor::reshape(&weights, vec![hnet.m])
}

// ── frozen context encoder ───────────────────────────────────────────

/// Frozen copy of the initial model `B^0` used as the text encoder `E`.
/// Runs on a disabled tape, so no gradient can ever reach it.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    model: TransformerLM,
    hash: [u8; 32],
}

impl ContextEncoder {
    pub fn new(initial_model: &TransformerLM) -> Self {
        ContextEncoder {
            hash: param_hash(initial_model),
            model: initial_model.clone(),
        }
    }

    pub fn model(&self) -> &TransformerLM {
        &self.model
    }

    pub fn hash(&self) -> [u8; 32] {
        self.hash
    }

    pub fn recomputed_hash(&self) -> [u8; 32] {
        param_hash(&self.model)
    }
}

/// `ĥ = pool(E(x))`: mean-pooled final hidden state over the non-pad
/// token positions. Always a detached value.
pub fn pool_context(encoder: &ContextEncoder, tokens: &[u32]) -> Result<Tensor> {
    let mut tape = Tape::disabled();
    let hidden = encoder.model.encode(&mut tape, tokens, None)?;
    let rows = crate::model::pool_rows(0, tokens)?;
    tensor::mean_rows(&mut tape, &hidden, &rows)
}

/// The full prompt pipeline bundled for the losses: frozen encoder,
/// (tracked) hypernetwork, and (tracked) component bank.
pub struct PromptSource<'a> {
    pub encoder: &'a ContextEncoder,
    pub hnet: &'a Hypernetwork,
    pub bank: &'a PromptBank,
}

impl<'a> PromptSource<'a> {
    /// `α` for one sample.
    pub fn weights_for(&self, tape: &mut Tape, tokens: &[u32]) -> Result<Tensor> {
        let hhat = pool_context(self.encoder, tokens)?;
        gen_weights(tape, self.hnet, &hhat)
    }

    /// Composed prompt for one sample.
    pub fn prompt_for(&self, tape: &mut Tape, tokens: &[u32]) -> Result<Tensor> {
        let alpha = self.weights_for(tape, tokens)?;
        compose_prompt(tape, self.bank, &alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LMConfig, PAD_TOKEN};
    use crate::rng::derive_rng;

    fn micro() -> (TransformerLM, HnetConfig) {
        let lm_cfg = LMConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 12,
            max_prompt_len: 4,
            ffn_mult: 2,
            ..LMConfig::default()
        };
        let mut rng = derive_rng(21, "hnet-test", &[]);
        let model = TransformerLM::new(&lm_cfg, &mut rng).unwrap();
        let hnet_cfg = HnetConfig {
            components: 3,
            prompt_len: 2,
            depth: 1,
            ..HnetConfig::default()
        };
        (model, hnet_cfg)
    }

    #[test]
    fn pool_of_single_token_is_its_hidden_state() {
        let (model, _) = micro();
        let encoder = ContextEncoder::new(&model);
        let pooled = pool_context(&encoder, &[7]).unwrap();
        let mut tape = Tape::disabled();
        let hidden = model.encode(&mut tape, &[7], None).unwrap();
        assert_eq!(pooled.data(), &hidden.data()[..16]);
    }

    #[test]
    fn pad_suffix_leaves_pooled_embedding_unchanged() {
        let (model, _) = micro();
        let encoder = ContextEncoder::new(&model);
        let a = pool_context(&encoder, &[5, 6, 7]).unwrap();
        let b = pool_context(&encoder, &[5, 6, 7, PAD_TOKEN, PAD_TOKEN]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(
            pool_context(&encoder, &[PAD_TOKEN, PAD_TOKEN]),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn zero_init_projection_gives_uniform_alpha() {
        let (model, hnet_cfg) = micro();
        let mut rng = derive_rng(22, "hnet", &[]);
        let hnet = Hypernetwork::init(&hnet_cfg, 16, &mut rng).unwrap();
        let encoder = ContextEncoder::new(&model);
        let hhat = pool_context(&encoder, &[4, 9, 11]).unwrap();
        let mut tape = Tape::disabled();
        let alpha = gen_weights(&mut tape, &hnet, &hhat).unwrap();
        let sum: f64 = alpha.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "alpha sums to {sum}");
        for &a in alpha.data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_hand_case_and_one_hot_basis() {
        let bank = PromptBank {
            components: Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
            m: 2,
            prompt_len: 1,
            d_model: 2,
        };
        let mut tape = Tape::disabled();
        let alpha = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        let p = compose_prompt(&mut tape, &bank, &alpha).unwrap();
        assert_eq!(p.shape(), &[1, 2]);
        assert_eq!(p.data(), &[0.5, 1.0]);

        let one_hot = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let p = compose_prompt(&mut tape, &bank, &one_hot).unwrap();
        assert_eq!(p.data(), &[0.0, 2.0]);

        let bad = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert!(compose_prompt(&mut tape, &bank, &bad).is_err());
    }

    #[test]
    fn compose_is_linear_in_alpha() {
        let mut rng = derive_rng(23, "bank", &[]);
        let cfg = HnetConfig { components: 4, prompt_len: 3, ..HnetConfig::default() };
        let bank = PromptBank::init(&cfg, 8, &mut rng).unwrap();
        let mut tape = Tape::disabled();
        let a1 = Tensor::randn(vec![4], 1.0, &mut rng).unwrap();
        let a2 = Tensor::randn(vec![4], 1.0, &mut rng).unwrap();
        let sum = Tensor::new(
            vec![4],
            a1.data().iter().zip(a2.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let p1 = compose_prompt(&mut tape, &bank, &a1).unwrap();
        let p2 = compose_prompt(&mut tape, &bank, &a2).unwrap();
        let ps = compose_prompt(&mut tape, &bank, &sum).unwrap();
        for i in 0..ps.numel() {
            assert!((ps.data()[i] - p1.data()[i] - p2.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn random_prompts_are_seeded_and_scaled() {
        let mut r1 = derive_rng(24, "prand", &[]);
        let mut r2 = derive_rng(24, "prand", &[]);
        let p1 = sample_random_prompt(4, 8, &mut r1);
        let p2 = sample_random_prompt(4, 8, &mut r2);
        assert_eq!(p1.data(), p2.data());
        let p3 = sample_random_prompt(4, 8, &mut r1);
        assert_ne!(p1.data(), p3.data());

        // Empirical entry std over 1e5 draws.
        let mut rng = derive_rng(25, "prand", &[]);
        let big = sample_random_prompt(1000, 100, &mut rng);
        let n = big.numel() as f64;
        let mean: f64 = big.data().iter().sum::<f64>() / n;
        let std = libm::sqrt(big.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n);
        assert!((0.019..=0.021).contains(&std), "std {std}");
    }

    #[test]
    fn mlp_and_linear_structures_work() {
        let (model, mut cfg) = micro();
        let encoder = ContextEncoder::new(&model);
        let hhat = pool_context(&encoder, &[4, 9]).unwrap();
        for structure in [HnetStructure::Mlp, HnetStructure::Linear] {
            cfg.structure = structure;
            let mut rng = derive_rng(26, "hnet", &[]);
            let hnet = Hypernetwork::init(&cfg, 16, &mut rng).unwrap();
            let mut tape = Tape::disabled();
            let alpha = gen_weights(&mut tape, &hnet, &hhat).unwrap();
            assert_eq!(alpha.shape(), &[3]);
            let sum: f64 = alpha.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
