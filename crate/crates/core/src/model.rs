//! Tiny bidirectional transformer encoder with soft-prompt prefixes.
//!
//! The encoder takes a token sequence plus an optional `L×d` prompt matrix;
//! prompt rows occupy positions `0..L`, token rows follow, and attention is
//! fully bidirectional with padding keys masked out. An MLM head and
//! per-task classification heads sit on top. Frozen stage snapshots carry a
//! SHA-256 parameter hash so immutability is checkable.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hnet::{Hypernetwork, HnetConfig, PromptBank};
use crate::rng::DetRng;
use crate::tensor::{self, Tape, Tensor};

/// Padding sentinel; never attended to, never masked, never pooled.
pub const PAD_TOKEN: u32 = 0;
/// MLM corruption sentinel.
pub const MASK_TOKEN: u32 = 1;
/// Reserved pooling sentinel (mean pooling is the default, so this id is
/// reserved but unused by the stock heads).
pub const CLS_TOKEN: u32 = 2;
/// First id available to domain content tokens.
pub const FIRST_CONTENT_TOKEN: u32 = 3;

const LN_EPS: f64 = 1e-5;
const NEG_INF_MASK: f64 = -1e30;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Maximum token-sequence length (prompt rows not included).
    pub max_seq_len: usize,
    /// Maximum prompt length the position table accommodates.
    pub max_prompt_len: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Whether prompt rows consume the leading position-embedding slots.
    pub prompt_position_embeddings: bool,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig {
            vocab_size: 128,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 64,
            max_prompt_len: 16,
            ffn_mult: 2,
            dropout: 0.0,
            prompt_position_embeddings: true,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "d_model {} must be a positive multiple of n_heads {}",
                    self.d_model, self.n_heads
                ),
            });
        }
        if self.vocab_size <= FIRST_CONTENT_TOKEN as usize {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "vocab_size {} leaves no room for content tokens after the sentinels",
                    self.vocab_size
                ),
            });
        }
        if self.n_layers == 0 || self.ffn_mult == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidConfig {
                detail: "n_layers, ffn_mult and max_seq_len must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig {
                detail: format!("dropout {} outside [0, 1)", self.dropout),
            });
        }
        Ok(())
    }
}

// ── parameter containers ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub weight: Tensor, // in×out
    pub bias: Tensor,   // out
}

impl LinearParams {
    fn init(d_in: usize, d_out: usize, rng: &mut DetRng) -> Self {
        LinearParams {
            weight: Tensor::randn(vec![d_in, d_out], INIT_STD, rng).expect("shape"),
            bias: Tensor::zeros(vec![d_out]).expect("shape"),
        }
    }

    pub(crate) fn zeros(d_in: usize, d_out: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(vec![d_in, d_out]).expect("shape"),
            bias: Tensor::zeros(vec![d_out]).expect("shape"),
        }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let y = tensor::matmul(tape, x, &self.weight)?;
        tensor::add_row(tape, &y, &self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn init(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::new(vec![d], vec![1.0; d]).expect("shape"),
            bias: Tensor::zeros(vec![d]).expect("shape"),
        }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        tensor::layer_norm(tape, x, &self.gain, &self.bias, LN_EPS)
    }
}

/// One post-norm encoder block: multi-head attention and a feed-forward
/// network, each wrapped in residual + layer norm.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub attn_norm: LayerNormParams,
    pub ffn_in: LinearParams,
    pub ffn_out: LinearParams,
    pub ffn_norm: LayerNormParams,
    n_heads: usize,
}

impl EncoderLayer {
    pub(crate) fn init(d: usize, n_heads: usize, ffn_mult: usize, rng: &mut DetRng) -> Self {
        EncoderLayer {
            wq: LinearParams::init(d, d, rng),
            wk: LinearParams::init(d, d, rng),
            wv: LinearParams::init(d, d, rng),
            wo: LinearParams::init(d, d, rng),
            attn_norm: LayerNormParams::init(d),
            ffn_in: LinearParams::init(d, d * ffn_mult, rng),
            ffn_out: LinearParams::init(d * ffn_mult, d, rng),
            ffn_norm: LayerNormParams::init(d),
            n_heads,
        }
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        key_mask: Option<&Tensor>,
        mut dropout: Option<(&mut DetRng, f64)>,
    ) -> Result<Tensor> {
        let d = x.cols();
        let head_dim = d / self.n_heads;
        let q = self.wq.apply(tape, x)?;
        let k = self.wk.apply(tape, x)?;
        let v = self.wv.apply(tape, x)?;
        let scale = 1.0 / libm::sqrt(head_dim as f64);
        let mut head_outputs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = tensor::slice_cols(tape, &q, lo, hi)?;
            let kh = tensor::slice_cols(tape, &k, lo, hi)?;
            let vh = tensor::slice_cols(tape, &v, lo, hi)?;
            let mut scores = tensor::matmul_nt(tape, &qh, &kh)?;
            scores = tensor::affine(tape, &scores, scale, 0.0)?;
            if let Some(mask) = key_mask {
                scores = tensor::add(tape, &scores, mask)?;
            }
            let attn = tensor::softmax_rows(tape, &scores)?;
            head_outputs.push(tensor::matmul(tape, &attn, &vh)?);
        }
        let refs: Vec<&Tensor> = head_outputs.iter().collect();
        let ctx = tensor::concat_cols(tape, &refs)?;
        let mut attn_out = self.wo.apply(tape, &ctx)?;
        if let Some((rng, p)) = dropout.as_mut() {
            attn_out = tensor::dropout(tape, &attn_out, *p, rng)?;
        }
        let residual = tensor::add(tape, x, &attn_out)?;
        let x = self.attn_norm.apply(tape, &residual)?;

        let pre = self.ffn_in.apply(tape, &x)?;
        let hidden = tensor::gelu(tape, &pre)?;
        let mut ffn_out = self.ffn_out.apply(tape, &hidden)?;
        if let Some((rng, p)) = dropout.as_mut() {
            ffn_out = tensor::dropout(tape, &ffn_out, *p, rng)?;
        }
        let residual = tensor::add(tape, &x, &ffn_out)?;
        self.ffn_norm.apply(tape, &residual)
    }
}

// ── the language model ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TransformerLM {
    pub config: LMConfig,
    pub token_embedding: Tensor,    // vocab×d
    pub position_embedding: Tensor, // (max_seq_len + max_prompt_len)×d
    pub emb_norm: LayerNormParams,
    pub layers: Vec<EncoderLayer>,
    pub mlm_head: LinearParams,
    pub class_heads: BTreeMap<u32, LinearParams>,
}

impl TransformerLM {
    pub fn new(config: &LMConfig, rng: &mut DetRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = Tensor::randn(vec![config.vocab_size, d], INIT_STD, rng)?;
        let position_embedding =
            Tensor::randn(vec![config.max_seq_len + config.max_prompt_len, d], INIT_STD, rng)?;
        let emb_norm = LayerNormParams::init(d);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer::init(d, config.n_heads, config.ffn_mult, rng))
            .collect();
        let mlm_head = LinearParams::init(d, config.vocab_size, rng);
        Ok(TransformerLM {
            config: config.clone(),
            token_embedding,
            position_embedding,
            emb_norm,
            layers,
            mlm_head,
            class_heads: BTreeMap::new(),
        })
    }

    /// Contextual hidden states for a token sequence with an optional
    /// prompt prefix: `(L+T)×d`, prompt rows first.
    pub fn encode(&self, tape: &mut Tape, tokens: &[u32], prompt: Option<&Tensor>) -> Result<Tensor> {
        self.encode_inner(tape, tokens, prompt, None)
    }

    /// Like [`TransformerLM::encode`] but applies the configured dropout,
    /// drawing masks from `rng`. Used by training paths only.
    pub fn encode_train(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        prompt: Option<&Tensor>,
        rng: &mut DetRng,
    ) -> Result<Tensor> {
        if self.config.dropout > 0.0 {
            self.encode_inner(tape, tokens, prompt, Some((rng, self.config.dropout)))
        } else {
            self.encode_inner(tape, tokens, prompt, None)
        }
    }

    fn encode_inner(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        prompt: Option<&Tensor>,
        mut dropout: Option<(&mut DetRng, f64)>,
    ) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let t_len = tokens.len();
        if t_len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: t_len,
                max: self.config.max_seq_len,
            });
        }
        let d = self.config.d_model;
        let prompt_len = match prompt {
            Some(p) => {
                let l = p.rows();
                if p.shape().len() != 2 || p.cols() != d {
                    return Err(Error::ShapeMismatch {
                        op: "encode",
                        lhs: p.shape().to_vec(),
                        rhs: vec![l, d],
                    });
                }
                if l > self.config.max_prompt_len {
                    return Err(Error::PromptTooLong {
                        len: l,
                        max: self.config.max_prompt_len,
                    });
                }
                l
            }
            None => 0,
        };
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::InvalidShape {
                    op: "encode",
                    detail: format!("token id {t} out of vocabulary"),
                });
            }
        }

        let tok = tensor::gather_rows(tape, &self.token_embedding, tokens)?;
        let mut x = match prompt {
            Some(p) => tensor::concat_rows(tape, &[p, &tok])?,
            None => tok,
        };
        let total = prompt_len + t_len;
        if self.config.prompt_position_embeddings || prompt.is_none() {
            let pos = tensor::slice_rows(tape, &self.position_embedding, 0, total)?;
            x = tensor::add(tape, &x, &pos)?;
        } else {
            // Prompt rows carry no position signal; tokens use slots 0..T.
            let pos = tensor::slice_rows(tape, &self.position_embedding, 0, t_len)?;
            let zeros = Tensor::zeros(vec![prompt_len, d])?;
            let padded = tensor::concat_rows(tape, &[&zeros, &pos])?;
            x = tensor::add(tape, &x, &padded)?;
        }
        let mut x = self.emb_norm.apply(tape, &x)?;
        if let Some((rng, p)) = dropout.as_mut() {
            x = tensor::dropout(tape, &x, *p, rng)?;
        }

        let key_mask = pad_key_mask(total, prompt_len, tokens)?;
        for layer in &self.layers {
            let dr = dropout.as_mut().map(|(rng, p)| (&mut **rng, *p));
            x = layer.forward(tape, &x, key_mask.as_ref(), dr)?;
        }
        Ok(x)
    }

    /// Vocabulary logits for every position of an encoded sequence. Rows
    /// at prompt positions exist but no loss ever consumes them.
    pub fn mlm_logits(&self, tape: &mut Tape, hidden: &Tensor) -> Result<Tensor> {
        self.mlm_head.apply(tape, hidden)
    }

    /// Task logits from mean-pooled token (non-prompt, non-pad) states.
    pub fn class_logits(
        &self,
        tape: &mut Tape,
        hidden: &Tensor,
        task_id: u32,
        prompt_len: usize,
        tokens: &[u32],
    ) -> Result<Tensor> {
        let head = self
            .class_heads
            .get(&task_id)
            .ok_or(Error::UnknownTask { task_id })?;
        let rows = pool_rows(prompt_len, tokens)?;
        let pooled = tensor::mean_rows(tape, hidden, &rows)?;
        let pooled = tensor::reshape(&pooled, vec![1, self.config.d_model])?;
        head.apply(tape, &pooled)
    }

    /// Install a freshly initialized classification head for a task.
    pub fn add_class_head(&mut self, task_id: u32, classes: usize, rng: &mut DetRng) {
        self.class_heads
            .insert(task_id, LinearParams::init(self.config.d_model, classes, rng));
    }
}

/// Indices of the non-pad token rows in an encoded `(L+T)×d` matrix.
pub(crate) fn pool_rows(prompt_len: usize, tokens: &[u32]) -> Result<Vec<usize>> {
    let rows: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD_TOKEN)
        .map(|(i, _)| prompt_len + i)
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(rows)
}

/// Additive attention mask: −inf on key columns at pad positions, or
/// `None` when nothing is padded. Prompt rows are always attendable.
fn pad_key_mask(total: usize, prompt_len: usize, tokens: &[u32]) -> Result<Option<Tensor>> {
    if tokens.iter().all(|&t| t != PAD_TOKEN) {
        return Ok(None);
    }
    let mut row = vec![0.0; total];
    for (i, &t) in tokens.iter().enumerate() {
        if t == PAD_TOKEN {
            row[prompt_len + i] = NEG_INF_MASK;
        }
    }
    let mut data = Vec::with_capacity(total * total);
    for _ in 0..total {
        data.extend_from_slice(&row);
    }
    Ok(Some(Tensor::new(vec![total, total], data)?))
}

// ── parameter traversal ──────────────────────────────────────────────

/// Named read access to every trainable tensor of a component.
pub trait ParamVisit {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// Structural clone with every parameter tensor passed through `f`;
/// used to build tape-tracked mirrors.
pub trait ParamMap: Sized {
    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self;
}

impl ParamVisit for LinearParams {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl ParamMap for LinearParams {
    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        LinearParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl ParamVisit for LayerNormParams {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.gain"), &self.gain);
        f(&format!("{prefix}.bias"), &self.bias);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.gain"), &mut self.gain);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl ParamMap for LayerNormParams {
    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        LayerNormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

impl ParamVisit for EncoderLayer {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.wq.for_each_param(&format!("{prefix}.wq"), f);
        self.wk.for_each_param(&format!("{prefix}.wk"), f);
        self.wv.for_each_param(&format!("{prefix}.wv"), f);
        self.wo.for_each_param(&format!("{prefix}.wo"), f);
        self.attn_norm.for_each_param(&format!("{prefix}.attn_norm"), f);
        self.ffn_in.for_each_param(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.for_each_param(&format!("{prefix}.ffn_out"), f);
        self.ffn_norm.for_each_param(&format!("{prefix}.ffn_norm"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.wq.for_each_param_mut(&format!("{prefix}.wq"), f);
        self.wk.for_each_param_mut(&format!("{prefix}.wk"), f);
        self.wv.for_each_param_mut(&format!("{prefix}.wv"), f);
        self.wo.for_each_param_mut(&format!("{prefix}.wo"), f);
        self.attn_norm.for_each_param_mut(&format!("{prefix}.attn_norm"), f);
        self.ffn_in.for_each_param_mut(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.for_each_param_mut(&format!("{prefix}.ffn_out"), f);
        self.ffn_norm.for_each_param_mut(&format!("{prefix}.ffn_norm"), f);
    }
}

impl ParamMap for EncoderLayer {
    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        EncoderLayer {
            wq: self.wq.map_params(f),
            wk: self.wk.map_params(f),
            wv: self.wv.map_params(f),
            wo: self.wo.map_params(f),
            attn_norm: self.attn_norm.map_params(f),
            ffn_in: self.ffn_in.map_params(f),
            ffn_out: self.ffn_out.map_params(f),
            ffn_norm: self.ffn_norm.map_params(f),
            n_heads: self.n_heads,
        }
    }
}

impl ParamVisit for TransformerLM {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}tok_emb"), &self.token_embedding);
        f(&format!("{prefix}pos_emb"), &self.position_embedding);
        self.emb_norm.for_each_param(&format!("{prefix}emb_norm"), f);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each_param(&format!("{prefix}layer{i}"), f);
        }
        self.mlm_head.for_each_param(&format!("{prefix}mlm_head"), f);
        for (task, head) in &self.class_heads {
            head.for_each_param(&format!("{prefix}class_head{task}"), f);
        }
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}tok_emb"), &mut self.token_embedding);
        f(&format!("{prefix}pos_emb"), &mut self.position_embedding);
        self.emb_norm.for_each_param_mut(&format!("{prefix}emb_norm"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_param_mut(&format!("{prefix}layer{i}"), f);
        }
        self.mlm_head.for_each_param_mut(&format!("{prefix}mlm_head"), f);
        for (task, head) in &mut self.class_heads {
            head.for_each_param_mut(&format!("{prefix}class_head{task}"), f);
        }
    }
}

impl ParamMap for TransformerLM {
    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        TransformerLM {
            config: self.config.clone(),
            token_embedding: f(&self.token_embedding),
            position_embedding: f(&self.position_embedding),
            emb_norm: self.emb_norm.map_params(f),
            layers: self.layers.iter().map(|l| l.map_params(f)).collect(),
            mlm_head: self.mlm_head.map_params(f),
            class_heads: self
                .class_heads
                .iter()
                .map(|(k, v)| (*k, v.map_params(f)))
                .collect(),
        }
    }
}

/// SHA-256 over the named parameters of a component, in traversal order:
/// name bytes, shape dims, then little-endian 64-bit float payload.
pub fn param_hash<T: ParamVisit + ?Sized>(component: &T) -> [u8; 32] {
    let mut hasher = Sha256::new();
    component.for_each_param("", &mut |name, t| {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    });
    hasher.finalize().into()
}

// ── live ensemble and frozen snapshots ───────────────────────────────

/// The trainable ensemble: language model, prompt-component bank, and
/// hypernetwork. Everything the continual trainer updates.
#[derive(Debug, Clone)]
pub struct LiveModel {
    pub model: TransformerLM,
    pub bank: PromptBank,
    pub hnet: Hypernetwork,
}

/// Which pieces of a [`LiveModel`] become differentiable leaves.
#[derive(Debug, Clone, Copy)]
pub struct TrackedParts {
    pub lm: bool,
    pub prompts: bool,
}

impl LiveModel {
    /// Initialize the full ensemble from one rng stream. The draw order is
    /// fixed (model, bank, hypernetwork) so runs that never touch the
    /// prompt machinery still share the model init with runs that do.
    pub fn init(lm_cfg: &LMConfig, hnet_cfg: &HnetConfig, rng: &mut DetRng) -> Result<Self> {
        let model = TransformerLM::new(lm_cfg, rng)?;
        let bank = PromptBank::init(hnet_cfg, lm_cfg.d_model, rng)?;
        let hnet = Hypernetwork::init(hnet_cfg, lm_cfg.d_model, rng)?;
        Ok(LiveModel { model, bank, hnet })
    }

    /// Tape-tracked mirror. Untracked pieces are plain detached clones,
    /// so gradients flow through them but never into them.
    pub fn tracked(&self, tape: &mut Tape, parts: TrackedParts) -> LiveModel {
        let mut track = |t: &Tensor| tape.leaf(t);
        let mut keep = |t: &Tensor| t.detached();
        LiveModel {
            model: if parts.lm {
                self.model.map_params(&mut track)
            } else {
                self.model.map_params(&mut keep)
            },
            bank: if parts.prompts {
                self.bank.map_params(&mut track)
            } else {
                self.bank.map_params(&mut keep)
            },
            hnet: if parts.prompts {
                self.hnet.map_params(&mut track)
            } else {
                self.hnet.map_params(&mut keep)
            },
        }
    }

    pub fn param_hash(&self) -> [u8; 32] {
        param_hash(self)
    }

    /// Deep, immutable copy with a content hash; the stage boundary `B^i`.
    pub fn freeze(&self) -> Snapshot {
        Snapshot {
            hash: self.param_hash(),
            live: self.clone(),
        }
    }
}

impl ParamVisit for LiveModel {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.model.for_each_param(&format!("{prefix}model."), f);
        self.bank.for_each_param(&format!("{prefix}bank."), f);
        self.hnet.for_each_param(&format!("{prefix}hnet."), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.model.for_each_param_mut(&format!("{prefix}model."), f);
        self.bank.for_each_param_mut(&format!("{prefix}bank."), f);
        self.hnet.for_each_param_mut(&format!("{prefix}hnet."), f);
    }
}

/// Immutable parameter copy of the ensemble at a stage boundary.
///
/// The hash is computed at freeze time; because tensors update by buffer
/// replacement, later training of the live model can never reach into a
/// snapshot's buffers.
#[derive(Debug, Clone)]
pub struct Snapshot {
    live: LiveModel,
    hash: [u8; 32],
}

impl Snapshot {
    pub fn model(&self) -> &TransformerLM {
        &self.live.model
    }

    pub fn bank(&self) -> &PromptBank {
        &self.live.bank
    }

    pub fn hnet(&self) -> &Hypernetwork {
        &self.live.hnet
    }

    /// Content hash recorded at freeze time.
    pub fn hash(&self) -> [u8; 32] {
        self.hash
    }

    /// Hash recomputed from the current buffers; equal to [`Snapshot::hash`]
    /// unless something violated immutability.
    pub fn recomputed_hash(&self) -> [u8; 32] {
        self.live.param_hash()
    }

    /// Mutable working copy for fine-tuning; the snapshot itself stays put.
    pub fn to_live(&self) -> LiveModel {
        self.live.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hnet::HnetConfig;
    use crate::rng::derive_rng;
    use crate::tensor::Tape;

    fn micro_cfg() -> LMConfig {
        LMConfig {
            vocab_size: 64,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
            max_prompt_len: 8,
            ffn_mult: 2,
            ..LMConfig::default()
        }
    }

    fn micro_model(seed: u64) -> TransformerLM {
        let mut rng = derive_rng(seed, "model-test", &[]);
        TransformerLM::new(&micro_cfg(), &mut rng).unwrap()
    }

    #[test]
    fn encode_shapes_with_and_without_prompt() {
        let model = micro_model(1);
        let mut tape = Tape::disabled();
        let tokens = [3u32, 4, 5, 6, 7];
        let h = model.encode(&mut tape, &tokens, None).unwrap();
        assert_eq!(h.shape(), &[5, 16]);

        let mut rng = derive_rng(2, "prompt", &[]);
        let prompt = Tensor::randn(vec![8, 16], 0.02, &mut rng).unwrap();
        let h = model.encode(&mut tape, &tokens, Some(&prompt)).unwrap();
        assert_eq!(h.shape(), &[13, 16]);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let model = micro_model(1);
        let mut tape = Tape::disabled();
        let long: Vec<u32> = vec![3; 17];
        assert!(matches!(
            model.encode(&mut tape, &long, None),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
        let mut rng = derive_rng(3, "prompt", &[]);
        let too_long = Tensor::randn(vec![9, 16], 0.02, &mut rng).unwrap();
        assert!(matches!(
            model.encode(&mut tape, &[3, 4], Some(&too_long)),
            Err(Error::PromptTooLong { len: 9, max: 8 })
        ));
        let wrong_d = Tensor::randn(vec![4, 8], 0.02, &mut rng).unwrap();
        assert!(matches!(
            model.encode(&mut tape, &[3, 4], Some(&wrong_d)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            model.encode(&mut tape, &[], None),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn different_prompts_change_token_states() {
        let model = micro_model(4);
        let mut tape = Tape::disabled();
        let tokens = [3u32, 9, 12, 20, 31];
        // Orthogonal prompts: disjoint one-hot-ish rows.
        let mut p1 = vec![0.0; 4 * 16];
        let mut p2 = vec![0.0; 4 * 16];
        for r in 0..4 {
            p1[r * 16 + r] = 0.5;
            p2[r * 16 + 8 + r] = 0.5;
        }
        let p1 = Tensor::new(vec![4, 16], p1).unwrap();
        let p2 = Tensor::new(vec![4, 16], p2).unwrap();
        let h1 = model.encode(&mut tape, &tokens, Some(&p1)).unwrap();
        let h2 = model.encode(&mut tape, &tokens, Some(&p2)).unwrap();
        // Compare token rows only.
        let differ = (4 * 16..9 * 16).any(|i| (h1.data()[i] - h2.data()[i]).abs() > 1e-12);
        assert!(differ, "token states identical under different prompts");
    }

    #[test]
    fn mlm_logits_shape_and_zero_hidden_bias() {
        let mut model = micro_model(5);
        let mut rng = derive_rng(6, "bias", &[]);
        model.mlm_head.bias = Tensor::randn(vec![64], 1.0, &mut rng).unwrap();
        let mut tape = Tape::disabled();
        let zero_hidden = Tensor::zeros(vec![3, 16]).unwrap();
        let logits = model.mlm_logits(&mut tape, &zero_hidden).unwrap();
        assert_eq!(logits.shape(), &[3, 64]);
        for r in 0..3 {
            assert_eq!(&logits.data()[r * 64..(r + 1) * 64], model.mlm_head.bias.data());
        }

        // Shape check mirroring the 13×64 case: L=8, T=5, vocab 64.
        let tokens = [3u32, 4, 5, 6, 7];
        let prompt = Tensor::randn(vec![8, 16], 0.02, &mut rng).unwrap();
        let h = model.encode(&mut tape, &tokens, Some(&prompt)).unwrap();
        let logits = model.mlm_logits(&mut tape, &h).unwrap();
        assert_eq!(logits.shape(), &[13, 64]);
    }

    #[test]
    fn class_logits_bias_determinism_and_unknown_task() {
        let mut model = micro_model(7);
        let mut rng = derive_rng(8, "head", &[]);
        model.add_class_head(0, 3, &mut rng);
        let mut tape = Tape::disabled();
        let zero_hidden = Tensor::zeros(vec![4, 16]).unwrap();
        let tokens = [3u32, 4, 5, 6];
        let logits = model.class_logits(&mut tape, &zero_hidden, 0, 0, &tokens).unwrap();
        assert_eq!(logits.data(), model.class_heads[&0].bias.data());

        let h = model.encode(&mut tape, &tokens, None).unwrap();
        let l1 = model.class_logits(&mut tape, &h, 0, 0, &tokens).unwrap();
        let l2 = model.class_logits(&mut tape, &h, 0, 0, &tokens).unwrap();
        assert_eq!(l1.data(), l2.data());

        assert!(matches!(
            model.class_logits(&mut tape, &h, 9, 0, &tokens),
            Err(Error::UnknownTask { task_id: 9 })
        ));
    }

    #[test]
    fn bidirectional_attention_spreads_perturbations() {
        // Perturbing token t's embedding changes hidden states at other
        // positions on a 2-layer model.
        let mut model = micro_model(9);
        let mut tape = Tape::disabled();
        let tokens = [3u32, 4, 5, 6];
        let h_before = model.encode(&mut tape, &tokens, None).unwrap();
        // Perturb one coordinate of token 5's embedding row; a uniform
        // shift would be absorbed by the embedding layer norm.
        let mut emb = model.token_embedding.data().to_vec();
        emb[5 * 16 + 3] += 0.75;
        model.token_embedding.set_data(emb).unwrap();
        let h_after = model.encode(&mut tape, &tokens, None).unwrap();
        // Token 5 sits at position 2; check other positions moved.
        for pos in [0usize, 1, 3] {
            let moved = (0..16)
                .any(|j| (h_before.data()[pos * 16 + j] - h_after.data()[pos * 16 + j]).abs() > 1e-9);
            assert!(moved, "position {pos} unaffected");
        }
    }

    #[test]
    fn pad_keys_are_masked_everywhere() {
        let model = micro_model(10);
        let mut tape = Tape::disabled();
        let h1 = model.encode(&mut tape, &[3, 4, 5], None).unwrap();
        let h2 = model.encode(&mut tape, &[3, 4, 5, PAD_TOKEN, PAD_TOKEN], None).unwrap();
        for i in 0..3 * 16 {
            assert!(
                (h1.data()[i] - h2.data()[i]).abs() < 1e-9,
                "pad suffix changed non-pad hidden states"
            );
        }
    }

    #[test]
    fn freeze_is_immune_to_later_training_updates() {
        let lm_cfg = micro_cfg();
        let hnet_cfg = HnetConfig::default();
        let mut rng = derive_rng(11, "live", &[]);
        let mut live = LiveModel::init(&lm_cfg, &hnet_cfg, &mut rng).unwrap();
        let snap = live.freeze();
        let snap2 = live.freeze();
        assert_eq!(snap.hash(), snap2.hash());

        // Forward equality at the freeze instant, bit for bit.
        let mut tape = Tape::disabled();
        let tokens = [3u32, 4, 5];
        let h_live = live.model.encode(&mut tape, &tokens, None).unwrap();
        let h_snap = snap.model().encode(&mut tape, &tokens, None).unwrap();
        assert_eq!(
            h_live.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            h_snap.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        // Simulate 100 update steps.
        for step in 0..100 {
            live.model.for_each_param_mut("", &mut |_, t| {
                let bumped: Vec<f64> = t.data().iter().map(|v| v + 1e-3 * (step as f64 + 1.0)).collect();
                t.set_data(bumped).unwrap();
            });
        }
        assert_eq!(snap.hash(), snap.recomputed_hash());
        assert_ne!(live.param_hash(), snap.hash());
    }

    #[test]
    fn param_names_are_unique_and_ordered() {
        let mut model = micro_model(12);
        let mut rng = derive_rng(13, "head", &[]);
        model.add_class_head(1, 2, &mut rng);
        let mut names = alloc::vec::Vec::new();
        model.for_each_param("", &mut |n, _| names.push(alloc::string::String::from(n)));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "duplicate parameter names");
    }
}
