//! Training objectives.
//!
//! Prompted masked-language-modeling, the agreement loss (consistency
//! between the previous and current model under a shared random prompt),
//! the disagreement loss (exclusiveness of hidden states under the
//! hypernetwork prompt), buffer replay, and their weighted combination.
//! Metric variants for both regularizers are selectable.
//!
//! Gradients never enter a frozen predecessor: its parameters are plain
//! values, so the tape records the computation through them (letting the
//! disagreement term steer the hypernetwork via the shared prompt) while
//! the parameters themselves stay leafless.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hnet::PromptSource;
use crate::model::{pool_rows, Snapshot, TransformerLM, FIRST_CONTENT_TOKEN, MASK_TOKEN};
use crate::rng::DetRng;
use crate::tensor::{self, Tape, Tensor, IGNORE_INDEX};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgreementMetric {
    /// One minus the mean cosine of paired final hidden states.
    Cosine,
    /// Mean squared error between MLM logits.
    LogitMse,
    /// KL divergence from the previous model's MLM distribution to the
    /// current one; conventional distillation form.
    KdKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisagreementMetric {
    /// `‖X·Yᵀ − I‖_F` over row-normalized hidden states.
    Ortho,
    /// Negated KL between row softmaxes of the hidden states; decreases
    /// as the models diverge.
    NegKl,
    /// Log-probability that both MLM distributions emit the same token.
    SoftmaxVariant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_agree: f64,
    pub lambda_disagree: f64,
    pub lambda_replay: f64,
    pub agreement_metric: AgreementMetric,
    pub disagreement_metric: DisagreementMetric,
    pub mask_ratio: f64,
    /// `false` selects the pure-orthogonality variant `‖X·Yᵀ‖` that drops
    /// the identity target.
    pub ortho_keep_identity: bool,
    /// Conventional knowledge distillation: the agreement term runs on
    /// unprompted models instead of randomly prompted ones.
    pub agreement_unprompted: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_agree: 0.01,
            lambda_disagree: 0.01,
            lambda_replay: 1.0,
            agreement_metric: AgreementMetric::Cosine,
            disagreement_metric: DisagreementMetric::Ortho,
            mask_ratio: 0.15,
            ortho_keep_identity: true,
            agreement_unprompted: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_agree < 0.0 || self.lambda_disagree < 0.0 || self.lambda_replay < 0.0 {
            return Err(Error::InvalidConfig {
                detail: "loss weights must be non-negative".into(),
            });
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::InvalidConfig {
                detail: format!("mask_ratio {} outside (0, 1)", self.mask_ratio),
            });
        }
        Ok(())
    }
}

// ── masking ──────────────────────────────────────────────────────────

/// One corrupted sequence: inputs with mask substitutions and targets
/// carrying the original ids at masked positions, `IGNORE_INDEX` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSeq {
    pub input: Vec<u32>,
    pub targets: Vec<u32>,
}

impl MaskedSeq {
    pub fn masked_count(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE_INDEX).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub seqs: Vec<MaskedSeq>,
}

/// BERT-style corruption: per sequence exactly `max(1, round(ratio·T))`
/// content positions are selected (T counts content tokens; sentinels and
/// padding are never masked), then replaced by the mask token with
/// probability 0.8, a random content token with 0.1, or left unchanged.
pub fn mask_batch(
    sequences: &[Vec<u32>],
    mask_ratio: f64,
    vocab_size: usize,
    rng: &mut DetRng,
) -> Result<MaskedBatch> {
    let mut seqs = Vec::with_capacity(sequences.len());
    for tokens in sequences {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let candidates: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= FIRST_CONTENT_TOKEN)
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            return Err(Error::EmptySequence);
        }
        let count = (libm::round(mask_ratio * candidates.len() as f64) as usize)
            .max(1)
            .min(candidates.len());
        // Partial Fisher-Yates over the candidate list.
        let mut pool = candidates;
        for i in 0..count {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut chosen: Vec<usize> = pool[..count].to_vec();
        chosen.sort_unstable();

        let mut input = tokens.clone();
        let mut targets = alloc::vec![IGNORE_INDEX; tokens.len()];
        for pos in chosen {
            targets[pos] = tokens[pos];
            let u: f64 = rng.gen();
            if u < 0.8 {
                input[pos] = MASK_TOKEN;
            } else if u < 0.9 {
                input[pos] = rng.gen_range(FIRST_CONTENT_TOKEN..vocab_size as u32);
            }
        }
        seqs.push(MaskedSeq { input, targets });
    }
    Ok(MaskedBatch { seqs })
}

// ── loss terms ───────────────────────────────────────────────────────

fn mean_scalars(tape: &mut Tape, parts: &[Tensor]) -> Result<Tensor> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc = tensor::add(tape, &acc, p)?;
    }
    tensor::affine(tape, &acc, 1.0 / parts.len() as f64, 0.0)
}

/// Token (non-prompt, non-pad) rows of an encoded `(L+T)×d` matrix.
fn token_rows(tape: &mut Tape, hidden: &Tensor, prompt_len: usize, tokens: &[u32]) -> Result<Tensor> {
    let rows: Vec<u32> = pool_rows(prompt_len, tokens)?
        .into_iter()
        .map(|r| r as u32)
        .collect();
    tensor::gather_rows(tape, hidden, &rows)
}

/// Prompted MLM: mean negative log-likelihood over masked positions,
/// per sequence, averaged over the batch. With a prompt source the
/// hypernetwork sees the same corrupted input as the model, and gradients
/// reach the model, the hypernetwork, and the component bank.
pub fn mlm_loss(
    tape: &mut Tape,
    model: &TransformerLM,
    prompts: Option<&PromptSource<'_>>,
    batch: &MaskedBatch,
    mut dropout_rng: Option<&mut DetRng>,
) -> Result<Tensor> {
    if batch.seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut per_seq = Vec::with_capacity(batch.seqs.len());
    for seq in &batch.seqs {
        let prompt = match prompts {
            Some(src) => Some(src.prompt_for(tape, &seq.input)?),
            None => None,
        };
        let prompt_len = prompt.as_ref().map_or(0, Tensor::rows);
        let hidden = match &mut dropout_rng {
            Some(rng) => model.encode_train(tape, &seq.input, prompt.as_ref(), rng)?,
            None => model.encode(tape, &seq.input, prompt.as_ref())?,
        };
        let logits = model.mlm_logits(tape, &hidden)?;
        let mut targets = alloc::vec![IGNORE_INDEX; prompt_len];
        targets.extend_from_slice(&seq.targets);
        per_seq.push(tensor::softmax_cross_entropy(tape, &logits, &targets, IGNORE_INDEX)?);
    }
    mean_scalars(tape, &per_seq)
}

/// Replay: the MLM objective on buffered past-domain samples, prompts
/// included, so the hypernetwork keeps serving old domains.
pub fn replay_loss(
    tape: &mut Tape,
    model: &TransformerLM,
    prompts: Option<&PromptSource<'_>>,
    buffer_batch: &MaskedBatch,
    dropout_rng: Option<&mut DetRng>,
) -> Result<Tensor> {
    if buffer_batch.seqs.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    mlm_loss(tape, model, prompts, buffer_batch, dropout_rng)
}

fn check_architecture(prev: &Snapshot, cur: &TransformerLM) -> Result<()> {
    if prev.model().config != cur.config {
        return Err(Error::ArchitectureMismatch {
            detail: "previous snapshot and current model configs differ".into(),
        });
    }
    Ok(())
}

/// Consistency between the frozen predecessor and the current model when
/// both are prompted with the same random prompt (or unprompted in the
/// conventional-KD variant). No gradient reaches the predecessor.
pub fn agreement_loss(
    tape: &mut Tape,
    prev: &Snapshot,
    cur: &TransformerLM,
    batch: &MaskedBatch,
    p_rand: Option<&Tensor>,
    metric: AgreementMetric,
) -> Result<Tensor> {
    check_architecture(prev, cur)?;
    let prompt_len = p_rand.map_or(0, Tensor::rows);
    let mut per_seq = Vec::with_capacity(batch.seqs.len());
    for seq in &batch.seqs {
        // The predecessor runs detached: values only.
        let mut scratch = Tape::disabled();
        let prev_hidden = prev.model().encode(&mut scratch, &seq.input, p_rand)?;
        let cur_hidden = cur.encode(tape, &seq.input, p_rand)?;
        let prev_tok = token_rows(&mut scratch, &prev_hidden, prompt_len, &seq.input)?;
        let cur_tok = token_rows(tape, &cur_hidden, prompt_len, &seq.input)?;
        let value = match metric {
            AgreementMetric::Cosine => {
                let cos = tensor::cosine_rowwise(tape, &prev_tok, &cur_tok)?;
                tensor::mean_all(tape, &cos)?
            }
            AgreementMetric::LogitMse => {
                let prev_logits = prev.model().mlm_logits(&mut scratch, &prev_tok)?;
                let cur_logits = cur.mlm_logits(tape, &cur_tok)?;
                let diff = tensor::sub(tape, &cur_logits, &prev_logits)?;
                let sq = tensor::mul(tape, &diff, &diff)?;
                tensor::mean_all(tape, &sq)?
            }
            AgreementMetric::KdKl => {
                let prev_logits = prev.model().mlm_logits(&mut scratch, &prev_tok)?;
                let p = tensor::softmax_rows(&mut scratch, &prev_logits)?;
                let lp = tensor::log_softmax_rows(&mut scratch, &prev_logits)?;
                let cur_logits = cur.mlm_logits(tape, &cur_tok)?;
                let lq = tensor::log_softmax_rows(tape, &cur_logits)?;
                let diff = tensor::sub(tape, &lp, &lq)?;
                let weighted = tensor::mul(tape, &p, &diff)?;
                let row_kl = tensor::sum_rows(tape, &weighted)?;
                tensor::mean_all(tape, &row_kl)?
            }
        };
        per_seq.push(value);
    }
    let mean = mean_scalars(tape, &per_seq)?;
    match metric {
        AgreementMetric::Cosine => tensor::affine(tape, &mean, -1.0, 1.0),
        _ => Ok(mean),
    }
}

/// `‖X·Yᵀ − I‖_F` (or `‖X·Yᵀ‖_F` without the identity target) over
/// row-normalized inputs; the orthogonality distance behind the default
/// disagreement metric.
pub fn ortho_distance(
    tape: &mut Tape,
    x: &Tensor,
    y: &Tensor,
    keep_identity: bool,
) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "ortho_distance",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let xn = tensor::row_l2_normalize(tape, x)?;
    let yn = tensor::row_l2_normalize(tape, y)?;
    let mut gram = tensor::matmul_nt(tape, &xn, &yn)?;
    if keep_identity {
        let n = gram.rows();
        let mut eye = alloc::vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let eye = Tensor::new(alloc::vec![n, n], eye)?;
        gram = tensor::sub(tape, &gram, &eye)?;
    }
    tensor::frobenius_norm(tape, &gram)
}

/// Exclusiveness of the current hidden states against the predecessor's,
/// both prompted by the hypernetwork prompt of the same sample. Gradients
/// reach the current model and, through the shared prompt, the
/// hypernetwork and bank, but never the predecessor's parameters.
pub fn disagreement_loss(
    tape: &mut Tape,
    prev: &Snapshot,
    cur: &TransformerLM,
    prompts: &PromptSource<'_>,
    batch: &MaskedBatch,
    metric: DisagreementMetric,
    ortho_keep_identity: bool,
) -> Result<Tensor> {
    check_architecture(prev, cur)?;
    let mut per_seq = Vec::with_capacity(batch.seqs.len());
    for seq in &batch.seqs {
        let prompt = prompts.prompt_for(tape, &seq.input)?;
        let prompt_len = prompt.rows();
        // Both forwards run on the live tape: the prompt is tracked, so
        // the graph threads through the frozen predecessor while its
        // parameters stay leafless.
        let prev_hidden = prev.model().encode(tape, &seq.input, Some(&prompt))?;
        let cur_hidden = cur.encode(tape, &seq.input, Some(&prompt))?;
        let prev_tok = token_rows(tape, &prev_hidden, prompt_len, &seq.input)?;
        let cur_tok = token_rows(tape, &cur_hidden, prompt_len, &seq.input)?;
        let value = match metric {
            DisagreementMetric::Ortho => {
                ortho_distance(tape, &prev_tok, &cur_tok, ortho_keep_identity)?
            }
            DisagreementMetric::NegKl => {
                let p = tensor::softmax_rows(tape, &prev_tok)?;
                let lp = tensor::log_softmax_rows(tape, &prev_tok)?;
                let lq = tensor::log_softmax_rows(tape, &cur_tok)?;
                let diff = tensor::sub(tape, &lp, &lq)?;
                let weighted = tensor::mul(tape, &p, &diff)?;
                let row_kl = tensor::sum_rows(tape, &weighted)?;
                let kl = tensor::mean_all(tape, &row_kl)?;
                tensor::affine(tape, &kl, -1.0, 0.0)?
            }
            DisagreementMetric::SoftmaxVariant => {
                let prev_logits = prev.model().mlm_logits(tape, &prev_tok)?;
                let cur_logits = cur.mlm_logits(tape, &cur_tok)?;
                let p1 = tensor::softmax_rows(tape, &prev_logits)?;
                let p2 = tensor::softmax_rows(tape, &cur_logits)?;
                let joint = tensor::mul(tape, &p1, &p2)?;
                let agree_prob = tensor::sum_rows(tape, &joint)?;
                let log_agree = tensor::ln_offset(tape, &agree_prob, 1e-12)?;
                tensor::mean_all(tape, &log_agree)?
            }
        };
        per_seq.push(value);
    }
    mean_scalars(tape, &per_seq)
}

/// The weighted per-term values feeding [`total_loss`]. `None` terms are
/// absent (stage 1, empty buffer, disabled weights) and contribute
/// exactly zero.
pub struct LossTerms {
    pub mlm: Tensor,
    pub agree: Option<Tensor>,
    pub disagree: Option<Tensor>,
    pub replay: Option<Tensor>,
}

/// `ℓ_mlm + λ1·ℓ_a + λ2·ℓ_da + λ_r·ℓ_replay`, exactly linear in each λ.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, cfg: &LossConfig) -> Result<Tensor> {
    let mut total = terms.mlm.clone();
    if let Some(agree) = &terms.agree {
        let scaled = tensor::affine(tape, agree, cfg.lambda_agree, 0.0)?;
        total = tensor::add(tape, &total, &scaled)?;
    }
    if let Some(disagree) = &terms.disagree {
        let scaled = tensor::affine(tape, disagree, cfg.lambda_disagree, 0.0)?;
        total = tensor::add(tape, &total, &scaled)?;
    }
    if let Some(replay) = &terms.replay {
        let scaled = tensor::affine(tape, replay, cfg.lambda_replay, 0.0)?;
        total = tensor::add(tape, &total, &scaled)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hnet::{ContextEncoder, HnetConfig};
    use crate::model::{LMConfig, LiveModel, ParamVisit, TrackedParts};
    use crate::rng::derive_rng;

    fn micro_lm_cfg(vocab: usize) -> LMConfig {
        LMConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 16,
            max_prompt_len: 4,
            ffn_mult: 2,
            ..LMConfig::default()
        }
    }

    fn micro_live(seed: u64, vocab: usize) -> LiveModel {
        let hnet_cfg = HnetConfig {
            components: 2,
            prompt_len: 2,
            depth: 1,
            ..HnetConfig::default()
        };
        let mut rng = derive_rng(seed, "obj-test", &[]);
        LiveModel::init(&micro_lm_cfg(vocab), &hnet_cfg, &mut rng).unwrap()
    }

    fn batch_of(seqs: &[&[u32]], seed: u64, vocab: usize) -> MaskedBatch {
        let mut rng = derive_rng(seed, "mask", &[]);
        let seqs: Vec<Vec<u32>> = seqs.iter().map(|s| s.to_vec()).collect();
        mask_batch(&seqs, 0.15, vocab, &mut rng).unwrap()
    }

    #[test]
    fn mask_counts_follow_the_rounding_rule() {
        let mut rng = derive_rng(1, "mask", &[]);
        let ten: Vec<u32> = (3..13).collect();
        let batch = mask_batch(&[ten], 0.15, 64, &mut rng).unwrap();
        assert_eq!(batch.seqs[0].masked_count(), 2); // round(1.5) = 2

        let one = alloc::vec![5u32];
        let batch = mask_batch(&[one], 0.15, 64, &mut rng).unwrap();
        assert_eq!(batch.seqs[0].masked_count(), 1); // floor guard
    }

    #[test]
    fn mask_corruption_mix_is_80_10_10() {
        let mut rng = derive_rng(2, "mask", &[]);
        let seq: Vec<u32> = (3..43).collect();
        let (mut masked, mut random, mut kept) = (0u32, 0u32, 0u32);
        let mut total = 0u32;
        for _ in 0..1700 {
            let batch = mask_batch(&[seq.clone()], 0.15, 64, &mut rng).unwrap();
            let s = &batch.seqs[0];
            for (pos, &t) in s.targets.iter().enumerate() {
                if t == IGNORE_INDEX {
                    continue;
                }
                total += 1;
                if s.input[pos] == MASK_TOKEN {
                    masked += 1;
                } else if s.input[pos] == t {
                    kept += 1;
                } else {
                    random += 1;
                }
            }
        }
        assert!(total >= 10_000, "need at least 1e4 draws, got {total}");
        let frac = |x: u32| x as f64 / total as f64;
        assert!((frac(masked) - 0.8).abs() < 0.02, "mask frac {}", frac(masked));
        assert!((frac(random) - 0.1).abs() < 0.02, "random frac {}", frac(random));
        assert!((frac(kept) - 0.1).abs() < 0.02, "kept frac {}", frac(kept));
    }

    #[test]
    fn masking_is_deterministic_and_never_touches_sentinels() {
        let seqs: Vec<Vec<u32>> = alloc::vec![alloc::vec![0, 3, 4, 5, 0], alloc::vec![6, 7, 8]];
        let b1 = mask_batch(&seqs, 0.5, 32, &mut derive_rng(3, "m", &[])).unwrap();
        let b2 = mask_batch(&seqs, 0.5, 32, &mut derive_rng(3, "m", &[])).unwrap();
        assert_eq!(b1, b2);
        // pad positions keep IGNORE targets and original input
        assert_eq!(b1.seqs[0].targets[0], IGNORE_INDEX);
        assert_eq!(b1.seqs[0].targets[4], IGNORE_INDEX);
        assert_eq!(b1.seqs[0].input[0], 0);
    }

    #[test]
    fn untrained_mlm_loss_is_near_log_vocab() {
        let live = micro_live(4, 64);
        let batch = batch_of(&[&[3, 9, 14, 21, 33, 40], &[5, 8, 12, 55, 60]], 5, 64);
        let mut tape = Tape::disabled();
        let loss = mlm_loss(&mut tape, &live.model, None, &batch, None).unwrap();
        let v = loss.item().unwrap();
        assert!((v - libm::log(64.0)).abs() < 0.3, "loss {v} vs ln 64 = {}", libm::log(64.0));
    }

    #[test]
    fn mlm_gradient_reaches_prompt_components() {
        let live = micro_live(6, 64);
        let encoder = ContextEncoder::new(&live.model);
        let batch = batch_of(&[&[3, 9, 14, 21]], 7, 64);
        let mut tape = Tape::new();
        let tracked = live.tracked(&mut tape, TrackedParts { lm: true, prompts: true });
        let prompts = PromptSource {
            encoder: &encoder,
            hnet: &tracked.hnet,
            bank: &tracked.bank,
        };
        let loss = mlm_loss(&mut tape, &tracked.model, Some(&prompts), &batch, None).unwrap();
        tape.backward(&loss).unwrap();
        let bank_grad = tape.grad(&tracked.bank.components).expect("bank gradient");
        assert!(bank_grad.iter().any(|g| g.abs() > 0.0), "gradient w.r.t. V is zero");
        let hnet_grad_nonzero = {
            let mut any = false;
            tracked.hnet.for_each_param("", &mut |_, t| {
                if let Some(g) = tape.grad(t) {
                    any |= g.iter().any(|v| v.abs() > 0.0);
                }
            });
            any
        };
        assert!(hnet_grad_nonzero, "gradient w.r.t. hypernetwork is zero");
    }

    #[test]
    fn agreement_of_a_model_with_itself_is_zero() {
        let live = micro_live(8, 32);
        let snap = live.freeze();
        let batch = batch_of(&[&[3, 9, 14], &[5, 8, 12, 17]], 9, 32);
        let mut prng = derive_rng(10, "prand", &[]);
        let p_rand = crate::hnet::sample_random_prompt(2, 16, &mut prng);
        for metric in [AgreementMetric::Cosine, AgreementMetric::KdKl, AgreementMetric::LogitMse] {
            let mut tape = Tape::new();
            let tracked = live.tracked(&mut tape, TrackedParts { lm: true, prompts: false });
            let loss = agreement_loss(&mut tape, &snap, &tracked.model, &batch, Some(&p_rand), metric)
                .unwrap();
            assert!(
                loss.item().unwrap().abs() < 1e-10,
                "{metric:?} self-agreement {}",
                loss.item().unwrap()
            );
        }
    }

    #[test]
    fn agreement_detects_a_sign_flipped_layer() {
        let live = micro_live(11, 32);
        let snap = live.freeze();
        let mut bent = live.clone();
        let flipped: Vec<f64> = bent.model.layers[0]
            .wo
            .weight
            .data()
            .iter()
            .map(|v| -v)
            .collect();
        bent.model.layers[0].wo.weight.set_data(flipped).unwrap();
        let batch = batch_of(&[&[3, 9, 14, 20]], 12, 32);
        let mut prng = derive_rng(13, "prand", &[]);
        let p_rand = crate::hnet::sample_random_prompt(2, 16, &mut prng);
        let mut tape = Tape::new();
        let tracked = bent.tracked(&mut tape, TrackedParts { lm: true, prompts: false });
        let loss = agreement_loss(
            &mut tape,
            &snap,
            &tracked.model,
            &batch,
            Some(&p_rand),
            AgreementMetric::Cosine,
        )
        .unwrap();
        assert!(loss.item().unwrap() > 1e-9, "flip undetected: {}", loss.item().unwrap());
    }

    #[test]
    fn ortho_distance_hand_cases() {
        let mut tape = Tape::disabled();
        // X = Y with orthonormal rows → XYᵀ = I → 0.
        let x = Tensor::new(alloc::vec![2, 2], alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = ortho_distance(&mut tape, &x, &x, true).unwrap();
        assert!(d.item().unwrap().abs() < 1e-12);

        // X = (e1, e2), Y = (e2, e1) → ‖[[0,1],[1,0]] − I‖_F = 2.
        let y = Tensor::new(alloc::vec![2, 2], alloc::vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let d = ortho_distance(&mut tape, &x, &y, true).unwrap();
        assert!((d.item().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ortho_distance_ignores_positive_row_rescaling() {
        let mut rng = derive_rng(14, "ortho", &[]);
        let x = Tensor::randn(alloc::vec![3, 8], 1.0, &mut rng).unwrap();
        let y = Tensor::randn(alloc::vec![3, 8], 1.0, &mut rng).unwrap();
        let mut tape = Tape::disabled();
        let base = ortho_distance(&mut tape, &x, &y, true).unwrap().item().unwrap();
        let scaled_x = Tensor::new(
            alloc::vec![3, 8],
            x.data().iter().map(|v| v * 7.5).collect(),
        )
        .unwrap();
        let scaled_y = Tensor::new(
            alloc::vec![3, 8],
            y.data().iter().map(|v| v * 0.03).collect(),
        )
        .unwrap();
        let scaled = ortho_distance(&mut tape, &scaled_x, &scaled_y, true)
            .unwrap()
            .item()
            .unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn neg_kl_disagreement_is_zero_for_identical_models() {
        let live = micro_live(15, 32);
        let snap = live.freeze();
        let encoder = ContextEncoder::new(&live.model);
        let batch = batch_of(&[&[3, 9, 14]], 16, 32);
        let mut tape = Tape::new();
        let tracked = live.tracked(&mut tape, TrackedParts { lm: true, prompts: true });
        let prompts = PromptSource {
            encoder: &encoder,
            hnet: &tracked.hnet,
            bank: &tracked.bank,
        };
        let loss = disagreement_loss(
            &mut tape,
            &snap,
            &tracked.model,
            &prompts,
            &batch,
            DisagreementMetric::NegKl,
            true,
        )
        .unwrap();
        assert!(loss.item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn replay_equals_mlm_on_the_same_batch() {
        let live = micro_live(17, 64);
        let batch = batch_of(&[&[3, 9, 14, 21], &[5, 8, 12]], 18, 64);
        let mut tape = Tape::disabled();
        let a = mlm_loss(&mut tape, &live.model, None, &batch, None).unwrap();
        let b = replay_loss(&mut tape, &live.model, None, &batch, None).unwrap();
        assert_eq!(a.item().unwrap().to_bits(), b.item().unwrap().to_bits());

        let empty = MaskedBatch { seqs: alloc::vec![] };
        assert!(matches!(
            replay_loss(&mut tape, &live.model, None, &empty, None),
            Err(Error::EmptyBuffer)
        ));
    }

    #[test]
    fn total_loss_hand_arithmetic_and_degeneration() {
        let mut tape = Tape::disabled();
        let terms = LossTerms {
            mlm: Tensor::scalar(2.0),
            agree: Some(Tensor::scalar(0.5)),
            disagree: Some(Tensor::scalar(0.3)),
            replay: Some(Tensor::scalar(1.0)),
        };
        let cfg = LossConfig::default(); // λ1 = λ2 = 0.01, λ_r = 1
        let total = total_loss(&mut tape, &terms, &cfg).unwrap();
        assert!((total.item().unwrap() - 3.008).abs() < 1e-12);

        let zeroed = LossConfig {
            lambda_agree: 0.0,
            lambda_disagree: 0.0,
            lambda_replay: 0.0,
            ..LossConfig::default()
        };
        let only_mlm = total_loss(&mut tape, &terms, &zeroed).unwrap();
        assert_eq!(only_mlm.item().unwrap(), 2.0);

        // Stage-1 shape: absent terms contribute exactly zero.
        let stage1 = LossTerms {
            mlm: Tensor::scalar(2.0),
            agree: None,
            disagree: None,
            replay: None,
        };
        let total = total_loss(&mut tape, &stage1, &cfg).unwrap();
        assert_eq!(total.item().unwrap(), 2.0);
    }

    #[test]
    fn total_loss_is_linear_in_each_lambda() {
        let mut tape = Tape::disabled();
        let terms = LossTerms {
            mlm: Tensor::scalar(1.7),
            agree: Some(Tensor::scalar(0.9)),
            disagree: Some(Tensor::scalar(0.4)),
            replay: Some(Tensor::scalar(0.2)),
        };
        let at = |l1: f64, l2: f64, lr: f64, tape: &mut Tape| {
            let cfg = LossConfig {
                lambda_agree: l1,
                lambda_disagree: l2,
                lambda_replay: lr,
                ..LossConfig::default()
            };
            total_loss(tape, &terms, &cfg).unwrap().item().unwrap()
        };
        let base = at(0.0, 0.3, 0.7, &mut tape);
        let bumped = at(2.0, 0.3, 0.7, &mut tape);
        let mid = at(1.0, 0.3, 0.7, &mut tape);
        assert!(((bumped - base) / 2.0 - (mid - base)).abs() < 1e-12);
    }
}
