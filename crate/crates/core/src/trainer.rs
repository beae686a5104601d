//! Sequential pre-training over a domain stream.
//!
//! Each stage freezes the predecessor, optimizes the total objective with
//! Adam, feeds the reservoir replay buffer, and appends an immutable
//! snapshot. Per-stage randomness derives from `(seed, stage)`, so a
//! checkpoint at a stage boundary captures the entire stream state and a
//! resumed run is bit-identical to an uninterrupted one.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hnet::{sample_random_prompt, ContextEncoder, HnetConfig, PromptSource};
use crate::model::{LMConfig, LiveModel, ParamVisit, Snapshot, TrackedParts};
use crate::objectives::{
    agreement_loss, disagreement_loss, mask_batch, mlm_loss, replay_loss, total_loss, LossConfig,
    LossTerms, MaskedBatch,
};
use crate::optim::{clip_global_norm, Adam};
use crate::rng::{derive_rng, DetRng};

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub grad_clip: f64,
    /// Re-initialize Adam at every stage boundary (default) or carry
    /// moments across the stream.
    pub fresh_optimizer: bool,
    pub buffer_capacity: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            steps: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 1,
            grad_clip: 1.0,
            fresh_optimizer: true,
            buffer_capacity: 300,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig {
                detail: "steps must be at least 1".into(),
            });
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig {
                detail: "learning_rate must be positive".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig {
                detail: "batch_size must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// How a pre-training method uses the machinery; every baseline is a
/// configuration of the same stage loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PretrainMethod {
    /// Serve hypernetwork prompts during pre-training (and track Θ, V).
    pub prompts_enabled: bool,
    /// Track the language-model parameters (off for prompt-only tuning).
    pub train_lm: bool,
    /// Restart from `B^0` at every stage (separate pre-training).
    pub reset_each_stage: bool,
}

impl PretrainMethod {
    pub fn hprompt() -> Self {
        PretrainMethod { prompts_enabled: true, train_lm: true, reset_each_stage: false }
    }
    pub fn ncl() -> Self {
        PretrainMethod { prompts_enabled: false, train_lm: true, reset_each_stage: false }
    }
    pub fn prompt_only() -> Self {
        PretrainMethod { prompts_enabled: true, train_lm: false, reset_each_stage: false }
    }
    pub fn separate() -> Self {
        PretrainMethod { prompts_enabled: false, train_lm: true, reset_each_stage: true }
    }
}

/// One buffered past-domain sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferedSample {
    pub tokens: Vec<u32>,
    pub domain_id: u32,
}

/// Capacity-bounded reservoir over every sample seen so far: after `n`
/// insertions each is retained with probability `capacity / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub items: Vec<BufferedSample>,
    pub seen: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, items: Vec::new(), seen: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Reservoir insertion: the first `capacity` items are stored; item
    /// `n` then replaces a uniformly random slot with probability
    /// `capacity / n`.
    pub fn insert(&mut self, sample: BufferedSample, rng: &mut DetRng) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(sample);
            return;
        }
        if self.capacity == 0 {
            return;
        }
        let j = rng.gen_range(0..self.seen);
        if (j as usize) < self.capacity {
            self.items[j as usize] = sample;
        }
    }

    /// Uniform batch with replacement.
    pub fn sample_batch(&self, n: usize, rng: &mut DetRng) -> Result<Vec<&BufferedSample>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..n)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect())
    }
}

/// Per-step loss record; the caller attaches wall-clock time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub stage: usize,
    pub step: usize,
    pub mlm: f64,
    pub agree: f64,
    pub disagree: f64,
    pub replay: f64,
    pub total: f64,
}

/// The whole experiment: ordered snapshots `B^0..B^i`, the live ensemble,
/// the frozen context encoder, the replay buffer, and the stage cursor.
pub struct ExperimentState {
    pub seed: u64,
    pub snapshots: Vec<Snapshot>,
    pub live: LiveModel,
    pub encoder: ContextEncoder,
    pub buffer: ReplayBuffer,
    pub stage: usize,
    pub optimizer: Option<Adam>,
}

impl ExperimentState {
    /// Initialize `B^0` (model, bank, hypernetwork from one derived rng
    /// stream), freeze it as snapshot 0, and fix the context encoder.
    pub fn new(
        lm_cfg: &LMConfig,
        hnet_cfg: &HnetConfig,
        seed: u64,
        buffer_capacity: usize,
    ) -> Result<Self> {
        let mut rng = derive_rng(seed, "init", &[]);
        let live = LiveModel::init(lm_cfg, hnet_cfg, &mut rng)?;
        let encoder = ContextEncoder::new(&live.model);
        let snapshots = alloc::vec![live.freeze()];
        Ok(ExperimentState {
            seed,
            snapshots,
            live,
            encoder,
            buffer: ReplayBuffer::new(buffer_capacity),
            stage: 0,
            optimizer: None,
        })
    }

    pub fn initial(&self) -> &Snapshot {
        &self.snapshots[0]
    }

    /// Append a copy of `B^0` as the next stage snapshot (the
    /// no-pre-training baseline).
    pub fn append_initial_snapshot(&mut self) {
        self.snapshots.push(self.snapshots[0].clone());
        self.stage += 1;
    }
}

fn collect_grads(
    tape: &crate::tensor::Tape,
    tracked: &LiveModel,
    parts: TrackedParts,
) -> BTreeMap<String, Vec<f64>> {
    let mut grads = BTreeMap::new();
    let mut take = |name: &str, t: &crate::tensor::Tensor| {
        if let Some(g) = tape.grad(t) {
            grads.insert(String::from(name), g.to_vec());
        }
    };
    if parts.lm {
        tracked.model.for_each_param("model.", &mut take);
    }
    if parts.prompts {
        tracked.bank.for_each_param("bank.", &mut take);
        tracked.hnet.for_each_param("hnet.", &mut take);
    }
    grads
}

fn apply_grads(live: &mut LiveModel, adam: &mut Adam, grads: &BTreeMap<String, Vec<f64>>) {
    adam.begin_step();
    live.for_each_param_mut("", &mut |name, t| {
        if let Some(g) = grads.get(name) {
            adam.update(name, t, g);
        }
    });
}

/// Pre-train one stage on a domain corpus, producing snapshot `B^i`.
///
/// The agreement and disagreement terms engage from stage 2 (no
/// domain-trained predecessor exists earlier); the replay term engages
/// once the buffer holds anything and its weight is positive. At the end
/// the corpus is fed to the reservoir and the live ensemble is frozen.
/// Fully deterministic given the seed in `stage_cfg`.
pub fn pretrain_stage(
    state: &mut ExperimentState,
    domain_id: u32,
    corpus: &[Vec<u32>],
    stage_cfg: &StageConfig,
    loss_cfg: &LossConfig,
    method: PretrainMethod,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<()> {
    stage_cfg.validate()?;
    loss_cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let stage = state.stage + 1;
    if method.reset_each_stage {
        state.live = state.snapshots[0].to_live();
    }
    let mut rng = derive_rng(stage_cfg.seed, "stage", &[stage as u64]);
    let mut dropout_rng = derive_rng(stage_cfg.seed, "dropout", &[stage as u64]);
    let mut adam = match (&state.optimizer, stage_cfg.fresh_optimizer) {
        (Some(prev), false) => prev.clone(),
        _ => Adam::new(stage_cfg.learning_rate, stage_cfg.weight_decay),
    };

    let predecessor = if stage >= 2 && !method.reset_each_stage {
        Some(state.snapshots[state.snapshots.len() - 1].clone())
    } else {
        None
    };
    let vocab = state.live.model.config.vocab_size;
    let prompt_len = state.live.bank.prompt_len;
    let d_model = state.live.model.config.d_model;
    let parts = TrackedParts { lm: method.train_lm, prompts: method.prompts_enabled };
    let use_dropout = state.live.model.config.dropout > 0.0;

    for step in 0..stage_cfg.steps {
        // Fixed draw order per step: batch, masks, random prompt, replay.
        let batch_tokens: Vec<Vec<u32>> = (0..stage_cfg.batch_size)
            .map(|_| corpus[rng.gen_range(0..corpus.len())].clone())
            .collect();
        let batch = mask_batch(&batch_tokens, loss_cfg.mask_ratio, vocab, &mut rng)?;

        let p_rand = match (&predecessor, loss_cfg.lambda_agree > 0.0, loss_cfg.agreement_unprompted)
        {
            (Some(_), true, false) => Some(sample_random_prompt(prompt_len, d_model, &mut rng)),
            _ => None,
        };
        let replay_batch: Option<MaskedBatch> =
            if loss_cfg.lambda_replay > 0.0 && !state.buffer.is_empty() {
                let samples: Vec<Vec<u32>> = state
                    .buffer
                    .sample_batch(stage_cfg.batch_size, &mut rng)?
                    .into_iter()
                    .map(|s| s.tokens.clone())
                    .collect();
                Some(mask_batch(&samples, loss_cfg.mask_ratio, vocab, &mut rng)?)
            } else {
                None
            };

        let mut tape = crate::tensor::Tape::new();
        let tracked = state.live.tracked(&mut tape, parts);
        let prompts = if method.prompts_enabled {
            Some(PromptSource {
                encoder: &state.encoder,
                hnet: &tracked.hnet,
                bank: &tracked.bank,
            })
        } else {
            None
        };

        let mlm = mlm_loss(
            &mut tape,
            &tracked.model,
            prompts.as_ref(),
            &batch,
            use_dropout.then_some(&mut dropout_rng),
        )?;
        let agree = match &predecessor {
            Some(prev) if loss_cfg.lambda_agree > 0.0 => Some(agreement_loss(
                &mut tape,
                prev,
                &tracked.model,
                &batch,
                p_rand.as_ref(),
                loss_cfg.agreement_metric,
            )?),
            _ => None,
        };
        let disagree = match (&predecessor, prompts.as_ref()) {
            (Some(prev), Some(src)) if loss_cfg.lambda_disagree > 0.0 => Some(disagreement_loss(
                &mut tape,
                prev,
                &tracked.model,
                src,
                &batch,
                loss_cfg.disagreement_metric,
                loss_cfg.ortho_keep_identity,
            )?),
            _ => None,
        };
        let replay = match &replay_batch {
            Some(rb) => Some(replay_loss(
                &mut tape,
                &tracked.model,
                prompts.as_ref(),
                rb,
                use_dropout.then_some(&mut dropout_rng),
            )?),
            None => None,
        };

        let terms = LossTerms {
            mlm,
            agree,
            disagree,
            replay,
        };
        let total = total_loss(&mut tape, &terms, loss_cfg)?;
        let log = StepLog {
            stage,
            step,
            mlm: terms.mlm.item()?,
            agree: terms.agree.as_ref().map_or(0.0, |t| t.item().unwrap_or(f64::NAN)),
            disagree: terms.disagree.as_ref().map_or(0.0, |t| t.item().unwrap_or(f64::NAN)),
            replay: terms.replay.as_ref().map_or(0.0, |t| t.item().unwrap_or(f64::NAN)),
            total: total.item()?,
        };
        if !log.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage,
                step,
                mlm: log.mlm,
                agree: log.agree,
                disagree: log.disagree,
                replay: log.replay,
            });
        }

        tape.backward(&total)?;
        let mut grads = collect_grads(&tape, &tracked, parts);
        clip_global_norm(&mut grads, stage_cfg.grad_clip);
        apply_grads(&mut state.live, &mut adam, &grads);
        on_step(&log);
    }

    for sample in corpus {
        state.buffer.insert(
            BufferedSample { tokens: sample.clone(), domain_id },
            &mut rng,
        );
    }
    state.optimizer = Some(adam);
    state.snapshots.push(state.live.freeze());
    state.stage = stage;
    Ok(())
}
