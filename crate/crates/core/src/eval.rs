//! Anytime fine-tuning: fine-tune every stage snapshot on every domain
//! task, assemble the accuracy table `a^i_j`, and reduce it to the three
//! stream metrics (adaptation, out-of-domain, final).
//!
//! Fine-tuning always operates on a copy; snapshots stay immutable. Each
//! table cell derives its own rng from `(seed, row, column)`, so cells
//! can be evaluated in any order, or concurrently, with identical results.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::hnet::{ContextEncoder, PromptSource};
use crate::model::{LiveModel, ParamVisit, Snapshot, TrackedParts};
use crate::optim::{clip_global_norm, Adam};
use crate::rng::derive_rng;
use crate::tensor::{self, Tape, IGNORE_INDEX};

/// One labeled classification task: disjoint train/validation/test splits
/// with labels in `[0, classes)`. Validation is 30% of the original test
/// pool.
#[derive(Debug, Clone)]
pub struct DownstreamTask {
    pub task_id: u32,
    pub classes: usize,
    pub train: Vec<(Vec<u32>, u32)>,
    pub val: Vec<(Vec<u32>, u32)>,
    pub test: Vec<(Vec<u32>, u32)>,
}

impl DownstreamTask {
    pub fn validate(&self) -> Result<()> {
        for (split, name) in [
            (&self.train, "train"),
            (&self.val, "val"),
            (&self.test, "test"),
        ] {
            if split.is_empty() {
                return Err(Error::EmptySplit {
                    split: match name {
                        "train" => "train",
                        "val" => "val",
                        _ => "test",
                    },
                });
            }
            for (tokens, label) in split.iter() {
                if tokens.is_empty() {
                    return Err(Error::EmptySequence);
                }
                if *label as usize >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label: *label,
                        classes: self.classes,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Early stopping: give up after this many epochs without a new best
    /// validation accuracy, restoring the best parameters before testing.
    pub patience: usize,
    pub grad_clip: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 15,
            batch_size: 16,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            patience: 3,
            grad_clip: 1.0,
        }
    }
}

fn predict(
    live: &LiveModel,
    encoder: &ContextEncoder,
    tokens: &[u32],
    task_id: u32,
    use_prompts: bool,
) -> Result<usize> {
    let mut tape = Tape::disabled();
    let prompt = if use_prompts {
        let src = PromptSource {
            encoder,
            hnet: &live.hnet,
            bank: &live.bank,
        };
        Some(src.prompt_for(&mut tape, tokens)?)
    } else {
        None
    };
    let prompt_len = prompt.as_ref().map_or(0, |p| p.rows());
    let hidden = live.model.encode(&mut tape, tokens, prompt.as_ref())?;
    let logits = live
        .model
        .class_logits(&mut tape, &hidden, task_id, prompt_len, tokens)?;
    let data = logits.data();
    let mut best = 0;
    for (i, v) in data.iter().enumerate() {
        if *v > data[best] {
            best = i;
        }
    }
    Ok(best)
}

fn split_accuracy(
    live: &LiveModel,
    encoder: &ContextEncoder,
    split: &[(Vec<u32>, u32)],
    task_id: u32,
    use_prompts: bool,
) -> Result<f64> {
    let mut correct = 0usize;
    for (tokens, label) in split {
        if predict(live, encoder, tokens, task_id, use_prompts)? == *label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Fine-tune a copy of the snapshot on one task and return test accuracy.
///
/// A fresh task head is installed; the language model, hypernetwork, and
/// component bank all train (the prompt pipeline is bypassed entirely for
/// methods that pre-trained without it). No domain identity is supplied:
/// when prompts are on, the hypernetwork routes each sample by content.
pub fn finetune(
    snapshot: &Snapshot,
    encoder: &ContextEncoder,
    task: &DownstreamTask,
    cfg: &FinetuneConfig,
    seed: u64,
    use_prompts: bool,
) -> Result<f64> {
    task.validate()?;
    let mut rng = derive_rng(seed, "finetune", &[task.task_id as u64]);
    let mut live = snapshot.to_live();
    live.model.add_class_head(task.task_id, task.classes, &mut rng);
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let parts = TrackedParts {
        lm: true,
        prompts: use_prompts,
    };
    let use_dropout = live.model.config.dropout > 0.0;

    let mut best_acc = -1.0f64;
    let mut best_params: Option<LiveModel> = None;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..task.train.len()).collect();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let tracked = live.tracked(&mut tape, parts);
            let mut per_sample = Vec::with_capacity(chunk.len());
            for &ix in chunk {
                let (tokens, label) = &task.train[ix];
                let prompt = if use_prompts {
                    let src = PromptSource {
                        encoder,
                        hnet: &tracked.hnet,
                        bank: &tracked.bank,
                    };
                    Some(src.prompt_for(&mut tape, tokens)?)
                } else {
                    None
                };
                let prompt_len = prompt.as_ref().map_or(0, |p| p.rows());
                let hidden = if use_dropout {
                    tracked.model.encode_train(&mut tape, tokens, prompt.as_ref(), &mut rng)?
                } else {
                    tracked.model.encode(&mut tape, tokens, prompt.as_ref())?
                };
                let logits = tracked.model.class_logits(
                    &mut tape,
                    &hidden,
                    task.task_id,
                    prompt_len,
                    tokens,
                )?;
                per_sample.push(tensor::softmax_cross_entropy(
                    &mut tape,
                    &logits,
                    &[*label],
                    IGNORE_INDEX,
                )?);
            }
            let mut loss = per_sample[0].clone();
            for p in &per_sample[1..] {
                loss = tensor::add(&mut tape, &loss, p)?;
            }
            let loss = tensor::affine(&mut tape, &loss, 1.0 / per_sample.len() as f64, 0.0)?;
            if !loss.item()?.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("fine-tuning task {}", task.task_id),
                });
            }
            tape.backward(&loss)?;
            let mut grads = alloc::collections::BTreeMap::new();
            let mut take = |name: &str, t: &tensor::Tensor| {
                if let Some(g) = tape.grad(t) {
                    grads.insert(String::from(name), g.to_vec());
                }
            };
            tracked.model.for_each_param("model.", &mut take);
            if use_prompts {
                tracked.bank.for_each_param("bank.", &mut take);
                tracked.hnet.for_each_param("hnet.", &mut take);
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            adam.begin_step();
            live.for_each_param_mut("", &mut |name, t| {
                if let Some(g) = grads.get(name) {
                    adam.update(name, t, g);
                }
            });
        }

        let val_acc = split_accuracy(&live, encoder, &task.val, task.task_id, use_prompts)?;
        if val_acc > best_acc {
            best_acc = val_acc;
            best_params = Some(live.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let best = best_params.unwrap_or(live);
    split_accuracy(&best, encoder, &task.test, task.task_id, use_prompts)
}

// ── accuracy table and metrics ───────────────────────────────────────

/// The `a^i_j` matrix: row `i` is snapshot `B^i` (row 0 = the initial
/// model), column `j` is task `j+1`. Cells hold accuracies rounded to six
/// decimals (the emission precision); unevaluated cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    n_rows: usize,
    n_tasks: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyTable {
    pub fn new(n_rows: usize, n_tasks: usize) -> Self {
        AccuracyTable {
            n_rows,
            n_tasks,
            cells: alloc::vec![None; n_rows * n_tasks],
        }
    }

    /// Number of snapshot rows, `T_domains + 1`.
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// Number of stages `T` (rows minus the initial row).
    pub fn n_stages(&self) -> usize {
        self.n_rows - 1
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.n_tasks + col]
    }

    /// Record a cell, rounding to six decimals so emitted tables and
    /// in-memory metrics agree exactly.
    pub fn set(&mut self, row: usize, col: usize, accuracy: f64) {
        debug_assert!((0.0..=1.0).contains(&accuracy));
        self.cells[row * self.n_tasks + col] =
            Some(libm::round(accuracy * 1e6) / 1e6);
    }

    fn require(&self, row: usize, col: usize) -> Result<f64> {
        self.get(row, col).ok_or(Error::MissingCell { row, col })
    }
}

/// Adaptation accuracy: mean of the diagonal `a^i_i`.
pub fn a_acc(table: &AccuracyTable) -> Result<f64> {
    let t = table.n_stages();
    if t == 0 || table.n_tasks() < t {
        return Err(Error::UndefinedMetric {
            metric: "a_acc",
            detail: format!("table has {t} stages and {} tasks", table.n_tasks()),
        });
    }
    let mut sum = 0.0;
    for i in 1..=t {
        sum += table.require(i, i - 1)?;
    }
    Ok(sum / t as f64)
}

/// Out-of-domain accuracy: mean over the strict upper triangle (snapshot
/// `i`, task `j` with `j > i`). Undefined for single-stage tables.
pub fn o_acc(table: &AccuracyTable) -> Result<f64> {
    let t = table.n_stages();
    if t < 2 {
        return Err(Error::UndefinedMetric {
            metric: "o_acc",
            detail: format!("needs at least 2 stages, table has {t}"),
        });
    }
    if table.n_tasks() < t {
        return Err(Error::UndefinedMetric {
            metric: "o_acc",
            detail: format!("table has {t} stages but only {} tasks", table.n_tasks()),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 1..=t {
        for j in (i + 1)..=t {
            sum += table.require(i, j - 1)?;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Final accuracy: mean of the last snapshot's row.
pub fn f_acc(table: &AccuracyTable) -> Result<f64> {
    let t = table.n_stages();
    if t == 0 {
        return Err(Error::UndefinedMetric {
            metric: "f_acc",
            detail: "table has no stage rows".into(),
        });
    }
    let mut sum = 0.0;
    for j in 0..table.n_tasks() {
        sum += table.require(t, j)?;
    }
    Ok(sum / table.n_tasks() as f64)
}

/// A cell that could not be evaluated, with the reason.
#[derive(Debug, Clone)]
pub struct CellFailure {
    pub row: usize,
    pub col: usize,
    pub reason: String,
}

/// Evaluate a single `(snapshot, task)` cell with its derived seed.
pub fn evaluate_cell(
    snapshots: &[Snapshot],
    encoder: &ContextEncoder,
    tasks: &[DownstreamTask],
    cfg: &FinetuneConfig,
    seed: u64,
    use_prompts: bool,
    row: usize,
    col: usize,
) -> Result<f64> {
    let cell_seed = derive_rng(seed, "cell", &[row as u64, col as u64]).gen::<u64>();
    finetune(
        &snapshots[row],
        encoder,
        &tasks[col],
        cfg,
        cell_seed,
        use_prompts,
    )
}

/// Fine-tune every snapshot on every task, sequentially. Failed cells are
/// recorded as gaps; they never abort the table.
pub fn build_accuracy_table(
    snapshots: &[Snapshot],
    encoder: &ContextEncoder,
    tasks: &[DownstreamTask],
    cfg: &FinetuneConfig,
    seed: u64,
    use_prompts: bool,
) -> (AccuracyTable, Vec<CellFailure>) {
    let mut table = AccuracyTable::new(snapshots.len(), tasks.len());
    let mut failures = Vec::new();
    for row in 0..snapshots.len() {
        for col in 0..tasks.len() {
            match evaluate_cell(snapshots, encoder, tasks, cfg, seed, use_prompts, row, col) {
                Ok(acc) => table.set(row, col, acc),
                Err(e) => failures.push(CellFailure {
                    row,
                    col,
                    reason: format!("{e}"),
                }),
            }
        }
    }
    (table, failures)
}
