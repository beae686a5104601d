//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Tensors are immutable row-major `f64` buffers behind an [`Arc`]; cloning
//! is cheap and detached tensors may cross threads freely. Differentiation
//! is tape-based: a [`Tape`] records one node per operation output, each
//! node holding the handles of its parents and a local-gradient closure.
//! Nodes are appended in execution order, so every node's parents precede
//! it and a single reverse sweep propagates gradients with each node
//! visited exactly once.
//!
//! A tape and the tensors tracked on it are confined to one thread; there
//! is no shared-mutable state anywhere in the engine.

mod grad_check;
mod ops;

pub use grad_check::grad_check;
pub use ops::*;

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, DetRng};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle of a recorded node: the owning tape's id plus the node index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    tape: u64,
    index: usize,
}

/// Dense n-dimensional value. Row-major, 64-bit floats throughout.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Build a tensor from an explicit shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                detail: alloc::format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                detail: alloc::format!(
                    "shape {shape:?} wants {numel} elements, data holds {}",
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    /// Entries i.i.d. normal(0, std).
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut DetRng) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, normal_vec(numel, std, rng))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows / columns of a 2-d tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::NotScalar {
                op: "item",
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Copy of this tensor with no tape participation. Shares the data.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Replace the value buffer. Existing clones keep the old buffer, so
    /// frozen copies are unaffected by later updates.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::InvalidShape {
                op: "set_data",
                detail: alloc::format!(
                    "expected {} elements for shape {:?}, got {}",
                    self.numel(),
                    self.shape,
                    data.len()
                ),
            });
        }
        self.data = Arc::new(data);
        Ok(())
    }

    fn node_on(&self, tape_id: u64) -> Option<usize> {
        match self.node {
            Some(NodeRef { tape, index }) if tape == tape_id => Some(index),
            _ => None,
        }
    }

    fn arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }
}

type BackFn = Box<dyn FnOnce(&[f64], &mut GradSink<'_>)>;

struct Node {
    back: Option<BackFn>,
}

/// Gradient accumulator handed to local-gradient closures during the
/// reverse sweep.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    numels: &'a [usize],
}

impl<'a> GradSink<'a> {
    /// Add a contribution to the gradient of node `index`.
    pub fn accumulate(&mut self, index: usize, contrib: &[f64]) {
        debug_assert_eq!(
            contrib.len(),
            self.numels[index],
            "gradient contribution has wrong length"
        );
        match &mut self.grads[index] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }
}

/// Reverse-mode tape. Create one per differentiated computation, mark the
/// tensors that need gradients with [`Tape::leaf`], build the loss with the
/// ops in this module, then call [`Tape::backward`] once.
pub struct Tape {
    id: u64,
    recording: bool,
    nodes: Vec<Node>,
    numels: Vec<usize>,
    grads: Vec<Option<Vec<f64>>>,
    swept: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
            numels: Vec::new(),
            grads: Vec::new(),
            swept: false,
        }
    }

    /// A tape that records nothing. Ops still compute values; tensors
    /// produced under a disabled tape never acquire a gradient.
    pub fn disabled() -> Self {
        let mut t = Tape::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Track a tensor as a differentiable leaf. On a disabled tape this is
    /// a plain detach.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detached();
        }
        let index = self.push(t.numel(), None);
        Tensor {
            shape: t.shape.clone(),
            data: t.arc(),
            node: Some(NodeRef { tape: self.id, index }),
        }
    }

    fn push(&mut self, numel: usize, back: Option<BackFn>) -> usize {
        self.nodes.push(Node { back });
        self.numels.push(numel);
        self.nodes.len() - 1
    }

    /// Run the reverse sweep from a scalar loss. Each recorded node is
    /// visited exactly once; a second call on the same tape is an error.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if self.swept {
            return Err(Error::BackwardConsumed);
        }
        let start = loss.node_on(self.id).ok_or(Error::NotTracked { op: "backward" })?;
        if loss.numel() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: loss.shape.clone(),
            });
        }
        self.swept = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[start] = Some(vec![1.0]);
        for i in (0..=start).rev() {
            let Some(back) = self.nodes[i].back.take() else {
                continue;
            };
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut self.grads,
                numels: &self.numels,
            };
            back(&g, &mut sink);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the loss w.r.t. a tracked tensor, if any flowed to it.
    pub fn grad(&self, t: &Tensor) -> Option<&[f64]> {
        let index = t.node_on(self.id)?;
        self.grads.get(index)?.as_deref()
    }

    /// Like [`Tape::grad`] but materialized as a tensor of the same shape.
    pub fn grad_tensor(&self, t: &Tensor) -> Option<Tensor> {
        self.grad(t)
            .map(|g| Tensor::new(t.shape.clone(), g.to_vec()).expect("grad shape matches"))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Internal: verify all tracked inputs belong to this tape.
fn guard_tape(tape: &Tape, op: &'static str, inputs: &[&Tensor]) -> Result<()> {
    for t in inputs {
        if let Some(NodeRef { tape: owner, .. }) = t.node {
            if owner != tape.id {
                return Err(Error::TapeMismatch { op });
            }
        }
    }
    Ok(())
}

/// Internal: wrap freshly computed data as the output of an op, recording
/// a node when the tape is live and any input is tracked.
fn make_output(
    tape: &mut Tape,
    shape: Vec<usize>,
    data: Vec<f64>,
    tracked: bool,
    back: impl FnOnce() -> BackFn,
) -> Tensor {
    let mut out = Tensor {
        shape,
        data: Arc::new(data),
        node: None,
    };
    if tape.recording && tracked {
        let index = tape.push(out.numel(), Some(back()));
        out.node = Some(NodeRef { tape: tape.id, index });
    }
    out
}
