//! Shared training machinery: datasets, seeded batch shuffling, the
//! supervised step used by the source-only baseline and by every adaptation
//! trainer's classification term, and per-epoch metric logs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::loss::{accuracy, cross_entropy};
use crate::net::{backward_from, forward, Gradients, Mode, NetworkSpec, Parameters, Trace};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

/// Stream labels for deriving independent RNGs from one experiment seed, so
/// adding a consumer (e.g. a target-batch shuffler) never perturbs the
/// others.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init = 1,
    SourceBatches = 2,
    TargetBatches = 3,
    Data = 4,
    Probe = 5,
    Extra = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((stream as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// Feature matrix with one label per row.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(CoreError::InvalidArgument("row/label count mismatch".into()));
        }
        Ok(LabeledSet { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.y.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.x.row(i)).collect();
        LabeledSet {
            x: Tensor::from_rows(&rows).unwrap(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Seeded mini-batch index source; reshuffles at every epoch boundary.
pub struct Shuffler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Shuffler {
    pub fn new(n: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Shuffler { order, pos: 0, rng }
    }

    /// Next `count` indices, reshuffling when the pass is exhausted.
    pub fn draw(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Per-domain half-batch size: half the configured batch, truncated to an
/// even count so MMD quad-tuples always pair cleanly.
pub fn half_batch(batch_size: usize) -> usize {
    ((batch_size / 2) & !1).max(2)
}

/// Metrics captured at the end of each epoch.
#[derive(Debug, Clone, Default)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub mmd_per_layer: Vec<f64>,
    pub source_acc: f64,
    pub target_acc: f64,
    pub alphas: Vec<f64>,
    pub domain_acc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
    /// Non-fatal conditions observed during training, e.g. a discriminator
    /// that stayed at perfect accuracy for a whole epoch.
    pub warnings: Vec<String>,
}

impl TrainLog {
    /// CSV rows: epoch, train_loss, mmd_per_layer..., source_acc, target_acc
    /// with alpha columns appended when present.
    pub fn to_csv(&self) -> String {
        let n_mmd = self.epochs.iter().map(|e| e.mmd_per_layer.len()).max().unwrap_or(0);
        let n_alpha = self.epochs.iter().map(|e| e.alphas.len()).max().unwrap_or(0);
        let mut s = String::from("epoch,train_loss");
        for i in 0..n_mmd {
            s.push_str(&format!(",mmd_layer{i}"));
        }
        s.push_str(",source_acc,target_acc");
        for i in 0..n_alpha {
            s.push_str(&format!(",alpha{i}"));
        }
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&format!("{},{}", e.epoch, e.train_loss));
            for i in 0..n_mmd {
                s.push_str(&format!(",{}", e.mmd_per_layer.get(i).copied().unwrap_or(f64::NAN)));
            }
            s.push_str(&format!(",{},{}", e.source_acc, e.target_acc));
            for i in 0..n_alpha {
                s.push_str(&format!(",{}", e.alphas.get(i).copied().unwrap_or(f64::NAN)));
            }
            s.push('\n');
        }
        s
    }
}

/// Forward in train mode and return the trace, checking for divergence.
pub fn train_forward(
    spec: &NetworkSpec,
    params: &mut Parameters,
    x: &Tensor,
    source_rows: usize,
    iteration: u64,
) -> Result<Trace> {
    forward(spec, params, x, Mode::Train { source_rows }).map_err(|e| match e {
        CoreError::NonFinite(w) => CoreError::Diverged { iteration, what: w },
        other => other,
    })
}

/// Cross-entropy on the first `labels.len()` rows of a softmax-terminated
/// network's output; rows beyond the labels get zero logits-gradient.
/// Returns the loss and the gradients after a backward with `taps`.
pub fn fused_ce_backward(
    spec: &NetworkSpec,
    params: &Parameters,
    trace: &Trace,
    labels: &[usize],
    extra_dlogits: Option<&Tensor>,
    taps: &[(usize, Tensor)],
) -> Result<(f64, Gradients)> {
    let n_layers = spec.n_layers();
    if !matches!(spec.layers.last(), Some(crate::net::LayerSpec::Softmax)) {
        return Err(CoreError::Network("fused cross-entropy needs a softmax head".into()));
    }
    let probs = trace.output();
    let n_src = labels.len();
    let (loss, dlogits_src) = cross_entropy(&probs.slice_rows(0, n_src), labels)?;
    let mut dlogits = Tensor::zeros(vec![probs.rows(), probs.cols()]);
    for r in 0..n_src {
        dlogits.row_mut(r).copy_from_slice(dlogits_src.row(r));
    }
    if let Some(extra) = extra_dlogits {
        dlogits.add_assign(extra);
    }
    let (grads, _) = backward_from(spec, params, trace, n_layers - 1, &dlogits, taps)?;
    Ok((loss, grads))
}

/// Evaluate classification accuracy in eval mode.
pub fn eval_accuracy(
    spec: &NetworkSpec,
    params: &mut Parameters,
    set: &LabeledSet,
    mode: Mode,
) -> Result<f64> {
    if set.is_empty() {
        return Err(CoreError::InvalidArgument("empty evaluation set".into()));
    }
    let trace = forward(spec, params, &set.x, mode)?;
    Ok(accuracy(trace.output(), &set.y))
}

/// One supervised SGD step on a source-only batch. Shared verbatim by the
/// source-only baseline and by the adaptation trainers' degenerate paths so
/// that zero-weight configurations reproduce the baseline bit for bit.
pub fn supervised_step(
    spec: &NetworkSpec,
    params: &mut Parameters,
    batch: &LabeledSet,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let iter = opt.iteration;
    let trace = train_forward(spec, params, &batch.x, batch.len(), iter)?;
    let (loss, grads) = fused_ce_backward(spec, params, &trace, &batch.y, None, &[])?;
    if !loss.is_finite() {
        return Err(CoreError::Diverged { iteration: iter, what: "cross-entropy loss".into() });
    }
    opt.step(params, &grads)?;
    Ok(loss)
}

/// Plain supervised training on the source domain; the baseline every
/// adaptation run is compared against. `batch_size` is interpreted the same
/// way as for the adaptation trainers: the per-step source rows are
/// `half_batch(batch_size)`.
pub fn source_only_train(
    spec: &NetworkSpec,
    params: &mut Parameters,
    source: &LabeledSet,
    target_eval: Option<&LabeledSet>,
    epochs: usize,
    batch_size: usize,
    opt: &mut OptimizerState,
    seed: u64,
) -> Result<TrainLog> {
    let half = half_batch(batch_size);
    let mut shuffler = Shuffler::new(source.len(), stream_rng(seed, Stream::SourceBatches));
    let steps = (source.len() / half).max(1);
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let idx = shuffler.draw(half);
            let batch = source.select(&idx);
            loss_sum += supervised_step(spec, params, &batch, opt)?;
        }
        let source_acc = eval_accuracy(spec, params, source, Mode::EvalSource)?;
        let target_acc = match target_eval {
            Some(t) => eval_accuracy(spec, params, t, Mode::EvalTarget)?,
            None => f64::NAN,
        };
        log.epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / steps as f64,
            source_acc,
            target_acc,
            ..Default::default()
        });
    }
    Ok(log)
}

/// Standard toy classifier: in -> hidden -> hidden -> out with relu and a
/// softmax head. The two adapted representations for DAN live at the last
/// hidden activation and the output logits.
pub fn mlp_classifier(in_dim: usize, hidden: usize, classes: usize) -> Result<NetworkSpec> {
    use crate::net::{LayerSpec, Role};
    NetworkSpec::new(
        vec![
            LayerSpec::Linear { in_dim, out_dim: hidden },
            LayerSpec::Relu,
            LayerSpec::Linear { in_dim: hidden, out_dim: hidden },
            LayerSpec::Relu,
            LayerSpec::Linear { in_dim: hidden, out_dim: classes },
            LayerSpec::Softmax,
        ],
        Role::LabelPredictor,
        in_dim,
    )
}
