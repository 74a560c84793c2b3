//! Domain alignment layers: classifiers whose normalization statistics are
//! a learned mixture of source and target batch moments, trained with
//! source cross-entropy plus a weighted target entropy term.

use crate::error::{CoreError, Result};
use crate::loss::entropy;
use crate::net::{alpha_from_rho, LayerSpec, Mode, NetworkSpec, Parameters, Role};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::train::{
    eval_accuracy, fused_ce_backward, half_batch, stream_rng, supervised_step, train_forward,
    EpochMetrics, LabeledSet, Shuffler, Stream, TrainLog,
};

#[derive(Debug, Clone)]
pub struct AutodialConfig {
    /// Weight of the target entropy term.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for AutodialConfig {
    fn default() -> Self {
        AutodialConfig { lambda: 0.1, epochs: 30, batch_size: 64 }
    }
}

/// Classifier with an alignment layer after each hidden linear layer.
/// `pin_alpha` fixes the mixing coefficient instead of learning it;
/// pinning at 1.0 reduces every alignment layer to per-domain batch norm.
pub fn autodial_classifier(
    in_dim: usize,
    hidden: usize,
    classes: usize,
    pin_alpha: Option<f64>,
) -> Result<NetworkSpec> {
    let da = |dim| LayerSpec::DaLayer { dim, momentum: 0.1, eps: 1e-5, affine: true, pin_alpha };
    NetworkSpec::new(
        vec![
            LayerSpec::Linear { in_dim, out_dim: hidden },
            da(hidden),
            LayerSpec::Relu,
            LayerSpec::Linear { in_dim: hidden, out_dim: hidden },
            da(hidden),
            LayerSpec::Relu,
            LayerSpec::Linear { in_dim: hidden, out_dim: classes },
            LayerSpec::Softmax,
        ],
        Role::LabelPredictor,
        in_dim,
    )
}

/// The same topology with plain batch norm, the reference the pinned
/// configuration is compared against.
pub fn batchnorm_classifier(in_dim: usize, hidden: usize, classes: usize) -> Result<NetworkSpec> {
    NetworkSpec::new(
        vec![
            LayerSpec::Linear { in_dim, out_dim: hidden },
            LayerSpec::batchnorm(hidden),
            LayerSpec::Relu,
            LayerSpec::Linear { in_dim: hidden, out_dim: hidden },
            LayerSpec::batchnorm(hidden),
            LayerSpec::Relu,
            LayerSpec::Linear { in_dim: hidden, out_dim: classes },
            LayerSpec::Softmax,
        ],
        Role::LabelPredictor,
        in_dim,
    )
}

/// Current mixing coefficients of every alignment layer, in layer order.
pub fn current_alphas(spec: &NetworkSpec, params: &Parameters) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerSpec::DaLayer { pin_alpha, .. } = layer {
            match pin_alpha {
                Some(a) => out.push(*a),
                None => {
                    if let Ok(rho) = params.get(&format!("l{i}.rho")) {
                        out.push(alpha_from_rho(rho.data()[0]));
                    }
                }
            }
        }
    }
    out
}

/// Train with mixed-statistics alignment layers: cross-entropy on the
/// source half of each batch plus `lambda` times the prediction entropy of
/// the target half. With `lambda == 0` the target half is skipped entirely
/// and the loop is the shared supervised step on source batches.
#[allow(clippy::too_many_arguments)]
pub fn autodial_train(
    spec: &NetworkSpec,
    params: &mut Parameters,
    source: &LabeledSet,
    target: &Tensor,
    target_eval: Option<&LabeledSet>,
    config: &AutodialConfig,
    opt: &mut OptimizerState,
    seed: u64,
) -> Result<TrainLog> {
    let half = half_batch(config.batch_size);
    let mut src_shuffler = Shuffler::new(source.len(), stream_rng(seed, Stream::SourceBatches));
    let steps = (source.len() / half).max(1);
    let mut log = TrainLog::default();

    if config.lambda == 0.0 {
        for epoch in 0..config.epochs {
            let mut loss_sum = 0.0;
            for _ in 0..steps {
                let idx = src_shuffler.draw(half);
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
                alphas: current_alphas(spec, params),
                ..Default::default()
            });
        }
        return Ok(log);
    }

    let mut tgt_shuffler = Shuffler::new(target.rows(), stream_rng(seed, Stream::TargetBatches));
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let si = src_shuffler.draw(half);
            let ti = tgt_shuffler.draw(half);
            let batch = source.select(&si);
            let mut rows: Vec<&[f64]> = si.iter().map(|&i| source.x.row(i)).collect();
            rows.extend(ti.iter().map(|&i| target.row(i)));
            let x = Tensor::from_rows(&rows)?;
            let trace = train_forward(spec, params, &x, half, opt.iteration)?;
            let probs = trace.output();
            let (h, dlogits_t) = entropy(&probs.slice_rows(half, probs.rows()))?;
            let mut extra = Tensor::zeros(vec![probs.rows(), probs.cols()]);
            for r in 0..dlogits_t.rows() {
                for (dst, &src) in
                    extra.row_mut(half + r).iter_mut().zip(dlogits_t.row(r))
                {
                    *dst = config.lambda * src;
                }
            }
            let (ce, grads) =
                fused_ce_backward(spec, params, &trace, &batch.y, Some(&extra), &[])?;
            let loss = ce + config.lambda * h;
            if !loss.is_finite() {
                return Err(CoreError::Diverged {
                    iteration: opt.iteration,
                    what: "alignment objective".into(),
                });
            }
            loss_sum += loss;
            opt.step(params, &grads)?;
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
            alphas: current_alphas(spec, params),
            ..Default::default()
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::RHO_INIT;
    use crate::optim::LrPolicy;
    use crate::train::source_only_train;
    use rand::Rng;

    fn blobs(n: usize, shift: f64, seed: u64) -> LabeledSet {
        let mut rng = stream_rng(seed, Stream::Data);
        let mut data = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let cx = if c == 0 { -1.0 } else { 1.0 };
            data.push(cx + 0.3 * rng.gen::<f64>() + shift);
            data.push(0.3 * rng.gen::<f64>() + shift);
            y.push(c);
        }
        LabeledSet::new(Tensor::matrix(n, 2, data).unwrap(), y).unwrap()
    }

    #[test]
    fn alpha_init_and_bounds() {
        let spec = autodial_classifier(2, 4, 2, None).unwrap();
        let params = Parameters::init(&spec, &mut stream_rng(1, Stream::Init));
        let alphas = current_alphas(&spec, &params);
        assert_eq!(alphas.len(), 2);
        for a in alphas {
            assert!((a - alpha_from_rho(RHO_INIT)).abs() < 1e-12);
            assert!(a > 0.5 && a < 1.0);
        }
    }

    #[test]
    fn pinned_zero_lambda_matches_batchnorm_source_only_bitwise() {
        let source = blobs(64, 0.0, 3);
        let target = blobs(64, 0.6, 4).x;

        let bn_spec = batchnorm_classifier(2, 6, 2).unwrap();
        let mut p1 = Parameters::init(&bn_spec, &mut stream_rng(5, Stream::Init));
        let mut o1 = OptimizerState::new(0.01, LrPolicy::Fixed);
        source_only_train(&bn_spec, &mut p1, &source, None, 3, 16, &mut o1, 5).unwrap();

        let da_spec = autodial_classifier(2, 6, 2, Some(1.0)).unwrap();
        let mut p2 = Parameters::init(&da_spec, &mut stream_rng(5, Stream::Init));
        let mut o2 = OptimizerState::new(0.01, LrPolicy::Fixed);
        let cfg = AutodialConfig { lambda: 0.0, epochs: 3, batch_size: 16 };
        autodial_train(&da_spec, &mut p2, &source, &target, None, &cfg, &mut o2, 5).unwrap();

        assert_eq!(p1.fingerprint(), p2.fingerprint());
    }

    #[test]
    fn alphas_learn_and_stay_in_range() {
        let source = blobs(96, 0.0, 7);
        let target_set = blobs(96, 0.7, 8);
        let spec = autodial_classifier(2, 6, 2, None).unwrap();
        let mut params = Parameters::init(&spec, &mut stream_rng(9, Stream::Init));
        let mut opt = OptimizerState::new(0.02, LrPolicy::Fixed);
        let cfg = AutodialConfig { lambda: 0.1, epochs: 15, batch_size: 32 };
        let log = autodial_train(
            &spec,
            &mut params,
            &source,
            &target_set.x,
            Some(&target_set),
            &cfg,
            &mut opt,
            9,
        )
        .unwrap();
        let last = log.epochs.last().unwrap();
        assert!(last.source_acc > 0.9, "source acc {}", last.source_acc);
        assert_eq!(last.alphas.len(), 2);
        let init = alpha_from_rho(RHO_INIT);
        let moved = last.alphas.iter().any(|&a| (a - init).abs() > 1e-6);
        assert!(moved, "mixing coefficients never moved from init");
        for epoch in &log.epochs {
            for &a in &epoch.alphas {
                assert!(a > 0.5 && a < 1.0, "alpha {a} out of (0.5, 1)");
            }
        }
    }
}
