//! Adversarial adaptation: gradient-reversal domain confusion (DANN), the
//! empirical H-divergence probe, and the three-phase discriminative
//! adversarial pipeline (ADDA).

use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};
use crate::loss::{cross_entropy, domain_bce, neg_log_likelihood};
use crate::net::{
    backward, forward, LayerSpec, Mode, NetworkSpec, ParamEntry, Parameters, Role, Trace,
};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::train::{
    eval_accuracy, fused_ce_backward, half_batch, source_only_train, stream_rng, train_forward,
    EpochMetrics, LabeledSet, Shuffler, Stream, TrainLog,
};

/// Domain classifier head: gradient reversal, then a small MLP to a single
/// sigmoid unit predicting P(target).
pub fn domain_classifier(feature_dim: usize, hidden: usize, lambda: f64) -> Result<NetworkSpec> {
    NetworkSpec::new(
        vec![
            LayerSpec::GradReversal { lambda },
            LayerSpec::Linear { in_dim: feature_dim, out_dim: hidden },
            LayerSpec::Relu,
            LayerSpec::Linear { in_dim: hidden, out_dim: 1 },
            LayerSpec::Sigmoid,
        ],
        Role::DomainClassifier,
        feature_dim,
    )
}

#[derive(Debug, Clone)]
pub struct DannConfig {
    /// Activation index of the label network the domain head reads from;
    /// 0 picks the last hidden activation.
    pub feature_activation: usize,
    /// Domain-loss weight on the label network (the reversal strength).
    pub lambda_d: f64,
    pub domain_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for DannConfig {
    fn default() -> Self {
        DannConfig {
            feature_activation: 0,
            lambda_d: 0.1,
            domain_hidden: 16,
            epochs: 30,
            batch_size: 64,
        }
    }
}

/// DANN training: source cross-entropy on the label network plus the
/// reversed domain-confusion loss through a gradient-reversal head.
/// With `lambda_d == 0` the domain branch is skipped entirely and the run
/// reproduces the source-only baseline bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn dann_train(
    spec: &NetworkSpec,
    params: &mut Parameters,
    source: &LabeledSet,
    target: &Tensor,
    target_eval: Option<&LabeledSet>,
    config: &DannConfig,
    opt: &mut OptimizerState,
    seed: u64,
) -> Result<TrainLog> {
    if config.lambda_d == 0.0 {
        return source_only_train(
            spec,
            params,
            source,
            target_eval,
            config.epochs,
            config.batch_size,
            opt,
            seed,
        );
    }
    let feat_act = if config.feature_activation == 0 {
        spec.n_layers().saturating_sub(2)
    } else {
        config.feature_activation
    };
    if feat_act == 0 || feat_act > spec.n_layers() {
        return Err(CoreError::InvalidArgument("feature activation out of range".into()));
    }
    let feat_dim = {
        // Probe the width by a tiny forward pass.
        let x = Tensor::zeros(vec![2, spec.in_dim()]);
        let trace = forward(spec, &mut params.clone(), &x, Mode::Train { source_rows: 1 })?;
        trace.activations[feat_act].cols()
    };
    let dspec = domain_classifier(feat_dim, config.domain_hidden, config.lambda_d)?;
    let mut dparams = Parameters::init(&dspec, &mut stream_rng(seed, Stream::Extra));
    let mut dopt = OptimizerState::new(opt.base_lr, opt.policy).with_momentum(opt.momentum);

    let half = half_batch(config.batch_size);
    let mut src_shuffler = Shuffler::new(source.len(), stream_rng(seed, Stream::SourceBatches));
    let mut tgt_shuffler = Shuffler::new(target.rows(), stream_rng(seed, Stream::TargetBatches));
    let steps = (source.len() / half).max(1);
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut dom_correct = 0usize;
        let mut dom_total = 0usize;
        for _ in 0..steps {
            let si = src_shuffler.draw(half);
            let ti = tgt_shuffler.draw(half);
            let batch = source.select(&si);
            let mut rows: Vec<&[f64]> = si.iter().map(|&i| source.x.row(i)).collect();
            rows.extend(ti.iter().map(|&i| target.row(i)));
            let x = Tensor::from_rows(&rows)?;
            let trace = train_forward(spec, params, &x, half, opt.iteration)?;
            let feats = trace.activations[feat_act].clone();
            let dtrace = train_forward(&dspec, &mut dparams, &feats, half, opt.iteration)?;
            let labels: Vec<bool> = (0..2 * half).map(|r| r >= half).collect();
            let (dom_loss, dprobs) = domain_bce(dtrace.output(), &labels)?;
            for (r, &is_t) in labels.iter().enumerate() {
                if (dtrace.output().row(r)[0] >= 0.5) == is_t {
                    dom_correct += 1;
                }
                dom_total += 1;
            }
            // Backward through the domain head; the reversal layer flips
            // and scales the feature gradient by -lambda_d on the way down.
            let (dgrads, dfeat) = backward(&dspec, &dparams, &dtrace, &dprobs, &[])?;
            let (ce, grads) =
                fused_ce_backward(spec, params, &trace, &batch.y, None, &[(feat_act, dfeat)])?;
            let loss = ce + config.lambda_d * dom_loss;
            if !loss.is_finite() {
                return Err(CoreError::Diverged {
                    iteration: opt.iteration,
                    what: "DANN objective".into(),
                });
            }
            loss_sum += loss;
            opt.step(params, &grads)?;
            dopt.step(&mut dparams, &dgrads)?;
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
            domain_acc: Some(dom_correct as f64 / dom_total.max(1) as f64),
            ..Default::default()
        });
    }
    Ok(log)
}

/// Empirical H-divergence between two feature sets: train a logistic probe
/// on half of each domain, measure the held-out error of each domain, and
/// report 2 * (1 - (err_S + err_T)), clamped to [0, 2]. The probe labels
/// target rows 1 and source rows 0.
pub fn empirical_h_divergence(
    source_feats: &Tensor,
    target_feats: &Tensor,
    seed: u64,
) -> Result<f64> {
    let (ns, nt) = (source_feats.rows(), target_feats.rows());
    if ns < 2 || nt < 2 {
        return Err(CoreError::InvalidArgument("need at least 2 rows per domain".into()));
    }
    if source_feats.cols() != target_feats.cols() {
        return Err(CoreError::Shape("feature widths differ".into()));
    }
    let d = source_feats.cols();
    let mut rng = stream_rng(seed, Stream::Probe);
    let mut si: Vec<usize> = (0..ns).collect();
    let mut ti: Vec<usize> = (0..nt).collect();
    si.shuffle(&mut rng);
    ti.shuffle(&mut rng);
    let (s_tr, s_te) = si.split_at(ns / 2);
    let (t_tr, t_te) = ti.split_at(nt / 2);

    let probe = NetworkSpec::new(
        vec![LayerSpec::Linear { in_dim: d, out_dim: 1 }, LayerSpec::Sigmoid],
        Role::DomainClassifier,
        d,
    )?;
    let mut params = Parameters::init(&probe, &mut rng);
    let mut opt = OptimizerState::new(0.1, crate::optim::LrPolicy::Fixed);

    let mut rows: Vec<&[f64]> = s_tr.iter().map(|&i| source_feats.row(i)).collect();
    rows.extend(t_tr.iter().map(|&i| target_feats.row(i)));
    let x = Tensor::from_rows(&rows)?;
    let labels: Vec<bool> = (0..x.rows()).map(|r| r >= s_tr.len()).collect();
    for it in 0..200 {
        let trace = train_forward(&probe, &mut params, &x, s_tr.len(), it)?;
        let (_, dprobs) = domain_bce(trace.output(), &labels)?;
        let (grads, _) = backward(&probe, &params, &trace, &dprobs, &[])?;
        opt.step(&mut params, &grads)?;
    }

    let err = |rows: Vec<&[f64]>, is_target: bool, params: &mut Parameters| -> Result<f64> {
        let x = Tensor::from_rows(&rows)?;
        let mode = if is_target { Mode::EvalTarget } else { Mode::EvalSource };
        let trace = forward(&probe, params, &x, mode)?;
        let wrong = (0..x.rows())
            .filter(|&r| (trace.output().row(r)[0] >= 0.5) != is_target)
            .count();
        Ok(wrong as f64 / x.rows() as f64)
    };
    let err_s = err(s_te.iter().map(|&i| source_feats.row(i)).collect(), false, &mut params)?;
    let err_t = err(t_te.iter().map(|&i| target_feats.row(i)).collect(), true, &mut params)?;
    Ok((2.0 * (1.0 - (err_s + err_t))).clamp(0.0, 2.0))
}

/// Split a trained network at `at_layer`: the prefix becomes a feature map
/// and the suffix (with parameter names rebased to start at l0) the head.
pub fn split_network(
    spec: &NetworkSpec,
    params: &Parameters,
    at_layer: usize,
    prefix_role: Role,
    suffix_role: Role,
) -> Result<((NetworkSpec, Parameters), (NetworkSpec, Parameters))> {
    if at_layer == 0 || at_layer >= spec.n_layers() {
        return Err(CoreError::InvalidArgument("split point out of range".into()));
    }
    // Width entering the suffix.
    let mut width = spec.in_dim();
    for l in spec.layers.iter().take(at_layer) {
        width = match l {
            LayerSpec::Linear { out_dim, .. } => *out_dim,
            _ => width,
        };
    }
    let prefix = NetworkSpec::new(spec.layers[..at_layer].to_vec(), prefix_role, spec.in_dim())?;
    let suffix = NetworkSpec::new(spec.layers[at_layer..].to_vec(), suffix_role, width)?;
    let mut pre_entries = Vec::new();
    let mut suf_entries = Vec::new();
    for e in params.entries() {
        let idx: usize = e
            .name
            .strip_prefix('l')
            .and_then(|r| r.split('.').next())
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| CoreError::InvalidArgument(format!("unnamed layer param {}", e.name)))?;
        if idx < at_layer {
            pre_entries.push(e.clone());
        } else {
            let tail = e.name.splitn(2, '.').nth(1).unwrap_or_default();
            suf_entries.push(ParamEntry {
                name: format!("l{}.{}", idx - at_layer, tail),
                tensor: e.tensor.clone(),
                trainable: e.trainable,
            });
        }
    }
    Ok((
        (prefix, Parameters::from_entries(pre_entries)),
        (suffix, Parameters::from_entries(suf_entries)),
    ))
}

/// Discriminator for the ADDA adaptation phase.
pub fn adda_discriminator(feature_dim: usize) -> Result<NetworkSpec> {
    NetworkSpec::new(
        vec![
            LayerSpec::Linear { in_dim: feature_dim, out_dim: 64 },
            LayerSpec::Relu,
            LayerSpec::Linear { in_dim: 64, out_dim: 128 },
            LayerSpec::Relu,
            LayerSpec::Linear { in_dim: 128, out_dim: 192 },
            LayerSpec::Relu,
            LayerSpec::Linear { in_dim: 192, out_dim: 1 },
            LayerSpec::Sigmoid,
        ],
        Role::Discriminator,
        feature_dim,
    )
}

/// The three networks of a discriminative adversarial run. The source map
/// and classifier are frozen after pretraining; only the target map and the
/// discriminator move during adaptation.
pub struct AddaState {
    pub source_map: (NetworkSpec, Parameters),
    pub target_map: (NetworkSpec, Parameters),
    pub classifier: (NetworkSpec, Parameters),
    pub discriminator: (NetworkSpec, Parameters),
}

#[derive(Debug, Clone)]
pub struct AddaConfig {
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub batch_size: usize,
    /// Layer index separating the feature map from the classifier head.
    pub split_at: usize,
}

impl Default for AddaConfig {
    fn default() -> Self {
        AddaConfig { pretrain_epochs: 20, adapt_epochs: 20, batch_size: 64, split_at: 4 }
    }
}

/// Phase 1: supervised pretraining of the joint source network, then split
/// into the frozen source map + classifier and an identically initialized
/// target map. Shares the source-only training loop verbatim.
pub fn adda_pretrain(
    spec: &NetworkSpec,
    source: &LabeledSet,
    config: &AddaConfig,
    opt: &mut OptimizerState,
    seed: u64,
) -> Result<(AddaState, TrainLog)> {
    let mut params = Parameters::init(spec, &mut stream_rng(seed, Stream::Init));
    let log = source_only_train(
        spec,
        &mut params,
        source,
        None,
        config.pretrain_epochs,
        config.batch_size,
        opt,
        seed,
    )?;
    let ((mspec, mparams), (cspec, cparams)) =
        split_network(spec, &params, config.split_at, Role::SourceMap, Role::Classifier)?;
    let tspec = NetworkSpec::new(mspec.layers.clone(), Role::TargetMap, mspec.in_dim())?;
    let feat_dim = cspec.in_dim();
    let dspec = adda_discriminator(feat_dim)?;
    let dparams = Parameters::init(&dspec, &mut stream_rng(seed, Stream::Extra));
    let state = AddaState {
        target_map: (tspec, mparams.clone()),
        source_map: (mspec, mparams),
        classifier: (cspec, cparams),
        discriminator: (dspec, dparams),
    };
    Ok((state, log))
}

/// Phase 2: adversarial adaptation of the target map against the
/// discriminator, alternating one discriminator step with one map step.
/// The source map and classifier stay frozen.
pub fn adda_adapt(
    state: &mut AddaState,
    source: &LabeledSet,
    target: &Tensor,
    config: &AddaConfig,
    d_opt: &mut OptimizerState,
    m_opt: &mut OptimizerState,
    seed: u64,
) -> Result<TrainLog> {
    let half = half_batch(config.batch_size);
    let mut src_shuffler = Shuffler::new(source.len(), stream_rng(seed, Stream::SourceBatches));
    let mut tgt_shuffler = Shuffler::new(target.rows(), stream_rng(seed, Stream::TargetBatches));
    let steps = (source.len().min(target.rows()) / half).max(1);
    let mut log = TrainLog::default();
    let (sspec, sparams) = (&state.source_map.0, &mut state.source_map.1);
    let (tspec, tparams) = (&state.target_map.0, &mut state.target_map.1);
    let (dspec, dparams) = (&state.discriminator.0, &mut state.discriminator.1);

    for epoch in 0..config.adapt_epochs {
        let mut d_loss_sum = 0.0;
        let mut m_loss_sum = 0.0;
        let mut d_correct = 0usize;
        let mut d_total = 0usize;
        for _ in 0..steps {
            let si = src_shuffler.draw(half);
            let ti = tgt_shuffler.draw(half);
            let xs = source.select(&si).x;
            let trows: Vec<&[f64]> = ti.iter().map(|&i| target.row(i)).collect();
            let xt = Tensor::from_rows(&trows)?;

            // Discriminator step: label source features 1, target features 0.
            let fs = forward(sspec, sparams, &xs, Mode::EvalSource)?.output().clone();
            let ft_trace = train_forward(tspec, tparams, &xt, 0, m_opt.iteration)?;
            let ft = ft_trace.output().clone();
            let feats = Tensor::vcat(&fs, &ft)?;
            let dtrace = train_forward(dspec, dparams, &feats, half, d_opt.iteration)?;
            let probs = dtrace.output();
            let (l_src, dprobs_s) =
                neg_log_likelihood(&probs.slice_rows(0, half), true)?;
            let (l_tgt, dprobs_t) =
                neg_log_likelihood(&probs.slice_rows(half, 2 * half), false)?;
            let d_loss = l_src + l_tgt;
            for r in 0..2 * half {
                if (probs.row(r)[0] >= 0.5) == (r < half) {
                    d_correct += 1;
                }
                d_total += 1;
            }
            let dprobs = Tensor::vcat(&dprobs_s, &dprobs_t)?;
            let (dgrads, _) = backward(dspec, dparams, &dtrace, &dprobs, &[])?;
            d_opt.step(dparams, &dgrads)?;

            // Map step: push target features toward the discriminator's
            // source label using the inverted objective.
            let ft_trace = train_forward(tspec, tparams, &xt, 0, m_opt.iteration)?;
            let dtrace =
                train_forward(dspec, dparams, ft_trace.output(), 0, m_opt.iteration)?;
            let (m_loss, dprobs) = neg_log_likelihood(dtrace.output(), true)?;
            let (_, dfeat) = backward(dspec, dparams, &dtrace, &dprobs, &[])?;
            let (mgrads, _) = backward(tspec, tparams, &ft_trace, &dfeat, &[])?;
            m_opt.step(tparams, &mgrads)?;

            if !(d_loss.is_finite() && m_loss.is_finite()) {
                return Err(CoreError::Diverged {
                    iteration: m_opt.iteration,
                    what: "adversarial objective".into(),
                });
            }
            d_loss_sum += d_loss;
            m_loss_sum += m_loss;
        }
        let d_acc = d_correct as f64 / d_total.max(1) as f64;
        if d_acc == 1.0 {
            log.warnings.push(format!(
                "discriminator at perfect accuracy for all of epoch {epoch}; \
                 the target map is receiving a vanishing signal"
            ));
        }
        log.epochs.push(EpochMetrics {
            epoch,
            train_loss: d_loss_sum / steps as f64 + m_loss_sum / steps as f64,
            domain_acc: Some(d_acc),
            ..Default::default()
        });
    }
    Ok(log)
}

/// Phase 3: classify target samples through the adapted map and the frozen
/// source classifier.
pub fn adda_test(state: &mut AddaState, test: &LabeledSet) -> Result<f64> {
    if test.is_empty() {
        return Err(CoreError::InvalidArgument("empty test set".into()));
    }
    let (tspec, tparams) = (&state.target_map.0, &mut state.target_map.1);
    let feats = forward(tspec, tparams, &test.x, Mode::EvalTarget)?.output().clone();
    let (cspec, cparams) = (&state.classifier.0, &mut state.classifier.1);
    let trace = forward(cspec, cparams, &feats, Mode::EvalTarget)?;
    Ok(crate::loss::accuracy(trace.output(), &test.y))
}

/// Classification loss and accuracy of a trace, for diagnostics.
pub fn trace_ce(trace: &Trace, labels: &[usize]) -> Result<f64> {
    cross_entropy(trace.output(), labels).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::LrPolicy;
    use crate::train::mlp_classifier;
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
    fn dann_zero_lambda_matches_source_only_bitwise() {
        let source = blobs(64, 0.0, 1);
        let target = blobs(64, 0.7, 2).x;
        let spec = mlp_classifier(2, 6, 2).unwrap();

        let mut p1 = Parameters::init(&spec, &mut stream_rng(4, Stream::Init));
        let mut o1 = OptimizerState::new(0.01, LrPolicy::Fixed);
        source_only_train(&spec, &mut p1, &source, None, 3, 16, &mut o1, 4).unwrap();

        let mut p2 = Parameters::init(&spec, &mut stream_rng(4, Stream::Init));
        let mut o2 = OptimizerState::new(0.01, LrPolicy::Fixed);
        let cfg = DannConfig { lambda_d: 0.0, epochs: 3, batch_size: 16, ..Default::default() };
        dann_train(&spec, &mut p2, &source, &target, None, &cfg, &mut o2, 4).unwrap();

        assert_eq!(p1.fingerprint(), p2.fingerprint());
    }

    #[test]
    fn dann_confuses_domain_classifier() {
        let source = blobs(128, 0.0, 5);
        let target = blobs(128, 0.8, 6).x;
        let spec = mlp_classifier(2, 8, 2).unwrap();
        let mut params = Parameters::init(&spec, &mut stream_rng(7, Stream::Init));
        let mut opt = OptimizerState::new(0.02, LrPolicy::Fixed);
        let cfg = DannConfig { lambda_d: 0.5, epochs: 25, batch_size: 32, ..Default::default() };
        let log = dann_train(&spec, &mut params, &source, &target, None, &cfg, &mut opt, 7).unwrap();
        let last = log.epochs.last().unwrap();
        assert!(last.source_acc > 0.9, "source acc {}", last.source_acc);
        // A confused domain classifier sits near chance.
        let dom = last.domain_acc.unwrap();
        assert!(dom < 0.85, "domain classifier should be confused, got {dom}");
    }

    #[test]
    fn h_divergence_separable_high_identical_low() {
        let mut rng = stream_rng(8, Stream::Data);
        let a: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.gen::<f64>() + 5.0).collect();
        let s = Tensor::matrix(100, 2, a.clone()).unwrap();
        let t = Tensor::matrix(100, 2, b).unwrap();
        let d = empirical_h_divergence(&s, &t, 1).unwrap();
        assert!(d > 1.8, "separated domains: {d}");
        let t2 = Tensor::matrix(100, 2, a).unwrap();
        let d0 = empirical_h_divergence(&s, &t2, 1).unwrap();
        assert!(d0 < 0.5, "identical domains: {d0}");
        assert!((0.0..=2.0).contains(&d) && (0.0..=2.0).contains(&d0));
    }

    #[test]
    fn split_network_preserves_forward() {
        let spec = mlp_classifier(3, 5, 2).unwrap();
        let mut params = Parameters::init(&spec, &mut stream_rng(2, Stream::Init));
        let x = Tensor::matrix(4, 3, (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        let full = forward(&spec, &mut params, &x, Mode::EvalSource).unwrap().output().clone();
        let ((ms, mut mp), (cs, mut cp)) =
            split_network(&spec, &params, 4, Role::SourceMap, Role::Classifier).unwrap();
        let feats = forward(&ms, &mut mp, &x, Mode::EvalSource).unwrap().output().clone();
        let composed = forward(&cs, &mut cp, &feats, Mode::EvalSource).unwrap().output().clone();
        let bits_a: Vec<u64> = full.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = composed.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn adda_improves_on_shifted_target() {
        let source = blobs(128, 0.0, 11);
        let target_train = blobs(128, 0.9, 12);
        let target_test = blobs(64, 0.9, 13);
        let spec = mlp_classifier(2, 8, 2).unwrap();
        let cfg = AddaConfig {
            pretrain_epochs: 20,
            adapt_epochs: 15,
            batch_size: 32,
            split_at: 4,
        };
        let mut opt = OptimizerState::new(0.02, LrPolicy::Fixed);
        let (mut state, _) = adda_pretrain(&spec, &source, &cfg, &mut opt, 21).unwrap();
        let before = adda_test(&mut state, &target_test).unwrap();
        let mut d_opt = OptimizerState::new(0.005, LrPolicy::Fixed);
        let mut m_opt = OptimizerState::new(0.005, LrPolicy::Fixed);
        adda_adapt(&mut state, &source, &target_train.x, &cfg, &mut d_opt, &mut m_opt, 21)
            .unwrap();
        let after = adda_test(&mut state, &target_test).unwrap();
        assert!(after >= before - 0.05, "adaptation regressed: {before} -> {after}");
        assert!(after > 0.6, "adapted target accuracy {after}");
    }

    #[test]
    fn adda_empty_test_set_rejected() {
        let source = blobs(32, 0.0, 14);
        let spec = mlp_classifier(2, 4, 2).unwrap();
        let cfg = AddaConfig { pretrain_epochs: 1, adapt_epochs: 1, batch_size: 8, split_at: 4 };
        let mut opt = OptimizerState::new(0.01, LrPolicy::Fixed);
        let (mut state, _) = adda_pretrain(&spec, &source, &cfg, &mut opt, 15).unwrap();
        let empty = LabeledSet::new(Tensor::zeros(vec![0, 2]), vec![]).unwrap();
        assert!(adda_test(&mut state, &empty).is_err());
    }
}
