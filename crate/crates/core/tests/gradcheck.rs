//! Central finite-difference checks for every layer kind and every loss.
//! Each case runs 20 random instances; relative error must stay below 1e-5.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shiftbench_core::loss::{cross_entropy, domain_bce, entropy, neg_log_likelihood};
use shiftbench_core::mkmmd::{mmd_linear, mmd_linear_with_grad, KernelBank};
use shiftbench_core::net::{
    backward, forward, LayerSpec, Mode, NetworkSpec, Parameters, Role,
};
use shiftbench_core::tensor::Tensor;

const TOL: f64 = 1e-5;
const H: f64 = 1e-6;
const INSTANCES: usize = 20;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Random matrix in [-2, 2], entries kept away from 0 so relu kinks never
/// sit inside the finite-difference window.
fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data: Vec<f64> = (0..r * c)
        .map(|_| {
            let v: f64 = rng.gen::<f64>() * 4.0 - 2.0;
            if v.abs() < 1e-3 {
                v + 0.01
            } else {
                v
            }
        })
        .collect();
    Tensor::matrix(r, c, data).unwrap()
}

/// Scalar objective: sum of a fixed random linear functional of the output.
/// Its gradient with respect to the output is the coefficient matrix, which
/// keeps finite differences well conditioned for every layer.
fn objective(out: &Tensor, coef: &Tensor) -> f64 {
    out.data().iter().zip(coef.data()).map(|(a, b)| a * b).sum()
}

/// Check input and trainable-parameter gradients of a single network
/// against central finite differences of `objective`.
fn check_network(spec: &NetworkSpec, rng: &mut ChaCha8Rng, rows: usize, source_rows: usize) {
    let mode = Mode::Train { source_rows };
    let mut params = Parameters::init(spec, rng);
    let x = rand_mat(rng, rows, spec.in_dim());
    let trace = forward(spec, &mut params, &x, mode).unwrap();
    let coef = rand_mat(rng, trace.output().rows(), trace.output().cols());
    let (grads, dx) = backward(spec, &params, &trace, &coef, &[]).unwrap();

    // Input gradient.
    for r in 0..rows {
        for c in 0..x.cols() {
            let mut xp = x.clone();
            xp.row_mut(r)[c] += H;
            let mut xm = x.clone();
            xm.row_mut(r)[c] -= H;
            let fp = objective(
                forward(spec, &mut params.clone(), &xp, mode).unwrap().output(),
                &coef,
            );
            let fm = objective(
                forward(spec, &mut params.clone(), &xm, mode).unwrap().output(),
                &coef,
            );
            let fd = (fp - fm) / (2.0 * H);
            let an = dx.row(r)[c];
            assert!(
                rel_err(fd, an) < TOL || (fd.abs() < 1e-7 && an.abs() < 1e-7),
                "input grad ({r},{c}): fd {fd} vs analytic {an}"
            );
        }
    }

    // Trainable parameter gradients.
    let names: Vec<String> = params
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.name.clone())
        .collect();
    for name in names {
        let count = params.get(&name).unwrap().data().len();
        for i in 0..count {
            let eval_at = |delta: f64, params: &Parameters| -> f64 {
                let mut p = params.clone();
                p.get_mut(&name).unwrap().data_mut()[i] += delta;
                objective(forward(spec, &mut p, &x, mode).unwrap().output(), &coef)
            };
            let fd = (eval_at(H, &params) - eval_at(-H, &params)) / (2.0 * H);
            let an = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            assert!(
                rel_err(fd, an) < TOL || (fd.abs() < 1e-7 && an.abs() < 1e-7),
                "param {name}[{i}]: fd {fd} vs analytic {an}"
            );
        }
    }
}

fn single(layer: LayerSpec, in_dim: usize) -> NetworkSpec {
    NetworkSpec::new(vec![layer], Role::FeatureExtractor, in_dim).unwrap()
}

#[test]
fn linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..INSTANCES {
        check_network(&single(LayerSpec::Linear { in_dim: 4, out_dim: 3 }, 4), &mut rng, 5, 5);
    }
}

#[test]
fn relu_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..INSTANCES {
        check_network(&single(LayerSpec::Relu, 4), &mut rng, 5, 5);
    }
}

#[test]
fn sigmoid_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..INSTANCES {
        check_network(&single(LayerSpec::Sigmoid, 4), &mut rng, 5, 5);
    }
}

#[test]
fn softmax_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for _ in 0..INSTANCES {
        check_network(&single(LayerSpec::Softmax, 4), &mut rng, 5, 5);
    }
}

#[test]
fn batchnorm_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..INSTANCES {
        check_network(&single(LayerSpec::batchnorm(4), 4), &mut rng, 6, 6);
    }
}

#[test]
fn da_layer_mixed_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for _ in 0..INSTANCES {
        // Mixed path including the rho gradient; 4 source + 4 target rows.
        check_network(&single(LayerSpec::da_layer(4), 4), &mut rng, 8, 4);
    }
}

#[test]
fn da_layer_pinned() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for _ in 0..INSTANCES {
        check_network(
            &single(
                LayerSpec::DaLayer {
                    dim: 4,
                    momentum: 0.1,
                    eps: 1e-5,
                    affine: true,
                    pin_alpha: Some(1.0),
                },
                4,
            ),
            &mut rng,
            8,
            4,
        );
    }
}

#[test]
fn composed_mlp_through_batchnorm() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::Linear { in_dim: 4, out_dim: 5 },
            LayerSpec::batchnorm(5),
            LayerSpec::Relu,
            LayerSpec::Linear { in_dim: 5, out_dim: 3 },
            LayerSpec::Sigmoid,
        ],
        Role::FeatureExtractor,
        4,
    )
    .unwrap();
    for _ in 0..INSTANCES / 4 {
        check_network(&spec, &mut rng, 6, 6);
    }
}

/// The reversal layer is identity forward, so finite differences must be
/// run on the branch objective itself: the analytic gradient through the
/// reversal equals -lambda times the true branch gradient.
#[test]
fn grad_reversal_saddle_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let lambda = 0.3;
    for _ in 0..INSTANCES {
        let with_grl = NetworkSpec::new(
            vec![
                LayerSpec::Linear { in_dim: 3, out_dim: 3 },
                LayerSpec::GradReversal { lambda },
                LayerSpec::Linear { in_dim: 3, out_dim: 1 },
                LayerSpec::Sigmoid,
            ],
            Role::DomainClassifier,
            3,
        )
        .unwrap();
        let mut params = Parameters::init(&with_grl, &mut rng);
        let x = rand_mat(&mut rng, 4, 3);
        let coef = rand_mat(&mut rng, 4, 1);
        let mode = Mode::Train { source_rows: 4 };
        let trace = forward(&with_grl, &mut params, &x, mode).unwrap();
        let (grads, _) = backward(&with_grl, &params, &trace, &coef, &[]).unwrap();

        // Finite differences of the raw branch objective on the feature
        // weights (the layer below the reversal).
        for name in ["l0.w", "l0.b"] {
            let count = params.get(name).unwrap().data().len();
            for i in 0..count {
                let eval_at = |delta: f64| -> f64 {
                    let mut p = params.clone();
                    p.get_mut(name).unwrap().data_mut()[i] += delta;
                    objective(forward(&with_grl, &mut p, &x, mode).unwrap().output(), &coef)
                };
                let fd = (eval_at(H) - eval_at(-H)) / (2.0 * H);
                let an = grads.get(name).map_or(0.0, |g| g.data()[i]);
                let expected = -lambda * fd;
                assert!(
                    rel_err(expected, an) < TOL || (expected.abs() < 1e-7 && an.abs() < 1e-7),
                    "{name}[{i}]: -lambda*fd {expected} vs analytic {an}"
                );
            }
        }
    }
}

#[test]
fn cross_entropy_logits_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let spec = single(LayerSpec::Softmax, 3);
    for _ in 0..INSTANCES {
        let logits = rand_mat(&mut rng, 4, 3);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let params = Parameters::init(&spec, &mut rng);
        let loss_of = |l: &Tensor| -> f64 {
            let t = forward(&spec, &mut params.clone(), l, Mode::EvalSource).unwrap();
            cross_entropy(t.output(), &labels).unwrap().0
        };
        let probs = forward(&spec, &mut params.clone(), &logits, Mode::EvalSource).unwrap();
        let (_, dlogits) = cross_entropy(probs.output(), &labels).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                let mut lp = logits.clone();
                lp.row_mut(r)[c] += H;
                let mut lm = logits.clone();
                lm.row_mut(r)[c] -= H;
                let fd = (loss_of(&lp) - loss_of(&lm)) / (2.0 * H);
                let an = dlogits.row(r)[c];
                assert!(rel_err(fd, an) < TOL, "({r},{c}): fd {fd} vs {an}");
            }
        }
    }
}

#[test]
fn entropy_logits_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let spec = single(LayerSpec::Softmax, 3);
    for _ in 0..INSTANCES {
        let logits = rand_mat(&mut rng, 4, 3);
        let params = Parameters::init(&spec, &mut rng);
        let loss_of = |l: &Tensor| -> f64 {
            let t = forward(&spec, &mut params.clone(), l, Mode::EvalSource).unwrap();
            entropy(t.output()).unwrap().0
        };
        let probs = forward(&spec, &mut params.clone(), &logits, Mode::EvalSource).unwrap();
        let (_, dlogits) = entropy(probs.output()).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                let mut lp = logits.clone();
                lp.row_mut(r)[c] += H;
                let mut lm = logits.clone();
                lm.row_mut(r)[c] -= H;
                let fd = (loss_of(&lp) - loss_of(&lm)) / (2.0 * H);
                let an = dlogits.row(r)[c];
                assert!(
                    rel_err(fd, an) < TOL || (fd.abs() < 1e-7 && an.abs() < 1e-7),
                    "({r},{c}): fd {fd} vs {an}"
                );
            }
        }
    }
}

#[test]
fn domain_bce_probability_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    for _ in 0..INSTANCES {
        let n = 6;
        let data: Vec<f64> = (0..n).map(|_| 0.05 + 0.9 * rng.gen::<f64>()).collect();
        let probs = Tensor::matrix(n, 1, data).unwrap();
        let labels: Vec<bool> = (0..n).map(|i| i >= n / 2).collect();
        let (_, dprobs) = domain_bce(&probs, &labels).unwrap();
        for r in 0..n {
            let mut pp = probs.clone();
            pp.row_mut(r)[0] += H;
            let mut pm = probs.clone();
            pm.row_mut(r)[0] -= H;
            let fd = (domain_bce(&pp, &labels).unwrap().0 - domain_bce(&pm, &labels).unwrap().0)
                / (2.0 * H);
            let an = dprobs.row(r)[0];
            assert!(rel_err(fd, an) < TOL, "row {r}: fd {fd} vs {an}");
        }
    }
}

#[test]
fn adversarial_nll_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    for _ in 0..INSTANCES {
        let n = 5;
        let data: Vec<f64> = (0..n).map(|_| 0.05 + 0.9 * rng.gen::<f64>()).collect();
        let probs = Tensor::matrix(n, 1, data).unwrap();
        for of_one in [true, false] {
            let (_, dprobs) = neg_log_likelihood(&probs, of_one).unwrap();
            for r in 0..n {
                let mut pp = probs.clone();
                pp.row_mut(r)[0] += H;
                let mut pm = probs.clone();
                pm.row_mut(r)[0] -= H;
                let fd = (neg_log_likelihood(&pp, of_one).unwrap().0
                    - neg_log_likelihood(&pm, of_one).unwrap().0)
                    / (2.0 * H);
                let an = dprobs.row(r)[0];
                assert!(rel_err(fd, an) < TOL, "of_one={of_one} row {r}: fd {fd} vs {an}");
            }
        }
    }
}

#[test]
fn mmd_linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(114);
    for _ in 0..INSTANCES {
        let bank = KernelBank::uniform(vec![0.5, 1.0, 2.0]).unwrap();
        let s = rand_mat(&mut rng, 4, 3);
        let t = rand_mat(&mut rng, 4, 3);
        let (_, gs, gt) = mmd_linear_with_grad(&bank, &s, &t).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                for (which, grad) in [(true, &gs), (false, &gt)] {
                    let perturb = |delta: f64| -> f64 {
                        let mut sp = s.clone();
                        let mut tp = t.clone();
                        if which {
                            sp.row_mut(r)[c] += delta;
                        } else {
                            tp.row_mut(r)[c] += delta;
                        }
                        mmd_linear(&bank, &sp, &tp).unwrap()
                    };
                    let fd = (perturb(H) - perturb(-H)) / (2.0 * H);
                    let an = grad.row(r)[c];
                    assert!(
                        rel_err(fd, an) < TOL || (fd.abs() < 1e-7 && an.abs() < 1e-7),
                        "slot {which} ({r},{c}): fd {fd} vs {an}"
                    );
                }
            }
        }
    }
}
