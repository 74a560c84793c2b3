//! One-vs-rest linear SVM trained by deterministic full-batch subgradient
//! descent on the L2-regularized hinge objective
//! J(w, b) = (1/(2C)) |w|^2 + mean_i max(0, 1 - y_i (w.x_i + b)).
//! The step size follows the 1/(lambda t) schedule with lambda = 1/C; the
//! reported model is the best iterate by objective, which keeps the
//! per-epoch objective trace non-increasing.

use shiftbench_core::tensor::Tensor;

use crate::error::{CueError, Result};
use crate::features::FeatureSet;

#[derive(Debug, Clone)]
pub struct SvmConfig {
    pub c: f64,
    pub epochs: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { c: 1.0, epochs: 50 }
    }
}

/// Per-class hyperplanes of a one-vs-rest linear SVM.
#[derive(Debug, Clone)]
pub struct SvmModel {
    /// One row per class.
    pub w: Tensor,
    pub b: Vec<f64>,
    pub c: f64,
}

impl SvmModel {
    pub fn n_classes(&self) -> usize {
        self.b.len()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }
}

/// Binary hinge objective for one hyperplane against +-1 labels.
pub fn svm_objective(w: &[f64], b: f64, x: &Tensor, y: &[f64], c: f64) -> f64 {
    let reg: f64 = w.iter().map(|v| v * v).sum::<f64>() / (2.0 * c);
    let n = x.rows();
    let mut hinge = 0.0;
    for i in 0..n {
        let s: f64 = w.iter().zip(x.row(i)).map(|(a, v)| a * v).sum::<f64>() + b;
        hinge += (1.0 - y[i] * s).max(0.0);
    }
    reg + hinge / n as f64
}

/// Full-batch subgradient of the binary hinge objective; the bias is
/// unregularized.
pub fn svm_subgradient(w: &[f64], b: f64, x: &Tensor, y: &[f64], c: f64) -> (Vec<f64>, f64) {
    let n = x.rows();
    let nf = n as f64;
    let mut gw: Vec<f64> = w.iter().map(|v| v / c).collect();
    let mut gb = 0.0;
    for i in 0..n {
        let s: f64 = w.iter().zip(x.row(i)).map(|(a, v)| a * v).sum::<f64>() + b;
        if y[i] * s < 1.0 {
            for (g, &v) in gw.iter_mut().zip(x.row(i)) {
                *g -= y[i] * v / nf;
            }
            gb -= y[i] / nf;
        }
    }
    (gw, gb)
}

/// Train one-vs-rest hyperplanes. Deterministic: zero initialization and
/// full-batch updates, so duplicated samples leave the solution unchanged.
pub fn svm_train(features: &FeatureSet, labels: &[usize], config: &SvmConfig) -> Result<SvmModel> {
    let n = features.len();
    if labels.len() != n {
        return Err(CueError::InvalidArgument("label count != feature rows".into()));
    }
    if config.c <= 0.0 {
        return Err(CueError::InvalidArgument("C must be positive".into()));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(CueError::InvalidArgument("need at least 2 classes".into()));
    }
    let d = features.features.cols();
    let lambda = 1.0 / config.c;
    let mut w_all = Tensor::zeros(vec![classes, d]);
    let mut b_all = vec![0.0; classes];
    for z in 0..classes {
        let y: Vec<f64> = labels.iter().map(|&l| if l == z { 1.0 } else { -1.0 }).collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut best = (svm_objective(&w, b, &features.features, &y, config.c), w.clone(), b);
        for t in 1..=config.epochs {
            let (gw, gb) = svm_subgradient(&w, b, &features.features, &y, config.c);
            let step = 1.0 / (lambda * t as f64);
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= step * gi;
            }
            b -= step * gb;
            let obj = svm_objective(&w, b, &features.features, &y, config.c);
            if obj < best.0 {
                best = (obj, w.clone(), b);
            }
        }
        w_all.row_mut(z).copy_from_slice(&best.1);
        b_all[z] = best.2;
    }
    Ok(SvmModel { w: w_all, b: b_all, c: config.c })
}

/// Predicted labels and the per-class score matrix; ties break to the
/// lowest class index.
pub fn svm_predict(model: &SvmModel, features: &FeatureSet) -> Result<(Vec<usize>, Tensor)> {
    if features.features.cols() != model.dim() {
        return Err(CueError::InvalidArgument(format!(
            "feature dim {} != model dim {}",
            features.features.cols(),
            model.dim()
        )));
    }
    let n = features.len();
    let k = model.n_classes();
    let mut scores = Tensor::zeros(vec![n, k]);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let xi = features.features.row(i);
        let mut best = 0usize;
        for z in 0..k {
            let s: f64 =
                model.w.row(z).iter().zip(xi).map(|(a, v)| a * v).sum::<f64>() + model.b[z];
            scores.row_mut(i)[z] = s;
            if s > scores.row(i)[best] {
                best = z;
            }
        }
        labels.push(best);
    }
    Ok((labels, scores))
}

pub fn svm_accuracy(model: &SvmModel, features: &FeatureSet, labels: &[usize]) -> Result<f64> {
    let (pred, _) = svm_predict(model, features)?;
    let correct = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Cue;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob_set(n: usize, seed: u64, margin: f64) -> (FeatureSet, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let cx = if c == 0 { -margin } else { margin };
            data.push(cx + rng.gen::<f64>() - 0.5);
            data.push(rng.gen::<f64>() - 0.5);
            labels.push(c);
        }
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        (
            FeatureSet::new(Tensor::matrix(n, 2, data).unwrap(), Cue::Rgb, ids).unwrap(),
            labels,
        )
    }

    #[test]
    fn separable_blobs_perfect_train_accuracy() {
        let (fs, y) = blob_set(200, 1, 2.0);
        let model = svm_train(&fs, &y, &SvmConfig::default()).unwrap();
        assert_eq!(svm_accuracy(&model, &fs, &y).unwrap(), 1.0);
    }

    #[test]
    fn weights_shrink_with_smaller_c() {
        let (fs, y) = blob_set(100, 2, 1.0);
        let mut prev = f64::INFINITY;
        for &c in &[1.0, 0.1, 0.01, 0.001] {
            let model = svm_train(&fs, &y, &SvmConfig { c, epochs: 50 }).unwrap();
            let norm: f64 = model.w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= prev + 1e-9, "C={c}: |w| {norm} > previous {prev}");
            prev = norm;
        }
    }

    #[test]
    fn duplicated_samples_same_decision_function() {
        let (fs, y) = blob_set(60, 3, 1.5);
        let model1 = svm_train(&fs, &y, &SvmConfig::default()).unwrap();
        let idx: Vec<usize> = (0..fs.len()).chain(0..fs.len()).collect();
        let doubled = fs.select(&idx).unwrap();
        let mut y2 = y.clone();
        y2.extend_from_slice(&y);
        let model2 = svm_train(&doubled, &y2, &SvmConfig::default()).unwrap();
        for (a, b) in model1.w.data().iter().zip(model2.w.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in model1.b.iter().zip(&model2.b) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn objective_of_best_iterate_non_increasing() {
        let (fs, y) = blob_set(80, 4, 0.8);
        let yb: Vec<f64> = y.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let lambda = 1.0;
        let mut w = vec![0.0; 2];
        let mut b = 0.0;
        let mut best = svm_objective(&w, b, &fs.features, &yb, 1.0);
        let mut trace = vec![best];
        for t in 1..=50 {
            let (gw, gb) = svm_subgradient(&w, b, &fs.features, &yb, 1.0);
            let step = 1.0 / (lambda * t as f64);
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= step * gi;
            }
            b -= step * gb;
            best = best.min(svm_objective(&w, b, &fs.features, &yb, 1.0));
            trace.push(best);
        }
        for pair in trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn zero_vector_predicts_largest_bias() {
        let model = SvmModel {
            w: Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap(),
            b: vec![0.1, 0.9, 0.5],
            c: 1.0,
        };
        let fs = FeatureSet::new(
            Tensor::zeros(vec![1, 2]),
            Cue::Rgb,
            vec!["z".into()],
        )
        .unwrap();
        let (pred, _) = svm_predict(&model, &fs).unwrap();
        assert_eq!(pred, vec![1]);
    }

    #[test]
    fn scaling_model_keeps_argmax() {
        let (fs, y) = blob_set(40, 5, 1.0);
        let model = svm_train(&fs, &y, &SvmConfig::default()).unwrap();
        let (pred1, _) = svm_predict(&model, &fs).unwrap();
        let mut scaled = model.clone();
        scaled.w.scale(2.0);
        for b in scaled.b.iter_mut() {
            *b *= 2.0;
        }
        let (pred2, _) = svm_predict(&scaled, &fs).unwrap();
        assert_eq!(pred1, pred2);
        let _ = y;
    }

    #[test]
    fn tie_breaks_to_lowest_class() {
        let model = SvmModel {
            w: Tensor::zeros(vec![3, 2]),
            b: vec![0.5, 0.5, 0.5],
            c: 1.0,
        };
        let fs = FeatureSet::new(
            Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(),
            Cue::Rgb,
            vec!["t".into()],
        )
        .unwrap();
        let (pred, _) = svm_predict(&model, &fs).unwrap();
        assert_eq!(pred, vec![0]);
    }

    #[test]
    fn single_class_rejected() {
        let fs = FeatureSet::new(
            Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap(),
            Cue::Rgb,
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert!(svm_train(&fs, &[0, 0], &SvmConfig::default()).is_err());
    }

    #[test]
    fn hinge_subgradient_matches_finite_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n = 8;
            let d = 3;
            let data: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let x = Tensor::matrix(n, d, data).unwrap();
            let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let b = rng.gen::<f64>() - 0.5;
            // Skip instances with a margin too close to the hinge kink.
            let near_kink = (0..n).any(|i| {
                let s: f64 = w.iter().zip(x.row(i)).map(|(a, v)| a * v).sum::<f64>() + b;
                (1.0 - y[i] * s).abs() < 1e-3
            });
            if near_kink {
                continue;
            }
            let (gw, gb) = svm_subgradient(&w, b, &x, &y, 1.0);
            let h = 1e-6;
            for j in 0..d {
                let mut wp = w.clone();
                wp[j] += h;
                let mut wm = w.clone();
                wm[j] -= h;
                let fd = (svm_objective(&wp, b, &x, &y, 1.0)
                    - svm_objective(&wm, b, &x, &y, 1.0))
                    / (2.0 * h);
                assert!(
                    (fd - gw[j]).abs() / fd.abs().max(gw[j].abs()).max(1e-8) < 1e-5,
                    "w[{j}]: fd {fd} vs {q}",
                    q = gw[j]
                );
            }
            let fd = (svm_objective(&w, b + h, &x, &y, 1.0)
                - svm_objective(&w, b - h, &x, &y, 1.0))
                / (2.0 * h);
            assert!(
                (fd - gb).abs() / fd.abs().max(gb.abs()).max(1e-8) < 1e-5
                    || (fd.abs() < 1e-7 && gb.abs() < 1e-7)
            );
        }
    }

    #[test]
    fn objective_close_to_grid_oracle_on_2d_toy() {
        let (fs, y) = blob_set(40, 7, 1.0);
        let yb: Vec<f64> = y.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let model = svm_train(&fs, &y, &SvmConfig { c: 1.0, epochs: 200 }).unwrap();
        let trained = svm_objective(model.w.row(1), model.b[1], &fs.features, &yb, 1.0);
        // Coarse-to-fine grid over (w0, w1, b).
        let mut center = (0.0, 0.0, 0.0);
        let mut span = 3.0;
        let mut best = f64::INFINITY;
        for _ in 0..6 {
            let steps = 12;
            let mut next = center;
            for i in 0..=steps {
                for j in 0..=steps {
                    for k in 0..=steps {
                        let w0 = center.0 - span + 2.0 * span * i as f64 / steps as f64;
                        let w1 = center.1 - span + 2.0 * span * j as f64 / steps as f64;
                        let bb = center.2 - span + 2.0 * span * k as f64 / steps as f64;
                        let obj = svm_objective(&[w0, w1], bb, &fs.features, &yb, 1.0);
                        if obj < best {
                            best = obj;
                            next = (w0, w1, bb);
                        }
                    }
                }
            }
            center = next;
            span /= 4.0;
        }
        assert!(
            trained <= best * 1.01 + 1e-9,
            "trained objective {trained} not within 1% of grid oracle {best}"
        );
    }
}
