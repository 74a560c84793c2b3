//! Multi-kernel maximum mean discrepancy: Gaussian kernel bank, linear-time
//! unbiased estimator over quad-tuples, quadratic U-statistic oracle,
//! estimation covariance, the kernel-weight QP, and the DAN trainer that
//! ties them to the classifier risk.

use crate::error::{CoreError, Result};
use crate::net::{forward, Mode, NetworkSpec, Parameters};
use crate::optim::OptimizerState;
use crate::tensor::{sq_dist, Tensor};
use crate::train::{
    eval_accuracy, fused_ce_backward, half_batch, stream_rng, train_forward, EpochMetrics,
    LabeledSet, Shuffler, Stream, TrainLog,
};

/// Bank of Gaussian kernels k_u(x, y) = exp(-|x - y|^2 / gamma_u) combined
/// with simplex weights beta_u.
#[derive(Debug, Clone)]
pub struct KernelBank {
    gammas: Vec<f64>,
    betas: Vec<f64>,
}

impl KernelBank {
    pub fn new(gammas: Vec<f64>, betas: Vec<f64>) -> Result<Self> {
        if gammas.is_empty() || gammas.len() != betas.len() {
            return Err(CoreError::InvalidArgument("kernel bank size mismatch".into()));
        }
        if gammas.iter().any(|&g| g <= 0.0) {
            return Err(CoreError::InvalidArgument("bandwidths must be positive".into()));
        }
        if betas.iter().any(|&b| b < 0.0) {
            return Err(CoreError::InvalidArgument("negative kernel weight".into()));
        }
        let s: f64 = betas.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidArgument(format!("weights sum to {s}, not 1")));
        }
        Ok(KernelBank { gammas, betas })
    }

    pub fn uniform(gammas: Vec<f64>) -> Result<Self> {
        let m = gammas.len();
        let betas = vec![1.0 / m as f64; m];
        KernelBank::new(gammas, betas)
    }

    /// Median pairwise squared-distance heuristic scaled by
    /// {1/4, 1/2, 1, 2, 4}; the scale of the data picks the center.
    pub fn median_heuristic(rows: &Tensor) -> Result<Self> {
        let n = rows.rows().min(256);
        let mut dists = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                dists.push(sq_dist(rows.row(i), rows.row(j)));
            }
        }
        if dists.is_empty() {
            return Err(CoreError::InvalidArgument("need at least 2 rows".into()));
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = dists[dists.len() / 2].max(1e-12);
        KernelBank::uniform(vec![med / 4.0, med / 2.0, med, med * 2.0, med * 4.0])
    }

    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn set_betas(&mut self, betas: Vec<f64>) -> Result<()> {
        *self = KernelBank::new(self.gammas.clone(), betas)?;
        Ok(())
    }

    /// Combined kernel value for one pair.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2 = sq_dist(x, y);
        self.gammas
            .iter()
            .zip(&self.betas)
            .map(|(&g, &b)| b * (-d2 / g).exp())
            .sum()
    }
}

/// Single Gaussian kernel exp(-|x - y|^2 / gamma).
pub fn gaussian_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(CoreError::Shape("kernel arguments differ in length".into()));
    }
    if gamma <= 0.0 {
        return Err(CoreError::InvalidArgument("gamma must be positive".into()));
    }
    Ok((-sq_dist(x, y) / gamma).exp())
}

/// g_k(z) for one quad-tuple: the two within-domain kernel values minus the
/// two cross-domain ones.
fn g_tuple(bank: &KernelBank, s1: &[f64], s2: &[f64], t1: &[f64], t2: &[f64]) -> f64 {
    bank.eval(s1, s2) + bank.eval(t1, t2) - bank.eval(s1, t2) - bank.eval(s2, t1)
}

/// Linear-time unbiased MK-MMD estimate: (2/n) * sum over quad-tuples of
/// g_k, with gradients with respect to the source and target rows.
pub fn mmd_linear_with_grad(
    bank: &KernelBank,
    source: &Tensor,
    target: &Tensor,
) -> Result<(f64, Tensor, Tensor)> {
    let n = source.rows();
    if n != target.rows() || n % 2 != 0 {
        return Err(CoreError::InvalidArgument(
            "linear MMD needs equal even source/target counts".into(),
        ));
    }
    if n < 2 {
        return Err(CoreError::InvalidArgument("need at least 2 samples per domain".into()));
    }
    if source.cols() != target.cols() {
        return Err(CoreError::Shape("source/target feature widths differ".into()));
    }
    let d = source.cols();
    let scale = 2.0 / n as f64;
    let mut total = 0.0;
    let mut gs = Tensor::zeros(vec![n, d]);
    let mut gt = Tensor::zeros(vec![n, d]);
    for i in 0..n / 2 {
        let (a, b) = (2 * i, 2 * i + 1);
        total += g_tuple(bank, source.row(a), source.row(b), target.row(a), target.row(b));
        // d k(x, y)/dx = sum_u beta_u exp(-d2/g) * (-2/g) (x - y)
        let mut add = |xi: usize, yi: usize, xs: bool, ys: bool, sign: f64| {
            let x = if xs { source.row(xi) } else { target.row(xi) };
            let y = if ys { source.row(yi) } else { target.row(yi) };
            let d2 = sq_dist(x, y);
            let coeff: f64 = bank
                .gammas
                .iter()
                .zip(&bank.betas)
                .map(|(&g, &bb)| bb * (-d2 / g).exp() * (-2.0 / g))
                .sum();
            for j in 0..d {
                let dv = sign * scale * coeff * (x[j] - y[j]);
                if xs {
                    gs.row_mut(xi)[j] += dv;
                } else {
                    gt.row_mut(xi)[j] += dv;
                }
                if ys {
                    gs.row_mut(yi)[j] -= dv;
                } else {
                    gt.row_mut(yi)[j] -= dv;
                }
            }
        };
        add(a, b, true, true, 1.0); // k(s1, s2)
        add(a, b, false, false, 1.0); // k(t1, t2)
        add(a, b, true, false, -1.0); // k(s1, t2)
        add(b, a, true, false, -1.0); // k(s2, t1)
    }
    Ok((scale * total, gs, gt))
}

pub fn mmd_linear(bank: &KernelBank, source: &Tensor, target: &Tensor) -> Result<f64> {
    mmd_linear_with_grad(bank, source, target).map(|(v, _, _)| v)
}

/// Per-kernel g-values over quad-tuples, for the covariance Q and for the
/// per-kernel MMDs d_u.
pub fn g_values_per_kernel(
    bank: &KernelBank,
    source: &Tensor,
    target: &Tensor,
) -> Result<Vec<Vec<f64>>> {
    let n = source.rows();
    if n != target.rows() || n % 2 != 0 || n < 4 {
        return Err(CoreError::InvalidArgument(
            "per-kernel g-values need equal even counts >= 4".into(),
        ));
    }
    let mut out = vec![Vec::with_capacity(n / 2); bank.len()];
    for i in 0..n / 2 {
        let (a, b) = (2 * i, 2 * i + 1);
        for (u, &gamma) in bank.gammas.iter().enumerate() {
            let single = KernelBank { gammas: vec![gamma], betas: vec![1.0] };
            out[u].push(g_tuple(
                &single,
                source.row(a),
                source.row(b),
                target.row(a),
                target.row(b),
            ));
        }
    }
    Ok(out)
}

/// Quadratic-time unbiased U-statistic MMD^2 over all pairs; the
/// independent oracle for the linear estimator.
pub fn mmd_quadratic_oracle(bank: &KernelBank, source: &Tensor, target: &Tensor) -> Result<f64> {
    let (m, n) = (source.rows(), target.rows());
    if m < 2 || n < 2 {
        return Err(CoreError::InvalidArgument("need at least 2 samples per domain".into()));
    }
    let mut kss = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kss += bank.eval(source.row(i), source.row(j));
            }
        }
    }
    let mut ktt = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                ktt += bank.eval(target.row(i), target.row(j));
            }
        }
    }
    let mut kst = 0.0;
    for i in 0..m {
        for j in 0..n {
            kst += bank.eval(source.row(i), target.row(j));
        }
    }
    Ok(kss / (m * (m - 1)) as f64 + ktt / (n * (n - 1)) as f64
        - 2.0 * kst / (m * n) as f64)
}

/// Covariance of g over consecutive tuple pairs:
/// Q_{uu'} = (4/n_s) * sum_i gd_u(i) gd_{u'}(i) with gd the difference of
/// consecutive tuples' g-values and n_s the source sample count.
pub fn variance_q(g_per_kernel: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let m = g_per_kernel.len();
    let tuples = g_per_kernel.first().map_or(0, |g| g.len());
    if tuples < 2 {
        return Err(CoreError::InvalidArgument("need at least 2 quad-tuples".into()));
    }
    let n_s = 2 * tuples; // each tuple consumes two source samples
    let pairs = tuples / 2;
    let mut deltas = vec![Vec::with_capacity(pairs); m];
    for (u, gs) in g_per_kernel.iter().enumerate() {
        if gs.len() != tuples {
            return Err(CoreError::InvalidArgument("ragged g-value lists".into()));
        }
        for i in 0..pairs {
            deltas[u].push(gs[2 * i] - gs[2 * i + 1]);
        }
    }
    let scale = 4.0 / n_s as f64;
    let mut q = vec![vec![0.0; m]; m];
    for u in 0..m {
        for v in u..m {
            let s: f64 = deltas[u].iter().zip(&deltas[v]).map(|(a, b)| a * b).sum();
            q[u][v] = scale * s;
            q[v][u] = q[u][v];
        }
    }
    Ok(q)
}

/// Solve min beta^T (Q + eps I) beta subject to d^T beta = 1, beta >= 0 by
/// exhaustive active-set enumeration (m <= 8), then rescale the solution to
/// the simplex for use as kernel weights. Returns (simplex betas, raw QP
/// solution). Falls back to uniform weights when no kernel separates the
/// domains (all d_u <= 0).
pub fn beta_qp(d: &[f64], q: &[Vec<f64>], eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = d.len();
    if m == 0 || q.len() != m || q.iter().any(|r| r.len() != m) {
        return Err(CoreError::InvalidArgument("QP dimensions mismatch".into()));
    }
    if m > 16 {
        return Err(CoreError::InvalidArgument("active-set enumeration capped at m=16".into()));
    }
    if d.iter().all(|&v| v <= 0.0) {
        let uni = vec![1.0 / m as f64; m];
        return Ok((uni.clone(), uni));
    }
    // A = Q + eps I
    let mut a = q.to_vec();
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += eps;
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut best_kkt: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << m) {
        let free: Vec<usize> = (0..m).filter(|&i| mask & (1 << i) != 0).collect();
        // Equality-constrained subproblem on the free coordinates:
        // x = A_FF^{-1} d_F / (d_F^T A_FF^{-1} d_F).
        let k = free.len();
        let mut aff = vec![vec![0.0; k]; k];
        for (ri, &i) in free.iter().enumerate() {
            for (ci, &j) in free.iter().enumerate() {
                aff[ri][ci] = a[i][j];
            }
        }
        let df: Vec<f64> = free.iter().map(|&i| d[i]).collect();
        let sol = match solve_linear(&aff, &df) {
            Some(s) => s,
            None => continue,
        };
        let denom: f64 = df.iter().zip(&sol).map(|(a, b)| a * b).sum();
        if denom.abs() < 1e-14 {
            continue;
        }
        let xf: Vec<f64> = sol.iter().map(|v| v / denom).collect();
        if xf.iter().any(|&v| v < -1e-10) {
            continue;
        }
        let mut x = vec![0.0; m];
        for (ri, &i) in free.iter().enumerate() {
            x[i] = xf[ri].max(0.0);
        }
        let obj = quad_form(&a, &x);
        // nu from any free coordinate's stationarity: 2(Ax)_i = nu d_i.
        let ax = matvec(&a, &x);
        let &i0 = free
            .iter()
            .find(|&&i| d[i].abs() > 1e-12)
            .unwrap_or(&free[0]);
        let nu = if d[i0].abs() > 1e-12 { 2.0 * ax[i0] / d[i0] } else { 0.0 };
        // KKT: active coordinates need multiplier mu_i = 2(Ax)_i - nu d_i >= 0.
        let kkt_ok = (0..m)
            .filter(|i| mask & (1 << i) == 0)
            .all(|i| 2.0 * ax[i] - nu * d[i] >= -1e-8);
        if best.as_ref().is_none_or(|(o, _)| obj < *o) {
            best = Some((obj, x.clone()));
        }
        if kkt_ok && best_kkt.as_ref().is_none_or(|(o, _)| obj < *o) {
            best_kkt = Some((obj, x));
        }
    }
    // No subset yields a well-conditioned solution when every positive d_u
    // is numerically zero (domains already aligned); treat like the
    // non-separating case.
    let (_, raw) = match best_kkt.or(best) {
        Some(b) => b,
        None => {
            let uni = vec![1.0 / m as f64; m];
            return Ok((uni.clone(), uni));
        }
    };
    let s: f64 = raw.iter().sum();
    let simplex = if s > 0.0 {
        raw.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / m as f64; m]
    };
    Ok((simplex, raw))
}

fn quad_form(a: &[Vec<f64>], x: &[f64]) -> f64 {
    let ax = matvec(a, x);
    x.iter().zip(&ax).map(|(v, w)| v * w).sum()
}

fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum()).collect()
}

/// Dense solve with partial pivoting; None when singular.
fn solve_linear(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let (piv, pval) = (col..n)
            .map(|r| (r, m[r][col].abs()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())?;
        if pval < 1e-14 {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in (col + 1)..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = rhs[r];
        for c in (r + 1)..n {
            s -= m[r][c] * x[c];
        }
        x[r] = s / m[r][r];
    }
    Some(x)
}

/// Configuration of a DAN run.
#[derive(Debug, Clone)]
pub struct DanConfig {
    /// Activation indices (see `NetworkSpec::activation_of`) the MMD
    /// penalty attaches to. Empty = last hidden activation + output logits.
    pub adapted_activations: Vec<usize>,
    /// MK-MMD penalty weight.
    pub lambda: f64,
    /// Kernel-weight re-optimization cadence in iterations; 0 = once per epoch.
    pub beta_cadence: usize,
    /// QP regularizer.
    pub qp_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for DanConfig {
    fn default() -> Self {
        DanConfig {
            adapted_activations: Vec::new(),
            lambda: 1.0,
            beta_cadence: 0,
            qp_eps: 1e-3,
            epochs: 30,
            batch_size: 64,
        }
    }
}

/// Default adapted representations for the toy MLP: the last hidden
/// activation and the output logits.
pub fn default_adapted_activations(spec: &NetworkSpec) -> Vec<usize> {
    let n = spec.n_layers();
    // logits feed the final softmax; the relu before the last linear is the
    // last hidden representation.
    vec![n.saturating_sub(2), n.saturating_sub(1)]
}

/// DAN training: cross-entropy on source plus lambda * MK-MMD on the
/// adapted representations, with kernel weights re-optimized by the QP at
/// the configured cadence.
pub fn dan_train(
    spec: &NetworkSpec,
    params: &mut Parameters,
    source: &LabeledSet,
    target: &Tensor,
    target_eval: Option<&LabeledSet>,
    config: &DanConfig,
    opt: &mut OptimizerState,
    seed: u64,
) -> Result<TrainLog> {
    let half = half_batch(config.batch_size);
    let mut src_shuffler = Shuffler::new(source.len(), stream_rng(seed, Stream::SourceBatches));
    let steps = (source.len() / half).max(1);
    let mut log = TrainLog::default();

    if config.lambda == 0.0 {
        // Degenerate case: identical to the source-only baseline.
        for epoch in 0..config.epochs {
            let mut loss_sum = 0.0;
            for _ in 0..steps {
                let idx = src_shuffler.draw(half);
                let batch = source.select(&idx);
                loss_sum += crate::train::supervised_step(spec, params, &batch, opt)?;
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
        return Ok(log);
    }

    let adapted = if config.adapted_activations.is_empty() {
        default_adapted_activations(spec)
    } else {
        config.adapted_activations.clone()
    };
    for &a in &adapted {
        if a == 0 || a > spec.n_layers() {
            return Err(CoreError::InvalidArgument(format!("adapted activation {a} out of range")));
        }
    }
    let mut tgt_shuffler = Shuffler::new(target.rows(), stream_rng(seed, Stream::TargetBatches));

    // Per-layer kernel banks from the representations of the first batches.
    let mut banks: Vec<KernelBank> = {
        let si = src_shuffler.draw(half);
        let ti = tgt_shuffler.draw(half);
        let x = stack_batch(source, &si, target, &ti)?;
        let trace = forward(spec, params, &x, Mode::Train { source_rows: half })?;
        adapted
            .iter()
            .map(|&a| KernelBank::median_heuristic(&trace.activations[a]))
            .collect::<Result<_>>()?
    };

    let mut iter_in_epoch;
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut mmd_sums = vec![0.0; adapted.len()];
        iter_in_epoch = 0usize;
        for _ in 0..steps {
            let si = src_shuffler.draw(half);
            let ti = tgt_shuffler.draw(half);
            let batch = source.select(&si);
            let x = stack_batch(source, &si, target, &ti)?;
            let trace = train_forward(spec, params, &x, half, opt.iteration)?;
            let mut taps = Vec::with_capacity(adapted.len());
            let mut mmd_total = 0.0;
            for (li, &a) in adapted.iter().enumerate() {
                let h = &trace.activations[a];
                let hs = h.slice_rows(0, half);
                let ht = h.slice_rows(half, h.rows());
                let (v, gs, gt) = mmd_linear_with_grad(&banks[li], &hs, &ht)?;
                mmd_sums[li] += v;
                mmd_total += v;
                let mut tap = Tensor::vcat(&gs, &gt)?;
                tap.scale(config.lambda);
                taps.push((a, tap));
            }
            let (ce, grads) =
                fused_ce_backward(spec, params, &trace, &batch.y, None, &taps)?;
            let loss = ce + config.lambda * mmd_total;
            if !loss.is_finite() {
                return Err(CoreError::Diverged {
                    iteration: opt.iteration,
                    what: "DAN objective".into(),
                });
            }
            loss_sum += loss;
            opt.step(params, &grads)?;
            iter_in_epoch += 1;
            if config.beta_cadence > 0 && iter_in_epoch % config.beta_cadence == 0 {
                update_betas(spec, params, source, target, &adapted, &mut banks, config, seed)?;
            }
        }
        if config.beta_cadence == 0 {
            update_betas(spec, params, source, target, &adapted, &mut banks, config, seed)?;
        }
        let source_acc = eval_accuracy(spec, params, source, Mode::EvalSource)?;
        let target_acc = match target_eval {
            Some(t) => eval_accuracy(spec, params, t, Mode::EvalTarget)?,
            None => f64::NAN,
        };
        log.epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / steps as f64,
            mmd_per_layer: mmd_sums.iter().map(|s| s / steps as f64).collect(),
            source_acc,
            target_acc,
            ..Default::default()
        });
    }
    Ok(log)
}

fn stack_batch(
    source: &LabeledSet,
    si: &[usize],
    target: &Tensor,
    ti: &[usize],
) -> Result<Tensor> {
    let mut rows: Vec<&[f64]> = si.iter().map(|&i| source.x.row(i)).collect();
    rows.extend(ti.iter().map(|&i| target.row(i)));
    Tensor::from_rows(&rows)
}

/// Re-optimize the kernel weights of each adapted layer from per-kernel
/// MMDs and their covariance on a fixed evaluation slice of both domains.
#[allow(clippy::too_many_arguments)]
fn update_betas(
    spec: &NetworkSpec,
    params: &mut Parameters,
    source: &LabeledSet,
    target: &Tensor,
    adapted: &[usize],
    banks: &mut [KernelBank],
    config: &DanConfig,
    _seed: u64,
) -> Result<()> {
    let n = source.len().min(target.rows()).min(256) & !3;
    if n < 4 {
        return Ok(());
    }
    let src = source.x.slice_rows(0, n);
    let tgt = target.slice_rows(0, n);
    let x = Tensor::vcat(&src, &tgt)?;
    let trace = forward(spec, params, &x, Mode::Train { source_rows: n })?;
    for (li, &a) in adapted.iter().enumerate() {
        let h = &trace.activations[a];
        let hs = h.slice_rows(0, n);
        let ht = h.slice_rows(n, h.rows());
        let g = g_values_per_kernel(&banks[li], &hs, &ht)?;
        let d: Vec<f64> = g
            .iter()
            .map(|gu| 2.0 * gu.iter().sum::<f64>() / (2 * gu.len()) as f64)
            .collect();
        let q = variance_q(&g)?;
        let (betas, _) = beta_qp(&d, &q, config.qp_eps)?;
        banks[li].set_betas(betas)?;
    }
    Ok(())
}
