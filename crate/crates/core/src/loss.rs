//! Loss functions and their gradients.
//!
//! Cross-entropy is fused with the final softmax: the returned gradient is
//! taken with respect to the pre-softmax logits, `probs - onehot`, averaged
//! over the batch. Entropy and domain BCE return gradients in probability
//! space; helpers push them through a softmax where needed.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-12;

fn check_rows_sum_to_one(probs: &Tensor) -> Result<()> {
    for r in 0..probs.rows() {
        let s: f64 = probs.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(CoreError::InvalidArgument(format!(
                "probability row {r} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the labels under `probs`, and the
/// gradient with respect to the pre-softmax logits.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = (probs.rows(), probs.cols());
    if labels.len() != n {
        return Err(CoreError::InvalidArgument("label count != batch rows".into()));
    }
    check_rows_sum_to_one(probs)?;
    let nf = n as f64;
    let mut loss = 0.0;
    let mut dlogits = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(CoreError::LabelOutOfRange { label: y, classes: k });
        }
        loss -= probs.row(r)[y].max(PROB_FLOOR).ln();
        let row = dlogits.row_mut(r);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= nf;
        }
    }
    Ok((loss / nf, dlogits))
}

/// Mean Shannon entropy of the prediction rows, and its gradient with
/// respect to the pre-softmax logits (0 * log 0 := 0).
pub fn entropy(probs: &Tensor) -> Result<(f64, Tensor)> {
    check_rows_sum_to_one(probs)?;
    let (n, k) = (probs.rows(), probs.cols());
    let nf = n as f64;
    let mut h = 0.0;
    let mut dprobs = Tensor::zeros(vec![n, k]);
    for r in 0..n {
        for j in 0..k {
            let p = probs.row(r)[j];
            if p > 0.0 {
                let lp = p.max(PROB_FLOOR).ln();
                h -= p * lp;
                dprobs.row_mut(r)[j] = -(lp + 1.0) / nf;
            } else {
                dprobs.row_mut(r)[j] = -(PROB_FLOOR.ln() + 1.0) / nf;
            }
        }
    }
    // Push through the softmax Jacobian so the result is a logits gradient.
    let mut dlogits = Tensor::zeros(vec![n, k]);
    for r in 0..n {
        let pr = probs.row(r);
        let gr = dprobs.row(r);
        let s = crate::tensor::dot(gr, pr);
        for j in 0..k {
            dlogits.row_mut(r)[j] = pr[j] * (gr[j] - s);
        }
    }
    Ok((h / nf, dlogits))
}

/// Binary cross-entropy averaged per domain: mean over source rows plus
/// mean over target rows, as in the DANN domain regularizer. `probs` is a
/// column of sigmoid outputs; `labels[i]` is the domain of row `i`
/// (false = source, true = target). Returns the loss and its gradient with
/// respect to the probabilities.
pub fn domain_bce(probs: &Tensor, labels: &[bool]) -> Result<(f64, Tensor)> {
    let n = probs.rows();
    if probs.cols() != 1 {
        return Err(CoreError::Shape("domain probabilities must be a column".into()));
    }
    if labels.len() != n {
        return Err(CoreError::InvalidArgument("label count != batch rows".into()));
    }
    let n_t = labels.iter().filter(|&&d| d).count();
    let n_s = n - n_t;
    if n_s == 0 || n_t == 0 {
        return Err(CoreError::InvalidArgument("domain BCE needs both domains".into()));
    }
    let (nsf, ntf) = (n_s as f64, n_t as f64);
    let mut loss = 0.0;
    let mut dprobs = Tensor::zeros(vec![n, 1]);
    for (r, &is_target) in labels.iter().enumerate() {
        let p = probs.row(r)[0].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let w = if is_target { 1.0 / ntf } else { 1.0 / nsf };
        if is_target {
            loss -= w * p.ln();
            dprobs.row_mut(r)[0] = -w / p;
        } else {
            loss -= w * (1.0 - p).ln();
            dprobs.row_mut(r)[0] = w / (1.0 - p);
        }
    }
    Ok((loss, dprobs))
}

/// `-mean log p` over a column of probabilities, with its gradient; the
/// building block of the ADDA adversarial losses.
pub fn neg_log_likelihood(probs: &Tensor, of_one: bool) -> Result<(f64, Tensor)> {
    let n = probs.rows();
    if probs.cols() != 1 {
        return Err(CoreError::Shape("probabilities must be a column".into()));
    }
    let nf = n as f64;
    let mut loss = 0.0;
    let mut dprobs = Tensor::zeros(vec![n, 1]);
    for r in 0..n {
        let p = probs.row(r)[0].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        if of_one {
            loss -= p.ln() / nf;
            dprobs.row_mut(r)[0] = -1.0 / (p * nf);
        } else {
            loss -= (1.0 - p).ln() / nf;
            dprobs.row_mut(r)[0] = 1.0 / ((1.0 - p) * nf);
        }
    }
    Ok((loss, dprobs))
}

/// Classification accuracy of probability rows against labels.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        let row = probs.row(r);
        let mut best = 0usize;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}
