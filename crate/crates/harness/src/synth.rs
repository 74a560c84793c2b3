//! Seeded synthetic shift datasets: desk-scale stand-ins for a real
//! source/target dataset pair sharing a generative process up to a stated
//! shift.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use shiftbench_core::tensor::Tensor;
use shiftbench_core::train::{stream_rng, LabeledSet, Stream};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Two interleaved half-moons; the target is the source rotated by the
    /// shift angle (degrees).
    MoonsRotate,
    /// Two Gaussian blobs per class; the target is translated by the shift
    /// magnitude along (1, 1).
    BlobsShift,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthParams {
    pub kind: SynthKind,
    /// Samples per domain.
    pub n: usize,
    /// Rotation angle in degrees or translation magnitude.
    pub shift: f64,
    /// Observation noise standard deviation.
    pub noise: f64,
}

/// Labeled source and target (target labels are for evaluation only).
pub struct SynthPair {
    pub source: LabeledSet,
    pub target: LabeledSet,
}

fn moons(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let t = std::f64::consts::PI * rng.gen::<f64>();
        let (mut x, mut y) = (t.cos(), t.sin());
        if c == 1 {
            x = 1.0 - x;
            y = 0.5 - y;
        }
        x += noise * (rng.gen::<f64>() * 2.0 - 1.0);
        y += noise * (rng.gen::<f64>() * 2.0 - 1.0);
        data.push(x);
        data.push(y);
        labels.push(c);
    }
    (data, labels)
}

fn rotate(data: &mut [f64], degrees: f64) {
    let rad = degrees.to_radians();
    let (s, c) = rad.sin_cos();
    for p in data.chunks_exact_mut(2) {
        let (x, y) = (p[0], p[1]);
        p[0] = c * x - s * y;
        p[1] = s * x + c * y;
    }
}

fn blobs(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let cx = if c == 0 { -1.0 } else { 1.0 };
        data.push(cx + noise * (rng.gen::<f64>() * 2.0 - 1.0));
        data.push(noise * (rng.gen::<f64>() * 2.0 - 1.0));
        labels.push(c);
    }
    (data, labels)
}

/// Generate a source/target pair. Both domains use the same generative
/// process with independent sub-seeds; the target additionally receives
/// the configured shift.
pub fn synth_shift_dataset(params: &SynthParams, seed: u64) -> Result<SynthPair> {
    if params.n == 0 {
        return Err(HarnessError::InvalidArgument("zero samples requested".into()));
    }
    let mut src_rng = stream_rng(seed, Stream::Data);
    let mut tgt_rng = stream_rng(seed.wrapping_add(1), Stream::Data);
    let (mut sdata, sy, mut tdata, ty) = match params.kind {
        SynthKind::MoonsRotate => {
            let (sd, sy) = moons(params.n, params.noise, &mut src_rng);
            let (mut td, ty) = moons(params.n, params.noise, &mut tgt_rng);
            rotate(&mut td, params.shift);
            (sd, sy, td, ty)
        }
        SynthKind::BlobsShift => {
            let (sd, sy) = blobs(params.n, params.noise, &mut src_rng);
            let (mut td, ty) = blobs(params.n, params.noise, &mut tgt_rng);
            for p in td.chunks_exact_mut(2) {
                p[0] += params.shift;
                p[1] += params.shift;
            }
            (sd, sy, td, ty)
        }
    };
    let source = LabeledSet::new(Tensor::matrix(params.n, 2, std::mem::take(&mut sdata))?, sy)?;
    let target = LabeledSet::new(Tensor::matrix(params.n, 2, std::mem::take(&mut tdata))?, ty)?;
    Ok(SynthPair { source, target })
}
