//! Feed-forward networks over a fixed layer vocabulary, with reverse-mode
//! gradients.
//!
//! `forward` records the per-layer activations and caches needed by
//! `backward`. Gradients can be injected at intermediate activations
//! ("taps"), which is how adaptation penalties on hidden representations
//! reach the parameters, and `backward_from` lets a fused
//! softmax/cross-entropy start below the final softmax layer.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::tensor::{matmul, Tensor};

/// Sigmoid of the mixing parameter maps to alpha in (0.5, 1).
pub fn alpha_from_rho(rho: f64) -> f64 {
    0.5 + 0.5 * sigmoid(rho)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Initial value of the DA-layer mixing parameter (alpha ~ 0.95).
pub const RHO_INIT: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Linear { in_dim: usize, out_dim: usize },
    Relu,
    Sigmoid,
    Softmax,
    BatchNorm { dim: usize, momentum: f64, eps: f64, affine: bool },
    GradReversal { lambda: f64 },
    DaLayer { dim: usize, momentum: f64, eps: f64, affine: bool, pin_alpha: Option<f64> },
}

impl LayerSpec {
    pub fn batchnorm(dim: usize) -> Self {
        LayerSpec::BatchNorm { dim, momentum: 0.1, eps: 1e-5, affine: true }
    }

    pub fn da_layer(dim: usize) -> Self {
        LayerSpec::DaLayer { dim, momentum: 0.1, eps: 1e-5, affine: true, pin_alpha: None }
    }

    /// Output width given the input width, or an error if they cannot chain.
    fn out_width(&self, in_width: usize) -> Result<usize> {
        match self {
            LayerSpec::Linear { in_dim, out_dim } => {
                if *in_dim != in_width {
                    return Err(CoreError::Network(format!(
                        "linear expects width {in_dim}, got {in_width}"
                    )));
                }
                Ok(*out_dim)
            }
            LayerSpec::BatchNorm { dim, .. } | LayerSpec::DaLayer { dim, .. } => {
                if *dim != in_width {
                    return Err(CoreError::Network(format!(
                        "norm layer expects width {dim}, got {in_width}"
                    )));
                }
                Ok(in_width)
            }
            _ => Ok(in_width),
        }
    }
}

/// Role tag for a composed model part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    FeatureExtractor,
    LabelPredictor,
    DomainClassifier,
    SourceMap,
    TargetMap,
    Discriminator,
    Classifier,
}

#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub role: Role,
    in_dim: usize,
    out_dim: usize,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, role: Role, in_dim: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(CoreError::Network("empty layer list".into()));
        }
        let mut w = in_dim;
        for (i, l) in layers.iter().enumerate() {
            if matches!(l, LayerSpec::Softmax) && i + 1 != layers.len() {
                return Err(CoreError::Network("softmax must be the final layer".into()));
            }
            w = l.out_width(w)?;
        }
        Ok(NetworkSpec { layers, role, in_dim, out_dim: w })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Activation index of the output of layer `i` (for taps / backward_from).
    pub fn activation_of(&self, layer: usize) -> usize {
        layer + 1
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Named parameter tensors. Non-trainable entries hold running moments.
#[derive(Debug, Clone)]
pub struct Parameters {
    entries: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameters {
    /// Initialize parameters for a network. Linear weights are uniform in
    /// [-a, a] with a = sqrt(6 / (in + out)); biases zero; norm scale 1,
    /// shift 0; DA mixing parameter starts at [`RHO_INIT`].
    pub fn init<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut entries = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Linear { in_dim, out_dim } => {
                    let a = (6.0 / (*in_dim as f64 + *out_dim as f64)).sqrt();
                    let mut w = vec![0.0; out_dim * in_dim];
                    for v in &mut w {
                        *v = a * (2.0 * rng.gen::<f64>() - 1.0);
                    }
                    entries.push(ParamEntry {
                        name: format!("l{i}.w"),
                        tensor: Tensor::new(vec![*out_dim, *in_dim], w).unwrap(),
                        trainable: true,
                    });
                    entries.push(ParamEntry {
                        name: format!("l{i}.b"),
                        tensor: Tensor::zeros(vec![*out_dim]),
                        trainable: true,
                    });
                }
                LayerSpec::BatchNorm { dim, affine, .. } => {
                    push_norm_params(&mut entries, i, *dim, *affine);
                    push_running(&mut entries, i, *dim, "");
                }
                LayerSpec::DaLayer { dim, affine, pin_alpha, .. } => {
                    push_norm_params(&mut entries, i, *dim, *affine);
                    entries.push(ParamEntry {
                        name: format!("l{i}.rho"),
                        tensor: Tensor::scalar(RHO_INIT),
                        trainable: pin_alpha.is_none(),
                    });
                    push_running(&mut entries, i, *dim, "_st");
                    push_running(&mut entries, i, *dim, "_ts");
                }
                _ => {}
            }
        }
        Parameters { entries }
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Self {
        Parameters { entries }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
            .ok_or_else(|| CoreError::Network(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| CoreError::Network(format!("missing parameter {name}")))
    }

    /// Bitwise fingerprint over trainable entries, name-order stable.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
        for e in self.entries.iter().filter(|e| e.trainable) {
            h = h.rotate_left(7) ^ e.tensor.bits_fingerprint();
        }
        h
    }
}

fn push_norm_params(entries: &mut Vec<ParamEntry>, i: usize, dim: usize, affine: bool) {
    if affine {
        entries.push(ParamEntry {
            name: format!("l{i}.gamma"),
            tensor: Tensor::new(vec![dim], vec![1.0; dim]).unwrap(),
            trainable: true,
        });
        entries.push(ParamEntry {
            name: format!("l{i}.beta"),
            tensor: Tensor::zeros(vec![dim]),
            trainable: true,
        });
    }
}

fn push_running(entries: &mut Vec<ParamEntry>, i: usize, dim: usize, suffix: &str) {
    entries.push(ParamEntry {
        name: format!("l{i}.run_mean{suffix}"),
        tensor: Tensor::zeros(vec![dim]),
        trainable: false,
    });
    entries.push(ParamEntry {
        name: format!("l{i}.run_var{suffix}"),
        tensor: Tensor::new(vec![dim], vec![1.0; dim]).unwrap(),
        trainable: false,
    });
}

/// Gradients aligned with the trainable entries of a `Parameters`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        Gradients {
            entries: params
                .entries()
                .iter()
                .filter(|e| e.trainable)
                .map(|e| (e.name.clone(), Tensor::zeros(e.tensor.shape().to_vec())))
                .collect(),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .expect("gradient entry")
            .1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (n, t) in &self.entries {
            t.check_finite(n)?;
        }
        Ok(())
    }
}

/// Forward-pass mode. Train mode carries the source/target split point of
/// the batch (rows `[0, source_rows)` are source).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train { source_rows: usize },
    EvalSource,
    EvalTarget,
}

#[derive(Debug, Clone)]
enum LayerCache {
    None,
    SigmoidOut(Tensor),
    SoftmaxOut(Tensor),
    Norm(NormCache),
    DaMixed(Box<DaCache>),
    DaPinnedOne { src: NormCache, tgt: Option<NormCache> },
}

/// Per-feature statistics of a plain batch normalization in train mode,
/// covering rows [row_lo, row_hi) of the layer input.
#[derive(Debug, Clone)]
struct NormCache {
    row_lo: usize,
    row_hi: usize,
    inv_std: Vec<f64>,
    xhat: Tensor,
}

#[derive(Debug, Clone)]
struct DaCache {
    n_s: usize,
    n_t: usize,
    alpha: f64,
    /// d alpha / d rho; zero when pinned.
    dalpha_drho: f64,
    mu_s: Vec<f64>,
    mu_t: Vec<f64>,
    m2_s: Vec<f64>,
    m2_t: Vec<f64>,
    mu_st: Vec<f64>,
    mu_ts: Vec<f64>,
    inv_st: Vec<f64>,
    inv_ts: Vec<f64>,
    xhat: Tensor,
}

/// Saved activations from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `activations[0]` is the input; `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Tensor>,
    caches: Vec<LayerCache>,
    pub mode: Mode,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.activations.last().unwrap()
    }
}

pub fn forward(
    spec: &NetworkSpec,
    params: &mut Parameters,
    input: &Tensor,
    mode: Mode,
) -> Result<Trace> {
    if input.cols() != spec.in_dim {
        return Err(CoreError::Shape(format!(
            "input width {} does not match network input {}",
            input.cols(),
            spec.in_dim
        )));
    }
    if let Mode::Train { source_rows } = mode {
        if source_rows > input.rows() {
            return Err(CoreError::Shape("source_rows exceeds batch".into()));
        }
    }
    let mut activations = Vec::with_capacity(spec.layers.len() + 1);
    let mut caches = Vec::with_capacity(spec.layers.len());
    activations.push(input.clone());
    for (i, layer) in spec.layers.iter().enumerate() {
        let x = activations.last().unwrap();
        let (y, cache) = layer_forward(layer, i, params, x, mode)?;
        y.check_finite(&format!("activation of layer {i}"))?;
        activations.push(y);
        caches.push(cache);
    }
    Ok(Trace { activations, caches, mode })
}

fn layer_forward(
    layer: &LayerSpec,
    idx: usize,
    params: &mut Parameters,
    x: &Tensor,
    mode: Mode,
) -> Result<(Tensor, LayerCache)> {
    match layer {
        LayerSpec::Linear { in_dim, out_dim } => {
            let w = params.get(&format!("l{idx}.w"))?;
            let b = params.get(&format!("l{idx}.b"))?;
            let n = x.rows();
            let mut out = vec![0.0; n * out_dim];
            for r in 0..n {
                let xr = x.row(r);
                let orow = &mut out[r * out_dim..(r + 1) * out_dim];
                for o in 0..*out_dim {
                    orow[o] = crate::tensor::dot(&w.data()[o * in_dim..(o + 1) * in_dim], xr)
                        + b.data()[o];
                }
            }
            Ok((Tensor::new(vec![n, *out_dim], out)?, LayerCache::None))
        }
        LayerSpec::Relu => Ok((x.map(|v| if v > 0.0 { v } else { 0.0 }), LayerCache::None)),
        LayerSpec::Sigmoid => {
            let y = x.map(sigmoid);
            Ok((y.clone(), LayerCache::SigmoidOut(y)))
        }
        LayerSpec::Softmax => {
            let (n, d) = (x.rows(), x.cols());
            let mut out = vec![0.0; n * d];
            for r in 0..n {
                let row = x.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let orow = &mut out[r * d..(r + 1) * d];
                let mut s = 0.0;
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = (v - m).exp();
                    s += *o;
                }
                for o in orow.iter_mut() {
                    *o /= s;
                }
            }
            let y = Tensor::new(vec![n, d], out)?;
            Ok((y.clone(), LayerCache::SoftmaxOut(y)))
        }
        LayerSpec::GradReversal { .. } => Ok((x.clone(), LayerCache::None)),
        LayerSpec::BatchNorm { dim, momentum, eps, affine } => match mode {
            Mode::Train { .. } => {
                let (y, cache) = bn_train_forward(x, 0, x.rows(), idx, params, *eps, *affine)?;
                update_running(params, idx, "", *momentum, &cache, x, *eps)?;
                Ok((y, LayerCache::Norm(cache)))
            }
            _ => {
                let y = norm_eval(x, idx, params, "", *dim, *eps, *affine)?;
                Ok((y, LayerCache::None))
            }
        },
        LayerSpec::DaLayer { dim, momentum, eps, affine, pin_alpha } => {
            da_forward(x, idx, params, mode, *dim, *momentum, *eps, *affine, *pin_alpha)
        }
    }
}

/// Per-feature batch statistics over rows [lo, hi): (mean, mean of squares).
fn batch_moments(x: &Tensor, lo: usize, hi: usize) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let n = (hi - lo) as f64;
    let mut mu = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for r in lo..hi {
        for (j, &v) in x.row(r).iter().enumerate() {
            mu[j] += v;
            m2[j] += v * v;
        }
    }
    for j in 0..d {
        mu[j] /= n;
        m2[j] /= n;
    }
    (mu, m2)
}

/// Standard batch normalization of rows [lo, hi) using their own statistics.
/// Shared by the batchnorm layer and the DA-layer pinned at alpha = 1.
fn bn_train_forward(
    x: &Tensor,
    lo: usize,
    hi: usize,
    idx: usize,
    params: &Parameters,
    eps: f64,
    affine: bool,
) -> Result<(Tensor, NormCache)> {
    let d = x.cols();
    let (mu, m2) = batch_moments(x, lo, hi);
    let mut inv_std = vec![0.0; d];
    for j in 0..d {
        let var = m2[j] - mu[j] * mu[j];
        inv_std[j] = 1.0 / (var + eps).sqrt();
    }
    let n = hi - lo;
    let mut xhat = vec![0.0; n * d];
    for r in lo..hi {
        for (j, &v) in x.row(r).iter().enumerate() {
            xhat[(r - lo) * d + j] = (v - mu[j]) * inv_std[j];
        }
    }
    let xhat = Tensor::new(vec![n, d], xhat)?;
    let y = apply_affine(&xhat, idx, params, affine)?;
    Ok((y, NormCache { row_lo: lo, row_hi: hi, inv_std, xhat }))
}

fn apply_affine(xhat: &Tensor, idx: usize, params: &Parameters, affine: bool) -> Result<Tensor> {
    if !affine {
        return Ok(xhat.clone());
    }
    let gamma = params.get(&format!("l{idx}.gamma"))?;
    let beta = params.get(&format!("l{idx}.beta"))?;
    let d = xhat.cols();
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for j in 0..d {
            row[j] = row[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(out)
}

fn update_running(
    params: &mut Parameters,
    idx: usize,
    suffix: &str,
    momentum: f64,
    cache: &NormCache,
    x: &Tensor,
    eps: f64,
) -> Result<()> {
    let (mu, m2) = batch_moments(x, cache.row_lo, cache.row_hi);
    let d = mu.len();
    let mut var = vec![0.0; d];
    for j in 0..d {
        var[j] = m2[j] - mu[j] * mu[j];
    }
    let _ = eps;
    blend_running(params, idx, suffix, momentum, &mu, &var)
}

fn blend_running(
    params: &mut Parameters,
    idx: usize,
    suffix: &str,
    momentum: f64,
    mu: &[f64],
    var: &[f64],
) -> Result<()> {
    let rm = params.get_mut(&format!("l{idx}.run_mean{suffix}"))?;
    for (r, &m) in rm.data_mut().iter_mut().zip(mu) {
        *r = (1.0 - momentum) * *r + momentum * m;
    }
    let rv = params.get_mut(&format!("l{idx}.run_var{suffix}"))?;
    for (r, &v) in rv.data_mut().iter_mut().zip(var) {
        *r = (1.0 - momentum) * *r + momentum * v;
    }
    Ok(())
}

fn norm_eval(
    x: &Tensor,
    idx: usize,
    params: &Parameters,
    suffix: &str,
    dim: usize,
    eps: f64,
    affine: bool,
) -> Result<Tensor> {
    let rm = params.get(&format!("l{idx}.run_mean{suffix}"))?.clone();
    let rv = params.get(&format!("l{idx}.run_var{suffix}"))?.clone();
    let mut xhat = x.clone();
    for r in 0..xhat.rows() {
        let row = xhat.row_mut(r);
        for j in 0..dim {
            row[j] = (row[j] - rm.data()[j]) / (rv.data()[j] + eps).sqrt();
        }
    }
    apply_affine(&xhat, idx, params, affine)
}

#[allow(clippy::too_many_arguments)]
fn da_forward(
    x: &Tensor,
    idx: usize,
    params: &mut Parameters,
    mode: Mode,
    dim: usize,
    momentum: f64,
    eps: f64,
    affine: bool,
    pin_alpha: Option<f64>,
) -> Result<(Tensor, LayerCache)> {
    match mode {
        Mode::EvalSource => {
            Ok((norm_eval(x, idx, params, "_st", dim, eps, affine)?, LayerCache::None))
        }
        Mode::EvalTarget => {
            Ok((norm_eval(x, idx, params, "_ts", dim, eps, affine)?, LayerCache::None))
        }
        Mode::Train { source_rows } => {
            let n = x.rows();
            let n_s = source_rows;
            let n_t = n - n_s;
            if n_s == 0 {
                return Err(CoreError::InvalidArgument(
                    "DA-layer train mode requires a source half-batch".into(),
                ));
            }
            if pin_alpha == Some(1.0) {
                // Exactly per-domain batch normalization.
                let (y_s, src) = bn_train_forward(x, 0, n_s, idx, params, eps, affine)?;
                update_running(params, idx, "_st", momentum, &src, x, eps)?;
                if n_t == 0 {
                    return Ok((y_s, LayerCache::DaPinnedOne { src, tgt: None }));
                }
                let (y_t, tgt) = bn_train_forward(x, n_s, n, idx, params, eps, affine)?;
                update_running(params, idx, "_ts", momentum, &tgt, x, eps)?;
                let y = Tensor::vcat(&y_s, &y_t)?;
                return Ok((y, LayerCache::DaPinnedOne { src, tgt: Some(tgt) }));
            }
            if n_t == 0 {
                return Err(CoreError::InvalidArgument(
                    "DA-layer with mixed alpha requires a target half-batch".into(),
                ));
            }
            let (alpha, dalpha_drho) = match pin_alpha {
                Some(a) => (a, 0.0),
                None => {
                    let rho = params.get(&format!("l{idx}.rho"))?.data()[0];
                    let s = sigmoid(rho);
                    (0.5 + 0.5 * s, 0.5 * s * (1.0 - s))
                }
            };
            let (mu_s, m2_s) = batch_moments(x, 0, n_s);
            let (mu_t, m2_t) = batch_moments(x, n_s, n);
            let mut mu_st = vec![0.0; dim];
            let mut mu_ts = vec![0.0; dim];
            let mut inv_st = vec![0.0; dim];
            let mut inv_ts = vec![0.0; dim];
            let mut var_st = vec![0.0; dim];
            let mut var_ts = vec![0.0; dim];
            for j in 0..dim {
                mu_st[j] = alpha * mu_s[j] + (1.0 - alpha) * mu_t[j];
                mu_ts[j] = alpha * mu_t[j] + (1.0 - alpha) * mu_s[j];
                let m2_st = alpha * m2_s[j] + (1.0 - alpha) * m2_t[j];
                let m2_ts = alpha * m2_t[j] + (1.0 - alpha) * m2_s[j];
                // Mixture variance: second moment of the mixture minus its squared mean.
                var_st[j] = m2_st - mu_st[j] * mu_st[j];
                var_ts[j] = m2_ts - mu_ts[j] * mu_ts[j];
                inv_st[j] = 1.0 / (var_st[j] + eps).sqrt();
                inv_ts[j] = 1.0 / (var_ts[j] + eps).sqrt();
            }
            let mut xhat = vec![0.0; n * dim];
            for r in 0..n {
                let (mu, inv) = if r < n_s { (&mu_st, &inv_st) } else { (&mu_ts, &inv_ts) };
                for (j, &v) in x.row(r).iter().enumerate() {
                    xhat[r * dim + j] = (v - mu[j]) * inv[j];
                }
            }
            let xhat = Tensor::new(vec![n, dim], xhat)?;
            let y = apply_affine(&xhat, idx, params, affine)?;
            blend_running(params, idx, "_st", momentum, &mu_st, &var_st)?;
            blend_running(params, idx, "_ts", momentum, &mu_ts, &var_ts)?;
            let cache = DaCache {
                n_s,
                n_t,
                alpha,
                dalpha_drho,
                mu_s,
                mu_t,
                m2_s,
                m2_t,
                mu_st,
                mu_ts,
                inv_st,
                inv_ts,
                xhat,
            };
            Ok((y, LayerCache::DaMixed(Box::new(cache))))
        }
    }
}

/// Full backward from the network output. Returns parameter gradients and
/// the gradient with respect to the input.
pub fn backward(
    spec: &NetworkSpec,
    params: &Parameters,
    trace: &Trace,
    upstream: &Tensor,
    taps: &[(usize, Tensor)],
) -> Result<(Gradients, Tensor)> {
    backward_from(spec, params, trace, spec.layers.len(), upstream, taps)
}

/// Backward starting from the gradient w.r.t. `activations[start_act]`.
/// Layers at or above `start_act` are skipped; this is how a fused
/// softmax/cross-entropy hands over a logits gradient.
pub fn backward_from(
    spec: &NetworkSpec,
    params: &Parameters,
    trace: &Trace,
    start_act: usize,
    upstream: &Tensor,
    taps: &[(usize, Tensor)],
) -> Result<(Gradients, Tensor)> {
    if !matches!(trace.mode, Mode::Train { .. }) {
        return Err(CoreError::InvalidArgument("backward requires a train-mode trace".into()));
    }
    if trace.activations.len() != spec.layers.len() + 1 {
        return Err(CoreError::InvalidArgument("stale trace for this network".into()));
    }
    if upstream.shape() != trace.activations[start_act].shape() {
        return Err(CoreError::Shape("upstream gradient shape mismatch".into()));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut g = upstream.clone();
    apply_taps(&mut g, start_act, taps)?;
    for i in (0..start_act).rev() {
        g = layer_backward(&spec.layers[i], i, params, trace, &g, &mut grads)?;
        apply_taps(&mut g, i, taps)?;
    }
    Ok((grads, g))
}

fn apply_taps(g: &mut Tensor, act: usize, taps: &[(usize, Tensor)]) -> Result<()> {
    for (a, t) in taps {
        if *a == act {
            if t.shape() != g.shape() {
                return Err(CoreError::Shape(format!("tap at activation {act} shape mismatch")));
            }
            g.add_assign(t);
        }
    }
    Ok(())
}

fn layer_backward(
    layer: &LayerSpec,
    idx: usize,
    params: &Parameters,
    trace: &Trace,
    g: &Tensor,
    grads: &mut Gradients,
) -> Result<Tensor> {
    let x = &trace.activations[idx];
    match layer {
        LayerSpec::Linear { in_dim, out_dim } => {
            let w = params.get(&format!("l{idx}.w"))?;
            let n = x.rows();
            {
                let dw = grads.get_mut(&format!("l{idx}.w"));
                for r in 0..n {
                    let gr = g.row(r);
                    let xr = x.row(r);
                    for o in 0..*out_dim {
                        let go = gr[o];
                        let drow = &mut dw.data_mut()[o * in_dim..(o + 1) * in_dim];
                        for (dv, &xv) in drow.iter_mut().zip(xr) {
                            *dv += go * xv;
                        }
                    }
                }
            }
            {
                let db = grads.get_mut(&format!("l{idx}.b"));
                for r in 0..n {
                    for (dv, &gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *dv += gv;
                    }
                }
            }
            matmul(g, w)
        }
        LayerSpec::Relu => {
            let mut out = g.clone();
            for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
                if xv <= 0.0 {
                    *o = 0.0;
                }
            }
            Ok(out)
        }
        LayerSpec::Sigmoid => {
            let y = match &trace.caches[idx] {
                LayerCache::SigmoidOut(y) => y,
                _ => return Err(CoreError::InvalidArgument("missing sigmoid cache".into())),
            };
            let mut out = g.clone();
            for (o, &yv) in out.data_mut().iter_mut().zip(y.data()) {
                *o *= yv * (1.0 - yv);
            }
            Ok(out)
        }
        LayerSpec::Softmax => {
            let y = match &trace.caches[idx] {
                LayerCache::SoftmaxOut(y) => y,
                _ => return Err(CoreError::InvalidArgument("missing softmax cache".into())),
            };
            let (n, d) = (y.rows(), y.cols());
            let mut out = vec![0.0; n * d];
            for r in 0..n {
                let gr = g.row(r);
                let yr = y.row(r);
                let s = crate::tensor::dot(gr, yr);
                for j in 0..d {
                    out[r * d + j] = yr[j] * (gr[j] - s);
                }
            }
            Tensor::new(vec![n, d], out)
        }
        LayerSpec::GradReversal { lambda } => {
            let mut out = g.clone();
            out.scale(-lambda);
            Ok(out)
        }
        LayerSpec::BatchNorm { affine, .. } => {
            let cache = match &trace.caches[idx] {
                LayerCache::Norm(c) => c,
                _ => return Err(CoreError::InvalidArgument("missing batchnorm cache".into())),
            };
            bn_backward_block(cache, idx, params, g, grads, *affine, x)
        }
        LayerSpec::DaLayer { affine, eps, .. } => match &trace.caches[idx] {
            LayerCache::DaPinnedOne { src, tgt } => {
                let g_s = g.slice_rows(src.row_lo, src.row_hi);
                let d_s = bn_backward_block(src, idx, params, &g_s, grads, *affine, x)?;
                match tgt {
                    None => Ok(d_s),
                    Some(t) => {
                        let g_t = g.slice_rows(t.row_lo, t.row_hi);
                        let d_t = bn_backward_block(t, idx, params, &g_t, grads, *affine, x)?;
                        Tensor::vcat(&d_s, &d_t)
                    }
                }
            }
            LayerCache::DaMixed(c) => da_backward(c, idx, params, g, grads, *affine, x, *eps),
            _ => Err(CoreError::InvalidArgument("missing DA-layer cache".into())),
        },
    }
}

/// Backward of a plain batch normalization over rows [row_lo, row_hi).
/// `g` has `row_hi - row_lo` rows; the returned gradient covers the same rows.
fn bn_backward_block(
    cache: &NormCache,
    idx: usize,
    params: &Parameters,
    g: &Tensor,
    grads: &mut Gradients,
    affine: bool,
    _x: &Tensor,
) -> Result<Tensor> {
    let d = cache.xhat.cols();
    let n = cache.row_hi - cache.row_lo;
    let nf = n as f64;
    // Gradient w.r.t. xhat.
    let ghat = if affine {
        let gamma = params.get(&format!("l{idx}.gamma"))?;
        let mut gh = g.clone();
        for r in 0..n {
            for (j, v) in gh.row_mut(r).iter_mut().enumerate() {
                *v *= gamma.data()[j];
            }
        }
        gh
    } else {
        g.clone()
    };
    if affine {
        let dgamma = grads.get_mut(&format!("l{idx}.gamma"));
        for r in 0..n {
            for j in 0..d {
                dgamma.data_mut()[j] += g.row(r)[j] * cache.xhat.row(r)[j];
            }
        }
        let dbeta = grads.get_mut(&format!("l{idx}.beta"));
        for r in 0..n {
            for (dv, &gv) in dbeta.data_mut().iter_mut().zip(g.row(r)) {
                *dv += gv;
            }
        }
    }
    let mut sum_g = vec![0.0; d];
    let mut sum_gx = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            sum_g[j] += ghat.row(r)[j];
            sum_gx[j] += ghat.row(r)[j] * cache.xhat.row(r)[j];
        }
    }
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        for j in 0..d {
            let gh = ghat.row(r)[j];
            let xh = cache.xhat.row(r)[j];
            out[r * d + j] =
                cache.inv_std[j] / nf * (nf * gh - sum_g[j] - xh * sum_gx[j]);
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Backward of the mixed-statistics DA-layer.
///
/// Each half is normalized by cross-domain statistics, so every input row
/// influences both output halves through the four mixed moments; alpha
/// (hence rho) collects the sensitivity of the moments to the mixing.
#[allow(clippy::too_many_arguments)]
fn da_backward(
    c: &DaCache,
    idx: usize,
    params: &Parameters,
    g: &Tensor,
    grads: &mut Gradients,
    affine: bool,
    x: &Tensor,
    _eps: f64,
) -> Result<Tensor> {
    let d = c.xhat.cols();
    let n = c.n_s + c.n_t;
    let ghat = if affine {
        let gamma = params.get(&format!("l{idx}.gamma"))?;
        let mut gh = g.clone();
        for r in 0..n {
            for (j, v) in gh.row_mut(r).iter_mut().enumerate() {
                *v *= gamma.data()[j];
            }
        }
        gh
    } else {
        g.clone()
    };
    if affine {
        let dgamma = grads.get_mut(&format!("l{idx}.gamma"));
        for r in 0..n {
            for j in 0..d {
                dgamma.data_mut()[j] += g.row(r)[j] * c.xhat.row(r)[j];
            }
        }
        let dbeta = grads.get_mut(&format!("l{idx}.beta"));
        for r in 0..n {
            for (dv, &gv) in dbeta.data_mut().iter_mut().zip(g.row(r)) {
                *dv += gv;
            }
        }
    }
    let nsf = c.n_s as f64;
    let ntf = c.n_t as f64;
    let a = c.alpha;
    let mut out = vec![0.0; n * d];
    let mut dalpha = 0.0;
    for j in 0..d {
        // Sums of upstream and upstream-times-xhat per branch.
        let (mut a_s, mut b_s, mut a_t, mut b_t) = (0.0, 0.0, 0.0, 0.0);
        for r in 0..c.n_s {
            a_s += ghat.row(r)[j];
            b_s += ghat.row(r)[j] * c.xhat.row(r)[j];
        }
        for r in c.n_s..n {
            a_t += ghat.row(r)[j];
            b_t += ghat.row(r)[j] * c.xhat.row(r)[j];
        }
        // dL/d(sigma^2 + eps) per branch, then total dL/dmu and dL/dm2
        // treating (mu, m2) of each mixture as the independent stats.
        let ds_st = -0.5 * c.inv_st[j] * c.inv_st[j] * b_s;
        let ds_ts = -0.5 * c.inv_ts[j] * c.inv_ts[j] * b_t;
        let dmu_st = -c.inv_st[j] * a_s + ds_st * (-2.0 * c.mu_st[j]);
        let dmu_ts = -c.inv_ts[j] * a_t + ds_ts * (-2.0 * c.mu_ts[j]);
        let dm2_st = ds_st;
        let dm2_ts = ds_ts;
        for r in 0..c.n_s {
            let xv = x.row(r)[j];
            out[r * d + j] = ghat.row(r)[j] * c.inv_st[j]
                + dmu_st * a / nsf
                + dm2_st * a * 2.0 * xv / nsf
                + dmu_ts * (1.0 - a) / nsf
                + dm2_ts * (1.0 - a) * 2.0 * xv / nsf;
        }
        for r in c.n_s..n {
            let xv = x.row(r)[j];
            out[r * d + j] = ghat.row(r)[j] * c.inv_ts[j]
                + dmu_ts * a / ntf
                + dm2_ts * a * 2.0 * xv / ntf
                + dmu_st * (1.0 - a) / ntf
                + dm2_st * (1.0 - a) * 2.0 * xv / ntf;
        }
        dalpha += dmu_st * (c.mu_s[j] - c.mu_t[j])
            + dm2_st * (c.m2_s[j] - c.m2_t[j])
            + dmu_ts * (c.mu_t[j] - c.mu_s[j])
            + dm2_ts * (c.m2_t[j] - c.m2_s[j]);
    }
    if c.dalpha_drho != 0.0 {
        let drho = grads.get_mut(&format!("l{idx}.rho"));
        drho.data_mut()[0] += dalpha * c.dalpha_drho;
    }
    Tensor::new(vec![n, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear_passes_input_through() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::Linear { in_dim: 3, out_dim: 3 }],
            Role::Classifier,
            3,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Parameters::init(&spec, &mut rng);
        *params.get_mut("l0.w").unwrap() =
            Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.3, -0.7, 2.0]).unwrap();
        let t = forward(&spec, &mut params, &x, Mode::EvalSource).unwrap();
        assert_eq!(t.output(), &x);
    }

    #[test]
    fn relu_clamps_negatives() {
        let spec = NetworkSpec::new(vec![LayerSpec::Relu], Role::Classifier, 3).unwrap();
        let mut params = Parameters::from_entries(vec![]);
        let x = Tensor::matrix(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let t = forward(&spec, &mut params, &x, Mode::EvalSource).unwrap();
        assert_eq!(t.output().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry_and_row_sums() {
        let spec = NetworkSpec::new(vec![LayerSpec::Softmax], Role::LabelPredictor, 2).unwrap();
        let mut params = Parameters::from_entries(vec![]);
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let t = forward(&spec, &mut params, &x, Mode::EvalSource).unwrap();
        assert_eq!(t.output().data(), &[0.5, 0.5]);
        let x = Tensor::matrix(4, 2, vec![3.0, -1.0, 0.2, 0.1, -5.0, 9.0, 1e3, 1e3]).unwrap();
        let t = forward(&spec, &mut params, &x, Mode::EvalSource).unwrap();
        for r in 0..4 {
            let s: f64 = t.output().row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_not_final_rejected() {
        let err = NetworkSpec::new(
            vec![LayerSpec::Softmax, LayerSpec::Relu],
            Role::LabelPredictor,
            2,
        );
        assert!(err.is_err());
    }

    #[test]
    fn scalar_linear_gradient_by_hand() {
        // y = w * x at x = 3, upstream 1 -> dw = 3.
        let spec = NetworkSpec::new(
            vec![LayerSpec::Linear { in_dim: 1, out_dim: 1 }],
            Role::Classifier,
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Parameters::init(&spec, &mut rng);
        let x = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let t = forward(&spec, &mut params, &x, Mode::Train { source_rows: 1 }).unwrap();
        let up = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let (grads, _) = backward(&spec, &params, &t, &up, &[]).unwrap();
        assert_eq!(grads.get("l0.w").unwrap().data(), &[3.0]);
        assert_eq!(grads.get("l0.b").unwrap().data(), &[1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::Linear { in_dim: 4, out_dim: 3 }, LayerSpec::Relu],
            Role::Classifier,
            4,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Parameters::init(&spec, &mut rng);
        let x = Tensor::matrix(2, 4, vec![0.5; 8]).unwrap();
        let t = forward(&spec, &mut params, &x, Mode::Train { source_rows: 2 }).unwrap();
        let up = Tensor::zeros(vec![2, 3]);
        let (grads, _) = backward(&spec, &params, &t, &up, &[]).unwrap();
        for (_, g) in &grads.entries {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn grl_forward_identity_backward_scaled_flip() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::GradReversal { lambda: 0.1 }],
            Role::DomainClassifier,
            3,
        )
        .unwrap();
        let mut params = Parameters::from_entries(vec![]);
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let t = forward(&spec, &mut params, &x, Mode::Train { source_rows: 1 }).unwrap();
        assert_eq!(t.output(), &x);
        let up = Tensor::matrix(1, 3, vec![10.0, 0.0, -10.0]).unwrap();
        let (_, gin) = backward(&spec, &params, &t, &up, &[]).unwrap();
        assert_eq!(gin.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn double_grl_restores_gradient() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::GradReversal { lambda: 1.0 }, LayerSpec::GradReversal { lambda: 1.0 }],
            Role::DomainClassifier,
            2,
        )
        .unwrap();
        let mut params = Parameters::from_entries(vec![]);
        let x = Tensor::matrix(1, 2, vec![1.0, -4.0]).unwrap();
        let t = forward(&spec, &mut params, &x, Mode::Train { source_rows: 1 }).unwrap();
        let up = Tensor::matrix(1, 2, vec![0.5, 2.0]).unwrap();
        let (_, gin) = backward(&spec, &params, &t, &up, &[]).unwrap();
        assert_eq!(gin.data(), up.data());
    }

    #[test]
    fn da_layer_needs_both_halves_when_mixed() {
        let spec =
            NetworkSpec::new(vec![LayerSpec::da_layer(2)], Role::FeatureExtractor, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Parameters::init(&spec, &mut rng);
        let x = Tensor::matrix(4, 2, vec![0.1; 8]).unwrap();
        assert!(forward(&spec, &mut params, &x, Mode::Train { source_rows: 4 }).is_err());
    }
}
