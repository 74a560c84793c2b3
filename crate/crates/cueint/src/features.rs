//! Per-cue feature sets and their alignment.

use std::path::Path;

use shiftbench_core::checkpoint;
use shiftbench_core::net::{forward, Mode, NetworkSpec, ParamEntry, Parameters};
use shiftbench_core::tensor::Tensor;

use crate::error::{CueError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cue {
    Rgb,
    Depth,
    Combined,
}

impl Cue {
    pub fn tag(&self) -> &'static str {
        match self {
            Cue::Rgb => "rgb",
            Cue::Depth => "depth",
            Cue::Combined => "combined",
        }
    }
}

/// One feature vector per sample, with ids that align the cues.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Tensor,
    pub cue: Cue,
    pub ids: Vec<String>,
}

impl FeatureSet {
    pub fn new(features: Tensor, cue: Cue, ids: Vec<String>) -> Result<Self> {
        if features.rows() != ids.len() {
            return Err(CueError::InvalidArgument(format!(
                "{} feature rows but {} ids",
                features.rows(),
                ids.len()
            )));
        }
        features.check_finite("features")?;
        Ok(FeatureSet { features, cue, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<FeatureSet> {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.features.row(i)).collect();
        FeatureSet::new(
            Tensor::from_rows(&rows)?,
            self.cue,
            idx.iter().map(|&i| self.ids[i].clone()).collect(),
        )
    }

    /// Persist as a flat-binary tensor plus a sample-id sidecar CSV at
    /// `<path>.ids.csv`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let params = Parameters::from_entries(vec![ParamEntry {
            name: "features".into(),
            tensor: self.features.clone(),
            trainable: false,
        }]);
        checkpoint::save(path, &params, &[("cue".into(), self.tag_string())])?;
        let mut csv = String::from("row,id\n");
        for (i, id) in self.ids.iter().enumerate() {
            csv.push_str(&format!("{i},{id}\n"));
        }
        std::fs::write(sidecar_path(path), csv)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureSet> {
        let (params, meta) = checkpoint::load(path)?;
        let features = params.get("features")?.clone();
        let cue = match meta.iter().find(|(k, _)| k == "cue").map(|(_, v)| v.as_str()) {
            Some("rgb") => Cue::Rgb,
            Some("depth") => Cue::Depth,
            Some("combined") => Cue::Combined,
            other => {
                return Err(CueError::InvalidArgument(format!("unknown cue tag {other:?}")))
            }
        };
        let raw = std::fs::read_to_string(sidecar_path(path))?;
        let mut ids = Vec::new();
        for line in raw.lines().skip(1) {
            if let Some((_, id)) = line.split_once(',') {
                ids.push(id.to_string());
            }
        }
        FeatureSet::new(features, cue, ids)
    }

    fn tag_string(&self) -> String {
        self.cue.tag().to_string()
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".ids.csv");
    s.into()
}

/// Activations at `layer_activation` (default: the input of the final
/// linear layer) for every row of `x`, in eval mode and input order.
pub fn extract_features(
    spec: &NetworkSpec,
    params: &mut Parameters,
    x: &Tensor,
    ids: &[String],
    cue: Cue,
    layer_activation: Option<usize>,
    mode: Mode,
) -> Result<FeatureSet> {
    let act = layer_activation.unwrap_or_else(|| spec.n_layers().saturating_sub(2));
    if act > spec.n_layers() {
        return Err(CueError::InvalidArgument(format!(
            "activation {act} out of range for a {}-layer network",
            spec.n_layers()
        )));
    }
    if matches!(mode, Mode::Train { .. }) {
        return Err(CueError::InvalidArgument("feature extraction runs in eval mode".into()));
    }
    let trace = forward(spec, params, x, mode)?;
    FeatureSet::new(trace.activations[act].clone(), cue, ids.to_vec())
}

/// Concatenate aligned cues with per-cue scalar weights:
/// row_i = [beta_0 * f0_i || beta_1 * f1_i || ...].
pub fn concat_cues(cues: &[&FeatureSet], betas: &[f64]) -> Result<FeatureSet> {
    if cues.is_empty() || cues.len() != betas.len() {
        return Err(CueError::InvalidArgument("one weight per cue required".into()));
    }
    let ids = &cues[0].ids;
    for set in &cues[1..] {
        if set.len() != ids.len() {
            return Err(CueError::InvalidArgument(format!(
                "cue sizes differ: {} vs {}",
                ids.len(),
                set.len()
            )));
        }
        for (row, (a, b)) in ids.iter().zip(&set.ids).enumerate() {
            if a != b {
                return Err(CueError::IdMismatch { row, left: a.clone(), right: b.clone() });
            }
        }
    }
    let total: usize = cues.iter().map(|s| s.features.cols()).sum();
    let mut out = Tensor::zeros(vec![ids.len(), total]);
    for r in 0..ids.len() {
        let row = out.row_mut(r);
        let mut off = 0;
        for (set, &beta) in cues.iter().zip(betas) {
            for (j, &v) in set.features.row(r).iter().enumerate() {
                row[off + j] = beta * v;
            }
            off += set.features.cols();
        }
    }
    FeatureSet::new(out, Cue::Combined, ids.clone())
}

/// Indices of samples to keep under the null-pixel rule: a depth sample
/// with more than `threshold` null pixels is dropped together with its
/// partner in every other cue.
pub fn filter_null_pairs(null_fractions: &[f64], threshold: f64) -> Vec<usize> {
    null_fractions
        .iter()
        .enumerate()
        .filter(|(_, &f)| f <= threshold)
        .map(|(i, _)| i)
        .collect()
}
