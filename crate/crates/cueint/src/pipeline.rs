//! End-to-end RGB-D integration: per-cue feature extraction from the two
//! adapted networks, concatenation, SVM training on source features and
//! evaluation on target features, with per-cue baselines alongside.

use shiftbench_core::net::{Mode, NetworkSpec, Parameters};
use shiftbench_core::tensor::Tensor;

use crate::error::{CueError, Result};
use crate::features::{concat_cues, extract_features, Cue, FeatureSet};
use crate::svm::{svm_accuracy, svm_train, SvmConfig};

/// A trained per-cue network and the data it sees.
pub struct CueArtifacts {
    pub cue: Cue,
    pub spec: NetworkSpec,
    pub params: Parameters,
    pub source_x: Tensor,
    pub target_x: Tensor,
    /// Feature layer override; None = input of the final linear layer.
    pub layer_activation: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RgbdOutcome {
    pub combined_target_acc: f64,
    pub per_cue_target_acc: Vec<(Cue, f64)>,
}

/// Train the integration SVM on concatenated source-cue features, test on
/// concatenated target-cue features, and report per-cue SVM baselines.
pub fn rgbd_pipeline(
    cues: &mut [CueArtifacts],
    source_labels: &[usize],
    target_labels: &[usize],
    betas: &[f64],
    svm: &SvmConfig,
) -> Result<RgbdOutcome> {
    if cues.is_empty() {
        return Err(CueError::InvalidArgument("no cue artifacts given".into()));
    }
    if betas.len() != cues.len() {
        return Err(CueError::InvalidArgument("one weight per cue required".into()));
    }
    if target_labels.is_empty() {
        return Err(CueError::InvalidArgument("empty target set".into()));
    }
    let src_ids: Vec<String> = (0..source_labels.len()).map(|i| format!("src{i}")).collect();
    let tgt_ids: Vec<String> = (0..target_labels.len()).map(|i| format!("tgt{i}")).collect();

    let mut src_sets = Vec::new();
    let mut tgt_sets = Vec::new();
    let mut per_cue_acc = Vec::new();
    for art in cues.iter_mut() {
        if art.source_x.rows() != source_labels.len() || art.target_x.rows() != target_labels.len()
        {
            return Err(CueError::InvalidArgument(format!(
                "{} cue rows do not match the label counts",
                art.cue.tag()
            )));
        }
        let fs_src = extract_features(
            &art.spec,
            &mut art.params,
            &art.source_x,
            &src_ids,
            art.cue,
            art.layer_activation,
            Mode::EvalSource,
        )?;
        let fs_tgt = extract_features(
            &art.spec,
            &mut art.params,
            &art.target_x,
            &tgt_ids,
            art.cue,
            art.layer_activation,
            Mode::EvalTarget,
        )?;
        let model = svm_train(&fs_src, source_labels, svm)?;
        per_cue_acc.push((art.cue, svm_accuracy(&model, &fs_tgt, target_labels)?));
        src_sets.push(fs_src);
        tgt_sets.push(fs_tgt);
    }

    let src_refs: Vec<&FeatureSet> = src_sets.iter().collect();
    let tgt_refs: Vec<&FeatureSet> = tgt_sets.iter().collect();
    let combined_src = concat_cues(&src_refs, betas)?;
    let combined_tgt = concat_cues(&tgt_refs, betas)?;
    let model = svm_train(&combined_src, source_labels, svm)?;
    let combined_target_acc = svm_accuracy(&model, &combined_tgt, target_labels)?;
    Ok(RgbdOutcome { combined_target_acc, per_cue_target_acc: per_cue_acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use shiftbench_core::net::{LayerSpec, Role};

    fn identity_artifacts(cue: Cue, src: Tensor, tgt: Tensor) -> CueArtifacts {
        let d = src.cols();
        let spec = NetworkSpec::new(vec![LayerSpec::Relu], Role::FeatureExtractor, d).unwrap();
        CueArtifacts {
            cue,
            spec,
            params: Parameters::from_entries(vec![]),
            source_x: src,
            target_x: tgt,
            layer_activation: Some(0),
        }
    }

    /// Four classes laid out so cue 1 only separates pairs {0,1} vs {2,3}
    /// and cue 2 only separates within the pairs.
    fn complementary_data(n_per_class: usize, jitter_seed: u64) -> (Tensor, Tensor, Vec<usize>) {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(jitter_seed);
        let n = 4 * n_per_class;
        let mut cue1 = Vec::with_capacity(n * 2);
        let mut cue2 = Vec::with_capacity(n * 2);
        let mut y = Vec::with_capacity(n);
        for c in 0..4usize {
            for _ in 0..n_per_class {
                let pair = (c / 2) as f64 * 2.0 - 1.0; // -1 or +1
                let within = (c % 2) as f64 * 2.0 - 1.0;
                cue1.push(pair * 2.0 + 0.3 * rng.gen::<f64>());
                cue1.push(0.3 * rng.gen::<f64>());
                cue2.push(within * 2.0 + 0.3 * rng.gen::<f64>());
                cue2.push(0.3 * rng.gen::<f64>());
                y.push(c);
            }
        }
        (
            Tensor::matrix(n, 2, cue1).unwrap(),
            Tensor::matrix(n, 2, cue2).unwrap(),
            y,
        )
    }

    #[test]
    fn complementary_cues_beat_either_alone() {
        let (c1_src, c2_src, y_src) = complementary_data(30, 1);
        let (c1_tgt, c2_tgt, y_tgt) = complementary_data(15, 2);
        let mut cues = vec![
            identity_artifacts(Cue::Rgb, c1_src, c1_tgt),
            identity_artifacts(Cue::Depth, c2_src, c2_tgt),
        ];
        let out =
            rgbd_pipeline(&mut cues, &y_src, &y_tgt, &[1.0, 1.0], &SvmConfig::default()).unwrap();
        let best_single = out
            .per_cue_target_acc
            .iter()
            .map(|(_, a)| *a)
            .fold(f64::MIN, f64::max);
        assert!(
            out.combined_target_acc >= best_single + 0.05,
            "combined {} vs best single {}",
            out.combined_target_acc,
            best_single
        );
    }

    #[test]
    fn duplicated_cue_matches_single_cue() {
        let (c1_src, _, y_src) = complementary_data(30, 3);
        let (c1_tgt, _, y_tgt) = complementary_data(15, 4);
        let mut twice = vec![
            identity_artifacts(Cue::Rgb, c1_src.clone(), c1_tgt.clone()),
            identity_artifacts(Cue::Depth, c1_src, c1_tgt),
        ];
        let out =
            rgbd_pipeline(&mut twice, &y_src, &y_tgt, &[1.0, 1.0], &SvmConfig::default()).unwrap();
        let single = out.per_cue_target_acc[0].1;
        assert!(
            (out.combined_target_acc - single).abs() <= 0.05,
            "duplicate cue changed accuracy: {} vs {}",
            out.combined_target_acc,
            single
        );
    }

    #[test]
    fn zero_weight_second_cue_equals_first_cue_exactly() {
        let (c1_src, c2_src, y_src) = complementary_data(20, 5);
        let (c1_tgt, c2_tgt, y_tgt) = complementary_data(10, 6);
        let mut cues = vec![
            identity_artifacts(Cue::Rgb, c1_src.clone(), c1_tgt.clone()),
            identity_artifacts(Cue::Depth, c2_src, c2_tgt),
        ];
        let both =
            rgbd_pipeline(&mut cues, &y_src, &y_tgt, &[1.0, 0.0], &SvmConfig::default()).unwrap();
        // Zeroed depth block adds constant-zero columns, which leave the
        // hinge objective and thus the decision function untouched.
        assert_eq!(both.combined_target_acc, both.per_cue_target_acc[0].1);
    }

    #[test]
    fn empty_target_rejected() {
        let (c1_src, _, y_src) = complementary_data(10, 7);
        let mut cues = vec![identity_artifacts(
            Cue::Rgb,
            c1_src,
            Tensor::zeros(vec![0, 2]),
        )];
        assert!(
            rgbd_pipeline(&mut cues, &y_src, &[], &[1.0], &SvmConfig::default()).is_err()
        );
    }
}
