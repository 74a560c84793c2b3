//! Dataset manifests: ingestion from a class/instance/frame directory
//! layout, the null-pixel and distance filters, and the split policies.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use shiftbench_core::train::{stream_rng, Stream};
use shiftbench_depthcolor::DepthImage;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub class: String,
    pub instance: String,
    pub rgb_path: Option<PathBuf>,
    pub depth_path: Option<PathBuf>,
    /// Median of the non-null depth values, millimeters.
    pub median_distance_mm: Option<f64>,
    pub null_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn classes(&self) -> Vec<String> {
        let mut set: Vec<String> = self.records.iter().map(|r| r.class.clone()).collect();
        set.sort();
        set.dedup();
        set
    }

    fn subset(&self, idx: &[usize]) -> DatasetManifest {
        DatasetManifest { records: idx.iter().map(|&i| self.records[i].clone()).collect() }
    }
}

/// Walk `root/<class>/<instance>/<frame>.(ppm|pgm)` and build a manifest.
/// Frames sharing a stem pair up as the rgb and depth modality of one
/// sample; depth statistics are computed from the 16-bit image.
pub fn ingest(root: &Path) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for class_dir in sorted_dirs(root)? {
        let class = name_of(&class_dir);
        let mut class_count = 0usize;
        for inst_dir in sorted_dirs(&class_dir)? {
            let instance = name_of(&inst_dir);
            // stem -> (rgb, depth)
            let mut frames: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&inst_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            for path in entries {
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
                let ext = path.extension().map(|s| s.to_string_lossy().to_lowercase());
                let (Some(stem), Some(ext)) = (stem, ext) else { continue };
                let slot = frames.entry(stem).or_default();
                match ext.as_str() {
                    "ppm" => slot.0 = Some(path),
                    "pgm" => slot.1 = Some(path),
                    _ => {}
                }
            }
            for (stem, (rgb, depth)) in frames {
                let (median, nulls) = match &depth {
                    Some(p) => {
                        let img = DepthImage::read_pgm(p)?;
                        (img.median_valid_depth().map(f64::from), Some(img.null_fraction()))
                    }
                    None => (None, None),
                };
                records.push(ManifestRecord {
                    id: format!("{class}/{instance}/{stem}"),
                    class: class.clone(),
                    instance: instance.clone(),
                    rgb_path: rgb,
                    depth_path: depth,
                    median_distance_mm: median,
                    null_fraction: nulls,
                });
                class_count += 1;
            }
        }
        if class_count == 0 {
            return Err(HarnessError::Dataset(format!("class '{class}' has no images")));
        }
    }
    if records.is_empty() {
        return Err(HarnessError::Dataset(format!("no classes under {}", root.display())));
    }
    Ok(DatasetManifest { records })
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn name_of(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Drop records whose null fraction is strictly above `null_threshold`,
/// then (if given) keep records whose median distance lies in the
/// half-open range `[lo, hi)` millimeters. Idempotent.
pub fn apply_filters(
    manifest: &DatasetManifest,
    null_threshold: f64,
    distance_range: Option<(f64, f64)>,
) -> Result<DatasetManifest> {
    let mut records: Vec<ManifestRecord> = manifest
        .records
        .iter()
        .filter(|r| r.null_fraction.is_none_or(|f| f <= null_threshold))
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(HarnessError::EmptyAfterFilter {
            filter: format!("null fraction > {null_threshold}"),
        });
    }
    if let Some((lo, hi)) = distance_range {
        records.retain(|r| r.median_distance_mm.is_some_and(|d| d >= lo && d < hi));
        if records.is_empty() {
            return Err(HarnessError::EmptyAfterFilter {
                filter: format!("distance range [{lo}, {hi})"),
            });
        }
    }
    Ok(DatasetManifest { records })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitPolicy {
    /// The whole target set serves as both adaptation and test set.
    Group1,
    /// Hold out one instance per class as the test set.
    Group2ByInstance { split_index: usize },
    /// Hold out a fixed per-class sample count, seeded.
    Group2FixedCount { test_per_class: usize, seed: u64 },
}

/// Split the target manifest into (adaptation set, test set) per policy.
/// Group-2 splits are disjoint and jointly cover the manifest.
pub fn make_splits(
    manifest: &DatasetManifest,
    policy: &SplitPolicy,
) -> Result<(DatasetManifest, DatasetManifest)> {
    match policy {
        SplitPolicy::Group1 => Ok((manifest.clone(), manifest.clone())),
        SplitPolicy::Group2ByInstance { split_index } => {
            let mut adapt = Vec::new();
            let mut test = Vec::new();
            for class in manifest.classes() {
                let mut instances: Vec<String> = manifest
                    .records
                    .iter()
                    .filter(|r| r.class == class)
                    .map(|r| r.instance.clone())
                    .collect();
                instances.sort();
                instances.dedup();
                if instances.len() < 2 {
                    return Err(HarnessError::SplitInfeasible(format!(
                        "class '{class}' has {} instance(s); instance holdout needs >= 2",
                        instances.len()
                    )));
                }
                let held = &instances[split_index % instances.len()];
                for (i, r) in manifest.records.iter().enumerate() {
                    if r.class != class {
                        continue;
                    }
                    if &r.instance == held {
                        test.push(i);
                    } else {
                        adapt.push(i);
                    }
                }
            }
            Ok((manifest.subset(&adapt), manifest.subset(&test)))
        }
        SplitPolicy::Group2FixedCount { test_per_class, seed } => {
            let mut rng = stream_rng(*seed, Stream::Data);
            let mut adapt = Vec::new();
            let mut test = Vec::new();
            for class in manifest.classes() {
                let mut idx: Vec<usize> = manifest
                    .records
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.class == class)
                    .map(|(i, _)| i)
                    .collect();
                if idx.len() <= *test_per_class {
                    return Err(HarnessError::SplitInfeasible(format!(
                        "class '{class}' has {} samples, cannot hold out {test_per_class}",
                        idx.len()
                    )));
                }
                idx.shuffle(&mut rng);
                test.extend_from_slice(&idx[..*test_per_class]);
                adapt.extend_from_slice(&idx[*test_per_class..]);
            }
            adapt.sort_unstable();
            test.sort_unstable();
            Ok((manifest.subset(&adapt), manifest.subset(&test)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, class: &str, instance: &str, dist: f64, nulls: f64) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            class: class.into(),
            instance: instance.into(),
            rgb_path: None,
            depth_path: None,
            median_distance_mm: Some(dist),
            null_fraction: Some(nulls),
        }
    }

    fn toy_manifest() -> DatasetManifest {
        let mut records = Vec::new();
        for class in ["cup", "bowl"] {
            for inst in ["a", "b", "c"] {
                for frame in 0..4 {
                    records.push(record(
                        &format!("{class}/{inst}/{frame}"),
                        class,
                        inst,
                        800.0 + frame as f64 * 150.0,
                        0.1,
                    ));
                }
            }
        }
        DatasetManifest { records }
    }

    #[test]
    fn null_filter_is_strict_at_boundary() {
        let m = DatasetManifest {
            records: vec![
                record("a", "c", "i", 100.0, 0.5),
                record("b", "c", "i", 100.0, 0.76),
                record("c", "c", "i", 100.0, 0.75),
            ],
        };
        let out = apply_filters(&m, 0.75, None).unwrap();
        let ids: Vec<&str> = out.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c"]);
    }

    #[test]
    fn distance_range_half_open() {
        let m = DatasetManifest {
            records: vec![
                record("near", "c", "i", 800.0, 0.0),
                record("edge", "c", "i", 1200.0, 0.0),
            ],
        };
        let out = apply_filters(&m, 0.75, Some((0.0, 1200.0))).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].id, "near");
    }

    #[test]
    fn filters_idempotent_and_identity_when_loose() {
        let m = toy_manifest();
        let once = apply_filters(&m, 0.75, None).unwrap();
        let twice = apply_filters(&once, 0.75, None).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once, m);
    }

    #[test]
    fn empty_filter_result_names_the_filter() {
        let m = DatasetManifest { records: vec![record("x", "c", "i", 100.0, 0.9)] };
        match apply_filters(&m, 0.75, None) {
            Err(HarnessError::EmptyAfterFilter { filter }) => {
                assert!(filter.contains("null"), "{filter}")
            }
            other => panic!("expected EmptyAfterFilter, got {other:?}"),
        }
    }

    #[test]
    fn group1_is_the_whole_set_twice() {
        let m = toy_manifest();
        let (adapt, test) = make_splits(&m, &SplitPolicy::Group1).unwrap();
        assert_eq!(adapt, m);
        assert_eq!(test, m);
    }

    #[test]
    fn group2_by_instance_disjoint_and_covering() {
        let m = toy_manifest();
        for split_index in 0..3 {
            let (adapt, test) =
                make_splits(&m, &SplitPolicy::Group2ByInstance { split_index }).unwrap();
            assert_eq!(adapt.len() + test.len(), m.len());
            for t in &test.records {
                assert!(!adapt.records.contains(t));
            }
            // Each class holds out exactly one instance.
            for class in m.classes() {
                let held: Vec<&str> = test
                    .records
                    .iter()
                    .filter(|r| r.class == class)
                    .map(|r| r.instance.as_str())
                    .collect();
                assert!(!held.is_empty());
                assert!(held.windows(2).all(|w| w[0] == w[1]));
            }
        }
    }

    #[test]
    fn group2_fixed_count_arithmetic() {
        // 12 frames per class, hold out 4: 8 remain for adaptation.
        let m = toy_manifest();
        let (adapt, test) =
            make_splits(&m, &SplitPolicy::Group2FixedCount { test_per_class: 4, seed: 1 })
                .unwrap();
        for class in m.classes() {
            let n_test = test.records.iter().filter(|r| r.class == class).count();
            let n_adapt = adapt.records.iter().filter(|r| r.class == class).count();
            assert_eq!(n_test, 4);
            assert_eq!(n_adapt, 8);
        }
        assert_eq!(adapt.len() + test.len(), m.len());
    }

    #[test]
    fn single_instance_class_rejected_for_instance_holdout() {
        let m = DatasetManifest {
            records: vec![record("only", "c", "solo", 100.0, 0.0)],
        };
        assert!(make_splits(&m, &SplitPolicy::Group2ByInstance { split_index: 0 }).is_err());
    }

    #[test]
    fn ingest_counts_and_stats() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for class in ["cup", "bowl"] {
            let inst = root.join(class).join("inst0");
            std::fs::create_dir_all(&inst).unwrap();
            for frame in 0..3 {
                let depth = DepthImage::new(2, 2, vec![0, 0, 100, 300]).unwrap();
                depth.write_pgm(&inst.join(format!("f{frame}.pgm"))).unwrap();
                shiftbench_depthcolor::ColorImage::new(2, 2, vec![0; 12])
                    .unwrap()
                    .write_ppm(&inst.join(format!("f{frame}.ppm")))
                    .unwrap();
            }
        }
        let m = ingest(root).unwrap();
        assert_eq!(m.len(), 6);
        for r in &m.records {
            assert!(r.rgb_path.is_some() && r.depth_path.is_some());
            assert_eq!(r.null_fraction, Some(0.5));
            assert_eq!(r.median_distance_mm, Some(100.0));
        }
    }

    #[test]
    fn ingest_all_null_depth_fraction_one() {
        let dir = tempfile::tempdir().unwrap();
        let inst = dir.path().join("c").join("i");
        std::fs::create_dir_all(&inst).unwrap();
        DepthImage::new(2, 1, vec![0, 0]).unwrap().write_pgm(&inst.join("f.pgm")).unwrap();
        let m = ingest(dir.path()).unwrap();
        assert_eq!(m.records[0].null_fraction, Some(1.0));
        assert_eq!(m.records[0].median_distance_mm, None);
    }
}
