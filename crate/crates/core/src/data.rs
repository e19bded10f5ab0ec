//! Corpus scanning, speaker-disjoint splitting, batching, and the synthetic
//! fixture dataset used by fast tests.
//!
//! Splits are decided per *speaker* with a stable FNV-1a hash so that no
//! speaker ever contributes clips to two splits; random splits would leak
//! speaker identity across train and test and corrupt the speaker-variation
//! diagnostics downstream.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::features::{self, FeatureGrid, FRAMES, MELS};
use crate::rng::SeededRng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("could not read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("class directory {0} contains no usable wav files")]
    EmptyClass(String),
    #[error("no class directories found under {0}")]
    NoClasses(String),
    #[error("cannot iterate an empty split")]
    EmptySplit,
    #[error("batch_size must be at least 1")]
    BadBatchSize,
    #[error("synthetic dataset needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error(transparent)]
    Feature(#[from] features::FeatureError),
}

/// One featurized clip.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub features: FeatureGrid,
    pub label: usize,
    pub speaker_id: String,
    pub path: String,
}

/// Train/val/test partition plus the class index.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub class_names: Vec<String>,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Split bucket for one speaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitAssignment {
    Train,
    Val,
    Test,
}

/// 64-bit FNV-1a over the speaker id. Stable across platforms and releases,
/// which is what keeps split membership reproducible.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Deterministically bucket a speaker: hash mod 100 lands in val below
/// `val_pct`, in test below `val_pct + test_pct`, in train otherwise.
pub fn assign_split(speaker_id: &str, val_pct: u64, test_pct: u64) -> SplitAssignment {
    assert!(val_pct + test_pct < 100, "val and test percentages must sum below 100");
    let bucket = fnv1a64(speaker_id.as_bytes()) % 100;
    if bucket < val_pct {
        SplitAssignment::Val
    } else if bucket < val_pct + test_pct {
        SplitAssignment::Test
    } else {
        SplitAssignment::Train
    }
}

/// Per-class ingestion counts, serialized as the scan report.
#[derive(Debug, Clone, Serialize)]
pub struct IngestionReport {
    pub classes: Vec<ClassReport>,
    pub skipped_files: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassReport {
    pub name: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Options for [`scan_corpus`].
#[derive(Debug, Clone, Default)]
pub struct ScanOptions {
    /// Keep only these classes (exact directory names). `None` keeps all.
    pub class_filter: Option<Vec<String>>,
    /// Cap clips per class, taken in lexicographic filename order.
    pub max_clips_per_class: Option<usize>,
    pub val_pct: Option<u64>,
    pub test_pct: Option<u64>,
}

/// Result of [`scan_corpus`].
#[derive(Debug)]
pub struct ScanOutcome {
    pub split: DatasetSplit,
    pub report: IngestionReport,
}

/// Parse `<speaker>_nohash_<n>.wav` into the speaker id.
fn parse_speaker(file_name: &str) -> Option<&str> {
    let stem = file_name.strip_suffix(".wav")?;
    let at = stem.find("_nohash_")?;
    if at == 0 {
        return None;
    }
    // The trailing part must be a clip number.
    let n = &stem[at + "_nohash_".len()..];
    if n.is_empty() || !n.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Some(&file_name[..at])
}

/// Scan a Speech-Commands-layout directory tree: one subdirectory per class,
/// clips named `<speaker>_nohash_<n>.wav`. Classes are sorted
/// lexicographically and indexed from 0. Feature extraction runs
/// file-parallel; results are deterministic for a fixed tree.
pub fn scan_corpus(root: &Path, opts: &ScanOptions) -> Result<ScanOutcome, DataError> {
    let io_err = |p: &Path, source| DataError::Io {
        path: p.display().to_string(),
        source,
    };

    let mut class_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| io_err(root, e))? {
        let entry = entry.map_err(|e| io_err(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == "_background_noise_" {
            continue;
        }
        if let Some(filter) = &opts.class_filter {
            if !filter.contains(&name) {
                continue;
            }
        }
        class_dirs.push((name, path));
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(root.display().to_string()));
    }

    let class_names: Vec<String> = class_dirs.iter().map(|(n, _)| n.clone()).collect();
    let mut skipped = 0usize;
    let mut work: Vec<(usize, String, PathBuf)> = Vec::new();
    for (label, (name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<String> = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
            let entry = entry.map_err(|e| io_err(dir, e))?;
            let fname = entry.file_name().to_string_lossy().into_owned();
            if fname.ends_with(".wav") {
                files.push(fname);
            }
        }
        files.sort();
        if let Some(cap) = opts.max_clips_per_class {
            files.truncate(cap);
        }
        let mut kept = 0usize;
        for fname in files {
            match parse_speaker(&fname) {
                Some(speaker) => {
                    work.push((label, speaker.to_string(), dir.join(&fname)));
                    kept += 1;
                }
                None => {
                    eprintln!("warning: skipping unparseable file name {fname:?} in {name}");
                    skipped += 1;
                }
            }
        }
        if kept == 0 {
            return Err(DataError::EmptyClass(dir.display().to_string()));
        }
    }

    // Featurize in parallel, preserving the deterministic work order.
    let examples: Vec<Result<LabeledExample, DataError>> = work
        .par_iter()
        .map(|(label, speaker, path)| {
            let wave = features::load_wav(path)?;
            Ok(LabeledExample {
                features: features::log_mel(&wave),
                label: *label,
                speaker_id: speaker.clone(),
                path: path.display().to_string(),
            })
        })
        .collect();

    let val_pct = opts.val_pct.unwrap_or(10);
    let test_pct = opts.test_pct.unwrap_or(10);
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        class_names: class_names.clone(),
    };
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for ex in examples {
        let ex = ex?;
        let entry = counts.entry(ex.label).or_default();
        match assign_split(&ex.speaker_id, val_pct, test_pct) {
            SplitAssignment::Train => {
                entry.0 += 1;
                split.train.push(ex);
            }
            SplitAssignment::Val => {
                entry.1 += 1;
                split.val.push(ex);
            }
            SplitAssignment::Test => {
                entry.2 += 1;
                split.test.push(ex);
            }
        }
    }

    let classes = class_names
        .iter()
        .enumerate()
        .map(|(label, name)| {
            let (train, val, test) = counts.get(&label).copied().unwrap_or_default();
            ClassReport {
                name: name.clone(),
                train,
                val,
                test,
            }
        })
        .collect::<Vec<_>>();
    let total = split.train.len() + split.val.len() + split.test.len();
    Ok(ScanOutcome {
        split,
        report: IngestionReport {
            classes,
            skipped_files: skipped,
            total,
        },
    })
}

/// Noiseless class template: a Gaussian band of amplitude 0.9 centered at
/// mel row `(c+1)·MELS/(num_classes+1)`.
pub fn synth_class_template(class: usize, num_classes: usize) -> Vec<f64> {
    let center = (class + 1) as f64 * MELS as f64 / (num_classes + 1) as f64;
    let sigma = 3.0;
    let mut grid = vec![0.0; MELS * FRAMES];
    for m in 0..MELS {
        let d = m as f64 - center;
        let v = 0.9 * (-d * d / (2.0 * sigma * sigma)).exp();
        for t in 0..FRAMES {
            grid[m * FRAMES + t] = v;
        }
    }
    grid
}

/// Synthetic fixture dataset: per-class banded grids plus seeded Gaussian
/// noise (σ defaults to 0.05), clamped to [0, 1]. Speaker ids are unique per
/// example, and the usual speaker-hash split applies.
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    synth_dataset_with_noise(num_classes, per_class, seed, 0.05)
}

/// [`synth_dataset`] with explicit noise level; σ = 0 gives the raw class
/// templates.
pub fn synth_dataset_with_noise(
    num_classes: usize,
    per_class: usize,
    seed: u64,
    sigma: f64,
) -> Result<DatasetSplit, DataError> {
    if num_classes < 2 {
        return Err(DataError::TooFewClasses(num_classes));
    }
    let class_names: Vec<String> = (0..num_classes).map(|c| format!("class_{c:02}")).collect();
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        class_names,
    };
    for class in 0..num_classes {
        let template = synth_class_template(class, num_classes);
        for i in 0..per_class {
            let mut rng = SeededRng::derive(seed, (class * per_class + i) as u64);
            let values: Vec<f64> = template
                .iter()
                .map(|&v| (v + sigma * rng.normal()).clamp(0.0, 1.0))
                .collect();
            let speaker_id = format!("synth_{class:02}_{i:04}");
            let ex = LabeledExample {
                features: FeatureGrid::from_values(values)
                    .expect("clamped values are in range"),
                label: class,
                speaker_id: speaker_id.clone(),
                path: format!("synth://{speaker_id}"),
            };
            match assign_split(&ex.speaker_id, 10, 10) {
                SplitAssignment::Train => split.train.push(ex),
                SplitAssignment::Val => split.val.push(ex),
                SplitAssignment::Test => split.test.push(ex),
            }
        }
    }
    Ok(split)
}

/// Batches for one epoch: a seeded Fisher-Yates shuffle of `0..len`, cut
/// into `batch_size` chunks with the final short batch kept.
pub fn batch_iter(
    len: usize,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    if len == 0 {
        return Err(DataError::EmptySplit);
    }
    if batch_size == 0 {
        return Err(DataError::BadBatchSize);
    }
    let mut order: Vec<usize> = (0..len).collect();
    SeededRng::new(shuffle_seed).shuffle(&mut order);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::write_wav_pcm16;

    fn make_corpus(dir: &Path, classes: &[(&str, &[&str])]) {
        for (class, files) in classes {
            let cdir = dir.join(class);
            std::fs::create_dir_all(&cdir).unwrap();
            for f in *files {
                write_wav_pcm16(&cdir.join(f), &[0i16; 640]).unwrap();
            }
        }
    }

    #[test]
    fn scan_orders_classes_lexicographically() {
        let dir = tempfile::tempdir().unwrap();
        make_corpus(
            dir.path(),
            &[
                ("stop", &["a_nohash_0.wav"][..]),
                ("go", &["b_nohash_0.wav"][..]),
            ],
        );
        let out = scan_corpus(dir.path(), &ScanOptions::default()).unwrap();
        assert_eq!(out.split.class_names, vec!["go", "stop"]);
        let all: Vec<&LabeledExample> = out
            .split
            .train
            .iter()
            .chain(&out.split.val)
            .chain(&out.split.test)
            .collect();
        for ex in all {
            let expected = if ex.path.contains("stop") { 1 } else { 0 };
            assert_eq!(ex.label, expected);
        }
    }

    #[test]
    fn speaker_parsed_from_filename_prefix() {
        assert_eq!(parse_speaker("abc_nohash_0.wav"), Some("abc"));
        assert_eq!(parse_speaker("0a2b3c_nohash_17.wav"), Some("0a2b3c"));
        assert_eq!(parse_speaker("no_suffix.wav"), None);
        assert_eq!(parse_speaker("_nohash_0.wav"), None);
        assert_eq!(parse_speaker("x_nohash_.wav"), None);
    }

    #[test]
    fn thirty_five_class_layout_yields_thirty_five_classes() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = (0..35).map(|i| format!("word{i:02}")).collect();
        for name in &names {
            let cdir = dir.path().join(name);
            std::fs::create_dir_all(&cdir).unwrap();
            write_wav_pcm16(&cdir.join("spk_nohash_0.wav"), &[0i16; 320]).unwrap();
        }
        let out = scan_corpus(dir.path(), &ScanOptions::default()).unwrap();
        assert_eq!(out.split.num_classes(), 35);
    }

    #[test]
    fn unparseable_names_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        make_corpus(
            dir.path(),
            &[("go", &["a_nohash_0.wav", "README.wav"][..])],
        );
        let out = scan_corpus(dir.path(), &ScanOptions::default()).unwrap();
        assert_eq!(out.report.skipped_files, 1);
        assert_eq!(out.report.total, 1);
    }

    #[test]
    fn empty_class_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("go")).unwrap();
        assert!(matches!(
            scan_corpus(dir.path(), &ScanOptions::default()),
            Err(DataError::EmptyClass(_))
        ));
    }

    #[test]
    fn background_noise_directory_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        make_corpus(
            dir.path(),
            &[
                ("go", &["a_nohash_0.wav"][..]),
                ("_background_noise_", &["hum_nohash_0.wav"][..]),
            ],
        );
        let out = scan_corpus(dir.path(), &ScanOptions::default()).unwrap();
        assert_eq!(out.split.class_names, vec!["go"]);
    }

    #[test]
    fn same_speaker_always_lands_in_same_split() {
        for speaker in ["alice", "bob", "x1y2z3"] {
            let a = assign_split(speaker, 10, 10);
            let b = assign_split(speaker, 10, 10);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_percentages_put_everything_in_train() {
        for speaker in ["a", "b", "c", "d", "e"] {
            assert_eq!(assign_split(speaker, 0, 0), SplitAssignment::Train);
        }
    }

    #[test]
    fn split_fractions_are_near_request() {
        let mut val = 0;
        let mut test = 0;
        let n = 1000;
        for i in 0..n {
            match assign_split(&format!("speaker_{i}"), 10, 10) {
                SplitAssignment::Val => val += 1,
                SplitAssignment::Test => test += 1,
                SplitAssignment::Train => {}
            }
        }
        let val_pct = 100.0 * val as f64 / n as f64;
        let test_pct = 100.0 * test as f64 / n as f64;
        assert!((val_pct - 10.0).abs() <= 3.0, "val {val_pct}%");
        assert!((test_pct - 10.0).abs() <= 3.0, "test {test_pct}%");
    }

    #[test]
    fn no_speaker_spans_two_splits() {
        let split = synth_dataset(3, 40, 7).unwrap();
        let mut seen: std::collections::HashMap<String, u8> = std::collections::HashMap::new();
        for (tag, part) in [(0u8, &split.train), (1, &split.val), (2, &split.test)] {
            for ex in part {
                if let Some(&prev) = seen.get(&ex.speaker_id) {
                    assert_eq!(prev, tag, "speaker {} in two splits", ex.speaker_id);
                }
                seen.insert(ex.speaker_id.clone(), tag);
            }
        }
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let a = synth_dataset(3, 20, 42).unwrap();
        let b = synth_dataset(3, 20, 42).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.features.values(), y.features.values());
            assert_eq!(x.speaker_id, y.speaker_id);
        }
    }

    #[test]
    fn synth_band_centers_match_placement_formula() {
        // Two classes: centers at 80/3 ≈ 27 and 160/3 ≈ 53.
        for (class, expected) in [(0usize, 27usize), (1, 53)] {
            let template = synth_class_template(class, 2);
            let argmax = (0..MELS)
                .max_by(|&a, &b| {
                    template[a * FRAMES]
                        .partial_cmp(&template[b * FRAMES])
                        .unwrap()
                })
                .unwrap();
            assert!(
                (argmax as isize - expected as isize).abs() <= 1,
                "class {class} band at {argmax}, expected ≈{expected}"
            );
        }
    }

    #[test]
    fn nearest_centroid_oracle_is_perfect_on_noiseless_variants() {
        let k = 4;
        let split = synth_dataset_with_noise(k, 10, 3, 0.0).unwrap();
        let templates: Vec<Vec<f64>> = (0..k).map(|c| synth_class_template(c, k)).collect();
        let all = split.train.iter().chain(&split.val).chain(&split.test);
        for ex in all {
            let nearest = (0..k)
                .min_by(|&a, &b| {
                    let da: f64 = templates[a]
                        .iter()
                        .zip(ex.features.values())
                        .map(|(t, v)| (t - v) * (t - v))
                        .sum();
                    let db: f64 = templates[b]
                        .iter()
                        .zip(ex.features.values())
                        .map(|(t, v)| (t - v) * (t - v))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(nearest, ex.label);
        }
    }

    #[test]
    fn batches_partition_with_short_tail() {
        let batches = batch_iter(10, 3, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn same_seed_same_order() {
        assert_eq!(batch_iter(20, 4, 9).unwrap(), batch_iter(20, 4, 9).unwrap());
        assert_ne!(batch_iter(20, 4, 9).unwrap(), batch_iter(20, 4, 10).unwrap());
    }

    #[test]
    fn batches_cover_every_index_exactly_once() {
        let batches = batch_iter(17, 5, 3).unwrap();
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..17).collect::<Vec<usize>>());
    }

    #[test]
    fn empty_split_is_an_iteration_error() {
        assert!(matches!(batch_iter(0, 4, 0), Err(DataError::EmptySplit)));
    }
}
