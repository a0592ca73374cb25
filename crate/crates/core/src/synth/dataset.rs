//! Seeded on-disk datasets: `train/`, `val/`, `test/` exam directories plus a
//! sha256 manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exam::{Exam, ExamError, EXAM_EXTENSION};
use crate::rng::stream;
use crate::synth::generate::{grade_from_bucket, synth_exam_with_grade, SiteProfile};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const MANIFEST: &str = "MANIFEST.sha256";
pub const PROFILE_FILE: &str = "profile.toml";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Exam(#[from] ExamError),
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("split {0:?} must hold at least one exam")]
    EmptySplit(String),
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: &str) -> Option<usize> {
        match split {
            "train" => Some(self.train),
            "val" => Some(self.val),
            "test" => Some(self.test),
            _ => None,
        }
    }
}

/// Largest-remainder rounding of `total` items over `proportions`.
pub fn allocate(proportions: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = proportions.iter().sum();
    let exact: Vec<f64> = proportions.iter().map(|p| p / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - counts[a] as f64, exact[b] - counts[b] as f64);
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Generates one split in memory. Exams are independent given the seed, so
/// they are built in parallel.
pub fn synth_split(profile: &SiteProfile, split: &str, count: usize, seed: u64) -> Result<Vec<Exam>, DatasetError> {
    let split_idx = SPLITS
        .iter()
        .position(|s| *s == split)
        .ok_or_else(|| DatasetError::UnknownSplit(split.into()))? as u64;
    if count == 0 {
        return Err(DatasetError::EmptySplit(split.into()));
    }
    let mut buckets: Vec<usize> = allocate(&profile.grade_distribution, count)
        .into_iter()
        .enumerate()
        .flat_map(|(b, n)| std::iter::repeat(b).take(n))
        .collect();
    buckets.shuffle(&mut stream(seed, &[split_idx, u64::MAX]));
    Ok(buckets
        .into_par_iter()
        .enumerate()
        .map(|(i, bucket)| {
            let mut rng = stream(seed, &[split_idx, i as u64]);
            let grade = grade_from_bucket(bucket, &mut rng);
            let mut exam = synth_exam_with_grade(profile, grade, &mut rng);
            exam.meta.exam_id = format!("{}-{split}-{i:04}", profile.name);
            exam
        })
        .collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes every split plus the profile and a manifest of file hashes.
/// Returns the manifest lines.
pub fn synth_dataset(
    profile: &SiteProfile,
    counts: SplitCounts,
    seed: u64,
    dir: &Path,
) -> Result<Vec<(String, String)>, DatasetError> {
    profile.validate().map_err(DatasetError::Profile)?;
    fs::create_dir_all(dir).map_err(io(dir))?;
    let profile_path = dir.join(PROFILE_FILE);
    let text = toml::to_string(profile).map_err(|e| DatasetError::Profile(e.to_string()))?;
    fs::write(&profile_path, text).map_err(io(&profile_path))?;
    let mut manifest = Vec::new();
    for split in SPLITS {
        let exams = synth_split(profile, split, counts.get(split).expect("known split"), seed)?;
        let split_dir = dir.join(split);
        fs::create_dir_all(&split_dir).map_err(io(&split_dir))?;
        for exam in &exams {
            let path = exam.save(&split_dir)?;
            for p in [path.clone(), path.with_extension(crate::exam::META_EXTENSION)] {
                let bytes = fs::read(&p).map_err(io(&p))?;
                let rel = p.strip_prefix(dir).expect("written under dir");
                manifest.push((rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes)));
            }
        }
    }
    let mut body = String::new();
    for (path, hash) in &manifest {
        body.push_str(&format!("{hash}  {path}\n"));
    }
    let manifest_path = dir.join(MANIFEST);
    fs::write(&manifest_path, body).map_err(io(&manifest_path))?;
    Ok(manifest)
}

/// Re-hashes every file listed in the manifest.
pub fn verify_manifest(dir: &Path) -> Result<usize, DatasetError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let mut checked = 0;
    for (line, entry) in text.lines().enumerate() {
        let (hash, rel) = entry.split_once("  ").ok_or(DatasetError::Manifest {
            line: line + 1,
            message: "expected '<sha256>  <path>'".into(),
        })?;
        let file = dir.join(rel);
        let bytes = fs::read(&file).map_err(io(&file))?;
        if sha256_hex(&bytes) != hash {
            return Err(DatasetError::Checksum { path: file });
        }
        checked += 1;
    }
    Ok(checked)
}

pub fn load_profile(dir: &Path) -> Result<SiteProfile, DatasetError> {
    let path = dir.join(PROFILE_FILE);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    toml::from_str(&text).map_err(|e| DatasetError::Profile(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorruptPolicy {
    #[default]
    FailFast,
    SkipWithReport,
}

#[derive(Debug, Default)]
pub struct LoadedSplit {
    pub exams: Vec<Exam>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Loads every exam of a split in file-name order.
pub fn load_split(dir: &Path, split: &str, policy: CorruptPolicy) -> Result<LoadedSplit, DatasetError> {
    if !SPLITS.contains(&split) {
        return Err(DatasetError::UnknownSplit(split.into()));
    }
    let split_dir = dir.join(split);
    let mut paths: Vec<PathBuf> = fs::read_dir(&split_dir)
        .map_err(io(&split_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == EXAM_EXTENSION))
        .collect();
    paths.sort();
    let mut out = LoadedSplit::default();
    for p in paths {
        match Exam::load(&p) {
            Ok(e) => out.exams.push(e),
            Err(e) if policy == CorruptPolicy::SkipWithReport => {
                log::warn!("skipping {}: {e}", p.display());
                out.skipped.push((p, e.to_string()));
            }
            Err(e) => return Err(e.into()),
        }
    }
    if out.exams.is_empty() {
        return Err(DatasetError::EmptySplit(split.into()));
    }
    Ok(out)
}
