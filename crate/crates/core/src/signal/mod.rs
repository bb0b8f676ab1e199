//! Vibration recordings → labelled windows → train/test splits → paired
//! source/target mini-batches.
//!
//! On disk a dataset is a JSON manifest plus one headerless file of
//! little-endian `f32` samples per recording.

mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};

pub use synth::{synth_generate, SynthConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recording {
    pub condition: String,
    /// Class id from the manifest label map.
    pub class: u32,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: String,
    pub sampling_rate: f64,
    pub conditions: Vec<String>,
    /// Ordered label map; position in this list is the class index.
    pub classes: Vec<ClassLabel>,
    pub recordings: Vec<Recording>,
    pub window_length: usize,
    pub window_step: usize,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 || self.window_step == 0 {
            return Err(Error::Manifest("window length and step must be at least 1".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Manifest("empty label map".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].iter().any(|o| o.id == c.id) {
                return Err(Error::Manifest(format!("duplicate class id {}", c.id)));
            }
        }
        for r in &self.recordings {
            if self.class_index(r.class).is_none() {
                return Err(Error::Manifest(format!(
                    "recording {} references unknown class id {}",
                    r.path.display(),
                    r.class
                )));
            }
            if !self.conditions.contains(&r.condition) {
                return Err(Error::Manifest(format!(
                    "recording {} references unknown condition `{}`",
                    r.path.display(),
                    r.condition
                )));
            }
        }
        Ok(())
    }

    /// Canonical index of a class id.
    pub fn class_index(&self, id: u32) -> Option<usize> {
        self.classes.iter().position(|c| c.id == id)
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn read_recording(path: &Path, samples: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != samples * 4 {
        return Err(Error::Manifest(format!(
            "{}: expected {} bytes for {} samples, found {}",
            path.display(),
            samples * 4,
            samples,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_recording(path: &Path, signal: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = signal.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json` and every recording into `dir`; `signals` is
/// parallel to `manifest.recordings`.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, signals: &[Vec<f32>]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (rec, sig) in manifest.recordings.iter().zip(signals) {
        write_recording(&dir.join(&rec.path), sig)?;
    }
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// Sliding windows `[i·step, i·step + window)`; there are
/// `floor((len − window) / step) + 1` of them.
pub fn segment_signal<'a>(signal: &'a [f32], window: usize, step: usize, recording: &str) -> Result<Vec<&'a [f32]>> {
    if window == 0 || step == 0 {
        return Err(Error::invalid("segment_signal", "window and step must be at least 1"));
    }
    if signal.len() < window {
        return Err(Error::SignalTooShort {
            recording: recording.to_string(),
            len: signal.len(),
            window,
        });
    }
    let count = (signal.len() - window) / step + 1;
    Ok((0..count).map(|i| &signal[i * step..i * step + window]).collect())
}

/// Zero mean, unit (population) variance; constant windows become zeros.
pub fn standardize(window: &[f32]) -> Vec<f32> {
    let n = window.len() as f64;
    if window.is_empty() {
        return Vec::new();
    }
    let mean = window.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = window.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return vec![0.0; window.len()];
    }
    let inv = var.sqrt().recip();
    window.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// One standardized window.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub window: Vec<f32>,
    pub label: Option<usize>,
    pub condition: String,
    pub domain: Domain,
}

/// Standardized windows grouped by condition and class index.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub manifest: DatasetManifest,
    pub windows: BTreeMap<(String, usize), Vec<Vec<f32>>>,
}

impl WindowedDataset {
    /// Reads, segments and standardizes every recording of a manifest
    /// located at `manifest_path`.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let signals = manifest
            .recordings
            .iter()
            .map(|r| read_recording(&base.join(&r.path), r.samples))
            .collect::<Result<Vec<_>>>()?;
        Self::from_signals(manifest, &signals)
    }

    pub fn from_signals(manifest: DatasetManifest, signals: &[Vec<f32>]) -> Result<Self> {
        manifest.validate()?;
        if signals.len() != manifest.recordings.len() {
            return Err(Error::Manifest("signal count does not match recordings".into()));
        }
        let mut windows: BTreeMap<(String, usize), Vec<Vec<f32>>> = BTreeMap::new();
        for (rec, sig) in manifest.recordings.iter().zip(signals) {
            let class = manifest.class_index(rec.class).expect("validated");
            let segs = segment_signal(sig, manifest.window_length, manifest.window_step, &rec.path.display().to_string())?;
            windows
                .entry((rec.condition.clone(), class))
                .or_default()
                .extend(segs.into_iter().map(standardize));
        }
        Ok(Self { manifest, windows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Training windows per (condition, class).
    pub train: usize,
    /// Test windows per (condition, class).
    pub test: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// 200 training and 50 test windows per class and condition.
    pub fn standard(seed: u64) -> Self {
        Self {
            train: 200,
            test: 50,
            seed,
        }
    }
}

/// Labelled train/test samples of one condition.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Shuffles the windows of every (condition, class) and keeps the first
/// `train + test`: the first `train` for training, the next `test` for
/// testing, the remainder discarded. Samples are tagged as source; use
/// [`Split::as_target`] for the target side.
pub fn make_splits(data: &WindowedDataset, spec: &SplitSpec) -> Result<BTreeMap<String, Split>> {
    let mut out: BTreeMap<String, Split> = BTreeMap::new();
    for ((condition, class), windows) in &data.windows {
        let need = spec.train + spec.test;
        if windows.len() < need {
            return Err(Error::InsufficientWindows {
                condition: condition.clone(),
                class: *class,
                available: windows.len(),
                requested: need,
            });
        }
        let mut idx: Vec<usize> = (0..windows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("split/{condition}/{class}")));
        idx.shuffle(&mut rng);
        let split = out.entry(condition.clone()).or_default();
        let make = |i: usize| Sample {
            window: windows[i].clone(),
            label: Some(*class),
            condition: condition.clone(),
            domain: Domain::Source,
        };
        split.train.extend(idx[..spec.train].iter().map(|&i| make(i)));
        split.test.extend(idx[spec.train..need].iter().map(|&i| make(i)));
    }
    Ok(out)
}

impl Split {
    pub fn as_target(&self) -> Split {
        let retag = |s: &Sample| Sample {
            domain: Domain::Target,
            ..s.clone()
        };
        Split {
            train: self.train.iter().map(retag).collect(),
            test: self.test.iter().map(retag).collect(),
        }
    }
}

/// Labelled source windows of one step.
#[derive(Debug, Clone)]
pub struct SourceBatch {
    pub windows: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

/// Unlabelled target windows of one step; labels never enter this type.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    pub windows: Vec<Vec<f32>>,
}

/// Produces equal-length epochs of paired source/target mini-batches.
#[derive(Debug)]
pub struct BatchPairer<'a> {
    source: &'a [Sample],
    target: &'a [Sample],
    batch: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchPairer<'a> {
    pub fn new(source: &'a [Sample], target: &'a [Sample], batch: usize, seed: u64) -> Result<Self> {
        if batch < 2 {
            return Err(Error::invalid("batch_pairs", format!("batch size {batch} < 2")));
        }
        if source.is_empty() {
            return Err(Error::Empty("source split"));
        }
        if target.is_empty() {
            return Err(Error::Empty("target split"));
        }
        if source.iter().any(|s| s.label.is_none()) {
            return Err(Error::invalid("batch_pairs", "source sample without label"));
        }
        Ok(Self {
            source,
            target,
            batch,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "batches")),
        })
    }

    /// `ceil(max(|source|, |target|) / n)`.
    pub fn steps_per_epoch(&self) -> usize {
        self.source.len().max(self.target.len()).div_ceil(self.batch)
    }

    fn index_stream(rng: &mut impl Rng, len: usize, total: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(total);
        while out.len() < total {
            let mut perm: Vec<usize> = (0..len).collect();
            perm.shuffle(rng);
            out.extend(perm);
        }
        out.truncate(total);
        out
    }

    /// Reshuffles both domains and returns one epoch of pairs. The shorter
    /// domain (and the tail of the longer one) is topped up with fresh
    /// permutations so every batch is full.
    pub fn next_epoch(&mut self) -> Vec<(SourceBatch, TargetBatch)> {
        let steps = self.steps_per_epoch();
        let total = steps * self.batch;
        let src = Self::index_stream(&mut self.rng, self.source.len(), total);
        let tgt = Self::index_stream(&mut self.rng, self.target.len(), total);
        src.chunks(self.batch)
            .zip(tgt.chunks(self.batch))
            .map(|(s, t)| {
                (
                    SourceBatch {
                        windows: s.iter().map(|&i| self.source[i].window.clone()).collect(),
                        labels: s.iter().map(|&i| self.source[i].label.expect("checked")).collect(),
                    },
                    TargetBatch {
                        windows: t.iter().map(|&i| self.target[i].window.clone()).collect(),
                    },
                )
            })
            .collect()
    }
}
