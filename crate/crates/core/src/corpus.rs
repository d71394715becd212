//! Synthetic corpora: generation, preprocessing and subject splits.

use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::data_io::{split_by_subject, synth_generate, CirRecording, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::parallel;
use crate::preprocess::{build_samples, PreprocessParams, Sample};

/// Subjects 1–4 and 6 train, 5 validates, 7 tests.
pub const TRAIN_SUBJECTS: [u8; 5] = [1, 2, 3, 4, 6];
pub const VAL_SUBJECTS: [u8; 1] = [5];
pub const TEST_SUBJECTS: [u8; 1] = [7];

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub synth: SynthConfig,
    pub preprocess: PreprocessParams,
    pub subjects: u8,
    pub recordings_per_class: usize,
}

impl CorpusConfig {
    /// A corpus small enough to train on in seconds: 16-packet windows, 4
    /// selected bins and 8-window segments.
    pub fn small(seed: u64) -> Self {
        let preprocess = PreprocessParams { window: 16, step: 8, bins: 4, segment: 8 };
        Self {
            synth: SynthConfig { packets: 16 + 31 * 8, bins: 16, seed, ..SynthConfig::default() },
            preprocess,
            subjects: 7,
            recordings_per_class: 4,
        }
    }
}

/// Every `(class, subject, index)` recording, generated in parallel.
pub fn generate_recordings(cfg: &CorpusConfig) -> Result<Vec<CirRecording>> {
    let classes = cfg.synth.classes.len();
    let jobs: Vec<(usize, u8, u64)> = (1..=cfg.subjects)
        .flat_map(|s| (0..classes).flat_map(move |c| (0..cfg.recordings_per_class as u64).map(move |i| (c, s, i))))
        .collect();
    parallel::map_slice(&jobs, |&(c, s, i)| synth_generate(&cfg.synth, c, s, i)).into_iter().collect()
}

/// Preprocesses recordings in parallel; sample `recording` ids index `recs`.
pub fn build_dataset(recs: &[CirRecording], params: &PreprocessParams) -> Result<Vec<Sample>> {
    let idx: Vec<usize> = (0..recs.len()).collect();
    let per = parallel::map_slice(&idx, |&i| build_samples(&recs[i], params, i));
    let mut out = Vec::new();
    for p in per {
        out.extend(p?);
    }
    Ok(out)
}

/// Subject split with the fixed train/validation/test assignment.
pub fn split_samples(samples: Vec<Sample>, classes: usize) -> Result<Split<Sample>> {
    split_by_subject(samples, |s| (s.subject, s.label as u8), classes, &TRAIN_SUBJECTS, &VAL_SUBJECTS, &TEST_SUBJECTS)
}

/// Generate, preprocess and split in one go.
pub fn synthetic_split(cfg: &CorpusConfig) -> Result<Split<Sample>> {
    let recs = generate_recordings(cfg)?;
    let samples = build_dataset(&recs, &cfg.preprocess)?;
    split_samples(samples, cfg.synth.classes.len())
}

/// Writes each sample as an SPKC file holding one `data` tensor, plus an
/// `index.csv` (`path,label,subject,recording,segment`). Returns the index path.
pub fn save_samples(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut index = String::from("path,label,subject,recording,segment\n");
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:06}.spkc");
        checkpoint::save(&dir.join(&name), &[("data".to_string(), s.data.clone())])?;
        index.push_str(&format!("{name},{},{},{},{}\n", s.label, s.subject, s.recording, s.segment));
    }
    let path = dir.join("index.csv");
    std::fs::write(&path, index)?;
    Ok(path)
}

/// Reads an index written by [`save_samples`]; paths resolve against the
/// index directory.
pub fn load_samples(index: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(index)?;
    let base = index.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "path,label,subject,recording,segment" {
        return Err(Error::format(0, format!("{}: unexpected sample index header '{header}'", index.display())));
    }
    let rows: Vec<(usize, &str)> = lines.enumerate().filter(|(_, l)| !l.trim().is_empty()).collect();
    parallel::map_slice(&rows, |&(n, line)| {
        let bad = || Error::format(0, format!("{} line {}: malformed row '{line}'", index.display(), n + 2));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let tensors = checkpoint::load(&base.join(f[0]))?;
        let data = tensors
            .into_iter()
            .find(|(k, _)| k == "data")
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(0, format!("{}: no 'data' tensor", f[0])))?;
        Ok(Sample {
            data,
            label: f[1].parse().map_err(|_| bad())?,
            subject: f[2].parse().map_err(|_| bad())?,
            recording: f[3].parse().map_err(|_| bad())?,
            segment: f[4].parse().map_err(|_| bad())?,
        })
    })
    .into_iter()
    .collect()
}
