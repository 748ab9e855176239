//! Pairing of clean/noisy corpora by file name and fixed-length segmentation.

use crate::error::{Error, Result};
use crate::train::TrainPair;
use crate::wav::read_wav;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Clean,
    Noisy,
}

/// A file present on only one side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Orphan {
    pub side: Side,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    /// `(clean, noisy)`, sorted by file name.
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub orphans: Vec<Orphan>,
    pub segment_length: usize,
}

/// Position of one segment inside an utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpan {
    pub start: usize,
    /// Number of real samples; the rest up to the segment length is zero padding.
    pub valid: usize,
    pub padded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub span: SegmentSpan,
    pub pair: TrainPair,
}

fn wav_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_file() && name.to_ascii_lowercase().ends_with(".wav") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn build_dataset_index(clean_dir: &Path, noisy_dir: &Path, segment_length: usize) -> Result<DatasetIndex> {
    if segment_length == 0 {
        return Err(Error::Dataset("segment length must be positive".into()));
    }
    let clean = wav_names(clean_dir)?;
    let noisy = wav_names(noisy_dir)?;
    let mut pairs = Vec::new();
    let mut orphans = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < clean.len() || j < noisy.len() {
        match (clean.get(i), noisy.get(j)) {
            (Some(c), Some(n)) if c == n => {
                pairs.push((clean_dir.join(c), noisy_dir.join(n)));
                i += 1;
                j += 1;
            }
            (Some(c), n) if n.map_or(true, |n| c < n) => {
                orphans.push(Orphan {
                    side: Side::Clean,
                    path: clean_dir.join(c),
                });
                i += 1;
            }
            (_, Some(n)) => {
                orphans.push(Orphan {
                    side: Side::Noisy,
                    path: noisy_dir.join(n),
                });
                j += 1;
            }
            (_, None) => unreachable!("loop condition guarantees one side remains"),
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no file names shared between {} and {}",
            clean_dir.display(),
            noisy_dir.display()
        )));
    }
    Ok(DatasetIndex {
        pairs,
        orphans,
        segment_length,
    })
}

/// Full segments followed by one zero-padded tail segment when `len` is not
/// a multiple of `segment_length`.
pub fn segment_spans(len: usize, segment_length: usize) -> Vec<SegmentSpan> {
    let full = len / segment_length;
    let mut spans: Vec<SegmentSpan> = (0..full)
        .map(|k| SegmentSpan {
            start: k * segment_length,
            valid: segment_length,
            padded: false,
        })
        .collect();
    if len % segment_length != 0 {
        spans.push(SegmentSpan {
            start: full * segment_length,
            valid: len % segment_length,
            padded: true,
        });
    }
    spans
}

fn cut(x: &[f64], span: SegmentSpan, segment_length: usize) -> Vec<f64> {
    let mut out = x[span.start..span.start + span.valid].to_vec();
    out.resize(segment_length, 0.0);
    out
}

impl DatasetIndex {
    /// Reads every pair and cuts it into segments.
    pub fn load_segments(&self) -> Result<Vec<Segment>> {
        let mut out = Vec::new();
        for (c, n) in &self.pairs {
            let clean = read_wav(c)?.samples;
            let noisy = read_wav(n)?.samples;
            if clean.len() != noisy.len() {
                return Err(Error::Dataset(format!(
                    "{}: clean has {} samples, noisy has {}",
                    c.file_name().unwrap_or_default().to_string_lossy(),
                    clean.len(),
                    noisy.len()
                )));
            }
            let name = c.file_name().unwrap_or_default().to_string_lossy().into_owned();
            for span in segment_spans(clean.len(), self.segment_length) {
                out.push(Segment {
                    name: name.clone(),
                    span,
                    pair: TrainPair {
                        clean: cut(&clean, span, self.segment_length),
                        noisy: cut(&noisy, span, self.segment_length),
                    },
                });
            }
        }
        Ok(out)
    }
}
