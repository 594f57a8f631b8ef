//! Corpus ingestion, synthetic corpora and training-time snippet subsampling.

mod features;
mod subsample;
mod synth;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use features::{read_features, write_features, FEATURE_VERSION};
pub use subsample::{subsample_indices, subsample_snippets};
pub use synth::{synth_corpus, SynthSpec};

/// File name of the manifest inside a corpus directory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Expression category. Background is implicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExprClass {
    Mae,
    Me,
}

impl ExprClass {
    pub const ALL: [ExprClass; 2] = [ExprClass::Mae, ExprClass::Me];

    /// Column of this class in a T-CAM (background is the last column).
    pub fn column(self) -> usize {
        match self {
            ExprClass::Mae => 0,
            ExprClass::Me => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExprClass::Mae => "mae",
            ExprClass::Me => "me",
        }
    }
}

/// Video-level weak labels (0 or 1 each).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Labels {
    pub mae: u8,
    pub me: u8,
}

impl Labels {
    pub fn new(mae: bool, me: bool) -> Self {
        Labels {
            mae: mae as u8,
            me: me as u8,
        }
    }

    /// `[y_mae, y_me]` as floats.
    pub fn as_vec(&self) -> [f64; 2] {
        [self.mae as f64, self.me as f64]
    }

    pub fn has(&self, class: ExprClass) -> bool {
        match class {
            ExprClass::Mae => self.mae == 1,
            ExprClass::Me => self.me == 1,
        }
    }

    pub fn any(&self) -> bool {
        self.mae == 1 || self.me == 1
    }

    /// Number of positive labels shared with `other`.
    pub fn shared(&self, other: &Labels) -> usize {
        (self.mae & other.mae) as usize + (self.me & other.me) as usize
    }
}

/// Ground-truth expression interval, 1-indexed inclusive frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtInterval {
    pub onset_frame: usize,
    pub offset_frame: usize,
    pub class: ExprClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    pub subject: String,
    pub fps: f64,
    pub frame_count: usize,
    pub snippet_len: usize,
    pub labels: Labels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<GtInterval>>,
}

impl VideoRecord {
    /// Number of snippets, `floor(L / g)`.
    pub fn snippets(&self) -> usize {
        if self.snippet_len == 0 {
            0
        } else {
            self.frame_count / self.snippet_len
        }
    }

    pub fn ground_truth(&self) -> &[GtInterval] {
        self.ground_truth.as_deref().unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.id;
        if self.labels.mae > 1 || self.labels.me > 1 {
            return Err(Error::Data(format!("{id}: labels must be 0 or 1")));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Data(format!("{id}: fps must be positive")));
        }
        if self.snippets() < 1 {
            return Err(Error::Data(format!(
                "{id}: {} frames with snippet length {} gives no snippets",
                self.frame_count, self.snippet_len
            )));
        }
        if let Some(gt) = &self.ground_truth {
            for iv in gt {
                if !(1 <= iv.onset_frame
                    && iv.onset_frame <= iv.offset_frame
                    && iv.offset_frame <= self.frame_count)
                {
                    return Err(Error::Data(format!(
                        "{id}: ground truth [{}, {}] outside 1..={}",
                        iv.onset_frame, iv.offset_frame, self.frame_count
                    )));
                }
            }
            for class in ExprClass::ALL {
                let present = gt.iter().any(|iv| iv.class == class);
                if present != self.labels.has(class) {
                    return Err(Error::Data(format!(
                        "{id}: label {}={} inconsistent with ground truth",
                        class.as_str(),
                        self.labels.has(class) as u8
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Flow,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
        }
    }
}

/// Per-video, per-modality `T × D` snippet features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub video_id: String,
    pub modality: Modality,
    pub values: Tensor,
}

impl FeatureMatrix {
    pub fn snippets(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// One video with both feature streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub record: VideoRecord,
    pub rgb: FeatureMatrix,
    pub flow: FeatureMatrix,
}

impl Video {
    pub fn id(&self) -> &str {
        &self.record.id
    }

    pub fn snippets(&self) -> usize {
        self.rgb.snippets()
    }
}

/// Immutable collection of videos sharing a feature dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub videos: Vec<Video>,
}

impl Corpus {
    pub fn new(videos: Vec<Video>) -> Result<Self> {
        let corpus = Corpus { videos };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Feature dimension `D`, if any video is present.
    pub fn dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.rgb.dim())
    }

    pub fn records(&self) -> Vec<VideoRecord> {
        self.videos.iter().map(|v| v.record.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        let mut seen = std::collections::HashSet::new();
        for v in &self.videos {
            let id = v.id();
            v.record.validate()?;
            if !seen.insert(id) {
                return Err(Error::Data(format!("duplicate video id {id}")));
            }
            if v.rgb.snippets() != v.flow.snippets() {
                return Err(Error::Data(format!(
                    "{id}: rgb has {} snippets, flow has {}",
                    v.rgb.snippets(),
                    v.flow.snippets()
                )));
            }
            if v.rgb.snippets() != v.record.snippets() {
                return Err(Error::Data(format!(
                    "{id}: features have {} snippets, manifest implies {}",
                    v.rgb.snippets(),
                    v.record.snippets()
                )));
            }
            if Some(v.rgb.dim()) != dim || Some(v.flow.dim()) != dim {
                return Err(Error::Data(format!(
                    "{id}: feature dimension differs from the corpus ({:?})",
                    dim
                )));
            }
        }
        Ok(())
    }
}

pub fn feature_file_name(video_id: &str, modality: Modality) -> String {
    format!("{video_id}.{}.mcwf", modality.as_str())
}

pub fn read_manifest(path: &Path) -> Result<Vec<VideoRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: malformed manifest: {e}", path.display())))
}

pub fn write_manifest(path: &Path, records: &[VideoRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads every video in the manifest. Any violation rejects the whole corpus.
pub fn load_corpus(manifest_path: &Path, feature_dir: &Path) -> Result<Corpus> {
    let records = read_manifest(manifest_path)?;
    let mut videos = Vec::with_capacity(records.len());
    for record in records {
        record.validate()?;
        let load = |modality| -> Result<FeatureMatrix> {
            let path = feature_dir.join(feature_file_name(&record.id, modality));
            if !path.exists() {
                return Err(Error::Data(format!(
                    "{}: missing {} features ({})",
                    record.id,
                    modality.as_str(),
                    path.display()
                )));
            }
            let values = read_features(&path)
                .map_err(|e| Error::Data(format!("{}: {e}", record.id)))?;
            Ok(FeatureMatrix {
                video_id: record.id.clone(),
                modality,
                values,
            })
        };
        let rgb = load(Modality::Rgb)?;
        let flow = load(Modality::Flow)?;
        videos.push(Video { record, rgb, flow });
    }
    Corpus::new(videos)
}

/// Loads `dir/manifest.json` with features from `dir`.
pub fn load_corpus_dir(dir: &Path) -> Result<Corpus> {
    load_corpus(&dir.join(MANIFEST_FILE), dir)
}

/// Writes the manifest and all feature files into `dir` (created if needed).
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in &corpus.videos {
        for fm in [&v.rgb, &v.flow] {
            write_features(&dir.join(feature_file_name(v.id(), fm.modality)), &fm.values)?;
        }
    }
    write_manifest(&dir.join(MANIFEST_FILE), &corpus.records())
}

#[cfg(test)]
mod tests;
