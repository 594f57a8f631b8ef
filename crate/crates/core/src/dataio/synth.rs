//! Synthetic corpora with planted expression intervals.
//!
//! Background snippets are i.i.d. standard normal in both streams. Snippets
//! covered by a planted interval are shifted by `effect_size` along a
//! per-class unit direction shared by the whole corpus; the flow stream gets
//! the same shift on top of its own independent noise. Intervals are
//! snippet-aligned so the planted ground truth is exactly recoverable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, ExprClass, FeatureMatrix, GtInterval, Labels, Modality, Video, VideoRecord};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Feature dimension `D`.
    pub d: usize,
    pub fps: f64,
    /// Frames per snippet `g`.
    pub g: usize,
    /// Inclusive range of snippet counts per video.
    pub t_min: usize,
    pub t_max: usize,
    pub effect_size: f64,
    /// Videos are assigned round-robin to this many subjects.
    pub subjects: usize,
    /// Probability that a video carries each class, `[mae, me]`.
    pub label_rates: [f64; 2],
    /// Most intervals planted per present class, `[mae, me]`; at least one is.
    pub max_events: [usize; 2],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            d: 64,
            fps: 30.0,
            g: 8,
            t_min: 40,
            t_max: 80,
            effect_size: 2.0,
            subjects: 4,
            label_rates: [0.7, 0.5],
            max_events: [2, 3],
        }
    }
}

impl SynthSpec {
    /// Longest ME in whole snippets (duration ≤ 0.5 s).
    pub fn me_max_snippets(&self) -> usize {
        (0.5 * self.fps / self.g as f64).floor() as usize
    }

    /// MaE length range in snippets (duration in (0.5 s, 4 s]).
    pub fn mae_snippet_range(&self) -> (usize, usize) {
        let lo = self.me_max_snippets() + 1;
        let hi = (4.0 * self.fps / self.g as f64).floor() as usize;
        (lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.g == 0 || !(self.fps > 0.0) {
            return Err(Error::Config("synth: d, g and fps must be positive".into()));
        }
        if !(self.effect_size >= 0.0) {
            return Err(Error::Config("synth: effect_size must be >= 0".into()));
        }
        if self.t_min < 10 || self.t_max < self.t_min {
            return Err(Error::Config(format!(
                "synth: snippet range [{}, {}] must satisfy 10 <= min <= max",
                self.t_min, self.t_max
            )));
        }
        if self.me_max_snippets() == 0 {
            return Err(Error::Config(format!(
                "synth: snippet length {} frames exceeds the 0.5 s ME duration at {} fps; \
                 an ME would span zero snippets",
                self.g, self.fps
            )));
        }
        let (lo, hi) = self.mae_snippet_range();
        if hi < lo {
            return Err(Error::Config("synth: no snippet count fits a MaE".into()));
        }
        if self.subjects == 0 || !self.label_rates.iter().all(|r| (0.0..=1.0).contains(r)) {
            return Err(Error::Config("synth: subjects >= 1 and label rates in [0, 1]".into()));
        }
        if self.max_events.contains(&0) {
            return Err(Error::Config("synth: max_events must be >= 1 per class".into()));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Places non-overlapping snippet intervals `[start, end)` with one-snippet gaps.
fn place(rng: &mut impl Rng, t: usize, len: usize, taken: &[(usize, usize, ExprClass)]) -> Option<usize> {
    if len > t {
        return None;
    }
    for _ in 0..200 {
        let start = rng.random_range(0..=t - len);
        let end = start + len;
        let clear = taken
            .iter()
            .all(|&(s, e, _)| end + 1 <= s || e + 1 <= start);
        if clear {
            return Some(start);
        }
    }
    None
}

/// Deterministic corpus of `n_videos` videos for `seed`.
pub fn synth_corpus(n_videos: usize, seed: u64, spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = [unit_vector(&mut rng, spec.d), unit_vector(&mut rng, spec.d)];
    let (mae_lo, mae_hi) = spec.mae_snippet_range();
    let me_hi = spec.me_max_snippets();
    let g = spec.g;

    let mut videos = Vec::with_capacity(n_videos);
    for i in 0..n_videos {
        let t = rng.random_range(spec.t_min..=spec.t_max);
        let frame_count = t * g + rng.random_range(0..g);
        let want_mae = rng.random_bool(spec.label_rates[0]);
        let want_me = rng.random_bool(spec.label_rates[1]);

        let mut planted: Vec<(usize, usize, ExprClass)> = Vec::new();
        for (class, wanted, lo, hi) in [
            (ExprClass::Mae, want_mae, mae_lo, mae_hi),
            (ExprClass::Me, want_me, 1, me_hi),
        ] {
            if !wanted {
                continue;
            }
            let count = rng.random_range(1..=spec.max_events[class.column()]);
            for _ in 0..count {
                let len = rng.random_range(lo..=hi.min(t / 4).max(lo));
                if let Some(start) = place(&mut rng, t, len, &planted) {
                    planted.push((start, start + len, class));
                }
            }
        }
        planted.sort_by_key(|&(s, _, _)| s);

        let mut shift: Vec<Option<ExprClass>> = vec![None; t];
        for &(s, e, c) in &planted {
            for slot in &mut shift[s..e] {
                *slot = Some(c);
            }
        }
        let stream = |rng: &mut ChaCha8Rng| -> Tensor {
            let mut data = Vec::with_capacity(t * spec.d);
            for class in &shift {
                for k in 0..spec.d {
                    let noise: f64 = StandardNormal.sample(rng);
                    let signal = class.map_or(0.0, |c| spec.effect_size * dirs[c.column()][k]);
                    // Stored as f32 on disk; round now so files round-trip exactly.
                    data.push((noise + signal) as f32 as f64);
                }
            }
            Tensor::new(vec![t, spec.d], data).expect("synth shape")
        };
        let rgb = stream(&mut rng);
        let flow = stream(&mut rng);

        let ground_truth: Vec<GtInterval> = planted
            .iter()
            .map(|&(s, e, class)| GtInterval {
                onset_frame: s * g + 1,
                offset_frame: e * g,
                class,
            })
            .collect();
        let labels = Labels::new(
            ground_truth.iter().any(|iv| iv.class == ExprClass::Mae),
            ground_truth.iter().any(|iv| iv.class == ExprClass::Me),
        );
        let id = format!("v{i:03}");
        let record = VideoRecord {
            id: id.clone(),
            subject: format!("s{:02}", i % spec.subjects),
            fps: spec.fps,
            frame_count,
            snippet_len: g,
            labels,
            ground_truth: Some(ground_truth),
        };
        videos.push(Video {
            record,
            rgb: FeatureMatrix {
                video_id: id.clone(),
                modality: Modality::Rgb,
                values: rgb,
            },
            flow: FeatureMatrix {
                video_id: id,
                modality: Modality::Flow,
                values: flow,
            },
        });
    }
    Corpus::new(videos)
}
