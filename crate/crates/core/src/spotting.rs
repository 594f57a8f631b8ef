//! Test-time proposal generation from attention scores and suppressed T-CAMs.

use serde::{Deserialize, Serialize};

use crate::dataio::ExprClass;
use crate::error::{Error, Result};
use crate::losses::sampling_rate;
use crate::metrics::temporal_iou;
use crate::numerics::{topk_indices, Tensor};

/// Longest duration still counted as a micro-expression.
pub const ME_MAX_SECS: f64 = 0.5;

/// A spotted interval, 1-indexed inclusive frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Proposal {
    pub video_id: String,
    pub onset_frame: usize,
    pub offset_frame: usize,
    pub class: ExprClass,
    pub confidence: f64,
}

impl Proposal {
    /// Builds a proposal whose class follows from its duration.
    pub fn new(video_id: &str, onset_frame: usize, offset_frame: usize, fps: f64, confidence: f64) -> Self {
        let frames = offset_frame - onset_frame + 1;
        let class = if frames as f64 / fps <= ME_MAX_SECS {
            ExprClass::Me
        } else {
            ExprClass::Mae
        };
        Proposal {
            video_id: video_id.to_string(),
            onset_frame,
            offset_frame,
            class,
            confidence,
        }
    }

    pub fn frames(&self) -> usize {
        self.offset_frame - self.onset_frame + 1
    }

    pub fn duration_secs(&self, fps: f64) -> f64 {
        self.frames() as f64 / fps
    }
}

/// How snippets are selected before grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    MultiTop,
    MultiThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpotConfig {
    pub selection: Selection,
    /// First divisor `m` of the multi-top set.
    pub m_start: usize,
    /// Number of consecutive divisors.
    pub m_count: usize,
    /// Weight `ς` of the video-level class probability.
    pub varsigma: f64,
    /// Outer window width as a fraction `ψ` of the proposal length.
    pub psi: f64,
    pub nms_iou: f64,
    pub confidence_floor: f64,
    pub tau_l: f64,
    pub tau_u: f64,
    pub n_l: usize,
    /// Run NMS per class column instead of over the pooled candidates.
    pub classwise_nms: bool,
}

impl Default for SpotConfig {
    fn default() -> Self {
        SpotConfig {
            selection: Selection::MultiTop,
            m_start: 8,
            m_count: 15,
            varsigma: 0.15,
            psi: 0.25,
            nms_iou: 0.01,
            confidence_floor: 0.1,
            tau_l: 0.1,
            tau_u: 0.9,
            n_l: 33,
            classwise_nms: false,
        }
    }
}

impl SpotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_start == 0 || self.m_count == 0 {
            return Err(Error::Config("spot: m_start and m_count must be >= 1".into()));
        }
        if !(self.psi > 0.0) || !(self.confidence_floor >= 0.0) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(
                "spot: need psi > 0, confidence_floor >= 0, nms_iou in [0, 1]".into(),
            ));
        }
        if self.selection == Selection::MultiThreshold {
            if !(self.tau_l < self.tau_u) || self.n_l == 0 {
                return Err(Error::Config(format!(
                    "spot: multi-threshold needs tau_l < tau_u and n_l >= 1, got {} / {} / {}",
                    self.tau_l, self.tau_u, self.n_l
                )));
            }
        }
        Ok(())
    }

    /// The multi-top divisors `m_start, m_start + 1, …`.
    pub fn divisors(&self) -> Vec<usize> {
        (self.m_start..self.m_start + self.m_count).collect()
    }
}

/// Mask of the `max(1, floor(T/m))` highest-attention snippets.
pub fn select_multitop(a: &[f64], m: usize) -> Result<Vec<bool>> {
    if m == 0 {
        return Err(Error::Argument("multi-top divisor must be >= 1".into()));
    }
    let mut mask = vec![false; a.len()];
    if a.is_empty() {
        return Ok(mask);
    }
    for i in topk_indices(a, sampling_rate(a.len(), m))? {
        mask[i] = true;
    }
    Ok(mask)
}

/// One mask `A > τ` per threshold, thresholds evenly spaced over `[τ_l, τ_u]`.
pub fn select_multithreshold(a: &[f64], tau_l: f64, tau_u: f64, n_l: usize) -> Result<Vec<Vec<bool>>> {
    if !(tau_l < tau_u) || n_l == 0 {
        return Err(Error::Config(format!(
            "multi-threshold needs tau_l < tau_u and n_l >= 1, got {tau_l} / {tau_u} / {n_l}"
        )));
    }
    let thresholds: Vec<f64> = if n_l == 1 {
        vec![tau_l]
    } else {
        let step = (tau_u - tau_l) / (n_l - 1) as f64;
        (0..n_l).map(|i| tau_l + step * i as f64).collect()
    };
    Ok(thresholds
        .into_iter()
        .map(|th| a.iter().map(|&x| x > th).collect())
        .collect())
}

/// Maximal runs of `true`, as 1-indexed inclusive snippet intervals.
pub fn group_consecutive(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i + 1),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, mask.len()));
    }
    out
}

/// Snippet interval to frames: `((s − 1)·g + 1, e·g)`.
pub fn snippets_to_frames(interval: (usize, usize), g: usize) -> (usize, usize) {
    ((interval.0 - 1) * g + 1, interval.1 * g)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Outer-inner score of a 1-indexed snippet interval for each foreground
/// class: inner mean of `Ŝ` minus the mean over the `⌈ψ·len⌉` snippets on
/// either side (interval excluded, clamped to the video), plus `ς·p_j`.
pub fn score_proposal(
    interval: (usize, usize),
    s_hat: &Tensor,
    p: &[f64],
    config: &SpotConfig,
) -> Result<[f64; 2]> {
    let (t, c) = s_hat.dims2()?;
    let (ts, te) = interval;
    if ts < 1 || te < ts || te > t || c < 2 || p.len() < 2 {
        return Err(Error::Argument(format!(
            "interval {interval:?} outside 1..={t} or malformed scores"
        )));
    }
    let len = te - ts + 1;
    let width = (config.psi * len as f64).ceil() as usize;
    let left = ts.saturating_sub(width).max(1)..ts;
    let right = te + 1..(te + width).min(t) + 1;
    let at = |snip: usize, j: usize| s_hat.data()[(snip - 1) * c + j];
    let mut out = [0.0; 2];
    for (j, o) in out.iter_mut().enumerate() {
        let inner = mean((ts..=te).map(|s| at(s, j)));
        let outer = mean(left.clone().chain(right.clone()).map(|s| at(s, j)));
        *o = inner - outer + config.varsigma * p[j];
    }
    Ok(out)
}

/// A scored candidate before class assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// 1-indexed inclusive frames.
    pub frames: (usize, usize),
    /// Score column the confidence came from.
    pub column: usize,
    pub confidence: f64,
}

/// Priority used by NMS: confidence, then onset, offset and column.
fn priority(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.frames.cmp(&b.frames))
        .then(a.column.cmp(&b.column))
}

/// Greedy NMS: keep the best remaining candidate, drop everything overlapping
/// it by IoU above `iou_threshold`, repeat. Output is in priority order.
pub fn nms(mut candidates: Vec<Candidate>, iou_threshold: f64) -> Vec<Candidate> {
    candidates.sort_by(priority);
    let mut kept: Vec<Candidate> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| temporal_iou(k.frames, c.frames) <= iou_threshold) {
            kept.push(c);
        }
    }
    kept
}

/// Inputs describing one video at test time.
#[derive(Debug, Clone, Copy)]
pub struct VideoScores<'a> {
    pub video_id: &'a str,
    /// Mean attention, length `T`.
    pub a: &'a [f64],
    /// Attention-suppressed T-CAM `Ŝ`, `T × 3`.
    pub s_hat: &'a Tensor,
    /// Video-level class probabilities.
    pub p: &'a [f64],
    pub g: usize,
    pub fps: f64,
}

/// Selection, grouping, scoring, filtering and NMS for one video.
pub fn spot_video(v: &VideoScores<'_>, config: &SpotConfig) -> Result<Vec<Proposal>> {
    config.validate()?;
    let t = v.a.len();
    if v.s_hat.shape() != [t, 3] {
        return Err(Error::Shape(format!(
            "{}: attention has {t} snippets but scores are {:?}",
            v.video_id,
            v.s_hat.shape()
        )));
    }
    if t == 0 {
        return Ok(Vec::new());
    }
    let masks = match config.selection {
        Selection::MultiTop => config
            .divisors()
            .into_iter()
            .map(|m| select_multitop(v.a, m))
            .collect::<Result<Vec<_>>>()?,
        Selection::MultiThreshold => select_multithreshold(v.a, config.tau_l, config.tau_u, config.n_l)?,
    };
    let mut intervals: Vec<(usize, usize)> = masks.iter().flat_map(|m| group_consecutive(m)).collect();
    intervals.sort_unstable();
    intervals.dedup();

    let mut candidates = Vec::new();
    for iv in intervals {
        let scores = score_proposal(iv, v.s_hat, v.p, config)?;
        let frames = snippets_to_frames(iv, v.g);
        for (column, &confidence) in scores.iter().enumerate() {
            if confidence >= config.confidence_floor {
                candidates.push(Candidate {
                    frames,
                    column,
                    confidence,
                });
            }
        }
    }
    let kept = if config.classwise_nms {
        let mut all = Vec::new();
        for column in 0..2 {
            let part = candidates.iter().filter(|c| c.column == column).copied().collect();
            all.extend(nms(part, config.nms_iou));
        }
        all
    } else {
        nms(candidates, config.nms_iou)
    };
    let mut out: Vec<Proposal> = kept
        .into_iter()
        .map(|c| Proposal::new(v.video_id, c.frames.0, c.frames.1, v.fps, c.confidence))
        .collect();
    sort_proposals(&mut out);
    Ok(out)
}

/// Canonical output order: video id, onset, offset, then confidence descending.
pub fn sort_proposals(props: &mut [Proposal]) {
    props.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(a.onset_frame.cmp(&b.onset_frame))
            .then(a.offset_frame.cmp(&b.offset_frame))
            .then(b.confidence.total_cmp(&a.confidence))
    });
}

pub fn write_proposals(path: &std::path::Path, props: &[Proposal]) -> Result<()> {
    let text = serde_json::to_string_pretty(props)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_proposals(path: &std::path::Path) -> Result<Vec<Proposal>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: malformed proposals: {e}", path.display())))
}
