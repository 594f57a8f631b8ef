//! Training objective: three pooled cross-entropy branches, modal agreement,
//! sparsity, guide and pairwise feature-consistency terms.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataio::Labels;
use crate::error::{Error, Result};
use crate::numerics::{topk_indices, Tape, Var};
use crate::pipeline::{ForwardVars, BACKGROUND, N_COLUMNS};

/// Per-class top-k divisors, order `[mae, me, background]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingSpec {
    pub h: [usize; N_COLUMNS],
}

impl Default for PoolingSpec {
    fn default() -> Self {
        PoolingSpec { h: [7, 9, 5] }
    }
}

/// `max(1, floor(t / h))`.
pub fn sampling_rate(t: usize, h: usize) -> usize {
    (t / h).max(1)
}

impl PoolingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h.contains(&0) {
            return Err(Error::Config(format!("pooling h must be >= 1, got {:?}", self.h)));
        }
        Ok(())
    }

    /// Top-k sizes for a video of `t` snippets.
    pub fn k(&self, t: usize) -> [usize; N_COLUMNS] {
        self.h.map(|h| sampling_rate(t, h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DurationMaskSpec {
    /// Window length in snippets.
    pub eta: usize,
    pub omega_l: f64,
    pub omega_u: f64,
}

impl Default for DurationMaskSpec {
    fn default() -> Self {
        DurationMaskSpec {
            eta: 2,
            omega_l: 1.2,
            omega_u: 1.4,
        }
    }
}

impl DurationMaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.eta == 0 || !(self.omega_l > 0.0) || !(self.omega_l < self.omega_u) {
            return Err(Error::Config(format!(
                "duration mask needs eta >= 1 and 0 < omega_l < omega_u, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.5,
            lambda2: 0.5,
            lambda3: 0.8,
            lambda4: 0.8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }
}

/// Result of top-k temporal pooling.
#[derive(Debug, Clone)]
pub struct Pooled {
    /// Pooled logits, length 3.
    pub u: Var,
    pub p: Var,
    pub log_p: Var,
    /// Selected snippet indices per column, highest first.
    pub indices: [Vec<usize>; N_COLUMNS],
}

/// Mean of the `k_i` largest entries of each column of `S`, then softmax.
pub fn topk_pool(tape: &mut Tape, s: Var, spec: &PoolingSpec) -> Result<Pooled> {
    let (t, c) = match tape.shape(s) {
        &[t, c] => (t, c),
        other => return Err(Error::Shape(format!("topk_pool needs T×3, got {other:?}"))),
    };
    if c != N_COLUMNS || t == 0 {
        return Err(Error::Shape(format!("topk_pool needs T×3 with T >= 1, got {t}×{c}")));
    }
    let ks = spec.k(t);
    let values = tape.value(s).data();
    let mut flat = Vec::new();
    let mut indices: [Vec<usize>; N_COLUMNS] = Default::default();
    for col in 0..N_COLUMNS {
        let column: Vec<f64> = (0..t).map(|r| values[r * c + col]).collect();
        let idx = topk_indices(&column, ks[col])?;
        flat.extend(idx.iter().map(|r| r * c + col));
        indices[col] = idx;
    }
    // Segment means as one constant matrix product keeps the graph small.
    let total = flat.len();
    let mut avg = vec![0.0; N_COLUMNS * total];
    let mut offset = 0;
    for (col, &k) in ks.iter().enumerate() {
        for j in offset..offset + k {
            avg[col * total + j] = 1.0 / k as f64;
        }
        offset += k;
    }
    let picked = tape.gather(s, flat)?;
    let picked = tape.reshape(picked, vec![total, 1])?;
    let avg = tape.constant(vec![N_COLUMNS, total], avg)?;
    let u = tape.matmul(avg, picked)?;
    let u = tape.reshape(u, vec![N_COLUMNS])?;
    let p = tape.softmax(u, 0)?;
    let log_p = tape.log_softmax(u, 0)?;
    Ok(Pooled {
        u,
        p,
        log_p,
        indices,
    })
}

/// `−Σ y_i log p_i`.
pub fn cross_entropy(tape: &mut Tape, log_p: Var, y: [f64; N_COLUMNS]) -> Result<Var> {
    let weighted = tape.mul_const(log_p, y.to_vec())?;
    let sum = tape.sum(weighted);
    Ok(tape.scale(sum, -1.0))
}

fn pooled_ce(tape: &mut Tape, s: Var, y: [f64; N_COLUMNS], spec: &PoolingSpec) -> Result<Var> {
    let pooled = topk_pool(tape, s, spec)?;
    cross_entropy(tape, pooled.log_p, y)
}

/// Raw T-CAM branch, target `[y_mae, y_me, 1]`.
pub fn loss_dc1(tape: &mut Tape, s: Var, labels: &Labels, spec: &PoolingSpec) -> Result<Var> {
    let [mae, me] = labels.as_vec();
    pooled_ce(tape, s, [mae, me, 1.0], spec)
}

/// `Ŝ[t, i] = A[t] · S[t, i]`.
pub fn suppress(tape: &mut Tape, s: Var, a: Var) -> Result<Var> {
    tape.mul_col(s, a)
}

/// Attention-suppressed branch, target `[y_mae, y_me, 0]`.
pub fn loss_dc2(tape: &mut Tape, s_hat: Var, labels: &Labels, spec: &PoolingSpec) -> Result<Var> {
    let [mae, me] = labels.as_vec();
    pooled_ce(tape, s_hat, [mae, me, 0.0], spec)
}

/// Masks snippets whose windowed attention jumps by a moderate amount
/// (between `ω_l` and `ω_u` times the mean jump). Returns `1.0`/`0.0` per snippet.
///
/// Window means cover `η` snippets; positions without a defined jump stay 1.
pub fn duration_mask(a: &[f64], spec: &DurationMaskSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let (t, eta) = (a.len(), spec.eta);
    if t <= eta {
        return Err(Error::Config(format!(
            "duration mask needs more than eta={eta} snippets, got {t}"
        )));
    }
    let q: Vec<f64> = a.windows(eta).map(|w| w.iter().sum::<f64>() / eta as f64).collect();
    let delta: Vec<f64> = q.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let mean = delta.iter().sum::<f64>() / delta.len() as f64;
    let (lo, hi) = (spec.omega_l * mean, spec.omega_u * mean);
    let mut mask = vec![1.0; t];
    for (m, &d) in mask.iter_mut().zip(&delta) {
        if lo < d && d < hi {
            *m = 0.0;
        }
    }
    Ok(mask)
}

/// Masked branch `M ⊙ S`, target `[y_mae, 0, 1]`.
pub fn loss_dc3(
    tape: &mut Tape,
    s: Var,
    mask: &[f64],
    labels: &Labels,
    spec: &PoolingSpec,
) -> Result<Var> {
    let t = tape.shape(s)[0];
    if mask.len() != t {
        return Err(Error::Shape(format!("mask length {} for T={t}", mask.len())));
    }
    let wide: Vec<f64> = mask.iter().flat_map(|&m| [m; N_COLUMNS]).collect();
    let masked = tape.mul_const(s, wide)?;
    pooled_ce(tape, masked, [labels.mae as f64, 0.0, 1.0], spec)
}

/// Mutual agreement of the two modal attentions, each side detached in turn.
pub fn loss_sc(tape: &mut Tape, a_rgb: Var, a_flow: Var) -> Result<Var> {
    let t = tape.shape(a_rgb)[0] as f64;
    let (fixed_rgb, fixed_flow) = (tape.stop_gradient(a_rgb), tape.stop_gradient(a_flow));
    let d1 = tape.sub(a_rgb, fixed_flow)?;
    let d2 = tape.sub(fixed_rgb, a_flow)?;
    let (q1, q2) = (tape.square(d1), tape.square(d2));
    let (s1, s2) = (tape.sum(q1), tape.sum(q2));
    let total = tape.add(s1, s2)?;
    Ok(tape.scale(total, 1.0 / (2.0 * t)))
}

/// L1 sparsity of the three attention sequences.
pub fn loss_sl(tape: &mut Tape, a: Var, a_rgb: Var, a_flow: Var) -> Result<Var> {
    let t = tape.shape(a)[0] as f64;
    let norms = [a, a_rgb, a_flow].map(|v| tape.l1_norm(v));
    let s = tape.add(norms[0], norms[1])?;
    let s = tape.add(s, norms[2])?;
    Ok(tape.scale(s, 1.0 / (3.0 * t)))
}

/// Snippet foreground probability `1 − softmax(S[t])_background`.
pub fn foreground_prob(tape: &mut Tape, s: Var) -> Result<Var> {
    let t = tape.shape(s)[0];
    let probs = tape.softmax(s, 1)?;
    let bg = tape.select_cols(probs, BACKGROUND, BACKGROUND + 1)?;
    let bg = tape.reshape(bg, vec![t])?;
    let neg = tape.scale(bg, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Guide loss pulling each attention sequence towards `p_f`.
pub fn loss_gl(tape: &mut Tape, p_f: Var, a: Var, a_rgb: Var, a_flow: Var) -> Result<Var> {
    let t = tape.shape(a)[0] as f64;
    let mut total = None;
    for v in [a, a_rgb, a_flow] {
        let d = tape.sub(p_f, v)?;
        let n = tape.l1_norm(d);
        total = Some(match total {
            None => n,
            Some(acc) => tape.add(acc, n)?,
        });
    }
    Ok(tape.scale(total.expect("three terms"), 1.0 / (3.0 * t)))
}

/// One side of a training pair.
#[derive(Debug, Clone, Copy)]
pub struct PairSide {
    pub out: ForwardVars,
    pub labels: Labels,
}

/// Matching score `cs` of `to` against the top-`k` snippets of `from`,
/// summed over the classes enabled in `y_shared`.
pub fn pair_similarity(
    tape: &mut Tape,
    from: &ForwardVars,
    to: &ForwardVars,
    y_shared: [f64; 2],
    k: usize,
) -> Result<Var> {
    let idx = topk_indices(tape.value(from.a).data(), k)?;
    let logits = tape.gather_rows(from.s, &idx)?;
    let logits = tape.select_cols(logits, 0, 2)?;
    let weights = tape.softmax(logits, 1)?;
    let feats = tape.gather_rows(from.fused, &idx)?;
    let attn_total = tape.sum(to.a);
    let to_t = tape.transpose(to.fused)?;
    let mut total: Option<Var> = None;
    for (class, &y) in y_shared.iter().enumerate() {
        if y == 0.0 {
            continue;
        }
        let w = tape.select_cols(weights, class, class + 1)?;
        let w = tape.reshape(w, vec![k])?;
        let class_feats = tape.mul_col(feats, w)?;
        // k × T similarities, normalized over the k selected snippets.
        let sim = tape.matmul(class_feats, to_t)?;
        let h = tape.softmax(sim, 0)?;
        let best = tape.max_axis(h, 0)?;
        let weighted = tape.mul(best, to.a)?;
        let num = tape.sum(weighted);
        let cs = tape.div(num, attn_total)?;
        let cs = tape.scale(cs, y);
        total = Some(match total {
            None => cs,
            Some(acc) => tape.add(acc, cs)?,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => tape.constant(vec![], vec![0.0]),
    }
}

/// `1 − Σ_d (cs_d1 + cs_d2) / (2 N_s)` over pairs sharing at least one label.
/// `k` is the MaE sampling rate of the video whose top-k snippets are used.
/// Returns 0 with a warning when no pair shares a label.
pub fn feature_consistency(
    tape: &mut Tape,
    pairs: &[(PairSide, PairSide)],
    h_mae: usize,
) -> Result<Var> {
    let mut n_s = 0usize;
    let mut total: Option<Var> = None;
    for (v1, v2) in pairs {
        let shared = v1.labels.shared(&v2.labels);
        if shared == 0 {
            warn!("feature consistency: pair without a shared label skipped");
            continue;
        }
        n_s += shared;
        let [m1, e1] = v1.labels.as_vec();
        let [m2, e2] = v2.labels.as_vec();
        let y = [m1 * m2, e1 * e2];
        let k1 = sampling_rate(tape.shape(v1.out.a)[0], h_mae);
        let k2 = sampling_rate(tape.shape(v2.out.a)[0], h_mae);
        let cs2 = pair_similarity(tape, &v1.out, &v2.out, y, k1)?;
        let cs1 = pair_similarity(tape, &v2.out, &v1.out, y, k2)?;
        let both = tape.add(cs1, cs2)?;
        total = Some(match total {
            None => both,
            Some(acc) => tape.add(acc, both)?,
        });
    }
    match total {
        None => {
            warn!("feature consistency: no valid shared labels in batch, term set to 0");
            tape.constant(vec![], vec![0.0])
        }
        Some(sum) => {
            let scaled = tape.scale(sum, -1.0 / (2.0 * n_s as f64));
            Ok(tape.add_scalar(scaled, 1.0))
        }
    }
}

/// The seven loss components, either as tape handles or as values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub sc: T,
    pub dc1: T,
    pub dc2: T,
    pub dc3: T,
    pub fc: T,
    pub sl: T,
    pub gl: T,
}

impl LossTerms<f64> {
    /// Weighted total, same formula as [`joint_loss`].
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.sc
            + self.dc1
            + self.dc2
            + w.lambda1 * self.dc3
            + w.lambda2 * self.fc
            + w.lambda3 * self.sl
            + w.lambda4 * self.gl
    }
}

impl LossTerms<Var> {
    pub fn values(&self, tape: &Tape) -> LossTerms<f64> {
        LossTerms {
            sc: tape.item(self.sc),
            dc1: tape.item(self.dc1),
            dc2: tape.item(self.dc2),
            dc3: tape.item(self.dc3),
            fc: tape.item(self.fc),
            sl: tape.item(self.sl),
            gl: tape.item(self.gl),
        }
    }
}

/// `L_sc + L_dc1 + L_dc2 + λ1 L_dc3 + λ2 L_fc + λ3 L_sl + λ4 L_gl`.
pub fn joint_loss(tape: &mut Tape, terms: &LossTerms<Var>, w: &LossWeights) -> Result<Var> {
    let parts = [
        (terms.sc, 1.0),
        (terms.dc1, 1.0),
        (terms.dc2, 1.0),
        (terms.dc3, w.lambda1),
        (terms.fc, w.lambda2),
        (terms.sl, w.lambda3),
        (terms.gl, w.lambda4),
    ];
    let mut total = None;
    for (v, weight) in parts {
        let scaled = tape.scale(v, weight);
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    Ok(total.expect("seven terms"))
}

/// Everything the objective needs beyond the network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub pooling: PoolingSpec,
    pub duration: DurationMaskSpec,
    pub weights: LossWeights,
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        self.pooling.validate()?;
        self.duration.validate()?;
        self.weights.validate()
    }
}

/// Per-video terms (every component except `L_fc`).
pub fn video_losses(
    tape: &mut Tape,
    out: &ForwardVars,
    labels: &Labels,
    spec: &LossSpec,
) -> Result<[Var; 6]> {
    let sc = loss_sc(tape, out.a_rgb, out.a_flow)?;
    let dc1 = loss_dc1(tape, out.s, labels, &spec.pooling)?;
    let s_hat = suppress(tape, out.s, out.a)?;
    let dc2 = loss_dc2(tape, s_hat, labels, &spec.pooling)?;
    let mask = duration_mask(tape.value(out.a).data(), &spec.duration)?;
    let dc3 = loss_dc3(tape, out.s, &mask, labels, &spec.pooling)?;
    let sl = loss_sl(tape, out.a, out.a_rgb, out.a_flow)?;
    let p_f = foreground_prob(tape, out.s)?;
    let gl = loss_gl(tape, p_f, out.a, out.a_rgb, out.a_flow)?;
    Ok([sc, dc1, dc2, dc3, sl, gl])
}

/// Batch objective: per-video terms averaged over the batch, `L_fc` over the
/// pairs, combined with the configured weights.
pub fn batch_loss(
    tape: &mut Tape,
    videos: &[(ForwardVars, Labels)],
    pairs: &[(usize, usize)],
    spec: &LossSpec,
) -> Result<(Var, LossTerms<Var>)> {
    if videos.is_empty() {
        return Err(Error::Argument("batch_loss on an empty batch".into()));
    }
    let mut sums: Option<[Var; 6]> = None;
    for (out, labels) in videos {
        let terms = video_losses(tape, out, labels, spec)?;
        sums = Some(match sums {
            None => terms,
            Some(acc) => {
                let mut next = acc;
                for (n, t) in next.iter_mut().zip(terms) {
                    *n = tape.add(*n, t)?;
                }
                next
            }
        });
    }
    let inv = 1.0 / videos.len() as f64;
    let [sc, dc1, dc2, dc3, sl, gl] = sums.expect("non-empty").map(|v| tape.scale(v, inv));
    let sides: Vec<(PairSide, PairSide)> = pairs
        .iter()
        .map(|&(i, j)| {
            let side = |k: usize| PairSide {
                out: videos[k].0,
                labels: videos[k].1,
            };
            (side(i), side(j))
        })
        .collect();
    let fc = feature_consistency(tape, &sides, spec.pooling.h[0])?;
    let terms = LossTerms {
        sc,
        dc1,
        dc2,
        dc3,
        fc,
        sl,
        gl,
    };
    let total = joint_loss(tape, &terms, &spec.weights)?;
    Ok((total, terms))
}
