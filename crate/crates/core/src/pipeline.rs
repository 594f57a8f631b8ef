//! Full forward model: two CSCMs, per-modality attention heads, feature
//! fusion and the snippet classifier producing T-CAMs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cscm::{cscm_forward, CscmParams, CscmVars};
use crate::error::{Error, Result};
use crate::numerics::{xavier_kernel, zero_bias, Tape, Tensor, Var};

/// Number of T-CAM columns: MaE, ME, background (last).
pub const N_COLUMNS: usize = 3;
/// Column index of the background class.
pub const BACKGROUND: usize = 2;

/// Architecture sizes and dropout rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Hidden width `H` of the attention heads.
    pub hidden: usize,
    pub head_dropout: f64,
    pub cls_dropout: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden: 512,
            head_dropout: 0.5,
            cls_dropout: 0.7,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("model.hidden must be >= 1".into()));
        }
        for (name, p) in [("head_dropout", self.head_dropout), ("cls_dropout", self.cls_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("model.{name} must lie in [0, 1), got {p}")));
            }
        }
        Ok(())
    }
}

/// Width-3 conv `D → H`, ReLU, dropout, width-1 conv `H → 1`, sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeadParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionHeadVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub dropout: f64,
}

impl AttentionHeadParams {
    pub fn init<R: Rng>(rng: &mut R, d: usize, hidden: usize, dropout: f64) -> Self {
        AttentionHeadParams {
            conv1_w: xavier_kernel(rng, 3, d, hidden),
            conv1_b: zero_bias(hidden),
            conv2_w: xavier_kernel(rng, 1, hidden, 1),
            conv2_b: zero_bias(1),
            dropout,
        }
    }

    pub fn hidden(&self) -> usize {
        self.conv1_b.len()
    }

    pub const NAMES: [&'static str; 4] = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"];

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.conv1_w, &mut self.conv1_b, &mut self.conv2_w, &mut self.conv2_b]
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionHeadVars {
        AttentionHeadVars {
            conv1_w: tape.leaf(self.conv1_w.clone()),
            conv1_b: tape.leaf(self.conv1_b.clone()),
            conv2_w: tape.leaf(self.conv2_w.clone()),
            conv2_b: tape.leaf(self.conv2_b.clone()),
            dropout: self.dropout,
        }
    }
}

/// Width-1 fusion conv `2D → D`, then dropout and a width-1 classifier `D → 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionClassifierParams {
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionClassifierVars {
    pub fuse_w: Var,
    pub fuse_b: Var,
    pub cls_w: Var,
    pub cls_b: Var,
    pub dropout_rate: f64,
}

impl FusionClassifierParams {
    pub fn init<R: Rng>(rng: &mut R, d: usize, dropout_rate: f64) -> Self {
        FusionClassifierParams {
            fuse_w: xavier_kernel(rng, 1, 2 * d, d),
            fuse_b: zero_bias(d),
            cls_w: xavier_kernel(rng, 1, d, N_COLUMNS),
            cls_b: zero_bias(N_COLUMNS),
            dropout_rate,
        }
    }

    pub const NAMES: [&'static str; 4] = ["fuse.weight", "fuse.bias", "cls.weight", "cls.bias"];

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.fuse_w, &self.fuse_b, &self.cls_w, &self.cls_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.fuse_w, &mut self.fuse_b, &mut self.cls_w, &mut self.cls_b]
    }

    pub fn bind(&self, tape: &mut Tape) -> FusionClassifierVars {
        FusionClassifierVars {
            fuse_w: tape.leaf(self.fuse_w.clone()),
            fuse_b: tape.leaf(self.fuse_b.clone()),
            cls_w: tape.leaf(self.cls_w.clone()),
            cls_b: tape.leaf(self.cls_b.clone()),
            dropout_rate: self.dropout_rate,
        }
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cscm_rgb: CscmParams,
    pub cscm_flow: CscmParams,
    pub head_rgb: AttentionHeadParams,
    pub head_flow: AttentionHeadParams,
    pub fusion: FusionClassifierParams,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub cscm_rgb: CscmVars,
    pub cscm_flow: CscmVars,
    pub head_rgb: AttentionHeadVars,
    pub head_flow: AttentionHeadVars,
    pub fusion: FusionClassifierVars,
}

impl ModelVars {
    /// All parameter handles in [`ModelParams::named`] order.
    pub fn all(&self) -> Vec<Var> {
        let c = |p: &CscmVars| [p.main_w, p.main_b, p.q_w, p.q_b, p.f_w, p.f_b, p.aux_w, p.aux_b];
        let h = |p: &AttentionHeadVars| [p.conv1_w, p.conv1_b, p.conv2_w, p.conv2_b];
        let f = &self.fusion;
        let mut out = Vec::with_capacity(28);
        out.extend(c(&self.cscm_rgb));
        out.extend(c(&self.cscm_flow));
        out.extend(h(&self.head_rgb));
        out.extend(h(&self.head_flow));
        out.extend([f.fuse_w, f.fuse_b, f.cls_w, f.cls_b]);
        out
    }
}

impl ModelParams {
    /// Glorot-uniform kernels and zero biases, deterministic in `seed`.
    pub fn init(d: usize, spec: &ModelSpec, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("feature dimension must be >= 1".into()));
        }
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelParams {
            cscm_rgb: CscmParams::init(&mut rng, d),
            cscm_flow: CscmParams::init(&mut rng, d),
            head_rgb: AttentionHeadParams::init(&mut rng, d, spec.hidden, spec.head_dropout),
            head_flow: AttentionHeadParams::init(&mut rng, d, spec.hidden, spec.head_dropout),
            fusion: FusionClassifierParams::init(&mut rng, d, spec.cls_dropout),
        })
    }

    /// Feature dimension `D`.
    pub fn dim(&self) -> usize {
        self.cscm_rgb.main_b.len()
    }

    pub fn hidden(&self) -> usize {
        self.head_rgb.hidden()
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (group, cscm) in [("cscm_rgb", &self.cscm_rgb), ("cscm_flow", &self.cscm_flow)] {
            for (n, t) in CscmParams::NAMES.iter().zip(cscm.tensors()) {
                out.push((format!("{group}.{n}"), t));
            }
        }
        for (group, head) in [("head_rgb", &self.head_rgb), ("head_flow", &self.head_flow)] {
            for (n, t) in AttentionHeadParams::NAMES.iter().zip(head.tensors()) {
                out.push((format!("{group}.{n}"), t));
            }
        }
        for (n, t) in FusionClassifierParams::NAMES.iter().zip(self.fusion.tensors()) {
            out.push((format!("fusion.{n}"), t));
        }
        out
    }

    /// Mutable tensors in [`ModelParams::named`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.cscm_rgb.tensors_mut());
        out.extend(self.cscm_flow.tensors_mut());
        out.extend(self.head_rgb.tensors_mut());
        out.extend(self.head_flow.tensors_mut());
        out.extend(self.fusion.tensors_mut());
        out
    }

    /// Rebuilds parameters from checkpoint entries. Shapes are validated
    /// against the dimensions implied by the CSCM and head tensors.
    pub fn from_named(entries: Vec<(String, Tensor)>, spec: &ModelSpec) -> Result<Self> {
        let mut map: BTreeMap<String, Tensor> = entries.into_iter().collect();
        let d = map
            .get("cscm_rgb.main.bias")
            .map(Tensor::len)
            .ok_or_else(|| Error::Data("checkpoint lacks cscm_rgb.main.bias".into()))?;
        let h = map
            .get("head_rgb.conv1.bias")
            .map(Tensor::len)
            .ok_or_else(|| Error::Data("checkpoint lacks head_rgb.conv1.bias".into()))?;
        let template = ModelParams::init(
            d.max(1),
            &ModelSpec {
                hidden: h.max(1),
                ..*spec
            },
            0,
        )?;
        let mut params = template.clone();
        let names: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Data(format!("checkpoint has unknown tensor {extra}")));
        }
        Ok(params)
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            cscm_rgb: self.cscm_rgb.bind(tape),
            cscm_flow: self.cscm_flow.bind(tape),
            head_rgb: self.head_rgb.bind(tape),
            head_flow: self.head_flow.bind(tape),
            fusion: self.fusion.bind(tape),
        }
    }
}

/// Forward results recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub a_rgb: Var,
    pub a_flow: Var,
    pub a: Var,
    pub fused: Var,
    pub s: Var,
}

/// Plain forward values.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub a_rgb: Tensor,
    pub a_flow: Tensor,
    pub a: Tensor,
    pub fused: Tensor,
    /// `T × 3` unnormalized T-CAM logits.
    pub s: Tensor,
}

impl ForwardVars {
    pub fn values(&self, tape: &Tape) -> ForwardOutputs {
        ForwardOutputs {
            a_rgb: tape.value(self.a_rgb).clone(),
            a_flow: tape.value(self.a_flow).clone(),
            a: tape.value(self.a).clone(),
            fused: tape.value(self.fused).clone(),
            s: tape.value(self.s).clone(),
        }
    }
}

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds several integers into one well-mixed seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// FNV-1a, stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Dropout stream for one video in one iteration, independent of batch order.
pub fn dropout_seed(seed: u64, video_id: &str, iteration: u64) -> u64 {
    mix_seed(&[seed, stable_hash(video_id), iteration])
}

/// Inverted dropout with a mask drawn from `rng`; identity when `rate == 0`.
fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul_const(x, mask)
}

fn head_forward(
    tape: &mut Tape,
    o: Var,
    p: &AttentionHeadVars,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let t = tape.shape(o)[0];
    let h1 = tape.conv1d(o, p.conv1_w, p.conv1_b)?;
    let mut h = tape.relu(h1);
    if let Some(rng) = rng {
        h = dropout(tape, h, p.dropout, rng)?;
    }
    let logit = tape.conv1d(h, p.conv2_w, p.conv2_b)?;
    let flat = tape.reshape(logit, vec![t])?;
    Ok(tape.sigmoid(flat))
}

/// Per-snippet foreground probability from enhanced features `O` (no dropout).
pub fn attention_head(tape: &mut Tape, o: Var, p: &AttentionHeadVars) -> Result<Var> {
    head_forward(tape, o, p, None)
}

/// Runs the model on one video. `dropout` carries the seed of the dropout
/// stream and is `None` at inference time.
pub fn forward(
    tape: &mut Tape,
    x_rgb: Var,
    x_flow: Var,
    p: &ModelVars,
    dropout_seed: Option<u64>,
) -> Result<ForwardVars> {
    let shape = tape.shape(x_rgb).to_vec();
    if shape.len() != 2 || shape[0] == 0 || tape.shape(x_flow) != shape.as_slice() {
        return Err(Error::Shape(format!(
            "forward needs equal non-empty T×D inputs, got {:?} and {:?}",
            shape,
            tape.shape(x_flow)
        )));
    }
    let d_model = tape.shape(p.cscm_rgb.main_b)[0];
    if shape[1] != d_model {
        return Err(Error::Data(format!(
            "features have dimension {}, model expects {d_model}",
            shape[1]
        )));
    }
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);

    let o_rgb = cscm_forward(tape, x_rgb, x_flow, &p.cscm_rgb)?;
    let o_flow = cscm_forward(tape, x_flow, x_rgb, &p.cscm_flow)?;
    let a_rgb = head_forward(tape, o_rgb, &p.head_rgb, rng.as_mut())?;
    let a_flow = head_forward(tape, o_flow, &p.head_flow, rng.as_mut())?;
    let sum = tape.add(a_rgb, a_flow)?;
    let a = tape.scale(sum, 0.5);

    let cat = tape.concat_cols(o_rgb, o_flow)?;
    let fused = tape.conv1d(cat, p.fusion.fuse_w, p.fusion.fuse_b)?;
    let cls_in = match rng.as_mut() {
        Some(rng) => dropout(tape, fused, p.fusion.dropout_rate, rng)?,
        None => fused,
    };
    let s = tape.conv1d(cls_in, p.fusion.cls_w, p.fusion.cls_b)?;
    Ok(ForwardVars {
        a_rgb,
        a_flow,
        a,
        fused,
        s,
    })
}

/// Inference-mode forward on plain tensors.
pub fn infer(params: &ModelParams, x_rgb: &Tensor, x_flow: &Tensor) -> Result<ForwardOutputs> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let (r, f) = (tape.constant_tensor(x_rgb.clone()), tape.constant_tensor(x_flow.clone()));
    let out = forward(&mut tape, r, f, &vars, None)?;
    Ok(out.values(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_tensor, rng};

    fn small_spec(hidden: usize) -> ModelSpec {
        ModelSpec {
            hidden,
            ..ModelSpec::default()
        }
    }

    fn zero_all(p: &mut ModelParams) {
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_head_gives_half() {
        let mut p = ModelParams::init(4, &small_spec(6), 1).unwrap();
        zero_all(&mut p);
        let x = random_tensor(&mut rng(1), &[7, 4]);
        let out = infer(&p, &x, &x).unwrap();
        assert!(out.a_rgb.data().iter().all(|&v| v == 0.5));
        assert!(out.a.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn output_shapes_for_various_lengths() {
        let p = ModelParams::init(5, &small_spec(8), 2).unwrap();
        let mut r = rng(2);
        for t in [1, 7, 250] {
            let (x, y) = (random_tensor(&mut r, &[t, 5]), random_tensor(&mut r, &[t, 5]));
            let out = infer(&p, &x, &y).unwrap();
            assert_eq!(out.a_rgb.shape(), [t]);
            assert_eq!(out.a_flow.shape(), [t]);
            assert_eq!(out.a.shape(), [t]);
            assert_eq!(out.fused.shape(), [t, 5]);
            assert_eq!(out.s.shape(), [t, N_COLUMNS]);
            for ((a, r), f) in out.a.data().iter().zip(out.a_rgb.data()).zip(out.a_flow.data()) {
                assert_eq!(*a, (r + f) / 2.0);
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn large_output_bias_saturates() {
        let mut p = ModelParams::init(4, &small_spec(6), 3).unwrap();
        p.head_rgb.conv2_b.data_mut()[0] += 10.0;
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let mut r = rng(3);
        let x = tape.leaf(random_tensor(&mut r, &[9, 4]));
        let a = attention_head(&mut tape, x, &vars.head_rgb).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| v > 0.99));
    }

    #[test]
    fn inference_is_deterministic_and_training_is_seeded() {
        let p = ModelParams::init(4, &small_spec(6), 4).unwrap();
        let mut r = rng(4);
        let (x, y) = (random_tensor(&mut r, &[11, 4]), random_tensor(&mut r, &[11, 4]));
        assert_eq!(infer(&p, &x, &y).unwrap(), infer(&p, &x, &y).unwrap());

        let train = |seed| {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let (a, b) = (tape.leaf(x.clone()), tape.leaf(y.clone()));
            forward(&mut tape, a, b, &vars, Some(seed)).unwrap().values(&tape)
        };
        assert_eq!(train(9), train(9));
        assert_ne!(train(9), train(10));
        assert_ne!(train(9), infer(&p, &x, &y).unwrap());
    }

    #[test]
    fn dropout_seed_depends_on_every_part() {
        let base = dropout_seed(1, "v001", 5);
        assert_eq!(base, dropout_seed(1, "v001", 5));
        assert_ne!(base, dropout_seed(2, "v001", 5));
        assert_ne!(base, dropout_seed(1, "v002", 5));
        assert_ne!(base, dropout_seed(1, "v001", 6));
    }

    #[test]
    fn gradients_reach_every_group() {
        let p = ModelParams::init(6, &small_spec(5), 5).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let mut r = rng(5);
        let x = tape.leaf(random_tensor(&mut r, &[12, 6]));
        let y = tape.leaf(random_tensor(&mut r, &[12, 6]));
        let out = forward(&mut tape, x, y, &vars, None).unwrap();
        let w_s = tape.leaf(random_tensor(&mut r, &[12, 3]));
        let w_a = tape.leaf(random_tensor(&mut r, &[12]));
        let ws = tape.mul(out.s, w_s).unwrap();
        let wa = tape.mul(out.a, w_a).unwrap();
        let (s1, s2) = (tape.sum(ws), tape.sum(wa));
        let total = tape.add(s1, s2).unwrap();
        tape.backward(total).unwrap();
        for ((name, _), v) in p.named().iter().zip(vars.all()) {
            let g = tape.grad(v).expect(name);
            assert!(g.iter().any(|&x| x != 0.0), "{name}");
        }
    }

    #[test]
    fn named_round_trip_and_validation() {
        let p = ModelParams::init(3, &small_spec(4), 6).unwrap();
        let named: Vec<(String, Tensor)> =
            p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(named.len(), 28);
        let back = ModelParams::from_named(named.clone(), &small_spec(4)).unwrap();
        assert_eq!(back, p);

        let mut bad = named.clone();
        bad.pop();
        assert!(ModelParams::from_named(bad, &small_spec(4)).is_err());
        let mut bad = named;
        bad[2].1 = Tensor::zeros(vec![1, 3, 2]);
        assert!(matches!(
            ModelParams::from_named(bad, &small_spec(4)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_a_data_error() {
        let p = ModelParams::init(3, &small_spec(4), 7).unwrap();
        let x = Tensor::zeros(vec![5, 4]);
        assert!(matches!(infer(&p, &x, &x), Err(Error::Data(_))));
    }
}
