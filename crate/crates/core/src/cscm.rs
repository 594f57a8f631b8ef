//! Core saliency compensation: one modality's globally pooled descriptor and
//! self-attended core saliency gate the other, yielding enhanced features.
//!
//! The same code path runs twice per video with the roles swapped and two
//! independent parameter sets (rgb-main and flow-main).

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{xavier_kernel, zero_bias, Tape, Tensor, Var};

/// Weights of one CSCM instance. Every conv maps `D → D` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct CscmParams {
    /// Width-3 conv applied to the temporally pooled main features.
    pub main_w: Tensor,
    pub main_b: Tensor,
    /// Width-1 query projection of the self-attention unit.
    pub q_w: Tensor,
    pub q_b: Tensor,
    /// Width-1 output projection of the self-attention unit.
    pub f_w: Tensor,
    pub f_b: Tensor,
    /// Width-3 conv over `X_aux + F_core`.
    pub aux_w: Tensor,
    pub aux_b: Tensor,
}

/// [`CscmParams`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct CscmVars {
    pub main_w: Var,
    pub main_b: Var,
    pub q_w: Var,
    pub q_b: Var,
    pub f_w: Var,
    pub f_b: Var,
    pub aux_w: Var,
    pub aux_b: Var,
}

impl CscmParams {
    pub fn init<R: Rng>(rng: &mut R, d: usize) -> Self {
        CscmParams {
            main_w: xavier_kernel(rng, 3, d, d),
            main_b: zero_bias(d),
            q_w: xavier_kernel(rng, 1, d, d),
            q_b: zero_bias(d),
            f_w: xavier_kernel(rng, 1, d, d),
            f_b: zero_bias(d),
            aux_w: xavier_kernel(rng, 3, d, d),
            aux_b: zero_bias(d),
        }
    }

    pub const NAMES: [&'static str; 8] = [
        "main.weight",
        "main.bias",
        "query.weight",
        "query.bias",
        "out.weight",
        "out.bias",
        "aux.weight",
        "aux.bias",
    ];

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.main_w,
            &self.main_b,
            &self.q_w,
            &self.q_b,
            &self.f_w,
            &self.f_b,
            &self.aux_w,
            &self.aux_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.main_w,
            &mut self.main_b,
            &mut self.q_w,
            &mut self.q_b,
            &mut self.f_w,
            &mut self.f_b,
            &mut self.aux_w,
            &mut self.aux_b,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> CscmVars {
        CscmVars {
            main_w: tape.leaf(self.main_w.clone()),
            main_b: tape.leaf(self.main_b.clone()),
            q_w: tape.leaf(self.q_w.clone()),
            q_b: tape.leaf(self.q_b.clone()),
            f_w: tape.leaf(self.f_w.clone()),
            f_b: tape.leaf(self.f_b.clone()),
            aux_w: tape.leaf(self.aux_w.clone()),
            aux_b: tape.leaf(self.aux_b.clone()),
        }
    }
}

/// Channel squeezer `F_main = σ(W_main · mean_t(X_main) + B_main)`, length `D`.
///
/// The width-3 conv sees a length-1 sequence, so only its centre tap acts.
pub fn squeeze_main(tape: &mut Tape, x_main: Var, p: &CscmVars) -> Result<Var> {
    let d = tape.shape(x_main)[1];
    let pooled = tape.mean_axis(x_main, 0)?;
    let seq = tape.reshape(pooled, vec![1, d])?;
    let conv = tape.conv1d(seq, p.main_w, p.main_b)?;
    let flat = tape.reshape(conv, vec![d])?;
    Ok(tape.sigmoid(flat))
}

/// Core saliency `F_core = W_f · (softmax_rows(F_q F_qᵀ) · F_q) + B_f` with
/// `F_q = W_q · X_main + B_q`. No residual shortcut.
///
/// Returns `(F_core, attention)`; attention is `T × T` with unit row sums.
pub fn core_saliency(tape: &mut Tape, x_main: Var, p: &CscmVars) -> Result<(Var, Var)> {
    let fq = tape.conv1d(x_main, p.q_w, p.q_b)?;
    let fq_t = tape.transpose(fq)?;
    let scores = tape.matmul(fq, fq_t)?;
    let attention = tape.softmax(scores, 1)?;
    let attended = tape.matmul(attention, fq)?;
    let core = tape.conv1d(attended, p.f_w, p.f_b)?;
    Ok((core, attention))
}

/// Enhanced main-modality features `O_main = σ(F_aux ⊙ F_main) ⊙ X_main`,
/// with `F_aux = W_aux · (X_aux + F_core) + B_aux` and `F_main` broadcast over time.
pub fn cscm_forward(tape: &mut Tape, x_main: Var, x_aux: Var, p: &CscmVars) -> Result<Var> {
    if tape.shape(x_main) != tape.shape(x_aux) || tape.shape(x_main).len() != 2 {
        return Err(Error::Shape(format!(
            "cscm inputs {:?} and {:?} must be equal T×D",
            tape.shape(x_main),
            tape.shape(x_aux)
        )));
    }
    let squeezed = squeeze_main(tape, x_main, p)?;
    let (core, _) = core_saliency(tape, x_main, p)?;
    let supplemented = tape.add(x_aux, core)?;
    let aux = tape.conv1d(supplemented, p.aux_w, p.aux_b)?;
    let descriptor = tape.mul_row(aux, squeezed)?;
    let gate = tape.sigmoid(descriptor);
    tape.mul(gate, x_main)
}
