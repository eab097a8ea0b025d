//! Self-evolution confidence gate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::functional::pair_softmax;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bindings, Linear, ParamStore};

/// Vocabulary index of the negative response token.
pub const IDX_NEG: usize = 0;
/// Vocabulary index of the affirmative response token.
pub const IDX_POS: usize = 1;

/// Projection of slot features to vocabulary logits, read out as a
/// two-way softmax over the affirmative and negative response tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionGate {
    pub head: Linear,
    pub idx_pos: usize,
    pub idx_neg: usize,
}

impl EvolutionGate {
    /// Deep-copies `source` into fresh parameters named `gate.gen_head.*`.
    pub fn copy_from(store: &mut ParamStore, source: Linear) -> Result<Self> {
        let w = store.get(source.weight).clone();
        let b = store.get(source.bias).clone();
        if w.cols() <= IDX_POS.max(IDX_NEG) {
            return Err(Error::invalid(format!("vocabulary of {} has no response tokens", w.cols())));
        }
        Ok(EvolutionGate {
            head: Linear {
                weight: store.add("gate.gen_head.weight", w)?,
                bias: store.add("gate.gen_head.bias", b)?,
            },
            idx_pos: IDX_POS,
            idx_neg: IDX_NEG,
        })
    }

    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        store.set_frozen(self.head.weight, frozen);
        store.set_frozen(self.head.bias, frozen);
    }

    /// `r × V` response logits for `r × d` features.
    pub fn logits(&self, tape: &mut Tape, bound: &Bindings, features: Var) -> Result<Var> {
        self.head.forward(tape, bound, features)
    }

    /// `r × 1` scores in `(0, 1)`.
    pub fn scores(&self, tape: &mut Tape, bound: &Bindings, features: Var) -> Result<Var> {
        let logits = self.logits(tape, bound, features)?;
        tape.pair_softmax(logits, self.idx_pos, self.idx_neg)
    }
}

/// How slot features are gated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum GateMode {
    /// Scores from the gate head.
    #[default]
    Learned,
    /// Every score set to the given constant.
    Fixed(f64),
}

/// Score for one logit vector.
pub fn evolution_score(logits: &[f64], idx_pos: usize, idx_neg: usize) -> Result<f64> {
    for i in [idx_pos, idx_neg] {
        if i >= logits.len() {
            return Err(Error::IndexOutOfRange {
                what: "vocabulary",
                index: i,
                len: logits.len(),
            });
        }
    }
    Ok(pair_softmax(logits[idx_pos], logits[idx_neg]))
}

/// `Feature' = score · Feature` on the tape; `scores` is `r × 1`.
pub fn refine(tape: &mut Tape, features: Var, scores: Var) -> Result<Var> {
    tape.scale_rows(features, scores)
}

/// Value-level gating, one score per feature row.
pub fn refine_features(features: &Tensor, scores: &[f64]) -> Result<Tensor> {
    if features.rows() != scores.len() {
        return Err(Error::dim(
            "refine_features",
            format!("{} features, {} scores", features.rows(), scores.len()),
        ));
    }
    let mut out = features.clone();
    for (r, &s) in scores.iter().enumerate() {
        out.row_slice_mut(r).iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}
