//! Pairwise concept relations: bottleneck encoding, intent heads,
//! Jensen–Shannon novelty scoring and retention-ratio selection.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::functional::{kl_unchecked, softmax};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bindings, Linear, ParamStore};

/// Which Jensen–Shannon form to score with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JsMode {
    /// `½ KL(p‖m) + ½ KL(q‖m)`.
    #[default]
    Standard,
    /// `½ KL(p‖m) + ½ KL(m‖q)`, the asymmetric form.
    PaperVerbatim,
}

impl FromStr for JsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(JsMode::Standard),
            "paper-verbatim" => Ok(JsMode::PaperVerbatim),
            other => Err(Error::invalid(format!("unknown js mode {other:?}"))),
        }
    }
}

impl fmt::Display for JsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JsMode::Standard => "standard",
            JsMode::PaperVerbatim => "paper-verbatim",
        })
    }
}

/// JS divergence between two distributions in the chosen form. Floored at
/// zero: both forms are non-negative and only rounding goes below.
pub fn js_divergence(p: &[f64], q: &[f64], mode: JsMode) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let second = match mode {
        JsMode::Standard => kl_unchecked(q, &m),
        JsMode::PaperVerbatim => kl_unchecked(&m, q),
    };
    (0.5 * (kl_unchecked(p, &m) + second)).max(0.0)
}

/// JS divergence between `softmax(concept_logits)` and `softmax(relation_logits)`.
pub fn js_score(concept_logits: &[f64], relation_logits: &[f64], mode: JsMode) -> Result<f64> {
    if concept_logits.len() != relation_logits.len() {
        return Err(Error::dim(
            "js_score",
            format!("{} vs {}", concept_logits.len(), relation_logits.len()),
        ));
    }
    Ok(js_divergence(&softmax(concept_logits), &softmax(relation_logits), mode))
}

/// Bottleneck pair encoder plus the concept and relation intent heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEncoder {
    /// `2d → b`.
    pub squeeze: Linear,
    /// `b → d`.
    pub expand: Linear,
    /// Concept head, `d → L`.
    pub concept_head: Linear,
    /// Relation head, `d → L`.
    pub relation_head: Linear,
}

impl RelationEncoder {
    pub fn new(store: &mut ParamStore, d: usize, n_labels: usize, bottleneck: usize, rng: &mut impl Rng) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= 2 * d {
            return Err(Error::invalid(format!(
                "bottleneck width {bottleneck} must lie in 1..{}",
                2 * d
            )));
        }
        Ok(RelationEncoder {
            squeeze: Linear::new(store, "relation.squeeze", 2 * d, bottleneck, rng)?,
            expand: Linear::new(store, "relation.expand", bottleneck, d, rng)?,
            concept_head: Linear::new(store, "relation.concept_head", d, n_labels, rng)?,
            relation_head: Linear::new(store, "relation.relation_head", d, n_labels, rng)?,
        })
    }

    /// `r_ij = expand(ReLU(squeeze(ReLU([c_i; c_j]))))` for row-aligned
    /// batches `left`, `right` (`P × d` each).
    pub fn encode(&self, tape: &mut Tape, bound: &Bindings, left: Var, right: Var) -> Result<Var> {
        let joined = tape.concat_cols(left, right)?;
        let x = tape.relu(joined)?;
        let h = self.squeeze.forward(tape, bound, x)?;
        let h = tape.relu(h)?;
        self.expand.forward(tape, bound, h)
    }

    pub fn classify_concepts(&self, tape: &mut Tape, bound: &Bindings, concepts: Var) -> Result<Var> {
        self.concept_head.forward(tape, bound, concepts)
    }

    pub fn classify_relations(&self, tape: &mut Tape, bound: &Bindings, relations: Var) -> Result<Var> {
        self.relation_head.forward(tape, bound, relations)
    }
}

/// Unordered pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn enumerate_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRelation {
    pub pair: (usize, usize),
    pub vector: Vec<f64>,
    pub score: f64,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSet {
    pub selected: Vec<ScoredRelation>,
    pub retention_ratio: f64,
}

impl RelationSet {
    pub fn empty(retention_ratio: f64) -> Self {
        RelationSet {
            selected: Vec::new(),
            retention_ratio,
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Keeps at most `budget` relations.
    pub fn truncate(&mut self, budget: usize) {
        self.selected.truncate(budget);
    }
}

/// Tape handles and scores for every enumerated pair of one concept set.
#[derive(Clone, Debug)]
pub struct PairForward {
    pub pairs: Vec<(usize, usize)>,
    /// `P × d`.
    pub relations: Var,
    /// `k × L`.
    pub concept_logits: Var,
    /// `P × L`.
    pub relation_logits: Var,
    /// `JS_ij = JS_i + JS_j` per pair, computed from values only.
    pub scores: Vec<f64>,
}

/// Encodes, classifies and scores all pairs of `concepts` (`k × d`).
pub fn forward_pairs(tape: &mut Tape, bound: &Bindings, enc: &RelationEncoder, concepts: Var, mode: JsMode) -> Result<PairForward> {
    let k = tape.shape(concepts)[0];
    if k < 2 {
        return Err(Error::invalid(format!("relation scoring needs k >= 2 concepts, got {k}")));
    }
    let pairs = enumerate_pairs(k);
    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let left = tape.gather_rows(concepts, &left_idx)?;
    let right = tape.gather_rows(concepts, &right_idx)?;
    let relations = enc.encode(tape, bound, left, right)?;
    let concept_logits = enc.classify_concepts(tape, bound, concepts)?;
    let relation_logits = enc.classify_relations(tape, bound, relations)?;

    let (cl, rl) = (tape.value(concept_logits), tape.value(relation_logits));
    let scores = pairs
        .iter()
        .enumerate()
        .map(|(p, &(i, j))| {
            let sij = rl.row_slice(p);
            Ok(js_score(cl.row_slice(i), sij, mode)? + js_score(cl.row_slice(j), sij, mode)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(PairForward {
        pairs,
        relations,
        concept_logits,
        relation_logits,
        scores,
    })
}

/// `CE(s_i, g) + CE(s_j, g) + CE(s_ij, g)`, each term averaged over its rows.
/// Passing all enumerated pairs as rows gives the pair-averaged loss.
pub fn relation_loss(tape: &mut Tape, concept_logits_i: Var, concept_logits_j: Var, relation_logits: Var, g: usize) -> Result<Var> {
    let rows = tape.shape(relation_logits)[0];
    let targets = vec![g; rows];
    let a = tape.cross_entropy(concept_logits_i, &targets)?;
    let b = tape.cross_entropy(concept_logits_j, &targets)?;
    let c = tape.cross_entropy(relation_logits, &targets)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Pair-averaged relation loss for a [`PairForward`].
pub fn pair_relation_loss(tape: &mut Tape, fwd: &PairForward, g: usize) -> Result<Var> {
    let (left, right): (Vec<usize>, Vec<usize>) = fwd.pairs.iter().copied().unzip();
    let si = tape.gather_rows(fwd.concept_logits, &left)?;
    let sj = tape.gather_rows(fwd.concept_logits, &right)?;
    relation_loss(tape, si, sj, fwd.relation_logits, g)
}

/// Value-level scoring of every pair of `concepts` (`k × d`).
pub fn score_all_pairs(concepts: &Tensor, enc: &RelationEncoder, store: &ParamStore, mode: JsMode) -> Result<Vec<ScoredRelation>> {
    let mut tape = Tape::new();
    let bound = store.bind_constant(&mut tape);
    let c = tape.constant(concepts.clone());
    let fwd = forward_pairs(&mut tape, &bound, enc, c, mode)?;
    let (rv, rl) = (tape.value(fwd.relations), tape.value(fwd.relation_logits));
    Ok(fwd
        .pairs
        .iter()
        .enumerate()
        .map(|(p, &pair)| ScoredRelation {
            pair,
            vector: rv.row_slice(p).to_vec(),
            score: fwd.scores[p],
            logits: rl.row_slice(p).to_vec(),
        })
        .collect())
}

/// Number kept out of `count` at `ratio`: `max(1, ⌊ratio · count⌋)`.
pub fn retained_count(count: usize, ratio: f64) -> usize {
    // the small slack keeps e.g. 0.29 * 100 from flooring to 28
    (((ratio * count as f64) + 1e-9).floor() as usize).clamp(1, count.max(1))
}

/// Order used for selection: higher score first, then smaller `(i, j)`.
pub fn selection_order(a: &ScoredRelation, b: &ScoredRelation) -> Ordering {
    b.score.total_cmp(&a.score).then(a.pair.cmp(&b.pair))
}

/// Keeps the top `max(1, ⌊ratio · count⌋)` relations, sorted by
/// `(−score, i, j)`.
pub fn select_relations(mut scored: Vec<ScoredRelation>, retention_ratio: f64) -> Result<RelationSet> {
    if scored.is_empty() {
        return Err(Error::invalid("no relations to select from"));
    }
    if !(retention_ratio > 0.0 && retention_ratio <= 1.0) {
        return Err(Error::invalid(format!("retention ratio must lie in (0, 1], got {retention_ratio}")));
    }
    let keep = retained_count(scored.len(), retention_ratio);
    scored.sort_by(selection_order);
    scored.truncate(keep);
    Ok(RelationSet {
        selected: scored,
        retention_ratio,
    })
}

/// Indices (into the scored list) of the relations [`select_relations`]
/// would keep, in selection order.
pub fn select_indices(pairs: &[(usize, usize)], scores: &[f64], retention_ratio: f64, budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(pairs[a].cmp(&pairs[b])));
    order.truncate(retained_count(scores.len(), retention_ratio).min(budget));
    order
}
