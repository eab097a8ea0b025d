//! End-to-end pipeline: clustering, relation selection, staged prompt,
//! backend pass, self-evolution gating and the label prediction pass.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster, ClusterOptions};
use crate::datamodel::{LabelSet, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{init_uniform, Bindings, ParamId, ParamStore};
use crate::relations::{forward_pairs, pair_relation_loss, select_indices, JsMode, PairForward, RelationEncoder};

use super::backend::{Backend, BackendKind, ReasonerBackend};
use super::gate::{refine, EvolutionGate, GateMode, IDX_NEG, IDX_POS};
use super::prompt::{Instruction, PromptLayout, Template};

/// Token indices: 0 negative response, 1 affirmative response,
/// `2..L+2` labels, then instructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_labels: usize,
}

impl Vocabulary {
    pub const NEGATIVE: usize = IDX_NEG;
    pub const AFFIRMATIVE: usize = IDX_POS;
    pub const LABEL_OFFSET: usize = 2;

    pub fn label_token(&self, label: usize) -> usize {
        Self::LABEL_OFFSET + label
    }

    pub fn instruction_token(&self, ins: Instruction) -> usize {
        Self::LABEL_OFFSET + self.n_labels + ins.index()
    }

    pub fn size(&self) -> usize {
        Self::LABEL_OFFSET + self.n_labels + Instruction::COUNT
    }
}

/// Component removals, each a runtime switch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Skip clustering; relations are scored over raw tokens and no concept
    /// slots are emitted.
    pub no_concept: bool,
    /// Skip relation scoring; the relational stage is dropped.
    pub no_relation: bool,
    /// Replace the staged prompt with the plain template.
    pub no_cot: bool,
    /// Fix every gate score to 1.
    pub no_evolution: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Concept,
    Relation,
    Cot,
    Evolution,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        AblationKind::Concept,
        AblationKind::Relation,
        AblationKind::Cot,
        AblationKind::Evolution,
    ];
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concept" => Ok(AblationKind::Concept),
            "relation" => Ok(AblationKind::Relation),
            "cot" => Ok(AblationKind::Cot),
            "evolution" => Ok(AblationKind::Evolution),
            other => Err(Error::invalid(format!("unknown ablation {other:?}"))),
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationKind::Concept => "concept",
            AblationKind::Relation => "relation",
            AblationKind::Cot => "cot",
            AblationKind::Evolution => "evolution",
        })
    }
}

impl Ablation {
    pub fn only(kind: AblationKind) -> Self {
        Ablation::none().with(kind)
    }

    pub fn none() -> Self {
        Ablation::default()
    }

    pub fn all() -> Self {
        AblationKind::ALL.iter().fold(Ablation::none(), |a, &k| a.with(k))
    }

    pub fn with(mut self, kind: AblationKind) -> Self {
        match kind {
            AblationKind::Concept => self.no_concept = true,
            AblationKind::Relation => self.no_relation = true,
            AblationKind::Cot => self.no_cot = true,
            AblationKind::Evolution => self.no_evolution = true,
        }
        self
    }
}

/// Architecture and pipeline settings stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_labels: usize,
    /// Concept count.
    pub k: usize,
    /// Relation budget.
    pub l: usize,
    pub retention_ratio: f64,
    pub alpha_init: f64,
    pub js_mode: JsMode,
    pub cluster: ClusterOptions,
    pub backend: BackendKind,
    pub layers: usize,
    pub freeze_gate: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 16,
            n_labels: 4,
            k: 8,
            l: 4,
            retention_ratio: 0.5,
            alpha_init: 0.5,
            js_mode: JsMode::Standard,
            cluster: ClusterOptions::default(),
            backend: BackendKind::Reference,
            layers: 2,
            freeze_gate: false,
            ablation: Ablation::none(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.n_labels < 2 || self.k == 0 || self.l == 0 || self.layers == 0 {
            return Err(Error::Config(format!(
                "d, n_labels >= 2 and k, l, layers >= 1 required (d={}, L={}, k={}, l={}, layers={})",
                self.d, self.n_labels, self.k, self.l, self.layers
            )));
        }
        if !(self.retention_ratio > 0.0 && self.retention_ratio <= 1.0) {
            return Err(Error::Config(format!("retention_ratio must lie in (0, 1], got {}", self.retention_ratio)));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return Err(Error::Config(format!("alpha_init must lie in (0, 1), got {}", self.alpha_init)));
        }
        if self.cluster.iterations == 0 {
            return Err(Error::Config("clustering iterations must be >= 1".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary { n_labels: self.n_labels }
    }
}

/// Tape handles and side outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub layout: PromptLayout,
    /// `1 × L` label logits at the final position.
    pub logits: Var,
    /// Hidden states before gating.
    pub hidden: Var,
    /// Hidden states with gated slot features substituted.
    pub refined: Var,
    /// Guided concepts (`k × d`), absent without concepts.
    pub concepts: Option<Var>,
    /// Every scored pair, absent without relations.
    pub pairs: Option<PairForward>,
    /// Indices into `pairs` of the selected relations.
    pub selected: Vec<usize>,
    pub concept_scores: Vec<f64>,
    pub relation_scores: Vec<f64>,
}

/// Value-level prediction for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub probs: Vec<f64>,
    pub concept_scores: Vec<f64>,
    pub relation_scores: Vec<f64>,
    pub relation_pairs: Vec<(usize, usize)>,
    pub relation_js: Vec<f64>,
}

/// Loss terms of one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub task: Var,
    pub relation: Option<Var>,
    pub total: Var,
}

/// `L = L_task + β · L_relation`.
pub fn total_loss(task: f64, relation: f64, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
    }
    Ok(task + beta * relation)
}

/// Cross-entropy of `label_logits` (`1 × L`) against label `g`.
pub fn task_loss(tape: &mut Tape, label_logits: Var, g: usize) -> Result<Var> {
    tape.cross_entropy(label_logits, &[g])
}

/// Per-sample clustering seed from the run seed and the sample id (FNV-1a).
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    alpha_logit: ParamId,
    instructions: ParamId,
    encoder: RelationEncoder,
    backend: Backend,
    gate: EvolutionGate,
    gate_mode: GateMode,
}

impl HierModel {
    /// Fresh parameters drawn from `ChaCha8(seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let a = config.alpha_init;
        let alpha_logit = store.add("alpha_logit", Tensor::scalar((a / (1.0 - a)).ln()))?;
        let instructions = store.add("instructions", init_uniform(&mut rng, Instruction::COUNT, d, 1))?;
        let encoder = RelationEncoder::new(&mut store, d, config.n_labels, (d / 2).max(1), &mut rng)?;
        let backend = Backend::new(config.backend, &mut store, d, config.vocabulary().size(), config.layers, &mut rng)?;
        let gate = EvolutionGate::copy_from(&mut store, backend.gen_head())?;
        gate.set_frozen(&mut store, config.freeze_gate);
        Ok(HierModel {
            config,
            store,
            alpha_logit,
            instructions,
            encoder,
            backend,
            gate,
            gate_mode: GateMode::Learned,
        })
    }

    pub fn alpha(&self) -> f64 {
        crate::numerics::functional::sigmoid(self.store.get(self.alpha_logit).item())
    }

    pub fn encoder(&self) -> &RelationEncoder {
        &self.encoder
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn gate(&self) -> &EvolutionGate {
        &self.gate
    }

    /// Overrides the gate (the evolution ablation still forces scores to 1).
    pub fn set_gate_mode(&mut self, mode: GateMode) {
        self.gate_mode = mode;
    }

    fn effective_gate(&self) -> GateMode {
        if self.config.ablation.no_evolution {
            GateMode::Fixed(1.0)
        } else {
            self.gate_mode
        }
    }

    fn check_inputs(&self, seq: &TokenSequence, labels: &LabelSet) -> Result<()> {
        if seq.dim() != self.config.d || labels.dim() != self.config.d {
            return Err(Error::dim(
                "forward",
                format!("model width {}, tokens {}, labels {}", self.config.d, seq.dim(), labels.dim()),
            ));
        }
        if labels.len() != self.config.n_labels {
            return Err(Error::invalid(format!(
                "model has {} labels, label set has {}",
                self.config.n_labels,
                labels.len()
            )));
        }
        Ok(())
    }

    /// Full forward pass with parameters taken from `bound`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, seq: &TokenSequence, labels: &LabelSet, cluster_seed: u64) -> Result<Forward> {
        self.check_inputs(seq, labels)?;
        let cfg = &self.config;
        let abl = cfg.ablation;
        let n = seq.len();
        let z = tape.constant(seq.tokens().clone());

        let concepts = if abl.no_concept {
            None
        } else {
            let y = tape.constant(labels.embeddings().clone());
            let alpha = tape.sigmoid(bound.get(self.alpha_logit))?;
            let trace = cluster(tape, z, y, alpha, cfg.k.min(n), cluster_seed, &cfg.cluster)?;
            Some(trace.centroids)
        };

        let source = concepts.unwrap_or(z);
        let (pairs, selected, relations) = if abl.no_relation || tape.shape(source)[0] < 2 {
            (None, Vec::new(), None)
        } else {
            let fwd = forward_pairs(tape, bound, &self.encoder, source, cfg.js_mode)?;
            let sel = select_indices(&fwd.pairs, &fwd.scores, cfg.retention_ratio, cfg.l);
            let r = tape.gather_rows(fwd.relations, &sel)?;
            (Some(fwd), sel, Some(r))
        };

        let template = if abl.no_cot { Template::Plain } else { Template::Staged };
        let k_slots = concepts.map_or(0, |c| tape.shape(c)[0]);
        let layout = PromptLayout::build(template, n, k_slots, selected.len(), !abl.no_relation)?;
        let prompt = layout.realize(tape, bound.get(self.instructions), z, concepts, relations)?;
        let hidden = self.backend.forward(tape, bound, prompt)?;

        let slots = layout.slot_positions();
        let (refined, scores) = if slots.is_empty() {
            (hidden, Vec::new())
        } else {
            let features = tape.gather_rows(hidden, &slots)?;
            let s = match self.effective_gate() {
                GateMode::Learned => self.gate.scores(tape, bound, features)?,
                GateMode::Fixed(v) => tape.constant(Tensor::filled(slots.len(), 1, v)),
            };
            let gated = refine(tape, features, s)?;
            (tape.replace_rows(hidden, gated, &slots)?, tape.value(s).data().to_vec())
        };
        let vocab_logits = self.backend.predict(tape, bound, refined)?;
        let start = Vocabulary::LABEL_OFFSET;
        let logits = tape.slice_cols(vocab_logits, start, start + cfg.n_labels)?;

        let kc = layout.concept_positions().len();
        Ok(Forward {
            logits,
            hidden,
            refined,
            concepts,
            pairs,
            selected,
            concept_scores: scores[..kc].to_vec(),
            relation_scores: scores[kc..].to_vec(),
            layout,
        })
    }

    /// Task, relation and total loss for label `g`.
    pub fn loss(&self, tape: &mut Tape, fwd: &Forward, g: usize, beta: f64) -> Result<LossTerms> {
        if g >= self.config.n_labels {
            return Err(Error::IndexOutOfRange {
                what: "label",
                index: g,
                len: self.config.n_labels,
            });
        }
        if !(beta >= 0.0) {
            return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
        }
        let task = task_loss(tape, fwd.logits, g)?;
        let relation = fwd.pairs.as_ref().map(|p| pair_relation_loss(tape, p, g)).transpose()?;
        let total = match relation {
            Some(r) => tape.add_scaled(task, r, beta)?,
            None => task,
        };
        Ok(LossTerms { task, relation, total })
    }

    /// Inference with constant parameters.
    pub fn predict(&self, seq: &TokenSequence, labels: &LabelSet, cluster_seed: u64) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.store.bind_constant(&mut tape);
        let fwd = self.forward(&mut tape, &bound, seq, labels, cluster_seed)?;
        Ok(Self::prediction(&tape, fwd))
    }

    /// Reads the prediction off a finished forward pass.
    pub fn prediction(tape: &Tape, fwd: Forward) -> Prediction {
        let logits = tape.value(fwd.logits).data();
        let probs = crate::numerics::softmax(logits);
        let label = (0..probs.len()).fold(0, |best, i| if logits[i] > logits[best] { i } else { best });
        let (relation_pairs, relation_js) = match &fwd.pairs {
            Some(p) => fwd.selected.iter().map(|&i| (p.pairs[i], p.scores[i])).unzip(),
            None => (Vec::new(), Vec::new()),
        };
        Prediction {
            label,
            probs,
            concept_scores: fwd.concept_scores,
            relation_scores: fwd.relation_scores,
            relation_pairs,
            relation_js,
        }
    }
}
