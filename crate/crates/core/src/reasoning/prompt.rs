//! Staged prompt layout and realization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Reasoning stage a prompt position belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Cot1,
    Cot2,
    Cot3,
}

/// Learned instruction embeddings, one row each in the instruction table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instruction {
    CotContext,
    ContextCue,
    CotConcept,
    ConceptCue,
    CotRelation,
    RelationCue,
    Usefulness,
    Answer,
    Plain,
}

impl Instruction {
    pub const ALL: [Instruction; 9] = [
        Instruction::CotContext,
        Instruction::ContextCue,
        Instruction::CotConcept,
        Instruction::ConceptCue,
        Instruction::CotRelation,
        Instruction::RelationCue,
        Instruction::Usefulness,
        Instruction::Answer,
        Instruction::Plain,
    ];
    pub const COUNT: usize = Self::ALL.len();

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "source", rename_all = "snake_case")]
pub enum Content {
    Instruction(Instruction),
    Context(usize),
    ConceptSlot(usize),
    RelationSlot(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub stage: Stage,
    pub content: Content,
}

/// Prompt schema.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    /// Three stages, each opened by its own instructions; concept and relation
    /// stages carry the usefulness cue before their slots.
    #[default]
    Staged,
    /// One plain instruction, then context, slots and the answer cue.
    Plain,
}

/// Ordered prompt positions plus the slot lookup.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub segments: Vec<Segment>,
    concept_positions: Vec<usize>,
    relation_positions: Vec<usize>,
}

impl PromptLayout {
    /// Layout for `n` context tokens, `k` concepts and `l` relations. With
    /// `with_relation_stage = false` the relational stage is dropped entirely
    /// and `l` must be 0.
    pub fn build(template: Template, n: usize, k: usize, l: usize, with_relation_stage: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("prompt needs at least one context token"));
        }
        if !with_relation_stage && l > 0 {
            return Err(Error::invalid("relation slots without a relation stage"));
        }
        use Content::{ConceptSlot, Context, RelationSlot};
        use Instruction as I;
        let mut segs = Vec::with_capacity(n + k + l + 10);
        let mut push = |stage, content| segs.push(Segment { stage, content });
        match template {
            Template::Staged => {
                push(Stage::Cot1, Content::Instruction(I::CotContext));
                push(Stage::Cot1, Content::Instruction(I::ContextCue));
                (0..n).for_each(|i| push(Stage::Cot1, Context(i)));
                push(Stage::Cot2, Content::Instruction(I::CotConcept));
                push(Stage::Cot2, Content::Instruction(I::ConceptCue));
                push(Stage::Cot2, Content::Instruction(I::Usefulness));
                (0..k).for_each(|i| push(Stage::Cot2, ConceptSlot(i)));
                if with_relation_stage {
                    push(Stage::Cot3, Content::Instruction(I::CotRelation));
                    push(Stage::Cot3, Content::Instruction(I::RelationCue));
                    push(Stage::Cot3, Content::Instruction(I::Usefulness));
                    (0..l).for_each(|i| push(Stage::Cot3, RelationSlot(i)));
                }
            }
            Template::Plain => {
                push(Stage::Cot1, Content::Instruction(I::Plain));
                (0..n).for_each(|i| push(Stage::Cot1, Context(i)));
                (0..k).for_each(|i| push(Stage::Cot2, ConceptSlot(i)));
                (0..l).for_each(|i| push(Stage::Cot3, RelationSlot(i)));
            }
        }
        let last = segs.last().map_or(Stage::Cot1, |s| s.stage);
        segs.push(Segment {
            stage: last,
            content: Content::Instruction(I::Answer),
        });

        let positions = |want: fn(&Content) -> bool| -> Vec<usize> {
            segs.iter().enumerate().filter(|(_, s)| want(&s.content)).map(|(p, _)| p).collect()
        };
        let concept_positions = positions(|c| matches!(c, ConceptSlot(_)));
        let relation_positions = positions(|c| matches!(c, RelationSlot(_)));
        Ok(PromptLayout {
            segments: segs,
            concept_positions,
            relation_positions,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Prompt positions of concept slots, in concept order.
    pub fn concept_positions(&self) -> &[usize] {
        &self.concept_positions
    }

    /// Prompt positions of relation slots, in relation order.
    pub fn relation_positions(&self) -> &[usize] {
        &self.relation_positions
    }

    /// Concept then relation slot positions.
    pub fn slot_positions(&self) -> Vec<usize> {
        self.concept_positions.iter().chain(&self.relation_positions).copied().collect()
    }

    pub fn slot_count(&self) -> usize {
        self.concept_positions.len() + self.relation_positions.len()
    }

    fn counts(&self) -> (usize, usize, usize) {
        let n = self.segments.iter().filter(|s| matches!(s.content, Content::Context(_))).count();
        (n, self.concept_positions.len(), self.relation_positions.len())
    }

    /// Row of the stacked source `[instructions; tokens; concepts; relations]`
    /// feeding each position.
    fn source_rows(&self) -> Vec<usize> {
        let (n, k, _) = self.counts();
        let base = Instruction::COUNT;
        self.segments
            .iter()
            .map(|s| match s.content {
                Content::Instruction(ins) => ins.index(),
                Content::Context(i) => base + i,
                Content::ConceptSlot(i) => base + n + i,
                Content::RelationSlot(i) => base + n + k + i,
            })
            .collect()
    }

    fn check_sources(&self, shapes: [[usize; 2]; 4], d: usize) -> Result<()> {
        let (n, k, l) = self.counts();
        let expected = [Instruction::COUNT, n, k, l];
        let names = ["instructions", "tokens", "concepts", "relations"];
        for ((shape, want), name) in shapes.iter().zip(expected).zip(names) {
            if shape[0] != want || (want > 0 && shape[1] != d) {
                return Err(Error::dim(
                    "assemble_prompt",
                    format!("{name} is {}x{}, layout needs {want}x{d}", shape[0], shape[1]),
                ));
            }
        }
        Ok(())
    }

    /// Builds the `m × d` prompt matrix on the tape. `relations` may be
    /// `None` when the layout has no relation slots.
    pub fn realize(&self, tape: &mut Tape, instructions: Var, tokens: Var, concepts: Option<Var>, relations: Option<Var>) -> Result<Var> {
        let d = tape.shape(instructions)[1];
        let shape_of = |tape: &Tape, v: Option<Var>| v.map_or([0, d], |v| tape.shape(v));
        self.check_sources(
            [
                tape.shape(instructions),
                tape.shape(tokens),
                shape_of(tape, concepts),
                shape_of(tape, relations),
            ],
            d,
        )?;
        let mut parts = vec![instructions, tokens];
        parts.extend(concepts.filter(|&c| tape.shape(c)[0] > 0));
        parts.extend(relations.filter(|&r| tape.shape(r)[0] > 0));
        let stacked = tape.concat_rows(&parts)?;
        tape.gather_rows(stacked, &self.source_rows())
    }
}

/// A realized prompt: layout plus one vector per position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub layout: PromptLayout,
    pub vectors: Tensor,
}

/// Value-level assembly of the staged (or plain) prompt.
pub fn assemble_prompt(tokens: &Tensor, concepts: &Tensor, relations: &Tensor, instructions: &Tensor, template: Template) -> Result<PromptSequence> {
    let layout = PromptLayout::build(template, tokens.rows(), concepts.rows(), relations.rows(), true)?;
    let mut tape = Tape::new();
    let ins = tape.constant(instructions.clone());
    let z = tape.constant(tokens.clone());
    let c = tape.constant(concepts.clone());
    let r = tape.constant(relations.clone());
    let v = layout.realize(&mut tape, ins, z, Some(c), Some(r))?;
    Ok(PromptSequence {
        vectors: tape.value(v).clone(),
        layout,
    })
}
