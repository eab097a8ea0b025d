//! Staged reasoning over hierarchical features with self-evolution gating.

pub mod backend;
pub mod gate;
pub mod model;
pub mod prompt;

pub use backend::{reason, Backend, BackendKind, IdentityBackend, ReasonerBackend, ReferenceBackend};
pub use gate::{evolution_score, refine, refine_features, EvolutionGate, GateMode, IDX_NEG, IDX_POS};
pub use model::{
    sample_seed, task_loss, total_loss, Ablation, AblationKind, Forward, HierModel, LossTerms, ModelConfig, Prediction,
    Vocabulary,
};
pub use prompt::{assemble_prompt, Content, Instruction, PromptLayout, PromptSequence, Segment, Stage, Template};
