//! Samples, labels and datasets; synthetic generation and HSE ingestion.

pub mod hse;
mod synthetic;
mod types;

pub use hse::{ingest_embeddings, read_hse, write_hse, write_jsonl};
pub use synthetic::{generate_split, generate_synthetic, SyntheticParams};
pub use types::{Dataset, LabelSet, Modality, Sample, Split, TokenSequence};
