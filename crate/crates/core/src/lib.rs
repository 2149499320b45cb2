//! Behavioral knowledge base over financial transaction histories.
//!
//! The pipeline turns raw transaction logs into three layers of evidence
//! (feature essences, behavioral patterns, downstream targets) connected by
//! Weight-of-Evidence rules, then uses that knowledge base to build grounded
//! prompt contexts, instruction-tuning triplets and evaluation runs.
//!
//! ```text
//! ingest -> essence -> whitebox / pattern -> kb -> context -> gateway -> eval
//!                                              \-> instruct
//! ```

pub mod context;
pub mod essence;
pub mod eval;
pub mod gateway;
pub mod ingest;
pub mod instruct;
pub mod kb;
pub mod pattern;
pub mod util;
pub mod whitebox;

pub use context::{assemble_context, ContextStrategy, PromptContext};
pub use essence::{compute_essences, default_essence_specs, EssenceMatrix, EssenceSpec, EssenceVector};
pub use eval::{run_eval, RunReport};
pub use gateway::{Gateway, MockGateway, PredictionResult};
pub use ingest::{Transaction, UserHistory};
pub use instruct::{export_dataset, generate_triplets, InstructionTriplet};
pub use kb::{build_kb, instantiate_facts, KnowledgeBase, TargetSpec};
pub use whitebox::{Grade, Rule};
