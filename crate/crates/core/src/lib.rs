//! Multi-image preference data synthesis and a reference alignment core.
pub mod arith;
pub mod dpo;
pub mod eval;
pub mod filter;
pub mod fixtures;
pub mod grpo;
pub mod jsonl;
pub mod kinship;
pub mod l1;
pub mod l3;
pub mod pipeline;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod scene;
pub mod schedule;
pub mod train;
pub mod types;

#[cfg(test)]
#[path = "../tests/common/pixel_oracle.rs"]
mod pixel_oracle;

#[cfg(test)]
#[path = "../tests/common/fake_http.rs"]
mod fake_http;

pub use rng::Rng;
pub use types::{ConceptLabel, GeneratedSample, ImageAsset, ImageRef, Level, PreferenceSample, TaskLevel};
