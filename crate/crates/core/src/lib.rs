//! Knowledge-conflict VQA dataset generation and evaluation.
//!
//! The pipeline runs in stages, each reading and writing JSONL manifests and a
//! content-addressed image store:
//!
//! 1. [`ingest`] turns exported QA records into original [`model::Sample`]s.
//! 2. [`perturb`] extracts the question's object, segments it and produces
//!    perturbed images by removal or attribute infill.
//! 3. [`qc`] asks a judge model to verify every perturbation.
//! 4. [`assembly`] builds counterfactual, parametric and source-conflict
//!    samples plus randomized negatives.
//! 5. [`metrics`] runs a subject model and scores its answers; [`analysis`]
//!    relates accuracy to contextualization scores.
//!
//! External models sit behind [`backends::Backend`]; the deterministic mocks
//! in [`backends::mock`] make every stage reproducible offline.

pub mod analysis;
pub mod assembly;
pub mod backends;
pub mod exec;
pub mod ingest;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod qc;
pub mod review;
pub mod store;
pub mod synth;
pub mod validate;

pub use exec::Parallelism;
pub use model::{
    content_hash, Answer, Attribute, ConflictType, Dataset, ImageAsset, ImageOrigin, MaskAsset,
    ModelResponse, PerturbationMethod, PerturbationRecord, Quality, QuestionCategory,
    ResponseEntry, ReviewRating, Sample, Split, Verdict, RET_TOKEN,
};
pub use store::{ImageStore, StoreError};
