//! Synthesize-Inject-Align (SIA) pipeline for domain-adapting a small
//! language model, desk scale and fully deterministic.
//!
//! The crate is organized around the three pipeline stages plus the
//! substrate they run on:
//!
//! - [`tinylm`] — a minimal decoder-only transformer (forward, loss, exact
//!   analytic gradients) in double precision, plus a lossless checkpoint
//!   format. Everything downstream is exercised against it.
//! - [`synth`] — the Synthesize stage: prompt construction for knowledge,
//!   reasoning, and safety tasks, a jailbreak technique catalog, and the
//!   multi-stage filter pipeline. Generation runs through a pluggable
//!   [`synth::Generator`]; a deterministic mock ships as the default.
//! - [`surgery`] — the Inject stage's depth up-scaling: similarity-based
//!   insertion-point selection, identity-initialized block insertion, and
//!   function-preservation verification.
//! - [`tieropt`] — three-tier parameter grouping with per-tier learning
//!   rates, decoupled weight decay, and a warmup+cosine schedule.
//! - [`mixer`] — deterministic 6:4 replay mixing with exact per-batch
//!   apportionment and a linear difficulty/risk curriculum.
//! - [`align`] — the Align stage: three-tier instruction wrapping, exact
//!   60/20/20 mix assembly, the red-team loop, and SFT batch construction
//!   with output-only loss masks.
//! - [`evalkit`] — perplexity, forgetting delta, ROUGE-L, correction F1,
//!   attack success rate, and report emission.
//! - [`trainer`] — the training loop tying mixer batches, tinylm gradients,
//!   and tieropt steps together.
//!
//! All randomness flows from explicit seeds through [`seeds`]; repeated runs
//! with the same inputs are bit-identical.

pub mod align;
pub mod evalkit;
pub mod mixer;
pub mod seeds;
pub mod surgery;
pub mod synth;
pub mod tensor;
pub mod tieropt;
pub mod tinylm;
pub mod trainer;
