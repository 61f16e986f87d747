//! Detection of obfuscated command lines in execution-log telemetry.
//!
//! The pipeline runs in stages: raw logs are normalized (value patterns such
//! as GUIDs or IPs are rewritten to meta-tokens), a subword tokenizer is
//! trained on the normalized corpus, a small generator/discriminator
//! transformer pair is pretrained with a replaced-token-detection objective,
//! and the discriminator is fine-tuned with focal loss into a binary
//! obfuscation classifier served by the [`detector`] module.

pub mod corpus;
pub mod detector;
pub mod model;
pub mod normalizer;
pub mod obfugen;
pub mod pipeline;
pub mod synth;
pub mod tokenizer;
pub mod trainer;
