//! Prompt-to-API routing for text-to-image generation.
//!
//! A compact autoregressive policy reads a user prompt and emits a complete
//! text-to-image API response (model plus generation parameters). It is
//! trained by supervised fine-tuning on instruction/API pairs ingested from
//! model-hub metadata, then aligned to a unified human-preference reward by
//! ranking sampled candidate responses.
//!
//! Modules follow the pipeline: [`schema`] and [`catalog`] build the data,
//! [`policy`] trains and decodes, [`scoring`] provides the reward,
//! [`alignment`] runs ranking alignment, and [`evaluation`] measures it.

pub mod alignment;
pub mod catalog;
pub mod evaluation;
pub mod pipeline;
pub mod policy;
pub mod schema;
pub mod scoring;
pub mod strategy;
pub mod synth;
pub mod util;
