//! Teacher, assistant and student reasoning distillation for multimodal
//! sentiment analysis.

pub mod builder;
pub mod distill;
pub mod gateway;
pub mod metrics;
pub mod model;
pub mod parser;
pub mod pipeline;
pub mod prompt;
