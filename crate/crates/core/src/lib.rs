//! Self-training pipeline for multimodal question answering: the model
//! captions, reasons and answers, learns from its own correct rationales and
//! from explanations of why distractors are wrong.

pub mod annotation;
pub mod dataset;
pub mod evaluation;
pub mod gateway;
pub mod orchestrator;
pub mod prompts;
pub mod rationale;
pub mod text;
pub mod trainset;
