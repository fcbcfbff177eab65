//! Desk-scale QLoRA instruct-tuning engine.
//!
//! The crate covers the full pipeline: synthetic subjective-question /
//! answer-evaluation datasets, byte-level tokenization, a tiny decoder-only
//! transformer whose frozen base weights are NF4-quantized, low-rank adapter
//! fine-tuning, and anonymized judge-based ranking with aggregated
//! percentage reports.

pub mod autograd;
pub mod clients;
pub mod corpus;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod judge;
pub mod quant;
pub mod synthgen;
pub mod trainkit;

pub use numerics::{bf16_round, Bf16, Precision, Rng, Tensor};
pub use quant::{dequantize_tensor, nf4_codebook, quantize_tensor, QuantizedTensor};
