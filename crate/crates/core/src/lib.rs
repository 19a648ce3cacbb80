//! Desk-scale laboratory for depth-guided, in-context multi-view image
//! generation.
//!
//! The pieces, bottom to top:
//!
//! * [`tensor`]: reverse-mode autodiff over dense f32 tensors (f64 accumulation
//!   in reductions and matmul inner loops).
//! * [`model`]: a toy MM-DiT that runs joint attention over concatenated
//!   text and image tokens, with LoRA and an additive depth-patch adapter.
//! * [`sca`]: semantic-correspondence records and the alignment loss against a
//!   frozen reference branch.
//! * [`diffusion`]: cosine noise schedule, masked denoising loss, AdamW,
//!   training steps and the DDIM sampler with classifier-free guidance.
//! * [`sim`]: an articulated capsule body, a fixed four-camera ring, analytic
//!   ray-capsule rendering, and damped Gauss-Newton pose fitting.
//! * [`eval`]: landmark detection, DLT triangulation through a hand-rolled
//!   4x4 Jacobi eigensolver, the multi-view consistency score, and toy
//!   attribute classifiers.
//!
//! Everything is CPU-only and deterministic per platform: all randomness flows
//! from one seed through labeled [`rng`] streams.

pub mod diffusion;
pub mod eval;
pub mod model;
pub mod rng;
pub mod sca;
pub mod sim;
pub mod tensor;
