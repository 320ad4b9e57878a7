//! Toy-scale conditional latent diffusion engine.
//!
//! The crate implements four cooperating subsystems on top of a deterministic
//! CPU tensor kernel:
//!
//! * dual-branch control training (a frozen base network plus trainable
//!   per-layer weight copies) with an exact merge back into a single-branch
//!   network for inference,
//! * DDIM sampling and inversion with self-attention caching, and an
//!   inversion-anchored face-region restoration pipeline built on masked
//!   adaptive instance normalization,
//! * identity-conditioned cross-attention, including mask-guided multi-identity
//!   attention and the clone-face training objective,
//! * an analytic FLOPs/MACs/parameter profiler over declarative layer specs.
//!
//! A synthetic-scene harness (identities, scenes, masks, rasters, metrics,
//! file formats) makes the whole pipeline runnable end to end on a CPU.

pub mod error;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
