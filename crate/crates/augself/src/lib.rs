//! Desk-scale laboratory for augmentation-aware self-supervised GAN training.
//!
//! The crate is organized bottom-up: a reverse-mode tape autodiff engine over
//! f64 tensors (`tensor`), differentiable image augmentations parameterized by
//! their own strengths (`augment`), small generator/discriminator models
//! (`models`), the adversarial and self-supervised losses (`losses`), exact
//! discrete f-divergence machinery for verifying the theory behind the losses
//! (`divergences`), and a deterministic trainer with metrics (`data`, `optim`,
//! `metrics`, `train`).

pub mod augment;
pub mod data;
pub mod divergences;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod pnm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
