//! Desk-scale three-stage post-training domain adaptation for image
//! restoration: a pre-trained convolutional restorer is adapted to an unseen
//! degradation domain using pseudo-targets synthesized by an analytic
//! Gaussian-mixture flow oracle (ODE inversion + guided generation), a
//! no-reference quality gate, and mixed-supervised fine-tuning.

pub mod adapt;
pub mod error;
pub mod flow;
pub mod gate;
pub mod image;
pub mod io;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use image::{build_dct_basis, decode, encode, Basis, Image, LatentVec};
