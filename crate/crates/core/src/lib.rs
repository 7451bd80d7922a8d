//! Layout- and text-conditioned diffusion on a desk-scale pixel model.
//!
//! Each prompt token owns a binary layout channel; cross-attention scores of
//! a token are rectified outside its channel so the token only shapes its
//! own region. The crate holds the conditioning pipeline ([`textcond`],
//! [`layout`], [`attention`]), the noise-prediction network ([`denoiser`]),
//! the diffusion process and samplers ([`diffusion`]), the synthetic scene
//! generator ([`data`]), metrics ([`eval`]), and training and generation
//! drivers ([`pipeline`]).

mod error;

pub mod attention;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod eval;
pub mod layout;
pub mod netpbm;
pub mod pipeline;
pub mod textcond;

pub use error::{Error, Result};
