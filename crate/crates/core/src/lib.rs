//! Conditional infilling GAN (ciGAN) augmentation pipeline for lesion
//! patch classification.
//!
//! The crate covers the whole flow: phantom or real image ingestion and
//! patch sampling ([`patch`], [`manifest`], [`phantom`]), the cascaded
//! conditional generator and discriminator ([`models`]), the composite
//! training objective ([`losses`]), two-phase adversarial training
//! ([`trainer`]), bidirectional dataset synthesis ([`augment`]),
//! curriculum-mixed classifier training ([`classifier`]) and AUC/DeLong
//! evaluation ([`eval`]).

pub mod augment;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod figures;
pub mod losses;
pub mod manifest;
pub mod models;
pub mod patch;
pub mod phantom;
pub mod raster;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
