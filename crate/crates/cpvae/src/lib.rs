//! Conditional-probabilistic VAE pipeline for quantum spin-model data.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! * [`spinsim`] — exact spin-chain solvers (NNN-TFIM / LR-TFIM), Born
//!   sampling and grid-dataset generation.
//! * [`autodiff`] — a minimal reverse-mode engine with exactly the layer
//!   catalog the networks need.
//! * [`models`] — encoder, reparameterized latent, autoregressive Bernoulli
//!   decoder (cpVAE) and the deterministic baseline (dVAE).
//! * [`objective`] — Bernoulli reconstruction NLL, Gaussian KL, the
//!   total-correlation decomposition and the weighted training objective.
//! * [`trainer`] — AdaBelief optimization with gamma scheduling and the
//!   active-neuron diagnostic.
//! * [`analysis`] — observables, latent maps, latent sweeps and
//!   reconstruction maps.
//! * [`pipeline`] — run manifests, snapshot ingestion and the pieces the
//!   command-line binary is built from.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod models;
pub mod objective;
pub mod pipeline;
pub mod spinsim;
pub mod trainer;

pub use error::{Error, Result};
