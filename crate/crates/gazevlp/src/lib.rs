//! Desk-scale multimodal pretraining testbed.
//!
//! A context-infused vision encoder and a shared role-token language encoder
//! are trained with three objectives: a hybrid-positive contrastive loss over
//! study-level image/report pairs, a class-balanced focal loss over a shared
//! disease label space, and a soft gaze-guidance loss that aligns
//! transcript-to-patch similarities with probability priors derived from
//! eye-tracking fixations. Everything runs on a self-contained 64-bit
//! reverse-mode tensor engine so that every gradient can be checked against
//! central finite differences, and every metric against a brute-force oracle.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gaze;
pub mod gradsuite;
pub mod loss;
pub mod model;
pub mod optim;
pub mod param;
pub mod synth;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::Error;
