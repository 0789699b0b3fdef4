//! Multi-grained selective state-space policy for offline reinforcement
//! learning, trained with a self-evolving action regulariser.
//!
//! The stack runs bottom-up: [`autodiff`] tensors and tape, [`ssm`] selective
//! scans, [`block`] multi-grained layers, [`policy`], then [`data`], [`train`]
//! and [`eval`]. [`par`] switches every kernel between sequential and rayon
//! execution.

// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

pub mod autodiff;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod init;
pub mod par;
pub mod policy;
pub mod ssm;
pub mod train;
