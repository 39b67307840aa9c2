//! Desk-scale laboratory for multi-norm adversarial robustness.
//!
//! The crate is organized around small dense networks ([`net`]), per-norm
//! attack primitives ([`attacks`]), multi-norm adversarial-training schemes
//! ([`training`]), robustness reporting ([`eval`]), the lp-ball geometry that
//! justifies training on the extreme norms only ([`geometry`]), and dataset /
//! checkpoint plumbing ([`data`], [`config`]).

pub mod attacks;
pub mod config;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod net;
pub mod training;
