//! Sample-level simulation of over-the-air gradient aggregation on an OFDM link.
//!
//! Most types are generic over the sample scalar (`f32` or `f64`); the `*64`
//! aliases below fix it to `f64`.

// `!(x < y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod dsp;
pub mod error;
pub mod fl;
pub mod framing;
pub mod num;
pub mod ofdm;
pub mod protocol;
pub mod sync;

pub use error::{Error, Result};
pub use num::Real;

pub type SampleStream64 = channel::SampleStream<f64>;
pub type OfdmSymbol64 = ofdm::OfdmSymbol<f64>;
pub type FreqChannelEstimate64 = ofdm::FreqChannelEstimate<f64>;
