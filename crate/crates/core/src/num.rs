// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar abstraction for the analysis math.
//!
//! Logit differences, patching metrics, grid averaging and attention
//! aggregation are written once against [`Scalar`] and instantiated for
//! `f32` and `f64`. Model payloads stay `f32` on the wire and are cast in.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumCast};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point type usable in patching and aggregation results.
pub trait Scalar:
    Float + FromPrimitive + NumCast + Debug + Display + Default + Send + Sync + Serialize + DeserializeOwned + 'static
{
    /// Lossless-enough conversion from a model logit or activation.
    fn of_f32(v: f32) -> Self {
        <Self as NumCast>::from(v).expect("f32 is representable")
    }

    /// Converts an `f64` constant (tolerances, counts).
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 literal is representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
