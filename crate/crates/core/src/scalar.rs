//! Scalar abstraction shared by the autograd engine and every model layer.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type the model math is written against.
///
/// Training and gradient checking use `f64`; `f32` is supported for cheaper
/// inference but loses the precision the finite-difference checks rely on.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Serialize + DeserializeOwned + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; every `f64` is representable up to rounding.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to any Float")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Float converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
