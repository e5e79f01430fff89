use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tape::{sigmoid, softplus, Var};

/// Arithmetic shared by plain `f64` and taped [`Var`] values, so that
/// network forward passes and small linear solves can be written once.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Value (first lane for taped values).
    fn value(&self) -> f64;
    /// A constant living in the same context as `self`.
    fn constant_like(&self, v: f64) -> Self;
    fn softplus(self) -> Self;
    fn sigmoid(self) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn powf(self, p: f64) -> Self;
    fn powi(self, p: i32) -> Self;
    /// Sum of a non-empty slice.
    fn sum(xs: &[Self]) -> Self;
    /// Inner product of two equal-length non-empty slices.
    fn dot(a: &[Self], b: &[Self]) -> Self;
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn constant_like(&self, v: f64) -> Self {
        v
    }
    fn softplus(self) -> Self {
        softplus(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    fn powi(self, p: i32) -> Self {
        f64::powi(self, p)
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(&self) -> f64 {
        Var::value(self)
    }
    fn constant_like(&self, v: f64) -> Self {
        self.tape().constant(v)
    }
    fn softplus(self) -> Self {
        Var::softplus(self)
    }
    fn sigmoid(self) -> Self {
        Var::sigmoid(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
    fn abs(self) -> Self {
        Var::abs(self)
    }
    fn powf(self, p: f64) -> Self {
        Var::powf(self, p)
    }
    fn powi(self, p: i32) -> Self {
        Var::powi(self, p)
    }
    fn sum(xs: &[Self]) -> Self {
        xs[0].tape().sum(xs)
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        a[0].tape().dot(a, b)
    }
}
