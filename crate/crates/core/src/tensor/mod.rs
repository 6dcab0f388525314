//! Dense tensors, a dynamically recorded computation graph and reverse-mode
//! gradients for the operations the waveform models use.
//!
//! Activations are laid out `[batch, channels, length]`, row-major. Scalars
//! have an empty shape. A [`Graph`] is built fresh for every forward pass;
//! parameters enter it through [`Graph::param`] and come back out by name in
//! the [`Gradients`] returned from [`Graph::backward`].

mod conv;
mod fftconv;
mod graph;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftNum, FftPlanner};

use crate::error::{Error, Result};

pub use conv::{conv1d_forward, conv1d_input_grad, conv1d_weight_grad, ConvGeom};
pub use fftconv::{conv1d_forward_batch, conv1d_input_grad_batch, conv1d_weight_grad_batch};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use params::{ParamKind, ParamStore};

/// Floating point element type. Training runs in `f32`; gradient checks in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + FftNum + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    /// Cached FFT plan of length `n` for this precision.
    fn fft_plan(n: usize, inverse: bool) -> Arc<dyn Fft<Self>>;

    /// Cached real-to-complex and complex-to-real plans of length `n`.
    fn rfft_plans(n: usize) -> (Arc<dyn RealToComplex<Self>>, Arc<dyn ComplexToReal<Self>>);

    fn from_f64c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    fn to_f64c(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite float converts to f64")
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $planner:ident, $rplanner:ident) => {
        thread_local! {
            static $planner: std::cell::RefCell<FftPlanner<$t>> =
                std::cell::RefCell::new(FftPlanner::new());
            static $rplanner: std::cell::RefCell<RealFftPlanner<$t>> =
                std::cell::RefCell::new(RealFftPlanner::new());
        }

        impl Real for $t {
            const NAME: &'static str = $name;

            fn fft_plan(n: usize, inverse: bool) -> Arc<dyn Fft<Self>> {
                $planner.with(|p| {
                    let mut p = p.borrow_mut();
                    if inverse {
                        p.plan_fft_inverse(n)
                    } else {
                        p.plan_fft_forward(n)
                    }
                })
            }

            fn rfft_plans(n: usize) -> (Arc<dyn RealToComplex<Self>>, Arc<dyn ComplexToReal<Self>>) {
                $rplanner.with(|p| {
                    let mut p = p.borrow_mut();
                    (p.plan_fft_forward(n), p.plan_fft_inverse(n))
                })
            }
        }
    };
}

impl_real!(f32, "f32", PLANNER_F32, RPLANNER_F32);
impl_real!(f64, "f64", PLANNER_F64, RPLANNER_F64);

/// Shaped, owned numeric array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: Vec::new(), data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64c(v.to_f64c())).collect(),
        }
    }

    /// Dimensions of a rank-3 `[batch, channels, length]` tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [n, c, l] => Ok((n, c, l)),
            _ => Err(Error::ShapeMismatch {
                op,
                detail: format!("expected [batch, channels, length], got {:?}", self.shape),
            }),
        }
    }
}
