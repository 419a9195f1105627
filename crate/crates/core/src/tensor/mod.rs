//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! `Tensor` is an immutable value; arithmetic that should be differentiated
//! goes through a [`tape::Tape`], which records ops and replays them in
//! reverse. Raw numeric kernels live in [`kernels`]; the small dense
//! eigen/SVD routines in [`linalg`].

pub mod kernels;
pub mod linalg;
pub mod tape;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element dtype of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar element type a tensor can hold. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const DTYPE: Dtype;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    /// exp on the activation hot path: a vectorizable polynomial at f32
    /// (≈1 ulp over the reduced range), libm at f64.
    fn exp_hot(self) -> Self;
    /// tanh counterpart of [`Element::exp_hot`].
    fn tanh_hot(self) -> Self;
    fn recip(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn neg_infinity() -> Self;
    /// Smallest positive normal value of the dtype.
    fn min_positive() -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// C[m,n] = A·B + beta·C with explicit strides (row, col) per operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

/// Branch-light exp for f32: range-reduce to r ∈ [−ln2/2, ln2/2], degree-6
/// Taylor (error below f32 eps there), scale by 2^k through the exponent
/// bits. Inputs are clamped to [−87, 88], which covers every activation
/// use (softmax arguments are ≤ 0, sigmoid/tanh saturate far earlier).
#[inline]
fn exp_poly_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    let kf = (x * LOG2E).round_ties_even();
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let k = kf as i32;
    f32::from_bits((p.to_bits() as i32).wrapping_add(k << 23) as u32)
}

#[inline]
fn tanh_via_exp_f32(x: f32) -> f32 {
    let a = x.abs().min(9.0);
    let e = exp_poly_f32(2.0 * a);
    let t = 1.0 - 2.0 / (e + 1.0);
    t.copysign(x)
}

macro_rules! impl_element {
    ($ty:ty, $dtype:expr, $size:literal, $gemm:path, $exp_hot:expr, $tanh_hot:expr) => {
        impl Element for $ty {
            const DTYPE: Dtype = $dtype;

            #[inline]
            fn zero() -> Self {
                0.0
            }
            #[inline]
            fn one() -> Self {
                1.0
            }
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $ty
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn ln_1p(self) -> Self {
                self.ln_1p()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn exp_hot(self) -> Self {
                $exp_hot(self)
            }
            #[inline]
            fn tanh_hot(self) -> Self {
                $tanh_hot(self)
            }
            #[inline]
            fn recip(self) -> Self {
                self.recip()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            #[inline]
            fn neg_infinity() -> Self {
                Self::NEG_INFINITY
            }
            #[inline]
            fn min_positive() -> Self {
                Self::MIN_POSITIVE
            }
            #[inline]
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            #[inline]
            fn read_le(bytes: &[u8]) -> Self {
                <$ty>::from_le_bytes(bytes[..$size].try_into().unwrap())
            }

            #[inline]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, Dtype::F32, 4, matrixmultiply::sgemm, exp_poly_f32, tanh_via_exp_f32);
impl_element!(f64, Dtype::F64, 8, matrixmultiply::dgemm, f64::exp, f64::tanh);

/// Dense n-dimensional array, row-major, immutable after construction.
///
/// Cloning is cheap (shared storage). `grad_enabled` marks a tensor as a
/// trainable leaf when it is registered on a tape; it has no effect on
/// value-level arithmetic.
#[derive(Clone)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    grad_enabled: bool,
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor<{}>(shape={:?}, grad={})",
            E::DTYPE,
            self.shape,
            self.grad_enabled
        )
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            grad_enabled: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![E::zero(); numel]),
            grad_enabled: false,
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            grad_enabled: false,
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
            grad_enabled: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..numel).map(&mut f).collect()),
            grad_enabled: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        E::DTYPE
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Mark as a trainable leaf for tape registration.
    pub fn with_grad(mut self) -> Self {
        self.grad_enabled = true;
        self
    }

    pub fn detached(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same storage, new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            grad_enabled: self.grad_enabled,
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
            grad_enabled: false,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "zip_map shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
            grad_enabled: false,
        })
    }

    pub fn scale(&self, c: E) -> Self {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Little-endian raw blob of the elements.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * E::DTYPE.size_bytes());
        for &x in self.data.iter() {
            x.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8], shape: &[usize]) -> Result<Self> {
        let sz = E::DTYPE.size_bytes();
        let numel: usize = shape.iter().product();
        if bytes.len() != numel * sz {
            return Err(Error::Dimension(format!(
                "blob of {} bytes does not hold {:?} {}",
                bytes.len(),
                shape,
                E::DTYPE
            )));
        }
        let data: Vec<E> = bytes.chunks_exact(sz).map(E::read_le).collect();
        Tensor::new(data, shape)
    }
}

/// Bit-compare two tensors (shape and payload).
pub fn bit_equal<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> bool {
    a.shape() == b.shape() && a.to_le_bytes() == b.to_le_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement() {
        let t = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(Tensor::<f64>::new(vec![1.0], &[2, 3]).is_err());
    }

    #[test]
    fn le_round_trip() {
        let t = Tensor::<f32>::from_fn(&[3, 2], |i| i as f32 * 0.5 - 1.0);
        let back = Tensor::<f32>::from_le_bytes(&t.to_le_bytes(), &[3, 2]).unwrap();
        assert!(bit_equal(&t, &back));
    }

    #[test]
    fn reshape_preserves_storage() {
        let t = Tensor::<f64>::from_fn(&[4], |i| i as f64);
        let r = t.reshaped(&[2, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[3]).is_err());
    }
}
