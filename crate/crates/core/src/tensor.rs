//! Dense row-major tensors.
//!
//! [`Tensor`] is a plain value: a shape and a contiguous buffer. Differentiation
//! lives in [`crate::autodiff`], which records operations over tensors on a tape.
//! The element type defaults to `f32`; `f64` is supported so that gradient
//! checks can run the same graph at higher precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{dim_err, Error, Result};

/// Floating-point scalar usable as a tensor element.
pub trait Element:
    Copy
    + Debug
    + Display
    + Default
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powf(self, e: Self) -> Self;
    fn erf(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

macro_rules! impl_element {
    ($t:ty, $erf:path) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn powf(self, e: Self) -> Self {
                <$t>::powf(self, e)
            }
            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_element!(f32, libm::erff);
impl_element!(f64, libm::erf);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// Builds a tensor, checking that every dimension is positive and the
    /// buffer length equals the product of the shape.
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if let Some(pos) = shape.iter().position(|&d| d == 0) {
            return dim_err(format!("shape {shape:?} has a zero extent at axis {pos}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {numel} values but buffer has {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        assert!(numel > 0, "shape {shape:?} has a zero extent");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::ZERO)
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        assert!(numel > 0, "shape {shape:?} has a zero extent");
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> E {
        self.data[offset_of(&self.shape, index)]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_perm(&self.shape, perm)?;
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        for_each_strided(&out_shape, &gather, |_, src| data.push(self.data[src]));
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Index of the maximum along the last axis for every leading position.
    /// Ties resolve to the lowest index.
    pub fn argmax_last(&self) -> Vec<usize> {
        let k = *self.shape.last().unwrap_or(&1);
        self.data
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<E>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return dim_err(format!(
                    "stack of mismatched shapes {:?} and {:?}",
                    first.shape, p.shape
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn offset_of(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut off = 0;
    for (i, (&d, &ix)) in shape.iter().zip(index).enumerate() {
        assert!(ix < d, "index {ix} out of range for axis {i} of size {d}");
        off = off * d + ix;
    }
    off
}

pub(crate) fn check_perm(shape: &[usize], perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return dim_err(format!(
            "permutation {perm:?} for rank-{} tensor",
            shape.len()
        ));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return dim_err(format!("invalid permutation {perm:?}"));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Visits every position of `shape` in row-major order, passing the linear
/// output index and the offset computed from `src_strides`.
pub(crate) fn for_each_strided(
    shape: &[usize],
    src_strides: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    let mut out = 0usize;
    for _ in 0..outer {
        let mut src = base;
        for _ in 0..inner {
            f(out, src);
            out += 1;
            src += inner_stride;
        }
        // odometer over the leading axes
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err(format!("shapes {a:?} and {b:?} do not broadcast")),
        };
    }
    Ok(out)
}

/// Strides that read a tensor of shape `src` while iterating the broadcast
/// shape `out`; broadcast axes get stride zero.
pub(crate) fn broadcast_strides(out: &[usize], src: &[usize]) -> Vec<usize> {
    let s = strides(src);
    let lead = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < lead || src[i - lead] == 1 {
                0
            } else {
                s[i - lead]
            }
        })
        .collect()
}
