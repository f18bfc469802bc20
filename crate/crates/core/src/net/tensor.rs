//! Dense row-major f64 tensor and the handful of matrix kernels the tape
//! is built on.

/// Shaped row-major array of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// out = a[m,k] . b[k,n]
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            if ail == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &blj) in orow.iter_mut().zip(brow.iter()) {
                *o += ail * blj;
            }
        }
    }
}

/// out += a[m,n] . b[k,n]^T, giving [m,k]: contraction over the last axis
/// of both operands.
pub fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow.iter()) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// out += a[m,k]^T . b[m,n], giving [k,n]: contraction over the first axis
/// of both operands.
pub fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            if ail == 0.0 {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bij) in orow.iter_mut().zip(brow.iter()) {
                *o += ail * bij;
            }
        }
    }
}

/// Binary fixed point used by order-invariant summation: values are scaled
/// by 2^80 and accumulated as 128-bit integers, so the result is exact in
/// the quantized domain and independent of addend order.
const CANON_SCALE: f64 = 1.2089258196146292e24; // 2^80

/// Largest addend magnitude the fixed-point accumulator accepts.
pub const CANON_MAX_ADDEND: f64 = 1e12;

#[derive(Clone, Copy, Default)]
pub struct CanonicalAccumulator {
    acc: i128,
}

impl CanonicalAccumulator {
    #[inline]
    pub fn add(&mut self, x: f64) {
        debug_assert!(
            x.abs() < CANON_MAX_ADDEND,
            "addend {x} exceeds fixed-point range"
        );
        self.acc += (x * CANON_SCALE) as i128;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.acc as f64 / CANON_SCALE
    }
}

/// Order-invariant sum of a slice.
pub fn canonical_sum(xs: &[f64]) -> f64 {
    let mut acc = CanonicalAccumulator::default();
    for &x in xs {
        acc.add(x);
    }
    acc.value()
}
