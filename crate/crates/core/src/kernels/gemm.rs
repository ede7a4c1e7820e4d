use super::{Element, FixedTensor, KernelError, Matrix, QFormat};

/// `A * B` on the generic path.
pub fn gemm<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, KernelError> {
    if a.cols() != b.rows() {
        return Err(KernelError::ShapeMismatch(format!(
            "gemm inner dimensions {}x{} * {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut c = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = T::default();
            for k in 0..a.cols() {
                acc = acc + a.get(i, k) * b.get(k, j);
            }
            c.set(i, j, acc);
        }
    }
    Ok(c)
}

/// Integer rescale of a wide accumulator into an output code: multiply by a
/// 31-bit multiplier, then shift right with round-half-to-even.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requantizer {
    multiplier: i64,
    shift: u32,
    max_code: i64,
}

impl Requantizer {
    /// Maps accumulators of `lhs * rhs` code products onto `out` codes.
    pub fn new(lhs: QFormat, rhs: QFormat, out: QFormat) -> Self {
        let factor = lhs.step() * rhs.step() / out.step();
        Self::from_factor(factor, out.max_code())
    }

    pub fn from_factor(factor: f64, max_code: i32) -> Self {
        debug_assert!(factor > 0.0 && factor.is_finite());
        let mut shift = 0u32;
        let mut m = factor;
        while m < (1u64 << 30) as f64 && shift < 62 {
            m *= 2.0;
            shift += 1;
        }
        Self { multiplier: m.round_ties_even() as i64, shift, max_code: max_code as i64 }
    }

    pub fn apply(&self, acc: i64) -> i32 {
        let prod = acc as i128 * self.multiplier as i128;
        let q = if self.shift == 0 {
            prod
        } else {
            let floor = prod >> self.shift;
            let rem = prod - (floor << self.shift);
            let half = 1i128 << (self.shift - 1);
            if rem > half || (rem == half && floor & 1 == 1) {
                floor + 1
            } else {
                floor
            }
        };
        q.clamp(-(self.max_code as i128), self.max_code as i128) as i32
    }
}

fn check_gemm_shapes(a: &FixedTensor, b: &FixedTensor) -> Result<(usize, usize, usize), KernelError> {
    let (&[m, k1], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(KernelError::ShapeMismatch("gemm operands must be 2-D".into()));
    };
    if k1 != k2 {
        return Err(KernelError::ShapeMismatch(format!("gemm inner dimensions {k1} vs {k2}")));
    }
    Ok((m, k1, n))
}

/// One output element of the fixed-point product, before rescale.
fn dot_i64(a: &FixedTensor, b: &FixedTensor, i: usize, j: usize, k: usize, n: usize) -> Result<i64, KernelError> {
    let (ac, bc) = (a.codes(), b.codes());
    let mut acc: i64 = 0;
    for t in 0..k {
        let p = (ac[i * k + t] as i64)
            .checked_mul(bc[t * n + j] as i64)
            .ok_or(KernelError::AccumulatorOverflow)?;
        acc = acc.checked_add(p).ok_or(KernelError::AccumulatorOverflow)?;
    }
    Ok(acc)
}

/// Output code at `(i, j)` of the fixed-point product.
pub fn gemm_fixed_element(a: &FixedTensor, b: &FixedTensor, rq: &Requantizer, i: usize, j: usize) -> Result<i32, KernelError> {
    let (_, k, n) = check_gemm_shapes(a, b)?;
    Ok(rq.apply(dot_i64(a, b, i, j, k, n)?))
}

/// Fixed-point `A * B` rescaled into `out`.
pub fn gemm_fixed(a: &FixedTensor, b: &FixedTensor, out: QFormat) -> Result<FixedTensor, KernelError> {
    let (m, k, n) = check_gemm_shapes(a, b)?;
    let rq = Requantizer::new(a.qformat(), b.qformat(), out);
    let mut codes = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            codes.push(rq.apply(dot_i64(a, b, i, j, k, n)?));
        }
    }
    FixedTensor::new(vec![m, n], codes, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::quantize;

    #[test]
    fn hand_multiplication() {
        let a = Matrix::from_rows(&[vec![1i64, 2], vec![3, 4]]).unwrap();
        let b = Matrix::from_rows(&[vec![5i64, 6], vec![7, 8]]).unwrap();
        assert_eq!(gemm(&a, &b).unwrap(), Matrix::from_rows(&[vec![19, 22], vec![43, 50]]).unwrap());
    }

    #[test]
    fn identity_and_zero() {
        let b = Matrix::from_rows(&[vec![1.5, -2.0, 3.0], vec![0.25, 7.0, -1.0]]).unwrap();
        assert_eq!(gemm(&Matrix::identity(2, 1.0), &b).unwrap(), b);
        let z = Matrix::<f64>::zeros(3, 4);
        assert!(gemm(&b, &z).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(gemm(&b, &Matrix::<f64>::zeros(2, 2)).is_err());
    }

    #[test]
    fn fixed_identity_is_exact() {
        let q = QFormat::new(16, 1.0).unwrap();
        let ident = FixedTensor::new(vec![2, 2], vec![q.max_code(), 0, 0, q.max_code()], q).unwrap();
        let b = quantize(&[0.5, -0.25, 0.125, 0.75], &[2, 2], 16, 1.0).unwrap();
        let c = gemm_fixed(&ident, &b, q).unwrap();
        assert_eq!(c.codes(), b.codes());
    }

    #[test]
    fn fixed_matches_float_within_one_step() {
        let a = quantize(&[1.0, 2.0, 3.0, 4.0], &[2, 2], 16, 4.0).unwrap();
        let b = quantize(&[5.0, 6.0, 7.0, 8.0], &[2, 2], 16, 8.0).unwrap();
        let out = QFormat::new(16, 64.0).unwrap();
        let c = gemm_fixed(&a, &b, out).unwrap();
        let expect = [19.0, 22.0, 43.0, 50.0];
        for (code, e) in c.codes().iter().zip(expect) {
            assert!((out.decode(*code) - e).abs() <= out.step());
        }
    }

    #[test]
    fn requantizer_rounds_half_even() {
        let rq = Requantizer::from_factor(0.5, 32767);
        assert_eq!(rq.apply(1), 0);
        assert_eq!(rq.apply(3), 2);
        assert_eq!(rq.apply(5), 2);
        assert_eq!(rq.apply(-3), -2);
        assert_eq!(rq.apply(1 << 40), 32767);
    }
}
