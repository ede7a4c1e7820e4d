//! Valid-mode cross-correlation (no kernel flip).

use super::gemm::Requantizer;
use super::{Element, FixedTensor, KernelError, Matrix, QFormat};

/// `y[t] = sum_j x[t + j] * k[j]`, output length `len(x) - len(k) + 1`.
pub fn conv1d<T: Element>(x: &[T], k: &[T]) -> Result<Vec<T>, KernelError> {
    if k.is_empty() || k.len() > x.len() {
        return Err(KernelError::KernelLongerThanInput { kernel: k.len(), input: x.len() });
    }
    Ok((0..=x.len() - k.len())
        .map(|t| k.iter().enumerate().fold(T::default(), |acc, (j, &kj)| acc + x[t + j] * kj))
        .collect())
}

fn output_dims(h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize), KernelError> {
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(KernelError::ShapeMismatch(format!("{kh}x{kw} kernel does not fit a {h}x{w} input")));
    }
    Ok((h - kh + 1, w - kw + 1))
}

/// Textbook 2-D cross-correlation.
pub fn conv2d_direct<T: Element>(x: &Matrix<T>, k: &Matrix<T>) -> Result<Matrix<T>, KernelError> {
    let (oh, ow) = output_dims(x.rows(), x.cols(), k.rows(), k.cols())?;
    let mut y = Matrix::zeros(oh, ow);
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = T::default();
            for a in 0..k.rows() {
                for b in 0..k.cols() {
                    acc = acc + x.get(i + a, j + b) * k.get(a, b);
                }
            }
            y.set(i, j, acc);
        }
    }
    Ok(y)
}

/// 2-D cross-correlation with the rank-1 kernel `u v^T`, computed as a
/// conv1d with `v` along every row followed by a conv1d with `u` along every
/// column of the intermediate.
pub fn conv2d_via_conv1d<T: Element>(x: &Matrix<T>, u: &[T], v: &[T]) -> Result<Matrix<T>, KernelError> {
    let (oh, ow) = output_dims(x.rows(), x.cols(), u.len(), v.len())?;
    let mut rows_done = Matrix::zeros(x.rows(), ow);
    for i in 0..x.rows() {
        for (j, val) in conv1d(x.row(i), v)?.into_iter().enumerate() {
            rows_done.set(i, j, val);
        }
    }
    let mut y = Matrix::zeros(oh, ow);
    for j in 0..ow {
        for (i, val) in conv1d(&rows_done.column(j), u)?.into_iter().enumerate() {
            y.set(i, j, val);
        }
    }
    Ok(y)
}

/// Depthwise-separable convolution: per-channel rank-1 depthwise filtering
/// through [`conv2d_via_conv1d`], then a pointwise mix
/// `out[k][i][j] = sum_c dw[c][i][j] * pw[c][k]`.
pub fn dwsconv2d<T: Element>(x: &[Matrix<T>], dw: &[(Vec<T>, Vec<T>)], pw: &Matrix<T>) -> Result<Vec<Matrix<T>>, KernelError> {
    let c = x.len();
    if dw.len() != c {
        return Err(KernelError::ChannelCountMismatch(format!("{} depthwise factor pairs for {c} channels", dw.len())));
    }
    if pw.rows() != c {
        return Err(KernelError::ChannelCountMismatch(format!("pointwise kernel has {} rows for {c} channels", pw.rows())));
    }
    if let Some(first) = x.first() {
        if x.iter().any(|m| m.rows() != first.rows() || m.cols() != first.cols()) {
            return Err(KernelError::ShapeMismatch("channels differ in spatial size".into()));
        }
    }
    let depthwise = x
        .iter()
        .zip(dw)
        .map(|(xc, (u, v))| conv2d_via_conv1d(xc, u, v))
        .collect::<Result<Vec<_>, _>>()?;
    let (oh, ow) = depthwise.first().map_or((0, 0), |m| (m.rows(), m.cols()));
    let mut out = Vec::with_capacity(pw.cols());
    for k in 0..pw.cols() {
        let mut plane = Matrix::zeros(oh, ow);
        for i in 0..oh {
            for j in 0..ow {
                let mut sum = T::default();
                for (ch, d) in depthwise.iter().enumerate() {
                    sum = sum + d.get(i, j) * pw.get(ch, k);
                }
                plane.set(i, j, sum);
            }
        }
        out.push(plane);
    }
    Ok(out)
}

fn conv_fixed_dims(x: &FixedTensor, k: &FixedTensor) -> Result<(usize, usize, usize, usize, usize), KernelError> {
    let (&[h, w], &[kh, kw]) = (x.shape(), k.shape()) else {
        return Err(KernelError::ShapeMismatch("conv2d operands must be 2-D".into()));
    };
    let (_, ow) = output_dims(h, w, kh, kw)?;
    Ok((w, kh, kw, ow, h - kh + 1))
}

/// Output code at `(i, j)` of the fixed-point 2-D cross-correlation.
pub fn conv2d_fixed_element(x: &FixedTensor, k: &FixedTensor, rq: &Requantizer, i: usize, j: usize) -> Result<i32, KernelError> {
    let (w, kh, kw, _, _) = conv_fixed_dims(x, k)?;
    let (xc, kc) = (x.codes(), k.codes());
    let mut acc: i64 = 0;
    for a in 0..kh {
        for b in 0..kw {
            let p = (xc[(i + a) * w + j + b] as i64)
                .checked_mul(kc[a * kw + b] as i64)
                .ok_or(KernelError::AccumulatorOverflow)?;
            acc = acc.checked_add(p).ok_or(KernelError::AccumulatorOverflow)?;
        }
    }
    Ok(rq.apply(acc))
}

pub fn conv2d_fixed(x: &FixedTensor, k: &FixedTensor, out: QFormat) -> Result<FixedTensor, KernelError> {
    let (_, _, _, ow, oh) = conv_fixed_dims(x, k)?;
    let rq = Requantizer::new(x.qformat(), k.qformat(), out);
    let mut codes = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            codes.push(conv2d_fixed_element(x, k, &rq, i, j)?);
        }
    }
    FixedTensor::new(vec![oh, ow], codes, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ones(r: usize, c: usize) -> Matrix<i64> {
        Matrix::from_vec(r, c, vec![1; r * c]).unwrap()
    }

    #[test]
    fn conv1d_examples() {
        assert_eq!(conv1d(&[1, 2, 3], &[1]).unwrap(), vec![1, 2, 3]);
        assert_eq!(conv1d(&[1, 2, 3], &[1, 1]).unwrap(), vec![3, 5]);
        assert_eq!(conv1d(&[0.0; 5], &[0.3, -2.0]).unwrap(), vec![0.0; 4]);
        assert!(matches!(conv1d(&[1, 2], &[1, 1, 1]), Err(KernelError::KernelLongerThanInput { .. })));
        assert!(conv1d::<i64>(&[1, 2], &[]).is_err());
    }

    #[test]
    fn conv2d_examples() {
        let x = ones(3, 3);
        assert_eq!(conv2d_direct(&x, &ones(2, 2)).unwrap(), Matrix::from_vec(2, 2, vec![4; 4]).unwrap());
        assert_eq!(conv2d_via_conv1d(&x, &[1, 1], &[1, 1]).unwrap(), Matrix::from_vec(2, 2, vec![4; 4]).unwrap());
        let y = Matrix::from_rows(&[vec![3i64, -1, 4], vec![1, 5, -9]]).unwrap();
        assert_eq!(conv2d_direct(&y, &ones(1, 1)).unwrap(), y);
        assert_eq!(conv2d_via_conv1d(&y, &[1], &[1]).unwrap(), y);
        assert!(conv2d_direct(&y, &Matrix::zeros(2, 2)).unwrap().data().iter().all(|&v| v == 0));
        assert!(conv2d_direct(&y, &ones(3, 1)).is_err());
    }

    #[test]
    fn dws_identity_and_sum() {
        let x = Matrix::from_rows(&[vec![1i64, 2], vec![3, 4]]).unwrap();
        let out = dwsconv2d(&[x.clone()], &[(vec![1], vec![1])], &Matrix::from_vec(1, 1, vec![1]).unwrap()).unwrap();
        assert_eq!(out, vec![x.clone()]);

        let x2 = Matrix::from_rows(&[vec![10i64, 20], vec![30, 40]]).unwrap();
        let out = dwsconv2d(
            &[x.clone(), x2.clone()],
            &[(vec![1], vec![1]), (vec![1], vec![1])],
            &Matrix::from_vec(2, 1, vec![1, 1]).unwrap(),
        )
        .unwrap();
        assert_eq!(out[0], Matrix::from_rows(&[vec![11, 22], vec![33, 44]]).unwrap());
    }

    #[test]
    fn dws_errors() {
        let x = ones(3, 3);
        let pw = Matrix::from_vec(1, 1, vec![1]).unwrap();
        assert!(matches!(dwsconv2d(&[x.clone()], &[], &pw), Err(KernelError::ChannelCountMismatch(_))));
        assert!(matches!(
            dwsconv2d(&[x.clone()], &[(vec![1], vec![1])], &Matrix::from_vec(2, 1, vec![1, 1]).unwrap()),
            Err(KernelError::ChannelCountMismatch(_))
        ));
        assert!(matches!(
            dwsconv2d(&[x.clone(), ones(2, 3)], &[(vec![1], vec![1]), (vec![1], vec![1])], &Matrix::from_vec(2, 1, vec![1, 1]).unwrap()),
            Err(KernelError::ShapeMismatch(_))
        ));
    }

    /// Brute-force depthwise-separable oracle: direct 2-D per channel with
    /// the materialized kernel, then an explicit 1x1 convolution.
    fn dws_oracle(x: &[Matrix<i64>], dw: &[(Vec<i64>, Vec<i64>)], pw: &Matrix<i64>) -> Vec<Matrix<i64>> {
        let depth: Vec<Matrix<i64>> =
            x.iter().zip(dw).map(|(xc, (u, v))| conv2d_direct(xc, &Matrix::outer(u, v)).unwrap()).collect();
        (0..pw.cols())
            .map(|k| {
                let mut acc = Matrix::zeros(depth[0].rows(), depth[0].cols());
                for (c, d) in depth.iter().enumerate() {
                    let one_by_one = Matrix::from_vec(1, 1, vec![pw.get(c, k)]).unwrap();
                    let term = conv2d_direct(d, &one_by_one).unwrap();
                    acc = Matrix::from_vec(acc.rows(), acc.cols(), acc.data().iter().zip(term.data()).map(|(a, b)| a + b).collect()).unwrap();
                }
                acc
            })
            .collect()
    }

    #[test]
    fn dws_matches_brute_force_on_seeded_instance() {
        let x = vec![
            Matrix::from_vec(5, 4, (0..20).map(|i| (i * 7 % 11) - 5).collect()).unwrap(),
            Matrix::from_vec(5, 4, (0..20).map(|i| (i * 3 % 13) - 6).collect()).unwrap(),
        ];
        let dw = vec![(vec![2, -1], vec![1, 3]), (vec![-2, 1], vec![4, 0])];
        let pw = Matrix::from_rows(&[vec![1, -2, 3], vec![5, 0, -1]]).unwrap();
        assert_eq!(dwsconv2d(&x, &dw, &pw).unwrap(), dws_oracle(&x, &dw, &pw));
    }

    #[test]
    fn fixed_conv_matches_integer_path() {
        let q = QFormat::new(16, 1.0).unwrap();
        let xs: Vec<i32> = (0..25).map(|i| (i * 37 % 200) - 100).collect();
        let ks: Vec<i32> = vec![3, -1, 2, 5];
        let x = FixedTensor::new(vec![5, 5], xs.clone(), q).unwrap();
        let k = FixedTensor::new(vec![2, 2], ks.clone(), q).unwrap();
        // factor step*step/step with out scale chosen so factor == 1
        let out = QFormat::new(16, q.step() * q.step() * 32767.0).unwrap();
        let y = conv2d_fixed(&x, &k, out).unwrap();
        let xi = Matrix::from_vec(5, 5, xs.iter().map(|&c| c as i64).collect()).unwrap();
        let ki = Matrix::from_vec(2, 2, ks.iter().map(|&c| c as i64).collect()).unwrap();
        let direct = conv2d_direct(&xi, &ki).unwrap();
        assert_eq!(y.codes().iter().map(|&c| c as i64).collect::<Vec<_>>(), direct.into_data());
    }

    proptest! {
        #[test]
        fn separable_equals_direct_on_integers(
            h in 1usize..=16, w in 1usize..=16,
            seed in any::<u64>(),
        ) {
            let mut s = seed;
            let mut next = move || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 33) % 21) as i64 - 10 };
            let kh = 1 + (next().unsigned_abs() as usize % h);
            let kw = 1 + (next().unsigned_abs() as usize % w);
            let x = Matrix::from_vec(h, w, (0..h * w).map(|_| next()).collect()).unwrap();
            let u: Vec<i64> = (0..kh).map(|_| next()).collect();
            let v: Vec<i64> = (0..kw).map(|_| next()).collect();
            prop_assert_eq!(conv2d_via_conv1d(&x, &u, &v).unwrap(), conv2d_direct(&x, &Matrix::outer(&u, &v)).unwrap());
        }

        #[test]
        fn separable_equals_direct_on_floats(
            h in 1usize..=16, w in 1usize..=16,
            vals in proptest::collection::vec(-1.0f64..1.0, 16 * 16 + 32),
            ksel in any::<(u8, u8)>(),
        ) {
            let kh = 1 + ksel.0 as usize % h;
            let kw = 1 + ksel.1 as usize % w;
            let x = Matrix::from_vec(h, w, vals[..h * w].to_vec()).unwrap();
            let u = vals[h * w..h * w + kh].to_vec();
            let v = vals[h * w + 16..h * w + 16 + kw].to_vec();
            let a = conv2d_via_conv1d(&x, &u, &v).unwrap();
            let b = conv2d_direct(&x, &Matrix::outer(&u, &v)).unwrap();
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }
}
