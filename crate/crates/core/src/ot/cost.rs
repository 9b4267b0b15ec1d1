use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Pairwise transport costs between `rows` source and `cols` target points.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
    lambda: T,
    labeled: bool,
    euclidean_mean: T,
    mismatched: Option<Vec<bool>>,
    labels: Option<(Vec<usize>, Vec<usize>)>,
}

impl<T: Scalar> CostMatrix<T> {
    /// Wrap an arbitrary non-negative cost table (no label structure).
    pub fn from_values(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::shape("cost", format!("{rows}x{cols} with {} values", values.len())));
        }
        if values.iter().any(|&v| !v.is_finite() || v < T::zero()) {
            return Err(Error::Invalid("cost entries must be finite and non-negative".into()));
        }
        let mean = values.iter().copied().sum::<T>() / T::from_usize(values.len()).unwrap();
        Ok(CostMatrix { rows, cols, values, lambda: T::zero(), labeled: false, euclidean_mean: mean, mismatched: None, labels: None })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.cols + j]
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn is_labeled(&self) -> bool {
        self.labeled
    }

    /// Mean of the label-free (distance) part of the cost.
    pub fn euclidean_mean(&self) -> T {
        self.euclidean_mean
    }

    /// Label mismatch pattern, row-major, when built by [`cost_labeled`].
    pub fn mismatched(&self) -> Option<&[bool]> {
        self.mismatched.as_deref()
    }

    /// Row and column labels, when built by [`cost_labeled`].
    pub fn labels(&self) -> Option<(&[usize], &[usize])> {
        self.labels.as_ref().map(|(r, c)| (r.as_slice(), c.as_slice()))
    }

    pub fn transpose(&self) -> Self {
        let mut values = vec![T::zero(); self.values.len()];
        let mut mism = self.mismatched.as_ref().map(|m| vec![false; m.len()]);
        for i in 0..self.rows {
            for j in 0..self.cols {
                values[j * self.rows + i] = self.values[i * self.cols + j];
                if let (Some(dst), Some(src)) = (mism.as_mut(), self.mismatched.as_ref()) {
                    dst[j * self.rows + i] = src[i * self.cols + j];
                }
            }
        }
        let labels = self.labels.as_ref().map(|(r, c)| (c.clone(), r.clone()));
        CostMatrix { rows: self.cols, cols: self.rows, values, mismatched: mism, labels, ..*self }
    }
}

fn check_pair<T: Scalar>(zs: &Tensor<T>, zt: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if zs.ndim() != 2 || zt.ndim() != 2 || zs.shape()[1] != zt.shape()[1] {
        return Err(Error::shape("cost", format!("source {:?}, target {:?}", zs.shape(), zt.shape())));
    }
    if zs.shape()[0] == 0 || zt.shape()[0] == 0 {
        return Err(Error::shape("cost", "empty point set"));
    }
    Ok((zs.shape()[0], zt.shape()[0], zs.shape()[1]))
}

fn distances<T: Scalar>(zs: &Tensor<T>, zt: &Tensor<T>, m: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let a = zs.row(i);
        for j in 0..n {
            let b = zt.row(j);
            let sq = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
            out.push(sq.sqrt());
        }
    }
    out
}

/// Euclidean cost `C[i][j] = |z_s[i] - z_t[j]|`.
pub fn cost_base<T: Scalar>(zs: &Tensor<T>, zt: &Tensor<T>) -> Result<CostMatrix<T>> {
    let (m, n, _) = check_pair(zs, zt)?;
    let values = distances(zs, zt, m, n);
    let mean = values.iter().copied().sum::<T>() / T::from_usize(values.len()).unwrap();
    Ok(CostMatrix { rows: m, cols: n, values, lambda: T::zero(), labeled: false, euclidean_mean: mean, mismatched: None, labels: None })
}

/// Euclidean cost plus `lambda` wherever the source label differs from the
/// target (pseudo-)label.
pub fn cost_labeled<T: Scalar>(
    zs: &Tensor<T>,
    ys: &[usize],
    zt: &Tensor<T>,
    yt: &[usize],
    lambda: T,
) -> Result<CostMatrix<T>> {
    let (m, n, _) = check_pair(zs, zt)?;
    if ys.len() != m || yt.len() != n {
        return Err(Error::shape(
            "cost_labeled",
            format!("{m} source points / {} labels, {n} target points / {} labels", ys.len(), yt.len()),
        ));
    }
    if !(lambda >= T::zero()) || !lambda.is_finite() {
        return Err(Error::Invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let mut values = distances(zs, zt, m, n);
    let mean = values.iter().copied().sum::<T>() / T::from_usize(values.len()).unwrap();
    let mut mismatched = vec![false; m * n];
    for i in 0..m {
        for j in 0..n {
            if ys[i] != yt[j] {
                mismatched[i * n + j] = true;
                values[i * n + j] += lambda;
            }
        }
    }
    Ok(CostMatrix {
        rows: m,
        cols: n,
        values,
        lambda,
        labeled: true,
        euclidean_mean: mean,
        mismatched: Some(mismatched),
        labels: Some((ys.to_vec(), yt.to_vec())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hand_examples() {
        let c = cost_base(&t(&[&[0.0, 0.0]]), &t(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(c.get(0, 0), 5.0);
        let a = t(&[&[1.0, 2.0], &[-1.0, 0.5]]);
        let c = cost_base(&a, &a).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.get(1, 1), 0.0);
        assert!(cost_base(&a, &t(&[&[1.0]])).is_err());
    }

    #[test]
    fn labeled_examples() {
        let zs = t(&[&[0.0], &[5.0]]);
        let zt = t(&[&[2.0]]);
        let c = cost_labeled(&zs, &[0, 1], &zt, &[1], 1e4).unwrap();
        assert_eq!(c.get(0, 0), 10002.0);
        assert_eq!(c.get(1, 0), 3.0);
        assert_eq!(c.mismatched().unwrap(), &[true, false]);
        assert!(cost_labeled(&zs, &[0], &zt, &[1], 1.0).is_err());
        assert!(cost_labeled(&zs, &[0, 1], &zt, &[1], -1.0).is_err());
    }

    #[test]
    fn zero_lambda_is_bitwise_base() {
        let zs = t(&[&[0.1, 0.7], &[5.0, -2.0], &[0.3, 0.3]]);
        let zt = t(&[&[2.0, 1.0], &[-1.0, 0.25]]);
        let base = cost_base(&zs, &zt).unwrap();
        let lab = cost_labeled(&zs, &[0, 1, 2], &zt, &[2, 0], 0.0).unwrap();
        assert_eq!(base.values(), lab.values());
    }

    fn cloud(n: usize, d: usize) -> impl Strategy<Value = Tensor<f64>> {
        prop::collection::vec(-10.0f64..10.0, n * d).prop_map(move |v| Tensor::new([n, d], v).unwrap())
    }

    proptest! {
        #[test]
        fn symmetric_and_scale_equivariant(a in cloud(4, 3), b in cloud(5, 3), s in 0.01f64..100.0) {
            let ab = cost_base(&a, &b).unwrap();
            let ba = cost_base(&b, &a).unwrap();
            let bat = ba.transpose();
            prop_assert_eq!(ab.values(), bat.values());
            let scale = |x: &Tensor<f64>| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect()).unwrap();
            let scaled = cost_base(&scale(&a), &scale(&b)).unwrap();
            for (x, y) in scaled.values().iter().zip(ab.values()) {
                prop_assert!((x - s * y).abs() <= 1e-12 * (1.0 + s * y));
            }
        }

        #[test]
        fn labeled_entries_dominate_euclidean(a in cloud(4, 2), b in cloud(3, 2), lambda in 0.0f64..1e5) {
            let ys = [0, 1, 2, 0];
            let yt = [1, 1, 0];
            let base = cost_base(&a, &b).unwrap();
            let lab = cost_labeled(&a, &ys, &b, &yt, lambda).unwrap();
            for i in 0..4 {
                for j in 0..3 {
                    let expect = base.get(i, j) + if ys[i] != yt[j] { lambda } else { 0.0 };
                    prop_assert_eq!(lab.get(i, j), expect);
                    prop_assert!(lab.get(i, j) >= base.get(i, j));
                }
            }
        }
    }
}
