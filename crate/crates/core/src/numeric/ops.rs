use super::{Matrix, Real};

/// Elementwise `max(x, 0)`.
pub fn relu<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`]; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Real>(x: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

/// Gradient of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward<T: Real>(y: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, dyr) = (y.row(r), dy.row(r));
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &dv) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *o = yv * (dv - dot);
        }
    }
    dx
}

/// Divides every row by `max(‖row‖₂, eps)`; also returns the divisors.
pub fn l2_normalize_rows<T: Real>(x: &Matrix<T>, eps: T) -> (Matrix<T>, Vec<T>) {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = y.row_mut(r);
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= n;
        }
        norms.push(n);
    }
    (y, norms)
}

/// Gradient of [`l2_normalize_rows`]. Rows clamped at `eps` scale linearly.
pub fn l2_normalize_rows_backward<T: Real>(
    y: &Matrix<T>,
    norms: &[T],
    dy: &Matrix<T>,
    eps: T,
) -> Matrix<T> {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for (r, &n) in norms.iter().enumerate().take(y.rows()) {
        let (yr, dyr) = (y.row(r), dy.row(r));
        if n > eps {
            let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
            for ((o, &yv), &dv) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
                *o = (dv - yv * dot) / n;
            }
        } else {
            for (o, &dv) in dx.row_mut(r).iter_mut().zip(dyr) {
                *o = dv / n;
            }
        }
    }
    dx
}
