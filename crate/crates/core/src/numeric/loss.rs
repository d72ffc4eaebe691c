use super::{Matrix, Real};
use crate::{Error, Result};

fn check_shapes<T: Real>(op: &'static str, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean binary cross-entropy on logits, in the stable
/// `max(z,0) − z·t + ln(1 + e^{−|z|})` form. Returns the loss and `dL/dz`.
pub fn bce_with_logits<T: Real>(logits: &Matrix<T>, targets: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    check_shapes("bce_with_logits", logits, targets)?;
    let n = logits.data().len();
    if n == 0 {
        return Ok((T::zero(), Matrix::zeros(logits.rows(), logits.cols())));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for ((g, &z), &t) in grad.data_mut().iter_mut().zip(logits.data()).zip(targets.data()) {
        loss += z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p();
        let sigma = if z >= T::zero() {
            T::one() / (T::one() + (-z).exp())
        } else {
            let e = z.exp();
            e / (T::one() + e)
        };
        *g = (sigma - t) * inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Mean squared error over all elements, with its gradient.
pub fn mse<T: Real>(pred: &Matrix<T>, target: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    check_shapes("mse", pred, target)?;
    let mask = vec![true; pred.rows()];
    masked_mse(pred, target, &mask)
}

/// Mean squared error over the rows where `mask` is set. Zero, with a zero
/// gradient, when no row is selected.
pub fn masked_mse<T: Real>(pred: &Matrix<T>, target: &Matrix<T>, mask: &[bool]) -> Result<(T, Matrix<T>)> {
    check_shapes("masked_mse", pred, target)?;
    if mask.len() != pred.rows() {
        return Err(Error::shape("masked_mse", "mask length differs from row count"));
    }
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let selected = mask.iter().filter(|&&m| m).count();
    if selected == 0 || pred.cols() == 0 {
        return Ok((T::zero(), grad));
    }
    let inv_n = T::one() / T::of((selected * pred.cols()) as f64);
    let two = T::of(2.0);
    let mut loss = T::zero();
    for r in (0..pred.rows()).filter(|&r| mask[r]) {
        for c in 0..pred.cols() {
            let d = pred.get(r, c) - target.get(r, c);
            loss += d * d;
            grad.set(r, c, two * d * inv_n);
        }
    }
    Ok((loss * inv_n, grad))
}
