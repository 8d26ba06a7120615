use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Unnormalized L1 distance `Σ |pred − target|`.
pub fn l1_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    check_lengths("l1_loss", pred.len(), target.len())?;
    Ok(pred.iter().zip(target).map(|(&p, &t)| (p - t).abs()).sum())
}

/// Root-mean-square error between predicted and actual samples.
pub fn rmse<T: Scalar>(pred: &[T], actual: &[T]) -> Result<T> {
    check_lengths("rmse", pred.len(), actual.len())?;
    let n = T::from_usize(pred.len()).unwrap();
    let sq: T = pred.iter().zip(actual).map(|(&p, &a)| (p - a) * (p - a)).sum();
    Ok((sq / n).sqrt())
}

fn check_lengths(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("prediction has {a} values, reference has {b}")));
    }
    if a == 0 {
        return Err(Error::dim(op, "empty input"));
    }
    Ok(())
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l1_loss(&[0.0f64, 4.0], &[1.0, 2.0]).unwrap(), 3.0);
        assert_eq!(l1_loss(&[0.0f32; 512], &[1.0; 512]).unwrap(), 512.0);
        assert!(l1_loss(&[0.0f32; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[0.3f64, 0.1], &[0.3, 0.1]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0f64, 1.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert!(rmse(&[1.0f64], &[]).is_err());
    }
}
