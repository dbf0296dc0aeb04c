//! Row-wise softmax helpers over the last axis.

use super::array::{Array, DimError};
use super::scalar::Scalar;

/// Stable log-softmax of one row, written into `out`.
pub fn log_softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    debug_assert_eq!(row.len(), out.len());
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let log_z = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - log_z;
    }
}

/// Log-softmax over the last axis.
pub fn log_softmax<S: Scalar>(logits: &Array<S>) -> Result<Array<S>, DimError> {
    check_rows(logits)?;
    let mut out = Array::zeros(logits.dims());
    let a = logits.row_len();
    for (row, dst) in logits.rows().zip(out.data_mut().chunks_exact_mut(a)) {
        log_softmax_row(row, dst);
    }
    Ok(out)
}

/// Entropy of the categorical distribution in each row; the last axis is
/// reduced away.
pub fn entropy<S: Scalar>(logits: &Array<S>) -> Result<Array<S>, DimError> {
    check_rows(logits)?;
    let a = logits.row_len();
    let mut scratch = vec![S::zero(); a];
    let values = logits
        .rows()
        .map(|row| {
            log_softmax_row(row, &mut scratch);
            entropy_from_log_probs(&scratch)
        })
        .collect();
    let dims = &logits.dims()[..logits.ndim() - 1];
    Ok(Array::new(dims.to_vec(), values).expect("one entropy per row"))
}

pub(crate) fn entropy_from_log_probs<S: Scalar>(log_probs: &[S]) -> S {
    -log_probs.iter().map(|&lp| lp.exp() * lp).sum::<S>()
}

fn check_rows<S: Scalar>(logits: &Array<S>) -> Result<(), DimError> {
    if logits.ndim() == 0 || logits.row_len() == 0 {
        return Err(DimError::new(
            "logits (need a non-empty last axis)",
            &[1],
            logits.dims(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Array<f64> {
        Array::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_two_actions() {
        let out = log_softmax(&row(&[0.0, 0.0])).unwrap();
        for &x in out.data() {
            assert!((x + std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn one_zero_logits() {
        let out = log_softmax(&row(&[1.0, 0.0])).unwrap();
        let ln_e1 = (std::f64::consts::E + 1.0).ln();
        assert!((out.data()[0] - (1.0 - ln_e1)).abs() < 1e-12);
        assert!((out.data()[1] + ln_e1).abs() < 1e-12);
        assert!((out.data()[0] + 0.31326).abs() < 1e-5);
        assert!((out.data()[1] + 1.31326).abs() < 1e-5);
    }

    #[test]
    fn large_logits_stay_finite() {
        let out = log_softmax(&row(&[1000.0, 0.0])).unwrap();
        assert!(out.data().iter().all(|x| x.is_finite()));
        assert_eq!(out.data()[0], 0.0);
        let out32 = log_softmax(&Array::new(vec![2], vec![1000.0f32, 0.0]).unwrap()).unwrap();
        assert!(out32.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn entropy_uniform_is_ln_a() {
        for a in 1..8usize {
            let h = entropy(&row(&vec![0.3; a])).unwrap();
            assert_eq!(h.dims(), &[1]);
            assert!((h.data()[0] - (a as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_near_deterministic() {
        let h = entropy(&row(&[10.0, -10.0])).unwrap();
        assert!(h.data()[0] >= 0.0 && h.data()[0] < 1e-3);
    }

    #[test]
    fn empty_last_axis_rejected() {
        let a = Array::<f64>::zeros(&[2, 0]);
        assert!(log_softmax(&a).is_err());
        assert!(entropy(&Array::<f64>::scalar(1.0)).is_err());
    }
}
