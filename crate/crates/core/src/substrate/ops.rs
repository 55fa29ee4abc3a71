//! Loss-level building blocks shared by the prompter and the reasoner.

use super::tape::{log_sum_exp, softmax_in_place, Tape, Var, LOG_CLAMP};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const DIST_TOL: f64 = 1e-6;

/// Temperature-scaled softmax of a logit vector.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if let Some(bad) = logits.iter().find(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("non-finite logit {bad}")));
    }
    let mut out: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|x| x - lse).collect()
}

/// Checks that `p` is a probability vector within `1e-6`.
pub fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::Domain(format!("{what} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > DIST_TOL {
        return Err(Error::Domain(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// `−Σ target[i]·log(max(predicted[i], 1e-12))`
pub fn soft_cross_entropy(target: &[f64], predicted: &[f64]) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::shape(format!(
            "soft cross entropy over {} targets and {} predictions",
            target.len(),
            predicted.len()
        )));
    }
    check_distribution(target, "target")?;
    check_distribution(predicted, "prediction")?;
    Ok(-target
        .iter()
        .zip(predicted)
        .map(|(t, p)| t * p.max(LOG_CLAMP).ln())
        .sum::<f64>())
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|x| x * x.max(LOG_CLAMP).ln()).sum::<f64>()
}

impl Tape {
    /// Temperature-scaled softmax over the last dimension with a fixed temperature.
    pub fn softmax_t(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let scaled = self.scale(logits, 1.0 / temperature);
        Ok(self.softmax_rows(scaled))
    }

    /// Soft-target cross entropy on the tape; `target` is usually a constant.
    pub fn soft_cross_entropy(&mut self, target: Var, predicted: Var) -> Result<Var> {
        if self.value(target).numel() != self.value(predicted).numel() {
            return Err(Error::shape(format!(
                "soft cross entropy over {:?} targets and {:?} predictions",
                self.shape(target),
                self.shape(predicted)
            )));
        }
        let pred = if self.shape(predicted) == self.shape(target) {
            predicted
        } else {
            let s = self.shape(target).to_vec();
            self.reshape(predicted, &s)?
        };
        let logp = self.log(pred);
        let prod = self.mul(target, logp)?;
        let total = self.sum(prod);
        Ok(self.scale(total, -1.0))
    }

    /// Cross entropy of softmax(`logits`) against the class `label`.
    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Result<Var> {
        let n = self.value(logits).numel();
        if label >= n {
            return Err(Error::arg(format!("label {label} outside {n} classes")));
        }
        let row = self.reshape(logits, &[1, n])?;
        let logp = self.log_softmax_rows(row);
        let picked = self.gather_cols_one(logp, label)?;
        Ok(self.scale(picked, -1.0))
    }

    fn gather_cols_one(&mut self, row: Var, col: usize) -> Result<Var> {
        let t = self.transpose(row)?;
        let g = self.gather_rows(t, &[col])?;
        self.reshape(g, &[1])
    }

    /// Convenience: a constant probability vector.
    pub fn distribution(&mut self, p: &[f64]) -> Var {
        self.constant(Tensor::vector(p.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn direct_softmax(x: &[f64], t: f64) -> Vec<f64> {
        let e: Vec<f64> = x.iter().map(|v| (v / t).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn softmax_reference_values() {
        let p = softmax(&[2.0, 1.0, 0.0], 1.0).unwrap();
        let want = direct_softmax(&[2.0, 1.0, 0.0], 1.0);
        for ((a, b), frozen) in p.iter().zip(&want).zip([0.66524, 0.24473, 0.09003]) {
            assert!((a - b).abs() < 1e-12);
            assert!((a - frozen).abs() < 1e-5);
        }
        let p = softmax(&[2.0, 1.0, 0.0], 0.5).unwrap();
        for (a, frozen) in p.iter().zip([0.86681, 0.11731, 0.01587]) {
            assert!((a - frozen).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_constant_logits_uniform() {
        for t in [0.1, 1.0, 7.0] {
            let p = softmax(&[4.2, 4.2, 4.2], t).unwrap();
            p.iter().for_each(|x| assert!((x - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax(&[1.0], -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn soft_cross_entropy_reference_values() {
        let l = soft_cross_entropy(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = soft_cross_entropy(&[0.7, 0.3], &[0.7, 0.3]).unwrap();
        let hand = -(0.7 * 0.7f64.ln() + 0.3 * 0.3f64.ln());
        assert!((l - hand).abs() < 1e-12);
        assert!((l - 0.610864).abs() < 1e-6);
        let l = soft_cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(l.abs() < 1e-9);
    }

    #[test]
    fn soft_cross_entropy_length_mismatch() {
        assert!(matches!(
            soft_cross_entropy(&[1.0], &[0.5, 0.5]),
            Err(Error::Shape(_))
        ));
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-4.0f64..4.0, n).prop_map(|x| softmax(&x, 1.0).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_keeps_argmax(
            x in prop::collection::vec(-30.0f64..30.0, 1..12),
            t in 0.01f64..50.0,
        ) {
            let p = softmax(&x, t).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(crate::substrate::argmax(&p), crate::substrate::argmax(&x));
        }

        #[test]
        fn gibbs_inequality(p in dist(6), q in dist(6)) {
            let self_ce = soft_cross_entropy(&p, &p).unwrap();
            prop_assert!((self_ce - entropy(&p)).abs() < 1e-9);
            prop_assert!(soft_cross_entropy(&p, &q).unwrap() >= self_ce - 1e-12);
        }
    }
}
