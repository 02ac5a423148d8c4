//! Scalar measurements over answer-option logits, plus the significance
//! tests used to compare identity groups.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Logits of options A..D and the index of the correct one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionLogits {
    pub values: [f64; 4],
    pub correct: usize,
}

impl OptionLogits {
    pub fn new(values: [f64; 4], correct: usize) -> Result<Self> {
        if correct >= 4 {
            return Err(Error::Input(format!("correct index {correct} out of range")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("option logits must be finite".into()));
        }
        Ok(Self { values, correct })
    }

    /// Picks the four option entries out of a full-vocabulary logit vector.
    pub fn from_vocab<T: Scalar>(logits: &[T], option_ids: [u32; 4], correct: usize) -> Result<Self> {
        let mut values = [0.0; 4];
        for (v, id) in values.iter_mut().zip(option_ids) {
            *v = logits
                .get(id as usize)
                .ok_or_else(|| Error::Input(format!("option token {id} outside the vocabulary")))?
                .wide();
        }
        Self::new(values, correct)
    }

    pub fn mean(&self) -> f64 {
        (self.values[0] + self.values[1] + self.values[2] + self.values[3]) / 4.0
    }

    pub fn correct_logit(&self) -> f64 {
        self.values[self.correct]
    }
}

/// Change in the correct option's logit relative to the change in the mean
/// option logit, patched vs. corrupt.
pub fn relative_logit_diff(patched: &OptionLogits, corrupt: &OptionLogits) -> Result<f64> {
    if patched.correct != corrupt.correct {
        return Err(Error::Input(format!("correct index differs: {} vs {}", patched.correct, corrupt.correct)));
    }
    Ok((patched.correct_logit() - corrupt.correct_logit()) - (patched.mean() - corrupt.mean()))
}

/// Strictly the largest of the four; ties are failures.
pub fn is_max(patched: &OptionLogits) -> bool {
    let c = patched.correct_logit();
    patched.values.iter().enumerate().all(|(j, &v)| j == patched.correct || c > v)
}

fn check_options(len: usize, option_ids: [u32; 4], correct: usize) -> Result<()> {
    if correct >= 4 {
        return Err(Error::Input(format!("correct index {correct} out of range")));
    }
    for i in 0..4 {
        if option_ids[i] as usize >= len {
            return Err(Error::Input(format!("option token {} outside the vocabulary", option_ids[i])));
        }
        if option_ids[i + 1..].contains(&option_ids[i]) {
            return Err(Error::Input("duplicate option token ids".into()));
        }
    }
    Ok(())
}

/// Probability of the correct option's token under the full-vocabulary
/// softmax, evaluated in `f64`.
pub fn correct_answer_prob<T: Scalar>(logits: &[T], option_ids: [u32; 4], correct: usize) -> Result<f64> {
    check_options(logits.len(), option_ids, correct)?;
    let max = logits.iter().map(|v| v.wide()).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v.wide() - max).exp()).sum();
    Ok((logits[option_ids[correct] as usize].wide() - max).exp() / sum)
}

/// Probability of the correct option renormalized over the four options only.
pub fn correct_answer_prob_renormalized<T: Scalar>(logits: &[T], option_ids: [u32; 4], correct: usize) -> Result<f64> {
    check_options(logits.len(), option_ids, correct)?;
    let opts = OptionLogits::from_vocab(logits, option_ids, correct)?;
    let max = opts.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = opts.values.iter().map(|v| (v - max).exp()).sum();
    Ok((opts.correct_logit() - max).exp() / sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Paired,
    Welch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub kind: TestKind,
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: f64,
}

/// Two-sided p-value of a t statistic via the regularized incomplete beta
/// function.
fn two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Classical paired t-test on `x − y`, `n − 1` degrees of freedom.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTest> {
    if x.len() != y.len() {
        return Err(Error::Input(format!("paired samples differ in length: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Input("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let df = (d.len() - 1) as f64;
    if d.iter().all(|&v| v == 0.0) {
        return Ok(TTest { kind: TestKind::Paired, t: 0.0, p: 1.0, df });
    }
    let (mean, var) = mean_var(&d);
    if var == 0.0 || d.iter().all(|&v| v == d[0]) {
        return Err(Error::Degenerate("differences have zero variance".into()));
    }
    let t = mean / (var / d.len() as f64).sqrt();
    Ok(TTest { kind: TestKind::Paired, t, p: two_sided_p(t, df), df })
}

/// Welch's unequal-variance t-test.
pub fn welch_t_test(x: &[f64], y: &[f64]) -> Result<TTest> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Input("Welch t-test needs at least two samples per group".into()));
    }
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let (sx, sy) = (vx / x.len() as f64, vy / y.len() as f64);
    if sx + sy == 0.0 {
        if mx == my {
            return Ok(TTest { kind: TestKind::Welch, t: 0.0, p: 1.0, df: (x.len() + y.len() - 2) as f64 });
        }
        return Err(Error::Degenerate("both groups have zero variance".into()));
    }
    let t = (mx - my) / (sx + sy).sqrt();
    let df = (sx + sy).powi(2) / (sx * sx / (x.len() as f64 - 1.0) + sy * sy / (y.len() as f64 - 1.0));
    Ok(TTest { kind: TestKind::Welch, t, p: two_sided_p(t, df), df })
}

pub fn t_test(kind: TestKind, x: &[f64], y: &[f64]) -> Result<TTest> {
    match kind {
        TestKind::Paired => paired_t_test(x, y),
        TestKind::Welch => welch_t_test(x, y),
    }
}

/// Fraction of `true` flags; 0 for an empty slice.
pub fn accuracy(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        0.0
    } else {
        flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ol(v: [f64; 4], c: usize) -> OptionLogits {
        OptionLogits::new(v, c).unwrap()
    }

    #[test]
    fn delta_r_examples() {
        let c = ol([1.0, 2.0, 3.0, 4.0], 0);
        assert_eq!(relative_logit_diff(&c, &c).unwrap(), 0.0);
        let p = ol([3.0, 2.0, 3.0, 4.0], 0);
        assert!((relative_logit_diff(&p, &c).unwrap() - 1.5).abs() < 1e-12);
        assert!(relative_logit_diff(&ol([0.0; 4], 1), &c).is_err());
    }

    #[test]
    fn is_max_examples() {
        assert!(is_max(&ol([2.0, 1.0, 1.0, 1.0], 0)));
        assert!(!is_max(&ol([1.0, 1.0, 1.0, 1.0], 0)));
        assert!(!is_max(&ol([0.0, 3.0, 2.0, 1.0], 2)));
    }

    #[test]
    fn prob_examples() {
        let p = correct_answer_prob(&[0.5f32; 4], [0, 1, 2, 3], 2).unwrap();
        assert!((p - 0.25).abs() < 1e-12);
        let mut l = vec![0.0f64; 10];
        l[7] = 40.0;
        let p = correct_answer_prob(&l, [7, 1, 2, 3], 0).unwrap();
        assert!((p - 1.0).abs() < 1e-9);
        assert!(correct_answer_prob(&l, [1, 1, 2, 3], 0).is_err());
        assert!(correct_answer_prob(&l, [1, 2, 3, 10], 0).is_err());
        let r = correct_answer_prob_renormalized(&[1.0f32, 1.0, 1.0, 1.0, 9.0], [0, 1, 2, 3], 1).unwrap();
        assert!((r - 0.25).abs() < 1e-12);
    }

    #[test]
    fn t_test_examples() {
        let x = [1.0, 2.0, 3.0];
        let r = paired_t_test(&x, &x).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));

        let x = [2.0, 2.0, 2.0, 2.0, 2.0, 2.0];
        let y = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0001];
        let r = paired_t_test(&x, &y).unwrap();
        assert!(r.t > 100.0 && r.p < 1e-3, "{r:?}");

        assert!(matches!(paired_t_test(&[2.0, 3.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn accuracy_and_mean() {
        assert_eq!(accuracy(&[true, false, true, true]), 0.75);
        assert_eq!(accuracy(&[]), 0.0);
        assert_eq!(mean(&[1.0, 2.0]), 1.5);
    }

    proptest! {
        #[test]
        fn is_max_monotone_invariant(v in prop::array::uniform4(-5.0f64..5.0), c in 0usize..4) {
            let a = ol(v, c);
            let b = ol(v.map(|x| (x * 0.3).exp() + 2.0), c);
            prop_assert_eq!(is_max(&a), is_max(&b));
        }

        #[test]
        fn t_antisymmetric(
            x in prop::collection::vec(-10.0f64..10.0, 8),
            y in prop::collection::vec(-10.0f64..10.0, 8),
        ) {
            let a = paired_t_test(&x, &y).unwrap();
            let b = paired_t_test(&y, &x).unwrap();
            prop_assert!((a.t + b.t).abs() < 1e-9 * a.t.abs().max(1.0));
            prop_assert!((a.p - b.p).abs() < 1e-12);
        }
    }
}
