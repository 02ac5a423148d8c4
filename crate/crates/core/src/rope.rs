//! Rotary position embedding.
//!
//! Uses the half-split pairing: component `i` rotates together with
//! component `i + head_dim / 2`, which is the layout of the public
//! checkpoints the real-weight path targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Long-context frequency rescaling used by the Llama 3.x family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeScaling {
    pub factor: f64,
    pub low_freq_factor: f64,
    pub high_freq_factor: f64,
    pub original_max_position: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub theta_base: f64,
    pub head_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<RopeScaling>,
}

impl RopeParams {
    pub const DEFAULT_THETA: f64 = 500_000.0;

    pub fn new(theta_base: f64, head_dim: usize) -> Result<Self> {
        let p = Self { theta_base, head_dim, scaling: None };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rope head_dim must be a positive even number, got {}", self.head_dim)));
        }
        if !(self.theta_base > 0.0 && self.theta_base.is_finite()) {
            return Err(Error::Config(format!("rope theta_base must be positive, got {}", self.theta_base)));
        }
        Ok(())
    }

    /// Angular frequency of rotation pair `i` (`theta_base^(-2i/head_dim)`,
    /// adjusted by `scaling` when present).
    pub fn inv_freq(&self, i: usize) -> f64 {
        let base = self.theta_base.powf(-2.0 * i as f64 / self.head_dim as f64);
        match self.scaling {
            None => base,
            Some(s) => {
                let low_wavelen = s.original_max_position / s.low_freq_factor;
                let high_wavelen = s.original_max_position / s.high_freq_factor;
                let wavelen = 2.0 * std::f64::consts::PI / base;
                if wavelen < high_wavelen {
                    base
                } else if wavelen > low_wavelen {
                    base / s.factor
                } else {
                    let smooth = (s.original_max_position / wavelen - s.low_freq_factor)
                        / (s.high_freq_factor - s.low_freq_factor);
                    (1.0 - smooth) * base / s.factor + smooth * base
                }
            }
        }
    }
}

/// Rotates `x` (one head's query or key) to `position`.
pub fn rope_apply<T: Scalar>(x: &[T], position: usize, p: &RopeParams) -> Result<Vec<T>> {
    p.validate()?;
    if x.len() != p.head_dim {
        return Err(Error::Shape(format!("rope input length {} vs head_dim {}", x.len(), p.head_dim)));
    }
    let half = p.head_dim / 2;
    let mut out = x.to_vec();
    for i in 0..half {
        let angle = position as f64 * p.inv_freq(i);
        let (sin, cos) = (T::of(angle.sin()), T::of(angle.cos()));
        let (a, b) = (x[i], x[i + half]);
        out[i] = a * cos - b * sin;
        out[i + half] = a * sin + b * cos;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn position_zero_is_identity() {
        let p = RopeParams::new(500_000.0, 8).unwrap();
        let x = [0.3f32, -1.2, 0.5, 2.0, -0.7, 0.1, 0.9, -0.4];
        assert_eq!(rope_apply(&x, 0, &p).unwrap(), x.to_vec());
    }

    #[test]
    fn odd_head_dim_is_config_error() {
        assert!(matches!(RopeParams::new(10_000.0, 7), Err(Error::Config(_))));
        let bad = RopeParams { theta_base: 10_000.0, head_dim: 3, scaling: None };
        assert!(matches!(rope_apply(&[1.0f32; 3], 1, &bad), Err(Error::Config(_))));
    }

    /// Inner products of rotated vectors depend only on the relative offset;
    /// checked against explicit complex multiplication.
    #[test]
    fn relative_rotation_matches_complex_oracle() {
        let p = RopeParams::new(10_000.0, 16).unwrap();
        let q: Vec<f64> = (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let k: Vec<f64> = (0..16).map(|i| ((i * 5 % 13) as f64 - 6.0) / 4.0).collect();
        for (t1, t2) in [(0usize, 0usize), (3, 1), (17, 40), (1000, 999), (4096, 7)] {
            let rq = rope_apply(&q, t1, &p).unwrap();
            let rk = rope_apply(&k, t2, &p).unwrap();
            let got: f64 = rq.iter().zip(&rk).map(|(a, b)| a * b).sum();

            // Re( sum_i zq_i * conj(zk_i) * e^{i (t1 - t2) w_i} )
            let mut want = 0.0;
            for i in 0..8 {
                let (qr, qi) = (q[i], q[i + 8]);
                let (kr, ki) = (k[i], k[i + 8]);
                let (pr, pi) = (qr * kr + qi * ki, qi * kr - qr * ki);
                let ang = (t1 as f64 - t2 as f64) * p.inv_freq(i);
                want += pr * ang.cos() - pi * ang.sin();
            }
            assert!((got - want).abs() < 1e-5, "({t1},{t2}): {got} vs {want}");
        }
    }

    #[test]
    fn llama3_scaling_keeps_high_frequencies() {
        let mut p = RopeParams::new(500_000.0, 64).unwrap();
        p.scaling = Some(RopeScaling {
            factor: 32.0,
            low_freq_factor: 1.0,
            high_freq_factor: 4.0,
            original_max_position: 8192.0,
        });
        let plain = RopeParams::new(500_000.0, 64).unwrap();
        assert_eq!(p.inv_freq(0), plain.inv_freq(0));
        assert!((p.inv_freq(31) - plain.inv_freq(31) / 32.0).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn preserves_norm(
            x in prop::collection::vec(-4.0f32..4.0, 16),
            pos in 0usize..=4096,
        ) {
            let p = RopeParams::new(500_000.0, 16).unwrap();
            let y = rope_apply(&x, pos, &p).unwrap();
            prop_assert!((norm(&x) - norm(&y)).abs() < 1e-5 * norm(&x).max(1.0));
        }
    }
}
