//! Evaluation metrics shared by every predictor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean absolute error, score units.
    pub mae: f64,
    /// Population standard deviation of the absolute errors.
    pub mae_std: f64,
    pub pearson_r: f64,
    /// True when either input was constant and `pearson_r` was defined as 0.
    pub r_degenerate: bool,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub r: f64,
    pub degenerate: bool,
}

fn check_lengths(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "metric",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    if a.len() < min {
        return Err(Error::EmptyInput(format!(
            "metric needs at least {min} values, got {}",
            a.len()
        )));
    }
    Ok(())
}

/// Mean and population standard deviation of `|pred − truth|`.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    check_lengths(pred, truth, 1)?;
    let n = pred.len() as f64;
    let abs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    let mean = abs.iter().sum::<f64>() / n;
    let var = abs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<Correlation> {
    check_lengths(a, b, 2)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Correlation {
            r: 0.0,
            degenerate: true,
        });
    }
    // Symmetric in (a, b): the product under the root commutes exactly.
    let r = (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation {
        r,
        degenerate: false,
    })
}

pub fn evaluate(pred: &[f64], truth: &[f64]) -> Result<EvalReport> {
    let (mae, mae_std) = mae(pred, truth)?;
    let c = pearson_r(pred, truth)?;
    Ok(EvalReport {
        mae,
        mae_std,
        pearson_r: c.r,
        r_degenerate: c.degenerate,
        n: pred.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mae_cases() {
        let t = [1.0, 5.0, -2.0];
        assert_eq!(mae(&t, &t).unwrap(), (0.0, 0.0));
        let p: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
        assert_eq!(mae(&p, &t).unwrap(), (1.0, 0.0));
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pearson_cases() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let b: Vec<f64> = a.iter().map(|v| 3.0 * v + 2.0).collect();
        assert!((pearson_r(&a, &b).unwrap().r - 1.0).abs() < 1e-15);
        let c: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson_r(&a, &c).unwrap().r + 1.0).abs() < 1e-15);
        let flat = pearson_r(&a, &[2.0; 4]).unwrap();
        assert!(flat.degenerate && flat.r == 0.0);
        assert!(pearson_r(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn pearson_is_symmetric_and_affine_invariant(
            a in prop::collection::vec(-100.0f64..100.0, 3..40),
            seed in 0u64..1000,
            scale in 0.1f64..10.0,
            shift in -50.0f64..50.0,
        ) {
            let b: Vec<f64> = a.iter().enumerate()
                .map(|(i, v)| v * 0.3 + ((i as u64 * 31 + seed) % 17) as f64)
                .collect();
            let r1 = pearson_r(&a, &b).unwrap();
            let r2 = pearson_r(&b, &a).unwrap();
            prop_assert_eq!(r1.r.to_bits(), r2.r.to_bits());
            let a2: Vec<f64> = a.iter().map(|v| scale * v + shift).collect();
            let r3 = pearson_r(&a2, &b).unwrap();
            prop_assert!((r1.r - r3.r).abs() < 1e-12);
        }

        #[test]
        fn mae_is_translation_equivariant(
            p in prop::collection::vec(-100.0f64..100.0, 1..30),
            shift in -10.0f64..10.0,
        ) {
            let t: Vec<f64> = p.iter().map(|v| v * 0.5 - 1.0).collect();
            let (m1, _) = mae(&p, &t).unwrap();
            let ps: Vec<f64> = p.iter().map(|v| v + shift).collect();
            let ts: Vec<f64> = t.iter().map(|v| v + shift).collect();
            let (m2, _) = mae(&ps, &ts).unwrap();
            prop_assert!((m1 - m2).abs() < 1e-9);
        }
    }
}
