//! Loss terms, the ramp-up weight and the polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Probability clamp used inside the logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Exponent of the polynomial learning-rate decay.
pub const POLY_POWER: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub consistency: f64,
    pub lambda_t: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lambda_max: f64,
    pub ramp_epochs: usize,
    pub lr0: f64,
    pub total_iterations: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lambda_max: 1.0,
            ramp_epochs: 8,
            lr0: 0.01,
            total_iterations: 1,
        }
    }
}

impl ScheduleConfig {
    /// Defaults for a run of `epochs` epochs: ramp over 80% of them.
    pub fn for_epochs(epochs: usize) -> Self {
        Self {
            ramp_epochs: (0.8 * epochs as f64).round() as usize,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iterations == 0 {
            return Err(Error::Config("total_iterations must be at least 1".into()));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::Config("lambda_max must be finite and >= 0".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config("lr0 must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn check_shapes<T: Copy, U: Copy>(a: &[Grid<T>], b: &[Grid<U>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "stack lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        if !x.same_shape(y) {
            return Err(Error::Shape(format!(
                "map {}x{}x{} vs {}x{}x{}",
                x.channels(),
                x.height(),
                x.width(),
                y.channels(),
                y.height(),
                y.width()
            )));
        }
    }
    Ok(())
}

#[inline]
fn bce(p: f64, y: u8) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Derivative of [`bce`] in `p`; zero where the clamp is active.
#[inline]
fn bce_grad(p: f64, y: u8) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    if y == 1 {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// Binary cross-entropy averaged over members and pixels; 0 for an empty stack.
pub fn supervised_loss(probs: &[Grid<f64>], masks: &[Grid<u8>]) -> Result<f64> {
    check_shapes(probs, masks)?;
    let count: usize = probs.iter().map(|p| p.data().len()).sum();
    if count == 0 {
        return Ok(0.0);
    }
    let sum: f64 = probs
        .iter()
        .zip(masks)
        .flat_map(|(p, m)| p.data().iter().zip(m.data()))
        .map(|(&p, &y)| bce(p, y))
        .sum();
    Ok(sum / count as f64)
}

/// Gradient of the per-map cross-entropy sum scaled by `scale`.
pub fn supervised_grad(probs: &[f64], mask: &[u8], scale: f64) -> Vec<f64> {
    probs
        .iter()
        .zip(mask)
        .map(|(&p, &y)| scale * bce_grad(p, y))
        .collect()
}

/// Per-map cross-entropy sum (not averaged).
pub fn supervised_sum(probs: &[f64], mask: &[u8]) -> f64 {
    probs.iter().zip(mask).map(|(&p, &y)| bce(p, y)).sum()
}

/// Mean squared difference over members and pixels.
pub fn consistency_loss(z: &[Grid<f64>], z_tilde: &[Grid<f64>]) -> Result<f64> {
    check_shapes(z, z_tilde)?;
    let count: usize = z.iter().map(|p| p.data().len()).sum();
    if count == 0 {
        return Ok(0.0);
    }
    let sum: f64 = z
        .iter()
        .zip(z_tilde)
        .map(|(a, b)| squared_diff_sum(a.data(), b.data()))
        .sum();
    Ok(sum / count as f64)
}

pub fn squared_diff_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gradient of `scale * sum (a - b)^2` in `a`; the gradient in `b` is its negation.
pub fn consistency_grad(a: &[f64], b: &[f64], scale: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| scale * 2.0 * (x - y)).collect()
}

/// Gaussian ramp-up `lambda_max * exp(-5 (1 - min(t / T, 1))^2)`.
pub fn ramp_weight(epoch: usize, schedule: &ScheduleConfig) -> f64 {
    if schedule.ramp_epochs == 0 || epoch >= schedule.ramp_epochs {
        return schedule.lambda_max;
    }
    let phase = 1.0 - epoch as f64 / schedule.ramp_epochs as f64;
    schedule.lambda_max * (-5.0 * phase * phase).exp()
}

/// `lr0 * (1 - iteration / total_iterations)^0.9`.
pub fn poly_lr(iteration: usize, schedule: &ScheduleConfig) -> Result<f64> {
    if schedule.total_iterations == 0 || iteration > schedule.total_iterations {
        return Err(Error::Parameter(format!(
            "iteration {iteration} outside 0..={}",
            schedule.total_iterations
        )));
    }
    let frac = iteration as f64 / schedule.total_iterations as f64;
    Ok(schedule.lr0 * (1.0 - frac).powf(POLY_POWER))
}

/// `total = supervised + lambda_t * consistency`.
pub fn total_loss(supervised: f64, consistency: f64, lambda_t: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("supervised", supervised),
        ("consistency", consistency),
        ("lambda", lambda_t),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss term is {v}")));
        }
    }
    Ok(LossBreakdown {
        supervised,
        consistency,
        lambda_t,
        total: supervised + lambda_t * consistency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(values: &[f64]) -> Grid<f64> {
        Grid::new(1, 1, values.len(), values.to_vec()).unwrap()
    }

    fn mask(values: &[u8]) -> Grid<u8> {
        Grid::new(1, 1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn supervised_examples() {
        let perfect = supervised_loss(&[map(&[1.0, 0.0, 1.0])], &[mask(&[1, 0, 1])]).unwrap();
        assert!(perfect <= 1e-6);
        let half = supervised_loss(&[map(&[0.5])], &[mask(&[1])]).unwrap();
        assert!((half - 0.693147).abs() < 1e-6);
        assert_eq!(half, -(0.5f64).ln());
        assert_eq!(supervised_loss(&[], &[]).unwrap(), 0.0);
        assert!(supervised_loss(&[map(&[0.5, 0.5])], &[mask(&[1])]).is_err());
    }

    #[test]
    fn supervised_moves_toward_label() {
        for &(p, y, dp) in &[(0.2, 1u8, 0.1), (0.8, 0u8, -0.1), (0.6, 1u8, 0.2)] {
            let before = supervised_loss(&[map(&[p])], &[mask(&[y])]).unwrap();
            let after = supervised_loss(&[map(&[p + dp])], &[mask(&[y])]).unwrap();
            assert!(after < before);
        }
    }

    #[test]
    fn consistency_examples() {
        let a = map(&[0.3, 0.9]);
        assert_eq!(consistency_loss(&[a.clone()], &[a]).unwrap(), 0.0);
        let z = vec![map(&[0.5; 6]), map(&[0.5; 6])];
        let zt = vec![map(&[0.7; 6]), map(&[0.7; 6])];
        assert!((consistency_loss(&z, &zt).unwrap() - 0.04).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a: Vec<f64> = (0..9).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..9).map(|_| rng.random()).collect();
            let ab = consistency_loss(&[map(&a)], &[map(&b)]).unwrap();
            let ba = consistency_loss(&[map(&b)], &[map(&a)]).unwrap();
            assert_eq!(ab, ba);
            assert!(ab > 0.0);
        }
    }

    #[test]
    fn ramp_examples() {
        let s = ScheduleConfig {
            lambda_max: 2.0,
            ramp_epochs: 10,
            ..ScheduleConfig::default()
        };
        assert_eq!(ramp_weight(10, &s), 2.0);
        assert_eq!(ramp_weight(25, &s), 2.0);
        assert!((ramp_weight(0, &s) - 2.0 * (-5.0f64).exp()).abs() < 1e-15);
        assert!((ramp_weight(0, &s) / 2.0 - 0.006738).abs() < 1e-6);
        let off = ScheduleConfig {
            lambda_max: 0.0,
            ..s.clone()
        };
        assert!((0..30).all(|t| ramp_weight(t, &off) == 0.0));
        let flat = ScheduleConfig { ramp_epochs: 0, ..s };
        assert_eq!(ramp_weight(0, &flat), 2.0);
    }

    #[test]
    fn poly_examples() {
        let s = ScheduleConfig {
            total_iterations: 1000,
            ..ScheduleConfig::default()
        };
        assert_eq!(poly_lr(0, &s).unwrap(), 0.01);
        let half = poly_lr(500, &s).unwrap();
        assert!((half - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((half - 0.0053589).abs() < 1e-7);
        assert_eq!(poly_lr(1000, &s).unwrap(), 0.0);
        assert!(poly_lr(1001, &s).is_err());
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let lr = poly_lr(i, &s).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(1.0, 0.5, 0.0).unwrap().total, 1.0);
        assert_eq!(total_loss(0.0, 0.3, 2.0).unwrap().total, 0.6);
        assert!((total_loss(0.7, 0.04, 1.0).unwrap().total - 0.74).abs() < 1e-15);
        assert!(total_loss(f64::NAN, 0.0, 1.0).is_err());
        assert!(total_loss(0.0, f64::INFINITY, 1.0).is_err());
    }

    /// Central differences of the averaged losses against the analytic gradients.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..0.95)).collect();
        let q: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..0.95)).collect();
        let y: Vec<u8> = (0..12).map(|_| rng.random_range(0..2)).collect();
        let n = p.len() as f64;
        let g_sup = supervised_grad(&p, &y, 1.0 / n);
        let g_con = consistency_grad(&p, &q, 1.0 / n);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let sup = |v: &[f64]| supervised_loss(&[map(v)], &[mask(&y)]).unwrap();
            let con = |v: &[f64]| consistency_loss(&[map(v)], &[map(&q)]).unwrap();
            let fd_sup = (sup(&pp) - sup(&pm)) / (2.0 * h);
            let fd_con = (con(&pp) - con(&pm)) / (2.0 * h);
            assert!((fd_sup - g_sup[i]).abs() / g_sup[i].abs() < 1e-6);
            assert!((fd_con - g_con[i]).abs() / g_con[i].abs().max(1e-12) < 1e-6);
        }
    }
}
