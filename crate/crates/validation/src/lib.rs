//! Helpers shared by the acceptance checks.

use ladelab::label_space::LabelDistribution;
use rand::Rng;

/// Outcome of one check: a detail line on success or failure.
pub type Check = Result<String, String>;

pub fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Total-variation distance between two probability vectors.
pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// A random distribution with every mass bounded away from zero.
pub fn random_dist<R: Rng>(rng: &mut R, classes: usize) -> LabelDistribution {
    let w: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
    LabelDistribution::from_weights(&w).expect("positive weights")
}
