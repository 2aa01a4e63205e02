//! The two-branch toy distribution.
//!
//! `x = (3·z1 + 0.1·ε, cos(3·z1) + tanh(3·z2) + 0.1·ε)` with `z1, z2, ε` i.i.d.
//! standard normal. The same `ε` enters both coordinates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub const NOISE_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySample {
    pub x: [f64; 2],
    pub z1: f64,
    pub z2: f64,
    pub eps: f64,
}

impl ToySample {
    pub fn from_factors(z1: f64, z2: f64, eps: f64) -> Self {
        Self {
            x: toy_point(z1, z2, eps),
            z1,
            z2,
            eps,
        }
    }
}

/// The generating map `f(z1, z2, ε)`.
pub fn toy_point(z1: f64, z2: f64, eps: f64) -> [f64; 2] {
    [
        3.0 * z1 + NOISE_SCALE * eps,
        (3.0 * z1).cos() + (3.0 * z2).tanh() + NOISE_SCALE * eps,
    ]
}

/// `n` i.i.d. samples. Each sample draws `z1`, `z2`, `ε` in that order.
pub fn generate_toy_batch(n: usize, rng: &mut impl Rng) -> Vec<ToySample> {
    (0..n)
        .map(|_| {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let eps: f64 = rng.sample(StandardNormal);
            ToySample::from_factors(z1, z2, eps)
        })
        .collect()
}

/// Stacks sample coordinates into a `[n × 2]` tensor.
pub fn samples_to_tensor(samples: &[ToySample]) -> Tensor {
    points_to_tensor(samples.iter().map(|s| s.x))
}

pub fn points_to_tensor(points: impl IntoIterator<Item = [f64; 2]>) -> Tensor {
    let data: Vec<f64> = points.into_iter().flatten().collect();
    let n = data.len() / 2;
    Tensor::from_parts(vec![n, 2], data)
}

pub fn tensor_to_points(t: &Tensor) -> Vec<[f64; 2]> {
    t.data().chunks_exact(2).map(|r| [r[0], r[1]]).collect()
}

/// Supplies training batches. Sources draw from the trainer's stream so a
/// run stays a function of its seed.
pub trait DataSource {
    fn batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Tensor;
}

/// Fresh toy samples every batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToySource;

impl DataSource for ToySource {
    fn batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        samples_to_tensor(&generate_toy_batch(n, rng))
    }
}
