//! Metrics against the known toy distribution.
//!
//! The oracles here use the generating process directly: distance to the
//! noiseless surface, a Monte-Carlo density, and per-bin spread of the
//! second coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::model::{MlpModel, Role};
use crate::special::std_normal_pdf;
use crate::tensor::Tensor;
use crate::toy::{generate_toy_batch, points_to_tensor, samples_to_tensor, tensor_to_points, ToySample, NOISE_SCALE};
use crate::TensorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what}: need at least {need} samples, got {got}")]
    TooFewSamples {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("{empty} of {bins} coverage bins have too little reference data")]
    SparseBins { empty: usize, bins: usize },
    #[error("{0}")]
    Model(String),
}

// ---------------------------------------------------------------------------
// Manifold distance

const Z_RANGE: f64 = 4.0;
const Z1_STEP: f64 = 1e-3;

/// Squared distance from `p` to the surface slice at `z1`, with `z2`
/// minimised in closed form: the second coordinate can be anything in
/// `cos(3·z1) ± tanh(12)`.
fn slice_distance_sq(p: [f64; 2], z1: f64) -> f64 {
    let reach = (3.0 * Z_RANGE).tanh();
    let u = 3.0 * z1;
    let dx = p[0] - u;
    let dy = ((p[1] - u.cos()).abs() - reach).max(0.0);
    dx * dx + dy * dy
}

/// Euclidean distance from `p` to the noiseless surface
/// `{f(z1, z2, 0) : z1, z2 ∈ [−4, 4]}`.
///
/// Scans `z1` on a 1e-3 grid, skipping grid points whose first coordinate
/// alone is already farther than the best candidate, then refines around the
/// best grid point by golden-section search. Accurate to about 1e-6.
pub fn manifold_distance(p: [f64; 2]) -> f64 {
    let steps = (2.0 * Z_RANGE / Z1_STEP).round() as i64;
    let grid = |i: i64| -Z_RANGE + i as f64 * Z1_STEP;
    let start = (p[0] / 3.0).clamp(-Z_RANGE, Z_RANGE);
    let mut best_i = ((start + Z_RANGE) / Z1_STEP).round() as i64;
    let mut best = slice_distance_sq(p, grid(best_i));
    let radius = best.sqrt();
    let lo = (((p[0] - radius) / 3.0 + Z_RANGE) / Z1_STEP).floor().max(0.0) as i64;
    let hi = (((p[0] + radius) / 3.0 + Z_RANGE) / Z1_STEP).ceil().min(steps as f64) as i64;
    for i in lo..=hi {
        let d = slice_distance_sq(p, grid(i));
        if d < best {
            best = d;
            best_i = i;
        }
    }
    let a = grid(best_i - 1).max(-Z_RANGE);
    let b = grid(best_i + 1).min(Z_RANGE);
    let refined = golden_min(|z| slice_distance_sq(p, z), a, b, 1e-12);
    best.min(refined).sqrt()
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    fc.min(fd)
}

// ---------------------------------------------------------------------------
// Density oracle

pub const MIN_DENSITY_DRAWS: usize = 10_000;

/// Per-point log densities below this are clamped when averaged, so a few
/// points far off the support cannot turn a mean into −∞. It is about
/// `ln(1e-30)`; any point that low is already 20+ noise widths off the data.
pub const LOG_DENSITY_FLOOR: f64 = -69.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityEstimate {
    /// `ln p̂(x)`, or −∞ when every draw contributed zero.
    pub log_density: f64,
    pub density: f64,
    /// Standard error of `density`.
    pub std_error: f64,
}

/// Density of `t = tanh(3·z2)` for standard normal `z2`.
fn tanh_density(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        return 0.0;
    }
    let z2 = t.atanh() / 3.0;
    std_normal_pdf(z2) / (3.0 * (1.0 - t * t))
}

/// Density of `x` conditional on the shared noise `ε`.
///
/// Given `ε`, `z1 = (x1 − 0.1ε)/3` is pinned by the first coordinate and
/// `tanh(3·z2) = x2 − cos(3·z1) − 0.1ε` by the second; the Jacobian is
/// triangular.
fn conditional_density(p: [f64; 2], eps: f64) -> f64 {
    let u = p[0] - NOISE_SCALE * eps;
    let first = std_normal_pdf(u / 3.0) / 3.0;
    if first == 0.0 {
        return 0.0;
    }
    first * tanh_density(p[1] - u.cos() - NOISE_SCALE * eps)
}

/// Monte-Carlo estimator `p̂(x) = mean_k p(x | ε_k)` with `ε_k ~ N(0, 1)`.
///
/// Because the same noise shifts both coordinates, the data density has no
/// Gaussian-residual form in `(z1, z2)`; integrating over `ε` is exact up to
/// Monte-Carlo error. One set of draws is reused for every query so that
/// evaluations are deterministic and comparable.
#[derive(Clone, Debug)]
pub struct DensityOracle {
    eps: Vec<f64>,
}

impl DensityOracle {
    pub fn new(draws: usize, rng: &mut impl Rng) -> Result<Self, EvalError> {
        if draws < MIN_DENSITY_DRAWS {
            return Err(EvalError::TooFewSamples {
                what: "density oracle",
                need: MIN_DENSITY_DRAWS,
                got: draws,
            });
        }
        Ok(Self::with_draws(draws, rng))
    }

    /// No minimum on the draw count; for coarse checks only.
    pub fn with_draws(draws: usize, rng: &mut impl Rng) -> Self {
        Self {
            eps: (0..draws).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn draws(&self) -> usize {
        self.eps.len()
    }

    pub fn estimate(&self, p: [f64; 2]) -> DensityEstimate {
        let n = self.eps.len() as f64;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for &e in &self.eps {
            let v = conditional_density(p, e);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n;
        let var = ((sum_sq / n - mean * mean) * n / (n - 1.0).max(1.0)).max(0.0);
        DensityEstimate {
            log_density: if mean > 0.0 { mean.ln() } else { f64::NEG_INFINITY },
            density: mean,
            std_error: (var / n).sqrt(),
        }
    }

    pub fn log_density(&self, p: [f64; 2]) -> f64 {
        self.estimate(p).log_density
    }

    /// Mean of per-point log densities, each clamped at [`LOG_DENSITY_FLOOR`].
    pub fn mean_log_density(&self, points: &[[f64; 2]]) -> f64 {
        if points.is_empty() {
            return f64::NAN;
        }
        let total: f64 = points.iter().map(|&p| self.log_density(p).max(LOG_DENSITY_FLOOR)).sum();
        total / points.len() as f64
    }
}

/// One-shot `ln p̂(p)` with fresh draws.
pub fn log_density(p: [f64; 2], mc_draws: usize, rng: &mut impl Rng) -> Result<f64, EvalError> {
    Ok(DensityOracle::new(mc_draws, rng)?.log_density(p))
}

// ---------------------------------------------------------------------------
// Sweeps

/// Which network maps latent codes to data space.
#[derive(Clone, Copy, Debug)]
pub enum Reconstructor<'a> {
    Decoder(&'a MlpModel),
    /// Any input columns beyond the latent code are ξ.
    Generator(&'a MlpModel),
}

impl<'a> Reconstructor<'a> {
    pub fn model(&self) -> &'a MlpModel {
        match *self {
            Reconstructor::Decoder(m) | Reconstructor::Generator(m) => m,
        }
    }

    fn xi_dim(&self, dim_z: usize) -> usize {
        match self {
            Reconstructor::Decoder(_) => 0,
            Reconstructor::Generator(m) => m.input_dim().saturating_sub(dim_z),
        }
    }

    /// Maps `[n × dim_z]` codes, with `xi` (`[n × dim_ξ]`) or zeros for the
    /// noise columns.
    pub fn apply(&self, z: &Tensor, xi: Option<&Tensor>) -> Result<Tensor, EvalError> {
        let (n, dim_z) = z.dims2()?;
        let xi_dim = self.xi_dim(dim_z);
        let model = self.model();
        if model.input_dim() != dim_z + xi_dim {
            return Err(EvalError::Model(format!(
                "{} takes {} inputs, latent code has {dim_z}",
                model.role.name(),
                model.input_dim()
            )));
        }
        if xi_dim == 0 {
            return Ok(model.predict(z)?);
        }
        let mut data = Vec::with_capacity(n * (dim_z + xi_dim));
        for i in 0..n {
            data.extend_from_slice(z.row(i));
            match xi {
                Some(xi) => data.extend_from_slice(xi.row(i)),
                None => data.extend(std::iter::repeat_n(0.0, xi_dim)),
            }
        }
        Ok(model.predict(&Tensor::new(vec![n, dim_z + xi_dim], data)?)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XiPolicy {
    /// ξ = 0, or no ξ input at all; one row per grid point with index 0.
    Zero,
    /// `draws` independent ξ per grid point, indexed `1..=draws`.
    Sampled { draws: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub z: f64,
    pub xi_index: usize,
    pub x: [f64; 2],
}

/// The latent grid `−3, −2.99, …, 3` (601 points).
pub fn sweep_grid() -> Vec<f64> {
    (0..=600).map(|i| -3.0 + i as f64 * 0.01).collect()
}

/// Outputs along the latent grid. The grid value fills the first latent
/// coordinate; any further latent coordinates are zero.
pub fn manifold_sweep(
    source: Reconstructor<'_>,
    dim_z: usize,
    policy: XiPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<SweepRow>, EvalError> {
    let grid = sweep_grid();
    let code = |z: f64| {
        let mut row = vec![0.0; dim_z];
        row[0] = z;
        row
    };
    let mut rows = Vec::new();
    match policy {
        XiPolicy::Zero => {
            let zt = Tensor::new(vec![grid.len(), dim_z], grid.iter().flat_map(|&z| code(z)).collect())?;
            let out = source.apply(&zt, None)?;
            for (&z, x) in grid.iter().zip(tensor_to_points(&out)) {
                rows.push(SweepRow { z, xi_index: 0, x });
            }
        }
        XiPolicy::Sampled { draws } => {
            let xi_dim = source.xi_dim(dim_z);
            // Rows ordered by draw, then grid point.
            let n = grid.len() * draws;
            let zt = Tensor::new(
                vec![n, dim_z],
                (0..draws).flat_map(|_| grid.iter().flat_map(|&z| code(z))).collect(),
            )?;
            let xi = Tensor::new(
                vec![n, xi_dim],
                (0..n * xi_dim).map(|_| rng.sample(StandardNormal)).collect(),
            )?;
            let out = source.apply(&zt, Some(&xi))?;
            for (k, x) in tensor_to_points(&out).into_iter().enumerate() {
                rows.push(SweepRow {
                    z: grid[k % grid.len()],
                    xi_index: k / grid.len() + 1,
                    x,
                });
            }
        }
    }
    Ok(rows)
}

/// `n` samples from the model: `z ~ N(0, I)` and, for a generator with noise
/// inputs, `ξ ~ N(0, I)`. Draws all of `z` first, then all of `ξ`.
pub fn sample_model(
    source: Reconstructor<'_>,
    dim_z: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<[f64; 2]>, EvalError> {
    let z = Tensor::new(
        vec![n, dim_z],
        (0..n * dim_z).map(|_| rng.sample(StandardNormal)).collect(),
    )?;
    let xi_dim = source.xi_dim(dim_z);
    let xi = if xi_dim > 0 {
        Some(Tensor::new(
            vec![n, xi_dim],
            (0..n * xi_dim).map(|_| rng.sample(StandardNormal)).collect(),
        )?)
    } else {
        None
    };
    Ok(tensor_to_points(&source.apply(&z, xi.as_ref())?))
}

// ---------------------------------------------------------------------------
// Branch coverage

pub const COVERAGE_BINS: usize = 20;
pub const COVERAGE_RANGE: (f64, f64) = (-6.0, 6.0);
pub const MIN_COVERAGE_SAMPLES: usize = 10_000;
/// A bin needs this many reference points to take part.
pub const MIN_BIN_COUNT: usize = 20;

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 10%–90% spread of the second coordinate per first-coordinate bin.
fn bin_spreads(points: &[[f64; 2]]) -> Vec<Option<f64>> {
    let (lo, hi) = COVERAGE_RANGE;
    let width = (hi - lo) / COVERAGE_BINS as f64;
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); COVERAGE_BINS];
    for p in points {
        if p[0] >= lo && p[0] < hi {
            let b = (((p[0] - lo) / width) as usize).min(COVERAGE_BINS - 1);
            bins[b].push(p[1]);
        }
    }
    bins.into_iter()
        .map(|mut v| {
            if v.len() < MIN_BIN_COUNT {
                return None;
            }
            v.sort_by(f64::total_cmp);
            Some(quantile(&v, 0.9) - quantile(&v, 0.1))
        })
        .collect()
}

/// Mean over bins of `min(1, generated spread / reference spread)`.
///
/// Bins where the reference set is too thin are skipped; bins where the
/// generated set is too thin count as zero spread.
pub fn branch_coverage(generated: &[[f64; 2]], reference: &[[f64; 2]]) -> Result<f64, EvalError> {
    for (what, set) in [("generated set", generated), ("reference set", reference)] {
        if set.len() < MIN_COVERAGE_SAMPLES {
            return Err(EvalError::TooFewSamples {
                what,
                need: MIN_COVERAGE_SAMPLES,
                got: set.len(),
            });
        }
    }
    let gen = bin_spreads(generated);
    let data = bin_spreads(reference);
    let mut total = 0.0;
    let mut used = 0usize;
    for (g, d) in gen.iter().zip(&data) {
        let Some(d) = *d else { continue };
        used += 1;
        let g = g.unwrap_or(0.0);
        total += if d > 0.0 { (g / d).min(1.0) } else { 1.0 };
    }
    let empty = COVERAGE_BINS - used;
    if empty * 2 > COVERAGE_BINS {
        return Err(EvalError::SparseBins {
            empty,
            bins: COVERAGE_BINS,
        });
    }
    Ok(total / used as f64)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_manifold_distance: f64,
    pub mean_log_density: f64,
    /// Mean squared Euclidean reconstruction error.
    pub recon_mse: f64,
    pub branch_coverage: f64,
    pub sample_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSettings {
    pub density_draws: usize,
    /// Size of both the model sample and the fresh reference sample used for
    /// branch coverage.
    pub coverage_samples: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            density_draws: MIN_DENSITY_DRAWS,
            coverage_samples: 20_000,
        }
    }
}

/// Reconstructions `R(μ_e(x))` of the test set, with ξ = 0 for a generator.
pub fn reconstruct(
    encoder: &MlpModel,
    source: Reconstructor<'_>,
    test: &[ToySample],
) -> Result<Vec<[f64; 2]>, EvalError> {
    if encoder.role != Role::Encoder {
        return Err(EvalError::Model(format!(
            "expected an encoder, got {}",
            encoder.role.name()
        )));
    }
    let mu = encoder.predict(&samples_to_tensor(test))?;
    Ok(tensor_to_points(&source.apply(&mu, None)?))
}

/// Scores reconstructions of `test` and samples drawn from the model.
///
/// Randomness is consumed in a fixed order: density draws, the coverage
/// reference set, then the model sample.
pub fn recon_eval(
    encoder: &MlpModel,
    source: Reconstructor<'_>,
    test: &[ToySample],
    settings: &EvalSettings,
    rng: &mut impl Rng,
) -> Result<EvalReport, EvalError> {
    let recon = reconstruct(encoder, source, test)?;
    let oracle = DensityOracle::new(settings.density_draws, rng)?;
    let reference: Vec<[f64; 2]> = generate_toy_batch(settings.coverage_samples, rng)
        .iter()
        .map(|s| s.x)
        .collect();
    let dim_z = encoder.output_dim();
    let generated = sample_model(source, dim_z, settings.coverage_samples, rng)?;
    let n = test.len() as f64;
    let mean_manifold_distance = recon.iter().map(|&p| manifold_distance(p)).sum::<f64>() / n;
    let recon_mse = recon
        .iter()
        .zip(test)
        .map(|(r, s)| (r[0] - s.x[0]).powi(2) + (r[1] - s.x[1]).powi(2))
        .sum::<f64>()
        / n;
    Ok(EvalReport {
        mean_manifold_distance,
        mean_log_density: oracle.mean_log_density(&recon),
        recon_mse,
        branch_coverage: branch_coverage(&generated, &reference)?,
        sample_count: test.len(),
    })
}

/// Seeded wrapper around [`recon_eval`].
pub fn recon_eval_seeded(
    encoder: &MlpModel,
    source: Reconstructor<'_>,
    test: &[ToySample],
    settings: &EvalSettings,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    recon_eval(encoder, source, test, settings, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Convenience for plotting and tests.
pub fn points_tensor(points: &[[f64; 2]]) -> Tensor {
    points_to_tensor(points.iter().copied())
}
