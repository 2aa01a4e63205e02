//! Training objectives.
//!
//! Every loss is a batch mean, so β and the learning rate do not depend on the
//! batch size. Latent-space losses average over latent dimensions as well.
//!
//! The critic follows the convention of the framework: it is trained toward 1
//! on generated samples and toward 0 on real samples, so its logit estimates
//! `log(p_generated / p_data)` and the manifold loss is simply its mean.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};
use crate::model::{EncoderOutput, MlpModel};
use crate::special::{self, log_sum_exp};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Upper bound applied to σ² inside the corrected latent loss, where
/// `√(1 − σ²)` would otherwise be undefined.
pub const SIGMA_SQ_CLAMP: f64 = 1.0 - 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LatentVariant {
    /// `½‖(μ_e(x) − z)/σ‖²`
    A,
    /// `½‖(μ_e(x) − √(1−σ²)·z)/σ‖²`
    B,
}

impl LatentVariant {
    pub fn name(self) -> &'static str {
        match self {
            LatentVariant::A => "a",
            LatentVariant::B => "b",
        }
    }
}

/// Scalar values of every objective at one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub l_vae: f64,
    pub l_recon: f64,
    pub l_kl: f64,
    pub l_g: f64,
    pub l_z: f64,
    pub l_m: f64,
    pub l_c: f64,
    pub variant: LatentVariant,
    pub beta: f64,
}

impl LossBundle {
    pub fn values(&self) -> [f64; 7] {
        [
            self.l_vae,
            self.l_recon,
            self.l_kl,
            self.l_g,
            self.l_z,
            self.l_m,
            self.l_c,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

fn check_positive(op: &'static str, tape: &Tape, sigma: Var) -> Result<()> {
    match tape.value(sigma).data().iter().find(|&&s| s <= 0.0) {
        Some(s) => Err(TensorError::Domain {
            op,
            detail: format!("sigma must be positive, got {s}"),
        }),
        None => Ok(()),
    }
}

fn batch_rows(tape: &Tape, v: Var) -> Result<usize> {
    Ok(tape.value(v).dims2()?.0)
}

/// `½ Σ_j (σ_j² + μ_j² − 1 − log σ_j²)`, averaged over the batch.
pub fn kl_term(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    check_positive("kl_term", tape, sigma)?;
    let batch = batch_rows(tape, mu)? as f64;
    let mu_sq = tape.square(mu)?;
    let mu_part = tape.sum(mu_sq)?;
    let mu_part = tape.scale(mu_part, 0.5 / batch)?;
    let var = tape.square(sigma)?;
    let log_var = tape.log(var)?;
    let spread = tape.sub(var, log_var)?;
    let spread = tape.offset(spread, -1.0)?;
    let spread = tape.sum(spread)?;
    let spread = tape.scale(spread, 0.5)?;
    tape.add(mu_part, spread)
}

/// `½‖μ_d(z) − x‖²`, averaged over the batch.
pub fn recon_mse(tape: &mut Tape, mu_x: Var, x: Var) -> Result<Var> {
    if tape.shape(mu_x) != tape.shape(x) {
        return Err(TensorError::Shape(format!(
            "reconstruction {:?} vs data {:?}",
            tape.shape(mu_x),
            tape.shape(x)
        )));
    }
    let batch = batch_rows(tape, x)? as f64;
    let diff = tape.sub(mu_x, x)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 0.5 / batch)
}

#[derive(Clone, Copy, Debug)]
pub struct VaeTerms {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// `recon_mse + β·kl_term`.
pub fn vae_loss(tape: &mut Tape, x: Var, encoded: &EncoderOutput, decoded: Var, beta: f64) -> Result<VaeTerms> {
    let recon = recon_mse(tape, decoded, x)?;
    let sigma = encoded.sigma(tape)?;
    let kl = kl_term(tape, encoded.mu, sigma)?;
    let weighted = tape.scale(kl, beta)?;
    let total = tape.add(recon, weighted)?;
    Ok(VaeTerms { total, recon, kl })
}

/// `−E_real[log(1 − C)] − E_fake[log C]`, from logits via softplus.
pub fn critic_loss(tape: &mut Tape, logit_real: Var, logit_fake: Var) -> Result<Var> {
    let real = tape.softplus(logit_real)?;
    let real = tape.mean(real)?;
    let neg_fake = tape.neg(logit_fake)?;
    let fake = tape.softplus(neg_fake)?;
    let fake = tape.mean(fake)?;
    tape.add(real, fake)
}

/// Mean critic logit on generated samples.
pub fn manifold_loss(tape: &mut Tape, logit_fake: Var) -> Result<Var> {
    tape.mean(logit_fake)
}

fn whitened_half_square(tape: &mut Tape, mu: Var, target: Var, sigma: Var) -> Result<Var> {
    if tape.shape(mu) != tape.shape(target) {
        return Err(TensorError::Shape(format!(
            "latent mean {:?} vs target {:?}",
            tape.shape(mu),
            tape.shape(target)
        )));
    }
    let diff = tape.sub(mu, target)?;
    let scaled = tape.div(diff, sigma)?;
    let sq = tape.square(scaled)?;
    let m = tape.mean(sq)?;
    tape.scale(m, 0.5)
}

/// `½‖(μ_e(x_fake) − z)/σ‖²`.
pub fn latent_loss_a(tape: &mut Tape, mu_fake: Var, z_target: Var, sigma: Var) -> Result<Var> {
    check_positive("latent_loss_a", tape, sigma)?;
    whitened_half_square(tape, mu_fake, z_target, sigma)
}

/// `½‖(μ_e(x_fake) − √(1−σ²)·z)/σ‖²` with σ² clamped to [`SIGMA_SQ_CLAMP`].
pub fn latent_loss_b(tape: &mut Tape, mu_fake: Var, z_target: Var, sigma: Var) -> Result<Var> {
    check_positive("latent_loss_b", tape, sigma)?;
    let var = tape.square(sigma)?;
    let var = tape.clamp_max(var, SIGMA_SQ_CLAMP)?;
    let one_minus = tape.neg(var)?;
    let one_minus = tape.offset(one_minus, 1.0)?;
    let coef = tape.sqrt(one_minus)?;
    let target = tape.mul(z_target, coef)?;
    whitened_half_square(tape, mu_fake, target, sigma)
}

pub fn latent_loss(tape: &mut Tape, variant: LatentVariant, mu_fake: Var, z_target: Var, sigma: Var) -> Result<Var> {
    match variant {
        LatentVariant::A => latent_loss_a(tape, mu_fake, z_target, sigma),
        LatentVariant::B => latent_loss_b(tape, mu_fake, z_target, sigma),
    }
}

/// `w·L_Z + L_M`; the framework uses `w = 1`.
pub fn generator_loss(tape: &mut Tape, l_z: Var, l_m: Var, lz_weight: f64) -> Result<Var> {
    let weighted = tape.scale(l_z, lz_weight)?;
    tape.add(weighted, l_m)
}

/// Optimal MSE reconstruction of a binary edge at pixel position `x` when
/// the edge position is known only up to `N(z, σ²)`: `½(1 + erf((x − z)/(√2σ)))`.
pub fn frontier_expected_pixel(x: f64, z: f64, sigma: f64) -> Result<f64> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(TensorError::Domain {
            op: "frontier_expected_pixel",
            detail: format!("sigma must be positive, got {sigma}"),
        });
    }
    Ok(0.5 * (1.0 + special::erf((x - z) / (std::f64::consts::SQRT_2 * sigma))))
}

/// Split of the mean KL term into mutual information and the divergence of
/// the aggregate posterior from the prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlDecomposition {
    pub mutual_info: f64,
    pub marginal_kl: f64,
    /// Closed-form mean of the per-sample KL over the set.
    pub mean_kl: f64,
}

/// Monte-Carlo estimate of `E[KL(q(z|x)‖p(z))] = I(x; z) + KL(q(z)‖p(z))`
/// where `q(z)` is the empirical aggregate posterior over `samples`: the
/// uniform mixture of every sample's diagonal Gaussian posterior.
///
/// `mc_draws` latent codes are drawn from each sample's posterior. Diagnostic
/// only; the cost is quadratic in the number of samples.
pub fn kl_decomposition_estimate(
    encoder: &MlpModel,
    samples: &Tensor,
    mc_draws: usize,
    rng: &mut impl Rng,
) -> Result<KlDecomposition> {
    let (n, _) = samples.dims2()?;
    if n == 0 {
        return Err(TensorError::Shape("empty sample set".into()));
    }
    if mc_draws == 0 {
        return Err(TensorError::Domain {
            op: "kl_decomposition_estimate",
            detail: "need at least one draw".into(),
        });
    }
    let mu = encoder.predict(samples)?;
    let sigma = encoder
        .sigma()
        .ok_or_else(|| TensorError::Shape("model is not an encoder".into()))?;
    let d = sigma.len();
    let log_norm: f64 = sigma
        .iter()
        .map(|s| -s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
        .sum();
    let log_posterior = |z: &[f64], center: &[f64]| -> f64 {
        let quad: f64 = (0..d)
            .map(|j| {
                let u = (z[j] - center[j]) / sigma[j];
                u * u
            })
            .sum();
        log_norm - 0.5 * quad
    };
    let log_prior = |z: &[f64]| -> f64 { z.iter().map(|&v| special::normal_log_pdf(v, 0.0, 1.0)).sum() };

    let mut mi = 0.0;
    let mut marginal = 0.0;
    let mut z = vec![0.0; d];
    let mut comps = vec![0.0; n];
    for i in 0..n {
        let center = mu.row(i);
        for _ in 0..mc_draws {
            for j in 0..d {
                let e: f64 = StandardNormal.sample(rng);
                z[j] = center[j] + sigma[j] * e;
            }
            for (k, c) in comps.iter_mut().enumerate() {
                *c = log_posterior(&z, mu.row(k));
            }
            let log_aggregate = log_sum_exp(&comps) - (n as f64).ln();
            let log_cond = log_posterior(&z, center);
            mi += log_cond - log_aggregate;
            marginal += log_aggregate - log_prior(&z);
        }
    }
    let draws = (n * mc_draws) as f64;

    let spread: f64 = sigma.iter().map(|s| s * s - 1.0 - (s * s).ln()).sum();
    let mu_sq: f64 = mu.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
    Ok(KlDecomposition {
        mutual_info: mi / draws,
        marginal_kl: marginal / draws,
        mean_kl: 0.5 * (spread + mu_sq),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, MlpSpec, Role};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn kl_reference_values() {
        let mut t = Tape::new();
        let mu = t.constant(m(&[vec![0.0], vec![0.0]]));
        let s = t.constant(v(&[1.0]));
        let k = kl_term(&mut t, mu, s).unwrap();
        assert_eq!(t.item(k).unwrap(), 0.0);

        let mu = t.constant(m(&[vec![1.0]]));
        let k = kl_term(&mut t, mu, s).unwrap();
        assert!((t.item(k).unwrap() - 0.5).abs() < 1e-15);

        let bad = t.constant(v(&[0.0]));
        assert!(matches!(kl_term(&mut t, mu, bad), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut t = Tape::new();
            let mu = t.constant(m(&[vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]]));
            let s = t.constant(v(&[rng.random_range(0.05..3.0), rng.random_range(0.05..3.0)]));
            let k = kl_term(&mut t, mu, s).unwrap();
            assert!(t.item(k).unwrap() >= 0.0);
        }
    }

    #[test]
    fn recon_reference_values() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![1.0, 2.0], vec![-1.0, 0.5]]));
        let r = recon_mse(&mut t, x, x).unwrap();
        assert_eq!(t.item(r).unwrap(), 0.0);
        let shifted = t.constant(m(&[vec![2.0, 2.0], vec![0.0, 0.5]]));
        let r = recon_mse(&mut t, shifted, x).unwrap();
        assert_eq!(t.item(r).unwrap(), 0.5);
        let narrow = t.constant(m(&[vec![1.0], vec![2.0]]));
        assert!(recon_mse(&mut t, narrow, x).is_err());
    }

    #[test]
    fn recon_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut oracle = 0.0;
        for i in 0..10 {
            let mut row = 0.0;
            for j in 0..3 {
                let d = a[i * 3 + j] - b[i * 3 + j];
                row += d * d;
            }
            oracle += 0.5 * row;
        }
        oracle /= 10.0;
        let mut t = Tape::new();
        let va = t.constant(Tensor::matrix(10, 3, a).unwrap());
        let vb = t.constant(Tensor::matrix(10, 3, b).unwrap());
        let r = recon_mse(&mut t, va, vb).unwrap();
        assert!((t.item(r).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn vae_loss_beta_behaviour() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![1.0, 2.0]]));
        let mu0 = t.constant(m(&[vec![0.0]]));
        let lv0 = t.constant(v(&[0.0]));
        let enc = EncoderOutput { mu: mu0, log_var: lv0 };
        let perfect = vae_loss(&mut t, x, &enc, x, 1.0).unwrap();
        assert_eq!(t.item(perfect.total).unwrap(), 0.0);

        let mu = t.constant(m(&[vec![0.7]]));
        let lv = t.constant(v(&[-0.4]));
        let enc = EncoderOutput { mu, log_var: lv };
        let dec = t.constant(m(&[vec![0.2, 1.1]]));
        let b0 = vae_loss(&mut t, x, &enc, dec, 0.0).unwrap();
        assert_eq!(t.item(b0.total).unwrap(), t.item(b0.recon).unwrap());
        let b1 = vae_loss(&mut t, x, &enc, dec, 1.0).unwrap();
        let b2 = vae_loss(&mut t, x, &enc, dec, 2.0).unwrap();
        let recon = t.item(b1.recon).unwrap();
        let d1 = t.item(b1.total).unwrap() - recon;
        let d2 = t.item(b2.total).unwrap() - recon;
        assert!((d2 - 2.0 * d1).abs() < 1e-14);
    }

    #[test]
    fn critic_loss_reference_values() {
        let mut t = Tape::new();
        let zero = t.constant(Tensor::zeros(&[4, 1]));
        let l = critic_loss(&mut t, zero, zero).unwrap();
        assert!((t.item(l).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);

        let real = t.constant(Tensor::filled(&[3, 1], -500.0));
        let fake = t.constant(Tensor::filled(&[3, 1], 500.0));
        let l = critic_loss(&mut t, real, fake).unwrap();
        assert!(t.item(l).unwrap() < 1e-200);

        // Reversed labels must be expensive, and must not overflow.
        let l = critic_loss(&mut t, fake, real).unwrap();
        assert!((t.item(l).unwrap() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn critic_gradient_pushes_fake_up_and_real_down() {
        let mut t = Tape::new();
        let real = t.param(m(&[vec![0.3], vec![-0.2]]));
        let fake = t.param(m(&[vec![0.1], vec![0.4]]));
        let l = critic_loss(&mut t, real, fake).unwrap();
        let g = t.backward(l).unwrap();
        // Descent moves against the gradient.
        assert!(g.get(real).unwrap().data().iter().all(|&d| d > 0.0));
        assert!(g.get(fake).unwrap().data().iter().all(|&d| d < 0.0));
    }

    #[test]
    fn manifold_loss_is_mean_logit() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[1, 1]));
        let l = manifold_loss(&mut t, z).unwrap();
        assert_eq!(t.item(l).unwrap(), 0.0);
        let pm = t.constant(m(&[vec![1.0], vec![-1.0]]));
        let l = manifold_loss(&mut t, pm).unwrap();
        assert_eq!(t.item(l).unwrap(), 0.0);
    }

    #[test]
    fn manifold_loss_at_optimal_critic_is_log_ratio() {
        // p = N(0,1), p_g = N(1,1): log N(x;1,1) − log N(x;0,1) = x − ½.
        let xs = [-1.3, -0.2, 0.0, 0.5, 2.4];
        for &x in &xs {
            let oracle = special::normal_log_pdf(x, 1.0, 1.0) - special::normal_log_pdf(x, 0.0, 1.0);
            let mut t = Tape::new();
            let logit = t.constant(m(&[vec![oracle]]));
            let l = manifold_loss(&mut t, logit).unwrap();
            assert!((t.item(l).unwrap() - (x - 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn latent_loss_a_reference_values() {
        let mut t = Tape::new();
        let z = t.constant(m(&[vec![0.3], vec![-1.2]]));
        let s1 = t.constant(v(&[1.0]));
        let l = latent_loss_a(&mut t, z, z, s1).unwrap();
        assert_eq!(t.item(l).unwrap(), 0.0);

        let mu = t.constant(m(&[vec![1.0]]));
        let zt = t.constant(m(&[vec![0.0]]));
        let l1 = latent_loss_a(&mut t, mu, zt, s1).unwrap();
        assert_eq!(t.item(l1).unwrap(), 0.5);
        let half = t.constant(v(&[0.5]));
        let l2 = latent_loss_a(&mut t, mu, zt, half).unwrap();
        assert_eq!(t.item(l2).unwrap(), 4.0 * 0.5);

        let neg = t.constant(v(&[-0.1]));
        assert!(latent_loss_a(&mut t, mu, zt, neg).is_err());
    }

    #[test]
    fn latent_loss_b_reference_values() {
        let mut t = Tape::new();
        let mu = t.constant(m(&[vec![1.0]]));
        let z = t.constant(m(&[vec![2.0]]));
        let s = t.constant(v(&[0.75f64.sqrt()]));
        let l = latent_loss_b(&mut t, mu, z, s).unwrap();
        assert!(t.item(l).unwrap().abs() < 1e-15);

        // σ → 0: coincides with variant a.
        let tiny = t.constant(v(&[1e-9]));
        let mu = t.constant(m(&[vec![1.0 + 1e-9]]));
        let z = t.constant(m(&[vec![1.0]]));
        let a = latent_loss_a(&mut t, mu, z, tiny).unwrap();
        let b = latent_loss_b(&mut t, mu, z, tiny).unwrap();
        let (a, b) = (t.item(a).unwrap(), t.item(b).unwrap());
        assert!((a - b).abs() < 1e-9 * a.max(1.0), "{a} vs {b}");

        // σ ≥ 1 is clamped rather than rejected.
        let big = t.constant(v(&[1.5]));
        let l = latent_loss_b(&mut t, mu, z, big).unwrap();
        assert!(t.item(l).unwrap().is_finite());
    }

    #[test]
    fn latent_loss_b_optimum() {
        let mut t = Tape::new();
        let sigma = 0.6;
        let zs = [1.3, -0.4];
        let c = (1.0f64 - sigma * sigma).sqrt();
        let mu = t.constant(m(&[vec![c * zs[0]], vec![c * zs[1]]]));
        let z = t.constant(m(&[vec![zs[0]], vec![zs[1]]]));
        let s = t.constant(v(&[sigma]));
        let l = latent_loss_b(&mut t, mu, z, s).unwrap();
        assert!(t.item(l).unwrap().abs() < 1e-15);
    }

    #[test]
    fn latent_b_approaches_a_as_sigma_shrinks() {
        let mut prev = f64::INFINITY;
        for k in 1..8 {
            let sigma = 10f64.powi(-k);
            let mut t = Tape::new();
            let mu = t.constant(m(&[vec![0.8 + sigma]]));
            let z = t.constant(m(&[vec![0.8]]));
            let s = t.constant(v(&[sigma]));
            let a = latent_loss_a(&mut t, mu, z, s).unwrap();
            let b = latent_loss_b(&mut t, mu, z, s).unwrap();
            let gap = (t.item(a).unwrap() - t.item(b).unwrap()).abs() / t.item(a).unwrap();
            assert!(gap <= prev);
            prev = gap;
        }
        // The relative gap shrinks like 0.8σ here.
        assert!(prev < 1e-6);
    }

    #[test]
    fn generator_loss_sums() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(0.5));
        let b = t.param(Tensor::scalar(-0.2));
        let g = generator_loss(&mut t, a, b, 1.0).unwrap();
        assert!((t.item(g).unwrap() - 0.3).abs() < 1e-15);
        let grads = t.backward(g).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0]);
        let z = t.constant(Tensor::scalar(0.0));
        let g0 = generator_loss(&mut t, z, z, 1.0).unwrap();
        assert_eq!(t.item(g0).unwrap(), 0.0);
    }

    #[test]
    fn frontier_values() {
        assert_eq!(frontier_expected_pixel(0.3, 0.3, 0.7).unwrap(), 0.5);
        assert_eq!(frontier_expected_pixel(100.0, 0.0, 1.0).unwrap(), 1.0);
        assert_eq!(frontier_expected_pixel(-100.0, 0.0, 1.0).unwrap(), 0.0);
        assert!(frontier_expected_pixel(0.0, 0.0, 0.0).is_err());
        assert!(frontier_expected_pixel(0.0, 0.0, -1.0).is_err());
    }

    fn encoder(seed: u64) -> MlpModel {
        let spec = MlpSpec {
            input: 2,
            hidden: vec![8, 8],
            output: 1,
            hidden_activation: Activation::Tanh,
            init_std: 0.8,
        };
        MlpModel::new(Role::Encoder, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn kl_decomposition_of_prior_encoder_is_zero() {
        let mut enc = encoder(1);
        for p in enc.params_mut() {
            p.data_mut().fill(0.0);
        }
        let x = Tensor::filled(&[20, 2], 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = kl_decomposition_estimate(&enc, &x, 5, &mut rng).unwrap();
        assert!(d.mutual_info.abs() < 1e-12);
        assert!(d.marginal_kl.abs() < 1e-12);
        assert_eq!(d.mean_kl, 0.0);
    }

    #[test]
    fn kl_decomposition_sums_to_mean_kl() {
        let mut enc = encoder(4);
        enc.log_var.as_mut().unwrap().data_mut()[0] = -1.5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..400).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::matrix(200, 2, data).unwrap();
        let d = kl_decomposition_estimate(&enc, &x, 20, &mut rng).unwrap();
        let sum = d.mutual_info + d.marginal_kl;
        // Each draw's summand is log q(z|x) − log p(z), whose mean is the KL and
        // whose variance is (σ²−1)²/2 + μ²σ² for one latent dimension.
        let sigma2 = (-1.5f64).exp();
        let mu = enc.predict(&x).unwrap();
        let var: f64 = mu
            .data()
            .iter()
            .map(|m| 0.5 * (sigma2 - 1.0).powi(2) + m * m * sigma2)
            .sum::<f64>()
            / 200.0;
        let se = (var / 4000.0).sqrt();
        assert!((sum - d.mean_kl).abs() < 4.0 * se, "{sum} vs {} (se {se})", d.mean_kl);
        assert!(d.mutual_info > -3.0 * se);
        assert!(d.mutual_info <= (200f64).ln() + 1e-9);
    }

    #[test]
    fn kl_decomposition_rejects_empty() {
        let enc = encoder(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(kl_decomposition_estimate(&enc, &Tensor::zeros(&[0, 2]), 3, &mut rng).is_err());
    }
}
