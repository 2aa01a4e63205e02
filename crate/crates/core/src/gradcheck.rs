//! Finite-difference check of every objective against reverse mode.
//!
//! Small networks (two hidden layers of 8, tanh) are built from a seed; each
//! objective is differentiated with respect to every parameter of all four
//! networks and compared with central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::loss;
use crate::model::{self, Activation, GeneratorInput, MlpModel, MlpSpec, Role};
use crate::tape::{FaultInjection, Tape, Var};
use crate::tensor::Tensor;
use crate::toy::{generate_toy_batch, samples_to_tensor};
use crate::train::Models;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
const WIDTH: usize = 8;
const BATCH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Vae,
    Kl,
    Recon,
    Critic,
    Manifold,
    LatentA,
    LatentB,
    Generator,
}

impl Objective {
    pub const ALL: [Objective; 8] = [
        Objective::Vae,
        Objective::Kl,
        Objective::Recon,
        Objective::Critic,
        Objective::Manifold,
        Objective::LatentA,
        Objective::LatentB,
        Objective::Generator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Vae => "L_VAE",
            Objective::Kl => "L_KL",
            Objective::Recon => "L_recon",
            Objective::Critic => "L_C",
            Objective::Manifold => "L_M",
            Objective::LatentA => "L_Z^a",
            Objective::LatentB => "L_Z^b",
            Objective::Generator => "L_G",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub objective: Objective,
    pub max_rel_error: f64,
    /// Parameter element with the largest error, e.g. `critic.1.weight[3]`.
    pub worst: String,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub dim_z: usize,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &GradcheckEntry> {
        self.entries
            .iter()
            .filter(|e| e.max_rel_error.is_nan() || e.max_rel_error >= TOLERANCE)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// Fixed inputs of one check.
struct Inputs {
    x: Tensor,
    eps: Tensor,
    z_fake: Tensor,
    xi: Tensor,
}

fn normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_parts(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
    )
}

fn setup(seed: u64) -> Result<(Models, Inputs)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim_z = 1 + (seed % 3) as usize;
    let spec = |input, output| MlpSpec {
        input,
        hidden: vec![WIDTH; 2],
        output,
        hidden_activation: Activation::Tanh,
        init_std: 0.5,
    };
    let mut models = Models {
        encoder: MlpModel::new(Role::Encoder, &spec(2, dim_z), &mut rng)?,
        decoder: MlpModel::new(Role::Decoder, &spec(dim_z, 2), &mut rng)?,
        generator: MlpModel::new(Role::Generator, &spec(dim_z + 1, 2), &mut rng)?,
        critic: MlpModel::new(Role::Critic, &spec(2, 1), &mut rng)?,
    };
    // Random non-zero biases, and σ < 1 so the √(1 − σ²) clamp stays inactive.
    for role in Role::ALL {
        for layer in &mut models.get_mut(role).layers {
            for b in layer.bias.data_mut() {
                *b = rng.random_range(-0.3..0.3);
            }
        }
    }
    if let Some(lv) = models.encoder.log_var.as_mut() {
        for v in lv.data_mut() {
            *v = rng.random_range(-1.5..-0.3);
        }
    }
    let x = samples_to_tensor(&generate_toy_batch(BATCH, &mut rng));
    let inputs = Inputs {
        x,
        eps: normal(&mut rng, BATCH, dim_z),
        z_fake: normal(&mut rng, BATCH, dim_z),
        xi: normal(&mut rng, BATCH, 1),
    };
    Ok((models, inputs))
}

/// Builds `objective` on `tape`; returns the loss and every parameter
/// variable with its name, in encoder, decoder, generator, critic order.
fn build(tape: &mut Tape, models: &Models, inputs: &Inputs, objective: Objective) -> Result<(Var, Vec<(String, Var)>)> {
    let enc = models.encoder.bind(tape);
    let dec = models.decoder.bind(tape);
    let gen = models.generator.bind(tape);
    let critic = models.critic.bind(tape);

    let x = tape.constant(inputs.x.clone());
    let encoded = model::encoder_forward(tape, &enc, x)?;
    let eps = tape.constant(inputs.eps.clone());
    let z = model::reparameterize(tape, &encoded, eps)?;
    let x_rec = model::decoder_forward(tape, &dec, z)?;
    let vae = loss::vae_loss(tape, x, &encoded, x_rec, 1.0)?;

    let z_fake = tape.constant(inputs.z_fake.clone());
    let xi = tape.constant(inputs.xi.clone());
    let x_fake = model::generator_forward(
        tape,
        &gen,
        &GeneratorInput {
            z: z_fake,
            xi: Some(xi),
        },
    )?;
    let fake_enc = model::encoder_forward(tape, &enc, x_fake)?;
    let sigma = encoded.sigma(tape)?;
    let c_fake = model::critic_forward(tape, &critic, x_fake)?;
    let c_real = model::critic_forward(tape, &critic, x)?;

    let out = match objective {
        Objective::Vae => vae.total,
        Objective::Kl => vae.kl,
        Objective::Recon => vae.recon,
        Objective::Critic => loss::critic_loss(tape, c_real.logit, c_fake.logit)?,
        Objective::Manifold => loss::manifold_loss(tape, c_fake.logit)?,
        Objective::LatentA => loss::latent_loss_a(tape, fake_enc.mu, z_fake, sigma)?,
        Objective::LatentB => loss::latent_loss_b(tape, fake_enc.mu, z_fake, sigma)?,
        Objective::Generator => {
            let l_z = loss::latent_loss_b(tape, fake_enc.mu, z_fake, sigma)?;
            let l_m = loss::manifold_loss(tape, c_fake.logit)?;
            loss::generator_loss(tape, l_z, l_m, 1.0)?
        }
    };

    let mut params = Vec::new();
    for bound in [&enc, &dec, &gen, &critic] {
        params.extend(bound.model.param_names().into_iter().zip(bound.vars()));
    }
    Ok((out, params))
}

fn value(models: &Models, inputs: &Inputs, objective: Objective) -> Result<f64> {
    let mut tape = Tape::new();
    let (l, _) = build(&mut tape, models, inputs, objective)?;
    tape.item(l)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn check(
    models: &Models,
    inputs: &Inputs,
    objective: Objective,
    fault: Option<FaultInjection>,
) -> Result<GradcheckEntry> {
    let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let (l, params) = build(&mut tape, models, inputs, objective)?;
    let grads = tape.backward(l)?;
    let analytic: Vec<Tensor> = params
        .iter()
        .map(|&(_, v)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();
    drop(tape);

    let mut worst = (0.0, String::new());
    let mut checked = 0;
    let mut k = 0;
    let mut probe = models.clone();
    for role in Role::ALL {
        let count = models.get(role).params().len();
        for p in 0..count {
            let (name, _) = &params[k];
            for j in 0..analytic[k].len() {
                let original = models.get(role).params()[p].data()[j];
                probe.get_mut(role).params_mut()[p].data_mut()[j] = original + STEP;
                let up = value(&probe, inputs, objective)?;
                probe.get_mut(role).params_mut()[p].data_mut()[j] = original - STEP;
                let down = value(&probe, inputs, objective)?;
                probe.get_mut(role).params_mut()[p].data_mut()[j] = original;
                let numeric = (up - down) / (2.0 * STEP);
                let err = relative_error(analytic[k].data()[j], numeric);
                checked += 1;
                if err.is_nan() || err > worst.0 {
                    worst = (err, format!("{name}[{j}]"));
                }
            }
            k += 1;
        }
    }
    Ok(GradcheckEntry {
        objective,
        max_rel_error: worst.0,
        worst: worst.1,
        checked,
    })
}

/// Runs every objective for one seed. The seed also picks the latent width
/// (1 to 3). `fault` corrupts one derivative rule in the reverse pass only.
pub fn run_gradcheck(seed: u64, fault: Option<FaultInjection>) -> Result<GradcheckReport> {
    let (models, inputs) = setup(seed)?;
    let entries = Objective::ALL
        .iter()
        .map(|&o| check(&models, &inputs, o, fault))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        seed,
        dim_z: models.encoder.output_dim(),
        entries,
    })
}
