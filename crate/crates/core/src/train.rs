//! The AVAE training step and run loop.
//!
//! One step does a single forward pass over all four networks and then three
//! restricted backward sweeps: `L_VAE` into the encoder and decoder, `L_G`
//! into the generator, `L_C` into the critic. `L_G` flows through the encoder
//! and critic graphs but only the generator is updated from it.
//!
//! Randomness: model initialisation uses stream 0 of the seed, training uses
//! stream 1. Each step draws, in order: the data batch, the
//! reparameterisation noise `ε`, the prior codes `z_fake`, then `ξ`. A plain
//! VAE run draws only the first two.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{Mode, TrainConfig};
use crate::error::TensorError;
use crate::loss::{self, LossBundle};
use crate::model::{self, GeneratorInput, MlpModel, MlpSpec, Role};
use crate::optim::{adam_update, OptimizerState};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::toy::DataSource;

pub const INIT_STREAM: u64 = 0;
pub const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at iteration {iteration}: {losses:?}")]
    NonFinite { iteration: u64, losses: LossBundle },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub encoder: MlpModel,
    pub decoder: MlpModel,
    pub generator: MlpModel,
    pub critic: MlpModel,
}

impl Models {
    /// Two hidden layers of `hidden_width` for every network, initialised in
    /// the order encoder, decoder, generator, critic.
    pub fn init(cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Self, TensorError> {
        let spec = |input, output| MlpSpec {
            input,
            hidden: vec![cfg.hidden_width; 2],
            output,
            hidden_activation: cfg.hidden_activation.activation(),
            init_std: cfg.init_std,
        };
        Ok(Self {
            encoder: MlpModel::new(Role::Encoder, &spec(cfg.dim_x, cfg.dim_z), rng)?,
            decoder: MlpModel::new(Role::Decoder, &spec(cfg.dim_z, cfg.dim_x), rng)?,
            generator: MlpModel::new(Role::Generator, &spec(cfg.generator_input(), cfg.dim_x), rng)?,
            critic: MlpModel::new(Role::Critic, &spec(cfg.dim_x, 1), rng)?,
        })
    }

    pub fn get(&self, role: Role) -> &MlpModel {
        match role {
            Role::Encoder => &self.encoder,
            Role::Decoder => &self.decoder,
            Role::Generator => &self.generator,
            Role::Critic => &self.critic,
        }
    }

    pub fn get_mut(&mut self, role: Role) -> &mut MlpModel {
        match role {
            Role::Encoder => &mut self.encoder,
            Role::Decoder => &mut self.decoder,
            Role::Generator => &mut self.generator,
            Role::Critic => &mut self.critic,
        }
    }
}

/// Adam state for each of the four parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerStates {
    pub encoder: OptimizerState,
    pub decoder: OptimizerState,
    pub generator: OptimizerState,
    pub critic: OptimizerState,
}

impl OptimizerStates {
    pub fn new(models: &Models) -> Self {
        Self {
            encoder: OptimizerState::for_params(models.encoder.params()),
            decoder: OptimizerState::for_params(models.decoder.params()),
            generator: OptimizerState::for_params(models.generator.params()),
            critic: OptimizerState::for_params(models.critic.params()),
        }
    }

    pub fn get(&self, role: Role) -> &OptimizerState {
        match role {
            Role::Encoder => &self.encoder,
            Role::Decoder => &self.decoder,
            Role::Generator => &self.generator,
            Role::Critic => &self.critic,
        }
    }

    pub fn get_mut(&mut self, role: Role) -> &mut OptimizerState {
        match role {
            Role::Encoder => &mut self.encoder,
            Role::Decoder => &mut self.decoder,
            Role::Generator => &mut self.generator,
            Role::Critic => &mut self.critic,
        }
    }
}

/// Multipliers applied to each objective before differentiation. All ones
/// in normal training; zeroing one isolates the groups it drives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub vae: f64,
    pub generator: f64,
    pub critic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vae: 1.0,
            generator: 1.0,
            critic: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the step that produced this record.
    pub iteration: u64,
    pub losses: LossBundle,
    pub wall_time: f64,
}

fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

fn group_grads(grads: &Gradients, vars: &[Var], params: &[&Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

fn apply(
    model: &mut MlpModel,
    state: &mut OptimizerState,
    grads: &[Tensor],
    cfg: &TrainConfig,
) -> Result<(), TensorError> {
    let refs: Vec<&Tensor> = grads.iter().collect();
    adam_update(&mut model.params_mut(), &refs, state, &cfg.adam())
}

/// One training step on the batch `x_real`.
///
/// Draws `ε`, then (AVAE only) `z_fake` and `ξ` from `rng`. Parameters are
/// left untouched when any loss is non-finite.
pub fn train_step(
    models: &mut Models,
    states: &mut OptimizerStates,
    x_real: &Tensor,
    rng: &mut impl Rng,
    cfg: &TrainConfig,
    weights: LossWeights,
) -> Result<LossBundle, TrainError> {
    let (batch, dim_x) = x_real.dims2()?;
    if dim_x != cfg.dim_x {
        return Err(TensorError::Shape(format!("batch has {dim_x} columns, config says {}", cfg.dim_x)).into());
    }
    let adversarial = cfg.mode == Mode::Avae;
    let eps = normal_tensor(rng, batch, cfg.dim_z);
    let noise = adversarial.then(|| {
        let z_fake = normal_tensor(rng, batch, cfg.dim_z);
        let xi = cfg.use_xi.then(|| normal_tensor(rng, batch, cfg.dim_xi));
        (z_fake, xi)
    });

    let mut tape = Tape::new();
    let enc = models.encoder.bind(&mut tape);
    let dec = models.decoder.bind(&mut tape);
    let x = tape.constant(x_real.clone());
    let encoded = model::encoder_forward(&mut tape, &enc, x)?;
    let eps = tape.constant(eps);
    let z = model::reparameterize(&mut tape, &encoded, eps)?;
    let x_rec = model::decoder_forward(&mut tape, &dec, z)?;
    let vae = loss::vae_loss(&mut tape, x, &encoded, x_rec, cfg.beta_kl)?;
    let mut bundle = LossBundle {
        l_vae: tape.item(vae.total)?,
        l_recon: tape.item(vae.recon)?,
        l_kl: tape.item(vae.kl)?,
        l_g: 0.0,
        l_z: 0.0,
        l_m: 0.0,
        l_c: 0.0,
        variant: cfg.loss_variant,
        beta: cfg.beta_kl,
    };

    let vae_obj = tape.scale(vae.total, weights.vae)?;
    let vae_vars: Vec<Var> = enc.vars().into_iter().chain(dec.vars()).collect();

    let mut adv = None;
    if let Some((z_fake, xi)) = noise {
        let gen = models.generator.bind(&mut tape);
        let critic = models.critic.bind(&mut tape);
        let z_fake = tape.constant(z_fake);
        let xi = xi.map(|t| tape.constant(t));
        let x_fake = model::generator_forward(&mut tape, &gen, &GeneratorInput { z: z_fake, xi })?;
        let fake_enc = model::encoder_forward(&mut tape, &enc, x_fake)?;
        let sigma = encoded.sigma(&mut tape)?;
        let l_z = loss::latent_loss(&mut tape, cfg.loss_variant, fake_enc.mu, z_fake, sigma)?;
        let c_fake = model::critic_forward(&mut tape, &critic, x_fake)?;
        let c_real = model::critic_forward(&mut tape, &critic, x)?;
        let l_m = loss::manifold_loss(&mut tape, c_fake.logit)?;
        let l_g = loss::generator_loss(&mut tape, l_z, l_m, cfg.lz_weight)?;
        // Only the critic is updated from L_C, so the fake branch needs no detach.
        let l_c = loss::critic_loss(&mut tape, c_real.logit, c_fake.logit)?;
        bundle.l_z = tape.item(l_z)?;
        bundle.l_m = tape.item(l_m)?;
        bundle.l_g = tape.item(l_g)?;
        bundle.l_c = tape.item(l_c)?;
        let g_obj = tape.scale(l_g, weights.generator)?;
        let c_obj = tape.scale(l_c, weights.critic)?;
        adv = Some((g_obj, gen.vars(), c_obj, critic.vars()));
    }

    if !bundle.is_finite() {
        return Err(TrainError::NonFinite {
            iteration: states.encoder.step + 1,
            losses: bundle,
        });
    }

    let g_vae = tape.backward_wrt(vae_obj, &vae_vars)?;
    let n_enc = models.encoder.params().len();
    let enc_grads = group_grads(&g_vae, &vae_vars[..n_enc], &models.encoder.params());
    let dec_grads = group_grads(&g_vae, &vae_vars[n_enc..], &models.decoder.params());
    let adv_grads = match adv {
        Some((g_obj, g_vars, c_obj, c_vars)) => {
            let g = tape.backward_wrt(g_obj, &g_vars)?;
            let c = tape.backward_wrt(c_obj, &c_vars)?;
            Some((
                group_grads(&g, &g_vars, &models.generator.params()),
                group_grads(&c, &c_vars, &models.critic.params()),
            ))
        }
        None => None,
    };
    drop(enc);
    drop(dec);
    drop(tape);

    apply(&mut models.encoder, &mut states.encoder, &enc_grads, cfg)?;
    apply(&mut models.decoder, &mut states.decoder, &dec_grads, cfg)?;
    if let Some((gen_grads, critic_grads)) = adv_grads {
        apply(&mut models.generator, &mut states.generator, &gen_grads, cfg)?;
        apply(&mut models.critic, &mut states.critic, &critic_grads, cfg)?;
    }
    Ok(bundle)
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub models: Models,
    pub states: OptimizerStates,
    pub rng: ChaCha8Rng,
    /// Steps completed so far.
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        init.set_stream(INIT_STREAM);
        let models = Models::init(&config, &mut init)?;
        let states = OptimizerStates::new(&models);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            config,
            models,
            states,
            rng,
            iteration: 0,
        })
    }

    pub fn step(&mut self, data: &mut dyn DataSource) -> Result<StepRecord, TrainError> {
        self.step_weighted(data, LossWeights::default())
    }

    pub fn step_weighted(&mut self, data: &mut dyn DataSource, weights: LossWeights) -> Result<StepRecord, TrainError> {
        let start = Instant::now();
        let x = data.batch(self.config.batch_size, &mut self.rng);
        let losses = train_step(
            &mut self.models,
            &mut self.states,
            &x,
            &mut self.rng,
            &self.config,
            weights,
        )
        .map_err(|e| match e {
            TrainError::NonFinite { losses, .. } => TrainError::NonFinite {
                iteration: self.iteration + 1,
                losses,
            },
            other => other,
        })?;
        self.iteration += 1;
        Ok(StepRecord {
            iteration: self.iteration,
            losses,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

/// Where a run writes checkpoints.
#[derive(Clone, Debug)]
pub struct CheckpointPlan {
    pub dir: PathBuf,
}

impl CheckpointPlan {
    pub fn periodic_path(&self, iteration: u64) -> PathBuf {
        self.dir.join(format!("ckpt_{iteration:08}.avae"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.avae")
    }

    /// Written when a run aborts: the state before the failing step.
    pub fn last_good_path(&self) -> PathBuf {
        self.dir.join("last_good.avae")
    }
}

pub struct RunOutput {
    pub trainer: Trainer,
    pub log: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs `trainer` until it has completed `config.iterations` steps.
///
/// With a plan, a checkpoint is written every `checkpoint_every` steps
/// (when non-zero) and at the end. On a non-finite loss the pre-step state is
/// saved as `last_good.avae` and the error returned.
pub fn continue_run(
    mut trainer: Trainer,
    data: &mut dyn DataSource,
    plan: Option<&CheckpointPlan>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<RunOutput, TrainError> {
    let mut log = Vec::with_capacity(trainer.config.iterations.saturating_sub(trainer.iteration) as usize);
    let mut checkpoints = Vec::new();
    while trainer.iteration < trainer.config.iterations {
        let record = match trainer.step(data) {
            Ok(r) => r,
            Err(e) => {
                // A failed step never reaches the parameter updates.
                if let Some(plan) = plan {
                    checkpoint::save(&trainer, &plan.last_good_path())?;
                }
                return Err(e);
            }
        };
        on_step(&record);
        log.push(record);
        if let Some(plan) = plan {
            let every = trainer.config.checkpoint_every;
            if every > 0 && trainer.iteration.is_multiple_of(every) {
                let path = plan.periodic_path(trainer.iteration);
                checkpoint::save(&trainer, &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(plan) = plan {
        let path = plan.final_path();
        checkpoint::save(&trainer, &path)?;
        checkpoints.push(path);
    }
    Ok(RunOutput {
        trainer,
        log,
        checkpoints,
    })
}

/// A fresh run from `config`.
pub fn train_run(
    config: &TrainConfig,
    data: &mut dyn DataSource,
    checkpoint_dir: Option<&Path>,
) -> Result<RunOutput, TrainError> {
    let plan = checkpoint_dir.map(|d| CheckpointPlan { dir: d.to_path_buf() });
    continue_run(Trainer::new(config.clone())?, data, plan.as_ref(), |_| {})
}
