//! The four network roles of the AVAE as multilayer perceptrons.
//!
//! Parameters live in plain [`MlpModel`] values. For each step a model is
//! bound onto a [`Tape`], which yields a [`BoundModel`] whose variables can be
//! differentiated and then mapped back to the owning parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Encoder,
    Decoder,
    Generator,
    Critic,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::Decoder => "decoder",
            Role::Generator => "generator",
            Role::Critic => "critic",
        }
    }

    pub const ALL: [Role; 4] = [Role::Encoder, Role::Decoder, Role::Generator, Role::Critic];
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Tanh,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => tape.tanh(x),
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[in × out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
}

/// A stack of affine layers. The encoder additionally owns a log-variance
/// vector shared by every input.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub role: Role,
    pub layers: Vec<Layer>,
    pub log_var: Option<Tensor>,
}

/// Layer widths and activations used to build a model.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub hidden_activation: Activation,
    pub init_std: f64,
}

impl MlpModel {
    /// Weights drawn from `N(0, init_std²)`, zero biases, zero log-variance.
    ///
    /// The output layer is the identity for every role except the critic,
    /// whose output is a sigmoid over a single logit.
    pub fn new(role: Role, spec: &MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        if role == Role::Critic && spec.output != 1 {
            return Err(TensorError::Shape(format!(
                "critic must have one output, got {}",
                spec.output
            )));
        }
        let normal = Normal::new(0.0, spec.init_std).map_err(|e| TensorError::Domain {
            op: "init",
            detail: e.to_string(),
        })?;
        let mut widths = vec![spec.input];
        widths.extend(&spec.hidden);
        widths.push(spec.output);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weight: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                let activation = if i < last {
                    spec.hidden_activation
                } else if role == Role::Critic {
                    Activation::Sigmoid
                } else {
                    Activation::Identity
                };
                Ok(Layer {
                    weight: Tensor::matrix(fan_in, fan_out, weight)?,
                    bias: Tensor::zeros(&[fan_out]),
                    activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let log_var = (role == Role::Encoder).then(|| Tensor::zeros(&[spec.output]));
        Ok(Self { role, layers, log_var })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.shape()[1])
    }

    /// Parameters in a fixed order: per layer weight then bias, then the
    /// encoder log-variance.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        out.extend(self.log_var.as_ref());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        out.extend(self.log_var.as_mut());
        out
    }

    /// Names matching [`MlpModel::params`], e.g. `encoder.1.weight`.
    pub fn param_names(&self) -> Vec<String> {
        let role = self.role.name();
        let mut out: Vec<String> = (0..self.layers.len())
            .flat_map(|i| [format!("{role}.{i}.weight"), format!("{role}.{i}.bias")])
            .collect();
        if self.log_var.is_some() {
            out.push(format!("{role}.log_var"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel<'_> {
        self.bind_with(tape, true)
    }

    /// Registers the parameters as constants (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundModel<'_> {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> BoundModel<'_> {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self.layers.iter().map(|l| (reg(&l.weight), reg(&l.bias))).collect();
        let log_var = self.log_var.as_ref().map(reg);
        BoundModel {
            model: self,
            layers,
            log_var,
        }
    }

    /// Plain forward pass outside any training tape. For the encoder this is
    /// μ; for the critic the sigmoid probability.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = bound.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    /// σ = exp(½·log-var) for an encoder.
    pub fn sigma(&self) -> Option<Vec<f64>> {
        self.log_var
            .as_ref()
            .map(|lv| lv.data().iter().map(|v| (0.5 * v).exp()).collect())
    }
}

/// An [`MlpModel`] whose parameters are registered on a tape.
pub struct BoundModel<'m> {
    pub model: &'m MlpModel,
    layers: Vec<(Var, Var)>,
    log_var: Option<Var>,
}

impl BoundModel<'_> {
    /// Tape variables in the same order as [`MlpModel::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.extend(self.log_var);
        out
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let want = self.model.input_dim();
        match tape.shape(x) {
            [_, w] if *w == want => Ok(()),
            other => Err(TensorError::Shape(format!(
                "{} expects [batch x {want}], got {other:?}",
                self.model.role.name()
            ))),
        }
    }

    /// Output before the final activation.
    pub fn forward_pre_activation(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut h = x;
        let n = self.layers.len();
        for (i, (&(w, b), layer)) in self.layers.iter().zip(&self.model.layers).enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            if i + 1 < n {
                h = layer.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let pre = self.forward_pre_activation(tape, x)?;
        let last = self.model.layers.last().map_or(Activation::Identity, |l| l.activation);
        last.apply(tape, pre)
    }
}

/// Latent Gaussian parameters: μ per sample and a log-variance shared across
/// the batch.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[batch × dim(Z)]`
    pub mu: Var,
    /// `[dim(Z)]`
    pub log_var: Var,
}

impl EncoderOutput {
    /// σ = exp(½·log-var), `[dim(Z)]`.
    pub fn sigma(&self, tape: &mut Tape) -> Result<Var> {
        let half = tape.scale(self.log_var, 0.5)?;
        tape.exp(half)
    }
}

pub struct GeneratorInput {
    pub z: Var,
    pub xi: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct CriticOutput {
    pub prob: Var,
    pub logit: Var,
}

fn expect_role(bound: &BoundModel<'_>, role: Role) -> Result<()> {
    if bound.model.role == role {
        Ok(())
    } else {
        Err(TensorError::Shape(format!(
            "expected a {} model, got {}",
            role.name(),
            bound.model.role.name()
        )))
    }
}

pub fn encoder_forward(tape: &mut Tape, encoder: &BoundModel<'_>, x: Var) -> Result<EncoderOutput> {
    expect_role(encoder, Role::Encoder)?;
    let mu = encoder.forward(tape, x)?;
    let log_var = encoder
        .log_var
        .ok_or_else(|| TensorError::Shape("encoder without log-variance".into()))?;
    Ok(EncoderOutput { mu, log_var })
}

/// `z = μ + ε·σ`, differentiable through both μ and σ.
pub fn reparameterize(tape: &mut Tape, out: &EncoderOutput, eps: Var) -> Result<Var> {
    if tape.shape(eps) != tape.shape(out.mu) {
        return Err(TensorError::Shape(format!(
            "noise shape {:?} differs from mu shape {:?}",
            tape.shape(eps),
            tape.shape(out.mu)
        )));
    }
    let sigma = out.sigma(tape)?;
    let spread = tape.mul(eps, sigma)?;
    tape.add(out.mu, spread)
}

pub fn decoder_forward(tape: &mut Tape, decoder: &BoundModel<'_>, z: Var) -> Result<Var> {
    expect_role(decoder, Role::Decoder)?;
    decoder.forward(tape, z)
}

/// `G(z, ξ)`: the generator sees `[z | ξ]` when ξ is present and `z` alone otherwise.
pub fn generator_forward(tape: &mut Tape, generator: &BoundModel<'_>, input: &GeneratorInput) -> Result<Var> {
    expect_role(generator, Role::Generator)?;
    let joined = match input.xi {
        Some(xi) => tape.concat_cols(input.z, xi)?,
        None => input.z,
    };
    generator.forward(tape, joined)
}

pub fn critic_forward(tape: &mut Tape, critic: &BoundModel<'_>, x: Var) -> Result<CriticOutput> {
    expect_role(critic, Role::Critic)?;
    let logit = critic.forward_pre_activation(tape, x)?;
    let prob = tape.sigmoid(logit)?;
    Ok(CriticOutput { prob, logit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(input: usize, output: usize) -> MlpSpec {
        MlpSpec {
            input,
            hidden: vec![128, 128],
            output,
            hidden_activation: Activation::Tanh,
            init_std: 0.02,
        }
    }

    fn zeroed(mut m: MlpModel) -> MlpModel {
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        m
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn parameter_count_formula() {
        for (d_in, d_out) in [(2, 1), (1, 2), (2, 2), (3, 5)] {
            let m = MlpModel::new(Role::Decoder, &spec(d_in, d_out), &mut rng()).unwrap();
            let want = d_in * 128 + 128 + 128 * 128 + 128 + 128 * d_out + d_out;
            assert_eq!(m.param_count(), want);
        }
        let enc = MlpModel::new(Role::Encoder, &spec(2, 1), &mut rng()).unwrap();
        assert_eq!(enc.param_count(), 2 * 128 + 128 + 128 * 128 + 128 + 128 + 1 + 1);
    }

    #[test]
    fn layer_dimensions_chain() {
        let m = MlpModel::new(Role::Generator, &spec(2, 2), &mut rng()).unwrap();
        for pair in m.layers.windows(2) {
            assert_eq!(pair[0].weight.shape()[1], pair[1].weight.shape()[0]);
        }
        assert_eq!(m.param_names().len(), m.params().len());
    }

    #[test]
    fn critic_ends_in_sigmoid_and_has_one_output() {
        let c = MlpModel::new(Role::Critic, &spec(2, 1), &mut rng()).unwrap();
        assert_eq!(c.layers.last().unwrap().activation, Activation::Sigmoid);
        assert!(MlpModel::new(Role::Critic, &spec(2, 3), &mut rng()).is_err());
    }

    #[test]
    fn zero_encoder_gives_zero_mu_and_unit_sigma() {
        let enc = zeroed(MlpModel::new(Role::Encoder, &spec(2, 1), &mut rng()).unwrap());
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -3.0], vec![5.0, 2.0], vec![0.0, 0.0]]).unwrap());
        let out = encoder_forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(out.mu).shape(), &[3, 1]);
        assert!(tape.value(out.mu).data().iter().all(|&v| v == 0.0));
        let sigma = out.sigma(&mut tape).unwrap();
        assert_eq!(tape.value(sigma).data(), &[1.0]);
    }

    #[test]
    fn encoder_rejects_wrong_width() {
        let enc = MlpModel::new(Role::Encoder, &spec(2, 1), &mut rng()).unwrap();
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        assert!(matches!(
            encoder_forward(&mut tape, &bound, x),
            Err(TensorError::Shape(_))
        ));
    }

    #[test]
    fn reparameterize_limits() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::from_rows(&[vec![0.5], vec![-1.0]]).unwrap());
        let log_var = tape.constant(Tensor::vector(vec![-60.0]).unwrap());
        let out = EncoderOutput { mu, log_var };
        let eps0 = tape.constant(Tensor::zeros(&[2, 1]));
        let z = reparameterize(&mut tape, &out, eps0).unwrap();
        assert_eq!(tape.value(z), tape.value(mu));
        // σ = e^{-30}: z ≈ μ
        let eps = tape.constant(Tensor::from_rows(&[vec![3.0], vec![-2.0]]).unwrap());
        let z = reparameterize(&mut tape, &out, eps).unwrap();
        for (a, b) in tape.value(z).data().iter().zip(tape.value(mu).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(reparameterize(&mut tape, &out, bad).is_err());
    }

    #[test]
    fn decoder_and_round_trip_shapes() {
        let enc = MlpModel::new(Role::Encoder, &spec(2, 1), &mut rng()).unwrap();
        let dec = MlpModel::new(Role::Decoder, &spec(1, 2), &mut rng()).unwrap();
        let mut tape = Tape::new();
        let be = enc.bind(&mut tape);
        let bd = dec.bind(&mut tape);
        let x = tape.constant(Tensor::filled(&[5, 2], 0.3));
        let out = encoder_forward(&mut tape, &be, x).unwrap();
        let y = decoder_forward(&mut tape, &bd, out.mu).unwrap();
        assert_eq!(tape.shape(y), &[5, 2]);

        let zero_dec = zeroed(dec.clone());
        let zero_bound = zero_dec.bind(&mut tape);
        let y0 = decoder_forward(&mut tape, &zero_bound, out.mu).unwrap();
        assert!(tape.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_variants() {
        let det = MlpModel::new(Role::Generator, &spec(1, 2), &mut rng()).unwrap();
        let mut tape = Tape::new();
        let b = det.bind(&mut tape);
        let z = tape.constant(Tensor::from_rows(&[vec![0.7]]).unwrap());
        let a1 = generator_forward(&mut tape, &b, &GeneratorInput { z, xi: None }).unwrap();
        let a2 = generator_forward(&mut tape, &b, &GeneratorInput { z, xi: None }).unwrap();
        assert_eq!(tape.value(a1), tape.value(a2));
        assert_eq!(tape.shape(a1), &[1, 2]);

        let sto = MlpModel::new(Role::Generator, &spec(2, 2), &mut rng()).unwrap();
        let bs = sto.bind(&mut tape);
        let xi1 = tape.constant(Tensor::from_rows(&[vec![-1.0]]).unwrap());
        let xi2 = tape.constant(Tensor::from_rows(&[vec![1.5]]).unwrap());
        let s1 = generator_forward(&mut tape, &bs, &GeneratorInput { z, xi: Some(xi1) }).unwrap();
        let s2 = generator_forward(&mut tape, &bs, &GeneratorInput { z, xi: Some(xi2) }).unwrap();
        assert_ne!(tape.value(s1), tape.value(s2));
        // Without ξ the stochastic generator's input width does not match.
        assert!(generator_forward(&mut tape, &bs, &GeneratorInput { z, xi: None }).is_err());
    }

    #[test]
    fn critic_outputs() {
        let c = zeroed(MlpModel::new(Role::Critic, &spec(2, 1), &mut rng()).unwrap());
        let mut tape = Tape::new();
        let b = c.bind(&mut tape);
        let x = tape.constant(Tensor::filled(&[3, 2], 1.7));
        let out = critic_forward(&mut tape, &b, x).unwrap();
        assert!(tape.value(out.logit).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(out.prob).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn logit_of_prob_inverts() {
        let mut tape = Tape::new();
        let logits: Vec<f64> = (-29..30).map(|i| i as f64 + 0.37).collect();
        let n = logits.len();
        let l = tape.constant(Tensor::matrix(n, 1, logits.clone()).unwrap());
        let p = tape.sigmoid(l).unwrap();
        for (&want, &prob) in logits.iter().zip(tape.value(p).data()) {
            assert!(prob > 0.0 && prob < 1.0);
            let back = (prob / (1.0 - prob)).ln();
            // 1 - p carries a rounding error of about ε/(1 - p) once p nears 1.
            let tol = 1e-10_f64.max(4.0 * f64::EPSILON / (1.0 - prob));
            assert!((back - want).abs() < tol, "logit {want} -> {back}");
        }
    }

    #[test]
    fn forwards_are_deterministic() {
        let m = MlpModel::new(Role::Decoder, &spec(1, 2), &mut rng()).unwrap();
        let x = Tensor::from_rows(&[vec![0.1], vec![-0.9]]).unwrap();
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    }
}
