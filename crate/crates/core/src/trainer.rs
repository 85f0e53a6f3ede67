//! The training loop: `M` critic updates, then one joint generator and
//! encoder update, repeated. Adam throughout.
//!
//! All randomness flows from one seeded ChaCha stream (prior draws and
//! penalty interpolation weights) plus the batch sampler, whose order is a
//! pure function of the seed. Two runs with the same config are bitwise
//! identical.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::BatchSampler;
use crate::error::{Error, Result};
use crate::losses::{
    clustergan_objective, critic_loss, default_bandwidth, dls_forward, generator_adversarial, total_objective,
    Ablation, CriticMode, LossWeights, ObjectiveWeights,
};
use crate::nets::{generator_forward, MlpSpec, NetworkParams, OutputActivation};
use crate::prior::{compose, sample_prior, LatentBatch};
use crate::tensor::{Array, Gradients, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Adversarial term plus reconstruction, MMD and both consistency losses.
    #[default]
    Dls,
    /// Adversarial term plus latent recovery on generated samples.
    Clustergan,
    /// Adversarial term only; the encoder is not trained.
    GanOnly,
}

impl std::str::FromStr for ObjectiveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dls" => Ok(ObjectiveMode::Dls),
            "clustergan" => Ok(ObjectiveMode::Clustergan),
            "gan_only" => Ok(ObjectiveMode::GanOnly),
            other => Err(Error::Config(format!("unknown objective mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub clusters: usize,
    pub latent_dim: usize,
    pub sigma: f64,
    pub batch_size: usize,
    pub critic_steps: usize,
    pub weights: LossWeights,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub objective: ObjectiveMode,
    pub ablate: Vec<Ablation>,
    pub gen_activation: OutputActivation,
    pub critic_mode: CriticMode,
    /// Hidden widths shared by all three networks.
    pub hidden: Vec<usize>,
    pub init_std: f64,
    /// Kernel bandwidth; `2 d_n sigma^2` when unset.
    pub bandwidth: Option<f64>,
    /// Joint steps between evaluation callbacks.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clusters: 10,
            latent_dim: 30,
            sigma: 0.10,
            batch_size: 64,
            critic_steps: 5,
            weights: LossWeights::default(),
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            total_steps: 10_000,
            seed: 0,
            objective: ObjectiveMode::Dls,
            ablate: Vec::new(),
            gen_activation: OutputActivation::Linear,
            critic_mode: CriticMode::WassersteinGp,
            hidden: vec![256, 256],
            init_std: 0.02,
            bandwidth: None,
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    /// Adam settings of the image preset: `lr 2e-4`, `betas (0.5, 0.999)`,
    /// unit consistency weights.
    pub fn cifar_preset() -> Self {
        TrainConfig {
            lr: 2e-4,
            adam_beta2: 0.999,
            weights: LossWeights::cifar(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.clusters < 1 {
            return fail("clusters must be at least 1".into());
        }
        if self.latent_dim < 1 {
            return fail("latent_dim must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.critic_steps < 1 {
            return fail("critic_steps must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail("init_std must be positive".into());
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        if let Some(bw) = self.bandwidth {
            if !(bw > 0.0 && bw.is_finite()) {
                return fail(format!("bandwidth must be positive, got {bw}"));
            }
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        self.weights.validate()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth.unwrap_or_else(|| default_bandwidth(self.latent_dim, self.sigma))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn generator_spec(&self, data_dim: usize) -> MlpSpec {
        MlpSpec::generator(self.clusters + self.latent_dim, &self.hidden, data_dim, self.gen_activation)
    }

    pub fn encoder_spec(&self, data_dim: usize) -> MlpSpec {
        MlpSpec::encoder(data_dim, &self.hidden, self.clusters, self.latent_dim)
    }

    pub fn discriminator_spec(&self, data_dim: usize) -> MlpSpec {
        MlpSpec::discriminator(data_dim, &self.hidden)
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl AdamState {
    pub fn new(params: &[Array]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Array::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam step, in place.
pub fn adam_update(params: &mut [Array], grads: &[Array], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::dim(format!(
                "adam: tensor {i} has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (k, (pk, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            *pk -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

fn grads_for(grads: &Gradients, leaves: &[Tensor]) -> Vec<Array> {
    leaves.iter().map(|l| grads.get_or_zeros(l)).collect()
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

/// Loss values of one outer step (critic losses are the last critic update's).
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: Vec<(String, f64)>,
    /// Wall-clock seconds since the trainer was created or resumed.
    pub seconds: f64,
}

impl StepRecord {
    pub fn get(&self, term: &str) -> Option<f64> {
        self.losses.iter().find(|(n, _)| n == term).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Equality ignoring wall-clock times.
    pub fn same_losses(&self, other: &TrainHistory) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.step == b.step && a.losses == b.losses)
    }

    /// Long format: `step,term,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,term,value\n");
        for r in &self.records {
            for (n, v) in &r.losses {
                s.push_str(&format!("{},{n},{v:.16e}\n", r.step));
            }
            s.push_str(&format!("{},seconds,{:.6}\n", r.step, r.seconds));
        }
        s
    }
}

fn check_finite(step: u64, losses: &[(String, f64)]) -> Result<()> {
    match losses.iter().find(|(_, v)| !v.is_finite()) {
        Some((term, value)) => Err(Error::Divergence {
            step,
            term: term.clone(),
            value: *value,
        }),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Single updates
// ---------------------------------------------------------------------------

/// One Adam update of the critic. The generator is evaluated frozen.
#[allow(clippy::too_many_arguments)]
pub fn critic_step(
    config: &TrainConfig,
    d: &mut NetworkParams,
    adam: &mut AdamState,
    g: &NetworkParams,
    x_r: &Array,
    prior: &LatentBatch,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<f64> {
    if x_r.rows() != prior.batch_size() {
        return Err(Error::dim(format!(
            "critic step: {} real rows vs {} prior codes",
            x_r.rows(),
            prior.batch_size()
        )));
    }
    let x_g = generator_forward(&g.frozen(), &compose(prior)?)?;
    let gp = config.critic_mode == CriticMode::WassersteinGp && config.weights.lambda_gp != 0.0;
    let tape = if gp { Tape::with_higher_order() } else { Tape::new() };
    let bound = d.bind(&tape);
    let loss = critic_loss(
        config.critic_mode,
        &bound,
        &Tensor::constant(x_r.clone()),
        &x_g,
        config.weights.lambda_gp,
        rng,
    )?;
    let value = loss.item();
    check_finite(step, &[("critic".into(), value)])?;
    let grads = loss.backward()?;
    adam_update(&mut d.tensors, &grads_for(&grads, &bound.tensors), adam, &config.adam())?;
    Ok(value)
}

/// Networks and optimizer states touched by a joint step.
pub struct JointParts<'a> {
    pub g: &'a mut NetworkParams,
    pub e: &'a mut NetworkParams,
    pub adam_g: &'a mut AdamState,
    pub adam_e: &'a mut AdamState,
    pub d: &'a NetworkParams,
}

/// The generator objective and (when the encoder trains) the encoder
/// objective, on one tape.
pub struct JointObjective {
    pub tape: Tape,
    pub g: Vec<Tensor>,
    pub e: Vec<Tensor>,
    /// Loss minimized by the generator.
    pub generator: Tensor,
    /// Loss minimized by the encoder; `None` when the encoder is frozen.
    pub encoder: Option<Tensor>,
    pub losses: Vec<(String, f64)>,
}

/// Builds the joint-step graph with the critic frozen.
pub fn joint_objective(
    config: &TrainConfig,
    g: &NetworkParams,
    e: &NetworkParams,
    d: &NetworkParams,
    x_r: &Array,
    prior: &LatentBatch,
) -> Result<JointObjective> {
    let tape = Tape::new();
    let gb = g.bind(&tape);
    let eb = e.bind(&tape);
    let db = d.frozen();
    let mut losses = Vec::new();
    let (generator, encoder) = match config.objective {
        ObjectiveMode::Dls => {
            let w = ObjectiveWeights::new(&config.weights, &config.ablate);
            let fwd = dls_forward(
                config.critic_mode,
                &gb,
                &eb,
                &db,
                &Tensor::constant(x_r.clone()),
                prior,
                config.bandwidth(),
            )?;
            for (name, t) in fwd.terms.named() {
                if let Some(t) = t {
                    losses.push((name.to_string(), t.item()));
                }
            }
            let generator = total_objective(&w, &fwd.terms)?;
            let encoder = total_objective(&ObjectiveWeights { adv: 0.0, ..w }, &fwd.terms)?;
            (generator, Some(encoder))
        }
        ObjectiveMode::Clustergan => {
            let l = clustergan_objective(&config.weights, config.critic_mode, &db, &gb, &eb, prior)?;
            losses.push(("adv".into(), l.adv.item()));
            losses.push(("zn_recovery".into(), l.zn_recovery.item()));
            losses.push(("ce".into(), l.ce.item()));
            (l.generator, Some(l.encoder))
        }
        ObjectiveMode::GanOnly => {
            let x_g = generator_forward(&gb, &compose(prior)?)?;
            let adv = generator_adversarial(config.critic_mode, &db, &x_g)?;
            losses.push(("adv".into(), adv.item()));
            (adv, None)
        }
    };
    losses.push(("generator_total".into(), generator.item()));
    if let Some(enc) = &encoder {
        losses.push(("encoder_total".into(), enc.item()));
    }
    Ok(JointObjective {
        tape,
        g: gb.tensors,
        e: eb.tensors,
        generator,
        encoder,
        losses,
    })
}

/// One Adam update each for the generator and the encoder.
///
/// The adversarial term depends on generator parameters only, so one
/// backward pass of the generator objective also yields the encoder
/// objective's gradient for the encoder parameters.
pub fn joint_step(
    config: &TrainConfig,
    parts: JointParts<'_>,
    x_r: &Array,
    prior: &LatentBatch,
    step: u64,
) -> Result<Vec<(String, f64)>> {
    let obj = joint_objective(config, parts.g, parts.e, parts.d, x_r, prior)?;
    check_finite(step, &obj.losses)?;
    let grads = obj.generator.backward()?;
    let adam = config.adam();
    adam_update(&mut parts.g.tensors, &grads_for(&grads, &obj.g), parts.adam_g, &adam)?;
    if obj.encoder.is_some() {
        adam_update(&mut parts.e.tensors, &grads_for(&grads, &obj.e), parts.adam_e, &adam)?;
    }
    Ok(obj.losses)
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Complete training state. Everything needed to resume bit-exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub data_dim: usize,
    pub g: NetworkParams,
    pub e: NetworkParams,
    pub d: NetworkParams,
    pub adam_g: AdamState,
    pub adam_e: AdamState,
    pub adam_d: AdamState,
    pub rng: ChaCha8Rng,
    pub sampler: BatchSampler,
    pub step: u64,
    pub history: TrainHistory,
    started: Instant,
}

impl Trainer {
    /// Fresh networks for data of `data_dim` features and `rows` samples.
    pub fn new(config: TrainConfig, data_dim: usize, rows: usize) -> Result<Self> {
        config.validate()?;
        if data_dim == 0 {
            return Err(Error::Config("data has no features".into()));
        }
        if config.batch_size > rows {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {rows} training rows",
                config.batch_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let g = NetworkParams::init(config.generator_spec(data_dim), config.init_std, &mut rng)?;
        let e = NetworkParams::init(config.encoder_spec(data_dim), config.init_std, &mut rng)?;
        let d = NetworkParams::init(config.discriminator_spec(data_dim), config.init_std, &mut rng)?;
        let sampler = BatchSampler::new(rows, config.batch_size, config.seed)?;
        Ok(Trainer {
            adam_g: AdamState::new(&g.tensors),
            adam_e: AdamState::new(&e.tensors),
            adam_d: AdamState::new(&d.tensors),
            config,
            data_dim,
            g,
            e,
            d,
            rng,
            sampler,
            step: 0,
            history: TrainHistory::default(),
            started: Instant::now(),
        })
    }

    /// Reassembles a trainer from saved parts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: TrainConfig,
        data_dim: usize,
        nets: [NetworkParams; 3],
        adam: [AdamState; 3],
        rng: ChaCha8Rng,
        sampler: BatchSampler,
        step: u64,
        history: TrainHistory,
    ) -> Self {
        let [g, e, d] = nets;
        let [adam_g, adam_e, adam_d] = adam;
        Trainer {
            config,
            data_dim,
            g,
            e,
            d,
            adam_g,
            adam_e,
            adam_d,
            rng,
            sampler,
            step,
            history,
            started: Instant::now(),
        }
    }

    fn check_data(&self, x: &Array) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.data_dim {
            return Err(Error::Config(format!(
                "trainer built for {} features, data has shape {:?}",
                self.data_dim,
                x.shape()
            )));
        }
        Ok(())
    }

    fn prior(&mut self) -> Result<LatentBatch> {
        let c = &self.config;
        sample_prior(c.batch_size, c.clusters, c.latent_dim, c.sigma, &mut self.rng)
    }

    /// `M` critic updates then one joint update.
    pub fn step(&mut self, x: &Array) -> Result<&StepRecord> {
        self.check_data(x)?;
        let step = self.step + 1;
        let mut critic = 0.0;
        for _ in 0..self.config.critic_steps {
            let x_r = self.sampler.next_batch(x);
            let prior = self.prior()?;
            critic = critic_step(&self.config, &mut self.d, &mut self.adam_d, &self.g, &x_r, &prior, &mut self.rng, step)?;
        }
        let x_r = self.sampler.next_batch(x);
        let prior = self.prior()?;
        let parts = JointParts {
            g: &mut self.g,
            e: &mut self.e,
            adam_g: &mut self.adam_g,
            adam_e: &mut self.adam_e,
            d: &self.d,
        };
        let mut losses = vec![("critic".to_string(), critic)];
        losses.extend(joint_step(&self.config, parts, &x_r, &prior, step)?);
        self.step = step;
        self.history.records.push(StepRecord {
            step,
            losses,
            seconds: self.started.elapsed().as_secs_f64(),
        });
        Ok(self.history.records.last().unwrap())
    }

    /// Runs until `config.total_steps`, calling `on_eval` after every
    /// `eval_every`-th step.
    pub fn run(&mut self, x: &Array, mut on_eval: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        self.check_data(x)?;
        while self.step < self.config.total_steps {
            self.step(x)?;
            if self.step % self.config.eval_every == 0 {
                on_eval(self)?;
            }
        }
        Ok(())
    }
}

/// Trains from scratch on the feature matrix `x` (labels never enter).
pub fn train(config: &TrainConfig, x: &Array) -> Result<Trainer> {
    if x.rank() != 2 {
        return Err(Error::Config(format!("training data must be N x d, got {:?}", x.shape())));
    }
    let mut t = Trainer::new(config.clone(), x.cols(), x.rows())?;
    t.run(x, |_| Ok(()))?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gmm;

    fn small() -> TrainConfig {
        TrainConfig {
            clusters: 3,
            latent_dim: 2,
            batch_size: 8,
            critic_steps: 2,
            hidden: vec![6, 6],
            total_steps: 4,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn data() -> Array {
        synth_gmm(3, 2, 20, 6.0, 1.0, 1).unwrap().x
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut p = vec![Array::scalar(0.5)];
        let mut st = AdamState::new(&p);
        adam_update(&mut p, &[Array::scalar(1.0)], &mut st, &cfg).unwrap();
        // bias-corrected first step: lr * 1 / (1 + eps)
        assert!((0.5 - p[0].data()[0] - 0.001).abs() < 1e-10);

        let mut q = vec![Array::from_vec(vec![1.0, -2.0])];
        let mut st = AdamState::new(&q);
        adam_update(&mut q, &[Array::zeros(&[2])], &mut st, &cfg).unwrap();
        assert_eq!(q[0].data(), &[1.0, -2.0]);

        assert!(matches!(
            adam_update(&mut q, &[Array::zeros(&[3])], &mut st, &cfg),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn adam_matches_hand_recurrence() {
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        };
        let gs = [0.3, -1.2, 0.7];
        let mut p = vec![Array::scalar(1.0)];
        let mut st = AdamState::new(&p);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in gs.iter().enumerate() {
            adam_update(&mut p, &[Array::scalar(*g)], &mut st, &cfg).unwrap();
            m = 0.5 * m + 0.5 * g;
            v = 0.9 * v + 0.1 * g * g;
            let k = (t + 1) as i32;
            x -= 0.01 * (m / (1.0 - 0.5f64.powi(k))) / ((v / (1.0 - 0.9f64.powi(k))).sqrt() + 1e-8);
        }
        assert_eq!(p[0].data()[0], x);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 1, ..small() },
            TrainConfig { clusters: 0, ..small() },
            TrainConfig { critic_steps: 0, ..small() },
            TrainConfig { lr: 0.0, ..small() },
            TrainConfig { latent_dim: 0, ..small() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let text = toml::to_string(&small()).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), small());
        assert!(toml::from_str::<TrainConfig>("nope = 1").is_err());
        let preset = TrainConfig::cifar_preset();
        assert_eq!((preset.lr, preset.adam_beta1, preset.adam_beta2), (2e-4, 0.5, 0.999));
        assert_eq!((preset.weights.beta3, preset.weights.beta4), (1.0, 1.0));
    }

    #[test]
    fn zero_steps_leaves_params_untouched() {
        let cfg = TrainConfig { total_steps: 0, ..small() };
        let t = train(&cfg, &data()).unwrap();
        let fresh = Trainer::new(cfg, 2, 60).unwrap();
        assert_eq!(t.g, fresh.g);
        assert_eq!(t.e, fresh.e);
        assert_eq!(t.d, fresh.d);
        assert!(t.history.is_empty());
    }

    #[test]
    fn history_has_one_record_per_step_and_is_deterministic() {
        let a = train(&small(), &data()).unwrap();
        let b = train(&small(), &data()).unwrap();
        assert_eq!(a.history.len(), 4);
        assert!(a.history.same_losses(&b.history));
        assert_eq!(a.g, b.g);
        for (i, r) in a.history.records.iter().enumerate() {
            assert_eq!(r.step, i as u64 + 1);
            assert!(r.losses.iter().all(|(_, v)| v.is_finite()));
        }
        let csv = a.history.to_csv();
        assert!(csv.starts_with("step,term,value\n1,critic,"));
    }

    #[test]
    fn data_mismatch_is_a_config_error() {
        let mut t = Trainer::new(small(), 3, 60).unwrap();
        assert!(matches!(t.step(&data()), Err(Error::Config(_))));
        assert!(matches!(Trainer::new(small(), 2, 4), Err(Error::Config(_))));
    }

    fn setup() -> (TrainConfig, Trainer, Array, LatentBatch) {
        let cfg = small();
        let mut t = Trainer::new(cfg.clone(), 2, 60).unwrap();
        let x = data().select_rows(&(0..8).collect::<Vec<_>>());
        let prior = t.prior().unwrap();
        (cfg, t, x, prior)
    }

    #[test]
    fn critic_step_updates_critic_only() {
        let (cfg, mut t, x, prior) = setup();
        let (g0, d0) = (t.g.clone(), t.d.clone());
        critic_step(&cfg, &mut t.d, &mut t.adam_d, &t.g, &x, &prior, &mut t.rng, 1).unwrap();
        assert_eq!(t.g, g0);
        assert_ne!(t.d, d0);

        let (cfg0, mut t2, x2, prior2) = setup();
        let d1 = t2.d.clone();
        // validation rejects lr = 0 for whole runs; a single update with it is a no-op
        let lr0 = TrainConfig { lr: 0.0, ..cfg0 };
        critic_step(&lr0, &mut t2.d, &mut t2.adam_d, &t2.g, &x2, &prior2, &mut t2.rng, 1).unwrap();
        assert_eq!(t2.d, d1);
    }

    #[test]
    fn joint_step_leaves_critic_alone_and_moves_both_nets() {
        let (cfg, mut t, x, prior) = setup();
        let (g0, e0, d0) = (t.g.clone(), t.e.clone(), t.d.clone());
        let parts = JointParts {
            g: &mut t.g,
            e: &mut t.e,
            adam_g: &mut t.adam_g,
            adam_e: &mut t.adam_e,
            d: &t.d,
        };
        let losses = joint_step(&cfg, parts, &x, &prior, 1).unwrap();
        assert_eq!(t.d, d0);
        assert_ne!(t.g, g0);
        assert_ne!(t.e, e0);
        let names: Vec<&str> = losses.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["adv", "ae", "mmd", "n", "ce", "c", "generator_total", "encoder_total"]);
    }

    #[test]
    fn zero_weights_with_detached_adversary_change_nothing() {
        let (mut cfg, mut t, x, prior) = setup();
        cfg.objective = ObjectiveMode::Dls;
        cfg.ablate = Ablation::ALL.to_vec();
        let (g0, e0) = (t.g.clone(), t.e.clone());
        let obj = joint_objective(&cfg, &t.g, &t.e, &t.d, &x, &prior).unwrap();
        // encoder objective is empty, so its gradient vanishes
        let enc = obj.encoder.unwrap();
        assert!(enc.tape().is_none());
        // with the adversarial term detached nothing reaches the generator either
        let grads = obj.generator.detach().backward();
        assert!(grads.is_err() || grads.unwrap().is_empty());
        let zeros: Vec<Array> = t.g.tensors.iter().map(|a| Array::zeros(a.shape())).collect();
        adam_update(&mut t.g.tensors, &zeros, &mut t.adam_g, &cfg.adam()).unwrap();
        assert_eq!(t.g, g0);
        assert_eq!(t.e, e0);
    }

    #[test]
    fn adversarial_term_never_reaches_the_encoder() {
        let (cfg, t, x, prior) = setup();
        let tape = Tape::new();
        let gb = t.g.bind(&tape);
        let eb = t.e.bind(&tape);
        let fwd = dls_forward(cfg.critic_mode, &gb, &eb, &t.d.frozen(), &Tensor::constant(x), &prior, cfg.bandwidth()).unwrap();
        let grads = fwd.terms.adv.unwrap().backward().unwrap();
        assert!(eb.tensors.iter().all(|p| grads.get(p).is_none()));
        assert!(gb.tensors.iter().any(|p| grads.get(p).is_some()));
    }

    #[test]
    fn encoder_gradient_equals_gradient_of_encoder_objective() {
        let (cfg, t, x, prior) = setup();
        let both = joint_objective(&cfg, &t.g, &t.e, &t.d, &x, &prior).unwrap();
        let from_total = both.generator.backward().unwrap();
        let own = both.encoder.as_ref().unwrap().backward().unwrap();
        for p in &both.e {
            assert_eq!(from_total.get_or_zeros(p), own.get_or_zeros(p));
        }
    }

    #[test]
    fn joint_step_calls_each_network_three_times() {
        let (cfg, t, x, prior) = setup();
        let obj = joint_objective(&cfg, &t.g, &t.e, &t.d, &x, &prior).unwrap();
        let first = |v: &[Tensor]| v[0].node_id().unwrap();
        assert_eq!(obj.tape.consumers(first(&obj.g)), 3);
        assert_eq!(obj.tape.consumers(first(&obj.e)), 3);
    }

    #[test]
    fn clustergan_mode_builds_one_generator_and_one_encoder_pass() {
        let (mut cfg, t, x, prior) = setup();
        cfg.objective = ObjectiveMode::Clustergan;
        let obj = joint_objective(&cfg, &t.g, &t.e, &t.d, &x, &prior).unwrap();
        assert_eq!(obj.tape.consumers(obj.g[0].node_id().unwrap()), 1);
        assert_eq!(obj.tape.consumers(obj.e[0].node_id().unwrap()), 1);
        let names: Vec<&str> = obj.losses.iter().map(|(n, _)| n.as_str()).collect();
        assert!(!names.contains(&"ae") && !names.contains(&"mmd"));

        cfg.objective = ObjectiveMode::GanOnly;
        let obj = joint_objective(&cfg, &t.g, &t.e, &t.d, &x, &prior).unwrap();
        assert!(obj.encoder.is_none());
        assert_eq!(obj.tape.consumers(obj.e[0].node_id().unwrap()), 0);
    }

    #[test]
    fn ablating_mmd_changes_only_its_weight() {
        let (mut cfg, t, x, prior) = setup();
        let full = joint_objective(&cfg, &t.g, &t.e, &t.d, &x, &prior).unwrap();
        cfg.ablate = vec![Ablation::Mmd];
        let ab = joint_objective(&cfg, &t.g, &t.e, &t.d, &x, &prior).unwrap();
        for name in ["adv", "ae", "mmd", "n", "ce", "c"] {
            let f = full.losses.iter().find(|(n, _)| n == name).unwrap().1;
            let a = ab.losses.iter().find(|(n, _)| n == name).unwrap().1;
            assert_eq!(f, a);
        }
        let get = |o: &JointObjective, n: &str| o.losses.iter().find(|(k, _)| k == n).unwrap().1;
        let mmd = get(&full, "mmd");
        let expected = get(&full, "generator_total") - cfg.weights.beta1 * mmd;
        assert!((get(&ab, "generator_total") - expected).abs() < 1e-12);
    }

    #[test]
    fn nan_aborts_with_the_term_name() {
        let mut t = Trainer::new(small(), 2, 60).unwrap();
        t.g.tensors[0].data_mut()[0] = f64::NAN;
        match t.step(&data()) {
            Err(Error::Divergence { term, step, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(term, "critic");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn eval_hook_fires_on_schedule() {
        let cfg = TrainConfig {
            total_steps: 5,
            eval_every: 2,
            ..small()
        };
        let mut t = Trainer::new(cfg, 2, 60).unwrap();
        let mut at = Vec::new();
        t.run(&data(), |tr| {
            at.push(tr.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(at, vec![2, 4]);
    }
}
