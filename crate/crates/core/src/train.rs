//! Training loops.
//!
//! All modes share one [`Session`]: the robust GAN game (attack reals,
//! discriminator step, generator step), and classifier-only training used by
//! clean training, plain adversarial training, adversarial training on real
//! plus generated images, and post-GAN fine-tuning. Degenerate configurations
//! therefore run literally the same code as the simpler modes they reduce to.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{check_containment, pgd_attack, AttackConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{Batch, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::eval::{self, sample_noise, ConditionalSampler};
use crate::graph::Graph;
use crate::losses::{self, attack_loss, AttackTarget, LossMode};
use crate::metrics::MetricsRecord;
use crate::models::{Discriminator, Generator, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, labels, StreamRng};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Robgan,
    AdvTrainBaseline,
    AdvTrainAugmented,
    Clean,
}

/// Per-epoch diagnostics settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub enabled: bool,
    /// Include the PGD robust-accuracy columns.
    pub robust: bool,
    /// Evaluate on the first `subset` samples of each split; 0 means all.
    pub subset: usize,
    /// Radius of the robust-accuracy columns; defaults to the training radius.
    pub eval_delta: Option<f64>,
    pub eval_steps: usize,
    /// Step size as a fraction of the radius.
    pub eval_step_fraction: f64,
    pub oracle_samples: usize,
    /// Generated images used for the discriminator input-gradient probe.
    pub fake_probe: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            robust: true,
            subset: 256,
            eval_delta: None,
            eval_steps: 20,
            eval_step_fraction: 0.125,
            oracle_samples: 200,
            fake_probe: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub d_steps_per_g_step: usize,
    /// Optimizer of both players in the GAN game.
    pub gan_optimizer: AdamConfig,
    /// Optimizer of classifier-only training and fine-tuning.
    pub classifier_optimizer: AdamConfig,
    pub attack: AttackConfig,
    pub attack_enabled: bool,
    /// What the attack on real images maximizes during the GAN game.
    pub attack_target: AttackTarget,
    pub lambda: f64,
    pub loss_mode: LossMode,
    /// Fine-tuning epochs; `None` means 20% of `epochs` (at least one).
    pub finetune_epochs: Option<usize>,
    pub seed: u64,
    pub model: ModelConfig,
    pub metrics: MetricsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Robgan,
            epochs: 10,
            batch_size: 32,
            d_steps_per_g_step: 1,
            gan_optimizer: AdamConfig::gan(),
            classifier_optimizer: AdamConfig::classifier(),
            attack: AttackConfig::training(0.1),
            attack_enabled: true,
            attack_target: AttackTarget::Joint,
            lambda: 1.0,
            loss_mode: LossMode::Split,
            finetune_epochs: None,
            seed: 0,
            model: ModelConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.d_steps_per_g_step == 0 {
            return Err(Error::Config(
                "epochs, batch_size and d_steps_per_g_step must be >= 1".into(),
            ));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.gan_optimizer.validate()?;
        self.classifier_optimizer.validate()?;
        self.attack.validate()?;
        self.model.validate()
    }

    pub fn resolved_finetune_epochs(&self) -> usize {
        self.finetune_epochs
            .unwrap_or_else(|| ((self.epochs as f64 * 0.2).round() as usize).max(1))
    }

    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).into()
    }

    fn eval_attack(&self) -> AttackConfig {
        let delta = self.metrics.eval_delta.unwrap_or(self.attack.delta_max);
        AttackConfig {
            delta_max: delta,
            steps: self.metrics.eval_steps,
            step_size: delta * self.metrics.eval_step_fraction,
            random_start: true,
            pixel_min: self.attack.pixel_min,
            pixel_max: self.attack.pixel_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Discriminator,
    Generator,
}

/// Instrumentation hooks invoked inside the training loop.
pub trait StepObserver<T: Real> {
    fn on_attack(&mut self, _orig: &Batch<T>, _adv: &Batch<T>, _cfg: &AttackConfig) {}
    fn on_step(&mut self, _kind: StepKind, _gen: Option<&Generator<T>>, _disc: &Discriminator<T>) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub d_steps: u64,
    pub g_steps: u64,
    /// Images passed through an attack during training.
    pub attacked_images: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Gan,
    /// Classifier training; `attack` controls real-image attacks, fakes are
    /// drawn when a generator is attached.
    Classifier { attack: bool },
}

struct Streams {
    data: StreamRng,
    noise: StreamRng,
    attack_real: StreamRng,
    attack_fake: StreamRng,
}

const STREAM_NAMES: [&str; 4] = [labels::DATA, labels::NOISE, labels::ATTACK_REAL, labels::ATTACK_FAKE];

impl Streams {
    fn new(seed: u64, prefix: &str) -> Self {
        let d = |l: &str| rng::derive(seed, &format!("{prefix}{l}"));
        Self {
            data: d(labels::DATA),
            noise: d(labels::NOISE),
            attack_real: d(labels::ATTACK_REAL),
            attack_fake: d(labels::ATTACK_FAKE),
        }
    }

    fn all(&self) -> [&StreamRng; 4] {
        [&self.data, &self.noise, &self.attack_real, &self.attack_fake]
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = (STREAM_NAMES.len() as u32).to_le_bytes().to_vec();
        for (name, r) in STREAM_NAMES.iter().zip(self.all()) {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&rng::save_state(r));
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Mismatch("malformed rng state blob".into());
        let mut pos = 4;
        let count = u32::from_le_bytes(bytes.get(..4).ok_or_else(bad)?.try_into().expect("sized"));
        if count as usize != STREAM_NAMES.len() {
            return Err(bad());
        }
        let mut out = Vec::new();
        for name in STREAM_NAMES {
            let len = *bytes.get(pos).ok_or_else(bad)? as usize;
            pos += 1;
            if bytes.get(pos..pos + len) != Some(name.as_bytes()) {
                return Err(Error::Mismatch(format!("rng blob lacks stream {name:?}")));
            }
            pos += len;
            out.push(rng::restore_state(bytes.get(pos..pos + rng::STATE_LEN).ok_or_else(bad)?)?);
            pos += rng::STATE_LEN;
        }
        let mut it = out.into_iter();
        Ok(Self {
            data: it.next().expect("four streams"),
            noise: it.next().expect("four streams"),
            attack_real: it.next().expect("four streams"),
            attack_fake: it.next().expect("four streams"),
        })
    }
}

/// A resumable training run.
pub struct Session<'a, T: Real> {
    cfg: TrainConfig,
    phase: Phase,
    stream_prefix: String,
    train: &'a Dataset,
    test: &'a Dataset,
    pub gen: Option<Generator<T>>,
    pub disc: Discriminator<T>,
    opt_d: Adam<T>,
    opt_g: Option<Adam<T>>,
    streams: Streams,
    epoch: usize,
    epochs_total: usize,
    counters: Counters,
    oracle: Option<&'a Discriminator<T>>,
    observer: Option<&'a mut dyn StepObserver<T>>,
    lambda: f64,
}

fn check_splits(train: &Dataset, test: &Dataset, model: &ModelConfig) -> Result<()> {
    if train.split != SplitTag::Train || test.split != SplitTag::Test {
        return Err(Error::Validation(format!(
            "training needs (train, test) splits, got ({:?}, {:?})",
            train.split, test.split
        )));
    }
    if train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    for ds in [train, test] {
        let dims = [ds.channels, ds.height, ds.width, ds.num_classes];
        let want = [model.channels, model.height, model.width, model.num_classes];
        if dims != want {
            return Err(Error::Config(format!(
                "{:?} split has (C, H, W, K) = {dims:?}, model expects {want:?}",
                ds.split
            )));
        }
    }
    Ok(())
}

impl<'a, T: Real> Session<'a, T> {
    fn build(
        cfg: &TrainConfig,
        phase: Phase,
        prefix: &str,
        train: &'a Dataset,
        test: &'a Dataset,
        gen: Option<Generator<T>>,
        disc: Discriminator<T>,
        epochs_total: usize,
        lambda: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        check_splits(train, test, &cfg.model)?;
        let (opt_d_cfg, opt_g) = match phase {
            Phase::Gan => {
                let g = gen.as_ref().expect("gan phase has a generator");
                (cfg.gan_optimizer.clone(), Some(Adam::new(cfg.gan_optimizer.clone(), &g.params)))
            }
            Phase::Classifier { .. } => (cfg.classifier_optimizer.clone(), None),
        };
        Ok(Self {
            cfg: cfg.clone(),
            phase,
            stream_prefix: prefix.to_string(),
            train,
            test,
            opt_d: Adam::new(opt_d_cfg, &disc.params),
            opt_g,
            gen,
            disc,
            streams: Streams::new(cfg.seed, prefix),
            epoch: 0,
            epochs_total,
            counters: Counters::default(),
            oracle: None,
            observer: None,
            lambda,
        })
    }

    fn init_disc(cfg: &TrainConfig) -> Result<Discriminator<T>> {
        Discriminator::init(&cfg.model, &mut rng::derive(cfg.seed, labels::INIT_DISC))
    }

    /// The three-player game; requires `mode = robgan`.
    pub fn robgan(cfg: &TrainConfig, train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        expect_mode(cfg, &[TrainMode::Robgan])?;
        let gen = Generator::init(&cfg.model, &mut rng::derive(cfg.seed, labels::INIT_GEN))?;
        let disc = Self::init_disc(cfg)?;
        Self::build(cfg, Phase::Gan, "", train, test, Some(gen), disc, cfg.epochs, 0.0)
    }

    /// Classifier-only training for the clean, baseline and augmented modes.
    /// `gen` is required (and only used) in augmented mode.
    pub fn classifier(
        cfg: &TrainConfig,
        train: &'a Dataset,
        test: &'a Dataset,
        gen: Option<Generator<T>>,
    ) -> Result<Self> {
        expect_mode(
            cfg,
            &[TrainMode::Clean, TrainMode::AdvTrainBaseline, TrainMode::AdvTrainAugmented],
        )?;
        let gen = match cfg.mode {
            TrainMode::AdvTrainAugmented => Some(gen.ok_or_else(|| {
                Error::Config("augmented training needs a generator checkpoint".into())
            })?),
            _ => None,
        };
        let attack = cfg.mode != TrainMode::Clean && cfg.attack_enabled;
        let lambda = if gen.is_some() { cfg.lambda } else { 0.0 };
        let disc = Self::init_disc(cfg)?;
        Self::build(cfg, Phase::Classifier { attack }, "", train, test, gen, disc, cfg.epochs, lambda)
    }

    /// Fine-tunes the class head of a GAN discriminator on attacked real and
    /// generated images.
    pub fn finetune(
        cfg: &TrainConfig,
        train: &'a Dataset,
        test: &'a Dataset,
        disc: Discriminator<T>,
        gen: Generator<T>,
    ) -> Result<Self> {
        let epochs = cfg.resolved_finetune_epochs();
        Self::build(
            cfg,
            Phase::Classifier { attack: cfg.attack_enabled },
            "finetune.",
            train,
            test,
            Some(gen),
            disc,
            epochs,
            cfg.lambda,
        )
    }

    /// Oracle scoring of the generator in each epoch's metrics.
    pub fn with_oracle(mut self, oracle: &'a Discriminator<T>) -> Self {
        self.oracle = Some(oracle);
        self
    }

    pub fn with_observer(mut self, observer: &'a mut dyn StepObserver<T>) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn epochs_total(&self) -> usize {
        self.epochs_total
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.epochs_total
    }

    /// Runs all remaining epochs.
    pub fn run(&mut self) -> Result<Vec<MetricsRecord>> {
        let mut out = Vec::new();
        while !self.is_done() {
            out.push(self.run_epoch()?);
        }
        Ok(out)
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { site } => Error::Divergence {
                iteration: self.counters.d_steps as usize,
                what: site,
            },
            other => other,
        }
    }

    fn check_loss(&self, what: &str, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::Divergence {
                iteration: self.counters.d_steps as usize,
                what: what.to_string(),
            });
        }
        Ok(())
    }

    fn attack(
        &mut self,
        batch: &Batch<T>,
        target: AttackTarget,
        fake: bool,
    ) -> Result<Batch<T>> {
        let rng = if fake {
            &mut self.streams.attack_fake
        } else {
            &mut self.streams.attack_real
        };
        let adv = pgd_attack(attack_loss(&self.disc, &batch.labels, target), batch, &self.cfg.attack, rng)?;
        check_containment(batch, &adv, &self.cfg.attack)?;
        if let Some(obs) = self.observer.as_mut() {
            obs.on_attack(batch, &adv, &self.cfg.attack);
        }
        self.counters.attacked_images += batch.len() as u64;
        Ok(adv)
    }

    fn sample_fakes(&mut self, n: usize) -> Result<Batch<T>> {
        let gen = self.gen.as_ref().expect("fakes need a generator");
        let k = self.cfg.model.num_classes;
        let labels: Vec<usize> = (0..n).map(|_| self.streams.noise.gen_range(0..k)).collect();
        gen.sample(&labels, &mut self.streams.noise)
    }

    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        if self.is_done() {
            return Err(Error::State(format!("all {} epochs already ran", self.epochs_total)));
        }
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.streams.data);
        let bs = self.cfg.batch_size;
        let chunks: Vec<&[usize]> = order.chunks(bs).collect();
        let (mut d_sum, mut g_sum, mut g_norm_sum, mut g_count) = (0.0, 0.0, 0.0, 0usize);
        let mut pending_d = 0;
        for (i, idx) in chunks.iter().enumerate() {
            let real: Batch<T> = self.train.batch(idx);
            match self.phase {
                Phase::Gan => {
                    d_sum += self.gan_d_step(&real).map_err(|e| self.diverged(e))?;
                    pending_d += 1;
                    if pending_d == self.cfg.d_steps_per_g_step || i + 1 == chunks.len() {
                        let (loss, norm) = self.gan_g_step(real.len()).map_err(|e| self.diverged(e))?;
                        g_sum += loss;
                        g_norm_sum += norm;
                        g_count += 1;
                        pending_d = 0;
                    }
                }
                Phase::Classifier { attack } => {
                    d_sum += self.classifier_step(&real, attack).map_err(|e| self.diverged(e))?;
                }
            }
        }
        self.epoch += 1;
        let d_loss = d_sum / chunks.len() as f64;
        let (g_loss, g_step_norm) = if g_count > 0 {
            (Some(g_sum / g_count as f64), Some(g_norm_sum / g_count as f64))
        } else {
            (None, None)
        };
        self.epoch_metrics(d_loss, g_loss, g_step_norm)
    }

    fn gan_d_step(&mut self, real: &Batch<T>) -> Result<f64> {
        let real_in = if self.cfg.attack_enabled {
            self.attack(real, self.cfg.attack_target, false)?
        } else {
            real.clone()
        };
        let fake = self.sample_fakes(real.len())?;
        let mut g = Graph::new();
        let step = losses::discriminator_objective(&self.disc, &mut g, &real_in, &fake, self.cfg.loss_mode)?;
        let loss = step.report.d_objective;
        self.check_loss("discriminator loss", loss)?;
        g.backward(step.loss)?;
        let grads = self.disc.params.grads(&mut g, &step.params);
        self.opt_d.step(&mut self.disc.params, &grads)?;
        self.counters.d_steps += 1;
        if let Some(obs) = self.observer.as_mut() {
            obs.on_step(StepKind::Discriminator, self.gen.as_ref(), &self.disc);
        }
        Ok(loss)
    }

    /// Returns (loss, ‖w_after − w_before‖) of one generator update.
    fn gan_g_step(&mut self, n: usize) -> Result<(f64, f64)> {
        let k = self.cfg.model.num_classes;
        let labels: Vec<usize> = (0..n).map(|_| self.streams.noise.gen_range(0..k)).collect();
        let gen = self.gen.as_mut().expect("gan phase has a generator");
        let z = sample_noise::<T>(&mut self.streams.noise, n, gen.config.noise_dim);
        let mut g = Graph::new();
        let gp = gen.params.bind(&mut g, true);
        let zv = g.constant(z);
        let fake = gen.forward(&mut g, &gp, zv, &labels)?;
        let loss = losses::generator_objective(&self.disc, &mut g, fake, &labels, self.cfg.loss_mode)?;
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration: self.counters.d_steps as usize,
                what: "generator loss".into(),
            });
        }
        g.backward(loss)?;
        let grads = gen.params.grads(&mut g, &gp);
        let before = gen.params.clone();
        self.opt_g
            .as_mut()
            .expect("gan phase has a generator optimizer")
            .step(&mut gen.params, &grads)?;
        let norm = gen.params.distance(&before);
        self.counters.g_steps += 1;
        if let Some(obs) = self.observer.as_mut() {
            obs.on_step(StepKind::Generator, self.gen.as_ref(), &self.disc);
        }
        Ok((value, norm))
    }

    fn classifier_step(&mut self, real: &Batch<T>, attack: bool) -> Result<f64> {
        let real_in = if attack {
            self.attack(real, AttackTarget::Classification, false)?
        } else {
            real.clone()
        };
        let fake_in = match self.gen {
            Some(_) => {
                let fake = self.sample_fakes(real.len())?;
                Some(if attack {
                    self.attack(&fake, AttackTarget::Classification, true)?
                } else {
                    fake
                })
            }
            None => None,
        };
        let mut g = Graph::new();
        let (loss, bound) = losses::finetune_loss(&self.disc, &mut g, &real_in, fake_in.as_ref(), self.lambda)?;
        let value = g.value(loss).data()[0].as_f64();
        self.check_loss("classification loss", value)?;
        g.backward(loss)?;
        let grads = self.disc.params.grads(&mut g, &bound);
        self.opt_d.step(&mut self.disc.params, &grads)?;
        self.counters.d_steps += 1;
        if let Some(obs) = self.observer.as_mut() {
            obs.on_step(StepKind::Discriminator, self.gen.as_ref(), &self.disc);
        }
        Ok(value)
    }

    fn epoch_metrics(
        &self,
        d_loss: f64,
        g_loss: Option<f64>,
        g_step_norm: Option<f64>,
    ) -> Result<MetricsRecord> {
        let m = &self.cfg.metrics;
        let mut rec = MetricsRecord {
            epoch: self.epoch,
            d_loss: Some(d_loss),
            g_loss,
            g_step_norm,
            ..Default::default()
        };
        if !m.enabled {
            return Ok(rec);
        }
        let pick = |ds: &Dataset| if m.subset == 0 { ds.clone() } else { ds.head(m.subset) };
        let (train, test) = (pick(self.train), pick(self.test));
        let label = |what: &str| format!("{}eval.{}.{what}", self.stream_prefix, self.epoch);
        let seed = self.cfg.seed;
        let disc = &self.disc;
        rec.clean_train_acc = Some(eval::accuracy(disc, &train)?);
        if !test.is_empty() {
            rec.clean_test_acc = Some(eval::accuracy(disc, &test)?);
        }
        if m.robust {
            let atk = self.cfg.eval_attack();
            rec.robust_train_acc =
                Some(eval::robust_accuracy(disc, &train, &atk, &mut rng::derive(seed, &label("train")))?);
            if !test.is_empty() {
                rec.robust_test_acc =
                    Some(eval::robust_accuracy(disc, &test, &atk, &mut rng::derive(seed, &label("test")))?);
            }
        }
        rec.llv_train = Some(eval::measure_llv(disc, &train)?.mean);
        if !test.is_empty() {
            rec.llv_test = Some(eval::measure_llv(disc, &test)?.mean);
        }
        if let Some(gen) = &self.gen {
            if let Some(oracle) = self.oracle {
                let s = eval::oracle_score(gen, oracle, m.oracle_samples, &mut rng::derive(seed, &label("oracle")))?;
                rec.oracle_score = Some(s.conditional_accuracy);
            }
            if m.fake_probe > 0 && self.phase == Phase::Gan {
                let mut r = rng::derive(seed, &label("probe"));
                let k = self.cfg.model.num_classes;
                let labels: Vec<usize> = (0..m.fake_probe).map(|i| i % k).collect();
                let fakes = gen.sample(&labels, &mut r)?;
                rec.d_input_grad_norm_on_fake = Some(eval::rf_input_grad_norm(disc, &fakes)?);
            }
        }
        rec.check()?;
        Ok(rec)
    }

    /// Snapshot of parameters, optimizer moments, counters and RNG streams.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.cfg.hash());
        if let Some(g) = &self.gen {
            c.push_params("", &g.params);
        }
        c.push_params("", &self.disc.params);
        push_adam(&mut c, "opt.d.", &self.opt_d, &self.disc.params);
        if let (Some(opt), Some(g)) = (&self.opt_g, &self.gen) {
            push_adam(&mut c, "opt.g.", opt, &g.params);
        }
        c.push_counter("session.epoch", self.epoch as u64);
        c.push_counter("session.d_steps", self.counters.d_steps);
        c.push_counter("session.g_steps", self.counters.g_steps);
        c.push_counter("session.attacked_images", self.counters.attacked_images);
        c.rng_state = self.streams.encode();
        c
    }

    /// Restores a snapshot taken from a session with the same configuration.
    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        if c.config_hash != self.cfg.hash() {
            return Err(Error::Mismatch("checkpoint was written under a different config".into()));
        }
        let streams = Streams::decode(&c.rng_state)?;
        if let Some(g) = self.gen.as_mut() {
            c.load_params("", &mut g.params)?;
        }
        c.load_params("", &mut self.disc.params)?;
        load_adam(c, "opt.d.", &mut self.opt_d, &self.disc.params)?;
        if let (Some(opt), Some(g)) = (self.opt_g.as_mut(), self.gen.as_ref()) {
            load_adam(c, "opt.g.", opt, &g.params)?;
        }
        self.epoch = c.counter("session.epoch")? as usize;
        self.counters = Counters {
            d_steps: c.counter("session.d_steps")?,
            g_steps: c.counter("session.g_steps")?,
            attacked_images: c.counter("session.attacked_images")?,
        };
        self.streams = streams;
        Ok(())
    }
}

fn push_adam<T: Real>(c: &mut Checkpoint, prefix: &str, opt: &Adam<T>, params: &crate::params::ParamSet<T>) {
    for ((name, _), (m, v)) in params.iter().zip(opt.m.iter().zip(&opt.v)) {
        c.push_tensor(format!("{prefix}m.{name}"), m);
        c.push_tensor(format!("{prefix}v.{name}"), v);
    }
    c.push_counter(&format!("{prefix}step"), opt.step);
}

fn load_adam<T: Real>(
    c: &Checkpoint,
    prefix: &str,
    opt: &mut Adam<T>,
    params: &crate::params::ParamSet<T>,
) -> Result<()> {
    for (i, (name, t)) in params.iter().enumerate() {
        for (kind, slot) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
            let loaded = c.tensor::<T>(&format!("{prefix}{kind}.{name}"))?;
            if loaded.dims() != t.dims() {
                return Err(Error::shape(
                    "load_checkpoint",
                    format!("{prefix}{kind}.{name} has dims {:?}, expected {:?}", loaded.dims(), t.dims()),
                ));
            }
            *slot = loaded;
        }
    }
    opt.step = c.counter(&format!("{prefix}step"))?;
    Ok(())
}

fn expect_mode(cfg: &TrainConfig, allowed: &[TrainMode]) -> Result<()> {
    if !allowed.contains(&cfg.mode) {
        return Err(Error::Config(format!(
            "mode {:?} not valid here (expected one of {allowed:?})",
            cfg.mode
        )));
    }
    Ok(())
}

pub struct GanRun<T> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub metrics: Vec<MetricsRecord>,
}

pub struct ClassifierRun<T> {
    pub disc: Discriminator<T>,
    pub metrics: Vec<MetricsRecord>,
}

pub fn train_robgan<T: Real>(
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    oracle: Option<&Discriminator<T>>,
) -> Result<GanRun<T>> {
    let mut s = Session::robgan(cfg, train, test)?;
    if let Some(o) = oracle {
        s = s.with_oracle(o);
    }
    let metrics = s.run()?;
    Ok(GanRun {
        gen: s.gen.take().expect("gan session keeps its generator"),
        disc: s.disc,
        metrics,
    })
}

fn run_classifier<T: Real>(mut s: Session<'_, T>) -> Result<ClassifierRun<T>> {
    let metrics = s.run()?;
    Ok(ClassifierRun { disc: s.disc, metrics })
}

/// Adversarial training on attacked real images only.
pub fn train_adversarial_baseline<T: Real>(
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<ClassifierRun<T>> {
    expect_mode(cfg, &[TrainMode::AdvTrainBaseline])?;
    run_classifier(Session::classifier(cfg, train, test, None)?)
}

pub fn train_clean<T: Real>(train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<ClassifierRun<T>> {
    expect_mode(cfg, &[TrainMode::Clean])?;
    run_classifier(Session::classifier(cfg, train, test, None)?)
}

/// Adversarial training on attacked real and attacked generated images.
pub fn train_augmented<T: Real>(
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    gen: &Generator<T>,
) -> Result<ClassifierRun<T>> {
    expect_mode(cfg, &[TrainMode::AdvTrainAugmented])?;
    run_classifier(Session::classifier(cfg, train, test, Some(gen.clone()))?)
}

pub fn finetune<T: Real>(
    disc: &Discriminator<T>,
    gen: &Generator<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<ClassifierRun<T>> {
    if cfg.resolved_finetune_epochs() == 0 {
        return Ok(ClassifierRun {
            disc: disc.clone(),
            metrics: Vec::new(),
        });
    }
    run_classifier(Session::finetune(cfg, train, test, disc.clone(), gen.clone())?)
}

/// Clean-trained classifier used to score generators; trains three times the
/// main-phase epochs without per-epoch metrics.
pub fn train_oracle<T: Real>(train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<Discriminator<T>> {
    let oracle_cfg = TrainConfig {
        mode: TrainMode::Clean,
        epochs: cfg.epochs * 3,
        metrics: MetricsConfig {
            enabled: false,
            ..cfg.metrics.clone()
        },
        ..cfg.clone()
    };
    let mut s = Session::classifier(&oracle_cfg, train, test, None)?;
    s.stream_prefix = "oracle.".into();
    s.streams = Streams::new(cfg.seed, "oracle.");
    s.run()?;
    Ok(s.disc)
}
