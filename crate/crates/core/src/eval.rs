//! Robustness and generator-quality diagnostics.
//!
//! All functions take frozen models and derive their own randomness from an
//! explicit seed, so results do not depend on evaluation order.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{pgd_attack, AttackConfig};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::{softmax, Graph, Reduction};
use crate::losses::{attack_loss, classification_loss, AttackTarget};
use crate::metrics::MetricsRecord;
use crate::models::{argmax_rows, Discriminator, Generator};
use crate::params::ParamSet;
use crate::rng::{self, StreamRng};
use crate::tensor::{Real, Tensor};

/// Samples per forward pass during evaluation.
const CHUNK: usize = 128;

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(CHUNK).map(move |s| (s..(s + CHUNK).min(n)).collect())
}

fn non_empty(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Validation(format!("{:?} split is empty", ds.split)));
    }
    Ok(())
}

fn count_correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Top-1 accuracy of the class head.
pub fn accuracy<T: Real>(disc: &Discriminator<T>, ds: &Dataset) -> Result<f64> {
    non_empty(ds)?;
    let mut correct = 0;
    for idx in chunks(ds.len()) {
        let b: Batch<T> = ds.batch(&idx);
        correct += count_correct(&disc.predict(&b.images)?, &b.labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Top-1 accuracy on PGD-perturbed inputs (attack on the classification CE).
pub fn robust_accuracy<T: Real>(
    disc: &Discriminator<T>,
    ds: &Dataset,
    attack: &AttackConfig,
    rng: &mut StreamRng,
) -> Result<f64> {
    non_empty(ds)?;
    let mut correct = 0;
    for idx in chunks(ds.len()) {
        let b: Batch<T> = ds.batch(&idx);
        let adv = pgd_attack(
            attack_loss(disc, &b.labels, AttackTarget::Classification),
            &b,
            attack,
            rng,
        )?;
        correct += count_correct(&disc.predict(&adv.images)?, &b.labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub delta_max: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn at(&self, delta: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| (p.delta_max - delta).abs() < 1e-12)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta_max,train_acc,test_acc\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.delta_max, p.train_acc, p.test_acc));
        }
        out
    }
}

/// Accuracy of both splits under PGD at every radius in `deltas`. The
/// template's schedule (steps, start, step size relative to the radius) is
/// reused at each radius; each radius gets its own random stream.
pub fn robust_accuracy_sweep<T: Real>(
    disc: &Discriminator<T>,
    train: &Dataset,
    test: &Dataset,
    deltas: &[f64],
    template: &AttackConfig,
    seed: u64,
) -> Result<SweepResult> {
    non_empty(train)?;
    non_empty(test)?;
    if deltas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Validation("sweep radii must be sorted ascending".into()));
    }
    if let Some(d) = deltas.iter().find(|d| !(0.0..=2.0).contains(*d)) {
        return Err(Error::Validation(format!("sweep radius {d} outside [0, 2]")));
    }
    let mut points = Vec::with_capacity(deltas.len());
    for (i, &delta) in deltas.iter().enumerate() {
        let cfg = template.at_radius(delta);
        let train_acc = robust_accuracy(disc, train, &cfg, &mut rng::derive(seed, &format!("sweep.train.{i}")))?;
        let test_acc = robust_accuracy(disc, test, &cfg, &mut rng::derive(seed, &format!("sweep.test.{i}")))?;
        points.push(SweepPoint {
            delta_max: delta,
            train_acc,
            test_acc,
        });
    }
    Ok(SweepResult { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlvStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-sample Euclidean norms of `∂ CE(f(x_i), y_i) / ∂x_i`.
pub fn per_sample_llv<T: Real>(disc: &Discriminator<T>, batch: &Batch<T>) -> Result<Vec<f64>> {
    let p = disc.params.clone();
    input_grad_norms(batch, |g, x| {
        let bound = p.bind(g, false);
        classification_loss(disc, g, &bound, x, &batch.labels, Reduction::Sum)
    })
}

/// Row norms of the input gradient of `summed_loss`, a sum of per-sample
/// losses, so that row i is exactly `∂ℓ_i/∂x_i`.
pub fn input_grad_norms<T: Real>(
    batch: &Batch<T>,
    summed_loss: impl FnOnce(&mut Graph<T>, crate::graph::Var) -> Result<crate::graph::Var>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.leaf(batch.images.clone(), true);
    let loss = summed_loss(&mut g, x)?;
    g.backward(loss)?;
    Ok(row_norms(g.grad(x), batch.len()))
}

fn row_norms<T: Real>(grad: Option<&Tensor<T>>, n: usize) -> Vec<f64> {
    match grad {
        None => vec![0.0; n],
        Some(gr) => {
            let per = gr.numel() / n.max(1);
            gr.data()
                .chunks(per.max(1))
                .map(|row| row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
                .collect()
        }
    }
}

pub fn measure_llv<T: Real>(disc: &Discriminator<T>, ds: &Dataset) -> Result<LlvStats> {
    non_empty(ds)?;
    let mut norms = Vec::with_capacity(ds.len());
    for idx in chunks(ds.len()) {
        norms.extend(per_sample_llv(disc, &ds.batch::<T>(&idx))?);
    }
    if norms.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            site: "llv input gradient".into(),
        });
    }
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(LlvStats { mean, std: var.sqrt() })
}

/// Mean per-sample norm of the real/fake logit's input gradient on `fakes`.
pub fn rf_input_grad_norm<T: Real>(disc: &Discriminator<T>, fakes: &Batch<T>) -> Result<f64> {
    let mut g = Graph::new();
    let p = disc.params.bind(&mut g, false);
    let x = g.leaf(fakes.images.clone(), true);
    let out = disc.forward(&mut g, &p, x)?;
    let s = g.sum(out.rf)?;
    g.backward(s)?;
    let norms = row_norms(g.grad(x), fakes.len());
    Ok(norms.iter().sum::<f64>() / norms.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScore {
    /// Fraction of samples the oracle assigns to their conditioning label.
    pub conditional_accuracy: f64,
    /// Entropy of the oracle's mean predictive distribution, in [0, ln K].
    pub diversity: f64,
    /// Fingerprint of the oracle parameters used.
    pub oracle_hash: String,
}

pub fn params_hash<T: Real>(params: &ParamSet<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sample_noise<T: Real>(rng: &mut StreamRng, n: usize, dim: usize) -> Tensor<T> {
    let data = (0..n * dim)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(vec![n, dim], data).expect("dims match")
}

/// Any source of labelled images conditioned on class labels.
pub trait ConditionalSampler<T> {
    fn sample(&self, labels: &[usize], rng: &mut StreamRng) -> Result<Batch<T>>;
}

impl<T: Real> ConditionalSampler<T> for Generator<T> {
    fn sample(&self, labels: &[usize], rng: &mut StreamRng) -> Result<Batch<T>> {
        let z = sample_noise(rng, labels.len(), self.config.noise_dim);
        self.generate(&z, labels)
    }
}

/// Scores `n_samples` class-balanced samples with a frozen oracle.
pub fn oracle_score<T: Real, S: ConditionalSampler<T>>(
    sampler: &S,
    oracle: &Discriminator<T>,
    n_samples: usize,
    rng: &mut StreamRng,
) -> Result<OracleScore> {
    let k = oracle.config.num_classes;
    if n_samples < k {
        return Err(Error::Validation(format!(
            "oracle score needs at least K = {k} samples, got {n_samples}"
        )));
    }
    let labels: Vec<usize> = (0..n_samples).map(|i| i % k).collect();
    let mut correct = 0;
    let mut marginal = vec![0.0f64; k];
    for part in labels.chunks(CHUNK) {
        let b = sampler.sample(part, rng)?;
        let (_, logits) = oracle.discriminate(&b.images)?;
        correct += count_correct(&argmax_rows(&logits), part);
        for row in softmax(&logits)?.data().chunks(k) {
            for (m, p) in marginal.iter_mut().zip(row) {
                *m += p.as_f64();
            }
        }
    }
    let entropy = marginal
        .iter()
        .map(|m| m / n_samples as f64)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum::<f64>();
    Ok(OracleScore {
        conditional_accuracy: correct as f64 / n_samples as f64,
        diversity: entropy.clamp(0.0, (k as f64).ln()),
        oracle_hash: params_hash(&oracle.params),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapRow {
    pub epoch: usize,
    pub robust_acc_gap: Option<f64>,
    pub llv_gap: Option<f64>,
}

pub const GAP_HEADER: [&str; 3] = ["epoch", "robust_acc_gap", "llv_gap"];

/// Train-minus-test gaps of robust accuracy and LLV per epoch.
pub fn accuracy_gap_report(records: &[MetricsRecord]) -> Vec<GapRow> {
    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
    records
        .iter()
        .map(|r| GapRow {
            epoch: r.epoch,
            robust_acc_gap: diff(r.robust_train_acc, r.robust_test_acc),
            llv_gap: diff(r.llv_train, r.llv_test),
        })
        .collect()
}

pub fn gap_csv(rows: &[GapRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = GAP_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.epoch, cell(r.robust_acc_gap), cell(r.llv_gap)));
    }
    out
}

/// `(epoch, llv_train, llv_test)` curve.
pub fn llv_curve_csv(records: &[MetricsRecord]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,llv_train,llv_test\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.epoch, cell(r.llv_train), cell(r.llv_test)));
    }
    out
}
