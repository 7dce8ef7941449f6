//! ℓ∞ projected gradient attacks.
//!
//! Every step moves each pixel by `step_size * sign(∂loss/∂x)`, projects back
//! into the ℓ∞ ball of radius `delta_max` around the clean image and clamps
//! to the pixel range. `sign(0) = 0`, so pixels with an exactly zero
//! gradient never move.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::{self, StreamRng};
use crate::tensor::{Real, Tensor};

/// Slack allowed on ball containment, absorbing single-precision rounding.
pub const BALL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub delta_max: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub pixel_min: f64,
    pub pixel_max: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::training(0.1)
    }
}

impl AttackConfig {
    /// 10 steps of `delta/4` from a random start.
    pub fn training(delta_max: f64) -> Self {
        Self {
            delta_max,
            steps: 10,
            step_size: delta_max / 4.0,
            random_start: true,
            pixel_min: -1.0,
            pixel_max: 1.0,
        }
    }

    /// 20 steps of `delta/8` from a random start.
    pub fn evaluation(delta_max: f64) -> Self {
        Self {
            steps: 20,
            step_size: delta_max / 8.0,
            ..Self::training(delta_max)
        }
    }

    pub fn fgsm(delta_max: f64) -> Self {
        Self {
            delta_max,
            steps: 1,
            step_size: delta_max,
            random_start: false,
            pixel_min: -1.0,
            pixel_max: 1.0,
        }
    }

    /// Same schedule shape (steps, start, clamp) at another radius, with the
    /// step size scaled proportionally.
    pub fn at_radius(&self, delta_max: f64) -> Self {
        let ratio = if self.delta_max > 0.0 {
            self.step_size / self.delta_max
        } else {
            1.0
        };
        Self {
            delta_max,
            step_size: delta_max * ratio,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.delta_max) {
            return Err(Error::Config(format!(
                "delta_max {} outside [0, 2]",
                self.delta_max
            )));
        }
        if self.steps > 0 && self.delta_max > 0.0 && !(self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.pixel_min < self.pixel_max) {
            return Err(Error::Config(format!(
                "pixel range [{}, {}] is empty",
                self.pixel_min, self.pixel_max
            )));
        }
        Ok(())
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Runs PGD against `model_loss`, a function recording a scalar loss of the
/// image leaf it is handed.
pub fn pgd_attack<T, F>(
    mut model_loss: F,
    batch: &Batch<T>,
    cfg: &AttackConfig,
    rng: &mut StreamRng,
) -> Result<Batch<T>>
where
    T: Real,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    cfg.validate()?;
    let (lo, hi) = (T::lit(cfg.pixel_min), T::lit(cfg.pixel_max));
    if batch.images.data().iter().any(|&v| v < lo || v > hi) {
        return Err(Error::Contract(format!(
            "attack input outside [{}, {}]",
            cfg.pixel_min, cfg.pixel_max
        )));
    }
    let delta = T::lit(cfg.delta_max);
    let alpha = T::lit(cfg.step_size);
    let orig = batch.images.data();
    let project = |i: usize, v: T| -> T {
        let x = orig[i];
        v.max(x - delta).min(x + delta).max(lo).min(hi)
    };

    let mut cur: Vec<T> = orig.to_vec();
    if cfg.random_start {
        for (i, v) in cur.iter_mut().enumerate() {
            let u = T::lit(2.0 * rng.gen::<f64>() - 1.0);
            *v = project(i, *v + u * delta);
        }
    }
    let dims = batch.images.dims().to_vec();
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(dims.clone(), cur.clone())?, true);
        let loss = model_loss(&mut g, x).map_err(|e| Error::Attack {
            step,
            reason: e.to_string(),
        })?;
        g.backward(loss).map_err(|e| Error::Attack {
            step,
            reason: e.to_string(),
        })?;
        let grad = g.grad(x).ok_or_else(|| Error::Attack {
            step,
            reason: "loss does not depend on the image".into(),
        })?;
        if !grad.all_finite() {
            return Err(Error::Attack {
                step,
                reason: "non-finite input gradient".into(),
            });
        }
        for (i, (v, &gv)) in cur.iter_mut().zip(grad.data()).enumerate() {
            *v = project(i, *v + alpha * sign(gv));
        }
    }
    Batch::new(
        Tensor::new(dims, cur)?,
        batch.labels.clone(),
        BatchKind::Adversarial,
    )
}

/// One signed-gradient step of size `delta_max` without a random start.
pub fn fgsm<T, F>(model_loss: F, batch: &Batch<T>, delta_max: f64) -> Result<Batch<T>>
where
    T: Real,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    // the stream is never drawn from without a random start
    let mut unused = rng::derive(0, "fgsm");
    pgd_attack(model_loss, batch, &AttackConfig::fgsm(delta_max), &mut unused)
}

/// Checks that `adv` lies in the ball around `orig` and inside the pixel range.
pub fn check_containment<T: Real>(orig: &Batch<T>, adv: &Batch<T>, cfg: &AttackConfig) -> Result<()> {
    if orig.images.dims() != adv.images.dims() || orig.labels != adv.labels {
        return Err(Error::Contract("adversarial batch does not match its source".into()));
    }
    for (i, (&x, &a)) in orig.images.data().iter().zip(adv.images.data()).enumerate() {
        let (x, a) = (x.as_f64(), a.as_f64());
        if (a - x).abs() > cfg.delta_max + BALL_TOLERANCE || a < cfg.pixel_min || a > cfg.pixel_max {
            return Err(Error::Contract(format!(
                "pixel {i}: {a} escapes ball of {} around {x} or range [{}, {}]",
                cfg.delta_max, cfg.pixel_min, cfg.pixel_max
            )));
        }
    }
    Ok(())
}
