//! GAN objectives over the two-headed discriminator.
//!
//! Log-likelihood terms, all batch means:
//!
//! * `L_S_real = E log P(real | x_real)`, `L_S_fake = E log P(fake | x_fake)`
//! * `L_C1 = E log P(c | x_real)` (real images), `L_C2 = E log P(c | x_fake)`
//!
//! The AC-GAN classification term is `L_C = L_C1 + L_C2`. In split mode the
//! discriminator maximizes `L_S + L_C1`; in AC-GAN mode `L_S + L_C`. The
//! generator maximizes `L_C2 - L_S` in both modes (real-image terms are
//! constant in the generator's parameters). Every function returns the
//! negated objective, so callers minimize.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Reduction, Var};
use crate::models::Discriminator;
use crate::params::Bound;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Split,
    Acgan,
}

/// What the training-time attack on real images maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackTarget {
    /// Classification cross-entropy plus real/fake BCE against "real".
    Joint,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GanLossReport {
    pub l_s_real: f64,
    pub l_s_fake: f64,
    pub l_c1: f64,
    pub l_c2: f64,
    pub d_objective: f64,
    pub g_objective: f64,
}

impl GanLossReport {
    pub fn l_s(&self) -> f64 {
        self.l_s_real + self.l_s_fake
    }

    pub fn l_c(&self) -> f64 {
        self.l_c1 + self.l_c2
    }
}

fn non_empty<T: Real>(what: &str, b: &Batch<T>) -> Result<()> {
    if b.is_empty() {
        return Err(Error::Validation(format!("{what} batch is empty")));
    }
    Ok(())
}

fn value<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].as_f64()
}

pub struct DiscriminatorLoss {
    pub loss: Var,
    /// Trainable discriminator leaves, in parameter order.
    pub params: Bound,
    pub report: GanLossReport,
}

/// Minimizable discriminator loss: `-(L_S + L_C1)` (split) or
/// `-(L_S + L_C1 + L_C2)` (acgan). `fake` must already be detached from
/// the generator.
pub fn discriminator_objective<T: Real>(
    disc: &Discriminator<T>,
    g: &mut Graph<T>,
    real_adv: &Batch<T>,
    fake: &Batch<T>,
    mode: LossMode,
) -> Result<DiscriminatorLoss> {
    non_empty("real", real_adv)?;
    non_empty("fake", fake)?;
    let params = disc.params.bind(g, true);
    let xr = g.constant(real_adv.images.clone());
    let xf = g.constant(fake.images.clone());
    let out_r = disc.forward(g, &params, xr)?;
    let out_f = disc.forward(g, &params, xf)?;

    let ones = vec![T::one(); real_adv.len()];
    let zeros = vec![T::zero(); fake.len()];
    let bce_r = g.bce_with_logits(out_r.rf, &ones, Reduction::Mean)?;
    let bce_f = g.bce_with_logits(out_f.rf, &zeros, Reduction::Mean)?;
    let ce_r = g.softmax_cross_entropy(out_r.class_logits, &real_adv.labels, Reduction::Mean)?;
    let ce_f = g.softmax_cross_entropy(out_f.class_logits, &fake.labels, Reduction::Mean)?;

    let s = g.add(bce_r, bce_f)?;
    let mut loss = g.add(s, ce_r)?;
    if mode == LossMode::Acgan {
        loss = g.add(loss, ce_f)?;
    }

    let (l_s_real, l_s_fake) = (-value(g, bce_r), -value(g, bce_f));
    let (l_c1, l_c2) = (-value(g, ce_r), -value(g, ce_f));
    let report = GanLossReport {
        l_s_real,
        l_s_fake,
        l_c1,
        l_c2,
        d_objective: value(g, loss),
        g_objective: generator_report_value(mode, l_s_fake, l_c1, l_c2),
    };
    Ok(DiscriminatorLoss { loss, params, report })
}

fn generator_report_value(mode: LossMode, l_s_fake: f64, l_c1: f64, l_c2: f64) -> f64 {
    match mode {
        LossMode::Split => -(l_c2 - l_s_fake),
        LossMode::Acgan => -(l_c1 + l_c2 - l_s_fake),
    }
}

/// Minimizable generator loss `-(L_C2 - L_S_fake)` for fake images still
/// attached to the generator graph. The discriminator is bound frozen.
pub fn generator_objective<T: Real>(
    disc: &Discriminator<T>,
    g: &mut Graph<T>,
    fake_images: Var,
    labels: &[usize],
    _mode: LossMode,
) -> Result<Var> {
    if !g.requires_grad(fake_images) {
        return Err(Error::Contract(
            "generator objective needs fake images attached to the generator graph".into(),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Validation("fake batch is empty".into()));
    }
    let params = disc.params.bind(g, false);
    let out = disc.forward(g, &params, fake_images)?;
    let zeros = vec![T::zero(); labels.len()];
    // -L_S_fake
    let bce_f = g.bce_with_logits(out.rf, &zeros, Reduction::Mean)?;
    // -L_C2
    let ce_f = g.softmax_cross_entropy(out.class_logits, labels, Reduction::Mean)?;
    g.sub(ce_f, bce_f)
}

/// Classification cross-entropy of the class head on `x`.
pub fn classification_loss<T: Real>(
    disc: &Discriminator<T>,
    g: &mut Graph<T>,
    params: &Bound,
    x: Var,
    labels: &[usize],
    reduction: Reduction,
) -> Result<Var> {
    let out = disc.forward(g, params, x)?;
    g.softmax_cross_entropy(out.class_logits, labels, reduction)
}

/// Fine-tuning loss `CE(real_adv) + λ·CE(fake_adv)` on the class head.
/// Returns the loss and the trainable discriminator leaves.
pub fn finetune_loss<T: Real>(
    disc: &Discriminator<T>,
    g: &mut Graph<T>,
    real_adv: &Batch<T>,
    fake_adv: Option<&Batch<T>>,
    lambda: f64,
) -> Result<(Var, Bound)> {
    if !(lambda >= 0.0) {
        return Err(Error::Validation(format!("lambda must be >= 0, got {lambda}")));
    }
    non_empty("real", real_adv)?;
    let params = disc.params.bind(g, true);
    let xr = g.constant(real_adv.images.clone());
    let mut loss = classification_loss(disc, g, &params, xr, &real_adv.labels, Reduction::Mean)?;
    if lambda > 0.0 {
        let fake = fake_adv.ok_or_else(|| {
            Error::Contract("lambda > 0 requires a fake batch".into())
        })?;
        non_empty("fake", fake)?;
        let xf = g.constant(fake.images.clone());
        let ce_f = classification_loss(disc, g, &params, xf, &fake.labels, Reduction::Mean)?;
        let weighted = g.scale(ce_f, lambda)?;
        loss = g.add(loss, weighted)?;
    }
    Ok((loss, params))
}

/// Loss maximized by the attacker on a batch with the given labels.
pub fn attack_loss<'a, T: Real>(
    disc: &'a Discriminator<T>,
    labels: &'a [usize],
    target: AttackTarget,
) -> impl FnMut(&mut Graph<T>, Var) -> Result<Var> + 'a {
    move |g: &mut Graph<T>, x: Var| {
        let params = disc.params.bind(g, false);
        let out = disc.forward(g, &params, x)?;
        let ce = g.softmax_cross_entropy(out.class_logits, labels, Reduction::Mean)?;
        match target {
            AttackTarget::Classification => Ok(ce),
            AttackTarget::Joint => {
                let ones = vec![T::one(); labels.len()];
                let bce = g.bce_with_logits(out.rf, &ones, Reduction::Mean)?;
                g.add(ce, bce)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BatchKind;
    use crate::models::ModelConfig;
    use crate::rng;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn setup(n: usize, seed: u64) -> (Discriminator<f64>, Batch<f64>, Batch<f64>) {
        let cfg = ModelConfig::default();
        let disc = Discriminator::init(&cfg, &mut rng::derive(seed, "d")).unwrap();
        let mut r = rng::derive(seed, "b");
        let mut mk = |kind| {
            let data = (0..n * 256).map(|_| r.gen_range(-1.0..1.0)).collect();
            let labels = (0..n).map(|_| r.gen_range(0..4)).collect();
            Batch::new(Tensor::new(vec![n, 1, 16, 16], data).unwrap(), labels, kind).unwrap()
        };
        let real = mk(BatchKind::Real);
        let fake = mk(BatchKind::Fake);
        (disc, real, fake)
    }

    #[test]
    fn zero_rf_logits_give_two_ln2_discrimination_loss() {
        let (mut disc, real, fake) = setup(3, 1);
        // zero the rf head: logits are exactly 0
        for name in crate::models::RF_HEAD {
            let t = disc.params.get_mut(name).unwrap();
            *t = Tensor::zeros(t.dims());
        }
        let mut g = Graph::new();
        let r = discriminator_objective(&disc, &mut g, &real, &fake, LossMode::Split).unwrap();
        assert!((r.report.l_s() + 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn split_mode_ignores_fake_classification_gradient() {
        let (disc, real, fake) = setup(4, 2);
        let grads = |fake: &Batch<f64>| {
            let mut g = Graph::new();
            let r = discriminator_objective(&disc, &mut g, &real, fake, LossMode::Split).unwrap();
            g.backward(r.loss).unwrap();
            disc.params.grads(&mut g, &r.params)
        };
        // relabelling fakes changes only L_C2, which split mode leaves out
        let mut relabelled = fake.clone();
        relabelled.labels.iter_mut().for_each(|l| *l = (*l + 1) % 4);
        assert_eq!(grads(&fake), grads(&relabelled));
    }

    #[test]
    fn generator_objective_requires_attached_images() {
        let (disc, _, fake) = setup(2, 3);
        let mut g = Graph::new();
        let x = g.constant(fake.images.clone());
        let err = generator_objective(&disc, &mut g, x, &fake.labels, LossMode::Split).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn generator_objective_leaves_disc_without_gradients() {
        let (disc, _, fake) = setup(2, 3);
        let mut g = Graph::new();
        let x = g.param(fake.images.clone());
        let loss = generator_objective(&disc, &mut g, x, &fake.labels, LossMode::Acgan).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_some());
        assert_eq!(g.grad_count(), 1);
    }

    #[test]
    fn finetune_reductions() {
        let (disc, real, fake) = setup(3, 4);
        let eval = |fake: Option<&Batch<f64>>, lambda| {
            let mut g = Graph::new();
            let (l, _) = finetune_loss(&disc, &mut g, &real, fake, lambda).unwrap();
            g.value(l).item().unwrap()
        };
        let plain = {
            let mut g = Graph::new();
            let p = disc.params.bind(&mut g, true);
            let x = g.constant(real.images.clone());
            let l = classification_loss(&disc, &mut g, &p, x, &real.labels, Reduction::Mean).unwrap();
            g.value(l).item().unwrap()
        };
        assert_eq!(eval(Some(&fake), 0.0), plain);
        assert_eq!(eval(None, 0.0), plain);
        assert_eq!(eval(Some(&real), 1.0), 2.0 * plain);
        let mut g = Graph::new();
        assert!(matches!(
            finetune_loss(&disc, &mut g, &real, Some(&fake), -0.5),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn empty_batches_are_rejected() {
        let (disc, real, _) = setup(2, 5);
        let empty = Batch::new(Tensor::zeros(&[0, 1, 16, 16]), vec![], BatchKind::Fake).unwrap();
        let mut g = Graph::new();
        assert!(discriminator_objective(&disc, &mut g, &real, &empty, LossMode::Split).is_err());
    }
}
