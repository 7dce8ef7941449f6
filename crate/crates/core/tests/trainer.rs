use robgan::attack::AttackConfig;
use robgan::data::{synth_shapes, Batch, Dataset, SynthSpec};
use robgan::losses::LossMode;
use robgan::metrics::metrics_csv;
use robgan::models::{Discriminator, Generator};
use robgan::train::{
    finetune, train_adversarial_baseline, train_augmented, train_clean, train_robgan, MetricsConfig,
    Session, StepKind, StepObserver, TrainConfig, TrainMode,
};
use robgan::Error;

fn tiny(per_class: usize) -> (Dataset, Dataset) {
    synth_shapes(&SynthSpec {
        seed: 5,
        train_per_class: per_class,
        test_per_class: 2,
        ..Default::default()
    })
    .unwrap()
}

fn cfg(mode: TrainMode) -> TrainConfig {
    let mut c = TrainConfig {
        mode,
        epochs: 2,
        batch_size: 4,
        seed: 11,
        attack: AttackConfig {
            steps: 3,
            ..AttackConfig::training(0.1)
        },
        ..Default::default()
    };
    c.metrics = MetricsConfig {
        subset: 8,
        eval_steps: 2,
        oracle_samples: 8,
        fake_probe: 4,
        ..Default::default()
    };
    c
}

#[test]
fn loop_accounting_one_g_step_per_d_step() {
    let (train, test) = tiny(2);
    assert_eq!(train.len(), 8);
    for bs in [1, 3, 8, 20] {
        let c = TrainConfig { epochs: 1, batch_size: bs, ..cfg(TrainMode::Robgan) };
        let mut s = Session::<f64>::robgan(&c, &train, &test).unwrap();
        s.run().unwrap();
        let want = 8usize.div_ceil(bs) as u64;
        assert_eq!(s.counters().d_steps, want, "bs {bs}");
        assert_eq!(s.counters().g_steps, want, "bs {bs}");
    }
}

#[test]
fn g_step_after_every_k_d_steps() {
    let (train, test) = tiny(2);
    let c = TrainConfig { epochs: 1, batch_size: 1, d_steps_per_g_step: 3, ..cfg(TrainMode::Robgan) };
    let mut s = Session::<f64>::robgan(&c, &train, &test).unwrap();
    s.run().unwrap();
    // 8 batches: G after batches 3, 6 and the trailing partial group
    assert_eq!((s.counters().d_steps, s.counters().g_steps), (8, 3));
}

#[test]
fn robgan_is_deterministic_and_records_all_columns() {
    let (train, test) = tiny(3);
    let c = cfg(TrainMode::Robgan);
    let a = train_robgan::<f64>(&train, &test, &c, None).unwrap();
    let b = train_robgan::<f64>(&train, &test, &c, None).unwrap();
    assert_eq!(metrics_csv(&a.metrics).unwrap(), metrics_csv(&b.metrics).unwrap());
    assert!(a.gen.params.bits_equal(&b.gen.params));
    assert!(a.disc.params.bits_equal(&b.disc.params));
    assert_eq!(a.metrics.len(), 2);
    for r in &a.metrics {
        assert!(r.g_step_norm.unwrap() > 0.0);
        assert!(r.d_input_grad_norm_on_fake.unwrap() >= 0.0);
        assert!(r.robust_test_acc.is_some() && r.llv_test.is_some());
    }
    let other = TrainConfig { seed: 12, ..c };
    let d = train_robgan::<f64>(&train, &test, &other, None).unwrap();
    assert!(!a.disc.params.bits_equal(&d.disc.params));
}

#[test]
fn mode_mismatch_is_a_config_error() {
    let (train, test) = tiny(2);
    let err = train_robgan::<f64>(&train, &test, &cfg(TrainMode::Clean), None).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
    let err = train_clean::<f64>(&train, &test, &cfg(TrainMode::Robgan)).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn invalid_config_rejected() {
    let (train, test) = tiny(2);
    for bad in [
        TrainConfig { epochs: 0, ..cfg(TrainMode::Clean) },
        TrainConfig { batch_size: 0, ..cfg(TrainMode::Clean) },
        TrainConfig { d_steps_per_g_step: 0, ..cfg(TrainMode::Clean) },
        TrainConfig { lambda: -1.0, ..cfg(TrainMode::Clean) },
    ] {
        assert!(matches!(train_clean::<f64>(&train, &test, &bad), Err(Error::Config(_))));
    }
    let mut c = cfg(TrainMode::Clean);
    c.classifier_optimizer.lr = 0.0;
    assert!(train_clean::<f64>(&train, &test, &c).is_err());
}

#[test]
fn augmented_without_generator_is_rejected() {
    let (train, test) = tiny(2);
    let c = cfg(TrainMode::AdvTrainAugmented);
    let err = Session::<f64>::classifier(&c, &train, &test, None).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
}

fn some_generator(c: &TrainConfig) -> Generator<f64> {
    Generator::init(&c.model, &mut robgan::rng::derive(99, "g")).unwrap()
}

#[test]
fn augmented_with_zero_lambda_matches_baseline() {
    let (train, test) = tiny(3);
    let base = train_adversarial_baseline::<f64>(&train, &test, &cfg(TrainMode::AdvTrainBaseline)).unwrap();
    let c = TrainConfig { lambda: 0.0, ..cfg(TrainMode::AdvTrainAugmented) };
    let aug = train_augmented(&train, &test, &c, &some_generator(&c)).unwrap();
    assert!(base.disc.params.bits_equal(&aug.disc.params));
    assert_eq!(metrics_csv(&base.metrics).unwrap(), metrics_csv(&aug.metrics).unwrap());
}

#[test]
fn augmented_attacks_twice_as_many_images() {
    let (train, test) = tiny(2);
    let base_cfg = TrainConfig { epochs: 1, ..cfg(TrainMode::AdvTrainBaseline) };
    let mut base = Session::<f64>::classifier(&base_cfg, &train, &test, None).unwrap();
    base.run().unwrap();
    let c = TrainConfig { epochs: 1, ..cfg(TrainMode::AdvTrainAugmented) };
    let mut aug = Session::classifier(&c, &train, &test, Some(some_generator(&c))).unwrap();
    aug.run().unwrap();
    assert_eq!(base.counters().attacked_images, 8);
    assert_eq!(aug.counters().attacked_images, 16);
}

#[test]
fn zero_radius_adversarial_training_matches_clean() {
    let (train, test) = tiny(3);
    let clean = train_clean::<f64>(&train, &test, &cfg(TrainMode::Clean)).unwrap();
    let mut c = cfg(TrainMode::AdvTrainBaseline);
    c.attack = AttackConfig::training(0.0);
    c.metrics.eval_delta = Some(0.1);
    let adv = train_adversarial_baseline::<f64>(&train, &test, &c).unwrap();
    assert!(clean.disc.params.bits_equal(&adv.disc.params));
}

#[test]
fn zero_finetune_epochs_leaves_parameters_unchanged() {
    let (train, test) = tiny(2);
    let c = TrainConfig { epochs: 1, ..cfg(TrainMode::Robgan) };
    let run = train_robgan::<f64>(&train, &test, &c, None).unwrap();
    let ft = TrainConfig { finetune_epochs: Some(0), ..c };
    let out = finetune(&run.disc, &run.gen, &train, &test, &ft).unwrap();
    assert!(out.disc.params.bits_equal(&run.disc.params));
    assert!(out.metrics.is_empty());
}

#[test]
fn finetune_touches_only_the_class_head_path_and_is_deterministic() {
    let (train, test) = tiny(2);
    let c = TrainConfig { epochs: 1, ..cfg(TrainMode::Robgan) };
    let run = train_robgan::<f64>(&train, &test, &c, None).unwrap();
    let ft = TrainConfig { finetune_epochs: Some(2), ..c };
    let a = finetune(&run.disc, &run.gen, &train, &test, &ft).unwrap();
    let b = finetune(&run.disc, &run.gen, &train, &test, &ft).unwrap();
    assert!(a.disc.params.bits_equal(&b.disc.params));
    assert_eq!(a.metrics.len(), 2);
    for (name, t) in a.disc.params.iter() {
        let before = run.disc.params.get(name).unwrap();
        let same = t.data().iter().zip(before.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert_eq!(same, name.starts_with("d.rf."), "{name}");
    }
}

#[test]
fn default_finetune_duration_is_a_fifth_of_training() {
    let c = |epochs| TrainConfig { epochs, ..Default::default() };
    assert_eq!(c(10).resolved_finetune_epochs(), 2);
    assert_eq!(c(2).resolved_finetune_epochs(), 1);
    assert_eq!(c(1).resolved_finetune_epochs(), 1);
}

#[derive(Default)]
struct Spy {
    last: Option<(Vec<u64>, Vec<u64>)>,
    d_steps: usize,
    g_steps: usize,
    attacks: usize,
}

fn bits<T: robgan::Real>(p: &robgan::params::ParamSet<T>) -> Vec<u64> {
    p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64().to_bits())).collect()
}

impl StepObserver<f64> for Spy {
    fn on_attack(&mut self, orig: &Batch<f64>, adv: &Batch<f64>, cfg: &AttackConfig) {
        robgan::attack::check_containment(orig, adv, cfg).unwrap();
        self.attacks += 1;
    }

    fn on_step(&mut self, kind: StepKind, gen: Option<&Generator<f64>>, disc: &Discriminator<f64>) {
        let now = (bits(&gen.unwrap().params), bits(&disc.params));
        if let Some((g0, d0)) = &self.last {
            match kind {
                StepKind::Discriminator => {
                    assert_eq!(g0, &now.0, "generator moved during a D-step");
                    assert_ne!(d0, &now.1);
                    self.d_steps += 1;
                }
                StepKind::Generator => {
                    assert_eq!(d0, &now.1, "discriminator moved during a G-step");
                    assert_ne!(g0, &now.0);
                    self.g_steps += 1;
                }
            }
        }
        self.last = Some(now);
    }
}

#[test]
fn players_are_frozen_during_each_others_steps() {
    let (train, test) = tiny(2);
    let c = TrainConfig { epochs: 1, batch_size: 2, ..cfg(TrainMode::Robgan) };
    let mut spy = Spy::default();
    {
        let mut s = Session::<f64>::robgan(&c, &train, &test).unwrap().with_observer(&mut spy);
        s.run().unwrap();
    }
    assert_eq!(spy.attacks, 4);
    assert_eq!(spy.d_steps + spy.g_steps, 7);
}

#[test]
fn divergence_reports_iteration() {
    let (train, test) = tiny(2);
    let mut c = cfg(TrainMode::Clean);
    c.classifier_optimizer.lr = 1e30;
    let err = train_clean::<f32>(&train, &test, &c).err().unwrap();
    assert!(matches!(err, Error::Divergence { iteration, .. } if iteration >= 1), "{err:?}");
}

#[test]
fn resume_matches_uninterrupted_training() {
    let (train, test) = tiny(2);
    let c = TrainConfig { epochs: 3, ..cfg(TrainMode::Robgan) };
    let mut full = Session::<f32>::robgan(&c, &train, &test).unwrap();
    let full_metrics = full.run().unwrap();

    let mut first = Session::<f32>::robgan(&c, &train, &test).unwrap();
    let mut metrics = vec![first.run_epoch().unwrap()];
    let bytes = first.checkpoint().encode();
    drop(first);
    let ckpt = robgan::checkpoint::Checkpoint::decode(&bytes).unwrap();
    let mut resumed = Session::<f32>::robgan(&c, &train, &test).unwrap();
    resumed.restore(&ckpt).unwrap();
    assert_eq!(resumed.epoch(), 1);
    metrics.extend(resumed.run().unwrap());

    assert_eq!(metrics_csv(&metrics).unwrap(), metrics_csv(&full_metrics).unwrap());
    assert!(resumed.disc.params.bits_equal(&full.disc.params));
    assert!(resumed.gen.as_ref().unwrap().params.bits_equal(&full.gen.as_ref().unwrap().params));
    assert_eq!(resumed.counters(), full.counters());
}

#[test]
fn restore_rejects_other_config() {
    let (train, test) = tiny(2);
    let c = TrainConfig { epochs: 1, ..cfg(TrainMode::Robgan) };
    let s = Session::<f32>::robgan(&c, &train, &test).unwrap();
    let ckpt = s.checkpoint();
    let other = TrainConfig { lambda: 0.5, ..c };
    let mut t = Session::<f32>::robgan(&other, &train, &test).unwrap();
    assert!(matches!(t.restore(&ckpt), Err(Error::Mismatch(_))));
}

#[test]
fn acgan_mode_trains_too() {
    let (train, test) = tiny(2);
    let c = TrainConfig { epochs: 1, loss_mode: LossMode::Acgan, attack_enabled: false, ..cfg(TrainMode::Robgan) };
    let run = train_robgan::<f64>(&train, &test, &c, None).unwrap();
    assert!(run.metrics[0].g_loss.unwrap().is_finite());
}
