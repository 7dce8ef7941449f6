use proptest::prelude::*;
use rand::Rng;
use robgan::attack::{check_containment, fgsm, pgd_attack, AttackConfig};
use robgan::data::{synth_shapes, Batch, BatchKind, Dataset, SynthSpec};
use robgan::eval::{self, input_grad_norms, oracle_score, robust_accuracy_sweep};
use robgan::losses::{finetune_loss, generator_objective, LossMode};
use robgan::models::{Discriminator, Generator, ModelConfig};
use robgan::rng;
use robgan::{Graph, Reduction, Tensor, Var};

fn random_batch(n: usize, seed: u64, kind: BatchKind) -> Batch<f64> {
    let mut r = rng::derive(seed, "batch");
    let data = (0..n * 256).map(|_| r.gen_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| r.gen_range(0..4)).collect();
    Batch::new(Tensor::new(vec![n, 1, 16, 16], data).unwrap(), labels, kind).unwrap()
}

fn log_softmax(row: &[f64], y: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[y] - lse
}

fn mean_ce(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let k = logits.dims()[1];
    let rows = logits.data().chunks(k);
    -rows.zip(labels).map(|(r, &y)| log_softmax(r, y)).sum::<f64>() / labels.len() as f64
}

#[test]
fn generator_objective_matches_hand_composition() {
    let disc = Discriminator::<f64>::init(&ModelConfig::default(), &mut rng::derive(3, "d")).unwrap();
    let fake = random_batch(2, 4, BatchKind::Fake);
    let (rf, logits) = disc.discriminate(&fake.images).unwrap();

    // CE on the class head minus BCE(rf, fake) = ln(1 + e^s)
    let ce = mean_ce(&logits, &fake.labels);
    let bce: f64 = rf.data().iter().map(|s| (1.0 + s.exp()).ln()).sum::<f64>() / 2.0;
    let expected = ce - bce;

    let mut g = Graph::new();
    let x = g.leaf(fake.images.clone(), true);
    let l = generator_objective(&disc, &mut g, x, &fake.labels, LossMode::Split).unwrap();
    assert!((g.value(l).item().unwrap() - expected).abs() < 1e-10);
}

#[test]
fn finetune_loss_matches_independent_evaluator() {
    let disc = Discriminator::<f64>::init(&ModelConfig::default(), &mut rng::derive(5, "d")).unwrap();
    let real = random_batch(2, 6, BatchKind::Real);
    let fake = random_batch(2, 7, BatchKind::Fake);
    for lambda in [0.0, 0.3, 1.0, 2.5] {
        let (_, lr) = disc.discriminate(&real.images).unwrap();
        let (_, lf) = disc.discriminate(&fake.images).unwrap();
        let expected = mean_ce(&lr, &real.labels) + lambda * mean_ce(&lf, &fake.labels);
        let mut g = Graph::new();
        let (l, _) = finetune_loss(&disc, &mut g, &real, Some(&fake), lambda).unwrap();
        assert!((g.value(l).item().unwrap() - expected).abs() < 1e-10, "lambda {lambda}");
    }
}

#[test]
fn losses_stay_finite_at_saturated_logits() {
    let mut g = Graph::<f64>::new();
    let z = g.leaf(Tensor::new(vec![2, 3], vec![30.0, -30.0, 0.0, -30.0, 30.0, 30.0]).unwrap(), true);
    let ce = g.softmax_cross_entropy(z, &[1, 0], Reduction::Mean).unwrap();
    let s = g.leaf(Tensor::new(vec![4], vec![30.0, -30.0, 30.0, -30.0]).unwrap(), true);
    let bce = g.bce_with_logits(s, &[0.0, 1.0, 1.0, 0.0], Reduction::Mean).unwrap();
    let total = g.add(ce, bce).unwrap();
    g.backward(total).unwrap();
    assert!(g.value(total).item().unwrap().is_finite());
    assert!(g.grad(z).unwrap().data().iter().chain(g.grad(s).unwrap().data()).all(|v| v.is_finite()));
    // the wrong-sided BCE terms cost about 30 each
    assert!((g.value(bce).item().unwrap() - 15.0).abs() < 1e-6);
}

#[test]
fn llv_of_linear_softmax_matches_analytic_gradient() {
    // logits = x W, CE gradient wrt x is W (softmax(xW) - onehot(y))
    let (d, k) = (6, 3);
    let mut r = rng::derive(8, "linear");
    for _ in 0..10 {
        let w: Vec<f64> = (0..d * k).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = r.gen_range(0..k);
        let batch = Batch::new(Tensor::new(vec![1, 1, 2, 3], x.clone()).unwrap(), vec![y], BatchKind::Real).unwrap();
        let wt = Tensor::new(vec![d, k], w.clone()).unwrap();
        let norms = input_grad_norms(&batch, |g: &mut Graph<f64>, x: Var| {
            let flat = g.reshape(x, &[1, d])?;
            let wv = g.constant(wt);
            let logits = g.matmul(flat, wv)?;
            g.softmax_cross_entropy(logits, &[y], Reduction::Sum)
        })
        .unwrap();

        let z: Vec<f64> = (0..k).map(|j| (0..d).map(|i| x[i] * w[i * k + j]).sum()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = (0..k).map(|j| e[j] / s - if j == y { 1.0 } else { 0.0 }).collect();
        let grad_sq: f64 = (0..d)
            .map(|i| (0..k).map(|j| w[i * k + j] * p[j]).sum::<f64>().powi(2))
            .sum();
        assert!((norms[0] - grad_sq.sqrt()).abs() < 1e-8);
    }
}

#[test]
fn untrained_model_is_at_chance_without_attack() {
    // An attack can push a random network below chance, so only the clean
    // point is pinned to 0.25; attacked points may only go down from there.
    let (train, test) = synth_shapes(&SynthSpec::default()).unwrap();
    let deltas = [0.0, 0.05, 0.1];
    for seed in 0..3 {
        let disc = Discriminator::<f32>::init(&ModelConfig::default(), &mut rng::derive(seed, "untrained")).unwrap();
        let sweep =
            robust_accuracy_sweep(&disc, &train.head(200), &test.head(200), &deltas, &AttackConfig::evaluation(1.0), seed)
                .unwrap();
        let clean = sweep.points[0].test_acc;
        assert!((clean - 0.25).abs() <= 0.1, "seed {seed}: clean accuracy {clean}");
        for p in &sweep.points {
            assert!(p.test_acc <= clean + 0.05, "seed {seed}: {p:?}");
        }
    }
}

#[test]
fn oracle_score_is_deterministic_per_seed() {
    let cfg = ModelConfig::default();
    let gen = Generator::<f32>::init(&cfg, &mut rng::derive(1, "g")).unwrap();
    let oracle = Discriminator::<f32>::init(&cfg, &mut rng::derive(1, "o")).unwrap();
    let score = |seed| oracle_score(&gen, &oracle, 40, &mut rng::derive(seed, "score")).unwrap();
    assert_eq!(score(9), score(9));
    assert!(oracle_score(&gen, &oracle, 3, &mut rng::derive(9, "score")).is_err());
}

fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let n = train.image_len();
    let mut centroids = vec![vec![0.0f64; n]; train.num_classes];
    let counts = train.class_counts();
    for i in 0..train.len() {
        let c = train.labels[i] as usize;
        for (a, &v) in centroids[c].iter_mut().zip(train.image(i)) {
            *a += v as f64 / counts[c] as f64;
        }
    }
    let nearest = |img: &[f32]| {
        let dist = |c: &Vec<f64>| c.iter().zip(img).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
        (0..centroids.len())
            .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
            .unwrap()
    };
    let correct = (0..test.len()).filter(|&i| nearest(test.image(i)) == test.labels[i] as usize).count();
    correct as f64 / test.len() as f64
}

#[test]
fn nearest_centroid_learns_synth_shapes() {
    for seed in 0..3 {
        let (train, test) = synth_shapes(&SynthSpec { seed, ..SynthSpec::default() }).unwrap();
        let acc = nearest_centroid_accuracy(&train, &test);
        assert!(acc >= 0.9, "seed {seed}: nearest-centroid accuracy {acc}");
    }
}

fn tiny_dataset_batch(ds: &Dataset, n: usize) -> Batch<f64> {
    ds.batch(&(0..n).collect::<Vec<_>>())
}

fn linear_loss(w: Vec<f64>) -> impl FnMut(&mut Graph<f64>, Var) -> robgan::Result<Var> {
    move |g, x| {
        let n = g.dims(x)[0];
        let per = w.len();
        let tiled = Tensor::new(g.dims(x).to_vec(), w.iter().cycle().take(n * per).cloned().collect())?;
        let wv = g.constant(tiled);
        let p = g.mul(x, wv)?;
        g.sum(p)
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn attacks_stay_inside_ball_and_pixel_range(
        delta in 0.0f64..0.5,
        steps in 0usize..6,
        fraction in 0.05f64..1.5,
        random_start in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let (train, _) = synth_shapes(&SynthSpec { train_per_class: 2, test_per_class: 1, ..SynthSpec::default() }).unwrap();
        let batch = tiny_dataset_batch(&train, 4);
        let disc = Discriminator::<f64>::init(&ModelConfig::default(), &mut rng::derive(seed, "d")).unwrap();
        let cfg = AttackConfig { delta_max: delta, steps, step_size: delta * fraction, random_start, ..AttackConfig::default() };
        let labels = batch.labels.clone();
        let adv = pgd_attack(
            robgan::losses::attack_loss(&disc, &labels, robgan::losses::AttackTarget::Joint),
            &batch,
            &cfg,
            &mut rng::derive(seed, "attack"),
        ).unwrap();
        prop_assert!(check_containment(&batch, &adv, &cfg).is_ok());
        for (a, o) in adv.images.data().iter().zip(batch.images.data()) {
            prop_assert!((a - o).abs() <= delta + 1e-12);
            prop_assert!((-1.0..=1.0).contains(a));
        }
    }

    #[test]
    fn larger_budget_never_lowers_linear_loss(
        seed in 0u64..1000,
        d1 in 0.0f64..0.2,
        extra in 0.0f64..0.2,
    ) {
        let mut r = rng::derive(seed, "w");
        let w: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..4).map(|_| r.gen_range(-0.5..0.5)).collect();
        let batch = Batch::new(Tensor::new(vec![1, 1, 2, 2], x).unwrap(), vec![0], BatchKind::Real).unwrap();
        let value = |b: &Batch<f64>| b.images.data().iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
        let small = fgsm(linear_loss(w.clone()), &batch, d1).unwrap();
        let large = fgsm(linear_loss(w.clone()), &batch, d1 + extra).unwrap();
        prop_assert!(value(&large) >= value(&small) - 1e-12);
        prop_assert!(value(&small) >= value(&batch) - 1e-12);
    }
}

#[test]
fn constant_first_layer_gives_zero_llv() {
    let (train, _) = synth_shapes(&SynthSpec { train_per_class: 3, test_per_class: 1, ..SynthSpec::default() }).unwrap();
    let mut disc = Discriminator::<f64>::init(&ModelConfig::default(), &mut rng::derive(2, "d")).unwrap();
    let t = disc.params.get_mut("d.conv1.w").unwrap();
    *t = Tensor::zeros(t.dims());
    let stats = eval::measure_llv(&disc, &train).unwrap();
    assert_eq!(stats.mean, 0.0);
    assert_eq!(stats.std, 0.0);
}
