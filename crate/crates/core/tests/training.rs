use seismoforge::dataset::{SampleSet, WaveformSample};
use seismoforge::models::*;
use seismoforge::rng;
use seismoforge::tensor::{Graph, ParamKind, ParamStore, Tensor};
use seismoforge::training::*;
use seismoforge::Error;

fn constant_grad_step(adam: &mut Adam<f64>, store: &mut ParamStore<f64>, grad: f64) {
    let mut g = Graph::new();
    let p = g.param(store, "p", true).unwrap();
    let n = g.value(p).len() as f64;
    let m = g.mean_all(p).unwrap();
    let loss = g.scale(m, grad * n).unwrap();
    let grads = g.backward(loss).unwrap();
    adam.step(store, &grads).unwrap();
}

#[test]
fn adam_matches_closed_form_under_constant_gradient() {
    let cfg = AdamConfig::gan();
    let mut store = ParamStore::new();
    store.insert("p", ParamKind::Trainable, Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
    let mut adam = Adam::new(cfg.clone());
    let g = 0.3;
    let steps = 25;
    for _ in 0..steps {
        constant_grad_step(&mut adam, &mut store, g);
    }
    // With bias correction, m_hat = g and v_hat = g^2 at every step.
    let delta = steps as f64 * cfg.lr * g / (g.abs() + cfg.eps);
    for (got, p0) in store.get("p").unwrap().data().iter().zip([0.5, -1.0, 2.0]) {
        assert!((got - (p0 - delta)).abs() < 1e-10, "{got} vs {}", p0 - delta);
    }
}

#[test]
fn adam_first_steps_match_hand_recursion() {
    let cfg = AdamConfig { lr: 0.01, beta1: 0.5, beta2: 0.9, eps: 1e-8 };
    let mut store = ParamStore::new();
    store.insert("p", ParamKind::Trainable, Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    let mut adam = Adam::new(cfg.clone());
    let grads = [0.2, -0.7, 1.5];
    let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 1.0f64);
    for (t, &gv) in grads.iter().enumerate() {
        constant_grad_step(&mut adam, &mut store, gv);
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * gv;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * gv * gv;
        let mh = m / (1.0 - cfg.beta1.powi(t as i32 + 1));
        let vh = v / (1.0 - cfg.beta2.powi(t as i32 + 1));
        p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        assert!((store.get("p").unwrap().item() - p).abs() < 1e-12);
    }
    assert_eq!(adam.steps(), 3);
}

#[test]
fn adam_leaves_buffers_alone() {
    let mut store = ParamStore::new();
    store.insert("p", ParamKind::Trainable, Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    store.insert("buf", ParamKind::Buffer, Tensor::new(vec![1], vec![4.0]).unwrap()).unwrap();
    let mut adam = Adam::new(AdamConfig::gan());
    constant_grad_step(&mut adam, &mut store, 1.0);
    assert_eq!(store.get("buf").unwrap().item(), 4.0);
    assert!(store.get("p").unwrap().item() < 1.0);
}

fn score_losses(fake: &[f64], real: &[f64], lambda: f64) -> (f64, f64) {
    let mut g = Graph::new();
    let f = g.constant(Tensor::new(vec![fake.len(), 1, 1], fake.to_vec()).unwrap()).unwrap();
    let r = g.constant(Tensor::new(vec![real.len(), 1, 1], real.to_vec()).unwrap()).unwrap();
    let ld = discriminator_loss_from_scores(&mut g, f, r, lambda).unwrap();
    let lg = generator_loss_from_scores(&mut g, f).unwrap();
    (g.value(ld).item(), g.value(lg).item())
}

fn loss_oracle(fake: &[f64], real: &[f64], lambda: f64) -> (f64, f64) {
    let mf = fake.iter().sum::<f64>() / fake.len() as f64;
    let mr = real.iter().sum::<f64>() / real.len() as f64;
    let pen = fake.iter().map(|s| (s.abs() - 1.0) * (s.abs() - 1.0)).sum::<f64>() / fake.len() as f64;
    (mf - mr + lambda * pen, -mf)
}

#[test]
fn losses_on_constant_critics() {
    assert_eq!(score_losses(&[0.0; 4], &[0.0; 4], 10.0), (10.0, 0.0));
    assert_eq!(score_losses(&[1.0; 4], &[5.0; 4], 10.0), (-4.0, -1.0));
    assert_eq!(score_losses(&[-1.0; 2], &[-1.0; 2], 10.0), (0.0, 1.0));
}

#[test]
fn losses_match_per_sample_oracle() {
    let mut r = rng::seeded(3);
    for _ in 0..20 {
        let fake: Vec<f64> = rng::normal_vec(&mut r, 7);
        let real: Vec<f64> = rng::normal_vec(&mut r, 7);
        let (ld, lg) = score_losses(&fake, &real, 10.0);
        let (od, og) = loss_oracle(&fake, &real, 10.0);
        assert!((ld - od).abs() < 1e-12 && (lg - og).abs() < 1e-12);
    }
}

#[test]
fn zero_critic_gives_lambda_through_the_network() {
    let models = GanModels::<f64>::for_baseline(Baseline::None, 1).unwrap();
    let mut d_params = models.d_params.clone();
    d_params.fill(0.0);
    let mut r = rng::seeded(4);
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 3, 1600], rng::normal_vec(&mut r, 9600)).unwrap()).unwrap();
    let z = g.constant(Tensor::new(vec![2, 1, 400], rng::normal_vec(&mut r, 800)).unwrap()).unwrap();
    let y = g.constant(label_tensor(&[1, 0])).unwrap();
    let fake = models.generator.forward(&mut g, &models.g_params, z, y, BnMode::Train, false).unwrap();
    let ld = loss_discriminator(&mut g, &models.discriminator, &d_params, x, y, fake.x, y, 10.0).unwrap();
    assert_eq!(g.value(ld).item(), 10.0);
}

fn toy_set(n_per_class: usize, seed: u64) -> SampleSet {
    let mut r = rng::seeded(seed);
    let mut samples = Vec::new();
    for i in 0..2 * n_per_class {
        let label = (i % 2) as u8;
        let mut data: Vec<f32> = rng::normal_vec(&mut r, 4800);
        if label == 1 {
            for v in &mut data[700..900] {
                *v *= 4.0;
            }
        }
        let data = seismoforge::dataset::normalize(&data).unwrap();
        samples.push(WaveformSample::new(data, label, (i * 1600) as u64).unwrap());
    }
    SampleSet::new(samples)
}

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 2, n_critic: 1, iterations: 2, seed, log_every: 0, ..Default::default() }
}

#[test]
fn gan_training_is_deterministic_and_moves_parameters() {
    let data = toy_set(3, 5);
    let run = || {
        let models = GanModels::<f32>::for_baseline(Baseline::None, 9).unwrap();
        train_gan(&data, models, &tiny_train(9)).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.models.g_params, b.models.g_params);
    assert_eq!(a.models.d_params, b.models.d_params);
    let init = GanModels::<f32>::for_baseline(Baseline::None, 9).unwrap();
    assert!(!changed_entries(&init.g_params, &a.models.g_params).is_empty());
    assert!(!changed_entries(&init.d_params, &a.models.d_params).is_empty());
    assert_eq!(a.curve.len(), 2);
    let csv = loss_csv(&a.curve);
    assert!(csv.starts_with("iteration,loss_d,loss_g,tau\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn tau_is_clamped_to_the_folded_range() {
    let data = toy_set(2, 6);
    let mut models = GanModels::<f32>::for_baseline(Baseline::None, 2).unwrap();
    models.d_params.set("d.tau", Tensor::scalar(5000.0)).unwrap();
    let out = train_gan(&data, models, &tiny_train(2)).unwrap();
    assert_eq!(out.curve[0].tau, TAU_MAX);
    let mut models = GanModels::<f32>::for_baseline(Baseline::None, 2).unwrap();
    models.d_params.set("d.tau", Tensor::scalar(-3.0)).unwrap();
    let out = train_gan(&data, models, &tiny_train(2)).unwrap();
    assert_eq!(out.curve[0].tau, TAU_MIN);
}

#[test]
fn divergence_is_reported() {
    let data = toy_set(2, 7);
    let cfg = TrainConfig { divergence_threshold: 1e-9, ..tiny_train(3) };
    let models = GanModels::<f32>::for_baseline(Baseline::None, 3).unwrap();
    match train_gan(&data, models, &cfg) {
        Err(Error::Diverged { iteration: 0, .. }) => {}
        other => panic!("expected divergence, got {:?}", other.err()),
    }
}

#[test]
fn unbalanced_training_data_is_rejected() {
    let set = toy_set(2, 8);
    let samples: Vec<_> = set.into_samples().into_iter().skip(1).collect();
    let models = GanModels::<f32>::for_baseline(Baseline::None, 3).unwrap();
    assert!(matches!(train_gan(&SampleSet::new(samples), models, &tiny_train(1)), Err(Error::Unbalanced(_))));
}

#[test]
fn generation_honours_the_label_choice() {
    let models = GanModels::<f32>::for_baseline(Baseline::None, 4).unwrap();
    let both = generate(&models.generator, &models.g_params, 6, LabelChoice::Both, 1).unwrap();
    assert_eq!((both.positive_count(), both.negative_count()), (3, 3));
    let pos = generate(&models.generator, &models.g_params, 3, LabelChoice::Positive, 1).unwrap();
    assert_eq!(pos.positive_count(), 3);
    let neg = generate(&models.generator, &models.g_params, 2, LabelChoice::Negative, 1).unwrap();
    assert_eq!(neg.negative_count(), 2);
    assert!(both.samples().iter().all(|s| s.origin_index() >= SYNTHETIC_ORIGIN_BASE));
    assert!(generate(&models.generator, &models.g_params, 5, LabelChoice::Both, 1).is_err());
    let again = generate(&models.generator, &models.g_params, 6, LabelChoice::Both, 1).unwrap();
    assert_eq!(both, again);
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let models = GanModels::<f32>::for_baseline(Baseline::B2, 5).unwrap();
    let r = rng::seeded(77);
    let mut ck = Checkpoint::new(ModelSpec::Generator(models.generator.cfg.clone()), &models.g_params).with_rng(&r);
    ck.iteration = 42;
    ck.extra.push(("lambda".into(), "10".into()));
    let bytes = ck.encode().unwrap();
    assert_eq!(&bytes[..4], b"SGCK");
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.rng().unwrap(), r);
    assert_eq!(back.encode().unwrap(), bytes);
    let gen = back.generator().unwrap();
    assert_eq!(gen.cfg, models.generator.cfg);
    assert!(back.discriminator().is_err());

    for spec in [
        ModelSpec::Discriminator(Baseline::B7.discriminator()),
        ModelSpec::Classifier(ClassifierConfig::default()),
    ] {
        let store = match &spec {
            ModelSpec::Discriminator(c) => Discriminator::new(c.clone()).unwrap().init::<f32>(3).unwrap(),
            ModelSpec::Classifier(c) => Classifier::new(c.clone()).unwrap().init::<f32>(3).unwrap(),
            ModelSpec::Generator(_) => unreachable!(),
        };
        let ck = Checkpoint::new(spec, &store);
        assert_eq!(Checkpoint::decode(&ck.encode().unwrap()).unwrap(), ck);
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let models = GanModels::<f32>::for_baseline(Baseline::None, 5).unwrap();
    let ck = Checkpoint::new(ModelSpec::Generator(models.generator.cfg.clone()), &models.g_params);
    let bytes = ck.encode().unwrap();
    assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::VersionMismatch { .. })));
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(Checkpoint::decode(&extra), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn classifier_learns_an_easy_split() {
    let data = toy_set(8, 9);
    let cfg = ClassifierTrainConfig { iterations: 60, batch_size: 8, seed: 1, log_every: 0, adam: AdamConfig { lr: 1e-3, ..AdamConfig::classifier() } };
    let out = train_classifier::<f32>(&data, ClassifierConfig::default(), &cfg).unwrap();
    let first: f64 = out.losses[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = out.losses[50..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "{first} -> {last}");
    let pred = predict(&out.classifier, &out.params, &data).unwrap();
    assert_eq!(pred.len(), data.len());
}

#[test]
fn zero_iterations_leave_the_initialization() {
    let data = toy_set(2, 10);
    let cfg = TrainConfig { iterations: 0, ..tiny_train(4) };
    let out = train_gan(&data, GanModels::<f32>::for_baseline(Baseline::None, 4).unwrap(), &cfg).unwrap();
    let init = GanModels::<f32>::for_baseline(Baseline::None, 4).unwrap();
    assert_eq!(out.models.g_params, init.g_params);
    assert_eq!(out.models.d_params, init.d_params);
    assert!(out.curve.is_empty());
}

fn accuracy(pred: &[u8], set: &SampleSet) -> f64 {
    pred.iter().zip(set.samples()).filter(|(p, s)| **p == s.label()).count() as f64 / set.len() as f64
}

#[test]
fn untrained_classifier_is_at_chance() {
    let test = toy_set(50, 11);
    let accs: Vec<f64> = (0..5)
        .map(|seed| {
            let cfg = ClassifierTrainConfig { iterations: 0, seed, log_every: 0, ..Default::default() };
            let out = train_classifier::<f32>(&test, ClassifierConfig::default(), &cfg).unwrap();
            accuracy(&predict(&out.classifier, &out.params, &test).unwrap(), &test)
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / 5.0;
    assert!((0.45..=0.55).contains(&mean), "{accs:?}");
}

#[test]
fn classifier_fits_separable_data() {
    let data = toy_set(32, 12);
    let cfg = ClassifierTrainConfig { iterations: 1500, batch_size: 8, seed: 2, log_every: 0, ..Default::default() };
    let out = train_classifier::<f32>(&data, ClassifierConfig::default(), &cfg).unwrap();
    let acc = accuracy(&predict(&out.classifier, &out.params, &data).unwrap(), &data);
    assert!(acc >= 0.99, "train accuracy {acc}");
    assert!(out.losses.iter().all(|l| l.is_finite()));
    // Means over consecutive 100-iteration blocks never rise.
    let blocks: Vec<f64> = out.losses.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in blocks.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "{blocks:?}");
    }
}
