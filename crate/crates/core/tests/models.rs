use seismoforge::models::*;
use seismoforge::rng;
use seismoforge::tensor::{Graph, ParamStore, Tensor};

fn waveforms(n: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    Tensor::new(vec![n, 3, 1600], rng::normal_vec(&mut r, n * 4800)).unwrap()
}

fn noise(gen: &Generator, n: usize, seed: u64) -> Tensor<f64> {
    let shape = gen.z_shape(n);
    let mut r = rng::seeded(seed);
    Tensor::new(shape.to_vec(), rng::normal_vec(&mut r, shape.iter().product())).unwrap()
}

fn run_generator(gen: &Generator, store: &ParamStore<f64>, z: &Tensor<f64>, labels: &[u8], mode: BnMode) -> Tensor<f64> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone()).unwrap();
    let yv = g.constant(label_tensor(labels)).unwrap();
    let out = gen.forward(&mut g, store, zv, yv, mode, false).unwrap();
    g.value(out.x).clone()
}

fn run_critic(d: &Discriminator, store: &ParamStore<f64>, x: &Tensor<f64>, labels: &[u8]) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let yv = g.constant(label_tensor(labels)).unwrap();
    let s = d.forward(&mut g, store, xv, yv, false).unwrap();
    g.value(s).clone()
}

#[test]
fn generator_emits_three_channels_of_1600_for_every_baseline() {
    for b in Baseline::ALL {
        let gen = Generator::new(b.generator()).unwrap();
        let store = gen.init::<f64>(1).unwrap();
        let z = noise(&gen, 2, 2);
        for mode in [BnMode::Train, BnMode::Eval] {
            let x = run_generator(&gen, &store, &z, &[0, 1], mode);
            assert_eq!(x.shape(), &[2, 3, 1600], "{b}");
            assert!(x.all_finite(), "{b}");
        }
    }
}

#[test]
fn critic_features_and_scores_have_expected_shapes() {
    for b in Baseline::ALL {
        let d = Discriminator::new(b.discriminator()).unwrap();
        let store = d.init::<f64>(3).unwrap();
        let x = waveforms(2, 4);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let yv = g.constant(label_tensor(&[1, 0])).unwrap();
        let f = d.features(&mut g, &store, xv, yv, false).unwrap();
        assert_eq!(g.shape(f), &[2, 96, 800], "{b}");
        let s = run_critic(&d, &store, &x, &[1, 0]);
        assert_eq!(s.shape(), &[2, 1, 1], "{b}");
        assert!(s.all_finite(), "{b}");
    }
}

#[test]
fn classifier_emits_two_logits() {
    let c = Classifier::new(ClassifierConfig::default()).unwrap();
    let store = c.init::<f64>(5).unwrap();
    let mut g = Graph::new();
    let x = g.constant(waveforms(3, 6)).unwrap();
    let logits = c.forward(&mut g, &store, x, false).unwrap();
    assert_eq!(g.shape(logits), &[3, 1, 2]);
}

#[test]
fn zero_parameters_give_zero_output() {
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let mut store = gen.init::<f64>(7).unwrap();
    store.fill(0.0);
    let x = run_generator(&gen, &store, &noise(&gen, 2, 8), &[1, 0], BnMode::Train);
    assert!(x.data().iter().all(|&v| v == 0.0));

    let d = Discriminator::new(DiscriminatorConfig::default()).unwrap();
    let mut ds = d.init::<f64>(9).unwrap();
    ds.fill(0.0);
    let s = run_critic(&d, &ds, &waveforms(2, 10), &[1, 0]);
    assert!(s.data().iter().all(|&v| v == 0.0));
}

#[test]
fn pipelines_only_touch_their_own_channel() {
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let store = gen.init::<f64>(11).unwrap();
    let z = noise(&gen, 2, 12);
    let base = run_generator(&gen, &store, &z, &[1, 0], BnMode::Eval);
    for (c, p) in ["e", "n", "z"].iter().enumerate() {
        let mut bumped = store.clone();
        let w = bumped.get_mut(&format!("g.{p}.c3.w")).unwrap();
        w.data_mut().iter_mut().for_each(|v| *v += 0.05);
        let x = run_generator(&gen, &bumped, &z, &[1, 0], BnMode::Eval);
        for n in 0..2 {
            for ch in 0..3 {
                let a = &base.data()[(n * 3 + ch) * 1600..(n * 3 + ch + 1) * 1600];
                let b = &x.data()[(n * 3 + ch) * 1600..(n * 3 + ch + 1) * 1600];
                assert_eq!(a != b, ch == c, "pipeline {p} channel {ch}");
            }
        }
    }
}

#[test]
fn shared_input_feeds_one_noise_tensor_to_every_pipeline() {
    let gen = Generator::new(Baseline::None.generator()).unwrap();
    let store = gen.init::<f64>(13).unwrap();
    let mut g = Graph::new();
    let z = g.constant(noise(&gen, 2, 14)).unwrap();
    let y = g.constant(label_tensor(&[0, 1])).unwrap();
    let out = gen.forward(&mut g, &store, z, y, BnMode::Eval, false).unwrap();
    assert_eq!(out.pipeline_inputs, vec![z, z, z]);

    let gen = Generator::new(Baseline::B2.generator()).unwrap();
    assert_eq!(gen.z_shape(2), [2, 3, 400]);
    let store = gen.init::<f64>(15).unwrap();
    let mut g = Graph::new();
    let z = g.constant(noise(&gen, 2, 16)).unwrap();
    let y = g.constant(label_tensor(&[0, 1])).unwrap();
    let out = gen.forward(&mut g, &store, z, y, BnMode::Eval, false).unwrap();
    assert_eq!(out.pipeline_inputs.len(), 3);
    let rows: Vec<Vec<f64>> = out.pipeline_inputs.iter().map(|&v| g.value(v).data().to_vec()).collect();
    assert_ne!(rows[0], rows[1]);
    assert_ne!(rows[1], rows[2]);
    assert_eq!(g.shape(out.pipeline_inputs[0]), &[2, 1, 400]);
}

#[test]
fn outputs_depend_on_the_label() {
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let store = gen.init::<f64>(17).unwrap();
    let z = noise(&gen, 1, 18);
    let a = run_generator(&gen, &store, &z, &[0], BnMode::Eval);
    let b = run_generator(&gen, &store, &z, &[1], BnMode::Eval);
    assert_ne!(a, b);

    let d = Discriminator::new(DiscriminatorConfig::default()).unwrap();
    let ds = d.init::<f64>(19).unwrap();
    let x = waveforms(1, 20);
    assert_ne!(run_critic(&d, &ds, &x, &[0]), run_critic(&d, &ds, &x, &[1]));
}

#[test]
fn baseline_names_round_trip() {
    for b in Baseline::ALL {
        assert_eq!(b.to_string().parse::<Baseline>().unwrap(), b);
    }
    assert!("b8".parse::<Baseline>().is_err());
    assert_eq!(Baseline::B3.generator().kernel_size, 4);
    assert_eq!(Baseline::B4.generator().kernel_size, 32);
    assert_eq!(Baseline::B5.discriminator().kernel_size, 4);
    assert_eq!(Baseline::B6.discriminator().kernel_size, 128);
    assert_eq!(Baseline::B6.discriminator().critic_kernel, 16);
    assert!(!Baseline::B7.discriminator().spectral_split);
}

#[test]
fn running_statistics_follow_the_momentum_rule() {
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let mut store = gen.init::<f64>(21).unwrap();
    let mut g = Graph::new();
    let z = g.constant(noise(&gen, 4, 22)).unwrap();
    let y = g.constant(label_tensor(&[0, 1, 0, 1])).unwrap();
    let out = gen.forward(&mut g, &store, z, y, BnMode::Train, false).unwrap();
    assert_eq!(out.bn_updates.len(), 9);
    let (prefix, st) = &out.bn_updates[1];
    let before = store.get(&format!("{prefix}.var")).unwrap().data().to_vec();
    apply_bn_updates(&mut store, &out.bn_updates, 0.1).unwrap();
    let after = store.get(&format!("{prefix}.var")).unwrap().data().to_vec();
    for ((a, b), s) in after.iter().zip(&before).zip(st.var.iter()) {
        assert!((a - (0.9 * b + 0.1 * s)).abs() < 1e-15);
    }
}

#[test]
fn argmax_breaks_ties_toward_class_zero() {
    assert_eq!(argmax(&[0.5f64, 0.5]), 0);
    assert_eq!(argmax(&[0.1f64, 0.7]), 1);
    assert_eq!(argmax(&[0.9f64, 0.7]), 0);
}
