#![allow(dead_code)]

use rand::Rng as _;
use seismoforge::dataset::{SampleSet, WINDOW_LEN};
use seismoforge::models::*;
use seismoforge::rng::{self, Rng};
use seismoforge::spectral::{Band, SplitMode};
use seismoforge::tensor::*;
use seismoforge::training::{discriminator_loss_from_scores, generator_loss_from_scores, loss_discriminator, loss_generator};
use seismoforge::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

pub type Build = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

/// A scalar function of the trainable entries of `store`.
pub struct GradCase {
    pub name: String,
    pub store: ParamStore<f64>,
    pub build: Build,
}

pub fn uniform(r: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn tensor(r: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), uniform(r, shape.iter().product(), -1.0, 1.0)).unwrap()
}

fn eval(case: &GradCase, store: &ParamStore<f64>) -> f64 {
    let mut g = Graph::new();
    let loss = (case.build)(&mut g, store).unwrap();
    g.value(loss).item()
}

fn shifted(case: &GradCase, name: &str, dir: &[f64], h: f64) -> f64 {
    let mut st = case.store.clone();
    for (v, d) in st.get_mut(name).unwrap().data_mut().iter_mut().zip(dir) {
        *v += h * d;
    }
    eval(case, &st)
}

/// Richardson-extrapolated central difference along `dir`, from steps `h` and
/// `2h` with `h` the largest of `FD_STEP, FD_STEP/10, FD_STEP/100` at which
/// the two differences agree. Disagreement means a ReLU or `|x|` kink lies
/// within reach; `None` if every step hits one.
fn central_difference(case: &GradCase, name: &str, dir: &[f64], f0: f64) -> Option<f64> {
    let f0 = f0.abs() + 1.0;
    [FD_STEP, FD_STEP / 10.0, FD_STEP / 100.0].into_iter().find_map(|h| {
        let c1 = (shifted(case, name, dir, h) - shifted(case, name, dir, -h)) / (2.0 * h);
        let c2 = (shifted(case, name, dir, 2.0 * h) - shifted(case, name, dir, -2.0 * h)) / (4.0 * h);
        let tol = 1e-6 * c1.abs().max(c2.abs()) + 64.0 * f64::EPSILON * f0 / h;
        ((c1 - c2).abs() <= tol).then_some((4.0 * c1 - c2) / 3.0)
    })
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)` between reverse-mode
/// and central-difference gradients over every probe of every trainable
/// tensor. Tensors with at most
/// `max_probes` entries are checked coordinate by coordinate, larger ones
/// through directional derivatives along `max_probes` random unit vectors.
/// Probes sitting on a kink are skipped; at most a quarter of the case's
/// probes (or one) may be.
pub fn fd_relative_error(case: &GradCase, max_probes: usize, r: &mut Rng) -> f64 {
    let mut g = Graph::new();
    let loss = (case.build)(&mut g, &case.store).unwrap();
    let f0 = g.value(loss).item();
    let grads = g.backward(loss).unwrap();
    let names: Vec<String> = case.store.trainable_names().map(String::from).collect();
    assert!(!names.is_empty(), "{}: nothing to check", case.name);
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    let (mut kinks, mut probes) = (0, 0);
    for name in names {
        let n = case.store.get(&name).unwrap().len();
        let zeros = Tensor::zeros(case.store.get(&name).unwrap().shape());
        let analytic = grads.param(&name).unwrap_or(&zeros).data().to_vec();
        let dirs: Vec<Vec<f64>> = if n <= max_probes {
            (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
        } else {
            (0..max_probes)
                .map(|_| {
                    let v = rng::normal_vec::<f64>(r, n);
                    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / len).collect()
                })
                .collect()
        };
        probes += dirs.len();
        for dir in &dirs {
            let Some(numeric) = central_difference(case, &name, dir, f0) else {
                kinks += 1;
                continue;
            };
            let a: f64 = analytic.iter().zip(dir).map(|(g, d)| g * d).sum();
            diff += (a - numeric).powi(2);
            na += a.powi(2);
            nn += numeric.powi(2);
        }
    }
    assert!(4 * kinks <= probes.max(4), "{}: {kinks} of {probes} probes on kinks", case.name);
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale }
}

fn store_of(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(name, ParamKind::Trainable, t).unwrap();
    }
    s
}

/// `mean((out - target)^2)` with a fixed random target, so every output
/// element contributes a distinct weight.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut r = rng::seeded(seed);
    let target = g.constant(tensor(&mut r, &shape))?;
    let d = g.sub(out, target)?;
    let sq = g.square(d)?;
    g.mean_all(sq)
}

fn p(g: &mut Graph<f64>, s: &ParamStore<f64>, name: &str) -> Result<Var> {
    g.param(s, name, true)
}

fn case(name: String, store: ParamStore<f64>, build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + 'static) -> GradCase {
    GradCase { name, store, build: Box::new(build) }
}

/// Randomized cases covering every differentiable op and the three networks.
pub fn gradient_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng::seeded(seed);
    let mut cases = Vec::new();

    // Direct and FFT-backed convolutions, strided and padded.
    let conv_shapes = [
        (1, 2, 3, 7, 3, 1, 0, 0),
        (2, 3, 4, 20, 16, 1, 7, 8),
        (2, 3, 2, 21, 5, 2, 1, 2),
        (1, 4, 3, 40, 16, 3, 0, 0),
        (2, 2, 2, 33, 4, 2, 1, 1),
        (1, 2, 3, 80, 32, 1, 15, 16),
        (2, 1, 2, 70, 40, 1, 19, 20),
        (1, 3, 1, 50, 1, 1, 0, 0),
        (3, 2, 2, 16, 2, 3, 1, 0),
        (1, 2, 2, 100, 16, 3, 0, 0),
    ];
    for (i, &(n, ci, co, l, k, s, pl, pr)) in conv_shapes.iter().enumerate() {
        let store = store_of(vec![("x", tensor(&mut r, &[n, ci, l])), ("w", tensor(&mut r, &[co, ci, k])), ("b", tensor(&mut r, &[co]))]);
        cases.push(case(format!("conv1d#{i} k{k} s{s}"), store, move |g, st| {
            let (x, w, b) = (p(g, st, "x")?, p(g, st, "w")?, p(g, st, "b")?);
            let y = g.conv1d(x, w, Some(b), ConvGeom::new(s, pl, pr))?;
            project(g, y, 100 + i as u64)
        }));
    }

    let tconv_shapes = [(1, 1, 1, 10, 8, 4, 2), (2, 2, 1, 6, 5, 2, 1), (1, 1, 2, 9, 3, 1, 1), (2, 1, 1, 12, 128, 4, 62), (1, 2, 3, 5, 4, 3, 0), (2, 1, 1, 7, 6, 2, 2)];
    for (i, &(n, ci, co, l, k, s, pad)) in tconv_shapes.iter().enumerate() {
        let store = store_of(vec![("x", tensor(&mut r, &[n, ci, l])), ("w", tensor(&mut r, &[ci, co, k])), ("b", tensor(&mut r, &[co]))]);
        cases.push(case(format!("conv1d_transposed#{i} k{k} s{s}"), store, move |g, st| {
            let (x, w, b) = (p(g, st, "x")?, p(g, st, "w")?, p(g, st, "b")?);
            let y = g.conv1d_transposed(x, w, Some(b), s, pad)?;
            project(g, y, 200 + i as u64)
        }));
    }

    for (i, &(n, c, l)) in [(2, 3, 5), (4, 1, 3), (1, 2, 9)].iter().enumerate() {
        let store = store_of(vec![("x", tensor(&mut r, &[n, c, l])), ("scale", tensor(&mut r, &[c])), ("shift", tensor(&mut r, &[c]))]);
        cases.push(case(format!("batch_norm_train#{i}"), store, move |g, st| {
            let (x, a, b) = (p(g, st, "x")?, p(g, st, "scale")?, p(g, st, "shift")?);
            let (y, _) = g.batch_norm_train(x, a, b)?;
            project(g, y, 300 + i as u64)
        }));
    }
    for (i, &(n, c, l)) in [(2, 3, 4), (1, 2, 6)].iter().enumerate() {
        let store = store_of(vec![("x", tensor(&mut r, &[n, c, l])), ("scale", tensor(&mut r, &[c])), ("shift", tensor(&mut r, &[c]))]);
        let mean = uniform(&mut r, c, -0.5, 0.5);
        let var = uniform(&mut r, c, 0.5, 2.0);
        cases.push(case(format!("batch_norm_eval#{i}"), store, move |g, st| {
            let (x, a, b) = (p(g, st, "x")?, p(g, st, "scale")?, p(g, st, "shift")?);
            let y = g.batch_norm_eval(x, a, b, &mean, &var)?;
            project(g, y, 310 + i as u64)
        }));
    }

    for i in 0..2 {
        let store = store_of(vec![("x", tensor(&mut r, &[2, 2, 6 + i]))]);
        cases.push(case(format!("relu#{i}"), store, move |g, st| {
            let x = p(g, st, "x")?;
            let y = g.relu(x)?;
            project(g, y, 400 + i as u64)
        }));
    }
    for (i, &(n, c, li, lo)) in [(1, 1, 1, 8), (2, 3, 4, 5), (3, 1, 6, 2)].iter().enumerate() {
        let store = store_of(vec![("x", tensor(&mut r, &[n, c, li])), ("w", tensor(&mut r, &[lo, li])), ("b", tensor(&mut r, &[lo]))]);
        cases.push(case(format!("affine#{i}"), store, move |g, st| {
            let (x, w, b) = (p(g, st, "x")?, p(g, st, "w")?, p(g, st, "b")?);
            let y = g.affine(x, w, b)?;
            project(g, y, 500 + i as u64)
        }));
    }
    for i in 0..2 {
        let store = store_of(vec![("a", tensor(&mut r, &[2, 1 + i, 5])), ("b", tensor(&mut r, &[2, 2, 5])), ("c", tensor(&mut r, &[2, 1, 5]))]);
        cases.push(case(format!("concat_channels#{i}"), store, move |g, st| {
            let (a, b, c) = (p(g, st, "a")?, p(g, st, "b")?, p(g, st, "c")?);
            let y = g.concat_channels(&[a, b, c])?;
            project(g, y, 600 + i as u64)
        }));
    }
    let store = store_of(vec![("x", tensor(&mut r, &[2, 3, 4]))]);
    cases.push(case("channel".into(), store, |g, st| {
        let x = p(g, st, "x")?;
        let y = g.channel(x, 1)?;
        project(g, y, 700)
    }));
    let store = store_of(vec![("x", tensor(&mut r, &[2, 3, 4]))]);
    cases.push(case("mean_length+reshape".into(), store, |g, st| {
        let x = p(g, st, "x")?;
        let m = g.mean_length(x)?;
        let y = g.reshape(m, &[1, 2, 3])?;
        project(g, y, 701)
    }));
    let store = store_of(vec![("x", tensor(&mut r, &[3, 2, 2]))]);
    cases.push(case("mean_all".into(), store, |g, st| {
        let x = p(g, st, "x")?;
        let s = g.square(x)?;
        g.mean_all(s)
    }));
    let store = store_of(vec![("a", tensor(&mut r, &[2, 2, 3])), ("b", tensor(&mut r, &[2, 2, 3]))]);
    cases.push(case("add+sub".into(), store, |g, st| {
        let (a, b) = (p(g, st, "a")?, p(g, st, "b")?);
        let s = g.add(a, b)?;
        let d = g.sub(s, b)?;
        let d = g.sub(d, b)?;
        project(g, d, 800)
    }));
    let store = store_of(vec![("x", tensor(&mut r, &[1, 2, 5]))]);
    cases.push(case("scale+add_scalar".into(), store, |g, st| {
        let x = p(g, st, "x")?;
        let y = g.scale(x, -2.5)?;
        let y = g.add_scalar(y, 0.75)?;
        project(g, y, 801)
    }));
    let store = store_of(vec![("x", tensor(&mut r, &[2, 1, 7]))]);
    cases.push(case("abs".into(), store, |g, st| {
        let x = p(g, st, "x")?;
        let y = g.abs(x)?;
        project(g, y, 802)
    }));
    let store = store_of(vec![("x", tensor(&mut r, &[2, 2, 3]))]);
    cases.push(case("square".into(), store, |g, st| {
        let x = p(g, st, "x")?;
        let y = g.square(x)?;
        project(g, y, 803)
    }));
    for (i, &(rows, k)) in [(1, 2), (4, 2), (3, 5)].iter().enumerate() {
        let store = store_of(vec![("z", Tensor::new(vec![rows, 1, k], uniform(&mut r, rows * k, -3.0, 3.0)).unwrap())]);
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..k)).collect();
        cases.push(case(format!("softmax_cross_entropy#{i}"), store, move |g, st| {
            let z = p(g, st, "z")?;
            g.softmax_cross_entropy(z, &labels)
        }));
    }

    // Spectral bands with the gradient flowing to both the signal and tau.
    for (i, &(n, c, l, tau, band)) in [(1, 1, 16, 3.3, Band::Low), (2, 2, 25, 5.7, Band::High), (1, 3, 40, 11.2, Band::Low), (2, 1, 33, 8.4, Band::High)].iter().enumerate() {
        let store = store_of(vec![("x", tensor(&mut r, &[n, c, l])), ("tau", Tensor::scalar(tau))]);
        cases.push(case(format!("spectral_band#{i}"), store, move |g, st| {
            let (x, t) = (p(g, st, "x")?, p(g, st, "tau")?);
            let y = g.spectral_band(x, t, band, SplitMode::Soft { temperature: 2.0 })?;
            project(g, y, 900 + i as u64)
        }));
    }

    // Full networks; the generator at batch 3 so batch norm is not a sign function.
    let labels = [1u8, 0];
    for (i, mode) in [PipelineMode::SharedInput, PipelineMode::IndependentInputs, PipelineMode::SinglePipeline].into_iter().enumerate() {
        let gen = Generator::new(GeneratorConfig { pipelines: mode, kernel_size: 32, hidden_channels: (4, 2), ..Default::default() }).unwrap();
        let store = gen.init::<f64>(1000 + i as u64).unwrap();
        let z = tensor(&mut r, &gen.z_shape(3));
        cases.push(case(format!("generator {mode:?}"), store, move |g, st| {
            let zv = g.constant(z.clone())?;
            let y = g.constant(label_tensor(&[1, 0, 1]))?;
            let out = gen.forward(g, st, zv, y, BnMode::Train, true)?;
            project(g, out.x, 1000 + i as u64)
        }));
    }
    for (i, split) in [true, false].into_iter().enumerate() {
        let disc = Discriminator::new(DiscriminatorConfig { spectral_split: split, ..Default::default() }).unwrap();
        let store = disc.init::<f64>(1100 + i as u64).unwrap();
        let x = tensor(&mut r, &[2, 3, 1600]);
        cases.push(case(format!("discriminator split={split}"), store, move |g, st| {
            let xv = g.constant(x.clone())?;
            let y = g.constant(label_tensor(&labels))?;
            let s = disc.forward(g, st, xv, y, true)?;
            project(g, s, 1100 + i as u64)
        }));
    }
    let clf = Classifier::new(ClassifierConfig::default()).unwrap();
    let store = clf.init::<f64>(1200).unwrap();
    let x = tensor(&mut r, &[2, 3, 1600]);
    cases.push(case("classifier".into(), store, move |g, st| {
        let xv = g.constant(x.clone())?;
        let logits = clf.forward(g, st, xv, true)?;
        g.softmax_cross_entropy(logits, &[1, 0])
    }));

    // Both GAN losses through the critic.
    let disc = Discriminator::new(DiscriminatorConfig::default()).unwrap();
    let store = disc.init::<f64>(1300).unwrap();
    let (xr, xf) = (tensor(&mut r, &[2, 3, 1600]), tensor(&mut r, &[2, 3, 1600]));
    let d2 = disc.clone();
    cases.push(case("discriminator loss".into(), store.clone(), move |g, st| {
        let (xr, xf) = (g.constant(xr.clone())?, g.constant(xf.clone())?);
        let (yr, yh) = (g.constant(label_tensor(&[1, 0]))?, g.constant(label_tensor(&[0, 0]))?);
        loss_discriminator(g, &d2, st, xr, yr, xf, yh, 10.0)
    }));
    let xf = tensor(&mut r, &[2, 3, 1600]);
    cases.push(case("generator loss".into(), store, move |g, st| {
        let xf = g.constant(xf.clone())?;
        let yh = g.constant(label_tensor(&[1, 1]))?;
        loss_generator(g, &disc, st, xf, yh, true)
    }));

    // The generator step: generator parameters through a frozen critic.
    let gen = Generator::new(GeneratorConfig { kernel_size: 32, hidden_channels: (4, 2), ..Default::default() }).unwrap();
    let g_store = gen.init::<f64>(1400).unwrap();
    let critic = Discriminator::new(DiscriminatorConfig { branch_channels: (4, 4), critic_channels: (4, 2, 1), ..Default::default() }).unwrap();
    let d_store = critic.init::<f64>(1401).unwrap();
    let z = tensor(&mut r, &gen.z_shape(3));
    cases.push(case("generator through critic".into(), g_store, move |g, st| {
        let zv = g.constant(z.clone())?;
        let y = g.constant(label_tensor(&[1, 0, 1]))?;
        let out = gen.forward(g, st, zv, y, BnMode::Train, true)?;
        loss_generator(g, &critic, &d_store, out.x, y, false)
    }));

    // Score-level losses on free critic values away from |s| = 1 kinks at 0.
    let store = store_of(vec![
        ("sf", Tensor::new(vec![3, 1, 1], vec![0.4, -1.7, 2.2]).unwrap()),
        ("sr", Tensor::new(vec![3, 1, 1], vec![1.1, -0.3, 0.8]).unwrap()),
    ]);
    cases.push(case("loss formulas".into(), store, |g, st| {
        let (sf, sr) = (p(g, st, "sf")?, p(g, st, "sr")?);
        let ld = discriminator_loss_from_scores(g, sf, sr, 10.0)?;
        let lg = generator_loss_from_scores(g, sf)?;
        g.add(ld, lg)
    }));
    cases
}

/// Quadratic scan of every sample against every event and every positive.
pub fn brute_force_violations(set: &SampleSet, events: &[u64]) -> (usize, usize, usize) {
    let w = WINDOW_LEN as u64;
    let covered = |start: u64| events.iter().filter(|&&e| e >= start && e < start + w).count();
    let positives: Vec<u64> = set.samples().iter().filter(|s| s.label() == 1).map(|s| s.origin_index()).collect();
    let (mut r1, mut r2, mut r3) = (0, 0, 0);
    for s in set.samples() {
        let o = s.origin_index();
        if s.label() == 1 {
            r1 += usize::from(covered(o) != 1);
        } else {
            r2 += usize::from(covered(o) != 0);
            r3 += usize::from(positives.iter().any(|&p| p < o + w && o < p + w));
        }
    }
    (r1, r2, r3)
}
