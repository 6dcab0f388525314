//! Conditional Wasserstein training with the output-magnitude penalty, Adam,
//! classifier training, sample generation and model checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::index;
use rand::Rng as _;

use crate::binio::{Reader, Writer};
use crate::dataset::{normalize, SampleSet, WaveformSample, N_CHANNELS, SAMPLE_LEN, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::models::{
    apply_bn_updates, argmax, batch_tensor, label_tensor, Baseline, BnMode, Classifier, ClassifierConfig,
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, PipelineMode,
};
use crate::rng::{self, Rng};
use crate::tensor::{Gradients, Graph, ParamKind, ParamStore, Real, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Origins of generated samples start here, one window apart, so they can
/// never collide with positions in a real trace.
pub const SYNTHETIC_ORIGIN_BASE: u64 = 1 << 62;

pub const TAU_MIN: f64 = 1.0;
pub const TAU_MAX: f64 = (WINDOW_LEN / 2 - 1) as f64;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn gan() -> Self {
        Self { lr: 1e-4, beta1: 0.5, beta2: 0.9, eps: 1e-8 }
    }

    pub fn classifier() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; moments are kept per parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every trainable entry of `store` that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.t += 1;
        let c = |v: f64| T::from_f64c(v);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = c(1.0 - b1.powi(self.t as i32));
        let bc2 = c(1.0 - b2.powi(self.t as i32));
        let names: Vec<String> = store.trainable_names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.param(&name) else { continue };
            let p = store.get_mut(&name)?;
            let n = p.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name).or_insert_with(|| vec![T::zero(); n]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = c(b1) * *mv + c(1.0 - b1) * gv;
                *vv = c(b2) * *vv + c(1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - c(self.cfg.lr) * mhat / (vhat.sqrt() + c(self.cfg.eps));
            }
        }
        Ok(())
    }
}

/// `-mean(s_fake)`.
pub fn generator_loss_from_scores<T: Real>(g: &mut Graph<T>, s_fake: Var) -> Result<Var> {
    let m = g.mean_all(s_fake)?;
    g.scale(m, -T::one())
}

/// `mean(s_fake) - mean(s_real) + lambda * mean((|s_fake| - 1)^2)`.
pub fn discriminator_loss_from_scores<T: Real>(g: &mut Graph<T>, s_fake: Var, s_real: Var, lambda: T) -> Result<Var> {
    let mf = g.mean_all(s_fake)?;
    let mr = g.mean_all(s_real)?;
    let w = g.sub(mf, mr)?;
    let a = g.abs(s_fake)?;
    let a = g.add_scalar(a, -T::one())?;
    let sq = g.square(a)?;
    let pen = g.mean_all(sq)?;
    let pen = g.scale(pen, lambda)?;
    g.add(w, pen)
}

/// Generator loss of a conditional critic on synthetic samples `x_fake` with labels `y_hat`.
pub fn loss_generator<T: Real>(
    g: &mut Graph<T>,
    d: &Discriminator,
    d_store: &ParamStore<T>,
    x_fake: Var,
    y_hat: Var,
    d_trainable: bool,
) -> Result<Var> {
    let s = d.forward(g, d_store, x_fake, y_hat, d_trainable)?;
    generator_loss_from_scores(g, s)
}

#[allow(clippy::too_many_arguments)]
pub fn loss_discriminator<T: Real>(
    g: &mut Graph<T>,
    d: &Discriminator,
    d_store: &ParamStore<T>,
    x_real: Var,
    y_real: Var,
    x_fake: Var,
    y_hat: Var,
    lambda: T,
) -> Result<Var> {
    let s_real = d.forward(g, d_store, x_real, y_real, true)?;
    let s_fake = d.forward(g, d_store, x_fake, y_hat, true)?;
    discriminator_loss_from_scores(g, s_fake, s_real, lambda)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub adam: AdamConfig,
    pub n_critic: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub baseline: Baseline,
    pub bn_momentum: f64,
    pub divergence_threshold: f64,
    /// Log a progress line every this many iterations (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            adam: AdamConfig::gan(),
            n_critic: 5,
            batch_size: 32,
            iterations: 3000,
            seed: 0,
            baseline: Baseline::None,
            bn_momentum: 0.1,
            divergence_threshold: 1e6,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.n_critic == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("n_critic and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub tau: f64,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("iteration,loss_d,loss_g,tau\n");
    for r in records {
        writeln!(s, "{},{},{},{}", r.iteration, r.loss_d, r.loss_g, r.tau).unwrap();
    }
    s
}

pub struct GanModels<T> {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_params: ParamStore<T>,
    pub d_params: ParamStore<T>,
}

impl<T: Real> GanModels<T> {
    pub fn new(g_cfg: GeneratorConfig, d_cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let generator = Generator::new(g_cfg)?;
        let discriminator = Discriminator::new(d_cfg)?;
        let g_params = generator.init(rng::derive_seed(seed, &[10]))?;
        let d_params = discriminator.init(rng::derive_seed(seed, &[11]))?;
        Ok(Self { generator, discriminator, g_params, d_params })
    }

    pub fn for_baseline(baseline: Baseline, seed: u64) -> Result<Self> {
        Self::new(baseline.generator(), baseline.discriminator(), seed)
    }
}

pub struct GanOutcome<T> {
    pub models: GanModels<T>,
    pub curve: Vec<LossRecord>,
    pub rng: Rng,
}

fn draw_batch(rng: &mut Rng, n: usize, b: usize) -> Vec<usize> {
    if b <= n {
        index::sample(rng, n, b).into_vec()
    } else {
        (0..b).map(|_| rng.random_range(0..n)).collect()
    }
}

fn real_batch<T: Real>(data: &SampleSet, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let rows: Vec<&[f32]> = idx.iter().map(|&i| data.samples()[i].data()).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| data.samples()[i].label()).collect();
    Ok((batch_tensor(&rows)?, label_tensor(&labels)))
}

fn noise<T: Real>(rng: &mut Rng, shape: [usize; 3]) -> Result<Tensor<T>> {
    Tensor::new(shape.to_vec(), rng::normal_vec(rng, shape.iter().product()))
}

fn random_labels(rng: &mut Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..2u8)).collect()
}

fn clamp_tau<T: Real>(store: &mut ParamStore<T>, name: &str) -> Result<()> {
    if store.contains(name) {
        let t = store.get_mut(name)?;
        let v = t.data_mut();
        v[0] = v[0].max(T::from_f64c(TAU_MIN)).min(T::from_f64c(TAU_MAX));
    }
    Ok(())
}

fn tau_value<T: Real>(store: &ParamStore<T>, name: &str) -> f64 {
    store.get(name).map(|t| t.item().to_f64c()).unwrap_or(f64::NAN)
}

fn check_divergence(iteration: usize, loss: f64, threshold: f64) -> Result<()> {
    if !loss.is_finite() || loss.abs() > threshold {
        return Err(Error::Diverged { iteration, loss });
    }
    Ok(())
}

/// Alternating critic/generator updates: `n_critic` critic steps on real
/// batches with their labels against synthetic batches with uniform random
/// labels, then one generator step.
pub fn train_gan<T: Real>(data: &SampleSet, models: GanModels<T>, cfg: &TrainConfig) -> Result<GanOutcome<T>> {
    train_gan_observed(data, models, cfg, |_, _| Ok(()))
}

/// [`train_gan`] calling `observe` after every iteration.
pub fn train_gan_observed<T: Real>(
    data: &SampleSet,
    mut models: GanModels<T>,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&LossRecord, &GanModels<T>) -> Result<()>,
) -> Result<GanOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("GAN training data"));
    }
    if !data.is_balanced() {
        return Err(Error::Unbalanced(format!(
            "{} positives vs {} negatives",
            data.positive_count(),
            data.negative_count()
        )));
    }
    let mut r = rng::seeded(rng::derive_seed(cfg.seed, &[12]));
    let mut opt_g = Adam::new(cfg.adam.clone());
    let mut opt_d = Adam::new(cfg.adam.clone());
    let lambda = T::from_f64c(cfg.lambda);
    let momentum = T::from_f64c(cfg.bn_momentum);
    let b = cfg.batch_size;
    let (gen, disc) = (models.generator.clone(), models.discriminator.clone());
    let mut curve = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let mut loss_d = 0.0;
        for _ in 0..cfg.n_critic {
            let (xr, yr) = real_batch::<T>(data, &draw_batch(&mut r, data.len(), b))?;
            let z = noise::<T>(&mut r, gen.z_shape(b))?;
            let yh = label_tensor::<T>(&random_labels(&mut r, b));
            let mut g = Graph::new();
            let (zv, yv) = (g.constant(z)?, g.constant(yh)?);
            let fake = gen.forward(&mut g, &models.g_params, zv, yv, BnMode::Train, false)?;
            let (xr, yr) = (g.constant(xr)?, g.constant(yr)?);
            let loss = loss_discriminator(&mut g, &disc, &models.d_params, xr, yr, fake.x, yv, lambda)?;
            loss_d = g.value(loss).item().to_f64c();
            check_divergence(it, loss_d, cfg.divergence_threshold)?;
            let grads = g.backward(loss)?;
            opt_d.step(&mut models.d_params, &grads)?;
            clamp_tau(&mut models.d_params, "d.tau")?;
        }

        let z = noise::<T>(&mut r, gen.z_shape(b))?;
        let yh = label_tensor::<T>(&random_labels(&mut r, b));
        let mut g = Graph::new();
        let (zv, yv) = (g.constant(z)?, g.constant(yh)?);
        let fake = gen.forward(&mut g, &models.g_params, zv, yv, BnMode::Train, true)?;
        let loss = loss_generator(&mut g, &disc, &models.d_params, fake.x, yv, false)?;
        let loss_g = g.value(loss).item().to_f64c();
        check_divergence(it, loss_g, cfg.divergence_threshold)?;
        let grads = g.backward(loss)?;
        opt_g.step(&mut models.g_params, &grads)?;
        apply_bn_updates(&mut models.g_params, &fake.bn_updates, momentum)?;

        let rec = LossRecord { iteration: it, loss_d, loss_g, tau: tau_value(&models.d_params, "d.tau") };
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            info!("gan iteration {}: loss_d {:.4} loss_g {:.4} tau {:.2}", it + 1, rec.loss_d, rec.loss_g, rec.tau);
        } else {
            debug!("gan iteration {}: loss_d {:.6} loss_g {:.6}", it + 1, rec.loss_d, rec.loss_g);
        }
        observe(&rec, &models)?;
        curve.push(rec);
    }
    Ok(GanOutcome { models, curve, rng: r })
}

/// Mean critic score on real samples minus the mean on synthetic samples with
/// the same labels, using generator running statistics.
pub fn critic_gap<T: Real>(models: &GanModels<T>, data: &SampleSet, seed: u64) -> Result<f64> {
    let mut r = rng::seeded(seed);
    let mut total = 0.0;
    for chunk in data.samples().chunks(64) {
        let rows: Vec<&[f32]> = chunk.iter().map(|s| s.data()).collect();
        let labels: Vec<u8> = chunk.iter().map(|s| s.label()).collect();
        let n = chunk.len();
        let mut g = Graph::new();
        let xr = g.constant(batch_tensor(&rows)?)?;
        let y = g.constant(label_tensor(&labels))?;
        let z = g.constant(noise::<T>(&mut r, models.generator.z_shape(n))?)?;
        let fake = models.generator.forward(&mut g, &models.g_params, z, y, BnMode::Eval, false)?;
        let sr = models.discriminator.forward(&mut g, &models.d_params, xr, y, false)?;
        let sf = models.discriminator.forward(&mut g, &models.d_params, fake.x, y, false)?;
        let diff: f64 = g
            .value(sr)
            .data()
            .iter()
            .zip(g.value(sf).data())
            .map(|(&a, &b)| a.to_f64c() - b.to_f64c())
            .sum();
        total += diff;
    }
    Ok(total / data.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelChoice {
    Positive,
    Negative,
    /// Balanced halves, positives first.
    Both,
}

impl std::str::FromStr for LabelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pos" | "positive" => Ok(LabelChoice::Positive),
            "neg" | "negative" => Ok(LabelChoice::Negative),
            "both" => Ok(LabelChoice::Both),
            _ => Err(Error::InvalidConfig(format!("unknown label choice {s:?} (pos, neg, both)"))),
        }
    }
}

const INFER_BATCH: usize = 64;

/// Draws `count` synthetic samples in eval mode. Each output is standardized
/// per channel like real windows; a channel without variance is kept raw.
pub fn generate<T: Real>(gen: &Generator, params: &ParamStore<T>, count: usize, label: LabelChoice, seed: u64) -> Result<SampleSet> {
    if label == LabelChoice::Both && count % 2 != 0 {
        return Err(Error::Unbalanced(format!("cannot split {count} samples into balanced halves")));
    }
    let labels: Vec<u8> = (0..count)
        .map(|i| match label {
            LabelChoice::Positive => 1,
            LabelChoice::Negative => 0,
            LabelChoice::Both => u8::from(i < count / 2),
        })
        .collect();
    let mut r = rng::seeded(seed);
    let mut samples = Vec::with_capacity(count);
    for (c, chunk) in labels.chunks(INFER_BATCH).enumerate() {
        let n = chunk.len();
        let mut g = Graph::new();
        let z = g.constant(noise::<T>(&mut r, gen.z_shape(n))?)?;
        let y = g.constant(label_tensor(chunk))?;
        let out = gen.forward(&mut g, params, z, y, BnMode::Eval, false)?;
        let x = g.value(out.x).data();
        for (j, &l) in chunk.iter().enumerate() {
            let raw: Vec<f32> = x[j * SAMPLE_LEN..(j + 1) * SAMPLE_LEN].iter().map(|v| v.to_f64c() as f32).collect();
            let data = match normalize(&raw) {
                Ok(d) => d,
                Err(Error::DegenerateWindow { .. }) => {
                    warn!("generated sample has a flat channel; kept unstandardized");
                    raw
                }
                Err(e) => return Err(e),
            };
            let origin = SYNTHETIC_ORIGIN_BASE + ((c * INFER_BATCH + j) * WINDOW_LEN) as u64;
            samples.push(WaveformSample::new(data, l, origin)?);
        }
    }
    Ok(SampleSet::new(samples))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTrainConfig {
    pub adam: AdamConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { adam: AdamConfig::classifier(), iterations: 1500, batch_size: 32, seed: 0, log_every: 100 }
    }
}

pub struct ClassifierOutcome<T> {
    pub classifier: Classifier,
    pub params: ParamStore<T>,
    /// Training loss per iteration.
    pub losses: Vec<f64>,
}

/// Softmax cross-entropy training on random batches.
pub fn train_classifier<T: Real>(data: &SampleSet, cfg_model: ClassifierConfig, cfg: &ClassifierTrainConfig) -> Result<ClassifierOutcome<T>> {
    if data.is_empty() {
        return Err(Error::Empty("classifier training data"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let classifier = Classifier::new(cfg_model)?;
    let mut params = classifier.init::<T>(rng::derive_seed(cfg.seed, &[20]))?;
    let mut r = rng::seeded(rng::derive_seed(cfg.seed, &[21]));
    let mut opt = Adam::new(cfg.adam.clone());
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let idx = draw_batch(&mut r, data.len(), cfg.batch_size);
        let rows: Vec<&[f32]> = idx.iter().map(|&i| data.samples()[i].data()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.samples()[i].label() as usize).collect();
        let mut g = Graph::new();
        let x = g.constant(batch_tensor(&rows)?)?;
        let logits = classifier.forward(&mut g, &params, x, true)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        let lv = g.value(loss).item().to_f64c();
        let grads = g.backward(loss)?;
        opt.step(&mut params, &grads)?;
        clamp_tau(&mut params, "c.tau")?;
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            info!("classifier iteration {}: loss {lv:.4}", it + 1);
        }
        losses.push(lv);
    }
    Ok(ClassifierOutcome { classifier, params, losses })
}

/// Predicted class per sample (argmax, ties to class 0).
pub fn predict<T: Real>(classifier: &Classifier, params: &ParamStore<T>, set: &SampleSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.samples().chunks(INFER_BATCH) {
        let rows: Vec<&[f32]> = chunk.iter().map(|s| s.data()).collect();
        let mut g = Graph::new();
        let x = g.constant(batch_tensor(&rows)?)?;
        let logits = classifier.forward(&mut g, params, x, false)?;
        let k = classifier.cfg.n_classes;
        for row in g.value(logits).data().chunks(k) {
            out.push(argmax(row) as u8);
        }
    }
    Ok(out)
}

/// Which network a checkpoint holds, with its architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Generator(GeneratorConfig),
    Discriminator(DiscriminatorConfig),
    Classifier(ClassifierConfig),
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Generator(_) => "generator",
            ModelSpec::Discriminator(_) => "discriminator",
            ModelSpec::Classifier(_) => "classifier",
        }
    }

    fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![("model".to_string(), self.kind().to_string())];
        let mut put = |k: &str, v: String| kv.push((k.to_string(), v));
        match self {
            ModelSpec::Generator(g) => {
                put("z_len", g.z_len.to_string());
                put("kernel_size", g.kernel_size.to_string());
                put("pipelines", pipeline_name(g.pipelines).to_string());
                put("hidden_channels", format!("{},{}", g.hidden_channels.0, g.hidden_channels.1));
            }
            ModelSpec::Discriminator(d) => disc_kv(d, &mut put),
            ModelSpec::Classifier(c) => {
                disc_kv(&c.front, &mut put);
                put("n_classes", c.n_classes.to_string());
            }
        }
        kv
    }

    fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::CorruptCheckpoint(format!("missing config key {k:?}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::CorruptCheckpoint(format!("bad value for {k:?}")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::CorruptCheckpoint(format!("bad value for {k:?}")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| Error::CorruptCheckpoint(format!("bad value for {k:?}"))))
                .collect()
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?.parse().map_err(|_| Error::CorruptCheckpoint(format!("bad value for {k:?}")))
        };
        let disc = || -> Result<DiscriminatorConfig> {
            let b = list("branch_channels")?;
            let c = list("critic_channels")?;
            if b.len() != 2 || c.len() != 3 {
                return Err(Error::CorruptCheckpoint("bad channel lists".into()));
            }
            Ok(DiscriminatorConfig {
                kernel_size: num("kernel_size")?,
                spectral_split: flag("spectral_split")?,
                branch_channels: (b[0], b[1]),
                critic_channels: (c[0], c[1], c[2]),
                critic_kernel: num("critic_kernel")?,
                critic_stride: num("critic_stride")?,
                temperature: float("temperature")?,
                tau_init: float("tau_init")?,
                hard_split: flag("hard_split")?,
            })
        };
        match get("model")?.as_str() {
            "generator" => {
                let h = list("hidden_channels")?;
                if h.len() != 2 {
                    return Err(Error::CorruptCheckpoint("bad hidden_channels".into()));
                }
                let pipelines = match get("pipelines")?.as_str() {
                    "shared" => PipelineMode::SharedInput,
                    "independent" => PipelineMode::IndependentInputs,
                    "single" => PipelineMode::SinglePipeline,
                    p => return Err(Error::CorruptCheckpoint(format!("unknown pipeline mode {p:?}"))),
                };
                Ok(ModelSpec::Generator(GeneratorConfig {
                    z_len: num("z_len")?,
                    kernel_size: num("kernel_size")?,
                    pipelines,
                    hidden_channels: (h[0], h[1]),
                }))
            }
            "discriminator" => Ok(ModelSpec::Discriminator(disc()?)),
            "classifier" => Ok(ModelSpec::Classifier(ClassifierConfig { front: disc()?, n_classes: num("n_classes")? })),
            m => Err(Error::CorruptCheckpoint(format!("unknown model kind {m:?}"))),
        }
    }

    fn init_store(&self) -> Result<ParamStore<f32>> {
        match self {
            ModelSpec::Generator(c) => Generator::new(c.clone())?.init(0),
            ModelSpec::Discriminator(c) => Discriminator::new(c.clone())?.init(0),
            ModelSpec::Classifier(c) => Classifier::new(c.clone())?.init(0),
        }
    }
}

fn pipeline_name(p: PipelineMode) -> &'static str {
    match p {
        PipelineMode::SharedInput => "shared",
        PipelineMode::IndependentInputs => "independent",
        PipelineMode::SinglePipeline => "single",
    }
}

fn disc_kv(d: &DiscriminatorConfig, put: &mut impl FnMut(&str, String)) {
    put("kernel_size", d.kernel_size.to_string());
    put("spectral_split", d.spectral_split.to_string());
    put("branch_channels", format!("{},{}", d.branch_channels.0, d.branch_channels.1));
    put(
        "critic_channels",
        format!("{},{},{}", d.critic_channels.0, d.critic_channels.1, d.critic_channels.2),
    );
    put("critic_kernel", d.critic_kernel.to_string());
    put("critic_stride", d.critic_stride.to_string());
    put("temperature", d.temperature.to_string());
    put("tau_init", d.tau_init.to_string());
    put("hard_split", d.hard_split.to_string());
}

/// Parameters of one network plus the metadata needed to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamStore<f32>,
    pub iteration: u64,
    /// Serialized state of the training random stream, if any.
    pub rng_state: Option<String>,
    /// Additional `key=value` pairs echoed from the run configuration.
    pub extra: Vec<(String, String)>,
}

const RESERVED_KEYS: [&str; 2] = ["iteration", "rng_state"];

impl Checkpoint {
    pub fn new<T: Real>(spec: ModelSpec, params: &ParamStore<T>) -> Self {
        Self { spec, params: params.cast(), iteration: 0, rng_state: None, extra: Vec::new() }
    }

    pub fn with_rng(mut self, rng: &Rng) -> Self {
        self.rng_state = serde_json::to_string(rng).ok();
        self
    }

    pub fn rng(&self) -> Option<Rng> {
        self.rng_state.as_deref().and_then(|s| serde_json::from_str(s).ok())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        let mut text = String::new();
        let mut kv = self.spec.to_kv();
        kv.push(("iteration".into(), self.iteration.to_string()));
        if let Some(s) = &self.rng_state {
            kv.push(("rng_state".into(), s.clone()));
        }
        for (k, v) in kv.iter().chain(&self.extra) {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::InvalidConfig(format!("config entry {k:?} cannot be echoed")));
            }
            writeln!(text, "{k}={v}").unwrap();
        }
        w.string_u32(&text)?;
        w.u32(self.params.len() as u32);
        for (name, _, t) in self.params.iter() {
            w.string_u16(name)?;
            w.u8(t.shape().len() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f32s(t.data());
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let text = r.string_u32()?;
        let mut kv = BTreeMap::new();
        let mut order = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::CorruptCheckpoint(format!("config line {line:?} has no '='")))?;
            kv.insert(k.to_string(), v.to_string());
            order.push(k.to_string());
        }
        let spec = ModelSpec::from_kv(&kv)?;
        let spec_keys: Vec<String> = spec.to_kv().into_iter().map(|(k, _)| k).collect();
        let extra = order
            .iter()
            .filter(|k| !spec_keys.contains(k) && !RESERVED_KEYS.contains(&k.as_str()))
            .map(|k| (k.clone(), kv[k].clone()))
            .collect();
        let iteration = match kv.get("iteration") {
            Some(v) => v.parse().map_err(|_| Error::CorruptCheckpoint("bad iteration".into()))?,
            None => 0,
        };
        let mut params = spec.init_store()?;
        let count = r.u32()? as usize;
        if count != params.len() {
            return Err(Error::CorruptCheckpoint(format!("{count} entries, model has {}", params.len())));
        }
        for _ in 0..count {
            let name = r.string_u16()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape, r.f32s(n)?)?;
            if !params.contains(&name) {
                return Err(Error::CorruptCheckpoint(format!("unknown entry {name:?}")));
            }
            params.set(&name, t).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { spec, params, iteration, rng_state: kv.get("rng_state").cloned(), extra })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn generator(&self) -> Result<Generator> {
        match &self.spec {
            ModelSpec::Generator(c) => Generator::new(c.clone()),
            s => Err(Error::CorruptCheckpoint(format!("expected a generator checkpoint, found {}", s.kind()))),
        }
    }

    pub fn discriminator(&self) -> Result<Discriminator> {
        match &self.spec {
            ModelSpec::Discriminator(c) => Discriminator::new(c.clone()),
            s => Err(Error::CorruptCheckpoint(format!("expected a discriminator checkpoint, found {}", s.kind()))),
        }
    }

    pub fn classifier(&self) -> Result<Classifier> {
        match &self.spec {
            ModelSpec::Classifier(c) => Classifier::new(c.clone()),
            s => Err(Error::CorruptCheckpoint(format!("expected a classifier checkpoint, found {}", s.kind()))),
        }
    }
}

/// Trainable entries whose values differ between two stores (helper for
/// checking that training moved something).
pub fn changed_entries<T: Real>(a: &ParamStore<T>, b: &ParamStore<T>) -> Vec<String> {
    a.iter()
        .filter(|(n, k, t)| *k == ParamKind::Trainable && b.get(n).map(|u| u != *t).unwrap_or(true))
        .map(|(n, _, _)| n.to_string())
        .collect()
}

/// Sanity guard for callers that build batches by hand.
pub fn check_batch_shape(shape: &[usize]) -> Result<()> {
    match shape {
        [_, c, l] if *c == N_CHANNELS && *l == WINDOW_LEN => Ok(()),
        s => Err(Error::ShapeMismatch { op: "batch", detail: format!("{s:?}") }),
    }
}
