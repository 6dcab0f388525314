//! Conditional generator, conditional critic and the evaluation classifier,
//! with the baseline variants expressed as configuration.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::dataset::{N_CHANNELS, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::rng;
use crate::spectral::{Band, SplitMode, DEFAULT_TAU, DEFAULT_TEMPERATURE};
use crate::tensor::{BatchStats, ConvGeom, Graph, ParamKind, ParamStore, Real, Tensor, Var};

pub const Z_LEN: usize = 400;
pub const UPSAMPLE: usize = 4;
pub const LABEL_FEATURE_LEN: usize = WINDOW_LEN / 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineMode {
    /// Three pipelines fed the same `z`.
    SharedInput,
    /// Three pipelines, each with its own `z`.
    IndependentInputs,
    /// One stack emitting all three channels.
    SinglePipeline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Baseline {
    #[default]
    None,
    B1,
    B2,
    B3,
    B4,
    B5,
    B6,
    B7,
}

impl Baseline {
    pub const ALL: [Baseline; 8] = [
        Baseline::None,
        Baseline::B1,
        Baseline::B2,
        Baseline::B3,
        Baseline::B4,
        Baseline::B5,
        Baseline::B6,
        Baseline::B7,
    ];

    pub fn generator(self) -> GeneratorConfig {
        let mut g = GeneratorConfig::default();
        match self {
            Baseline::B1 => g.pipelines = PipelineMode::SinglePipeline,
            Baseline::B2 => g.pipelines = PipelineMode::IndependentInputs,
            Baseline::B3 => g.kernel_size = 4,
            Baseline::B4 => g.kernel_size = 32,
            _ => {}
        }
        g
    }

    pub fn discriminator(self) -> DiscriminatorConfig {
        let mut d = DiscriminatorConfig::default();
        match self {
            Baseline::B5 => d.kernel_size = 4,
            Baseline::B6 => d.kernel_size = 128,
            Baseline::B7 => d.spectral_split = false,
            _ => {}
        }
        d
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Baseline::None => "none",
            Baseline::B1 => "b1",
            Baseline::B2 => "b2",
            Baseline::B3 => "b3",
            Baseline::B4 => "b4",
            Baseline::B5 => "b5",
            Baseline::B6 => "b6",
            Baseline::B7 => "b7",
        };
        f.write_str(s)
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown baseline {s:?} (none, b1..b7)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub z_len: usize,
    pub kernel_size: usize,
    pub pipelines: PipelineMode,
    pub hidden_channels: (usize, usize),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { z_len: Z_LEN, kernel_size: 128, pipelines: PipelineMode::SharedInput, hidden_channels: (16, 8) }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.kernel_size;
        if k < UPSAMPLE || (k - UPSAMPLE) % 2 != 0 {
            return Err(Error::InvalidConfig(format!("generator kernel {k} must be >= 4 and even")));
        }
        if self.z_len * UPSAMPLE != WINDOW_LEN {
            return Err(Error::InvalidConfig(format!("z length {} does not upsample to {WINDOW_LEN}", self.z_len)));
        }
        if self.hidden_channels.0 == 0 || self.hidden_channels.1 == 0 {
            return Err(Error::InvalidConfig("hidden channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Channels of the noise input: independent pipelines draw one row each.
    pub fn z_channels(&self) -> usize {
        match self.pipelines {
            PipelineMode::IndependentInputs => N_CHANNELS,
            _ => 1,
        }
    }

    fn pipeline_names(&self) -> &'static [&'static str] {
        match self.pipelines {
            PipelineMode::SinglePipeline => &["s"],
            _ => &["e", "n", "z"],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    /// Feature-extraction kernel width.
    pub kernel_size: usize,
    pub spectral_split: bool,
    pub branch_channels: (usize, usize),
    pub critic_channels: (usize, usize, usize),
    pub critic_kernel: usize,
    pub critic_stride: usize,
    pub temperature: f64,
    pub tau_init: f64,
    pub hard_split: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            kernel_size: 16,
            spectral_split: true,
            branch_channels: (16, 32),
            critic_channels: (32, 8, 1),
            critic_kernel: 16,
            critic_stride: 3,
            temperature: DEFAULT_TEMPERATURE,
            tau_init: DEFAULT_TAU,
            hard_split: false,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 2 || self.kernel_size % 2 != 0 {
            return Err(Error::InvalidConfig(format!("discriminator kernel {} must be even", self.kernel_size)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        let (a, b) = self.branch_channels;
        let (c1, c2, c3) = self.critic_channels;
        if a == 0 || b == 0 || c1 == 0 || c2 == 0 || c3 == 0 || self.critic_stride == 0 {
            return Err(Error::InvalidConfig("channel counts and stride must be positive".into()));
        }
        let mut l = LABEL_FEATURE_LEN;
        for _ in 0..3 {
            l = ConvGeom::new(self.critic_stride, 0, 0)
                .out_len(l, self.critic_kernel)
                .ok_or_else(|| Error::InvalidConfig("critic stack does not fit 800 samples".into()))?;
        }
        Ok(())
    }

    fn split_mode<T: Real>(&self) -> SplitMode<T> {
        if self.hard_split {
            SplitMode::Hard
        } else {
            SplitMode::Soft { temperature: T::from_f64c(self.temperature) }
        }
    }
}

/// Train mode uses batch statistics and reports them; eval mode uses the
/// running statistics stored as buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: rng::Rng,
}

impl<T: Real> Init<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64c(self.rng.random_range(-bound..=bound))).collect();
        self.store.insert(name, ParamKind::Trainable, Tensor::new(shape.to_vec(), data)?)
    }

    /// Conv weight `[c_out, c_in, k]` and bias with bound `1/sqrt(c_in * k)`.
    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) -> Result<()> {
        let b = 1.0 / ((c_in * k) as f64).sqrt();
        self.uniform(format!("{prefix}.w"), &[c_out, c_in, k], b)?;
        self.uniform(format!("{prefix}.b"), &[c_out], b)
    }

    fn affine(&mut self, prefix: &str, l_out: usize, l_in: usize) -> Result<()> {
        let b = 1.0 / (l_in as f64).sqrt();
        self.uniform(format!("{prefix}.w"), &[l_out, l_in], b)?;
        self.uniform(format!("{prefix}.b"), &[l_out], b)
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        let s = &mut *self.store;
        s.insert(format!("{prefix}.scale"), ParamKind::Trainable, Tensor::filled(&[c], T::one()))?;
        s.insert(format!("{prefix}.shift"), ParamKind::Trainable, Tensor::zeros(&[c]))?;
        s.insert(format!("{prefix}.mean"), ParamKind::Buffer, Tensor::zeros(&[c]))?;
        s.insert(format!("{prefix}.var"), ParamKind::Buffer, Tensor::filled(&[c], T::one()))
    }
}

/// Batch statistics observed by each train-mode batch norm, keyed by prefix.
pub type BnUpdates<T> = Vec<(String, BatchStats<T>)>;

/// Folds observed batch statistics into the running buffers:
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &BnUpdates<T>, momentum: T) -> Result<()> {
    for (prefix, st) in updates {
        for (suffix, batch) in [("mean", &st.mean), ("var", &st.var)] {
            let t = store.get_mut(&format!("{prefix}.{suffix}"))?;
            for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                *r = (T::one() - momentum) * *r + momentum * b;
            }
        }
    }
    Ok(())
}

struct Bind<'a, T> {
    g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
}

impl<T: Real> Bind<'_, T> {
    fn p(&mut self, name: &str) -> Result<Var> {
        self.g.param(self.store, name, self.trainable)
    }

    fn conv(&mut self, x: Var, prefix: &str, geom: ConvGeom) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.g.conv1d(x, w, Some(b), geom)
    }

    fn affine(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.g.affine(x, w, b)
    }

    fn batch_norm(&mut self, x: Var, prefix: &str, mode: BnMode, updates: &mut BnUpdates<T>) -> Result<Var> {
        let scale = self.p(&format!("{prefix}.scale"))?;
        let shift = self.p(&format!("{prefix}.shift"))?;
        match mode {
            BnMode::Train => {
                let (y, st) = self.g.batch_norm_train(x, scale, shift)?;
                updates.push((prefix.to_string(), st));
                Ok(y)
            }
            BnMode::Eval => {
                let mean = self.store.get(&format!("{prefix}.mean"))?.data().to_vec();
                let var = self.store.get(&format!("{prefix}.var"))?.data().to_vec();
                self.g.batch_norm_eval(x, scale, shift, &mean, &var)
            }
        }
    }
}

pub struct GeneratorOutput<T> {
    /// `[N, 3, 1600]`.
    pub x: Var,
    /// The noise tensor each pipeline consumed, in pipeline order.
    pub pipeline_inputs: Vec<Var>,
    pub bn_updates: BnUpdates<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub cfg: GeneratorConfig,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn z_shape(&self, n: usize) -> [usize; 3] {
        [n, self.cfg.z_channels(), self.cfg.z_len]
    }

    pub fn init<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let mut it = Init { store: &mut store, rng: rng::seeded(seed) };
        let k = self.cfg.kernel_size;
        let (h1, h2) = self.cfg.hidden_channels;
        let out_ch = if self.cfg.pipelines == PipelineMode::SinglePipeline { N_CHANNELS } else { 1 };
        for p in self.cfg.pipeline_names() {
            let pre = format!("g.{p}");
            // Transposed kernel layout is [c_in, c_out, k].
            it.uniform(format!("{pre}.up.w"), &[1, 1, k], 1.0 / ((k / UPSAMPLE) as f64).sqrt())?;
            it.uniform(format!("{pre}.up.b"), &[1], 1.0 / ((k / UPSAMPLE) as f64).sqrt())?;
            it.batch_norm(&format!("{pre}.bn0"), 1)?;
            it.affine(&format!("{pre}.label"), WINDOW_LEN, 1)?;
            it.conv(&format!("{pre}.c1"), h1, 2, k)?;
            it.batch_norm(&format!("{pre}.bn1"), h1)?;
            it.conv(&format!("{pre}.c2"), h2, h1, k)?;
            it.batch_norm(&format!("{pre}.bn2"), h2)?;
            it.conv(&format!("{pre}.c3"), out_ch, h2, k)?;
        }
        Ok(store)
    }

    /// `z: [N, z_channels, z_len]`, `y: [N, 1, 1]` holding 0 or 1.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        y: Var,
        mode: BnMode,
        trainable: bool,
    ) -> Result<GeneratorOutput<T>> {
        let (n, zc, zl) = g.value(z).dims3("generator z")?;
        if zc != self.cfg.z_channels() || zl != self.cfg.z_len {
            return Err(Error::ShapeMismatch {
                op: "generator",
                detail: format!("z shape {:?}, expected {:?}", g.shape(z), self.z_shape(n)),
            });
        }
        if g.shape(y) != [n, 1, 1] {
            return Err(Error::ShapeMismatch { op: "generator", detail: format!("label shape {:?}", g.shape(y)) });
        }
        let k = self.cfg.kernel_size;
        let same = ConvGeom::same(k);
        let mut b = Bind { g, store, trainable };
        let mut outs = Vec::new();
        let mut inputs = Vec::new();
        let mut updates = Vec::new();
        for (i, p) in self.cfg.pipeline_names().iter().enumerate() {
            let pre = format!("g.{p}");
            let zin = if zc == 1 { z } else { b.g.channel(z, i)? };
            inputs.push(zin);
            let up_w = b.p(&format!("{pre}.up.w"))?;
            let up_b = b.p(&format!("{pre}.up.b"))?;
            let h = b.g.conv1d_transposed(zin, up_w, Some(up_b), UPSAMPLE, (k - UPSAMPLE) / 2)?;
            let h = b.g.relu(h)?;
            let h = b.batch_norm(h, &format!("{pre}.bn0"), mode, &mut updates)?;
            let lab = b.affine(y, &format!("{pre}.label"))?;
            let h = b.g.concat_channels(&[h, lab])?;
            let h = b.conv(h, &format!("{pre}.c1"), same)?;
            let h = b.g.relu(h)?;
            let h = b.batch_norm(h, &format!("{pre}.bn1"), mode, &mut updates)?;
            let h = b.conv(h, &format!("{pre}.c2"), same)?;
            let h = b.g.relu(h)?;
            let h = b.batch_norm(h, &format!("{pre}.bn2"), mode, &mut updates)?;
            outs.push(b.conv(h, &format!("{pre}.c3"), same)?);
        }
        let x = if outs.len() == 1 { outs[0] } else { b.g.concat_channels(&outs)? };
        Ok(GeneratorOutput { x, pipeline_inputs: inputs, bn_updates: updates })
    }
}

/// Spectral split, two convolutional branches and (for the critic) the label
/// branch, concatenated along channels at length 800.
fn feature_extraction<T: Real>(
    b: &mut Bind<'_, T>,
    cfg: &DiscriminatorConfig,
    pre: &str,
    x: Var,
    y: Option<Var>,
) -> Result<Var> {
    let k = cfg.kernel_size;
    let (low, high) = if cfg.spectral_split {
        let tau = b.p(&format!("{pre}.tau"))?;
        let mode = cfg.split_mode::<T>();
        (b.g.spectral_band(x, tau, Band::Low, mode)?, b.g.spectral_band(x, tau, Band::High, mode)?)
    } else {
        (x, x)
    };
    let mut parts = Vec::with_capacity(3);
    for (band, input) in [("low", low), ("high", high)] {
        let h = b.conv(input, &format!("{pre}.{band}.c1"), ConvGeom::same(k))?;
        let h = b.g.relu(h)?;
        let h = b.conv(h, &format!("{pre}.{band}.c2"), ConvGeom::downsample(k, 2))?;
        parts.push(b.g.relu(h)?);
    }
    if let Some(y) = y {
        let lab = b.affine(y, &format!("{pre}.label"))?;
        parts.push(b.conv(lab, &format!("{pre}.label_conv"), ConvGeom::same(k))?);
    }
    b.g.concat_channels(&parts)
}

fn init_feature_extraction<T: Real>(
    it: &mut Init<'_, T>,
    cfg: &DiscriminatorConfig,
    pre: &str,
    label: bool,
) -> Result<usize> {
    let k = cfg.kernel_size;
    let (b1, b2) = cfg.branch_channels;
    if cfg.spectral_split {
        it.store.insert(format!("{pre}.tau"), ParamKind::Trainable, Tensor::scalar(T::from_f64c(cfg.tau_init)))?;
    }
    for band in ["low", "high"] {
        it.conv(&format!("{pre}.{band}.c1"), b1, N_CHANNELS, k)?;
        it.conv(&format!("{pre}.{band}.c2"), b2, b1, k)?;
    }
    if label {
        it.affine(&format!("{pre}.label"), LABEL_FEATURE_LEN, 1)?;
        it.conv(&format!("{pre}.label_conv"), b2, 1, k)?;
        Ok(3 * b2)
    } else {
        Ok(2 * b2)
    }
}

fn check_waveforms<T: Real>(g: &Graph<T>, x: Var, op: &'static str) -> Result<usize> {
    let (n, c, l) = g.value(x).dims3(op)?;
    if c != N_CHANNELS || l != WINDOW_LEN {
        return Err(Error::ShapeMismatch { op, detail: format!("expected [N, 3, 1600], got {:?}", g.shape(x)) });
    }
    Ok(n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let mut it = Init { store: &mut store, rng: rng::seeded(seed) };
        let c0 = init_feature_extraction(&mut it, &self.cfg, "d", true)?;
        let (c1, c2, c3) = self.cfg.critic_channels;
        let kc = self.cfg.critic_kernel;
        it.conv("d.crit1", c1, c0, kc)?;
        it.conv("d.crit2", c2, c1, kc)?;
        it.conv("d.crit3", c3, c2, kc)?;
        Ok(store)
    }

    /// Concatenated branch features, `[N, 3 * branch_channels.1, 800]`.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, y: Var, trainable: bool) -> Result<Var> {
        let n = check_waveforms(g, x, "discriminator")?;
        if g.shape(y) != [n, 1, 1] {
            return Err(Error::ShapeMismatch { op: "discriminator", detail: format!("label shape {:?}", g.shape(y)) });
        }
        let mut b = Bind { g, store, trainable };
        feature_extraction(&mut b, &self.cfg, "d", x, Some(y))
    }

    /// Critic score per sample, `[N, 1, 1]`. `x: [N, 3, 1600]`, `y: [N, 1, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, y: Var, trainable: bool) -> Result<Var> {
        let h = self.features(g, store, x, y, trainable)?;
        let n = g.shape(x)[0];
        let mut b = Bind { g, store, trainable };
        let geom = ConvGeom::new(self.cfg.critic_stride, 0, 0);
        let h = b.conv(h, "d.crit1", geom)?;
        let h = b.g.relu(h)?;
        let h = b.conv(h, "d.crit2", geom)?;
        let h = b.g.relu(h)?;
        let h = b.conv(h, "d.crit3", geom)?;
        let h = b.g.mean_length(h)?;
        if self.cfg.critic_channels.2 == 1 {
            return Ok(h);
        }
        let h = b.g.reshape(h, &[n, 1, self.cfg.critic_channels.2])?;
        b.g.mean_length(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub front: DiscriminatorConfig,
    pub n_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { front: DiscriminatorConfig::default(), n_classes: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub cfg: ClassifierConfig,
}

impl Classifier {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        cfg.front.validate()?;
        if cfg.n_classes < 2 {
            return Err(Error::InvalidConfig("classifier needs at least two classes".into()));
        }
        Ok(Self { cfg })
    }

    pub fn init<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let mut it = Init { store: &mut store, rng: rng::seeded(seed) };
        let f = &self.cfg.front;
        let c0 = init_feature_extraction(&mut it, f, "c", false)?;
        let (c1, c2, _) = f.critic_channels;
        it.conv("c.crit1", c1, c0, f.critic_kernel)?;
        it.conv("c.crit2", c2, c1, f.critic_kernel)?;
        it.affine("c.head", self.cfg.n_classes, c2)?;
        Ok(store)
    }

    /// Class logits `[N, 1, n_classes]` for `x: [N, 3, 1600]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Result<Var> {
        let n = check_waveforms(g, x, "classifier")?;
        let f = &self.cfg.front;
        let mut b = Bind { g, store, trainable };
        let h = feature_extraction(&mut b, f, "c", x, None)?;
        let geom = ConvGeom::new(f.critic_stride, 0, 0);
        let h = b.conv(h, "c.crit1", geom)?;
        let h = b.g.relu(h)?;
        let h = b.conv(h, "c.crit2", geom)?;
        let h = b.g.relu(h)?;
        let h = b.g.mean_length(h)?;
        let h = b.g.reshape(h, &[n, 1, f.critic_channels.1])?;
        b.affine(h, "c.head")
    }
}

/// Index of the largest logit; ties go to the lowest class.
pub fn argmax<T: Real>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Packs waveform data (each `3 * 1600` values) into an `[N, 3, 1600]` tensor.
pub fn batch_tensor<T: Real>(rows: &[&[f32]]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(rows.len() * N_CHANNELS * WINDOW_LEN);
    for r in rows {
        if r.len() != N_CHANNELS * WINDOW_LEN {
            return Err(Error::ShapeMismatch { op: "batch", detail: format!("row of {} values", r.len()) });
        }
        data.extend(r.iter().map(|&v| T::from_f64c(v as f64)));
    }
    Tensor::new(vec![rows.len(), N_CHANNELS, WINDOW_LEN], data)
}

/// Labels as an `[N, 1, 1]` tensor.
pub fn label_tensor<T: Real>(labels: &[u8]) -> Tensor<T> {
    let data = labels.iter().map(|&l| T::from_f64c(l as f64)).collect();
    Tensor::new(vec![labels.len(), 1, 1], data).expect("length matches")
}
