//! Classification metrics, the synthetic-quality, robustness and augmentation
//! protocols, and waveform figures.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;

use crate::dataset::{balanced_subset, SampleSet, WaveformSample, N_CHANNELS, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::models::{Baseline, Classifier, ClassifierConfig};
use crate::rng;
use crate::spectral::hard_high_pass;
use crate::tensor::ParamStore;
use crate::training::{
    generate, predict, train_classifier, train_gan, ClassifierTrainConfig, GanModels, LabelChoice, TrainConfig,
};

/// A ratio that is either a number or undefined because its denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    Value(f64),
    Undefined,
}

impl Metric {
    fn ratio(num: usize, den: usize) -> Self {
        if den == 0 {
            Metric::Undefined
        } else {
            Metric::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::Undefined => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.6}"),
            Metric::Undefined => f.write_str("undefined"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Positive class is label 1.
    pub fn from_predictions(predicted: &[u8], actual: &[u8]) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion counts",
                detail: format!("{} predictions for {} labels", predicted.len(), actual.len()),
            });
        }
        let mut c = Self::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p == 1, a == 1) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> Metric {
        Metric::ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> Metric {
        Metric::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Metric {
        Metric::ratio(self.tp, self.tp + self.fn_)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub tag: String,
    pub counts: ConfusionCounts,
    pub accuracy: Metric,
    pub precision: Metric,
    pub recall: Metric,
}

impl MetricsReport {
    pub fn from_counts(tag: impl Into<String>, counts: ConfusionCounts) -> Self {
        Self {
            tag: tag.into(),
            counts,
            accuracy: counts.accuracy(),
            precision: counts.precision(),
            recall: counts.recall(),
        }
    }
}

/// Runs the classifier over `test` and tallies the confusion counts.
pub fn evaluate(classifier: &Classifier, params: &ParamStore<f32>, test: &SampleSet, tag: &str) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let pred = predict(classifier, params, test)?;
    let actual: Vec<u8> = test.samples().iter().map(WaveformSample::label).collect();
    Ok(MetricsReport::from_counts(tag, ConfusionCounts::from_predictions(&pred, &actual)?))
}

/// One line of a report table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub size: usize,
    pub ratio: Option<usize>,
    pub seed: usize,
    pub report: MetricsReport,
    pub improved: Option<bool>,
}

pub const REPORT_HEADER: &str = "experiment,size,ratio,seed,tp,tn,fp,fn,accuracy,precision,recall,improved";

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let c = &r.report.counts;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.experiment,
            r.size,
            opt(r.ratio),
            r.seed,
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            r.report.accuracy,
            r.report.precision,
            r.report.recall,
            opt(r.improved)
        )
        .unwrap();
    }
    s
}

/// Mean of each defined metric over seeds, per (experiment, size, ratio), in
/// first-appearance order. Undefined entries are skipped; a metric undefined
/// for every seed stays undefined.
pub fn mean_csv(rows: &[ReportRow]) -> String {
    let mut keys: Vec<(&str, usize, Option<usize>)> = Vec::new();
    for r in rows {
        let k = (r.experiment.as_str(), r.size, r.ratio);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mean = |ms: &[Metric]| -> Metric {
        let v: Vec<f64> = ms.iter().filter_map(|m| m.value()).collect();
        if v.is_empty() {
            Metric::Undefined
        } else {
            Metric::Value(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let mut s = String::from("experiment,size,ratio,seeds,accuracy,precision,recall,improved_seeds\n");
    for (e, size, ratio) in keys {
        let group: Vec<&ReportRow> = rows.iter().filter(|r| r.experiment == e && r.size == size && r.ratio == ratio).collect();
        let acc: Vec<Metric> = group.iter().map(|r| r.report.accuracy).collect();
        let pre: Vec<Metric> = group.iter().map(|r| r.report.precision).collect();
        let rec: Vec<Metric> = group.iter().map(|r| r.report.recall).collect();
        let improved = group.iter().filter(|r| r.improved == Some(true)).count();
        let has_flag = group.iter().any(|r| r.improved.is_some());
        writeln!(
            s,
            "{e},{size},{},{},{},{},{},{}",
            opt(ratio),
            group.len(),
            mean(&acc),
            mean(&pre),
            mean(&rec),
            if has_flag { improved.to_string() } else { String::new() }
        )
        .unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// GAN settings; `seed` is replaced per cell.
    pub gan: TrainConfig,
    /// Classifier settings; `seed` is replaced per cell.
    pub classifier: ClassifierTrainConfig,
    pub classifier_model: ClassifierConfig,
    pub baseline: Baseline,
    pub seeds: usize,
    pub master_seed: u64,
    /// Worker threads for independent cells.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            gan: TrainConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            classifier_model: ClassifierConfig::default(),
            baseline: Baseline::None,
            seeds: 5,
            master_seed: 0,
            jobs: 1,
        }
    }
}

/// Seed of the cell `(size, ratio, seed_index)`.
pub fn cell_seed(master: u64, size: usize, ratio: usize, seed_index: usize) -> u64 {
    rng::derive_seed(master, &[size as u64, ratio as u64, seed_index as u64])
}

/// Runs `f` over `0..n` on up to `jobs` threads; results keep index order.
fn run_cells<R: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every cell ran")).collect()
}

fn train_generator(cfg: &ExperimentConfig, real: &SampleSet, seed: u64) -> Result<GanModels<f32>> {
    let models = GanModels::for_baseline(cfg.baseline, seed)?;
    if cfg.gan.iterations == 0 {
        return Ok(models);
    }
    let gan_cfg = TrainConfig { seed, baseline: cfg.baseline, ..cfg.gan.clone() };
    Ok(train_gan(real, models, &gan_cfg)?.models)
}

fn classify(cfg: &ExperimentConfig, train: &SampleSet, test: &SampleSet, seed: u64, tag: &str) -> Result<MetricsReport> {
    let ccfg = ClassifierTrainConfig { seed, ..cfg.classifier.clone() };
    let out = train_classifier::<f32>(train, cfg.classifier_model.clone(), &ccfg)?;
    evaluate(&out.classifier, &out.params, test, tag)
}

fn check_disjoint(train: &SampleSet, test: &SampleSet) -> Result<()> {
    let mut origins: Vec<u64> = test.samples().iter().map(WaveformSample::origin_index).collect();
    origins.sort_unstable();
    for s in train.samples() {
        if origins.binary_search(&s.origin_index()).is_ok() {
            return Err(Error::InvalidConfig(format!("training sample at origin {} also appears in the test set", s.origin_index())));
        }
    }
    Ok(())
}

/// Trains a GAN on `real_train`, then one classifier on `|real_train|`
/// balanced synthetics (C_S) and one on `real_train` itself (C_R); both are
/// scored on `test`. Rows come in (C_R, C_S) pairs per seed.
pub fn test2_synthetic_quality(real_train: &SampleSet, test: &SampleSet, cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    check_disjoint(real_train, test)?;
    let size = real_train.len();
    let cells = run_cells(cfg.seeds, cfg.jobs, |s| {
        let seed = cell_seed(cfg.master_seed, size, 0, s);
        let models = train_generator(cfg, real_train, rng::derive_seed(seed, &[1]))?;
        let synth = generate(&models.generator, &models.g_params, size, LabelChoice::Both, rng::derive_seed(seed, &[2]))?;
        let cr = classify(cfg, real_train, test, rng::derive_seed(seed, &[3]), "test2_cr")?;
        let cs = classify(cfg, &synth, test, rng::derive_seed(seed, &[4]), "test2_cs")?;
        info!("test2 seed {s}: C_R accuracy {} C_S accuracy {}", cr.accuracy, cs.accuracy);
        Ok([cr, cs])
    })?;
    Ok(cells
        .into_iter()
        .enumerate()
        .flat_map(|(s, pair)| {
            pair.into_iter().map(move |r| ReportRow {
                experiment: r.tag.clone(),
                size,
                ratio: None,
                seed: s,
                report: r,
                improved: None,
            })
        })
        .collect())
}

/// For each size, trains a GAN on a balanced real subset of that size, then a
/// classifier on `synth_count` balanced synthetics only.
pub fn test3_robustness(pool: &SampleSet, sizes: &[usize], synth_count: usize, test: &SampleSet, cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    check_disjoint(pool, test)?;
    if let Some(&s) = sizes.iter().find(|&&s| s % 2 != 0 || s == 0) {
        return Err(Error::InvalidConfig(format!("size {s} must be positive and even")));
    }
    let grid: Vec<(usize, usize)> = sizes.iter().flat_map(|&size| (0..cfg.seeds).map(move |s| (size, s))).collect();
    let reports = run_cells(grid.len(), cfg.jobs, |i| {
        let (size, s) = grid[i];
        let seed = cell_seed(cfg.master_seed, size, 0, s);
        let real = balanced_subset(pool, size, rng::derive_seed(seed, &[0]))?;
        let models = train_generator(cfg, &real, rng::derive_seed(seed, &[1]))?;
        let synth = generate(&models.generator, &models.g_params, synth_count, LabelChoice::Both, rng::derive_seed(seed, &[2]))?;
        let r = classify(cfg, &synth, test, rng::derive_seed(seed, &[4]), "test3")?;
        info!("test3 size {size} seed {s}: recall {} accuracy {}", r.recall, r.accuracy);
        Ok(r)
    })?;
    Ok(grid
        .iter()
        .zip(reports)
        .map(|(&(size, s), report)| ReportRow { experiment: "test3".into(), size, ratio: None, seed: s, report, improved: None })
        .collect())
}

/// For each (size, seed) one real subset and one GAN are shared by every
/// ratio; the classifier for ratio `r` trains on the subset plus
/// `r * size` balanced synthetics. Ratio 0 is the plain real-data baseline.
pub fn test4_augmentation(pool: &SampleSet, sizes: &[usize], ratios: &[usize], test: &SampleSet, cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    check_disjoint(pool, test)?;
    if let Some(&s) = sizes.iter().find(|&&s| s % 2 != 0 || s == 0) {
        return Err(Error::InvalidConfig(format!("size {s} must be positive and even")));
    }
    let grid: Vec<(usize, usize)> = sizes.iter().flat_map(|&size| (0..cfg.seeds).map(move |s| (size, s))).collect();
    let per_cell = run_cells(grid.len(), cfg.jobs, |i| {
        let (size, s) = grid[i];
        let seed = cell_seed(cfg.master_seed, size, 0, s);
        let real = balanced_subset(pool, size, rng::derive_seed(seed, &[0]))?;
        let models = if ratios.iter().any(|&r| r > 0) {
            Some(train_generator(cfg, &real, rng::derive_seed(seed, &[1]))?)
        } else {
            None
        };
        let mut out = Vec::with_capacity(ratios.len());
        for &ratio in ratios {
            let rseed = cell_seed(cfg.master_seed, size, ratio, s);
            let train = match (&models, ratio) {
                (Some(m), r) if r > 0 => {
                    let synth = generate(&m.generator, &m.g_params, r * size, LabelChoice::Both, rng::derive_seed(rseed, &[2]))?;
                    real.clone().merged(synth).shuffled(rng::derive_seed(rseed, &[3]))
                }
                _ => real.clone(),
            };
            // The classifier seed ignores the ratio so every ratio starts from the same weights.
            let r = classify(cfg, &train, test, rng::derive_seed(seed, &[4]), "test4")?;
            info!("test4 size {size} ratio {ratio} seed {s}: accuracy {}", r.accuracy);
            out.push((ratio, r));
        }
        Ok(out)
    })?;
    let mut rows = Vec::new();
    for (&(size, s), cells) in grid.iter().zip(per_cell) {
        let base = cells.iter().find(|(r, _)| *r == 0).and_then(|(_, rep)| rep.accuracy.value());
        for (ratio, report) in cells {
            let improved = match (ratio, base, report.accuracy.value()) {
                (0, _, _) => Some(false),
                (_, Some(b), Some(a)) => Some(a > b),
                _ => None,
            };
            rows.push(ReportRow { experiment: "test4".into(), size, ratio: Some(ratio), seed: s, report, improved });
        }
    }
    Ok(rows)
}

pub const FIGURE_WIDTH: f64 = 900.0;
pub const FIGURE_HEIGHT: f64 = 600.0;
pub const DEFAULT_DISPLAY_CUTOFF_HZ: f64 = 2.0;

const CHANNEL_LABELS: [&str; N_CHANNELS] = ["E", "N", "Z"];

/// The plotted series: one row of 1600 values per channel.
pub fn figure_series(sample: &WaveformSample, high_pass: Option<(f64, f64)>) -> Result<Vec<Vec<f64>>> {
    (0..N_CHANNELS)
        .map(|c| {
            let row: Vec<f64> = sample.channel(c).iter().map(|&v| v as f64).collect();
            match high_pass {
                Some((rate, cutoff)) => hard_high_pass(&row, rate, cutoff),
                None => Ok(row),
            }
        })
        .collect()
}

/// Standalone SVG with one polyline per channel, stacked E, N, Z.
pub fn figure_svg(series: &[Vec<f64>], title: &str) -> String {
    let band = FIGURE_HEIGHT / series.len().max(1) as f64;
    let (left, right) = (40.0, 10.0);
    let mut s = String::new();
    writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{FIGURE_WIDTH}" height="{FIGURE_HEIGHT}" viewBox="0 0 {FIGURE_WIDTH} {FIGURE_HEIGHT}">
<title>{}</title>
<rect width="100%" height="100%" fill="white"/>"#,
        xml_escape(title)
    )
    .unwrap();
    for (c, row) in series.iter().enumerate() {
        let peak = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mid = band * (c as f64 + 0.5);
        let amp = band * 0.45;
        let n = row.len().max(2) - 1;
        let pts: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let x = left + (FIGURE_WIDTH - left - right) * i as f64 / n as f64;
                let y = if peak > 0.0 { mid - amp * v / peak } else { mid };
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let label = CHANNEL_LABELS.get(c).copied().unwrap_or("?");
        writeln!(s, r#"<text x="8" y="{:.1}" font-family="monospace" font-size="14">{label}</text>"#, mid + 5.0).unwrap();
        writeln!(s, r#"<polyline fill="none" stroke="black" stroke-width="0.8" points="{}"/>"#, pts.join(" ")).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn figure_csv(series: &[Vec<f64>]) -> String {
    let mut s = String::from("channel,index,value\n");
    for (c, row) in series.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            writeln!(s, "{},{i},{v}", CHANNEL_LABELS.get(c).copied().unwrap_or("?")).unwrap();
        }
    }
    s
}

/// Writes `path` (SVG) and the same path with a `.csv` extension. With
/// `high_pass = Some((sample_rate_hz, cutoff_hz))` the display is filtered.
pub fn emit_waveform_figure(sample: &WaveformSample, high_pass: Option<(f64, f64)>, path: &Path) -> Result<()> {
    let series = figure_series(sample, high_pass)?;
    debug_assert!(series.iter().all(|r| r.len() == WINDOW_LEN));
    let kind = if sample.is_positive() { "event" } else { "noise" };
    let title = match high_pass {
        Some((_, cut)) => format!("{kind} window, high-pass {cut} Hz"),
        None => format!("{kind} window"),
    };
    fs::write(path, figure_svg(&series, &title))?;
    fs::write(path.with_extension("csv"), figure_csv(&series))?;
    Ok(())
}
