//! Windowing a (trace, catalog) pair into balanced, standardized event and
//! noise samples, the `SGDS` sample-set format and rule verification.

use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng;
use crate::trace_store::{EventCatalog, RawTrace};

pub const WINDOW_LEN: usize = 1600;
pub const N_CHANNELS: usize = 3;
pub const SAMPLE_LEN: usize = WINDOW_LEN * N_CHANNELS;

pub const DATASET_MAGIC: &[u8; 4] = b"SGDS";
pub const DATASET_VERSION: u16 = 1;

/// Tolerance of the standardization post-condition.
pub const NORM_TOL: f64 = 1e-5;

const REDRAW_ATTEMPTS: usize = 16;

/// A standardized `3 x 1600` window, channel-major (E, N, Z).
#[derive(Clone, Debug, PartialEq)]
pub struct WaveformSample {
    data: Vec<f32>,
    label: u8,
    origin_index: u64,
}

impl WaveformSample {
    pub fn new(data: Vec<f32>, label: u8, origin_index: u64) -> Result<Self> {
        if data.len() != SAMPLE_LEN {
            return Err(Error::ShapeMismatch {
                op: "waveform sample",
                detail: format!("expected {SAMPLE_LEN} values, got {}", data.len()),
            });
        }
        if label > 1 {
            return Err(Error::InvalidConfig(format!("label {label} is not 0 or 1")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform sample"));
        }
        Ok(Self { data, label, origin_index })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * WINDOW_LEN..(c + 1) * WINDOW_LEN]
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    pub fn origin_index(&self) -> u64 {
        self.origin_index
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    samples: Vec<WaveformSample>,
}

impl SampleSet {
    pub fn new(samples: Vec<WaveformSample>) -> Self {
        Self { samples }
    }

    pub fn samples(&self) -> &[WaveformSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<WaveformSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_positive()).count()
    }

    pub fn negative_count(&self) -> usize {
        self.len() - self.positive_count()
    }

    pub fn is_balanced(&self) -> bool {
        self.positive_count() == self.negative_count()
    }

    /// Concatenation, keeping `self` first.
    pub fn merged(mut self, other: SampleSet) -> SampleSet {
        self.samples.extend(other.samples);
        self
    }

    pub fn shuffled(mut self, seed: u64) -> SampleSet {
        self.samples.shuffle(&mut rng::seeded(seed));
        self
    }
}

/// Per-channel `(v - mean) / std` with the population standard deviation.
/// `window` is channel-major with `window.len() / 3` samples per channel.
pub fn normalize(window: &[f32]) -> Result<Vec<f32>> {
    if window.is_empty() || window.len() % N_CHANNELS != 0 {
        return Err(Error::ShapeMismatch {
            op: "normalize",
            detail: format!("{} values do not form 3 channels", window.len()),
        });
    }
    let len = window.len() / N_CHANNELS;
    let mut out = Vec::with_capacity(window.len());
    for (c, ch) in window.chunks_exact(len).enumerate() {
        let n = len as f64;
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std.is_finite() && std > 0.0) {
            return Err(Error::DegenerateWindow { channel: c });
        }
        out.extend(ch.iter().map(|&v| ((v as f64 - mean) / std) as f32));
    }
    Ok(out)
}

/// Raw channel-major copy of `[start, start + 1600)`.
pub fn extract_window(trace: &RawTrace, start: u64) -> Result<Vec<f32>> {
    let s = start as usize;
    if s + WINDOW_LEN > trace.n_samples() {
        return Err(Error::InvalidConfig(format!(
            "window at {start} exceeds trace of {} samples",
            trace.n_samples()
        )));
    }
    let mut out = Vec::with_capacity(SAMPLE_LEN);
    for ch in trace.channels() {
        out.extend_from_slice(&ch[s..s + WINDOW_LEN]);
    }
    Ok(out)
}

/// A window start paired with the catalog event it was cut around.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositiveWindow {
    pub start: u64,
    pub event: usize,
}

fn check_offset_bound(offset_bound: u64) -> Result<()> {
    // A window centred within +-bound of its event must contain it and stay
    // clear of neighbours MIN_EVENT_GAP away.
    if offset_bound >= (WINDOW_LEN / 2) as u64 {
        return Err(Error::InvalidConfig(format!(
            "offset bound {offset_bound} must be below {}",
            WINDOW_LEN / 2
        )));
    }
    Ok(())
}

fn positive_start(event: u64, offset: i64) -> u64 {
    (event as i64 + offset - (WINDOW_LEN / 2) as i64) as u64
}

fn event_admits_windows(event: u64, offset_bound: u64, n_samples: usize) -> bool {
    let half = (WINDOW_LEN / 2) as u64;
    event >= offset_bound + half && event + offset_bound + half <= n_samples as u64
}

/// For each event `t`, `per_event` windows centred at `t + o` with `o` drawn
/// uniformly from `[-offset_bound, offset_bound]`. Events too close to the
/// trace edges are skipped with a warning.
pub fn build_positive_windows(
    n_samples: usize,
    catalog: &EventCatalog,
    per_event: usize,
    offset_bound: u64,
    seed: u64,
) -> Result<Vec<PositiveWindow>> {
    check_offset_bound(offset_bound)?;
    let mut out = Vec::with_capacity(catalog.len() * per_event);
    for (i, &t) in catalog.events().iter().enumerate() {
        if !event_admits_windows(t, offset_bound, n_samples) {
            warn!("event {i} at sample {t} is too close to the trace edge; skipped");
            continue;
        }
        let mut r = rng::seeded(rng::derive_seed(seed, &[i as u64]));
        let b = offset_bound as i64;
        for _ in 0..per_event {
            let start = positive_start(t, r.random_range(-b..=b));
            let hits = catalog.count_in(start, start + WINDOW_LEN as u64);
            if hits != 1 {
                return Err(Error::InvalidCatalog(format!("window at {start} covers {hits} events")));
            }
            out.push(PositiveWindow { start, event: i });
        }
    }
    Ok(out)
}

/// Free stretches `[a, b)` of the trace that contain no event and overlap no
/// excluded window.
fn free_intervals(n_samples: usize, catalog: &EventCatalog, exclusion: &[u64]) -> Vec<(u64, u64)> {
    let mut blocked: Vec<(u64, u64)> = catalog.events().iter().map(|&e| (e, e + 1)).collect();
    blocked.extend(exclusion.iter().map(|&s| (s, s + WINDOW_LEN as u64)));
    blocked.sort_unstable();
    let mut free = Vec::new();
    let mut cursor = 0u64;
    for (a, b) in blocked {
        if a > cursor {
            free.push((cursor, a));
        }
        cursor = cursor.max(b);
    }
    if (n_samples as u64) > cursor {
        free.push((cursor, n_samples as u64));
    }
    free
}

/// Largest number of mutually disjoint noise windows that avoid every event
/// and every excluded window.
pub fn negative_capacity(n_samples: usize, catalog: &EventCatalog, exclusion: &[u64]) -> usize {
    free_intervals(n_samples, catalog, exclusion)
        .iter()
        .map(|&(a, b)| ((b - a) as usize) / WINDOW_LEN)
        .sum()
}

/// `count` mutually disjoint windows (sorted by start) containing no catalog
/// event and overlapping none of the `exclusion` windows.
pub fn build_negative_windows(
    n_samples: usize,
    catalog: &EventCatalog,
    count: usize,
    exclusion: &[u64],
    seed: u64,
) -> Result<Vec<u64>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let free = free_intervals(n_samples, catalog, exclusion);
    let caps: Vec<usize> = free.iter().map(|&(a, b)| ((b - a) as usize) / WINDOW_LEN).collect();
    let total: usize = caps.iter().sum();
    if count > total {
        return Err(Error::Infeasible { requested: count, achievable: total });
    }
    let mut r = rng::seeded(seed);
    let mut chosen = vec![0usize; free.len()];
    let mut slot_owner = Vec::with_capacity(total);
    for (j, &c) in caps.iter().enumerate() {
        slot_owner.extend(std::iter::repeat_n(j, c));
    }
    for s in index::sample(&mut r, total, count) {
        chosen[slot_owner[s]] += 1;
    }
    let mut out = Vec::with_capacity(count);
    for (j, &m) in chosen.iter().enumerate() {
        if m == 0 {
            continue;
        }
        // Spread the spare room of this stretch randomly over the m + 1 gaps.
        let (a, b) = free[j];
        let slack = (b - a) - (m * WINDOW_LEN) as u64;
        let mut cuts: Vec<u64> = (0..m).map(|_| r.random_range(0..=slack)).collect();
        cuts.sort_unstable();
        for (k, &c) in cuts.iter().enumerate() {
            out.push(a + c + (k * WINDOW_LEN) as u64);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildConfig {
    pub per_event: usize,
    pub offset_bound: u64,
    pub balance: bool,
    /// Number of noise windows when `balance` is off.
    pub negatives: usize,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self { per_event: 3, offset_bound: 600, balance: true, negatives: 0, seed: 0 }
    }
}

/// Positive and negative windows, standardized and shuffled. Degenerate
/// windows are re-drawn.
pub fn build_sample_set(trace: &RawTrace, catalog: &EventCatalog, cfg: &BuildConfig) -> Result<SampleSet> {
    trace.validate()?;
    catalog.check_range(trace.n_samples())?;
    let n = trace.n_samples();
    let pos = build_positive_windows(n, catalog, cfg.per_event, cfg.offset_bound, rng::derive_seed(cfg.seed, &[1]))?;
    let mut samples = Vec::with_capacity(2 * pos.len());
    let mut pos_starts = Vec::with_capacity(pos.len());
    let b = cfg.offset_bound as i64;
    for (k, w) in pos.iter().enumerate() {
        let mut start = w.start;
        let mut redraw = rng::seeded(rng::derive_seed(cfg.seed, &[3, k as u64]));
        let mut attempt = 0;
        loop {
            match normalize(&extract_window(trace, start)?) {
                Ok(data) => {
                    samples.push(WaveformSample::new(data, 1, start)?);
                    pos_starts.push(start);
                    break;
                }
                Err(Error::DegenerateWindow { .. }) if attempt < REDRAW_ATTEMPTS => {
                    attempt += 1;
                    start = positive_start(catalog.events()[w.event], redraw.random_range(-b..=b));
                }
                Err(Error::DegenerateWindow { .. }) => {
                    warn!("event {} yields only degenerate windows; dropped one", w.event);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let n_pos = samples.len();
    let n_neg = if cfg.balance {
        if n_pos == 0 {
            return Err(Error::Unbalanced("no positive windows to balance against".into()));
        }
        n_pos
    } else {
        cfg.negatives
    };

    let mut exclusion = pos_starts;
    let mut negs = 0;
    let mut round = 0u64;
    while negs < n_neg {
        let want = n_neg - negs;
        let starts = build_negative_windows(n, catalog, want, &exclusion, rng::derive_seed(cfg.seed, &[2, round]))?;
        for s in starts {
            exclusion.push(s);
            match normalize(&extract_window(trace, s)?) {
                Ok(data) => {
                    samples.push(WaveformSample::new(data, 0, s)?);
                    negs += 1;
                }
                Err(Error::DegenerateWindow { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        round += 1;
    }
    Ok(SampleSet::new(samples).shuffled(rng::derive_seed(cfg.seed, &[4])))
}

/// Groups of same-label samples whose windows overlap (transitively).
fn overlap_groups(idx: &[usize], samples: &[WaveformSample]) -> Vec<Vec<usize>> {
    let mut sorted = idx.to_vec();
    sorted.sort_by_key(|&i| (samples[i].origin_index, i));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut reach = 0u64;
    for i in sorted {
        let o = samples[i].origin_index;
        match groups.last_mut() {
            Some(g) if o < reach => g.push(i),
            _ => groups.push(vec![i]),
        }
        reach = reach.max(o + WINDOW_LEN as u64);
    }
    groups
}

/// Picks `quota` members of `idx` from whole overlap groups taken in random
/// order; a group is only cut when no combination of whole groups fits.
fn pick_groups(idx: &[usize], samples: &[WaveformSample], quota: usize, r: &mut rng::Rng) -> Vec<usize> {
    let mut groups = overlap_groups(idx, samples);
    groups.shuffle(r);
    let mut taken = Vec::with_capacity(quota);
    let mut rest = Vec::new();
    for g in groups {
        if taken.len() + g.len() <= quota {
            taken.extend(g);
        } else {
            rest.push(g);
        }
    }
    for g in rest {
        if taken.len() == quota {
            break;
        }
        let need = quota - taken.len();
        // Keep windows with identical origins on the same side.
        let mut cut = need;
        while cut > 0 && cut < g.len() && samples[g[cut]].origin_index == samples[g[cut - 1]].origin_index {
            cut -= 1;
        }
        if cut == 0 {
            cut = need;
        }
        warn!("split cuts a group of {} overlapping windows", g.len());
        taken.extend_from_slice(&g[..cut.min(need)]);
    }
    taken
}

/// Seeded partition into `train_count` and the remainder. Both halves keep the
/// 1:1 label ratio when the input is balanced, and overlapping windows stay on
/// the same side whenever the counts allow it.
pub fn split(set: &SampleSet, train_count: usize, seed: u64) -> Result<(SampleSet, SampleSet)> {
    if train_count > set.len() {
        return Err(Error::InvalidConfig(format!("train count {train_count} exceeds {} samples", set.len())));
    }
    let s = set.samples();
    let pos: Vec<usize> = (0..s.len()).filter(|&i| s[i].is_positive()).collect();
    let neg: Vec<usize> = (0..s.len()).filter(|&i| !s[i].is_positive()).collect();
    let (qp, qn) = if set.is_balanced() {
        if train_count % 2 != 0 {
            return Err(Error::Unbalanced(format!("odd train count {train_count} cannot keep a 1:1 ratio")));
        }
        (train_count / 2, train_count / 2)
    } else {
        let qp = (train_count * pos.len()).div_ceil(s.len().max(1)).min(pos.len());
        (qp, train_count - qp)
    };
    let mut r = rng::seeded(seed);
    let mut train_idx = pick_groups(&pos, s, qp, &mut r);
    train_idx.extend(pick_groups(&neg, s, qn, &mut r));
    let mut in_train = vec![false; s.len()];
    train_idx.iter().for_each(|&i| in_train[i] = true);
    train_idx.sort_unstable();
    let train = SampleSet::new(train_idx.iter().map(|&i| s[i].clone()).collect());
    let test = SampleSet::new((0..s.len()).filter(|&i| !in_train[i]).map(|i| s[i].clone()).collect());
    Ok((train.shuffled(rng::derive_seed(seed, &[1])), test))
}

/// Balanced random subset of `count` samples (`count / 2` per class).
pub fn balanced_subset(set: &SampleSet, count: usize, seed: u64) -> Result<SampleSet> {
    if count % 2 != 0 {
        return Err(Error::Unbalanced(format!("odd subset size {count}")));
    }
    let half = count / 2;
    if half > set.positive_count() || half > set.negative_count() {
        return Err(Error::Infeasible { requested: count, achievable: 2 * set.positive_count().min(set.negative_count()) });
    }
    let mut r = rng::seeded(seed);
    let mut pick = |label: u8| -> Vec<WaveformSample> {
        let idx: Vec<&WaveformSample> = set.samples().iter().filter(|s| s.label() == label).collect();
        index::sample(&mut r, idx.len(), half).into_iter().map(|i| idx[i].clone()).collect()
    };
    let mut out = pick(1);
    out.extend(pick(0));
    Ok(SampleSet::new(out).shuffled(rng::derive_seed(seed, &[1])))
}

pub fn encode_sample_set(set: &SampleSet) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.buf.reserve(10 + set.len() * (9 + 4 * SAMPLE_LEN));
    w.header(DATASET_MAGIC, DATASET_VERSION);
    let count = u32::try_from(set.len()).map_err(|_| Error::InvalidConfig("more than u32::MAX samples".into()))?;
    w.u32(count);
    for s in set.samples() {
        w.u8(s.label);
        w.u64(s.origin_index);
        w.f32s(&s.data);
    }
    Ok(w.buf)
}

pub fn decode_sample_set(bytes: &[u8]) -> Result<SampleSet> {
    let mut r = Reader::new(bytes, "sample set");
    r.header(DATASET_MAGIC, DATASET_VERSION)?;
    let count = r.u32()? as usize;
    let record = 9 + 4 * SAMPLE_LEN;
    if count.saturating_mul(record) > r.remaining() {
        return Err(Error::Truncated(format!(
            "sample set: {count} records need {} bytes, {} left",
            count.saturating_mul(record),
            r.remaining()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let label = r.u8()?;
        let origin = r.u64()?;
        samples.push(WaveformSample::new(r.f32s(SAMPLE_LEN)?, label, origin)?);
    }
    Ok(SampleSet::new(samples))
}

pub fn write_sample_set(set: &SampleSet, path: &Path) -> Result<()> {
    fs::write(path, encode_sample_set(set)?)?;
    Ok(())
}

pub fn read_sample_set(path: &Path) -> Result<SampleSet> {
    decode_sample_set(&fs::read(path)?)
}

/// Outcome of re-checking a sample set against the windowing rules.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VerifyReport {
    pub samples: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Samples whose channels are not standardized within [`NORM_TOL`].
    pub not_normalized: usize,
    /// Positives covering other than exactly one event (needs a catalog).
    pub rule1: usize,
    /// Negatives covering an event (needs a catalog).
    pub rule2: usize,
    /// Negatives overlapping a positive window.
    pub rule3: usize,
    pub catalog_checked: bool,
}

impl VerifyReport {
    pub fn balanced(&self) -> bool {
        self.positives == self.negatives
    }

    pub fn is_ok(&self) -> bool {
        self.balanced() && self.not_normalized == 0 && self.rule1 == 0 && self.rule2 == 0 && self.rule3 == 0
    }
}

pub fn is_standardized(sample: &WaveformSample) -> bool {
    (0..N_CHANNELS).all(|c| {
        let ch = sample.channel(c);
        let n = ch.len() as f64;
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        mean.abs() < NORM_TOL && (std - 1.0).abs() < NORM_TOL
    })
}

/// Checks standardization and balance, the positive/negative overlap rule and,
/// given the source catalog, the per-window event counts.
pub fn verify_sample_set(set: &SampleSet, catalog: Option<&EventCatalog>) -> VerifyReport {
    let mut rep = VerifyReport {
        samples: set.len(),
        positives: set.positive_count(),
        negatives: set.negative_count(),
        catalog_checked: catalog.is_some(),
        ..Default::default()
    };
    rep.not_normalized = set.samples().iter().filter(|s| !is_standardized(s)).count();
    let mut pos: Vec<u64> = set.samples().iter().filter(|s| s.is_positive()).map(|s| s.origin_index).collect();
    pos.sort_unstable();
    let w = WINDOW_LEN as u64;
    for s in set.samples().iter().filter(|s| !s.is_positive()) {
        let o = s.origin_index;
        // Any positive starting in (o - w, o + w) overlaps.
        let lo = pos.partition_point(|&p| p + w <= o);
        if lo < pos.len() && pos[lo] < o + w {
            rep.rule3 += 1;
        }
    }
    if let Some(cat) = catalog {
        for s in set.samples() {
            let hits = cat.count_in(s.origin_index, s.origin_index + w);
            if s.is_positive() && hits != 1 {
                rep.rule1 += 1;
            }
            if !s.is_positive() && hits != 0 {
                rep.rule2 += 1;
            }
        }
    }
    rep
}
