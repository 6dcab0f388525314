//! Continuous 3-channel traces, event catalogs, the `SGTR` file format and a
//! seeded synthetic corpus generator.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const TRACE_MAGIC: &[u8; 4] = b"SGTR";
pub const TRACE_VERSION: u16 = 1;

/// Minimum spacing between consecutive catalog events, in samples.
pub const MIN_EVENT_GAP: u64 = 3200;

pub const CHANNEL_NAMES: [&str; 3] = ["E", "N", "Z"];

/// One station's continuous record, channels ordered E, N, Z.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrace {
    station_id: String,
    sample_rate_hz: f32,
    channels: [Vec<f32>; 3],
}

impl RawTrace {
    pub fn new(station_id: impl Into<String>, sample_rate_hz: f32, channels: [Vec<f32>; 3]) -> Result<Self> {
        let t = Self { station_id: station_id.into(), sample_rate_hz, channels };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::InvalidTrace(format!("sample rate {} must be positive", self.sample_rate_hz)));
        }
        let n = self.channels[0].len();
        if n == 0 {
            return Err(Error::InvalidTrace("trace has no samples".into()));
        }
        for (c, ch) in self.channels.iter().enumerate() {
            if ch.len() != n {
                return Err(Error::InvalidTrace(format!(
                    "channel {} has {} samples, expected {n}",
                    CHANNEL_NAMES[c],
                    ch.len()
                )));
            }
            if let Some(i) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidTrace(format!("non-finite value on {} at sample {i}", CHANNEL_NAMES[c])));
            }
        }
        Ok(())
    }

    pub fn station_id(&self) -> &str {
        &self.station_id
    }

    pub fn sample_rate_hz(&self) -> f32 {
        self.sample_rate_hz
    }

    pub fn n_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f32>; 3] {
        &self.channels
    }
}

/// Strictly increasing sample indices of event onsets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventCatalog {
    events: Vec<u64>,
}

impl EventCatalog {
    pub fn new(events: Vec<u64>) -> Result<Self> {
        for (i, w) in events.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::InvalidCatalog(format!("event {} ({}) does not follow {}", i + 1, w[1], w[0])));
            }
            if w[1] - w[0] < MIN_EVENT_GAP {
                return Err(Error::InvalidCatalog(format!(
                    "events {} and {} are {} samples apart (minimum {MIN_EVENT_GAP})",
                    w[0],
                    w[1],
                    w[1] - w[0]
                )));
            }
        }
        Ok(Self { events })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[u64] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn check_range(&self, n_samples: usize) -> Result<()> {
        match self.events.last() {
            Some(&last) if last >= n_samples as u64 => {
                Err(Error::CatalogOutOfRange { index: last, n_samples: n_samples as u64 })
            }
            _ => Ok(()),
        }
    }

    /// Number of events in `[start, end)`.
    pub fn count_in(&self, start: u64, end: u64) -> usize {
        let lo = self.events.partition_point(|&e| e < start);
        let hi = self.events.partition_point(|&e| e < end);
        hi - lo
    }
}

pub fn encode_trace(trace: &RawTrace, catalog: &EventCatalog) -> Result<Vec<u8>> {
    trace.validate()?;
    catalog.check_range(trace.n_samples())?;
    let mut w = Writer::default();
    w.buf.reserve(32 + trace.station_id.len() + 12 * trace.n_samples() + 8 * catalog.len());
    w.header(TRACE_MAGIC, TRACE_VERSION);
    w.f32(trace.sample_rate_hz);
    w.u64(trace.n_samples() as u64);
    w.string_u16(&trace.station_id)?;
    for ch in &trace.channels {
        w.f32s(ch);
    }
    let count = u32::try_from(catalog.len()).map_err(|_| Error::InvalidCatalog("more than u32::MAX events".into()))?;
    w.u32(count);
    for &e in &catalog.events {
        w.u64(e);
    }
    Ok(w.buf)
}

pub fn decode_trace(bytes: &[u8]) -> Result<(RawTrace, EventCatalog)> {
    let mut r = Reader::new(bytes, "trace store");
    r.header(TRACE_MAGIC, TRACE_VERSION)?;
    let sample_rate_hz = r.f32()?;
    let n = r.u64()?;
    let station_id = r.string_u16()?;
    let n = usize::try_from(n).map_err(|_| Error::Truncated(format!("trace store: {n} samples")))?;
    if n.saturating_mul(12) > r.remaining() {
        return Err(Error::Truncated(format!(
            "trace store: {n} samples need {} bytes, {} left",
            n.saturating_mul(12),
            r.remaining()
        )));
    }
    let channels = [r.f32s(n)?, r.f32s(n)?, r.f32s(n)?];
    let count = r.u32()? as usize;
    let mut events = Vec::with_capacity(count.min(r.remaining() / 8));
    for _ in 0..count {
        events.push(r.u64()?);
    }
    if let Some(&bad) = events.iter().find(|&&e| e >= n as u64) {
        return Err(Error::CatalogOutOfRange { index: bad, n_samples: n as u64 });
    }
    let catalog = EventCatalog::new(events)?;
    let trace = RawTrace::new(station_id, sample_rate_hz, channels)?;
    Ok((trace, catalog))
}

pub fn write_trace(trace: &RawTrace, catalog: &EventCatalog, path: &Path) -> Result<()> {
    fs::write(path, encode_trace(trace, catalog)?)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<(RawTrace, EventCatalog)> {
    decode_trace(&fs::read(path)?)
}

/// Parameters of the synthetic corpus. Amplitudes are in units of the
/// background noise standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusConfig {
    pub n_events: usize,
    pub n_noise_windows: usize,
    pub seed: u64,
    /// Inclusive range of the P-to-S delay in samples.
    pub p_to_s_gap_range: (u32, u32),
    pub s_over_p_amplitude: f64,
    pub noise_ar_coefficient: f64,
    pub wavelet_dominant_hz: f64,
    pub sample_rate_hz: f32,
    /// Log-uniform range of the peak P amplitude on Z.
    pub p_amplitude_range: (f64, f64),
    pub station_id: String,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_events: 200,
            n_noise_windows: 600,
            seed: 0,
            p_to_s_gap_range: (120, 480),
            s_over_p_amplitude: 2.0,
            noise_ar_coefficient: 0.8,
            wavelet_dominant_hz: 4.0,
            sample_rate_hz: 40.0,
            p_amplitude_range: (1.0, 8.0),
            station_id: "TOY".into(),
        }
    }
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_events == 0 && self.n_noise_windows == 0 {
            return bad("toy corpus needs events or noise windows".into());
        }
        let (lo, hi) = self.p_to_s_gap_range;
        if lo == 0 || hi < lo || hi >= 1600 {
            return bad(format!("p_to_s_gap_range ({lo}, {hi}) must lie within (0, 1600)"));
        }
        if !(0.0..1.0).contains(&self.noise_ar_coefficient) {
            return bad(format!("noise_ar_coefficient {} must lie in [0, 1)", self.noise_ar_coefficient));
        }
        if !(self.s_over_p_amplitude > 0.0 && self.wavelet_dominant_hz > 0.0 && self.sample_rate_hz > 0.0) {
            return bad("amplitude ratio, wavelet frequency and sample rate must be positive".into());
        }
        let (alo, ahi) = self.p_amplitude_range;
        if !(alo > 0.0 && ahi >= alo && ahi.is_finite()) {
            return bad(format!("p_amplitude_range ({alo}, {ahi}) must be positive and ordered"));
        }
        Ok(())
    }
}

/// Ground truth of one synthetic event.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyEvent {
    pub p_onset: u64,
    pub s_onset: u64,
    pub p_amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub trace: RawTrace,
    pub catalog: EventCatalog,
    pub events: Vec<ToyEvent>,
}

/// Samples reserved per event: the event sits `EVENT_LEAD` into its slot.
const EVENT_SLOT: u64 = 3200;
const EVENT_LEAD: u64 = 1600;
const NOISE_SLOT: u64 = 1600;
const SLOT_JITTER: u64 = 400;
/// Relative P amplitude on the horizontals and S amplitude on Z.
const P_HORIZONTAL: f64 = 0.4;
const S_VERTICAL: f64 = 0.5;
const S_FREQ_RATIO: f64 = 0.7;
const CODA_LEVEL: f64 = 0.3;
const CODA_CYCLES: f64 = 12.0;
const WAVELET_CYCLES: f64 = 8.0;

pub fn make_toy_corpus(cfg: &ToyCorpusConfig) -> Result<(RawTrace, EventCatalog)> {
    let c = make_toy_corpus_detailed(cfg)?;
    Ok((c.trace, c.catalog))
}

/// Seeded synthetic trace: AR(1) background on each channel, event slots and
/// noise-only slots in random order, each event a P wavelet (strongest on Z)
/// followed by a larger S wavelet (strongest on E and N) and a decaying coda.
pub fn make_toy_corpus_detailed(cfg: &ToyCorpusConfig) -> Result<ToyCorpus> {
    cfg.validate()?;
    let mut layout_rng = rng::seeded(rng::derive_seed(cfg.seed, &[0]));
    let mut slots: Vec<bool> = std::iter::repeat_n(true, cfg.n_events)
        .chain(std::iter::repeat_n(false, cfg.n_noise_windows))
        .collect();
    for i in (1..slots.len()).rev() {
        let j = layout_rng.random_range(0..=i);
        slots.swap(i, j);
    }

    let mut pos = NOISE_SLOT;
    let mut onsets = Vec::with_capacity(cfg.n_events);
    for &is_event in &slots {
        let jitter = layout_rng.random_range(0..=SLOT_JITTER);
        if is_event {
            onsets.push(pos + EVENT_LEAD);
            pos += EVENT_SLOT + jitter;
        } else {
            pos += NOISE_SLOT + jitter;
        }
    }
    let n = (pos + NOISE_SLOT) as usize;

    let mut channels: [Vec<f64>; 3] = Default::default();
    for (c, ch) in channels.iter_mut().enumerate() {
        *ch = ar1_noise(&mut rng::seeded(rng::derive_seed(cfg.seed, &[1, c as u64])), n, cfg.noise_ar_coefficient);
    }

    let fs = cfg.sample_rate_hz as f64;
    let f0 = cfg.wavelet_dominant_hz;
    let (alo, ahi) = cfg.p_amplitude_range;
    let mut events = Vec::with_capacity(onsets.len());
    for (i, &p) in onsets.iter().enumerate() {
        let mut er = rng::seeded(rng::derive_seed(cfg.seed, &[2, i as u64]));
        let gap = er.random_range(cfg.p_to_s_gap_range.0..=cfg.p_to_s_gap_range.1) as u64;
        let amp = (alo.ln() + er.random::<f64>() * (ahi.ln() - alo.ln())).exp();
        let s = p + gap;
        let a_s = amp * cfg.s_over_p_amplitude;
        let p_gain = [P_HORIZONTAL, P_HORIZONTAL, 1.0];
        let s_gain = [1.0, 1.0, S_VERTICAL];
        for c in 0..3 {
            let phase_p = er.random::<f64>() * 2.0 * PI;
            let phase_s = er.random::<f64>() * 2.0 * PI;
            add_wavelet(&mut channels[c], p, amp * p_gain[c], f0, fs, phase_p);
            add_wavelet(&mut channels[c], s, a_s * s_gain[c], f0 * S_FREQ_RATIO, fs, phase_s);
            add_coda(&mut channels[c], s, a_s * s_gain[c] * CODA_LEVEL, f0 * S_FREQ_RATIO, fs, &mut er);
        }
        events.push(ToyEvent { p_onset: p, s_onset: s, p_amplitude: amp });
    }

    let channels = channels.map(|ch| ch.into_iter().map(|v| v as f32).collect());
    let trace = RawTrace::new(cfg.station_id.clone(), cfg.sample_rate_hz, channels)?;
    let catalog = EventCatalog::new(onsets)?;
    catalog.check_range(trace.n_samples())?;
    Ok(ToyCorpus { trace, catalog, events })
}

/// Unit-variance AR(1) process.
fn ar1_noise(rng: &mut Rng, n: usize, a: f64) -> Vec<f64> {
    let innov = (1.0 - a * a).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut prev: f64 = rng::normal(rng);
    for _ in 0..n {
        prev = a * prev + innov * rng::normal::<f64>(rng);
        out.push(prev);
    }
    out
}

/// Damped sinusoid with an e-folding time of [`WAVELET_CYCLES`] periods,
/// truncated after about seven e-folding times.
fn add_wavelet(ch: &mut [f64], onset: u64, amp: f64, f: f64, fs: f64, phase: f64) {
    let decay = WAVELET_CYCLES / f * fs;
    let len = (decay * 4.0f64.ln() * 5.0).ceil() as usize;
    for k in 0..len {
        let Some(v) = ch.get_mut(onset as usize + k) else { break };
        let t = k as f64;
        let ramp = (t / (fs / f)).min(1.0);
        *v += amp * ramp * (-t / decay).exp() * (2.0 * PI * f * t / fs + phase).sin();
    }
}

/// Random-phase decaying wavetrain following the S arrival.
fn add_coda(ch: &mut [f64], onset: u64, amp: f64, f: f64, fs: f64, rng: &mut Rng) {
    let decay = CODA_CYCLES / f * fs;
    let len = (decay * 4.0f64.ln() * 5.0).ceil() as usize;
    let period = (fs / f).max(1.0);
    let mut phase = rng.random::<f64>() * 2.0 * PI;
    for k in 0..len {
        let Some(v) = ch.get_mut(onset as usize + k) else { break };
        if k > 0 && (k as f64 % period) < 1.0 {
            phase += rng.random_range(-1.0..1.0);
        }
        let t = k as f64;
        *v += amp * (-t / decay).exp() * (2.0 * PI * f * t / fs + phase).sin();
    }
}
