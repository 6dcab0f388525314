//! Full-window DFT/IDFT and the learnable low/high frequency decomposition.
//!
//! A spectrum is split at a cutoff `tau` measured in frequency bins. Bins are
//! compared through their folded index `min(k, N - k)`, so both masks are
//! conjugate-symmetric and each band inverts to a real signal. Training uses
//! a sigmoid relaxation of the threshold so `tau` receives a gradient; the
//! hard threshold is kept as an evaluation mode.

use num_traits::Zero;
use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Default cutoff, in folded bins (about 5 Hz for a 1600-sample window at 40 Hz).
pub const DEFAULT_TAU: f64 = 200.0;
/// Default sigmoid temperature, in bins.
pub const DEFAULT_TEMPERATURE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Low,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitMode<T> {
    /// `m_k = sigmoid((tau - f_k) / temperature)`.
    Soft { temperature: T },
    /// `m_k = 1` if `f_k <= tau`, else `0`.
    Hard,
}

impl<T: Real> SplitMode<T> {
    pub fn soft_default() -> Self {
        SplitMode::Soft { temperature: T::from_f64c(DEFAULT_TEMPERATURE) }
    }
}

/// Complex DFT coefficients `X_0 .. X_{N-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T> {
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Real> Spectrum<T> {
    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    /// Largest `|X_{N-k} - conj(X_k)|` over all bins.
    pub fn asymmetry(&self) -> T {
        let n = self.len();
        (0..n)
            .map(|k| {
                let j = (n - k) % n;
                let dr = self.re[j] - self.re[k];
                let di = self.im[j] + self.im[k];
                (dr * dr + di * di).sqrt()
            })
            .fold(T::zero(), T::max)
    }

    fn scaled(&self, mask: &[T]) -> Self {
        Self {
            re: self.re.iter().zip(mask).map(|(&r, &m)| r * m).collect(),
            im: self.im.iter().zip(mask).map(|(&i, &m)| i * m).collect(),
        }
    }
}

/// Folded frequency index `min(k, N - k)`.
pub fn folded_index(k: usize, n: usize) -> usize {
    k.min(n - k)
}

fn sigmoid<T: Real>(u: T) -> T {
    if u >= T::zero() {
        T::one() / (T::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (T::one() + e)
    }
}

/// `X_k = sum_n x_n exp(-2 pi i k n / N)`.
pub fn dft<T: Real>(x: &[T]) -> Result<Spectrum<T>> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Empty("dft needs at least 2 samples"));
    }
    let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    T::fft_plan(n, false).process(&mut buf);
    Ok(Spectrum { re: buf.iter().map(|c| c.re).collect(), im: buf.iter().map(|c| c.im).collect() })
}

/// Inverse DFT with `1/N` scaling. Rejects spectra that are not the transform
/// of a real signal.
pub fn idft<T: Real>(spec: &Spectrum<T>) -> Result<Vec<T>> {
    let n = spec.len();
    if n < 2 || spec.im.len() != n {
        return Err(Error::Empty("idft needs at least 2 bins"));
    }
    let peak = spec
        .re
        .iter()
        .zip(&spec.im)
        .map(|(&r, &i)| (r * r + i * i).sqrt())
        .fold(T::one(), T::max);
    let asym = spec.asymmetry();
    if asym > T::epsilon().sqrt() * peak {
        return Err(Error::AsymmetricSpectrum(asym.to_f64c()));
    }
    let mut buf: Vec<Complex<T>> = spec.re.iter().zip(&spec.im).map(|(&r, &i)| Complex::new(r, i)).collect();
    T::fft_plan(n, true).process(&mut buf);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    Ok(buf.iter().map(|c| c.re * inv_n).collect())
}

/// Mask applied to each bin for the requested band.
pub fn band_mask<T: Real>(n: usize, tau: T, band: Band, mode: SplitMode<T>) -> Vec<T> {
    (0..n)
        .map(|k| {
            let f = T::from_usize(folded_index(k, n)).unwrap();
            let low = match mode {
                SplitMode::Soft { temperature } => sigmoid((tau - f) / temperature),
                SplitMode::Hard => {
                    if f <= tau {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
            };
            match band {
                Band::Low => low,
                Band::High => T::one() - low,
            }
        })
        .collect()
}

/// Derivative of [`band_mask`] with respect to `tau` (zero in hard mode).
pub fn band_mask_dtau<T: Real>(n: usize, tau: T, band: Band, mode: SplitMode<T>) -> Vec<T> {
    let SplitMode::Soft { temperature } = mode else {
        return vec![T::zero(); n];
    };
    (0..n)
        .map(|k| {
            let f = T::from_usize(folded_index(k, n)).unwrap();
            let m = sigmoid((tau - f) / temperature);
            let d = m * (T::one() - m) / temperature;
            match band {
                Band::Low => d,
                Band::High => -d,
            }
        })
        .collect()
}

/// `(m * X, (1 - m) * X)` for the low-band mask `m`.
pub fn split_spectrum<T: Real>(spec: &Spectrum<T>, tau: T, mode: SplitMode<T>) -> (Spectrum<T>, Spectrum<T>) {
    let n = spec.len();
    let low = band_mask(n, tau, Band::Low, mode);
    let high: Vec<T> = low.iter().map(|&m| T::one() - m).collect();
    (spec.scaled(&low), spec.scaled(&high))
}

/// Splits each length-`n` row of `x` (e.g. a `3 x 1600` window) into its low
/// and high bands in the time domain.
pub fn decompose_signal<T: Real>(x: &[T], n: usize, tau: T, mode: SplitMode<T>) -> Result<(Vec<T>, Vec<T>)> {
    if n < 2 || x.len() % n != 0 {
        return Err(Error::ShapeMismatch { op: "decompose_signal", detail: format!("{} values, row length {n}", x.len()) });
    }
    let mut low = Vec::with_capacity(x.len());
    let mut high = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let (l, h) = split_spectrum(&dft(row)?, tau, mode);
        low.extend(idft(&l)?);
        high.extend(idft(&h)?);
    }
    Ok((low, high))
}

/// Zeroes every bin below `cutoff_hz` (display filter; not used in training).
pub fn hard_high_pass<T: Real>(x: &[T], sample_rate_hz: f64, cutoff_hz: f64) -> Result<Vec<T>> {
    let n = x.len();
    let tau = T::from_f64c(cutoff_hz * n as f64 / sample_rate_hz);
    let (_, high) = decompose_signal(x, n, tau, SplitMode::Hard)?;
    Ok(high)
}

/// Applies a real symmetric bin mask to every length-`n` row: `IDFT(mask * DFT(row))`.
/// The operator is self-adjoint, so the same call maps output gradients back.
pub(crate) fn filter_rows<T: Real>(rows: &[T], n: usize, mask: &[T]) -> Vec<T> {
    let fwd = T::fft_plan(n, false);
    let inv = T::fft_plan(n, true);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut out = Vec::with_capacity(rows.len());
    let mut buf = vec![Complex::zero(); n];
    for row in rows.chunks(n) {
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = Complex::new(v, T::zero());
        }
        fwd.process(&mut buf);
        for (b, &m) in buf.iter_mut().zip(mask) {
            *b = *b * m;
        }
        inv.process(&mut buf);
        out.extend(buf.iter().map(|c| c.re * inv_n));
    }
    out
}

/// `sum_rows (1/N) sum_k dmask_k Re(X_k conj(G_k))`, the derivative of
/// `<g, filter_rows(x, mask)>` along `dmask`.
pub(crate) fn mask_sensitivity<T: Real>(x: &[T], g: &[T], n: usize, dmask: &[T]) -> T {
    let fwd = T::fft_plan(n, false);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut xb = vec![Complex::zero(); n];
    let mut gb = vec![Complex::zero(); n];
    let mut total = T::zero();
    for (xr, gr) in x.chunks(n).zip(g.chunks(n)) {
        for ((a, b), (&xv, &gv)) in xb.iter_mut().zip(gb.iter_mut()).zip(xr.iter().zip(gr)) {
            *a = Complex::new(xv, T::zero());
            *b = Complex::new(gv, T::zero());
        }
        fwd.process(&mut xb);
        fwd.process(&mut gb);
        let s: T = xb
            .iter()
            .zip(&gb)
            .zip(dmask)
            .map(|((xk, gk), &d)| d * (xk.re * gk.re + xk.im * gk.im))
            .sum();
        total = total + s * inv_n;
    }
    total
}
