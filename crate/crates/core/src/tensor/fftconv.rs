//! Batched convolution entry points. Wide stride-1 kernels go through the
//! frequency domain; everything else uses the direct kernels in `conv`.

use rustfft::num_complex::Complex;

use super::conv::{conv1d_forward, conv1d_input_grad, conv1d_weight_grad, ConvGeom};
use super::Real;

/// Smallest kernel width routed through the FFT path.
const FFT_MIN_K: usize = 32;

fn use_fft(geom: &ConvGeom, k: usize) -> bool {
    geom.stride == 1 && k >= FFT_MIN_K
}

/// Smallest `m >= n` whose only prime factors are 2, 3 and 5.
fn smooth_len(n: usize) -> usize {
    let mut m = n.max(2);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

struct Plan<T: Real> {
    m: usize,
    fwd: std::sync::Arc<dyn realfft::RealToComplex<T>>,
    inv: std::sync::Arc<dyn realfft::ComplexToReal<T>>,
    scratch_r: Vec<Complex<T>>,
    scratch_c: Vec<Complex<T>>,
    buf: Vec<T>,
}

impl<T: Real> Plan<T> {
    fn new(m: usize) -> Self {
        let (fwd, inv) = T::rfft_plans(m);
        let scratch_r = fwd.make_scratch_vec();
        let scratch_c = inv.make_scratch_vec();
        Self { m, fwd, inv, scratch_r, scratch_c, buf: vec![T::zero(); m] }
    }

    fn bins(&self) -> usize {
        self.m / 2 + 1
    }

    /// Spectrum of `src` placed at `offset` in an otherwise zero length-`m` frame.
    fn forward(&mut self, src: &[T], offset: usize, out: &mut [Complex<T>]) {
        self.buf.iter_mut().for_each(|v| *v = T::zero());
        self.buf[offset..offset + src.len()].copy_from_slice(src);
        self.fwd
            .process_with_scratch(&mut self.buf, out, &mut self.scratch_r)
            .expect("buffer sizes match the plan");
    }

    /// Inverse transform including the `1/m` factor; `spec` is clobbered.
    fn inverse(&mut self, spec: &mut [Complex<T>], dst: &mut [T], offset: usize) {
        spec[0].im = T::zero();
        if self.m % 2 == 0 {
            spec[self.m / 2].im = T::zero();
        }
        self.inv
            .process_with_scratch(spec, &mut self.buf, &mut self.scratch_c)
            .expect("buffer sizes match the plan");
        let scale = T::from_usize(self.m).unwrap().recip();
        for (d, &v) in dst.iter_mut().zip(&self.buf[offset..]) {
            *d = v * scale;
        }
    }
}

fn spectra<T: Real>(plan: &mut Plan<T>, rows: &[T], len: usize, offset: usize) -> Vec<Complex<T>> {
    let nb = plan.bins();
    let n_rows = rows.len() / len.max(1);
    let mut out = vec![Complex::new(T::zero(), T::zero()); n_rows * nb];
    for r in 0..n_rows {
        plan.forward(&rows[r * len..(r + 1) * len], offset, &mut out[r * nb..(r + 1) * nb]);
    }
    out
}

/// `acc += a * b` (or `conj(a) * b`) elementwise.
fn mul_acc<T: Real>(acc: &mut [Complex<T>], a: &[Complex<T>], b: &[Complex<T>], conj_a: bool) {
    if conj_a {
        for ((d, &x), &y) in acc.iter_mut().zip(a).zip(b) {
            *d = *d + x.conj() * y;
        }
    } else {
        for ((d, &x), &y) in acc.iter_mut().zip(a).zip(b) {
            *d = *d + x * y;
        }
    }
}

/// [`conv1d_forward`] over a batch of `n` samples; returns `n x c_out x l_out`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_forward_batch<T: Real>(
    x: &[T],
    n: usize,
    c_in: usize,
    l: usize,
    w: &[T],
    c_out: usize,
    k: usize,
    geom: &ConvGeom,
) -> Vec<T> {
    let t_out = geom.out_len(l, k).expect("kernel fits padded input");
    if !use_fft(geom, k) {
        let mut out = Vec::with_capacity(n * c_out * t_out);
        for s in 0..n {
            out.extend(conv1d_forward(&x[s * c_in * l..(s + 1) * c_in * l], c_in, l, w, c_out, k, geom));
        }
        return out;
    }
    let mut plan = Plan::new(smooth_len(geom.padded_len(l)));
    let nb = plan.bins();
    let wf = spectra(&mut plan, w, k, 0);
    let mut out = vec![T::zero(); n * c_out * t_out];
    let mut acc = vec![Complex::new(T::zero(), T::zero()); nb];
    for s in 0..n {
        let xf = spectra(&mut plan, &x[s * c_in * l..(s + 1) * c_in * l], l, geom.pad_left);
        for o in 0..c_out {
            acc.iter_mut().for_each(|v| *v = Complex::new(T::zero(), T::zero()));
            for i in 0..c_in {
                let wr = &wf[(o * c_in + i) * nb..(o * c_in + i + 1) * nb];
                mul_acc(&mut acc, wr, &xf[i * nb..(i + 1) * nb], true);
            }
            let dst = &mut out[(s * c_out + o) * t_out..(s * c_out + o + 1) * t_out];
            plan.inverse(&mut acc, dst, 0);
        }
    }
    out
}

/// [`conv1d_input_grad`] over a batch; `g` is `n x c_out x t_out`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_input_grad_batch<T: Real>(
    g: &[T],
    n: usize,
    c_out: usize,
    t_out: usize,
    w: &[T],
    c_in: usize,
    k: usize,
    geom: &ConvGeom,
    l: usize,
) -> Vec<T> {
    if !use_fft(geom, k) {
        let mut gx = Vec::with_capacity(n * c_in * l);
        for s in 0..n {
            let gs = &g[s * c_out * t_out..(s + 1) * c_out * t_out];
            gx.extend(conv1d_input_grad(gs, c_out, t_out, w, c_in, k, geom, l));
        }
        return gx;
    }
    let mut plan = Plan::new(smooth_len(geom.padded_len(l)));
    let nb = plan.bins();
    let wf = spectra(&mut plan, w, k, 0);
    let mut gx = vec![T::zero(); n * c_in * l];
    let mut acc = vec![Complex::new(T::zero(), T::zero()); nb];
    for s in 0..n {
        let gf = spectra(&mut plan, &g[s * c_out * t_out..(s + 1) * c_out * t_out], t_out, 0);
        for i in 0..c_in {
            acc.iter_mut().for_each(|v| *v = Complex::new(T::zero(), T::zero()));
            for o in 0..c_out {
                let wr = &wf[(o * c_in + i) * nb..(o * c_in + i + 1) * nb];
                mul_acc(&mut acc, wr, &gf[o * nb..(o + 1) * nb], false);
            }
            let dst = &mut gx[(s * c_in + i) * l..(s * c_in + i + 1) * l];
            plan.inverse(&mut acc, dst, geom.pad_left);
        }
    }
    gx
}

/// Gradient of [`conv1d_forward_batch`] with respect to `w`, summed over the batch.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_weight_grad_batch<T: Real>(
    g: &[T],
    n: usize,
    c_out: usize,
    t_out: usize,
    x: &[T],
    c_in: usize,
    l: usize,
    k: usize,
    geom: &ConvGeom,
) -> Vec<T> {
    let mut gw = vec![T::zero(); c_out * c_in * k];
    if !use_fft(geom, k) {
        for s in 0..n {
            let gs = &g[s * c_out * t_out..(s + 1) * c_out * t_out];
            let xs = &x[s * c_in * l..(s + 1) * c_in * l];
            conv1d_weight_grad(gs, c_out, t_out, xs, c_in, l, k, geom, &mut gw);
        }
        return gw;
    }
    let mut plan = Plan::new(smooth_len(geom.padded_len(l)));
    let nb = plan.bins();
    let mut acc = vec![Complex::new(T::zero(), T::zero()); c_out * c_in * nb];
    for s in 0..n {
        let xf = spectra(&mut plan, &x[s * c_in * l..(s + 1) * c_in * l], l, geom.pad_left);
        let gf = spectra(&mut plan, &g[s * c_out * t_out..(s + 1) * c_out * t_out], t_out, 0);
        for o in 0..c_out {
            for i in 0..c_in {
                let a = &mut acc[(o * c_in + i) * nb..(o * c_in + i + 1) * nb];
                mul_acc(a, &gf[o * nb..(o + 1) * nb], &xf[i * nb..(i + 1) * nb], true);
            }
        }
    }
    for (r, dst) in gw.chunks_mut(k).enumerate() {
        plan.inverse(&mut acc[r * nb..(r + 1) * nb], dst, 0);
    }
    gw
}
