//! Single-sample 1D convolution kernels (cross-correlation, zero padding).
//!
//! Strided convolutions are split into `stride` polyphase components so that
//! every inner loop is a stride-1 correlation over contiguous memory. The
//! accumulation order of every output element is fixed, so results do not
//! depend on the SIMD width the compiler picks.

use super::Real;

/// Output positions computed per register block.
const TB: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad_left: usize, pad_right: usize) -> Self {
        Self { stride, pad_left, pad_right }
    }

    /// Length-preserving padding for a stride-1 kernel of width `k`
    /// (`k/2 - 1` on the left and `k/2` on the right for even `k`).
    pub fn same(k: usize) -> Self {
        Self::downsample(k, 1)
    }

    /// Padding that maps length `L` to `L / stride` when `stride` divides `L`.
    pub fn downsample(k: usize, stride: usize) -> Self {
        let total = k.saturating_sub(stride);
        Self::new(stride, total / 2, total - total / 2)
    }

    pub fn padded_len(&self, l: usize) -> usize {
        l + self.pad_left + self.pad_right
    }

    /// `floor((L + pad_left + pad_right - K) / stride) + 1`, or `None` if the
    /// kernel does not fit.
    pub fn out_len(&self, l: usize, k: usize) -> Option<usize> {
        let lp = self.padded_len(l);
        if self.stride == 0 || k == 0 || lp < k {
            None
        } else {
            Some((lp - k) / self.stride + 1)
        }
    }
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Number of taps that fall into polyphase component `p`.
fn phase_taps(k: usize, stride: usize, p: usize) -> usize {
    (k - p).div_ceil(stride)
}

/// Component `p` of the zero-padded input: `phase[ci][j] = xpad[ci][j*stride + p]`.
fn build_phase<T: Real>(
    x: &[T],
    c_in: usize,
    l: usize,
    geom: &ConvGeom,
    p: usize,
    row_len: usize,
) -> Vec<T> {
    let mut phase = vec![T::zero(); c_in * row_len];
    let (s, pl) = (geom.stride, geom.pad_left);
    for ci in 0..c_in {
        let src = &x[ci * l..(ci + 1) * l];
        let dst = &mut phase[ci * row_len..(ci + 1) * row_len];
        for (j, d) in dst.iter_mut().enumerate() {
            let idx = j * s + p;
            if idx >= pl && idx < pl + l {
                *d = src[idx - pl];
            }
        }
    }
    phase
}

/// `out[o][t] += sum_i sum_q taps[(o*n_in + i)*q_len + q] * inp[i][t + q]` for `t < t_pad`.
///
/// `t_pad` must be a multiple of [`TB`], output rows must hold `t_pad` values
/// and input rows `t_pad + q_len - 1`.
#[allow(clippy::too_many_arguments)]
fn correlate_acc<T: Real>(
    out: &mut [T],
    out_stride: usize,
    n_out: usize,
    inp: &[T],
    inp_stride: usize,
    n_in: usize,
    taps: &[T],
    q_len: usize,
    t_pad: usize,
) {
    debug_assert_eq!(t_pad % TB, 0);
    let mut o = 0;
    while o + 8 <= n_out {
        correlate_block::<T, 8>(out, out_stride, o, inp, inp_stride, n_in, taps, q_len, t_pad);
        o += 8;
    }
    if o + 4 <= n_out {
        correlate_block::<T, 4>(out, out_stride, o, inp, inp_stride, n_in, taps, q_len, t_pad);
        o += 4;
    }
    if o + 2 <= n_out {
        correlate_block::<T, 2>(out, out_stride, o, inp, inp_stride, n_in, taps, q_len, t_pad);
        o += 2;
    }
    if o < n_out {
        correlate_block::<T, 1>(out, out_stride, o, inp, inp_stride, n_in, taps, q_len, t_pad);
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn correlate_block<T: Real, const CB: usize>(
    out: &mut [T],
    out_stride: usize,
    o0: usize,
    inp: &[T],
    inp_stride: usize,
    n_in: usize,
    taps: &[T],
    q_len: usize,
    t_pad: usize,
) {
    for t0 in (0..t_pad).step_by(TB) {
        let mut acc = [[T::zero(); TB]; CB];
        for i in 0..n_in {
            let row = &inp[i * inp_stride + t0..i * inp_stride + t0 + TB + q_len - 1];
            let mut tap_rows = [&taps[..0]; CB];
            for (c, tr) in tap_rows.iter_mut().enumerate() {
                let base = ((o0 + c) * n_in + i) * q_len;
                *tr = &taps[base..base + q_len];
            }
            for q in 0..q_len {
                let win: &[T; TB] = row[q..q + TB].try_into().unwrap();
                for c in 0..CB {
                    let w = tap_rows[c][q];
                    let a = &mut acc[c];
                    for j in 0..TB {
                        a[j] = a[j] + w * win[j];
                    }
                }
            }
        }
        for (c, a) in acc.iter().enumerate() {
            let dst = &mut out[(o0 + c) * out_stride + t0..(o0 + c) * out_stride + t0 + TB];
            for j in 0..TB {
                dst[j] = dst[j] + a[j];
            }
        }
    }
}

/// Lanes per weight-gradient dot product.
const WB: usize = 8;

/// `gw[(o*n_in + i)*q_len + q] += sum_{t < t_pad} g[o][t] * inp[i][t + q]`.
///
/// `g` rows hold `t_pad` values (zero beyond the true length), `t_pad` is a
/// multiple of [`WB`] and input rows hold `t_pad + q_len - 1` values.
#[allow(clippy::too_many_arguments)]
fn correlate_weight_acc<T: Real>(
    gw: &mut [T],
    g: &[T],
    t_pad: usize,
    n_out: usize,
    inp: &[T],
    inp_stride: usize,
    n_in: usize,
    q_len: usize,
) {
    let mut o = 0;
    while o < n_out {
        let cb = if o + 4 <= n_out { 4 } else { 1 };
        let mut q0 = 0;
        while q0 < q_len {
            let left = q_len - q0;
            let args = (&mut *gw, g, t_pad, o, inp, inp_stride, n_in, q_len, q0);
            let step = match (cb, left) {
                (4, 4..) => weight_block::<T, 4, 4>(args),
                (4, 3) => weight_block::<T, 4, 3>(args),
                (4, 2) => weight_block::<T, 4, 2>(args),
                (4, _) => weight_block::<T, 4, 1>(args),
                (_, 4..) => weight_block::<T, 1, 4>(args),
                (_, 3) => weight_block::<T, 1, 3>(args),
                (_, 2) => weight_block::<T, 1, 2>(args),
                _ => weight_block::<T, 1, 1>(args),
            };
            q0 += step;
        }
        o += cb;
    }
}

type WeightArgs<'a, T> = (&'a mut [T], &'a [T], usize, usize, &'a [T], usize, usize, usize, usize);

/// Taps `q0..q0 + QB` of outputs `o0..o0 + CB`; returns `QB`.
#[inline(always)]
fn weight_block<T: Real, const CB: usize, const QB: usize>(args: WeightArgs<'_, T>) -> usize {
    let (gw, g, t_pad, o0, inp, inp_stride, n_in, q_len, q0) = args;
    for i in 0..n_in {
        let row = &inp[i * inp_stride..(i + 1) * inp_stride];
        let mut acc = [[[T::zero(); WB]; QB]; CB];
        for t0 in (0..t_pad).step_by(WB) {
            let mut gv = [[T::zero(); WB]; CB];
            for (c, v) in gv.iter_mut().enumerate() {
                let base = (o0 + c) * t_pad + t0;
                *v = g[base..base + WB].try_into().unwrap();
            }
            for qq in 0..QB {
                let xv: &[T; WB] = row[t0 + q0 + qq..t0 + q0 + qq + WB].try_into().unwrap();
                for c in 0..CB {
                    let a = &mut acc[c][qq];
                    for j in 0..WB {
                        a[j] = a[j] + gv[c][j] * xv[j];
                    }
                }
            }
        }
        for (c, ac) in acc.iter().enumerate() {
            let base = ((o0 + c) * n_in + i) * q_len + q0;
            for (qq, lanes) in ac.iter().enumerate() {
                let s = lanes.iter().copied().fold(T::zero(), |a, b| a + b);
                gw[base + qq] = gw[base + qq] + s;
            }
        }
    }
    QB
}

/// Cross-correlation of one sample: `x` is `c_in x l`, `w` is `c_out x c_in x k`;
/// returns `c_out x l_out` (no bias).
pub fn conv1d_forward<T: Real>(
    x: &[T],
    c_in: usize,
    l: usize,
    w: &[T],
    c_out: usize,
    k: usize,
    geom: &ConvGeom,
) -> Vec<T> {
    let s = geom.stride;
    let t_out = geom.out_len(l, k).expect("kernel fits padded input");
    let t_pad = round_up(t_out, TB);
    let mut out = vec![T::zero(); c_out * t_pad];
    for p in 0..s.min(k) {
        let q = phase_taps(k, s, p);
        let row_len = t_pad + q - 1;
        let phase = build_phase(x, c_in, l, geom, p, row_len);
        let mut taps = vec![T::zero(); c_out * c_in * q];
        for oi in 0..c_out * c_in {
            for qq in 0..q {
                taps[oi * q + qq] = w[oi * k + qq * s + p];
            }
        }
        correlate_acc(&mut out, t_pad, c_out, &phase, row_len, c_in, &taps, q, t_pad);
    }
    compact(out, c_out, t_pad, t_out)
}

/// Gradient of [`conv1d_forward`] with respect to its input; equivalently the
/// transposed convolution of `g` (`c_out x t_out`) back to `c_in x l`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_input_grad<T: Real>(
    g: &[T],
    c_out: usize,
    t_out: usize,
    w: &[T],
    c_in: usize,
    k: usize,
    geom: &ConvGeom,
    l: usize,
) -> Vec<T> {
    let (s, pl) = (geom.stride, geom.pad_left);
    let mut gx = vec![T::zero(); c_in * l];
    for p in 0..s.min(k) {
        let q = phase_taps(k, s, p);
        let j_len = t_out + q - 1;
        let j_pad = round_up(j_len, TB);
        let g_row = j_pad + q - 1;
        let mut gpad = vec![T::zero(); c_out * g_row];
        for co in 0..c_out {
            gpad[co * g_row + q - 1..co * g_row + q - 1 + t_out]
                .copy_from_slice(&g[co * t_out..(co + 1) * t_out]);
        }
        let mut rtaps = vec![T::zero(); c_in * c_out * q];
        for ci in 0..c_in {
            for co in 0..c_out {
                for qq in 0..q {
                    rtaps[(ci * c_out + co) * q + qq] = w[(co * c_in + ci) * k + (q - 1 - qq) * s + p];
                }
            }
        }
        let mut gphase = vec![T::zero(); c_in * j_pad];
        correlate_acc(&mut gphase, j_pad, c_in, &gpad, g_row, c_out, &rtaps, q, j_pad);
        for ci in 0..c_in {
            for j in 0..j_len {
                let idx = j * s + p;
                if idx >= pl && idx < pl + l {
                    let dst = &mut gx[ci * l + idx - pl];
                    *dst = *dst + gphase[ci * j_pad + j];
                }
            }
        }
    }
    gx
}

/// Accumulates the gradient of [`conv1d_forward`] with respect to `w` into `gw`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_weight_grad<T: Real>(
    g: &[T],
    c_out: usize,
    t_out: usize,
    x: &[T],
    c_in: usize,
    l: usize,
    k: usize,
    geom: &ConvGeom,
    gw: &mut [T],
) {
    let s = geom.stride;
    let t_pad = round_up(t_out, WB);
    let mut gpad = vec![T::zero(); c_out * t_pad];
    for co in 0..c_out {
        gpad[co * t_pad..co * t_pad + t_out].copy_from_slice(&g[co * t_out..(co + 1) * t_out]);
    }
    for p in 0..s.min(k) {
        let q = phase_taps(k, s, p);
        let row_len = t_pad + q - 1;
        let phase = build_phase(x, c_in, l, geom, p, row_len);
        let mut gtaps = vec![T::zero(); c_out * c_in * q];
        correlate_weight_acc(&mut gtaps, &gpad, t_pad, c_out, &phase, row_len, c_in, q);
        for oi in 0..c_out * c_in {
            for qq in 0..q {
                let dst = &mut gw[oi * k + qq * s + p];
                *dst = *dst + gtaps[oi * q + qq];
            }
        }
    }
}

fn compact<T: Real>(buf: Vec<T>, rows: usize, stride: usize, len: usize) -> Vec<T> {
    if stride == len {
        return buf;
    }
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&buf[r * stride..r * stride + len]);
    }
    out
}
