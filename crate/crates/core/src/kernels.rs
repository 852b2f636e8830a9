//! Raw loops behind the graph operations. No bookkeeping happens here.

use crate::exec::Exec;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(n: usize, ci: usize, h: usize, w: usize, co: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(ConvGeom { n, ci, h, w, co, kh, kw, stride, pad, oh, ow })
    }

    pub fn flops(&self) -> u64 {
        2 * (self.n * self.co * self.oh * self.ow * self.ci * self.kh * self.kw) as u64
    }

    /// Input coordinate hit by output `o` through tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

pub(crate) fn conv2d<T: Scalar>(exec: Exec, g: ConvGeom, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.co * plane];
    exec.chunks_mut(&mut out, plane, |idx, dst| {
        let (b, o) = (idx / g.co, idx % g.co);
        let init = bias.map_or(T::zero(), |bv| bv[o]);
        dst.fill(init);
        for c in 0..g.ci {
            let xin = &x[(b * g.ci + c) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[((o * g.ci + c) * g.kh + ky) * g.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        let row = &xin[iy * g.w..][..g.w];
                        let drow = &mut dst[oy * g.ow..][..g.ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                *d += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_grad_input<T: Scalar>(exec: Exec, g: ConvGeom, go: &[T], k: &[T]) -> Vec<T> {
    let plane = g.h * g.w;
    let mut gx = vec![T::zero(); g.n * g.ci * plane];
    exec.chunks_mut(&mut gx, plane, |idx, dst| {
        let (b, c) = (idx / g.ci, idx % g.ci);
        for o in 0..g.co {
            let gplane = &go[(b * g.co + o) * g.oh * g.ow..][..g.oh * g.ow];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[((o * g.ci + c) * g.kh + ky) * g.kw + kx];
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for ox in 0..g.ow {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                dst[iy * g.w + ix] += wv * gplane[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

pub(crate) fn conv2d_grad_kernel<T: Scalar>(exec: Exec, g: ConvGeom, go: &[T], x: &[T]) -> Vec<T> {
    let per_out = g.ci * g.kh * g.kw;
    let mut gk = vec![T::zero(); g.co * per_out];
    exec.chunks_mut(&mut gk, per_out, |o, dst| {
        for c in 0..g.ci {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut acc = T::zero();
                    for b in 0..g.n {
                        let gplane = &go[(b * g.co + o) * g.oh * g.ow..][..g.oh * g.ow];
                        let xin = &x[(b * g.ci + c) * g.h * g.w..][..g.h * g.w];
                        for oy in 0..g.oh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for ox in 0..g.ow {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    acc += gplane[oy * g.ow + ox] * xin[iy * g.w + ix];
                                }
                            }
                        }
                    }
                    dst[(c * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    gk
}

/// Sum of each channel plane over batch and space.
pub(crate) fn channel_sums<T: Scalar>(go: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += go[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    out
}

/// Batched product `out[b] = A[b] · B[b]` with logical shapes `[m, k]` and `[k, n]`.
/// `ta` means `A` is stored `[k, m]`; `tb` means `B` is stored `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm<T: Scalar>(exec: Exec, a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    exec.chunks_mut(&mut out, n.max(1), |row, dst| {
        let (bi, i) = (row / m, row % m);
        let ab = &a[bi * m * k..][..m * k];
        let bb = &b[bi * k * n..][..k * n];
        for (j, d) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for p in 0..k {
                let av = if ta { ab[p * m + i] } else { ab[i * k + p] };
                let bv = if tb { bb[j * k + p] } else { bb[p * n + j] };
                acc += av * bv;
            }
            *d = acc;
        }
    });
    out
}

pub(crate) fn softmax_rows<T: Scalar>(exec: Exec, x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    exec.chunks_mut(&mut out, cols, |_, row| {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    });
    out
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub(crate) fn gelu_exact<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_exact_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub(crate) fn gelu_tanh<T: Scalar>(x: T) -> T {
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_CUBIC) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_tanh_grad<T: Scalar>(x: T) -> T {
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_CUBIC) * x * x * x);
    let t = u.tanh();
    let du = T::of(SQRT_2_OVER_PI) * (T::one() + T::of(3.0 * GELU_CUBIC) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}
