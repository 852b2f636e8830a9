//! Straight-line reference implementations written directly from the
//! definitions, sharing no code with the library's kernels.
#![allow(dead_code)]

use meta_core::adapter::CascadeParams;
use meta_core::graph::Context;
use meta_core::mea::{mea_forward, MeaConfig};
use meta_core::tensor::{ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(dims: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(-scale..scale))
}

/// Plain nested-vector map `[n][c][h][w]`.
pub type Map = Vec<Vec<Vec<Vec<f64>>>>;

pub fn to_map(t: &Tensor<f64>) -> Map {
    let d = t.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    (0..n)
        .map(|b| (0..c).map(|ch| (0..h).map(|y| (0..w).map(|x| t.data()[((b * c + ch) * h + y) * w + x]).collect()).collect()).collect())
        .collect()
}

pub fn from_map(m: &Map) -> Tensor<f64> {
    let dims = [m.len(), m[0].len(), m[0][0].len(), m[0][0][0].len()];
    let data = m.iter().flatten().flatten().flatten().copied().collect();
    Tensor::new(&dims, data).unwrap()
}

pub fn value(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.get(id).value.data().to_vec()
}

/// `out[o] = b[o] + Σ_i w[o][i] x[i]` at every pixel; `w` is `[out, in]` row-major.
pub fn pointwise(x: &Map, w: &[f64], b: &[f64]) -> Map {
    let cin = x[0].len();
    let cout = b.len();
    x.iter()
        .map(|img| {
            (0..cout)
                .map(|o| {
                    (0..img[0].len())
                        .map(|y| (0..img[0][0].len()).map(|xx| b[o] + (0..cin).map(|i| w[o * cin + i] * img[i][y][xx]).sum::<f64>()).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Zero-padded 3×3 convolution, stride 1; `k` is `[out, in, 3, 3]` row-major.
pub fn conv3x3(x: &Map, k: &[f64], b: &[f64]) -> Map {
    let cin = x[0].len();
    let (h, w) = (x[0][0].len() as i64, x[0][0][0].len() as i64);
    x.iter()
        .map(|img| {
            (0..b.len())
                .map(|o| {
                    (0..h)
                        .map(|y| {
                            (0..w)
                                .map(|xx| {
                                    let mut acc = b[o];
                                    for i in 0..cin {
                                        for dy in -1..=1i64 {
                                            for dx in -1..=1i64 {
                                                let (sy, sx) = (y + dy, xx + dx);
                                                if sy >= 0 && sy < h && sx >= 0 && sx < w {
                                                    let kk = k[((o * cin + i) * 3 + (dy + 1) as usize) * 3 + (dx + 1) as usize];
                                                    acc += kk * img[i][sy as usize][sx as usize];
                                                }
                                            }
                                        }
                                    }
                                    acc
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Channel-wise layer norm at every pixel with biased variance.
pub fn layer_norm(x: &Map, g: &[f64], b: &[f64], eps: f64) -> Map {
    let mut out = x.clone();
    for (bi, img) in x.iter().enumerate() {
        let c = img.len();
        for y in 0..img[0].len() {
            for xx in 0..img[0][0].len() {
                let mean = (0..c).map(|ch| img[ch][y][xx]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (img[ch][y][xx] - mean).powi(2)).sum::<f64>() / c as f64;
                for ch in 0..c {
                    out[bi][ch][y][xx] = (img[ch][y][xx] - mean) / (var + eps).sqrt() * g[ch] + b[ch];
                }
            }
        }
    }
    out
}

pub fn concat(a: &Map, b: &Map) -> Map {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).cloned().collect()).collect()
}

pub fn add(a: &Map, b: &Map) -> Map {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p.iter().zip(q).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect()).collect()).collect())
        .collect()
}

pub fn map_fn(a: &Map, f: impl Fn(f64) -> f64 + Copy) -> Map {
    a.iter().map(|x| x.iter().map(|p| p.iter().map(|r| r.iter().map(|&u| f(u)).collect()).collect()).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Largest divisor of `extent` not above `preferred`.
pub fn band(extent: usize, preferred: usize) -> usize {
    (1..=preferred.min(extent)).rev().find(|d| extent.is_multiple_of(*d)).unwrap()
}

/// Dense softmax attention over every pixel pair, masked to pairs sharing a
/// horizontal band (`horizontal`) or a vertical band of `s` pixels.
pub fn masked_dense_attention(q: &Map, k: &Map, v: &Map, s: usize, horizontal: bool) -> Map {
    let c = q[0].len();
    let (h, w) = (q[0][0].len(), q[0][0][0].len());
    let mut out = q.clone();
    let scale = 1.0 / (c as f64).sqrt();
    for b in 0..q.len() {
        for i in 0..h * w {
            let (yi, xi) = (i / w, i % w);
            let mut logits = Vec::new();
            for j in 0..h * w {
                let (yj, xj) = (j / w, j % w);
                let same = if horizontal { yi / s == yj / s } else { xi / s == xj / s };
                let dot: f64 = (0..c).map(|ch| q[b][ch][yi][xi] * k[b][ch][yj][xj]).sum();
                logits.push(if same { dot * scale } else { f64::NEG_INFINITY });
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for ch in 0..c {
                out[b][ch][yi][xi] = (0..h * w).map(|j| e[j] / z * v[b][ch][j / w][j % w]).sum();
            }
        }
    }
    out
}

/// Parameter values of one cross-shaped attention unit.
pub struct CsaWeights {
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub merge_k: Vec<f64>,
    pub merge_b: Vec<f64>,
    pub eps: f64,
}

/// Project, normalize, attend inside horizontal and vertical bands, then
/// merge both with a 3×3 convolution.
pub fn cross_shaped_attention(fq: &Map, fkv: &Map, wts: &CsaWeights, stripe: usize) -> Map {
    let ln = |m: &Map| layer_norm(m, &wts.gain, &wts.bias, wts.eps);
    let q = ln(&pointwise(fq, &wts.wq, &wts.bq));
    let k = ln(&pointwise(fkv, &wts.wk, &wts.bk));
    let v = ln(&pointwise(fkv, &wts.wv, &wts.bv));
    let (h, w) = (fq[0][0].len(), fq[0][0][0].len());
    let a_h = masked_dense_attention(&q, &k, &v, band(h, stripe), true);
    let a_v = masked_dense_attention(&q, &k, &v, band(w, stripe), false);
    conv3x3(&concat(&a_h, &a_v), &wts.merge_k, &wts.merge_b)
}

/// Literal transcription of the reference window-index generator.
pub fn pseudo_code_window(position: i64, window_size: i64, seq_length: i64) -> Vec<usize> {
    let mut indices = vec![position];
    for offset in -window_size..window_size + 1 {
        if position + offset >= 0 && position + offset < seq_length {
            indices.push(position + offset);
        }
    }
    let set: std::collections::BTreeSet<i64> = indices.into_iter().collect();
    set.into_iter().map(|i| i as usize).collect()
}

pub fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Head `h` sees its own channel slices plus head `h - 1`'s output, written
/// out with explicit per-head tensors rather than graph slicing. Single image.
pub fn unrolled_cascade(store: &ParamStore<f64>, p: &CascadeParams, cfg: &MeaConfig, q: &Tensor<f64>, kv: &Tensor<f64>) -> Tensor<f64> {
    let dims = q.dims().to_vec();
    let d = p.head_width();
    let plane = dims[2] * dims[3];
    let slice = |t: &Tensor<f64>, h: usize| Tensor::from_fn(&[1, d, dims[2], dims[3]], |i| t.data()[h * d * plane + i]);
    let mut prev: Option<Tensor<f64>> = None;
    let mut outs = Vec::new();
    for (h, head) in p.heads.iter().enumerate() {
        let (mut hq, mut hkv) = (slice(q, h), slice(kv, h));
        if let Some(pr) = &prev {
            hq = Tensor::from_fn(hq.dims(), |i| hq.data()[i] + pr.data()[i]);
            hkv = Tensor::from_fn(hkv.dims(), |i| hkv.data()[i] + pr.data()[i]);
        }
        let mut ctx = Context::new();
        let (a, b) = (ctx.input(hq).unwrap(), ctx.input(hkv).unwrap());
        let o = mea_forward(&mut ctx, store, a, b, head, cfg).unwrap();
        let o = ctx.value(o).clone();
        outs.extend_from_slice(o.data());
        prev = Some(o);
    }
    let mut ctx = Context::new();
    let cat = ctx.input(Tensor::new(&dims, outs).unwrap()).unwrap();
    let y = p.proj.conv3x3(&mut ctx, store, cat).unwrap();
    ctx.value(y).clone()
}
