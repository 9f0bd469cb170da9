//! Loop-level f64 re-implementation of the model used as a test oracle. It
//! shares no code with the library apart from reading weights (and the
//! bilinear resampler, which has its own scalar oracle).

#![allow(dead_code)]

use san::backbone::{Backbone, Tap};
use san::nn::{Block, LayerNorm, Linear, Mlp3};
use san::side_adapter::SideAdapter;
use san::tensor::{bilinear_resize_slice, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn rows(t: &Tensor<f64>) -> Mat {
    let s = t.shape();
    let c = *s.last().unwrap();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

pub fn linear(x: &Mat, l: &Linear<f64>) -> Mat {
    let (i, o) = (l.weight.shape()[0], l.weight.shape()[1]);
    let w = l.weight.data();
    x.iter()
        .map(|r| {
            (0..o)
                .map(|j| {
                    let b = l.bias.as_ref().map_or(0.0, |b| b.data()[j]);
                    (0..i).map(|k| r[k] * w[k * o + j]).sum::<f64>() + b
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, ln: &LayerNorm<f64>) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * ln.weight.data()[j] + ln.bias.data()[j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn map(x: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn mlp3(x: &Mat, m: &Mlp3<f64>) -> Mat {
    let h = map(&linear(x, &m.layers[0]), gelu);
    let h = map(&linear(&h, &m.layers[1]), gelu);
    linear(&h, &m.layers[2])
}

/// Multi-head attention of query rows over key rows. `logit(h, i, j)` adds
/// to the scaled score, `None` masks the pair out entirely.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, logit: &dyn Fn(usize, usize, usize) -> Option<f64>) -> Mat {
    let w = q[0].len();
    let d = w / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![vec![0.0; w]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let mut s: Vec<Option<f64>> = Vec::with_capacity(k.len());
            for j in 0..k.len() {
                s.push(
                    logit(h, i, j).map(|b| (0..d).map(|c| q[i][h * d + c] * k[j][h * d + c]).sum::<f64>() * scale + b),
                );
            }
            let m = s.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e: Vec<f64> = s.iter().map(|x| x.map_or(0.0, |x| (x - m).exp())).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.len() {
                for c in 0..d {
                    out[i][h * d + c] += e[j] / z * v[j][h * d + c];
                }
            }
        }
    }
    out
}

/// One pre-norm block over all of `x` with an arbitrary attention mask/bias.
pub fn block(x: &Mat, b: &Block<f64>, logit: &dyn Fn(usize, usize, usize) -> Option<f64>) -> Mat {
    let a = layer_norm(x, &b.ln1);
    let att = attend(&linear(&a, &b.q), &linear(&a, &b.k), &linear(&a, &b.v), b.heads, logit);
    let x = add(x, &linear(&att, &b.proj));
    let h = map(&linear(&layer_norm(&x, &b.ln2), &b.fc1), gelu);
    add(&x, &linear(&h, &b.fc2))
}

pub fn patchify(image: &Tensor<f64>, p: usize) -> Mat {
    let s = image.shape()[0];
    let g = s / p;
    let mut out = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let mut r = Vec::new();
            for y in 0..p {
                for x in 0..p {
                    for c in 0..3 {
                        r.push(image.at(&[gy * p + y, gx * p + x, c]));
                    }
                }
            }
            out.push(r);
        }
    }
    out
}

pub struct BackboneRef {
    pub cls: Vec<f64>,
    pub visual: Mat,
    pub sls: Option<Mat>,
    pub taps: Vec<Mat>,
}

/// Whole backbone with the shadow tokens appended to one fused sequence
/// `[cls; visual; sls]`. Class and visual rows never see shadow columns;
/// shadow rows see class and visual columns, with `bias(h, n, j)` added
/// for visual column `j`, and never each other. Input grid must be native.
pub fn backbone_fused(
    bb: &Backbone<f64>,
    image: &Tensor<f64>,
    n_sls: usize,
    bias: &dyn Fn(usize, usize, usize) -> f64,
) -> BackboneRef {
    let c = &bb.config;
    let vis = linear(&patchify(image, c.patch), &bb.patch_embed);
    let hw = vis.len();
    let mut x = vec![bb.cls_token.data().to_vec()];
    x.extend(vis);
    x = add(&x, &rows(&bb.pos_embed));
    let t = x.len();
    let mut taps = Vec::new();
    if c.tap_layers.contains(&Tap::Stem) {
        taps.push(x[1..].to_vec());
    }
    let plain = |_: usize, _: usize, _: usize| Some(0.0);
    for l in 0..c.split_layer {
        x = block(&x, &bb.layers[l], &plain);
        if c.tap_layers.contains(&Tap::Layer(l + 1)) {
            taps.push(x[1..].to_vec());
        }
    }
    if n_sls > 0 {
        let cls = x[0].clone();
        x.extend(std::iter::repeat_n(cls, n_sls));
    }
    let fused = |h: usize, i: usize, j: usize| -> Option<f64> {
        match (i < t, j < t) {
            (true, true) => Some(0.0),
            (true, false) | (false, false) => None,
            (false, true) => Some(if j == 0 { 0.0 } else { bias(h, i - t, j - 1) }),
        }
    };
    for l in c.split_layer..c.depth {
        x = block(&x, &bb.layers[l], &fused);
    }
    BackboneRef {
        cls: x[0].clone(),
        visual: x[1..1 + hw].to_vec(),
        sls: (n_sls > 0).then(|| x[t..].to_vec()),
        taps,
    }
}

pub fn project(bb: &Backbone<f64>, x: &Mat) -> Mat {
    linear(&layer_norm(x, &bb.final_ln), &bb.proj)
}

fn resize(x: &Mat, g_in: usize, g_out: usize) -> Mat {
    let w = x[0].len();
    let flat: Vec<f64> = x.iter().flatten().copied().collect();
    bilinear_resize_slice(&flat, g_in, g_in, w, g_out, g_out)
        .chunks(w)
        .map(|r| r.to_vec())
        .collect()
}

pub struct SanRef {
    pub queries: Mat,
    pub visual: Mat,
    /// `[cell][n]`.
    pub masks: Mat,
    /// `[cell][h * N + n]` on the side grid, before resizing.
    pub biases: Mat,
}

/// Side network on its native grid, fed with reference backbone taps.
pub fn san_forward(san: &SideAdapter<f64>, image: &Tensor<f64>, taps: &[Mat]) -> SanRef {
    let c = &san.config;
    let g = image.shape()[0] / c.patch;
    assert_eq!(g, san.grid, "reference runs on the built grid only");
    let n = c.n_queries;
    let mut vis = linear(&patchify(image, c.patch), &san.patch_embed);
    let mut q = rows(&san.queries);
    let pos = rows(&san.pos_embed);
    for (l, blk) in san.layers.iter().enumerate() {
        for (j, (_, s)) in c.fusion_map.iter().enumerate() {
            if s.index() == l {
                let gb = (taps[j].len() as f64).sqrt() as usize;
                vis = add(&vis, &resize(&linear(&taps[j], &san.fusion[j]), gb, g));
            }
        }
        let mut x = q.clone();
        x.extend(vis.clone());
        let x = block(&add(&x, &pos), blk, &|_, _, _| Some(0.0));
        q = x[..n].to_vec();
        vis = x[n..].to_vec();
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mq = mlp3(&q, &san.mask_q);
    let mv = mlp3(&vis, &san.mask_v);
    let masks = mv.iter().map(|v| mq.iter().map(|qq| dot(v, qq)).collect()).collect();
    let aq = mlp3(&q, san.attn_q.as_ref().unwrap_or(&san.mask_q));
    let av = mlp3(&vis, &san.attn_v);
    let d = c.proj_dim;
    let kb = av[0].len() / d;
    let biases = av
        .iter()
        .map(|v| {
            (0..kb)
                .flat_map(|h| aq.iter().map(move |qq| (h, qq)))
                .map(|(h, qq)| dot(&v[h * d..(h + 1) * d], qq))
                .collect()
        })
        .collect();
    SanRef {
        queries: q,
        visual: vis,
        masks,
        biases,
    }
}

pub fn max_abs_diff(a: &Mat, b: &[f64]) -> f64 {
    a.iter()
        .flatten()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
