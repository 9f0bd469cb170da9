//! Parameter, FLOP and latency accounting.
//!
//! Multiply-accumulates are counted analytically from the configs and agree
//! exactly with the tape's own matmul counter. Two totals are reported: the
//! 2·MAC rule (`flops`, with element-wise work added) and the one-MAC-one-FLOP
//! convention common in vision model tables (`gmacs`).

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::model::{Mode, SanModel};
use crate::recognizer::ClassEmbeddings;
use crate::tensor::{Float, Parameters, Tape, Tensor};
use crate::trainer::Group;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub backbone: u64,
    pub san_blocks: u64,
    pub san_other: u64,
    pub recognizer: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.backbone + self.san_blocks + self.san_other + self.recognizer
    }
}

fn block_macs(t: u64, w: u64) -> u64 {
    12 * t * w * w + 2 * t * t * w
}

/// Element-wise work of one transformer block on `t` tokens: two norms
/// (5/elem), softmax (3/elem), GELU (8/elem), score scaling and residuals.
fn block_elementwise(t: u64, w: u64, heads: u64, tk: u64) -> u64 {
    2 * 5 * t * w + 4 * heads * t * tk + 8 * 4 * t * w + 2 * t * w
}

/// Matmul MACs of one forward pass with `classes` bank rows.
pub fn forward_macs(c: &RunConfig, classes: usize, mode: Mode) -> Counts {
    let (b, s) = (&c.backbone, &c.san);
    let w = b.width as u64;
    let g = (c.train.clip_input_side / b.patch) as u64;
    let t = 1 + g * g;
    let n = s.n_queries as u64;
    let e = b.embed_dim as u64;
    let deep = (b.depth - b.split_layer) as u64;
    let mut backbone = g * g * (b.patch * b.patch * 3) as u64 * w;
    backbone += b.depth as u64 * block_macs(t, w);
    backbone += deep * (10 * n * w * w + 2 * n * t * w);
    backbone += n * w * e;

    let ws = s.width as u64;
    let gs = (c.train.san_input_side / s.patch) as u64;
    let ts = n + gs * gs;
    let pd = s.proj_dim as u64;
    let kb = s.bias_heads(b.heads) as u64;
    let san_blocks = s.depth as u64 * block_macs(ts, ws);
    let mlp = |rows: u64, out: u64| rows * (2 * ws * ws + ws * out);
    let mut san_other = gs * gs * (s.patch * s.patch * 3) as u64 * ws;
    san_other += s.fusion_map.len() as u64 * g * g * w * ws;
    san_other += mlp(n, pd) + mlp(gs * gs, pd) + gs * gs * pd * n;
    if mode == Mode::E2e {
        if !s.share_query_proj {
            san_other += mlp(n, pd);
        }
        san_other += mlp(gs * gs, kb * pd) + gs * gs * kb * pd * n;
    }
    Counts {
        backbone,
        san_blocks,
        san_other,
        recognizer: (classes as u64 + 1) * n * e,
    }
}

/// Shape-proportional estimate of the non-matmul work.
pub fn forward_elementwise(c: &RunConfig) -> u64 {
    let (b, s) = (&c.backbone, &c.san);
    let (w, k) = (b.width as u64, b.heads as u64);
    let g = (c.train.clip_input_side / b.patch) as u64;
    let t = 1 + g * g;
    let n = s.n_queries as u64;
    let deep = (b.depth - b.split_layer) as u64;
    let mut total = b.depth as u64 * block_elementwise(t, w, k, t);
    total += deep * (block_elementwise(n, w, k, t) + k * n * t);
    let ws = s.width as u64;
    let gs = (c.train.san_input_side / s.patch) as u64;
    let ts = n + gs * gs;
    total += s.depth as u64 * (block_elementwise(ts, ws, s.heads as u64, ts) + ts * ws);
    // Fusion resize (4 taps per output) and add, mask sigmoid.
    total += s.fusion_map.len() as u64 * 5 * gs * gs * ws + gs * gs * n;
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub trainable_params: usize,
    pub params_by_group: BTreeMap<Group, usize>,
    pub macs: Counts,
    pub elementwise: u64,
    /// `2·MACs + element-wise`, in units of 1e9.
    pub gflops: f64,
    /// MACs in units of 1e9.
    pub gmacs: f64,
    /// Matmul MACs recorded by the tape on one real forward, when timed.
    pub measured_macs: Option<u64>,
    pub latency_ms_median: Option<f64>,
    pub latency_runs: usize,
}

/// Trainable element count per group.
pub fn trainable_by_group<T: Float>(model: &SanModel<T>) -> BTreeMap<Group, usize> {
    let mut out = BTreeMap::new();
    model.visit(&mut |name, t| {
        if t.requires_grad() {
            *out.entry(Group::of(name)).or_insert(0) += t.numel();
        }
    });
    out
}

/// Counts for `model`; when `config.profile.latency_runs > 0` also times
/// that many forward passes after one warm-up and reports the median.
pub fn profile<T: Float>(model: &SanModel<T>, bank: &ClassEmbeddings<T>, config: &RunConfig) -> Result<ProfileReport> {
    let mode = config.train.mode;
    let macs = forward_macs(config, bank.len(), mode);
    let elementwise = forward_elementwise(config);
    let total = macs.total();
    let runs = config.profile.latency_runs;
    let (mut measured, mut latency) = (None, None);
    if runs > 0 {
        let clip = Tensor::<T>::zeros([config.train.clip_input_side, config.train.clip_input_side, 3]);
        let san = Tensor::<T>::zeros([config.train.san_input_side, config.train.san_input_side, 3]);
        let tape = Tape::new();
        model.forward(&tape, &clip, &san, bank, mode, true)?;
        measured = Some(tape.macs());
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            let tape = Tape::new();
            model.forward(&tape, &clip, &san, bank, mode, true)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        latency = Some(if runs % 2 == 1 {
            times[runs / 2]
        } else {
            0.5 * (times[runs / 2 - 1] + times[runs / 2])
        });
    }
    Ok(ProfileReport {
        trainable_params: model.trainable_count(),
        params_by_group: trainable_by_group(model),
        macs,
        elementwise,
        gflops: (2 * total + elementwise) as f64 / 1e9,
        gmacs: total as f64 / 1e9,
        measured_macs: measured,
        latency_ms_median: latency,
        latency_runs: runs,
    })
}
