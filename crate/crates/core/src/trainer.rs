//! Optimization: poly schedule, AdamW, gradient routing, batch assembly,
//! checkpoints and evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::backbone::Backbone;
use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::loss::{matched_loss, TargetSet};
use crate::metrics::{segmentation_map, Confusion, MiouReport};
use crate::model::{Mode, SanModel};
use crate::recognizer::ClassEmbeddings;
use crate::synth::{image_rng, Sample, IGNORE_LABEL};
use crate::tensor::{Float, Parameters, Tape, Tensor};

/// `lr · (1 − iter/total)^power`.
pub fn poly_lr(iter: usize, lr: f64, total: usize, power: f64) -> f64 {
    let frac = (iter.min(total) as f64) / total.max(1) as f64;
    lr * (1.0 - frac).powf(power)
}

/// Parameter groups for learning rates, decay and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    PosEmbed,
    San,
    Recognizer,
}

impl Group {
    pub fn of(name: &str) -> Group {
        if name == "backbone.pos_embed" {
            Group::PosEmbed
        } else if name.starts_with("backbone.") {
            Group::Backbone
        } else if name.starts_with("san.") {
            Group::San
        } else {
            Group::Recognizer
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::PosEmbed => "pos_embed",
            Group::San => "san",
            Group::Recognizer => "recognizer",
        }
    }
}

/// Position embeddings and the temperature are never decayed.
pub fn decay_exempt(name: &str) -> bool {
    name.ends_with("pos_embed") || name.ends_with("logit_scale")
}

/// AdamW with decoupled decay; moments are kept in f64 whatever the model
/// precision.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

impl AdamW {
    /// One update of every tensor that requires a gradient. `lr_of` gives
    /// each parameter's learning rate, `grad_scale` multiplies every
    /// gradient (clipping). Fails before touching anything if a gradient is
    /// not finite.
    pub fn update<T: Float>(
        &mut self,
        params: &mut impl Parameters<T>,
        lr_of: &dyn Fn(&str) -> f64,
        weight_decay: f64,
        grad_scale: f64,
    ) -> Result<()> {
        let mut bad = None;
        params.visit(&mut |name, t| {
            if bad.is_none() && t.requires_grad() {
                if let Some(g) = t.grad() {
                    if g.iter().any(|v| !v.as_f64().is_finite()) {
                        bad = Some(name.to_string());
                    }
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::numeric(format!("non-finite gradient in {name}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |name, p| {
            if !p.requires_grad() {
                return;
            }
            let n = p.numel();
            let g: Vec<f64> = match p.grad() {
                Some(g) => g.iter().map(|v| v.as_f64() * grad_scale).collect(),
                None => vec![0.0; n],
            };
            let m = ms.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = vs.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let lr = lr_of(name);
            let decay = if decay_exempt(name) { 0.0 } else { lr * weight_decay };
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mut w = x.as_f64();
                w -= decay * w;
                w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *x = T::from_f64(w);
            }
        });
        Ok(())
    }
}

/// One training example after augmentation.
#[derive(Clone, Debug)]
pub struct Example<T: Float> {
    pub clip_image: Tensor<T>,
    pub san_image: Tensor<T>,
    pub targets: TargetSet,
}

fn crop_rgb(img: &RgbImage, x0: usize, y0: usize, c: usize, flip: bool) -> RgbImage {
    let mut data = Vec::with_capacity(c * c * 3);
    for y in y0..y0 + c {
        for x in 0..c {
            let sx = if flip { x0 + c - 1 - x } else { x0 + x };
            let i = (y * img.width + sx) * 3;
            data.extend_from_slice(&img.data[i..i + 3]);
        }
    }
    RgbImage {
        width: c,
        height: c,
        data,
    }
}

/// Nearest-neighbour resample of the `c x c` window at `(x0, y0)` to `out x out`.
fn crop_labels(labels: &[u8], width: usize, x0: usize, y0: usize, c: usize, flip: bool, out: usize) -> Vec<u8> {
    let mut v = Vec::with_capacity(out * out);
    for y in 0..out {
        let sy = y0 + ((2 * y + 1) * c) / (2 * out);
        for x in 0..out {
            let mut sx = ((2 * x + 1) * c) / (2 * out);
            if flip {
                sx = c - 1 - sx;
            }
            v.push(labels[sy * width + x0 + sx]);
        }
    }
    v
}

/// Resized inputs and grid targets for one sample; `aug` draws a random
/// crop and flip from `rng`.
pub fn prepare_example<T: Float>(
    sample: &Sample,
    cfg: &TrainConfig,
    mask_grid: usize,
    n_classes: usize,
    aug: Option<&mut dyn rand::RngCore>,
) -> Result<Example<T>> {
    let s = sample.image.width;
    let (x0, y0, c, flip) = match aug {
        None => (0, 0, s, false),
        Some(rng) => {
            let (lo, hi) = cfg.crop_range;
            let frac = if lo < hi { rng.random_range(lo..=hi) } else { lo };
            let c = ((frac * s as f64).round() as usize).clamp(1, s);
            let x0 = rng.random_range(0..=s - c);
            let y0 = rng.random_range(0..=s - c);
            let flip = cfg.hflip && rng.random_bool(0.5);
            (x0, y0, c, flip)
        }
    };
    let img = if c == s && !flip {
        sample.image.clone()
    } else {
        crop_rgb(&sample.image, x0, y0, c, flip)
    };
    let side = cfg.san_input_side;
    let labels = crop_labels(&sample.label.data, s, x0, y0, c, flip, side);
    Ok(Example {
        clip_image: img.to_tensor(cfg.clip_input_side)?,
        san_image: img.to_tensor(side)?,
        targets: TargetSet::from_label_map(&labels, side, mask_grid, n_classes, IGNORE_LABEL)?,
    })
}

/// Stream index reserved for batch assembly of iteration `iter`.
fn batch_rng(seed: u64, iter: usize) -> rand_chacha::ChaCha8Rng {
    image_rng(seed ^ 0xba7c_0000_0000_0000, iter as u64)
}

/// Batch of iteration `iter`: indices drawn without replacement, each
/// example augmented; depends only on `(seed, iter)`.
pub fn make_batch<T: Float>(
    samples: &[Sample],
    cfg: &TrainConfig,
    mask_grid: usize,
    n_classes: usize,
    iter: usize,
) -> Result<Vec<Example<T>>> {
    if samples.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let mut rng = batch_rng(cfg.seed, iter);
    let k = cfg.batch_size.min(samples.len());
    let idx = rand::seq::index::sample(&mut rng, samples.len(), k);
    idx.iter()
        .map(|i| prepare_example(&samples[i], cfg, mask_grid, n_classes, Some(&mut rng)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice: f64,
    pub bce: f64,
    pub cls: f64,
    /// L2 norm of the (unclipped) batch gradient per group; absent when the
    /// group has no trainable tensor.
    pub grad_norms: BTreeMap<Group, f64>,
    pub grad_scale: f64,
}

/// Which groups receive updates, and the multiplier on the base rate.
pub fn routing_table<T: Float>(model: &SanModel<T>, cfg: &TrainConfig) -> BTreeMap<Group, f64> {
    let mut table = BTreeMap::new();
    model.visit(&mut |name, t| {
        if t.requires_grad() {
            let g = Group::of(name);
            table.insert(g, group_lr_mult(g, cfg));
        }
    });
    table
}

fn group_lr_mult(g: Group, cfg: &TrainConfig) -> f64 {
    match g {
        Group::Backbone => cfg.backbone_lr_mult,
        Group::PosEmbed if cfg.backbone_lr_mult > 0.0 && !cfg.finetune_pos_embed => cfg.backbone_lr_mult,
        _ => 1.0,
    }
}

/// Sets `requires_grad` on the backbone to match the config.
pub fn apply_routing<T: Float>(model: &mut SanModel<T>, cfg: &TrainConfig) {
    model
        .backbone
        .set_trainable(cfg.finetune_pos_embed, cfg.backbone_lr_mult > 0.0);
}

/// Forward, match, loss and backward over `batch`, then one optimizer update
/// at the rate for `iter`. Gradients are averaged over the batch.
pub fn train_step<T: Float>(
    model: &mut SanModel<T>,
    opt: &mut AdamW,
    batch: &[Example<T>],
    bank: &ClassEmbeddings<T>,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    model.zero_grads();
    let inv = 1.0 / batch.len() as f64;
    let (mut loss, mut dice, mut bce, mut cls) = (0.0, 0.0, 0.0, 0.0);
    for ex in batch {
        let tape = Tape::new();
        let out = model.forward(&tape, &ex.clip_image, &ex.san_image, bank, cfg.mode, true)?;
        let (terms, _) = matched_loss(out.p, out.m, &ex.targets, &cfg.loss)?;
        let l = terms.total.item().as_f64();
        if !l.is_finite() {
            return Err(Error::numeric(format!("loss is {l} at iteration {iter}")));
        }
        loss += l * inv;
        dice += terms.dice * inv;
        bce += terms.bce * inv;
        cls += terms.cls * inv;
        let grads = tape.backward(terms.total.scale(inv))?;
        model.accumulate_grads(&grads);
    }
    let mut sq: BTreeMap<Group, f64> = BTreeMap::new();
    model.visit(&mut |name, t| {
        if t.requires_grad() {
            let s = t.grad().map_or(0.0, |g| g.iter().map(|v| v.as_f64().powi(2)).sum());
            *sq.entry(Group::of(name)).or_default() += s;
        }
    });
    let total_norm = sq.values().sum::<f64>().sqrt();
    let grad_scale = if cfg.grad_clip > 0.0 && total_norm > cfg.grad_clip {
        cfg.grad_clip / total_norm
    } else {
        1.0
    };
    let lr = poly_lr(iter, cfg.lr, cfg.total_iters, cfg.poly_power);
    let lr_of = |name: &str| lr * group_lr_mult(Group::of(name), cfg);
    opt.update(model, &lr_of, cfg.weight_decay, grad_scale)?;
    Ok(StepReport {
        iter,
        lr,
        loss,
        dice,
        bce,
        cls,
        grad_norms: sq.into_iter().map(|(g, s)| (g, s.sqrt())).collect(),
        grad_scale,
    })
}

/// Model, optimizer state and data for one run.
pub struct Trainer<T: Float> {
    pub config: RunConfig,
    pub model: SanModel<T>,
    pub opt: AdamW,
    pub bank: ClassEmbeddings<T>,
    pub samples: Vec<Sample>,
}

impl<T: Float> Trainer<T> {
    /// Side network and recognizer initialised from `config.train.seed`.
    pub fn new(
        config: RunConfig,
        backbone: Backbone<T>,
        bank: ClassEmbeddings<T>,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::usage("training set is empty"));
        }
        let mut rng = image_rng(config.train.seed, u64::MAX);
        let mut model = SanModel::new(backbone, config.san.clone(), config.train.san_input_side, &mut rng)?;
        apply_routing(&mut model, &config.train);
        Ok(Trainer {
            config,
            model,
            opt: AdamW::default(),
            bank,
            samples,
        })
    }

    pub fn iter(&self) -> usize {
        self.opt.step as usize
    }

    pub fn mask_grid(&self) -> usize {
        self.config.train.san_input_side / self.config.san.patch
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let iter = self.iter();
        let cfg = &self.config.train;
        let batch = make_batch(&self.samples, cfg, self.mask_grid(), self.bank.len(), iter)?;
        train_step(&mut self.model, &mut self.opt, &batch, &self.bank, cfg, iter)
    }

    /// Runs to `total_iters`, writing one JSON line per iteration after a
    /// header line with the routing table, and checkpoints into `ckpt_dir`.
    pub fn run(&mut self, log: &mut dyn Write, ckpt_dir: Option<&Path>) -> Result<Vec<StepReport>> {
        let header = serde_json::json!({
            "event": "start",
            "iter": self.iter(),
            "mode": self.config.train.mode,
            "routing": routing_table(&self.model, &self.config.train),
            "trainable_params": self.model.trainable_count(),
        });
        writeln!(log, "{header}").map_err(|e| Error::io("<metrics log>", e))?;
        let mut reports = Vec::new();
        let every = self.config.train.checkpoint_every;
        while self.iter() < self.config.train.total_iters {
            let r = self.step()?;
            writeln!(log, "{}", serde_json::to_string(&r)?).map_err(|e| Error::io("<metrics log>", e))?;
            reports.push(r);
            if let Some(dir) = ckpt_dir {
                if every > 0 && self.iter().is_multiple_of(every) && self.iter() < self.config.train.total_iters {
                    self.checkpoint()?
                        .save(dir.join(format!("step_{:06}.sant", self.iter())))?;
                }
            }
        }
        if let Some(dir) = ckpt_dir {
            self.checkpoint()?.save(dir.join("final.sant"))?;
        }
        Ok(reports)
    }

    /// Parameters under `param/`, moments under `adam.m/` and `adam.v/`,
    /// the step count as `adam.step`.
    pub fn checkpoint(&self) -> Result<Archive> {
        let mut a = Archive::new();
        let mut result = Ok(());
        self.model.visit(&mut |name, t| {
            if result.is_ok() {
                result = a.insert(format!("param/{name}"), t.detached_copy());
            }
        });
        result?;
        for (prefix, map) in [("adam.m", &self.opt.m), ("adam.v", &self.opt.v)] {
            for (name, v) in map {
                a.insert(format!("{prefix}/{name}"), Tensor::<f64>::new([v.len()], v.clone())?)?;
            }
        }
        a.insert("adam.step", Tensor::<f64>::scalar(self.opt.step as f64))?;
        Ok(a)
    }

    pub fn restore(&mut self, a: &Archive) -> Result<()> {
        load_params(&mut self.model, a)?;
        let mut opt = AdamW {
            step: a.get::<f64>("adam.step")?.item() as u64,
            ..AdamW::default()
        };
        for (name, stored) in &a.tensors {
            let t = stored.to_tensor::<f64>().into_data();
            if let Some(n) = name.strip_prefix("adam.m/") {
                opt.m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("adam.v/") {
                opt.v.insert(n.to_string(), t);
            }
        }
        self.opt = opt;
        Ok(())
    }
}

/// Loads `param/*` tensors of a checkpoint into `model`.
pub fn load_params<T: Float>(model: &mut SanModel<T>, a: &Archive) -> Result<()> {
    let mut params = Archive::new();
    for (name, s) in &a.tensors {
        if let Some(n) = name.strip_prefix("param/") {
            params.tensors.insert(n.to_string(), s.clone());
        }
    }
    params.load_into(model)
}

/// Per-image argmax at label resolution: no-object row included in the
/// softmax, then dropped.
pub fn predict<T: Float>(
    model: &SanModel<T>,
    bank: &ClassEmbeddings<T>,
    sample: &Sample,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<Vec<usize>> {
    let clip = sample.image.to_tensor::<T>(cfg.clip_input_side)?;
    let san = sample.image.to_tensor::<T>(cfg.san_input_side)?;
    let tape = Tape::new();
    let out = model.forward(&tape, &clip, &san, bank, mode, true)?;
    let m: Vec<f64> = out.m.value().iter().map(|v| v.as_f64()).collect();
    let p: Vec<f64> = out.p.value().iter().map(|v| v.as_f64()).collect();
    let grid = out.m.shape()[0];
    let map = segmentation_map(&m, grid, &p, bank.len() + 1, true, sample.label.width)?;
    Ok(map.argmax)
}

/// mIoU of `model` over `samples`, optionally keeping every argmax map.
pub fn evaluate<T: Float>(
    model: &SanModel<T>,
    bank: &ClassEmbeddings<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    keep_maps: bool,
) -> Result<(MiouReport, Vec<Vec<usize>>)> {
    if samples.is_empty() {
        return Err(Error::usage("evaluation set is empty"));
    }
    let mut conf = Confusion::new(bank.len());
    let mut maps = Vec::new();
    for s in samples {
        let pred = predict(model, bank, s, cfg, cfg.mode)?;
        let gt: Vec<usize> = s.label.data.iter().map(|&v| v as usize).collect();
        conf.add(&pred, &gt, IGNORE_LABEL as usize)?;
        if keep_maps {
            maps.push(pred);
        }
    }
    Ok((conf.report(), maps))
}
