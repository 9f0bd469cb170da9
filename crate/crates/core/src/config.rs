//! Run configuration: one JSON document, named presets and dotted overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{BackboneConfig, Tap};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::{validate_pair, Mode};
use crate::side_adapter::SanConfig;
use crate::synth::{default_classes, ClassSpec, SynthConfig};
use crate::tensor::DType;

pub const PRESETS: &[&str] = &["desk", "paper_vitb16"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_iters: usize,
    pub poly_power: f64,
    pub finetune_pos_embed: bool,
    pub backbone_lr_mult: f64,
    pub mode: Mode,
    pub seed: u64,
    pub dtype: DType,
    pub clip_input_side: usize,
    pub san_input_side: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Crop side as a fraction of the image side, sampled uniformly.
    pub crop_range: (f64, f64),
    pub hflip: bool,
    /// Checkpoint interval in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub loss: LossWeights,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |m: String| Err(Error::config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return c(format!("lr must be positive, got {}", self.lr));
        }
        if self.weight_decay < 0.0 || self.backbone_lr_mult < 0.0 || self.grad_clip < 0.0 {
            return c("weight_decay, backbone_lr_mult and grad_clip must be non-negative".into());
        }
        if self.batch_size == 0 || self.total_iters == 0 {
            return c("batch_size and total_iters must be positive".into());
        }
        if self.san_input_side < self.clip_input_side {
            return c(format!(
                "side-network input {} is smaller than backbone input {}",
                self.san_input_side, self.clip_input_side
            ));
        }
        let (lo, hi) = self.crop_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return c(format!("crop_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; relative paths resolve against the working directory.
    pub dir: PathBuf,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub side: usize,
    pub shapes_per_image: (usize, usize),
    pub classes: Vec<ClassSpec>,
    pub prototype_samples: usize,
}

impl DataConfig {
    /// Generator settings for the training split; validation uses a disjoint
    /// stream range.
    pub fn synth(&self, split: Split) -> SynthConfig {
        let (seed, n) = match split {
            Split::Train => (self.seed, self.n_train),
            Split::Val => (self.seed ^ 0x5eed_0000_0000_0001, self.n_val),
        };
        SynthConfig {
            seed,
            n_images: n,
            side: self.side,
            classes: self.classes.clone(),
            shapes_per_image: self.shapes_per_image,
        }
    }

    pub fn manifest_path(&self, split: Split) -> PathBuf {
        self.dir.join(format!("{split}.json"))
    }

    pub fn prototypes_path(&self) -> PathBuf {
        self.dir.join("prototypes.sant")
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.dir.join("backbone.sant")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// Write per-image argmax maps as PGM next to the metrics.
    pub write_maps: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    /// Timed forward passes after one warm-up; 0 skips timing.
    pub latency_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub san: SanConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub profile: ProfileConfig,
}

fn layers(v: &[usize]) -> Vec<Tap> {
    v.iter().map(|&i| Tap::from_index(i)).collect()
}

impl RunConfig {
    /// Small model and synthetic data sized for a laptop CPU.
    pub fn desk() -> Self {
        let taps = layers(&[0, 2, 4]);
        RunConfig {
            backbone: BackboneConfig {
                depth: 6,
                width: 64,
                heads: 4,
                patch: 16,
                native_resolution: 64,
                embed_dim: 32,
                tap_layers: taps.clone(),
                split_layer: 4,
            },
            san: SanConfig {
                depth: 3,
                width: 48,
                heads: 3,
                patch: 16,
                n_queries: 8,
                fusion_map: taps.into_iter().zip(layers(&[0, 1, 2])).collect(),
                share_query_proj: false,
                bias_per_head: true,
                proj_dim: 32,
            },
            train: TrainConfig {
                lr: 1e-3,
                weight_decay: 1e-4,
                batch_size: 8,
                total_iters: 2000,
                poly_power: 0.9,
                finetune_pos_embed: true,
                backbone_lr_mult: 0.0,
                mode: Mode::E2e,
                seed: 0,
                dtype: DType::Float32,
                clip_input_side: 64,
                san_input_side: 128,
                grad_clip: 1.0,
                crop_range: (0.6, 1.0),
                hflip: true,
                checkpoint_every: 0,
                loss: LossWeights::default(),
            },
            data: DataConfig {
                dir: PathBuf::from("data"),
                seed: 0,
                n_train: 200,
                n_val: 50,
                side: 128,
                shapes_per_image: (1, 3),
                classes: default_classes(),
                prototype_samples: 8,
            },
            eval: EvalConfig {
                split: Split::Val,
                write_maps: false,
            },
            profile: ProfileConfig { latency_runs: 20 },
        }
    }

    /// ViT-B/16 backbone with the full-size side network.
    pub fn paper_vitb16() -> Self {
        let mut c = Self::desk();
        let taps = layers(&[0, 3, 6, 9]);
        c.backbone = BackboneConfig {
            depth: 12,
            width: 768,
            heads: 12,
            patch: 16,
            native_resolution: 224,
            embed_dim: 512,
            tap_layers: taps.clone(),
            split_layer: 9,
        };
        c.san = SanConfig {
            depth: 8,
            width: 240,
            heads: 6,
            patch: 16,
            n_queries: 100,
            fusion_map: taps.into_iter().zip(layers(&[0, 1, 2, 3])).collect(),
            share_query_proj: false,
            bias_per_head: true,
            proj_dim: 256,
        };
        c.train.lr = 1e-4;
        c.train.batch_size = 32;
        c.train.total_iters = 60_000;
        c.train.clip_input_side = 320;
        c.train.san_input_side = 640;
        c.data.side = 640;
        c.profile.latency_runs = 0;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper_vitb16" => Ok(Self::paper_vitb16()),
            other => Err(Error::config(format!(
                "unknown preset {other:?}, expected one of {PRESETS:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_pair(&self.backbone, &self.san)?;
        self.train.validate()?;
        for (side, what) in [
            (self.train.clip_input_side, "backbone"),
            (self.train.san_input_side, "side-network"),
        ] {
            let p = if what == "backbone" {
                self.backbone.patch
            } else {
                self.san.patch
            };
            if side == 0 || side % p != 0 {
                return Err(Error::config(format!(
                    "{what} input side {side} is not a positive multiple of patch {p}"
                )));
            }
        }
        self.data.synth(Split::Train).validate()
    }

    /// Expands a config document: an optional `"preset"` key (default
    /// `"desk"`) supplies every field, the rest of the document overrides
    /// individual fields, then `sets` (`dotted.path=value`) apply in order.
    pub fn from_value(doc: Value, sets: &[String]) -> Result<Self> {
        let mut doc = match doc {
            Value::Object(m) => m,
            _ => return Err(Error::config("config must be a JSON object")),
        };
        let preset = match doc.remove("preset") {
            None => "desk".to_string(),
            Some(Value::String(s)) => s,
            Some(v) => return Err(Error::config(format!("preset must be a string, got {v}"))),
        };
        let mut base = serde_json::to_value(Self::preset(&preset)?)?;
        merge(&mut base, Value::Object(doc), "")?;
        for s in sets {
            apply_set(&mut base, s)?;
        }
        let c: RunConfig = serde_json::from_value(base).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let doc = match path {
            None => Value::Object(Default::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
        };
        Self::from_value(doc, sets)
    }
}

/// Overlays `patch` onto `base`; objects merge key by key and every key must
/// already exist so typos surface as errors.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| Error::config(format!("unknown config key {sub:?}")))?;
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a bare string.
fn apply_set(base: &mut Value, set: &str) -> Result<()> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::usage(format!("override {set:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = value;
    for key in path.rsplit('.') {
        let mut m = serde_json::Map::new();
        m.insert(key.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(base, patch, "")
}
