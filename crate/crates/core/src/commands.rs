//! The four operator commands. Each takes a validated [`RunConfig`] and works
//! on the files under `config.data.dir` and an output directory.

use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::backbone::Backbone;
use crate::config::{RunConfig, Split};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::MiouReport;
use crate::model::SanModel;
use crate::profile::{profile, ProfileReport};
use crate::recognizer::ClassEmbeddings;
use crate::synth::{generate_prototypes, generate_synthetic, image_rng, DatasetManifest, Sample};
use crate::tensor::{DType, Float, Tensor};
use crate::trainer::{evaluate, load_params, StepReport, Trainer};

/// Stream of the data seed reserved for the frozen backbone weights.
const BACKBONE_STREAM: u64 = u64::MAX - 1;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// The frozen backbone the dataset's prototypes were computed with.
pub fn seeded_backbone<T: Float>(config: &RunConfig) -> Result<Backbone<T>> {
    Backbone::random(
        config.backbone.clone(),
        &mut image_rng(config.data.seed, BACKBONE_STREAM),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub train_images: usize,
    pub val_images: usize,
    pub classes: usize,
    pub files: Vec<PathBuf>,
}

/// Writes both splits, the frozen backbone and the prototype bank under
/// `config.data.dir`.
pub fn cmd_synth(config: &RunConfig) -> Result<SynthSummary> {
    let dir = &config.data.dir;
    create_dir(dir)?;
    let mut files = Vec::new();
    let mut counts = [0; 2];
    for (k, split) in [Split::Train, Split::Val].into_iter().enumerate() {
        let samples = generate_synthetic(&config.data.synth(split))?;
        let name = format!("{split}.json");
        DatasetManifest::write(dir, &name, &config.data.classes, &samples)?;
        counts[k] = samples.len();
        files.push(dir.join(name));
    }
    let backbone = seeded_backbone::<f64>(config)?;
    Archive::from_params(&backbone)?.save(config.data.backbone_path())?;
    files.push(config.data.backbone_path());
    let bank = generate_prototypes(
        &backbone,
        &config.data.classes,
        config.train.clip_input_side,
        config.data.prototype_samples,
        config.data.seed,
    )?;
    let mut a = Archive::new();
    a.insert("prototypes", bank.e)?;
    a.save(config.data.prototypes_path())?;
    files.push(config.data.prototypes_path());
    Ok(SynthSummary {
        train_images: counts[0],
        val_images: counts[1],
        classes: config.data.classes.len(),
        files,
    })
}

pub fn load_backbone<T: Float>(config: &RunConfig) -> Result<Backbone<T>> {
    let mut b = Backbone::<T>::zeros(config.backbone.clone())?;
    Archive::load(config.data.backbone_path())?.load_into(&mut b)?;
    Ok(b)
}

pub fn load_bank<T: Float>(config: &RunConfig) -> Result<ClassEmbeddings<T>> {
    let e = Archive::load(config.data.prototypes_path())?.get::<T>("prototypes")?;
    ClassEmbeddings::new(e, config.data.classes.iter().map(|c| c.name.clone()).collect())
}

pub fn load_split(config: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let path = config.data.manifest_path(split);
    let manifest = DatasetManifest::load(&path)?;
    if manifest.classes != config.data.classes {
        return Err(Error::config(format!(
            "{} lists different classes from the config",
            path.display()
        )));
    }
    let samples = manifest.read_samples(&path)?;
    if samples.is_empty() {
        return Err(Error::usage(format!("{} has no images", path.display())));
    }
    Ok(samples)
}

fn train_typed<T: Float>(config: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<Vec<StepReport>> {
    let backbone = load_backbone::<T>(config)?;
    let bank = load_bank::<T>(config)?;
    let samples = load_split(config, Split::Train)?;
    let mut trainer = Trainer::new(config.clone(), backbone, bank, samples)?;
    if let Some(path) = resume {
        trainer.restore(&Archive::load(path)?)?;
    }
    let log_path = out.join("metrics.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let reports = trainer.run(&mut log, Some(out))?;
    std::io::Write::flush(&mut log).map_err(|e| Error::io(&log_path, e))?;
    Ok(reports)
}

/// Trains from the dataset in `config.data.dir`, writing `config.json`,
/// `metrics.jsonl` and checkpoints into `out`. With `resume`, continues from
/// that checkpoint and appends to the log.
pub fn cmd_train(config: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<Vec<StepReport>> {
    create_dir(out)?;
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&cfg_path, e))?;
    match config.train.dtype {
        DType::Float32 => train_typed::<f32>(config, out, resume),
        DType::Float64 => train_typed::<f64>(config, out, resume),
    }
}

pub fn load_model<T: Float>(config: &RunConfig, checkpoint: &Path) -> Result<SanModel<T>> {
    let backbone = load_backbone::<T>(config)?;
    let mut rng = image_rng(config.train.seed, u64::MAX);
    let mut model = SanModel::new(backbone, config.san.clone(), config.train.san_input_side, &mut rng)?;
    load_params(&mut model, &Archive::load(checkpoint)?)?;
    Ok(model)
}

fn eval_typed<T: Float>(config: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<MiouReport> {
    let samples = load_split(config, config.eval.split)?;
    let model = load_model::<T>(config, checkpoint)?;
    let bank = load_bank::<T>(config)?;
    let (report, maps) = evaluate(&model, &bank, &samples, &config.train, config.eval.write_maps)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join(format!("eval_{}.json", config.eval.split));
        std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
        if config.eval.write_maps {
            let maps_dir = dir.join("maps");
            create_dir(&maps_dir)?;
            for (i, (m, s)) in maps.iter().zip(&samples).enumerate() {
                let img = GrayImage::new(s.label.width, s.label.height, m.iter().map(|&c| c as u8).collect())?;
                img.save(maps_dir.join(format!("{}_{i:04}.pgm", config.eval.split)))?;
            }
        }
    }
    Ok(report)
}

/// mIoU of a checkpoint on `config.eval.split`; writes the report (and
/// argmax maps when enabled) into `out`.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<MiouReport> {
    match config.train.dtype {
        DType::Float32 => eval_typed::<f32>(config, checkpoint, out),
        DType::Float64 => eval_typed::<f64>(config, checkpoint, out),
    }
}

fn profile_typed<T: Float>(config: &RunConfig) -> Result<ProfileReport> {
    let backbone = seeded_backbone::<T>(config)?;
    let mut rng = image_rng(config.train.seed, u64::MAX);
    let mut model = SanModel::new(backbone, config.san.clone(), config.train.san_input_side, &mut rng)?;
    crate::trainer::apply_routing(&mut model, &config.train);
    let c = config.data.classes.len();
    let e = Tensor::<T>::randn([c, config.backbone.embed_dim], 1.0, &mut rng);
    let bank = ClassEmbeddings::new(e, config.data.classes.iter().map(|c| c.name.clone()).collect())?;
    profile(&model, &bank, config)
}

/// Trainable parameters, analytic FLOPs and (optionally) latency of the
/// configured model with random weights.
pub fn cmd_profile(config: &RunConfig) -> Result<ProfileReport> {
    match config.train.dtype {
        DType::Float32 => profile_typed::<f32>(config),
        DType::Float64 => profile_typed::<f64>(config),
    }
}
