//! The three training stages (supervised encoder pretraining, denoising
//! pretraining, segmentation fine-tuning) and the checkpoints that carry
//! parameters from one to the next.

mod checkpoint;
mod train;

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use train::{EpochRecord, StepRecord, TrainLog, TrainParams};

use crate::config::{sha256_hex, Config};
use crate::corruption::{self, Formulation, Magnitude, NoiseSpec, Target};
use crate::data::{self, DatasetSpec, NormStats, Sample, IGNORE};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, Protocol};
use crate::model::{build_model, Head, Model, ModelConfig, Scope};
use crate::rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.ddep";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    EncoderSupervised,
    DeP,
    DDeP,
    FineTune,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Stage> {
        Ok(match s {
            "encoder" => Stage::EncoderSupervised,
            "dep" => Stage::DeP,
            "ddep" => Stage::DDeP,
            "finetune" => Stage::FineTune,
            _ => return Err(Error::invalid(format!("unknown stage `{s}`"))),
        })
    }

    /// The config section holding this stage's training settings.
    pub fn section(self) -> &'static str {
        match self {
            Stage::EncoderSupervised => "encoder",
            Stage::DeP | Stage::DDeP => "denoise",
            Stage::FineTune => "finetune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::EncoderSupervised => "encoder",
            Stage::DeP => "dep",
            Stage::DDeP => "ddep",
            Stage::FineTune => "finetune",
        })
    }
}

/// Where a stage's starting parameters come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Init {
    Scratch,
    /// Encoder only; the rest is seeded.
    Encoder,
    /// Encoder and decoder of a DDeP checkpoint.
    DDeP,
    /// Encoder and decoder of a DeP checkpoint.
    DeP,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub model: ModelConfig,
    /// Training data. For fine-tuning this is the labeled pool; the
    /// validation split follows it.
    pub data: DatasetSpec,
    pub val_samples: usize,
    pub noise: Option<NoiseSpec>,
    pub train: TrainParams,
    pub init: Init,
    pub init_from: Option<PathBuf>,
    pub label_fraction: f64,
    pub lr_grid: Vec<f64>,
    pub protocol: Protocol,
    pub eval_batch: usize,
    settings: BTreeMap<String, String>,
}

fn dataset(cfg: &Config, section: &str) -> Result<DatasetSpec> {
    let k = |name: &str| format!("{section}.{name}");
    let spec = DatasetSpec {
        num_samples: cfg.parse_as(&k("num_samples"))?,
        image_size: cfg.parse_as(&k("image_size"))?,
        num_classes: cfg.parse_as(&k("num_classes"))?,
        seed: cfg.parse_as(&k("seed"))?,
        clutter_min: cfg.parse_as(&k("clutter_min"))?,
        clutter_max: cfg.parse_as(&k("clutter_max"))?,
        noise_free: cfg.parse_as(&k("noise_free"))?,
    };
    spec.validate().map_err(|e| cfg.bad(section, e.to_string()))?;
    Ok(spec)
}

fn model_config(cfg: &Config, head: Head, num_classes: usize) -> Result<ModelConfig> {
    let m = ModelConfig {
        in_channels: 3,
        encoder_widths: cfg.list("model.encoder_widths")?,
        base_decoder_widths: cfg.list("model.decoder_widths")?,
        decoder_width_multiplier: cfg.parse_as("model.decoder_width_multiplier")?,
        bottleneck_attention: cfg.parse_as("model.bottleneck_attention")?,
        num_classes,
        head,
    };
    m.validate().map_err(|e| cfg.bad("model", e.to_string()))?;
    Ok(m)
}

fn train_params(cfg: &Config, section: &str) -> Result<TrainParams> {
    let k = |name: &str| format!("{section}.{name}");
    let tp = TrainParams {
        epochs: cfg.parse_as(&k("epochs"))?,
        batch_size: cfg.parse_as(&k("batch_size"))?,
        steps_per_epoch: if section == "finetune" { cfg.parse_as(&k("steps_per_epoch"))? } else { 0 },
        lr: cfg.parse_as(&k("lr"))?,
        weight_decay: cfg.parse_as(&k("weight_decay"))?,
        crop_size: cfg.parse_as(&k("crop_size"))?,
        seed: cfg.parse_as(&k("seed"))?,
    };
    if tp.epochs == 0 {
        return Err(cfg.bad(&k("epochs"), "must be positive"));
    }
    if tp.batch_size == 0 {
        return Err(cfg.bad(&k("batch_size"), "must be positive"));
    }
    if !(tp.lr >= 0.0 && tp.lr.is_finite()) {
        return Err(cfg.bad(&k("lr"), "must be finite and non-negative"));
    }
    if !(tp.weight_decay >= 0.0 && tp.weight_decay.is_finite()) {
        return Err(cfg.bad(&k("weight_decay"), "must be finite and non-negative"));
    }
    Ok(tp)
}

/// `sigma:S`, `gamma:G` or `uniform:LO,HI` (a γ interval). A σ given to the
/// scaled formulation, or a γ given to the simple one, is converted.
fn noise_spec(cfg: &Config) -> Result<NoiseSpec> {
    let formulation = match cfg.get("denoise.formulation")? {
        "simple" => Formulation::Simple,
        "scaled" => Formulation::Scaled,
        other => return Err(cfg.bad("denoise.formulation", format!("expected simple or scaled, got `{other}`"))),
    };
    let target = match cfg.get("denoise.target")? {
        "noise" => Target::Noise,
        "image" => Target::CleanImage,
        other => return Err(cfg.bad("denoise.target", format!("expected noise or image, got `{other}`"))),
    };
    let raw = cfg.get("denoise.magnitude")?;
    let bad = |why: &str| cfg.bad("denoise.magnitude", format!("`{raw}`: {why}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let (kind, value) = raw.split_once(':').ok_or_else(|| bad("expected sigma:S, gamma:G or uniform:LO,HI"))?;
    let magnitude = match (kind.trim(), formulation) {
        ("sigma", Formulation::Simple) => Magnitude::FixedSigma(num(value)?),
        ("sigma", Formulation::Scaled) => Magnitude::FixedGamma(corruption::sigma_to_gamma(num(value)?)?),
        ("gamma", Formulation::Scaled) => Magnitude::FixedGamma(num(value)?),
        ("gamma", Formulation::Simple) => Magnitude::FixedSigma(corruption::gamma_to_sigma(num(value)?)?),
        ("uniform", _) => {
            let (lo, hi) = value.split_once(',').ok_or_else(|| bad("expected uniform:LO,HI"))?;
            Magnitude::UniformGamma { lo: num(lo)?, hi: num(hi)? }
        }
        _ => return Err(bad("expected sigma:S, gamma:G or uniform:LO,HI")),
    };
    NoiseSpec::new(formulation, target, magnitude)
}

fn protocol(cfg: &Config) -> Result<Protocol> {
    let scales: Vec<f64> = cfg.list("eval.scales")?;
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(cfg.bad("eval.scales", "need one or more positive scales"));
    }
    let patch: usize = cfg.parse_as("eval.patch_width")?;
    Ok(Protocol { scales, flip: cfg.parse_as("eval.flip")?, patch_width: (patch > 0).then_some(patch) })
}

fn init_path(cfg: &Config, key: &str) -> Result<Option<PathBuf>> {
    Ok(cfg.optional(key)?.map(PathBuf::from))
}

impl StageConfig {
    /// Supervised classification pretraining of the encoder.
    pub fn encoder(cfg: &Config) -> Result<StageConfig> {
        let data = dataset(cfg, "pretrain_data")?;
        let model = model_config(cfg, Head::Classifier, data.num_classes)?;
        let settings = cfg.iter().filter(|(k, _)| {
            k.starts_with("pretrain_data.")
                || k.starts_with("encoder.")
                || *k == "model.encoder_widths"
                || *k == "model.bottleneck_attention"
        });
        StageConfig::finish(StageConfig {
            stage: Stage::EncoderSupervised,
            model,
            data,
            val_samples: 0,
            noise: None,
            train: train_params(cfg, "encoder")?,
            init: Init::Scratch,
            init_from: None,
            label_fraction: 1.0,
            lr_grid: Vec::new(),
            protocol: Protocol::default(),
            eval_batch: 1,
            settings: collect(settings),
        })
    }

    /// Denoising pretraining; `denoise.mode` picks DeP or DDeP.
    pub fn denoise(cfg: &Config) -> Result<StageConfig> {
        let stage = match cfg.get("denoise.mode")? {
            "ddep" => Stage::DDeP,
            "dep" => Stage::DeP,
            other => return Err(cfg.bad("denoise.mode", format!("expected dep or ddep, got `{other}`"))),
        };
        let section = match cfg.get("denoise.dataset")? {
            "pretrain" => "pretrain_data",
            "finetune" => "finetune_data",
            other => return Err(cfg.bad("denoise.dataset", format!("expected pretrain or finetune, got `{other}`"))),
        };
        let init = match (stage, cfg.get("denoise.dep_init")?) {
            (Stage::DDeP, _) => Init::Encoder,
            (_, "scratch") => Init::Scratch,
            (_, "encoder") => Init::Encoder,
            (_, other) => return Err(cfg.bad("denoise.dep_init", format!("expected scratch or encoder, got `{other}`"))),
        };
        let data = dataset(cfg, section)?;
        let data_prefix = format!("{section}.");
        let settings = cfg.iter().filter(|(k, _)| {
            (k.starts_with("denoise.") && *k != "denoise.init_from")
                || k.starts_with("model.")
                || (k.starts_with(&data_prefix) && *k != "finetune_data.val_samples")
        });
        StageConfig::finish(StageConfig {
            stage,
            model: model_config(cfg, Head::Denoiser, 3)?,
            data,
            val_samples: 0,
            noise: Some(noise_spec(cfg)?),
            train: train_params(cfg, "denoise")?,
            init,
            init_from: init_path(cfg, "denoise.init_from")?,
            label_fraction: 1.0,
            lr_grid: Vec::new(),
            protocol: Protocol::default(),
            eval_batch: 1,
            settings: collect(settings),
        })
    }

    /// Segmentation fine-tuning on a labeled subset of the fine-tune pool.
    pub fn finetune(cfg: &Config) -> Result<StageConfig> {
        let data = dataset(cfg, "finetune_data")?;
        let init = match cfg.get("finetune.init")? {
            "none" => Init::Scratch,
            "encoder" => Init::Encoder,
            "ddep" => Init::DDeP,
            "dep" => Init::DeP,
            other => return Err(cfg.bad("finetune.init", format!("expected none, encoder, ddep or dep, got `{other}`"))),
        };
        let label_fraction: f64 = cfg.parse_as("finetune.label_fraction")?;
        if !(label_fraction > 0.0 && label_fraction <= 1.0) {
            return Err(cfg.bad("finetune.label_fraction", "must lie in (0, 1]"));
        }
        let val_samples: usize = cfg.parse_as("finetune_data.val_samples")?;
        if val_samples == 0 {
            return Err(cfg.bad("finetune_data.val_samples", "must be positive"));
        }
        let lr_grid: Vec<f64> = cfg.list("finetune.lr_grid")?;
        if lr_grid.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(cfg.bad("finetune.lr_grid", "learning rates must be finite and non-negative"));
        }
        let eval_batch: usize = cfg.parse_as("eval.batch_size")?;
        if eval_batch == 0 {
            return Err(cfg.bad("eval.batch_size", "must be positive"));
        }
        let settings = cfg.iter().filter(|(k, _)| {
            (k.starts_with("finetune.") && *k != "finetune.init_from")
                || k.starts_with("finetune_data.")
                || k.starts_with("model.")
                || k.starts_with("eval.")
        });
        StageConfig::finish(StageConfig {
            stage: Stage::FineTune,
            model: model_config(cfg, Head::Segmenter, data.num_classes)?,
            data,
            val_samples,
            noise: None,
            train: train_params(cfg, "finetune")?,
            init,
            init_from: init_path(cfg, "finetune.init_from")?,
            label_fraction,
            lr_grid,
            protocol: protocol(cfg)?,
            eval_batch,
            settings: collect(settings),
        })
    }

    fn finish(sc: StageConfig) -> Result<StageConfig> {
        let crop = sc.train.crop_size;
        let d = sc.model.divisor();
        if crop == 0 || crop > sc.data.image_size || !crop.is_multiple_of(d) {
            return Err(Error::BadValue {
                key: format!("{}.crop_size", sc.stage.section()),
                reason: format!("{crop} must be a positive multiple of {d} no larger than the image size {}", sc.data.image_size),
            });
        }
        if !sc.data.image_size.is_multiple_of(d) {
            return Err(Error::invalid(format!("image size {} is not a multiple of the model divisor {d}", sc.data.image_size)));
        }
        Ok(sc)
    }

    /// The settings that determine this stage's result, as config keys.
    pub fn settings(&self) -> &BTreeMap<String, String> {
        &self.settings
    }

    pub fn text(&self) -> String {
        self.settings.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Content hash of the settings and of the upstream checkpoint's hash.
    pub fn hash(&self, upstream: Option<&str>) -> String {
        let mut text = format!("stage = {}\n{}", self.stage, self.text());
        if let Some(h) = upstream {
            text.push_str(&format!("upstream = {h}\n"));
        }
        sha256_hex(&text)
    }

    /// True when the stage starts from another stage's checkpoint.
    pub fn needs_upstream(&self) -> bool {
        self.init != Init::Scratch
    }

    fn init_key(&self) -> String {
        format!("{}.init_from", self.stage.section())
    }
}

fn collect<'a>(it: impl Iterator<Item = (&'a str, &'a str)>) -> BTreeMap<String, String> {
    it.map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Everything a stage produces.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    /// Validation report of the kept (best) epoch; fine-tuning only.
    pub report: Option<EvalReport>,
    /// Validation mIoU after the last epoch; fine-tuning only.
    pub final_miou: Option<f64>,
    /// The learning rate actually used (the grid winner, if a grid was given).
    pub lr: f64,
}

impl StageOutput {
    pub fn best_miou(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.miou)
    }

    /// Writes the checkpoint, logs, stage settings and (for fine-tuning)
    /// the evaluation report into `dir`. Returns the checkpoint path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.log.write(dir)?;
        if let Some(r) = &self.report {
            r.write_csv(&dir.join("eval.csv"))?;
        }
        let settings: String = self.checkpoint.settings.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let conf = dir.join("stage.conf");
        std::fs::write(&conf, settings).map_err(|e| Error::io(&conf, e))?;
        let path = dir.join(CHECKPOINT_FILE);
        self.checkpoint.save(&path)?;
        Ok(path)
    }
}

pub fn run_stage(cfg: &StageConfig) -> Result<StageOutput> {
    match cfg.stage {
        Stage::EncoderSupervised => pretrain_encoder(cfg),
        Stage::DeP | Stage::DDeP => pretrain_denoise(cfg),
        Stage::FineTune => finetune(cfg),
    }
}

fn expect_stage(cfg: &StageConfig, allowed: &[Stage]) -> Result<()> {
    if allowed.contains(&cfg.stage) {
        Ok(())
    } else {
        Err(Error::Contract(format!("{} stage config given to a {allowed:?} runner", cfg.stage)))
    }
}

fn load_upstream(cfg: &StageConfig) -> Result<Option<Checkpoint>> {
    if !cfg.needs_upstream() {
        return Ok(None);
    }
    let key = cfg.init_key();
    let Some(path) = &cfg.init_from else {
        return Err(Error::Contract(format!("{} with init {:?} requires `{key}` naming a checkpoint", cfg.stage, cfg.init)));
    };
    if !path.exists() {
        return Err(Error::BadValue { key, reason: format!("no checkpoint at {}", path.display()) });
    }
    Checkpoint::load(path).map(Some)
}

/// Differences that matter when only encoder parameters are imported.
fn encoder_mismatches(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    a.mismatches(b)
        .into_iter()
        .filter(|f| matches!(f.as_str(), "in_channels" | "encoder_widths" | "bottleneck_attention"))
        .collect()
}

/// Copies every parameter under `prefixes` from `src` into `dst`.
fn import(src: &Model, dst: &mut Model, prefixes: &[&str]) -> Result<()> {
    for (name, p) in src.params.iter().filter(|(n, _)| prefixes.iter().any(|pre| n.starts_with(pre))) {
        let slot = dst
            .params
            .get_mut(name)
            .ok_or_else(|| Error::ConfigMismatch { fields: vec![format!("parameter {name}")] })?;
        if slot.value.shape() != p.value.shape() {
            return Err(Error::ConfigMismatch { fields: vec![format!("parameter {name}")] });
        }
        slot.value = p.value.clone();
    }
    Ok(())
}

fn seed_model(cfg: &StageConfig, upstream: Option<&Checkpoint>) -> Result<Model> {
    let mut model = build_model(&cfg.model, cfg.train.seed)?;
    let Some(up) = upstream else {
        return Ok(model);
    };
    let want = match cfg.init {
        Init::Scratch => return Ok(model),
        Init::Encoder => None,
        Init::DDeP => Some(Stage::DDeP),
        Init::DeP => Some(Stage::DeP),
    };
    match want {
        None => {
            let fields = encoder_mismatches(&up.model.config, &cfg.model);
            if !fields.is_empty() {
                return Err(Error::ConfigMismatch { fields });
            }
            import(&up.model, &mut model, &["encoder."])?;
        }
        Some(stage) => {
            if up.stage != stage {
                return Err(Error::BadValue {
                    key: format!("{}.init", cfg.stage.section()),
                    reason: format!("expects a {stage} checkpoint, got a {} checkpoint", up.stage),
                });
            }
            let fields = up.model.config.mismatches(&cfg.model);
            if !fields.is_empty() {
                return Err(Error::ConfigMismatch { fields });
            }
            import(&up.model, &mut model, &["encoder.", "decoder."])?;
        }
    }
    Ok(model)
}

struct Prepared {
    images: Vec<Tensor>,
    masks: Vec<Vec<u8>>,
    labels: Vec<u8>,
}

fn prepare(samples: Vec<Sample>, norm: &NormStats) -> Result<Prepared> {
    let mut p = Prepared { images: Vec::new(), masks: Vec::new(), labels: Vec::new() };
    for s in samples {
        p.images.push(norm.normalize(&s.image)?);
        p.masks.push(s.mask);
        p.labels.push(s.class_label);
    }
    Ok(p)
}

fn norm_of(samples: &[Sample]) -> Result<NormStats> {
    data::compute_norm_stats(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())
}

/// Augmented batch: stacked images and concatenated masks.
fn batch(p: &Prepared, idx: &[usize], crop: usize, rng: &mut rng::Stream) -> Result<(Tensor, Vec<u8>)> {
    let mut xs = Vec::with_capacity(idx.len());
    let mut ms = Vec::new();
    for &i in idx {
        let (x, m) = data::augment(&p.images[i], &p.masks[i], rng, crop)?;
        xs.push(x);
        ms.extend(m);
    }
    Ok((Tensor::stack(&xs)?, ms))
}

fn finish_checkpoint(cfg: &StageConfig, model: Model, steps: u64, norm: NormStats, upstream: Option<&Checkpoint>) -> Checkpoint {
    Checkpoint {
        stage: cfg.stage,
        model,
        seed: cfg.train.seed,
        steps,
        config_hash: cfg.hash(upstream.map(|u| u.config_hash.as_str())),
        norm,
        settings: cfg.settings.clone(),
    }
}

/// Trains a classifier-headed model with cross-entropy on the image-level
/// class label.
pub fn pretrain_encoder(cfg: &StageConfig) -> Result<StageOutput> {
    expect_stage(cfg, &[Stage::EncoderSupervised])?;
    let samples = data::generate(&cfg.data)?;
    if let Some(s) = samples.iter().find(|s| s.class_label as usize >= cfg.model.num_classes) {
        return Err(Error::data(format!("class label {} outside {} classes", s.class_label, cfg.model.num_classes)));
    }
    let norm = norm_of(&samples)?;
    let p = prepare(samples, &norm)?;
    let mut model = seed_model(cfg, None)?;
    let tp = &cfg.train;
    let (correct, seen) = (Cell::new(0usize), Cell::new(0usize));
    let mut log = TrainLog::default();
    let steps = train::optimize(
        &mut model,
        tp,
        p.images.len(),
        &mut log,
        |m, g, bound, idx, step| {
            let (x, _) = batch(&p, idx, tp.crop_size, &mut rng::indexed(tp.seed, "augment", step))?;
            let labels: Vec<u8> = idx.iter().map(|&i| p.labels[i]).collect();
            let xv = g.leaf(x, false);
            let logits = m.forward_graph(g, bound, xv)?;
            let (n, c) = (idx.len(), cfg.model.num_classes);
            let pred = g.value(logits).clone().reshape(&[n, c, 1, 1])?.argmax_channels()?;
            correct.set(correct.get() + pred.iter().zip(&labels).filter(|(a, b)| a == b).count());
            seen.set(seen.get() + n);
            g.softmax_cross_entropy(logits, &labels, IGNORE)
        },
        |_, epoch, mean, log| {
            log.epoch(epoch, "train_loss", mean);
            log.epoch(epoch, "train_accuracy", correct.get() as f64 / seen.get() as f64);
            correct.set(0);
            seen.set(0);
            Ok(())
        },
    )?;
    Ok(StageOutput { checkpoint: finish_checkpoint(cfg, model, steps, norm, None), log, report: None, final_miou: None, lr: tp.lr })
}

/// DeP trains the whole Denoiser; DDeP imports and freezes the encoder of
/// `init_from` and trains only the decoder and head.
pub fn pretrain_denoise(cfg: &StageConfig) -> Result<StageOutput> {
    expect_stage(cfg, &[Stage::DeP, Stage::DDeP])?;
    let spec = cfg.noise.ok_or_else(|| Error::Contract("denoising stage without a noise spec".into()))?;
    if spec.is_degenerate() {
        log::warn!("noise magnitude is zero: the denoising task is degenerate and carries no training signal");
    }
    let upstream = load_upstream(cfg)?;
    let samples = data::generate(&cfg.data)?;
    let norm = match &upstream {
        Some(up) => up.norm.clone(),
        None => norm_of(&samples)?,
    };
    let p = prepare(samples, &norm)?;
    let mut model = build_model(&cfg.model, cfg.train.seed)?;
    if let Some(up) = &upstream {
        let fields = encoder_mismatches(&up.model.config, &cfg.model);
        if !fields.is_empty() {
            return Err(Error::ConfigMismatch { fields });
        }
        import(&up.model, &mut model, &["encoder."])?;
    }
    let frozen = cfg.stage == Stage::DDeP;
    model.set_trainable(if frozen { Scope::DecoderAndHeadOnly } else { Scope::All });
    let encoder_sum = model.encoder_checksum();
    let tp = &cfg.train;
    let mut log = TrainLog::default();
    let steps = train::optimize(
        &mut model,
        tp,
        p.images.len(),
        &mut log,
        |m, g, bound, idx, step| {
            let (x, _) = batch(&p, idx, tp.crop_size, &mut rng::indexed(tp.seed, "augment", step))?;
            let sample = corruption::corrupt(&x, &spec, &mut rng::indexed(tp.seed, "noise", step))?;
            let target = corruption::denoise_target(&x, &sample, &spec)?;
            let xv = g.leaf(sample.noisy, false);
            let y = m.forward_graph(g, bound, xv)?;
            g.mse(y, &target)
        },
        |m, epoch, mean, log| {
            log.epoch(epoch, "denoise_loss", mean);
            if frozen && m.encoder_checksum() != encoder_sum {
                return Err(Error::Contract(format!("encoder parameters changed during DDeP epoch {epoch}")));
            }
            Ok(())
        },
    )?;
    let checkpoint = finish_checkpoint(cfg, model, steps, norm, upstream.as_ref());
    Ok(StageOutput { checkpoint, log, report: None, final_miou: None, lr: tp.lr })
}

/// Fine-tunes a Segmenter on `ceil(label_fraction · pool)` labeled images,
/// scoring the validation split after every epoch and keeping the best
/// epoch. With a learning-rate grid, every rate is tried and the one with
/// the best validation mIoU wins (ties go to the earlier rate).
pub fn finetune(cfg: &StageConfig) -> Result<StageOutput> {
    expect_stage(cfg, &[Stage::FineTune])?;
    let upstream = load_upstream(cfg)?;
    let pool = cfg.data.num_samples;
    let all = DatasetSpec { num_samples: pool + cfg.val_samples, ..cfg.data.clone() };
    let labeled = data::subset_labels(pool, cfg.label_fraction, cfg.train.seed)?;
    let norm = match &upstream {
        Some(up) => up.norm.clone(),
        None => norm_of(&(0..pool).map(|i| data::gen_sample(&all, i)).collect::<Result<Vec<_>>>()?)?,
    };
    let train_set = prepare(labeled.iter().map(|&i| data::gen_sample(&all, i)).collect::<Result<_>>()?, &norm)?;
    let val = prepare((pool..pool + cfg.val_samples).map(|i| data::gen_sample(&all, i)).collect::<Result<_>>()?, &norm)?;
    let init = seed_model(cfg, upstream.as_ref())?;

    let grid = if cfg.lr_grid.is_empty() { vec![cfg.train.lr] } else { cfg.lr_grid.clone() };
    let mut best: Option<StageOutput> = None;
    for lr in grid {
        let tp = TrainParams { lr, ..cfg.train.clone() };
        let out = finetune_once(cfg, &tp, init.clone(), &train_set, &val, &norm, upstream.as_ref())?;
        if best.as_ref().is_none_or(|b| out.best_miou() > b.best_miou()) {
            best = Some(out);
        }
    }
    Ok(best.expect("grid is non-empty"))
}

fn finetune_once(
    cfg: &StageConfig,
    tp: &TrainParams,
    mut model: Model,
    train_set: &Prepared,
    val: &Prepared,
    norm: &NormStats,
    upstream: Option<&Checkpoint>,
) -> Result<StageOutput> {
    let masks: Vec<&[u8]> = val.masks.iter().map(Vec::as_slice).collect();
    let mut best: Option<(EvalReport, Model)> = None;
    let mut last = f64::NAN;
    let mut log = TrainLog::default();
    let steps = train::optimize(
        &mut model,
        tp,
        train_set.images.len(),
        &mut log,
        |m, g, bound, idx, step| {
            let (x, y) = batch(train_set, idx, tp.crop_size, &mut rng::indexed(tp.seed, "augment", step))?;
            let xv = g.leaf(x, false);
            let logits = m.forward_graph(g, bound, xv)?;
            g.softmax_cross_entropy(logits, &y, IGNORE)
        },
        |m, epoch, mean, log| {
            let report = eval::evaluate(m, &val.images, &masks, cfg.model.num_classes, &cfg.protocol, cfg.eval_batch)?;
            log.epoch(epoch, "train_loss", mean);
            log.epoch(epoch, "val_miou", report.miou);
            last = report.miou;
            if best.as_ref().is_none_or(|(b, _)| report.miou > b.miou) {
                best = Some((report, m.clone()));
            }
            Ok(())
        },
    )?;
    let (report, model) = best.expect("at least one epoch");
    Ok(StageOutput {
        checkpoint: finish_checkpoint(cfg, model, steps, norm.clone(), upstream),
        log,
        report: Some(report),
        final_miou: Some(last),
        lr: tp.lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::cosine_lr;

    /// A configuration small enough to train in well under a second.
    pub(crate) fn tiny(extra: &str) -> Config {
        let base = "
            pretrain_data.num_samples = 12
            pretrain_data.image_size = 16
            finetune_data.num_samples = 12
            finetune_data.val_samples = 4
            finetune_data.image_size = 16
            model.encoder_widths = 4,8
            model.decoder_widths = 8,4
            encoder.epochs = 2
            encoder.batch_size = 4
            encoder.crop_size = 16
            denoise.epochs = 2
            denoise.batch_size = 4
            denoise.crop_size = 16
            finetune.epochs = 2
            finetune.batch_size = 4
            finetune.crop_size = 16
            finetune.label_fraction = 1.0
        ";
        let mut cfg = Config::parse(base).unwrap();
        for line in extra.lines().map(str::trim).filter(|l| !l.is_empty()) {
            cfg.apply_override(line).unwrap();
        }
        cfg
    }

    fn saved(out: &StageOutput, dir: &Path, name: &str) -> PathBuf {
        out.write(&dir.join(name)).unwrap()
    }

    #[test]
    fn zero_lr_encoder_stage_leaves_parameters_unchanged() {
        let sc = StageConfig::encoder(&tiny("encoder.lr = 0\nencoder.epochs = 1")).unwrap();
        let fresh = build_model(&sc.model, sc.train.seed).unwrap();
        let out = pretrain_encoder(&sc).unwrap();
        assert_eq!(out.checkpoint.model.params.checksum(|_| true), fresh.params.checksum(|_| true));
        assert!(out.log.steps.iter().all(|s| s.lr == 0.0));
        assert_eq!(out.checkpoint.steps, 3);
    }

    #[test]
    fn logged_lr_follows_the_cosine_schedule() {
        let sc = StageConfig::encoder(&tiny("")).unwrap();
        let out = pretrain_encoder(&sc).unwrap();
        let opt = sc.train.optimizer(sc.data.num_samples);
        for s in &out.log.steps {
            assert_eq!(s.lr, cosine_lr(s.step, &opt));
        }
        assert!(out.log.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
        assert_eq!(out.log.metric("train_accuracy").len(), 2);
    }

    #[test]
    fn ddep_freezes_the_imported_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("");
        let enc = pretrain_encoder(&StageConfig::encoder(&cfg).unwrap()).unwrap();
        let path = saved(&enc, dir.path(), "enc");
        let mut cfg = cfg.clone();
        cfg.set("denoise.init_from", path.to_str().unwrap()).unwrap();
        let sc = StageConfig::denoise(&cfg).unwrap();
        assert_eq!(sc.stage, Stage::DDeP);
        let out = pretrain_denoise(&sc).unwrap();
        assert_eq!(out.checkpoint.model.encoder_checksum(), enc.checkpoint.model.encoder_checksum());
        assert_ne!(out.checkpoint.config_hash, sc.hash(None));
        assert_eq!(out.checkpoint.config_hash, sc.hash(Some(&enc.checkpoint.config_hash)));
        assert_eq!(out.checkpoint.norm, enc.checkpoint.norm);
    }

    #[test]
    fn ddep_without_encoder_is_a_contract_violation() {
        let sc = StageConfig::denoise(&tiny("")).unwrap();
        assert!(matches!(pretrain_denoise(&sc), Err(Error::Contract(_))));
        let missing = StageConfig::denoise(&tiny("denoise.init_from = /nonexistent/x.ddep")).unwrap();
        match pretrain_denoise(&missing) {
            Err(e @ Error::BadValue { .. }) => assert!(e.to_string().contains("/nonexistent/x.ddep")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn noise_settings_parse_and_reject_mismatches() {
        let sc = StageConfig::denoise(&tiny("denoise.magnitude = sigma:0.22")).unwrap();
        assert_eq!(sc.noise.unwrap().magnitude(), Magnitude::FixedGamma(1.0 / (1.0 + 0.22 * 0.22)));
        let simple = StageConfig::denoise(&tiny("denoise.formulation = simple\ndenoise.target = image")).unwrap();
        assert_eq!(simple.noise.unwrap().magnitude(), Magnitude::FixedSigma(0.22));
        let uniform = StageConfig::denoise(&tiny("denoise.magnitude = uniform:0.9,0.95")).unwrap();
        assert_eq!(uniform.noise.unwrap().magnitude(), Magnitude::UniformGamma { lo: 0.9, hi: 0.95 });
        let bad = StageConfig::denoise(&tiny("denoise.formulation = simple\ndenoise.magnitude = uniform:0.9,0.95"));
        assert!(matches!(bad, Err(Error::InvalidArgument(_))));
        assert!(matches!(StageConfig::denoise(&tiny("denoise.magnitude = 0.22")), Err(Error::BadValue { .. })));
    }

    #[test]
    fn dep_from_scratch_trains_everything() {
        let sc = StageConfig::denoise(&tiny("denoise.mode = dep")).unwrap();
        assert!(!sc.needs_upstream());
        let fresh = build_model(&sc.model, sc.train.seed).unwrap();
        let out = pretrain_denoise(&sc).unwrap();
        assert_ne!(out.checkpoint.model.encoder_checksum(), fresh.encoder_checksum());
        assert_eq!(out.log.metric("denoise_loss").len(), 2);
    }

    #[test]
    fn zero_lr_finetune_scores_the_untrained_model() {
        let sc = StageConfig::finetune(&tiny("finetune.init = none\nfinetune.lr = 0")).unwrap();
        let out = finetune(&sc).unwrap();
        let model = build_model(&sc.model, sc.train.seed).unwrap();
        let all = DatasetSpec { num_samples: 16, ..sc.data.clone() };
        let pool: Vec<Sample> = (0..12).map(|i| data::gen_sample(&all, i).unwrap()).collect();
        let val = prepare((12..16).map(|i| data::gen_sample(&all, i).unwrap()).collect(), &norm_of(&pool).unwrap()).unwrap();
        let masks: Vec<&[u8]> = val.masks.iter().map(Vec::as_slice).collect();
        let want = eval::evaluate(&model, &val.images, &masks, 5, &Protocol::default(), 4).unwrap();
        assert_eq!(out.report.unwrap().miou, want.miou);
        assert_eq!(out.final_miou, Some(want.miou));
    }

    #[test]
    fn finetune_import_keeps_decoder_bytes_and_checks_config() {
        let dir = tempfile::tempdir().unwrap();
        let dep = pretrain_denoise(&StageConfig::denoise(&tiny("denoise.mode = dep")).unwrap()).unwrap();
        let path = saved(&dep, dir.path(), "dep");
        let p = path.to_str().unwrap();

        let sc = StageConfig::finetune(&tiny(&format!("finetune.init = dep\nfinetune.init_from = {p}\nfinetune.lr = 0"))).unwrap();
        let out = finetune(&sc).unwrap();
        assert_eq!(out.checkpoint.model.body_checksum(), dep.checkpoint.model.body_checksum());

        let wide = StageConfig::finetune(&tiny(&format!(
            "finetune.init = dep\nfinetune.init_from = {p}\nmodel.decoder_width_multiplier = 2"
        )))
        .unwrap();
        match finetune(&wide) {
            Err(Error::ConfigMismatch { fields }) => assert_eq!(fields, vec!["decoder_width_multiplier".to_string()]),
            other => panic!("{other:?}"),
        }
        let wrong = StageConfig::finetune(&tiny(&format!("finetune.init = ddep\nfinetune.init_from = {p}"))).unwrap();
        assert!(matches!(finetune(&wrong), Err(Error::BadValue { .. })));
    }

    #[test]
    fn stages_are_deterministic() {
        let sc = StageConfig::finetune(&tiny("finetune.init = none")).unwrap();
        let a = finetune(&sc).unwrap();
        let b = finetune(&sc).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.log, b.log);
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn lr_grid_keeps_the_best_rate() {
        let sc = StageConfig::finetune(&tiny("finetune.init = none\nfinetune.lr_grid = 0, 0.01")).unwrap();
        let out = finetune(&sc).unwrap();
        let each: Vec<f64> = [0.0, 0.01]
            .iter()
            .map(|&lr| {
                let one = StageConfig::finetune(&tiny(&format!("finetune.init = none\nfinetune.lr = {lr}"))).unwrap();
                finetune(&one).unwrap().best_miou().unwrap()
            })
            .collect();
        let want = if each[1] > each[0] { 0.01 } else { 0.0 };
        assert_eq!(out.lr, want);
    }

    #[test]
    fn hashes_cover_stage_settings_only() {
        let a = StageConfig::encoder(&tiny("")).unwrap();
        let b = StageConfig::encoder(&tiny("finetune.lr = 0.5\nmodel.decoder_width_multiplier = 2")).unwrap();
        assert_eq!(a.hash(None), b.hash(None));
        let c = StageConfig::encoder(&tiny("encoder.lr = 0.5")).unwrap();
        assert_ne!(a.hash(None), c.hash(None));
        let f1 = StageConfig::finetune(&tiny("finetune.init_from = /a")).unwrap();
        let f2 = StageConfig::finetune(&tiny("finetune.init_from = /b")).unwrap();
        assert_eq!(f1.hash(Some("h")), f2.hash(Some("h")));
        assert_ne!(f1.hash(Some("h")), f1.hash(Some("g")));
    }
}
