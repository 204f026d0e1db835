//! A small UNet-style encoder-decoder with interchangeable heads.
//!
//! The encoder has one residual stage per entry of `encoder_widths`, each
//! halving the resolution. The decoder mirrors it: every stage doubles the
//! resolution (nearest neighbour), concatenates the matching encoder
//! feature map and applies two conv-norm-relu blocks. The last decoder
//! stage runs at input resolution and has no skip, so nothing connects the
//! input image directly to the output.

use std::collections::BTreeMap;
use std::fmt;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Classifier,
    Denoiser,
    Segmenter,
}

impl Head {
    pub fn parse(s: &str) -> Result<Head> {
        match s {
            "classifier" => Ok(Head::Classifier),
            "denoiser" => Ok(Head::Denoiser),
            "segmenter" => Ok(Head::Segmenter),
            _ => Err(Error::invalid(format!("unknown head `{s}` (expected classifier, denoiser or segmenter)"))),
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Classifier => "classifier",
            Head::Denoiser => "denoiser",
            Head::Segmenter => "segmenter",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub encoder_widths: Vec<usize>,
    pub base_decoder_widths: Vec<usize>,
    pub decoder_width_multiplier: usize,
    pub bottleneck_attention: bool,
    pub num_classes: usize,
    pub head: Head,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            encoder_widths: vec![16, 32, 64, 128],
            base_decoder_widths: vec![64, 32, 16, 8],
            decoder_width_multiplier: 1,
            bottleneck_attention: false,
            num_classes: 5,
            head: Head::Segmenter,
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels must be positive"));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::invalid("encoder_widths must be a non-empty list of positive integers"));
        }
        if self.base_decoder_widths.len() != self.encoder_widths.len() {
            return Err(Error::invalid(format!(
                "decoder has {} stages but encoder has {}; skips pair one-to-one",
                self.base_decoder_widths.len(),
                self.encoder_widths.len()
            )));
        }
        if self.base_decoder_widths.contains(&0) {
            return Err(Error::invalid("decoder widths must be positive"));
        }
        if !(1..=3).contains(&self.decoder_width_multiplier) {
            return Err(Error::invalid(format!(
                "decoder_width_multiplier must be 1, 2 or 3, got {}",
                self.decoder_width_multiplier
            )));
        }
        if !(1..=255).contains(&self.num_classes) {
            return Err(Error::invalid(format!("num_classes must lie in 1..=255, got {}", self.num_classes)));
        }
        Ok(())
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        self.base_decoder_widths.iter().map(|w| w * self.decoder_width_multiplier).collect()
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.encoder_widths.len()
    }

    /// Architecture fields as `model.*` key/value pairs.
    pub fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("model.in_channels".into(), self.in_channels.to_string()),
            ("model.encoder_widths".into(), join(&self.encoder_widths)),
            ("model.decoder_widths".into(), join(&self.base_decoder_widths)),
            ("model.decoder_width_multiplier".into(), self.decoder_width_multiplier.to_string()),
            ("model.bottleneck_attention".into(), self.bottleneck_attention.to_string()),
            ("model.num_classes".into(), self.num_classes.to_string()),
            ("model.head".into(), self.head.to_string()),
        ]
    }

    /// Field names whose values differ between two configs, ignoring the
    /// head (heads are swapped between stages).
    pub fn mismatches(&self, other: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        if self.in_channels != other.in_channels {
            out.push("in_channels".to_string());
        }
        if self.encoder_widths != other.encoder_widths {
            out.push("encoder_widths".to_string());
        }
        if self.base_decoder_widths != other.base_decoder_widths {
            out.push("decoder_widths".to_string());
        }
        if self.decoder_width_multiplier != other.decoder_width_multiplier {
            out.push("decoder_width_multiplier".to_string());
        }
        if self.bottleneck_attention != other.bottleneck_attention {
            out.push("bottleneck_attention".to_string());
        }
        out
    }
}

/// Which parameters an optimizer may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    DecoderAndHeadOnly,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

pub(crate) fn gn_groups(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
}

/// He-normal weights, seeded per parameter name so adding a parameter never
/// shifts another's initialization.
fn he_normal(seed: u64, name: &str, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = rng::standard_normal(&mut rng::stream(seed, name), n).into_iter().map(|v| v * std).collect();
    Tensor::new(shape, data).expect("positive extents")
}

struct Init<'a> {
    params: &'a mut ParamSet,
    seed: u64,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let key = format!("{name}.weight");
        let w = he_normal(self.seed, &key, &[cout, cin, k, k]);
        self.params.insert(key, w);
    }

    fn bias(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
    }
}

fn init_encoder(cfg: &ModelConfig, params: &mut ParamSet, seed: u64) {
    let mut it = Init { params, seed };
    let mut cin = cfg.in_channels;
    for (i, &w) in cfg.encoder_widths.iter().enumerate() {
        let s = format!("encoder.stage{}", i + 1);
        it.conv(&format!("{s}.down"), w, cin, 3);
        it.norm(&format!("{s}.gn1"), w);
        it.conv(&format!("{s}.conv"), w, w, 3);
        it.norm(&format!("{s}.gn2"), w);
        cin = w;
    }
    if cfg.bottleneck_attention {
        for p in ["wq", "wk", "wv", "wo"] {
            let key = format!("encoder.attention.{p}.weight");
            let w = he_normal(seed, &key, &[cin, cin]);
            it.params.insert(key, w);
        }
    }
}

fn init_decoder(cfg: &ModelConfig, params: &mut ParamSet, seed: u64) {
    let mut it = Init { params, seed };
    let enc = &cfg.encoder_widths;
    let mut cin = *enc.last().expect("validated non-empty");
    for (i, &w) in cfg.decoder_widths().iter().enumerate() {
        let s = format!("decoder.stage{}", i + 1);
        let skip = skip_channels(enc, i);
        it.conv(&format!("{s}.conv1"), w, cin + skip, 3);
        it.norm(&format!("{s}.gn1"), w);
        it.conv(&format!("{s}.conv2"), w, w, 3);
        it.norm(&format!("{s}.gn2"), w);
        cin = w;
    }
}

/// Decoder stage `i` (0-based) receives encoder stage `stages - 1 - i`'s
/// output; the final decoder stage has none.
fn skip_channels(enc: &[usize], i: usize) -> usize {
    let stages = enc.len();
    if i + 1 < stages {
        enc[stages - 2 - i]
    } else {
        0
    }
}

fn init_head(cfg: &ModelConfig, params: &mut ParamSet, seed: u64) {
    let mut it = Init { params, seed };
    match cfg.head {
        Head::Classifier => {
            let c = *cfg.encoder_widths.last().expect("validated non-empty");
            let key = "head.fc.weight".to_string();
            let w = he_normal(seed, &key, &[cfg.num_classes, c]);
            it.params.insert(key, w);
            it.bias("head.fc", cfg.num_classes);
        }
        Head::Denoiser | Head::Segmenter => {
            let cin = *cfg.decoder_widths().last().expect("validated non-empty");
            let cout = if cfg.head == Head::Denoiser { cfg.in_channels } else { cfg.num_classes };
            it.conv("head.conv", cout, cin, 1);
            it.bias("head.conv", cout);
        }
    }
}

/// Builds and seeds a model. Classifier models carry no decoder.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut params = ParamSet::new();
    init_encoder(config, &mut params, seed);
    if config.head != Head::Classifier {
        init_decoder(config, &mut params, seed);
    }
    init_head(config, &mut params, seed);
    Ok(Model { config: config.clone(), params })
}

/// Parameter leaves of one forward pass, by name.
pub type Bound = BTreeMap<String, Var>;

impl Model {
    /// Adds every parameter to `g` as a leaf; only trainable ones require
    /// gradients.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.iter().map(|(k, p)| (k.clone(), g.leaf(p.value.clone(), p.trainable))).collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape[..] else {
            return Err(Error::invalid(format!("model input must be [n, c, h, w], got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(Error::invalid(format!("model expects {} input channels, got {c}", self.config.in_channels)));
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("input extents {h}x{w} must be positive multiples of {d}")));
        }
        Ok(())
    }

    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.forward_ablated(g, p, x, None)
    }

    /// `zero_skip` replaces the skip tensor of that decoder stage (0-based)
    /// with zeros.
    fn forward_ablated(&self, g: &mut Graph, p: &Bound, x: Var, zero_skip: Option<usize>) -> Result<Var> {
        self.check_input(g.value(x).shape())?;
        let cfg = &self.config;
        let get = |name: &str| -> Result<Var> {
            p.get(name).copied().ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
        };
        let block = |g: &mut Graph, x: Var, conv: &str, gn: &str, stride: usize| -> Result<Var> {
            let y = g.conv2d(x, get(&format!("{conv}.weight"))?, None, stride, 1)?;
            let c = g.value(y).shape()[1];
            g.group_norm(y, get(&format!("{gn}.gamma"))?, get(&format!("{gn}.beta"))?, gn_groups(c))
        };

        let mut feats = Vec::with_capacity(cfg.encoder_widths.len());
        let mut h = x;
        for i in 1..=cfg.encoder_widths.len() {
            let s = format!("encoder.stage{i}");
            let d = block(g, h, &format!("{s}.down"), &format!("{s}.gn1"), 2)?;
            let d = g.relu(d)?;
            let r = block(g, d, &format!("{s}.conv"), &format!("{s}.gn2"), 1)?;
            let sum = g.add(d, r)?;
            h = g.relu(sum)?;
            feats.push(h);
        }
        if cfg.bottleneck_attention {
            let w = |n: &str| get(&format!("encoder.attention.{n}.weight"));
            h = g.self_attention(h, w("wq")?, w("wk")?, w("wv")?, w("wo")?)?;
        }

        if cfg.head == Head::Classifier {
            let pooled = g.global_avg_pool(h)?;
            return g.dense(pooled, get("head.fc.weight")?, get("head.fc.bias")?);
        }

        let stages = cfg.encoder_widths.len();
        for i in 0..stages {
            let s = format!("decoder.stage{}", i + 1);
            h = g.upsample2x(h)?;
            if i + 1 < stages {
                let mut skip = feats[stages - 2 - i];
                if zero_skip == Some(i) {
                    skip = g.leaf(Tensor::zeros(g.value(skip).shape()), false);
                }
                h = g.concat_channels(h, skip)?;
            }
            let y = block(g, h, &format!("{s}.conv1"), &format!("{s}.gn1"), 1)?;
            let y = g.relu(y)?;
            let y = block(g, y, &format!("{s}.conv2"), &format!("{s}.gn2"), 1)?;
            h = g.relu(y)?;
        }
        g.conv2d(h, get("head.conv.weight")?, Some(get("head.conv.bias")?), 1, 0)
    }

    /// Inference-only forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let mut g = Graph::inference();
        let p = self.bind(&mut g);
        let xv = g.leaf(x.clone(), false);
        let y = self.forward_graph(&mut g, &p, xv)?;
        Ok(g.into_value(y))
    }

    pub fn set_trainable(&mut self, scope: Scope) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = match scope {
                Scope::All => true,
                Scope::DecoderAndHeadOnly => !name.starts_with("encoder."),
            };
        }
    }

    /// Replaces the head with a freshly seeded one. Encoder and decoder
    /// parameters are kept as they are; a classifier has no decoder, so
    /// swapping to one drops it and swapping away from one seeds a new one.
    pub fn swap_head(&mut self, head: Head, num_classes: usize, seed: u64) -> Result<()> {
        let mut config = self.config.clone();
        config.head = head;
        config.num_classes = num_classes;
        config.validate()?;
        let stale: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with("head.") || (head == Head::Classifier && n.starts_with("decoder.")))
            .map(str::to_string)
            .collect();
        for n in stale {
            self.params.remove(&n);
        }
        if head != Head::Classifier && self.params.count_with_prefix("decoder.") == 0 {
            init_decoder(&config, &mut self.params, seed);
        }
        init_head(&config, &mut self.params, seed);
        self.config = config;
        Ok(())
    }

    pub fn encoder_checksum(&self) -> String {
        self.params.checksum(|n| n.starts_with("encoder."))
    }

    pub fn body_checksum(&self) -> String {
        self.params.checksum(|n| n.starts_with("encoder.") || n.starts_with("decoder."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(head: Head) -> ModelConfig {
        ModelConfig {
            encoder_widths: vec![8, 16],
            base_decoder_widths: vec![8, 8],
            head,
            num_classes: 4,
            ..ModelConfig::default()
        }
    }

    fn input(seed: u64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng::standard_normal(&mut rng::stream(seed, "input"), n)).unwrap()
    }

    #[test]
    fn deterministic_build() {
        let a = build_model(&ModelConfig::default(), 3).unwrap();
        let b = build_model(&ModelConfig::default(), 3).unwrap();
        assert_eq!(a.params.checksum(|_| true), b.params.checksum(|_| true));
        let c = build_model(&ModelConfig::default(), 4).unwrap();
        assert_ne!(a.params.checksum(|_| true), c.params.checksum(|_| true));
    }

    #[test]
    fn width_multiplier_scales_decoder_only() {
        let mut counts = Vec::new();
        for m in 1..=3 {
            let cfg = ModelConfig { decoder_width_multiplier: m, ..ModelConfig::default() };
            let model = build_model(&cfg, 0).unwrap();
            assert_eq!(cfg.decoder_widths(), vec![64 * m, 32 * m, 16 * m, 8 * m]);
            for (i, w) in cfg.decoder_widths().iter().enumerate() {
                let p = model.params.value(&format!("decoder.stage{}.conv2.weight", i + 1)).unwrap();
                assert_eq!(p.shape()[0], *w);
            }
            counts.push((model.params.count_with_prefix("encoder."), model.params.count_with_prefix("decoder.")));
        }
        assert!(counts.windows(2).all(|w| w[0].0 == w[1].0 && w[1].1 > w[0].1));
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            ModelConfig { base_decoder_widths: vec![8, 8], ..ModelConfig::default() },
            ModelConfig { decoder_width_multiplier: 4, ..ModelConfig::default() },
            ModelConfig { encoder_widths: vec![], base_decoder_widths: vec![], ..ModelConfig::default() },
            ModelConfig { num_classes: 0, ..ModelConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(build_model(&cfg, 0), Err(Error::InvalidArgument(_))), "{cfg:?}");
        }
    }

    #[test]
    fn output_shapes() {
        let x = input(0, &[2, 3, 64, 64]);
        let seg = build_model(&ModelConfig::default(), 0).unwrap();
        let y = seg.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 5, 64, 64]);
        assert!(y.is_finite());
        let den = build_model(&ModelConfig { head: Head::Denoiser, ..ModelConfig::default() }, 0).unwrap();
        assert_eq!(den.forward(&x).unwrap().shape(), x.shape());
        let cls = build_model(&ModelConfig { head: Head::Classifier, ..ModelConfig::default() }, 0).unwrap();
        assert_eq!(cls.forward(&x).unwrap().shape(), &[2, 5]);
        assert_eq!(cls.params.count_with_prefix("decoder."), 0);
        let att = build_model(&ModelConfig { bottleneck_attention: true, ..ModelConfig::default() }, 0).unwrap();
        assert_eq!(att.forward(&x).unwrap().shape(), &[2, 5, 64, 64]);
    }

    #[test]
    fn indivisible_input_names_divisor() {
        let model = build_model(&ModelConfig::default(), 0).unwrap();
        match model.forward(&Tensor::zeros(&[1, 3, 40, 64])) {
            Err(Error::InvalidArgument(m)) => assert!(m.contains("16"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partition_is_exhaustive() {
        for head in [Head::Classifier, Head::Denoiser, Head::Segmenter] {
            let cfg = ModelConfig { head, bottleneck_attention: true, ..ModelConfig::default() };
            let model = build_model(&cfg, 1).unwrap();
            for name in model.params.names() {
                let hits = ["encoder.", "decoder.", "head."].iter().filter(|p| name.starts_with(*p)).count();
                assert_eq!(hits, 1, "{name}");
            }
        }
    }

    #[test]
    fn trainable_scopes() {
        let mut model = build_model(&ModelConfig::default(), 0).unwrap();
        model.set_trainable(Scope::DecoderAndHeadOnly);
        for (name, p) in model.params.iter() {
            assert_eq!(p.trainable, !name.starts_with("encoder."), "{name}");
        }
        model.set_trainable(Scope::All);
        assert!(model.params.iter().all(|(_, p)| p.trainable));
    }

    #[test]
    fn swap_head_preserves_body() {
        let mut model = build_model(&ModelConfig { head: Head::Denoiser, ..ModelConfig::default() }, 0).unwrap();
        let body = model.body_checksum();
        model.swap_head(Head::Segmenter, 7, 9).unwrap();
        assert_eq!(model.body_checksum(), body);
        assert_eq!(model.forward(&Tensor::zeros(&[1, 3, 32, 32])).unwrap().shape(), &[1, 7, 32, 32]);
        model.swap_head(Head::Denoiser, 5, 9).unwrap();
        assert_eq!(model.params.value("head.conv.weight").unwrap().shape(), &[3, 8, 1, 1]);
        assert_eq!(model.body_checksum(), body);

        let mut cls = build_model(&ModelConfig { head: Head::Classifier, ..ModelConfig::default() }, 0).unwrap();
        let enc = cls.encoder_checksum();
        cls.swap_head(Head::Segmenter, 5, 2).unwrap();
        assert_eq!(cls.encoder_checksum(), enc);
        assert!(cls.params.count_with_prefix("decoder.") > 0);
    }

    #[test]
    fn every_skip_is_live() {
        let model = build_model(&small(Head::Segmenter), 5).unwrap();
        let x = input(1, &[1, 3, 16, 16]);
        let run = |zero: Option<usize>| {
            let mut g = Graph::inference();
            let p = model.bind(&mut g);
            let xv = g.leaf(x.clone(), false);
            let y = model.forward_ablated(&mut g, &p, xv, zero).unwrap();
            g.into_value(y)
        };
        let base = run(None);
        for stage in 0..model.config.encoder_widths.len() - 1 {
            assert!(run(Some(stage)).max_abs_diff(&base) > 1e-4, "skip {stage}");
        }
    }

    #[test]
    fn denoiser_matches_finite_differences() {
        for r in crate::gradcheck::check_denoiser(&[0, 1, 2]).unwrap() {
            assert!(r.passes(1e-3), "{:?}", r.worst());
        }
    }
}
