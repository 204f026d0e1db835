//! Synthetic shapes dataset: images with dense masks and an image-level
//! label, plus normalization, label subsetting, augmentation and PNG I/O.
//!
//! Class ids: 0 background, 1 disk, 2 square, 3 triangle, 4 annulus.
//! Shape colors are random, so a pixel's class is only recoverable from
//! the geometry around it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const IGNORE: u8 = 255;
pub const SHAPE_NAMES: [&str; 4] = ["disk", "square", "triangle", "annulus"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, h, w]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `h × w` class ids, `IGNORE` for unlabeled pixels.
    pub mask: Vec<u8>,
    pub class_label: u8,
}

impl Sample {
    pub fn extents(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DatasetSpec {
    pub num_samples: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub clutter_min: usize,
    pub clutter_max: usize,
    /// Plain backgrounds and no pixel jitter.
    pub noise_free: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_samples: 1000,
            image_size: 64,
            num_classes: 5,
            seed: 0,
            clutter_min: 1,
            clutter_max: 3,
            noise_free: false,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::invalid("num_samples must be positive"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::invalid(format!("image_size must be a positive multiple of 16, got {}", self.image_size)));
        }
        if !(2..=SHAPE_NAMES.len() + 1).contains(&self.num_classes) {
            return Err(Error::invalid(format!(
                "num_classes must lie in 2..={}, got {}",
                SHAPE_NAMES.len() + 1,
                self.num_classes
            )));
        }
        if self.clutter_min > self.clutter_max {
            return Err(Error::invalid(format!(
                "clutter range {}..{} is empty",
                self.clutter_min, self.clutter_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: u8,
    cx: f64,
    cy: f64,
    r: f64,
    /// Square drawn as a diamond, triangle pointing down.
    turned: bool,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.r;
        match self.class {
            1 => dx * dx + dy * dy <= r * r,
            2 if self.turned => dx.abs() + dy.abs() <= 1.2 * r,
            2 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            3 => {
                let dy = if self.turned { -dy } else { dy };
                // apex at (0, -r), base from (-r, 0.8r) to (r, 0.8r)
                dy <= 0.8 * r && 1.8 * dx.abs() <= dy + r
            }
            _ => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
        }
    }

    fn area(&self) -> f64 {
        let r2 = self.r * self.r;
        match self.class {
            1 => std::f64::consts::PI * r2,
            2 if self.turned => 2.0 * 1.44 * r2,
            2 => 4.0 * 0.7225 * r2,
            3 => 1.8 * r2,
            _ => 0.7 * std::f64::consts::PI * r2,
        }
    }
}

fn to_unit(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Smooth value-noise background on a coarse lattice.
fn background(rng: &mut Stream, size: usize, plain: bool) -> Vec<[f64; 3]> {
    let base = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    if plain {
        return vec![base; size * size];
    }
    const GRID: usize = 5;
    let lattice: Vec<[f64; 3]> = (0..GRID * GRID)
        .map(|_| std::array::from_fn(|c| (base[c] + 0.35 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)))
        .collect();
    let step = (size - 1) as f64 / (GRID - 1) as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 / step;
        let y0 = (fy as usize).min(GRID - 2);
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = x as f64 / step;
            let x0 = (fx as usize).min(GRID - 2);
            let tx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| lattice[yy * GRID + xx];
            out.push(std::array::from_fn(|c| {
                let top = at(y0, x0)[c] * (1.0 - tx) + at(y0, x0 + 1)[c] * tx;
                let bottom = at(y0 + 1, x0)[c] * (1.0 - tx) + at(y0 + 1, x0 + 1)[c] * tx;
                top * (1.0 - ty) + bottom * ty
            }));
        }
    }
    out
}

/// Renders sample `index` of `spec`; a pure function of `(spec, index)`.
pub fn gen_sample(spec: &DatasetSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    if index >= spec.num_samples {
        return Err(Error::invalid(format!("sample index {index} out of range 0..{}", spec.num_samples)));
    }
    let mut rng = rng::indexed(spec.seed, "shapes", index as u64);
    let size = spec.image_size;
    let s = size as f64;
    let mut pixels = background(&mut rng, size, spec.noise_free);
    let mut mask = vec![0u8; size * size];

    let count = rng.random_range(spec.clutter_min..=spec.clutter_max);
    let mut largest: Option<Shape> = None;
    for _ in 0..count {
        let shape = Shape {
            class: rng.random_range(1..spec.num_classes as u8),
            cx: rng.random_range(0.15 * s..0.85 * s),
            cy: rng.random_range(0.15 * s..0.85 * s),
            r: rng.random_range(0.1 * s..0.25 * s),
            turned: rng.random::<bool>(),
        };
        let color: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
        for y in 0..size {
            for x in 0..size {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    pixels[y * size + x] = color;
                    mask[y * size + x] = shape.class;
                }
            }
        }
        if largest.is_none_or(|l| shape.area() > l.area()) {
            largest = Some(shape);
        }
    }

    let mut data = vec![0.0f32; 3 * size * size];
    for (i, px) in pixels.iter().enumerate() {
        for c in 0..3 {
            let jitter = if spec.noise_free { 0.0 } else { 0.04 * (rng.random::<f64>() - 0.5) };
            let q = ((px[c] + jitter).clamp(0.0, 1.0) * 255.0).round() as u8;
            data[c * size * size + i] = to_unit(q);
        }
    }
    Ok(Sample {
        image: Tensor::new(&[3, size, size], data)?,
        mask,
        class_label: largest.map_or(0, |l| l.class),
    })
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    (0..spec.num_samples).map(|i| gen_sample(spec, i)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Per-channel mean and standard deviation. Per-image partial sums are
/// combined in sorted order, so the result does not depend on the order
/// of `images`.
pub fn compute_norm_stats(images: &[&Tensor]) -> Result<NormStats> {
    if images.is_empty() {
        return Err(Error::data("cannot compute normalization statistics of an empty dataset"));
    }
    let mut partials: Vec<[f64; 6]> = Vec::with_capacity(images.len());
    let mut count = 0.0f64;
    for img in images {
        let s = img.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::data(format!("expected a [3, h, w] image, got {s:?}")));
        }
        let plane = s[1] * s[2];
        let mut p = [0.0; 6];
        for (c, chunk) in img.data().chunks(plane).enumerate() {
            for &v in chunk {
                p[c] += v as f64;
                p[3 + c] += (v as f64) * (v as f64);
            }
        }
        partials.push(p);
        count += plane as f64;
    }
    partials.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        let sum: f64 = partials.iter().map(|p| p[c]).sum();
        let sq: f64 = partials.iter().map(|p| p[3 + c]).sum();
        mean[c] = sum / count;
        std[c] = (sq / count - mean[c] * mean[c]).max(0.0).sqrt();
        if !(std[c] > 1e-12) {
            return Err(Error::data(format!("channel {c} is constant; cannot normalize")));
        }
    }
    Ok(NormStats { mean, std })
}

impl NormStats {
    /// `(x − mean) / std` per channel of a `[3, h, w]` or `[n, 3, h, w]` tensor.
    pub fn normalize(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        let c_axis = s.len().checked_sub(3).ok_or_else(|| Error::invalid(format!("cannot normalize shape {s:?}")))?;
        if s[c_axis] != 3 {
            return Err(Error::invalid(format!("normalize expects 3 channels, got shape {s:?}")));
        }
        let plane = s[c_axis + 1] * s[c_axis + 2];
        let mut out = image.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = i % 3;
            let (m, sd) = (self.mean[c] as f32, self.std[c] as f32);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
        Ok(out)
    }
}

/// `ceil(fraction · n)` distinct indices, sorted, drawn uniformly.
pub fn subset_labels(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    // tolerate representation error such as 0.01 · 1000 = 10.000000000000002
    let k = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    if k == 0 {
        return Err(Error::invalid(format!("label fraction {fraction} of {n} samples selects nothing")));
    }
    let mut rng = rng::stream(seed, "label-subset");
    let mut picked = index::sample(&mut rng, n, k.min(n)).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Crops `crop × crop` at `(y0, x0)` and optionally mirrors left-right.
pub fn crop_flip(image: &Tensor, mask: &[u8], y0: usize, x0: usize, crop: usize, flip: bool) -> Result<(Tensor, Vec<u8>)> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if mask.len() != h * w {
        return Err(Error::invalid(format!("mask has {} pixels, image is {h}x{w}", mask.len())));
    }
    if y0 + crop > h || x0 + crop > w || crop == 0 {
        return Err(Error::invalid(format!("crop {crop} at ({y0}, {x0}) exceeds image {h}x{w}")));
    }
    let src_x = |x: usize| if flip { x0 + crop - 1 - x } else { x0 + x };
    let mut data = Vec::with_capacity(c * crop * crop);
    for ch in 0..c {
        for y in 0..crop {
            let row = (ch * h + y0 + y) * w;
            data.extend((0..crop).map(|x| image.data()[row + src_x(x)]));
        }
    }
    let mut m = Vec::with_capacity(crop * crop);
    for y in 0..crop {
        m.extend((0..crop).map(|x| mask[(y0 + y) * w + src_x(x)]));
    }
    Ok((Tensor::new(&[c, crop, crop], data)?, m))
}

/// Random crop (uniform origin) and left-right flip with probability ½,
/// applied identically to image and mask.
pub fn augment(image: &Tensor, mask: &[u8], rng: &mut Stream, crop: usize) -> Result<(Tensor, Vec<u8>)> {
    let s = image.shape();
    if s.len() != 3 || crop > s[1] || crop > s[2] {
        return Err(Error::invalid(format!("crop {crop} larger than image {s:?}")));
    }
    let y0 = rng.random_range(0..=s[1] - crop);
    let x0 = rng.random_range(0..=s[2] - crop);
    let flip = rng.random::<bool>();
    crop_flip(image, mask, y0, x0, crop, flip)
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_error(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_error(path, e))?;
    writer.finish().map_err(|e| png_error(path, e))
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| png_error(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_error(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_error(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.line_size * info.height as usize);
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid(format!("expected a [3, h, w] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push((image.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &bytes)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let (w, h, color, buf) = read_png(path)?;
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        other => return Err(png_error(path, format!("unsupported color type {other:?}"))),
    };
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = to_unit(buf[i * channels + c.min(channels - 1)]);
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn save_mask(path: &Path, mask: &[u8], height: usize, width: usize) -> Result<()> {
    if mask.len() != height * width {
        return Err(Error::invalid(format!("mask has {} pixels, expected {height}x{width}", mask.len())));
    }
    write_png(path, width, height, png::ColorType::Grayscale, mask)
}

/// Loads a class-id mask, rejecting ids outside `0..num_classes` other
/// than `IGNORE`.
pub fn load_mask(path: &Path, num_classes: usize) -> Result<(Vec<u8>, usize, usize)> {
    let (w, h, color, buf) = read_png(path)?;
    if color != png::ColorType::Grayscale {
        return Err(png_error(path, format!("mask must be single-channel, got {color:?}")));
    }
    if let Some(&bad) = buf.iter().find(|&&v| v != IGNORE && v as usize >= num_classes) {
        return Err(Error::data(format!("{}: mask value {bad} is not a class id below {num_classes}", path.display())));
    }
    Ok((buf, h, w))
}

pub fn save_sample(image_path: &Path, mask_path: &Path, sample: &Sample) -> Result<()> {
    let (h, w) = sample.extents();
    save_image(image_path, &sample.image)?;
    save_mask(mask_path, &sample.mask, h, w)
}

pub fn load_sample(image_path: &Path, mask_path: &Path, class_label: u8, num_classes: usize) -> Result<Sample> {
    let image = load_image(image_path)?;
    let (mask, h, w) = load_mask(mask_path, num_classes)?;
    if (h, w) != (image.shape()[1], image.shape()[2]) {
        return Err(Error::data(format!(
            "{}: mask is {h}x{w} but image is {}x{}",
            mask_path.display(),
            image.shape()[1],
            image.shape()[2]
        )));
    }
    Ok(Sample { image, mask, class_label })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub class_label: u8,
}

/// Writes every sample as `NNNNN.png` / `NNNNN_mask.png` under `dir` and
/// a `manifest.tsv` listing them; returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = PathBuf::from(format!("{i:05}.png"));
        let mask = PathBuf::from(format!("{i:05}_mask.png"));
        save_sample(&dir.join(&image), &dir.join(&mask), s)?;
        entries.push(ManifestEntry { image, mask, class_label: s.class_label });
    }
    let path = dir.join("manifest.tsv");
    write_manifest(&path, &entries)?;
    Ok(path)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for e in entries {
        writeln!(out, "{}\t{}\t{}", e.image.display(), e.mask.display(), e.class_label).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [image, mask, label] = fields[..] else {
            return Err(Error::data(format!("{}:{}: expected 3 tab-separated fields", path.display(), n + 1)));
        };
        let class_label = label
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("{}:{}: bad class label `{label}`", path.display(), n + 1)))?;
        entries.push(ManifestEntry { image: image.into(), mask: mask.into(), class_label });
    }
    Ok(entries)
}

/// Loads every sample listed in a manifest; relative paths resolve
/// against the manifest's directory.
pub fn load_dataset(manifest: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .iter()
        .map(|e| load_sample(&base.join(&e.image), &base.join(&e.mask), e.class_label, num_classes))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = DatasetSpec { seed: 7, ..DatasetSpec::default() };
        let a = gen_sample(&spec, 0).unwrap();
        let b = gen_sample(&spec, 0).unwrap();
        assert_eq!(a.image.to_le_bytes(), b.image.to_le_bytes());
        assert_eq!(a.mask, b.mask);
        assert_ne!(gen_sample(&spec, 1).unwrap().mask, a.mask);
    }

    #[test]
    fn empty_clutter_is_background() {
        let spec = DatasetSpec { clutter_min: 0, clutter_max: 0, num_samples: 5, ..DatasetSpec::default() };
        for i in 0..5 {
            let s = gen_sample(&spec, i).unwrap();
            assert!(s.mask.iter().all(|&v| v == 0));
            assert_eq!(s.class_label, 0);
        }
    }

    #[test]
    fn every_class_appears() {
        let spec = DatasetSpec::default();
        let mut seen = [false; 5];
        let mut labels = [0usize; 5];
        for i in 0..spec.num_samples {
            let s = gen_sample(&spec, i).unwrap();
            s.mask.iter().for_each(|&v| seen[v as usize] = true);
            labels[s.class_label as usize] += 1;
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(seen.iter().all(|&s| s));
        assert!(labels[1..].iter().all(|&n| n > 100), "{labels:?}");
    }

    #[test]
    fn spec_validation() {
        assert!(DatasetSpec { image_size: 40, ..DatasetSpec::default() }.validate().is_err());
        assert!(DatasetSpec { num_samples: 0, ..DatasetSpec::default() }.validate().is_err());
        assert!(DatasetSpec { num_classes: 6, ..DatasetSpec::default() }.validate().is_err());
        assert!(gen_sample(&DatasetSpec::default(), 1000).is_err());
    }

    #[test]
    fn norm_stats_hand_computed() {
        // channel 0 holds {0, 51, 102, 153}/255 over the two images
        let a = Tensor::new(&[3, 1, 2], vec![0.0, 0.2, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let b = Tensor::new(&[3, 1, 2], vec![0.4, 0.6, 1.0, 0.0, 0.5, 0.5]).unwrap();
        let c = Tensor::new(&[3, 1, 2], vec![0.4, 0.6, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let stats = compute_norm_stats(&[&a, &c]).unwrap();
        assert!((stats.mean[0] - 0.3).abs() < 1e-7);
        assert!((stats.std[0] - 0.05f64.sqrt()).abs() < 1e-7);
        assert!((stats.mean[1] - 0.5).abs() < 1e-7 && (stats.std[1] - 0.5).abs() < 1e-7);
        assert!(matches!(compute_norm_stats(&[&a, &b]), Err(Error::InvalidData(_))));
        assert!(compute_norm_stats(&[&c, &a]).unwrap() == stats);
        let flat = Tensor::full(&[3, 4, 4], 0.5);
        assert!(matches!(compute_norm_stats(&[&flat, &flat]), Err(Error::InvalidData(_))));
    }

    #[test]
    fn normalized_dataset_is_standard() {
        let spec = DatasetSpec { num_samples: 50, ..DatasetSpec::default() };
        let samples = generate(&spec).unwrap();
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let stats = compute_norm_stats(&images).unwrap();
        let mut sums = [(0.0f64, 0.0f64); 3];
        let mut count = 0.0;
        for img in &images {
            let n = stats.normalize(img).unwrap();
            for (c, chunk) in n.data().chunks(64 * 64).enumerate() {
                for &v in chunk {
                    sums[c].0 += v as f64;
                    sums[c].1 += (v as f64).powi(2);
                }
            }
            count += 4096.0;
        }
        for (s, sq) in sums {
            let mean = s / count;
            let std = (sq / count - mean * mean).sqrt();
            assert!(mean.abs() < 0.01 && (std - 1.0).abs() < 0.01, "{mean} {std}");
        }
    }

    #[test]
    fn subsets() {
        assert_eq!(subset_labels(10, 1.0, 0).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(subset_labels(100, 1.0 / 30.0, 0).unwrap().len(), 4);
        assert_eq!(subset_labels(1000, 0.01, 0).unwrap().len(), 10);
        assert_eq!(subset_labels(1000, 0.05, 3).unwrap(), subset_labels(1000, 0.05, 3).unwrap());
        let s = subset_labels(1000, 0.2, 9).unwrap();
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(subset_labels(10, 0.0, 0).is_err());
        assert!(subset_labels(10, 1.5, 0).is_err());
    }

    #[test]
    fn flip_index_arithmetic() {
        let mask: Vec<u8> = (0..16).collect();
        let image = Tensor::new(&[3, 4, 4], (0..48).map(|v| v as f32).collect()).unwrap();
        let (fi, fm) = crop_flip(&image, &mask, 0, 0, 4, true).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(fm[r * 4 + c], mask[r * 4 + 3 - c]);
                assert_eq!(fi.data()[16 + r * 4 + c], image.data()[16 + r * 4 + 3 - c]);
            }
        }
        let (ii, im) = crop_flip(&fi, &fm, 0, 0, 4, true).unwrap();
        assert_eq!((ii, im), (image.clone(), mask.clone()));
        assert_eq!(crop_flip(&image, &mask, 0, 0, 4, false).unwrap(), (image.clone(), mask.clone()));
        assert!(crop_flip(&image, &mask, 1, 0, 4, false).is_err());
        assert!(augment(&image, &mask, &mut rng::stream(0, "a"), 5).is_err());
    }

    #[test]
    fn augment_keeps_labels_aligned() {
        let spec = DatasetSpec { num_samples: 3, ..DatasetSpec::default() };
        let s = gen_sample(&spec, 2).unwrap();
        let mut r = rng::stream(1, "aug");
        let (img, mask) = augment(&s.image, &s.mask, &mut r, 64).unwrap();
        let mut a: Vec<u8> = mask.clone();
        let mut b = s.mask.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert_eq!(img.shape(), &[3, 64, 64]);
        let (_, small) = augment(&s.image, &s.mask, &mut r, 32).unwrap();
        assert_eq!(small.len(), 32 * 32);
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { num_samples: 4, ..DatasetSpec::default() };
        let mut samples = generate(&spec).unwrap();
        samples[1].mask[5] = IGNORE;
        let manifest = write_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(&manifest, 5).unwrap();
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.class_label, b.class_label);
            assert!(a.image.max_abs_diff(&b.image) <= 1.0 / 255.0);
        }
        assert_eq!(loaded[1].mask[5], IGNORE);

        let bad = dir.path().join("bad.png");
        save_mask(&bad, &[0, 1, 7, 2], 2, 2).unwrap();
        assert!(matches!(load_mask(&bad, 5), Err(Error::InvalidData(_))));
        std::fs::write(&bad, b"not a png").unwrap();
        match load_mask(&bad, 5) {
            Err(Error::Io { path, .. }) => assert_eq!(path, bad),
            other => panic!("{other:?}"),
        }
    }
}
