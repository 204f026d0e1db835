//! Segmentation metrics and test-time inference protocols.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::data::IGNORE;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Anything that maps an NCHW batch to per-pixel class logits.
pub trait LogitModel {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    /// Input extents must be multiples of this.
    fn divisor(&self) -> usize {
        1
    }
}

impl LogitModel for Model {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }

    fn divisor(&self) -> usize {
        self.config.divisor()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// Row-major: `counts[gt * C + pred]`.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if !(1..=255).contains(&num_classes) {
            return Err(Error::invalid(format!("num_classes must lie in 1..=255, got {num_classes}")));
        }
        Ok(ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts `(gt, pred)` pairs, skipping pixels whose ground truth is
    /// `IGNORE`. On error the matrix is left unchanged.
    pub fn update(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::invalid(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let c = self.num_classes;
        if let Some(&p) = pred.iter().find(|&&p| p as usize >= c) {
            return Err(Error::data(format!("predicted class {p} out of range 0..{c}")));
        }
        if let Some(&g) = gt.iter().find(|&&g| g != IGNORE && g as usize >= c) {
            return Err(Error::data(format!("ground-truth class {g} out of range 0..{c}")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != IGNORE {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::invalid("cannot merge confusion matrices of different class counts"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_count: u64,
    pub protocol: String,
}

/// IoU per class from the confusion matrix; the mean runs over classes
/// with a nonzero union.
pub fn miou(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let c = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let observed: Vec<f64> = per_class.iter().flatten().copied().collect();
    if observed.is_empty() {
        return Err(Error::UndefinedMetric("no class has a nonzero union".into()));
    }
    Ok(EvalReport {
        miou: observed.iter().sum::<f64>() / observed.len() as f64,
        per_class,
        pixel_count: cm.total(),
        protocol: String::new(),
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# protocol: {}\nclass_id,iou\n", self.protocol);
        for (k, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => s.push_str(&format!("{k},{v}\n")),
                None => s.push_str(&format!("{k},\n")),
            }
        }
        s.push_str(&format!("miou,{}\n", self.miou));
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Test-time protocol: logit averaging over scales and optional
/// horizontal flips, optionally on width-wise patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub scales: Vec<f64>,
    pub flip: bool,
    pub patch_width: Option<usize>,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol { scales: vec![1.0], flip: false, patch_width: None }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scales: Vec<String> = self.scales.iter().map(|s| s.to_string()).collect();
        write!(f, "scales={} flip={} patch=", scales.join(","), self.flip)?;
        match self.patch_width {
            Some(w) => write!(f, "{w}"),
            None => f.write_str("none"),
        }
    }
}

/// `(f(x) + unflip(f(flip(x)))) / 2`.
pub fn infer_flip(model: &dyn LogitModel, x: &Tensor) -> Result<Tensor> {
    let a = model.logits(x)?;
    let b = model.logits(&x.flip_horizontal()?)?.flip_horizontal()?;
    a.ensure_same_shape(&b, "flipped logits")?;
    let data = a.data().iter().zip(b.data()).map(|(p, q)| (p + q) * 0.5).collect();
    Tensor::new(a.shape(), data)
}

fn scaled_extent(extent: usize, scale: f64, divisor: usize) -> usize {
    ((extent as f64 * scale / divisor as f64).round() as usize) * divisor
}

/// Uniform logit average over the distinct `scales`: resize the input
/// (bilinear), infer, resize logits back to native resolution.
pub fn infer_multiscale(model: &dyn LogitModel, x: &Tensor, scales: &[f64], flip: bool) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut distinct: Vec<f64> = Vec::new();
    for &s in scales {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("scale {s} must be positive")));
        }
        if !distinct.contains(&s) {
            distinct.push(s);
        }
    }
    if distinct.is_empty() {
        return Err(Error::invalid("at least one scale is required"));
    }
    let d = model.divisor();
    let mut sum: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for &s in &distinct {
        let (sh, sw) = (scaled_extent(h, s, d), scaled_extent(w, s, d));
        if sh < d || sw < d {
            return Err(Error::invalid(format!("scale {s} shrinks {h}x{w} below the minimum extent {d}")));
        }
        let input = x.resize_bilinear(sh, sw)?;
        let out = if flip { infer_flip(model, &input)? } else { model.logits(&input)? };
        let out = out.resize_bilinear(h, w)?;
        shape = out.shape().to_vec();
        let acc = sum.get_or_insert_with(|| vec![0.0; out.numel()]);
        acc.iter_mut().zip(out.data()).for_each(|(a, &v)| *a += v as f64);
    }
    let k = distinct.len() as f64;
    let data = sum.expect("at least one scale").into_iter().map(|v| (v / k) as f32).collect();
    Tensor::new(&shape, data)
}

/// Splits the width into `patch_width` tiles, runs `infer` on each and
/// concatenates the logits. No overlap, no blending.
pub fn infer_patched(
    model: &dyn LogitModel,
    x: &Tensor,
    patch_width: usize,
    infer: &dyn Fn(&dyn LogitModel, &Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let (_, _, _, w) = x.dims4()?;
    if patch_width == 0 || w % patch_width != 0 {
        return Err(Error::invalid(format!("width {w} is not an integer multiple of patch width {patch_width}")));
    }
    if w == patch_width {
        return infer(model, x);
    }
    let parts = (0..w / patch_width)
        .map(|i| infer(model, &x.slice_width(i * patch_width, patch_width)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_width(&parts)
}

/// Logits under the full protocol.
pub fn infer(model: &dyn LogitModel, x: &Tensor, protocol: &Protocol) -> Result<Tensor> {
    let run = |m: &dyn LogitModel, t: &Tensor| infer_multiscale(m, t, &protocol.scales, protocol.flip);
    match protocol.patch_width {
        Some(pw) => infer_patched(model, x, pw, &run),
        None => run(model, x),
    }
}

/// Scores `(image, mask)` pairs under `protocol`, in batches of
/// `batch_size`. Images must already be normalized.
pub fn evaluate(
    model: &dyn LogitModel,
    images: &[Tensor],
    masks: &[&[u8]],
    num_classes: usize,
    protocol: &Protocol,
    batch_size: usize,
) -> Result<EvalReport> {
    if images.len() != masks.len() {
        return Err(Error::invalid(format!("{} images but {} masks", images.len(), masks.len())));
    }
    let mut cm = ConfusionMatrix::new(num_classes)?;
    for (imgs, ms) in images.chunks(batch_size.max(1)).zip(masks.chunks(batch_size.max(1))) {
        let batch = Tensor::stack(imgs)?;
        let pred = infer(model, &batch, protocol)?.argmax_channels()?;
        let per = pred.len() / imgs.len();
        for (i, m) in ms.iter().enumerate() {
            cm.update(&pred[i * per..(i + 1) * per], m)?;
        }
    }
    let mut report = miou(&cm)?;
    report.protocol = protocol.to_string();
    Ok(report)
}

/// A perfect predictor for sanity checks: its input is the ground-truth
/// mask itself (`[n, 1, h, w]`, class ids as floats) and its logits are the
/// one-hot encoding. Ids outside the class range (such as the ignore
/// label) get all-zero logits.
pub struct MaskOracle {
    pub num_classes: usize,
}

impl MaskOracle {
    pub fn input(masks: &[&[u8]], height: usize, width: usize) -> Result<Tensor> {
        let data = masks.iter().flat_map(|m| m.iter().map(|&v| v as f32)).collect();
        Tensor::new(&[masks.len(), 1, height, width], data)
    }
}

impl LogitModel for MaskOracle {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::invalid(format!("oracle input must have one channel, got {c}")));
        }
        let plane = h * w;
        let k = self.num_classes;
        let mut out = vec![0.0f32; n * k * plane];
        for b in 0..n {
            for p in 0..plane {
                let id = x.data()[b * plane + p].round();
                if id >= 0.0 && (id as usize) < k {
                    out[(b * k + id as usize) * plane + p] = 1.0;
                }
            }
        }
        Tensor::new(&[n, k, h, w], out)
    }
}
