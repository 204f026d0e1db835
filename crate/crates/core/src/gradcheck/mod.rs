//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) mod reference;

use crate::autodiff::{Graph, Var, GROUP_NORM_EPS};
use crate::corruption::{self, NoiseSpec, Target};
use crate::model::{build_model, gn_groups, Head, ModelConfig};
use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use reference::Arr;

/// Loss value plus analytic gradient for every parameter it depends on.
pub type LossAndGrad = (f64, BTreeMap<String, Tensor>);

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub step: f32,
    /// Denominator floor for the relative error, as a fraction of the
    /// largest analytic gradient magnitude in the model. Coordinates whose
    /// true gradient is numerically zero would otherwise compare pure
    /// rounding noise against zero.
    pub floor_fraction: f64,
    pub seed: u64,
    /// Only parameters whose name starts with one of these prefixes are
    /// probed; empty means all.
    pub prefixes: Vec<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { probes: 50, step: 1e-3, floor_fraction: 1e-2, seed: 0, prefixes: Vec::new() }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<ProbeResult>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ProbeResult> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares `analytic` gradients against central differences of `loss` on
/// `cfg.probes` randomly chosen parameter coordinates and returns the worst
/// relative error `|a − n| / max(|n|, floor)`, the finite difference `n`
/// being the reference.
pub fn grad_check<F>(
    mut loss: F,
    analytic: &BTreeMap<String, Tensor>,
    params: &ParamSet,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let base = loss(params)?;
    let again = loss(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::GradCheck(format!("loss is not deterministic: {base} vs {again}")));
    }
    let selected: Vec<(&str, usize)> = params
        .iter()
        .filter(|(name, _)| cfg.prefixes.is_empty() || cfg.prefixes.iter().any(|p| name.starts_with(p.as_str())))
        .map(|(name, p)| (name.as_str(), p.value.numel()))
        .collect();
    let total: usize = selected.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::invalid("gradient check has no parameters to probe"));
    }
    let grad_scale = analytic
        .values()
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, &v| m.max(v.abs() as f64));
    let floor = (grad_scale * cfg.floor_fraction).max(f64::MIN_POSITIVE);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut probes = Vec::with_capacity(cfg.probes);
    for _ in 0..cfg.probes {
        let mut flat = rng.random_range(0..total);
        let (name, index) = selected
            .iter()
            .find_map(|&(name, n)| {
                if flat < n {
                    Some((name, flat))
                } else {
                    flat -= n;
                    None
                }
            })
            .expect("index within total");
        let a = analytic.get(name).map_or(0.0, |g| g.data()[index] as f64);
        let original = params.value(name)?.data()[index];
        let mut eval_at = |v: f32| -> Result<f64> {
            work.get_mut(name).expect("cloned from params").value.data_mut()[index] = v;
            loss(&work)
        };
        let plus = eval_at(original + cfg.step)?;
        let minus = eval_at(original - cfg.step)?;
        eval_at(original)?;
        // the perturbation actually applied, after f32 rounding
        let h = ((original + cfg.step) as f64) - ((original - cfg.step) as f64);
        let numeric = (plus - minus) / h;
        let rel_error = (a - numeric).abs() / numeric.abs().max(floor);
        probes.push(ProbeResult { name: name.to_string(), index, analytic: a, numeric, rel_error });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, probes })
}

/// [`grad_check`] where the same function supplies loss and gradient.
pub fn grad_check_fn<F>(mut f: F, params: &ParamSet, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<LossAndGrad>,
{
    let (_, analytic) = f(params)?;
    grad_check(|p| Ok(f(p)?.0), &analytic, params, cfg)
}

/// Builds a loss from leaf variables named like the entries of a [`ParamSet`].
pub type GraphBuilder<'a> = dyn Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var> + 'a;

/// Runs `build` on a fresh graph whose leaves are the parameters, and
/// returns the loss with the gradient of every parameter.
pub fn graph_loss_and_grad(params: &ParamSet, build: &GraphBuilder<'_>) -> Result<LossAndGrad> {
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> =
        params.iter().map(|(name, p)| (name.clone(), g.leaf(p.value.clone(), true))).collect();
    let loss = build(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    let out = vars
        .iter()
        .filter_map(|(name, &v)| grads.take(v).map(|t| (name.clone(), t)))
        .collect();
    Ok((g.scalar(loss), out))
}

fn random_tensor(rng: &mut Stream, shape: &[usize], scale: f32, away_from_zero: bool) -> Tensor {
    let n = shape.iter().product();
    let mut data: Vec<f32> = rng::standard_normal(rng, n).into_iter().map(|v| v * scale).collect();
    if away_from_zero {
        // keep ReLU inputs off the kink so central differences stay smooth
        for v in &mut data {
            *v = v.signum() * (v.abs() + 0.1);
        }
    }
    Tensor::new(shape, data).expect("shape from literal")
}

type Reference = Box<dyn Fn(&BTreeMap<&str, Arr>) -> Arr>;

/// One differentiable op wrapped into a scalar loss (squared error against a
/// random target, or the op itself when it is a loss), together with an
/// independent double-precision forward of the same loss.
pub struct OpCase {
    pub name: &'static str,
    pub params: ParamSet,
    pub build: Box<GraphBuilder<'static>>,
    reference: Box<dyn Fn(&ParamSet) -> f64>,
}

impl OpCase {
    /// Finite differences of the double-precision forward against the
    /// engine's analytic gradient.
    pub fn check(&self, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
        let (_, analytic) = graph_loss_and_grad(&self.params, &self.build)?;
        grad_check(|p| Ok((self.reference)(p)), &analytic, &self.params, cfg)
    }
}

struct CaseBuilder {
    rng: Stream,
    cases: Vec<OpCase>,
}

/// Input spec: name, shape, scale, keep away from zero.
type InputSpec = (&'static str, Vec<usize>, f32, bool);

impl CaseBuilder {
    fn add(
        &mut self,
        name: &'static str,
        inputs: Vec<InputSpec>,
        out_shape: Option<Vec<usize>>,
        op: impl Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var> + 'static,
        reference: Reference,
    ) {
        let mut params = ParamSet::new();
        for (n, shape, scale, away) in inputs {
            params.insert(n, random_tensor(&mut self.rng, &shape, scale, away));
        }
        let target = out_shape.map(|s| random_tensor(&mut self.rng, &s, 1.0, false));
        let target_ref = target.as_ref().map(Arr::from);
        let build: Box<GraphBuilder<'static>> = Box::new(move |g, v| {
            let out = op(g, v)?;
            match &target {
                Some(t) => g.mse(out, t),
                None => Ok(out),
            }
        });
        let reference = Box::new(move |p: &ParamSet| {
            let arrs: BTreeMap<&str, Arr> = p.iter().map(|(k, v)| (k.as_str(), Arr::from(&v.value))).collect();
            let out = reference(&arrs);
            match &target_ref {
                Some(t) => reference::mse(&out, t),
                None => out.d[0],
            }
        });
        self.cases.push(OpCase { name, params, build, reference });
    }
}

fn he(fan_in: usize) -> f32 {
    (2.0 / fan_in as f32).sqrt()
}

/// The op vocabulary of the autodiff engine on small random inputs
/// (`2×3×8×8` where the op allows). Weights carry He-normal scale.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut cb = CaseBuilder { rng: rng::stream(seed, "op-cases"), cases: Vec::new() };
    let x = |s: &[usize]| ("x", s.to_vec(), 1.0, false);
    for (name, cout, k, stride, pad) in
        [("conv2d_3x3_stride1", 4, 3, 1, 1), ("conv2d_3x3_stride2", 5, 3, 2, 1), ("conv2d_1x1", 2, 1, 1, 0)]
    {
        let ho = (8 + 2 * pad - k) / stride + 1;
        cb.add(
            name,
            vec![x(&[2, 3, 8, 8]), ("w", vec![cout, 3, k, k], he(3 * k * k), false), ("b", vec![cout], 0.1, false)],
            Some(vec![2, cout, ho, ho]),
            move |g, v| g.conv2d(v["x"], v["w"], Some(v["b"]), stride, pad),
            Box::new(move |a| reference::conv2d(&a["x"], &a["w"], Some(&a["b"]), stride, pad)),
        );
    }
    cb.add(
        "relu",
        vec![("x", vec![2, 3, 8, 8], 1.0, true)],
        Some(vec![2, 3, 8, 8]),
        |g, v| g.relu(v["x"]),
        Box::new(|a| reference::relu(&a["x"])),
    );
    for (name, c, groups) in [("group_norm", 3, 3), ("group_norm_shared_group", 4, 2)] {
        cb.add(
            name,
            vec![x(&[2, c, 8, 8]), ("gamma", vec![c], 1.0, false), ("beta", vec![c], 1.0, false)],
            Some(vec![2, c, 8, 8]),
            move |g, v| g.group_norm(v["x"], v["gamma"], v["beta"], groups),
            Box::new(move |a| {
                reference::group_norm(&a["x"], &a["gamma"], &a["beta"], groups, GROUP_NORM_EPS as f64)
            }),
        );
    }
    cb.add(
        "add",
        vec![x(&[2, 3, 8, 8]), ("y", vec![2, 3, 8, 8], 1.0, false)],
        Some(vec![2, 3, 8, 8]),
        |g, v| g.add(v["x"], v["y"]),
        Box::new(|a| reference::add(&a["x"], &a["y"])),
    );
    cb.add(
        "concat_channels",
        vec![x(&[2, 3, 8, 8]), ("y", vec![2, 2, 8, 8], 1.0, false)],
        Some(vec![2, 5, 8, 8]),
        |g, v| g.concat_channels(v["x"], v["y"]),
        Box::new(|a| reference::concat_channels(&a["x"], &a["y"])),
    );
    cb.add(
        "upsample2x",
        vec![x(&[2, 3, 4, 4])],
        Some(vec![2, 3, 8, 8]),
        |g, v| g.upsample2x(v["x"]),
        Box::new(|a| reference::upsample2x(&a["x"])),
    );
    cb.add(
        "global_avg_pool",
        vec![x(&[2, 3, 8, 8])],
        Some(vec![2, 3]),
        |g, v| g.global_avg_pool(v["x"]),
        Box::new(|a| reference::global_avg_pool(&a["x"])),
    );
    cb.add(
        "dense",
        vec![x(&[2, 6]), ("w", vec![4, 6], he(6), false), ("b", vec![4], 0.1, false)],
        Some(vec![2, 4]),
        |g, v| g.dense(v["x"], v["w"], v["b"]),
        Box::new(|a| reference::dense(&a["x"], &a["w"], &a["b"])),
    );
    let proj = |n: &'static str| (n, vec![4, 4], he(4), false);
    cb.add(
        "self_attention",
        vec![x(&[2, 4, 3, 3]), proj("wq"), proj("wk"), proj("wv"), proj("wo")],
        Some(vec![2, 4, 3, 3]),
        |g, v| g.self_attention(v["x"], v["wq"], v["wk"], v["wv"], v["wo"]),
        Box::new(|a| reference::self_attention(&a["x"], &a["wq"], &a["wk"], &a["wv"], &a["wo"])),
    );
    let labels: Vec<u8> = (0..2 * 8 * 8)
        .map(|_| match cb.rng.random_range(0..7u32) {
            6 => 255,
            r => (r % 3) as u8,
        })
        .collect();
    let ref_labels = labels.clone();
    cb.add(
        "softmax_cross_entropy",
        vec![x(&[2, 3, 8, 8])],
        None,
        move |g, v| g.softmax_cross_entropy(v["x"], &labels, 255),
        Box::new(move |a| Arr { shape: vec![1], d: vec![reference::softmax_cross_entropy(&a["x"], &ref_labels, 255)] }),
    );
    cb.add(
        "mean_squared_error",
        vec![x(&[2, 3, 8, 8])],
        Some(vec![2, 3, 8, 8]),
        |_, v| Ok(v["x"]),
        Box::new(|a| a["x"].clone()),
    );
    cb.cases
}

/// The same wiring as `forward_graph`, in double precision on the
/// reference ops.
fn reference_model(cfg: &ModelConfig, p: &ParamSet, x: &Arr) -> Arr {
    let a = |n: &str| Arr::from(p.value(n).unwrap());
    let block = |x: &Arr, conv: &str, gn: &str, stride: usize| {
        let y = reference::conv2d(x, &a(&format!("{conv}.weight")), None, stride, 1);
        let c = y.shape[1];
        reference::group_norm(&y, &a(&format!("{gn}.gamma")), &a(&format!("{gn}.beta")), gn_groups(c), GROUP_NORM_EPS as f64)
    };
    let stages = cfg.encoder_widths.len();
    let mut feats = Vec::new();
    let mut h = x.clone();
    for i in 1..=stages {
        let s = format!("encoder.stage{i}");
        let d = reference::relu(&block(&h, &format!("{s}.down"), &format!("{s}.gn1"), 2));
        let r = block(&d, &format!("{s}.conv"), &format!("{s}.gn2"), 1);
        h = reference::relu(&reference::add(&d, &r));
        feats.push(h.clone());
    }
    if cfg.bottleneck_attention {
        let w = |n: &str| a(&format!("encoder.attention.{n}.weight"));
        h = reference::self_attention(&h, &w("wq"), &w("wk"), &w("wv"), &w("wo"));
    }
    for i in 0..stages {
        let s = format!("decoder.stage{}", i + 1);
        h = reference::upsample2x(&h);
        if i + 1 < stages {
            h = reference::concat_channels(&h, &feats[stages - 2 - i]);
        }
        let y = reference::relu(&block(&h, &format!("{s}.conv1"), &format!("{s}.gn1"), 1));
        h = reference::relu(&block(&y, &format!("{s}.conv2"), &format!("{s}.gn2"), 1));
    }
    reference::conv2d(&h, &a("head.conv.weight"), Some(&a("head.conv.bias")), 1, 0)
}


/// Checks a small Denoiser with bottleneck attention end to end: one
/// report per probe seed, on the denoising loss of a corrupted batch.
///
/// Through eight normalized stages the loss is curved enough that a step
/// of 1e-3 measures truncation error, so the double-precision forward is
/// differenced with a step of 1e-5.
pub fn check_denoiser(seeds: &[u64]) -> Result<Vec<GradCheckReport>> {
    let config = ModelConfig {
        encoder_widths: vec![8, 16],
        base_decoder_widths: vec![8, 8],
        bottleneck_attention: true,
        head: Head::Denoiser,
        num_classes: 3,
        ..ModelConfig::default()
    };
    let model = build_model(&config, 2)?;
    let x = Tensor::new(&[2, 3, 16, 16], rng::standard_normal(&mut rng::stream(3, "input"), 2 * 3 * 16 * 16))?;
    let spec = NoiseSpec::scaled(0.9, Target::Noise)?;
    let sample = corruption::corrupt(&x, &spec, &mut rng::stream(0, "noise"))?;
    let target = corruption::denoise_target(&x, &sample, &spec)?;
    let (noisy, tgt) = (Arr::from(&sample.noisy), Arr::from(&target));
    let build = |g: &mut Graph, v: &BTreeMap<String, Var>| {
        let xv = g.leaf(sample.noisy.clone(), false);
        let y = model.forward_graph(g, v, xv)?;
        g.mse(y, &target)
    };
    let (f32_loss, analytic) = graph_loss_and_grad(&model.params, &build)?;
    let reference_loss = |p: &ParamSet| Ok(reference::mse(&reference_model(&model.config, p, &noisy), &tgt));
    let f64_loss = reference_loss(&model.params)?;
    if (f64_loss - f32_loss).abs() > 1e-4 * f32_loss {
        return Err(Error::GradCheck(format!("reference loss {f64_loss} disagrees with engine loss {f32_loss}")));
    }
    seeds
        .iter()
        .map(|&seed| grad_check(reference_loss, &analytic, &model.params, &GradCheckConfig { seed, step: 1e-5, ..Default::default() }))
        .collect()
}
