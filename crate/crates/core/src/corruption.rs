//! Noise processes for denoising pretraining: the simple `x + σε` and the
//! variance-preserving `√γ·x + √(1−γ)·ε` corruptions, their targets and
//! the algebra that connects them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Formulation {
    Simple,
    Scaled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    CleanImage,
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Magnitude {
    FixedSigma(f64),
    FixedGamma(f64),
    UniformGamma { lo: f64, hi: f64 },
}

/// A validated corruption recipe. Simple noise is parameterized by σ and
/// scaled noise by γ; the other pairings are rejected.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    formulation: Formulation,
    target: Target,
    magnitude: Magnitude,
}

fn unit_interval(g: f64) -> bool {
    g > 0.0 && g <= 1.0
}

impl NoiseSpec {
    pub fn new(formulation: Formulation, target: Target, magnitude: Magnitude) -> Result<Self> {
        match (formulation, magnitude) {
            (Formulation::Simple, Magnitude::FixedSigma(s)) => {
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(Error::invalid(format!("sigma must be finite and non-negative, got {s}")));
                }
            }
            (Formulation::Scaled, Magnitude::FixedGamma(g)) => {
                if !unit_interval(g) {
                    return Err(Error::invalid(format!("gamma must lie in (0, 1], got {g}")));
                }
            }
            (Formulation::Scaled, Magnitude::UniformGamma { lo, hi }) => {
                if !(unit_interval(lo) && unit_interval(hi) && lo <= hi) {
                    return Err(Error::invalid(format!("gamma range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]")));
                }
            }
            (f, m) => {
                return Err(Error::invalid(format!("{f:?} noise cannot be parameterized by {m:?}")));
            }
        }
        Ok(NoiseSpec { formulation, target, magnitude })
    }

    pub fn simple(sigma: f64, target: Target) -> Result<Self> {
        Self::new(Formulation::Simple, target, Magnitude::FixedSigma(sigma))
    }

    pub fn scaled(gamma: f64, target: Target) -> Result<Self> {
        Self::new(Formulation::Scaled, target, Magnitude::FixedGamma(gamma))
    }

    pub fn formulation(&self) -> Formulation {
        self.formulation
    }

    pub fn target(&self) -> Target {
        self.target
    }

    pub fn magnitude(&self) -> Magnitude {
        self.magnitude
    }

    /// True when no noise is ever added, so the task carries no signal.
    pub fn is_degenerate(&self) -> bool {
        match self.magnitude {
            Magnitude::FixedSigma(s) => s == 0.0,
            Magnitude::FixedGamma(g) => g == 1.0,
            Magnitude::UniformGamma { lo, .. } => lo == 1.0,
        }
    }
}

/// One corruption draw. `gamma_used` holds one γ per batch element.
#[derive(Clone, Debug)]
pub struct CorruptionSample {
    pub noisy: Tensor,
    pub noise: Tensor,
    pub gamma_used: Vec<f64>,
}

pub fn sigma_to_gamma(sigma: f64) -> Result<f64> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    Ok(1.0 / (1.0 + sigma * sigma))
}

pub fn gamma_to_sigma(gamma: f64) -> Result<f64> {
    if !unit_interval(gamma) {
        return Err(Error::invalid(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    Ok((1.0 / gamma - 1.0).sqrt())
}

/// Draws ε from `rng` and corrupts the batch `x` (`[n, ...]`).
pub fn corrupt(x: &Tensor, spec: &NoiseSpec, rng: &mut rng::Stream) -> Result<CorruptionSample> {
    if !x.is_finite() {
        return Err(Error::invalid("cannot corrupt a non-finite image batch"));
    }
    let n = x.shape()[0];
    let gammas: Vec<f64> = match spec.magnitude {
        Magnitude::FixedSigma(s) => vec![sigma_to_gamma(s)?; n],
        Magnitude::FixedGamma(g) => vec![g; n],
        Magnitude::UniformGamma { lo, hi } => (0..n).map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) }).collect(),
    };
    let noise = Tensor::new(x.shape(), rng::standard_normal(rng, x.numel()))?;
    corrupt_with(x, spec, noise, gammas)
}

/// Corruption with a given ε and per-element γ. For simple noise the γ
/// values are ignored and σ is taken from the spec.
pub fn corrupt_with(x: &Tensor, spec: &NoiseSpec, noise: Tensor, gammas: Vec<f64>) -> Result<CorruptionSample> {
    x.ensure_same_shape(&noise, "noise")?;
    let n = x.shape()[0];
    if gammas.len() != n {
        return Err(Error::invalid(format!("expected {n} gamma values, got {}", gammas.len())));
    }
    let per = x.numel() / n;
    let mut noisy = x.clone();
    for (i, chunk) in noisy.data_mut().chunks_mut(per).enumerate() {
        let eps = &noise.data()[i * per..(i + 1) * per];
        match spec.magnitude {
            Magnitude::FixedSigma(s) => {
                let s = s as f32;
                for (v, e) in chunk.iter_mut().zip(eps) {
                    *v += s * e;
                }
            }
            _ => {
                let a = gammas[i].sqrt() as f32;
                let b = (1.0 - gammas[i]).sqrt() as f32;
                for (v, e) in chunk.iter_mut().zip(eps) {
                    *v = a * *v + b * e;
                }
            }
        }
    }
    Ok(CorruptionSample { noisy, noise, gamma_used: gammas })
}

pub fn denoise_target(x: &Tensor, sample: &CorruptionSample, spec: &NoiseSpec) -> Result<Tensor> {
    x.ensure_same_shape(&sample.noise, "denoising target")?;
    Ok(match spec.target {
        Target::CleanImage => x.clone(),
        Target::Noise => sample.noise.clone(),
    })
}

/// Mean squared error over all elements.
pub fn denoising_loss(prediction: &Tensor, target: &Tensor) -> Result<f64> {
    prediction.ensure_same_shape(target, "denoising loss")?;
    if !(prediction.is_finite() && target.is_finite()) {
        return Err(Error::invalid("denoising loss of non-finite values"));
    }
    let sum: f64 = prediction.data().iter().zip(target.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(sum / prediction.numel() as f64)
}

/// Inverts the scaled corruption given an estimate of ε:
/// `x̂ = (x̃ − √(1−γ)·ε̂)/√γ`. Simple noise uses [`recover_clean_simple`].
pub fn recover_clean(noisy: &Tensor, predicted_noise: &Tensor, gamma: f64) -> Result<Tensor> {
    noisy.ensure_same_shape(predicted_noise, "predicted noise")?;
    if !unit_interval(gamma) {
        return Err(Error::invalid(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let a = gamma.sqrt();
    let b = (1.0 - gamma).sqrt();
    let data = noisy
        .data()
        .iter()
        .zip(predicted_noise.data())
        .map(|(&v, &e)| ((v as f64 - b * e as f64) / a) as f32)
        .collect();
    Tensor::new(noisy.shape(), data)
}

/// `x̂ = x̃ − σ·ε̂`.
pub fn recover_clean_simple(noisy: &Tensor, predicted_noise: &Tensor, sigma: f64) -> Result<Tensor> {
    noisy.ensure_same_shape(predicted_noise, "predicted noise")?;
    sigma_to_gamma(sigma)?;
    let data = noisy
        .data()
        .iter()
        .zip(predicted_noise.data())
        .map(|(&v, &e)| (v as f64 - sigma * e as f64) as f32)
        .collect();
    Tensor::new(noisy.shape(), data)
}

/// Inverts whichever corruption produced `sample`, element by element.
pub fn recover_sample(sample: &CorruptionSample, predicted_noise: &Tensor, spec: &NoiseSpec) -> Result<Tensor> {
    match spec.magnitude {
        Magnitude::FixedSigma(s) => recover_clean_simple(&sample.noisy, predicted_noise, s),
        _ => {
            let n = sample.noisy.shape()[0];
            let parts = (0..n)
                .map(|i| {
                    let noisy = sample.noisy.batch_item(i)?;
                    let eps = predicted_noise.batch_item(i)?;
                    recover_clean(&noisy, &eps, sample.gamma_used[i])
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&parts)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f32]) -> Tensor {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    fn sample_variance(d: &[f32]) -> f64 {
        let n = d.len() as f64;
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n;
        d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn gamma_sigma_examples() {
        assert_eq!(sigma_to_gamma(0.0).unwrap(), 1.0);
        let g = sigma_to_gamma(0.22).unwrap();
        assert!((g - 1.0 / 1.0484).abs() < 1e-15 && (0.949..=0.959).contains(&g));
        assert!((sigma_to_gamma(0.8).unwrap() - 0.60976).abs() < 1e-5);
        assert_eq!(gamma_to_sigma(1.0).unwrap(), 0.0);
        assert!((gamma_to_sigma(0.5).unwrap() - 1.0).abs() < 1e-12);
        assert!((gamma_to_sigma(0.95).unwrap() - 0.2294).abs() < 1e-4);
        assert!(sigma_to_gamma(f64::NAN).is_err());
        assert!(sigma_to_gamma(-0.1).is_err());
        assert!(gamma_to_sigma(0.0).is_err());
        assert!(gamma_to_sigma(1.01).is_err());
    }

    #[test]
    fn mismatched_pairings_rejected() {
        assert!(NoiseSpec::new(Formulation::Simple, Target::Noise, Magnitude::FixedGamma(0.9)).is_err());
        assert!(NoiseSpec::new(Formulation::Scaled, Target::Noise, Magnitude::FixedSigma(0.2)).is_err());
        assert!(NoiseSpec::new(Formulation::Simple, Target::Noise, Magnitude::UniformGamma { lo: 0.9, hi: 0.95 }).is_err());
        assert!(NoiseSpec::new(Formulation::Scaled, Target::Noise, Magnitude::UniformGamma { lo: 0.95, hi: 0.9 }).is_err());
        assert!(NoiseSpec::scaled(0.0, Target::Noise).is_err());
        assert!(NoiseSpec::simple(-1.0, Target::Noise).is_err());
    }

    #[test]
    fn injected_noise_examples() {
        let spec = NoiseSpec::simple(0.4, Target::Noise).unwrap();
        let x = t(&[1, 2], &[1.0, -1.0]);
        let s = corrupt_with(&x, &spec, t(&[1, 2], &[0.5, 0.5]), vec![0.0]).unwrap();
        assert!(s.noisy.max_abs_diff(&t(&[1, 2], &[1.2, -0.8])) < 1e-6);
        assert_eq!(denoise_target(&x, &s, &spec).unwrap().data(), &[0.5, 0.5]);

        let recovered = recover_clean(&t(&[1, 2], &[0.8, 0.6]), &t(&[1, 2], &[0.0, 1.0]), 0.64).unwrap();
        assert!(recovered.max_abs_diff(&t(&[1, 2], &[1.0, 0.0])) < 1e-6);
    }

    #[test]
    fn endpoints() {
        let x = t(&[2, 3], &[0.1, -0.2, 0.3, 1.0, 2.0, -3.0]);
        let mut r = rng::stream(0, "t");
        let s = corrupt(&x, &NoiseSpec::simple(0.0, Target::Noise).unwrap(), &mut r).unwrap();
        assert_eq!(s.noisy, x);
        let s = corrupt(&x, &NoiseSpec::scaled(1.0, Target::Noise).unwrap(), &mut r).unwrap();
        assert_eq!(s.noisy, x);
        let s = corrupt(&x, &NoiseSpec::scaled(1e-12, Target::Noise).unwrap(), &mut r).unwrap();
        assert!(s.noisy.max_abs_diff(&s.noise) < 1e-5);
        let noisy = recover_clean(&s.noisy, &Tensor::full(&[2, 3], 7.0), 1.0).unwrap();
        assert_eq!(noisy, s.noisy);
    }

    #[test]
    fn targets_are_bit_identical() {
        let x = t(&[1, 3], &[0.25, 0.5, 0.75]);
        let mut r = rng::stream(3, "t");
        let clean = NoiseSpec::scaled(0.9, Target::CleanImage).unwrap();
        let s = corrupt(&x, &clean, &mut r).unwrap();
        assert_eq!(denoise_target(&x, &s, &clean).unwrap(), x);
        let eps = NoiseSpec::scaled(0.9, Target::Noise).unwrap();
        assert_eq!(denoise_target(&x, &s, &eps).unwrap(), s.noise);
    }

    #[test]
    fn variance_properties() {
        let n = 200_000;
        let mut r = rng::stream(11, "x");
        let x = Tensor::new(&[4, n / 4], rng::standard_normal(&mut r, n)).unwrap();
        for g in [0.2, 0.5, 0.95] {
            let s = corrupt(&x, &NoiseSpec::scaled(g, Target::Noise).unwrap(), &mut r).unwrap();
            let v = sample_variance(s.noisy.data());
            assert!((v - 1.0).abs() < 0.02, "gamma {g}: {v}");
        }
        for sigma in [0.1, 0.4, 0.8] {
            let s = corrupt(&x, &NoiseSpec::simple(sigma, Target::Noise).unwrap(), &mut r).unwrap();
            let v = sample_variance(s.noisy.data());
            let want = 1.0 + sigma * sigma;
            assert!(((v - want) / want).abs() < 0.02, "sigma {sigma}: {v}");
        }
    }

    #[test]
    fn uniform_degenerate_range_matches_fixed() {
        let x = t(&[3, 4], &[0.5; 12]);
        let fixed = NoiseSpec::scaled(0.93, Target::Noise).unwrap();
        let uni =
            NoiseSpec::new(Formulation::Scaled, Target::Noise, Magnitude::UniformGamma { lo: 0.93, hi: 0.93 }).unwrap();
        let a = corrupt(&x, &fixed, &mut rng::stream(5, "u")).unwrap();
        let b = corrupt(&x, &uni, &mut rng::stream(5, "u")).unwrap();
        assert_eq!(a.noisy.to_le_bytes(), b.noisy.to_le_bytes());
        assert_eq!(a.gamma_used, b.gamma_used);
    }

    #[test]
    fn uniform_draws_per_element() {
        let x = Tensor::zeros(&[16, 2]);
        let spec =
            NoiseSpec::new(Formulation::Scaled, Target::Noise, Magnitude::UniformGamma { lo: 0.9, hi: 0.95 }).unwrap();
        let s = corrupt(&x, &spec, &mut rng::stream(1, "u")).unwrap();
        assert!(s.gamma_used.iter().all(|g| (0.9..=0.95).contains(g)));
        assert!(s.gamma_used.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn loss_examples() {
        let z = t(&[2], &[0.0, 0.0]);
        assert_eq!(denoising_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(denoising_loss(&t(&[2], &[1.0, 1.0]), &z).unwrap(), 1.0);
        assert!(denoising_loss(&z, &t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn recovery_round_trips_every_formulation() {
        let mut r = rng::stream(2, "rt");
        let x = Tensor::new(&[3, 1, 4, 4], rng::standard_normal(&mut r, 48)).unwrap();
        for spec in [
            NoiseSpec::simple(0.7, Target::Noise).unwrap(),
            NoiseSpec::scaled(0.3, Target::Noise).unwrap(),
            NoiseSpec::new(Formulation::Scaled, Target::Noise, Magnitude::UniformGamma { lo: 0.2, hi: 0.9 }).unwrap(),
        ] {
            let s = corrupt(&x, &spec, &mut r).unwrap();
            let back = recover_sample(&s, &s.noise, &spec).unwrap();
            assert!(back.max_abs_diff(&x) <= 1e-5, "{spec:?}");
        }
    }
}
