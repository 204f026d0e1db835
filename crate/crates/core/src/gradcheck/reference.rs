//! Plain double-precision loops for each graph op. These are the forward
//! functions the finite-difference oracle differentiates; they share no
//! code with the `f32` kernels they check.

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub d: Vec<f64>,
}

impl Arr {
    pub fn from(t: &Tensor) -> Self {
        Arr { shape: t.shape().to_vec(), d: t.data().iter().map(|&v| v as f64).collect() }
    }

    fn zeros(shape: &[usize]) -> Self {
        Arr { shape: shape.to_vec(), d: vec![0.0; shape.iter().product()] }
    }

    fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, hh, ww] = self.shape[..] else { panic!("rank 4 expected") };
        self.d[((n * cc + c) * hh + y) * ww + x]
    }
}

pub fn conv2d(x: &Arr, w: &Arr, b: Option<&Arr>, stride: usize, pad: usize) -> Arr {
    let [n, cin, h, wd] = x.shape[..] else { panic!() };
    let [cout, _, k, _] = w.shape[..] else { panic!() };
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Arr::zeros(&[n, cout, ho, wo]);
    let mut i = 0;
    for b_ in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.d[co]);
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at4(b_, ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out.d[i] = acc;
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn relu(x: &Arr) -> Arr {
    Arr { shape: x.shape.clone(), d: x.d.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect() }
}

pub fn group_norm(x: &Arr, gamma: &Arr, beta: &Arr, groups: usize, eps: f64) -> Arr {
    let [n, c, h, w] = x.shape[..] else { panic!() };
    let cg = c / groups;
    let mut out = Arr::zeros(&x.shape);
    for b in 0..n {
        for g in 0..groups {
            let idx: Vec<usize> = (g * cg..(g + 1) * cg)
                .flat_map(|ch| (0..h * w).map(move |p| (b * c + ch) * h * w + p))
                .collect();
            let m = idx.len() as f64;
            let mean = idx.iter().map(|&i| x.d[i]).sum::<f64>() / m;
            let var = idx.iter().map(|&i| (x.d[i] - mean).powi(2)).sum::<f64>() / m;
            for &i in &idx {
                let ch = (i / (h * w)) % c;
                out.d[i] = (x.d[i] - mean) / (var + eps).sqrt() * gamma.d[ch] + beta.d[ch];
            }
        }
    }
    out
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    Arr { shape: a.shape.clone(), d: a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect() }
}

pub fn concat_channels(a: &Arr, b: &Arr) -> Arr {
    let [n, ca, h, w] = a.shape[..] else { panic!() };
    let cb = b.shape[1];
    let mut out = Arr::zeros(&[n, ca + cb, h, w]);
    for i in 0..n {
        for ch in 0..ca + cb {
            for p in 0..h * w {
                out.d[(i * (ca + cb) + ch) * h * w + p] =
                    if ch < ca { a.d[(i * ca + ch) * h * w + p] } else { b.d[(i * cb + ch - ca) * h * w + p] };
            }
        }
    }
    out
}

pub fn upsample2x(x: &Arr) -> Arr {
    let [n, c, h, w] = x.shape[..] else { panic!() };
    let mut out = Arr::zeros(&[n, c, 2 * h, 2 * w]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.d[((b * c + ch) * 2 * h + y) * 2 * w + xx] = x.at4(b, ch, y / 2, xx / 2);
                }
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &Arr) -> Arr {
    let [n, c, h, w] = x.shape[..] else { panic!() };
    let d = (0..n * c).map(|i| x.d[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
    Arr { shape: vec![n, c], d }
}

pub fn dense(x: &Arr, w: &Arr, b: &Arr) -> Arr {
    let [n, din] = x.shape[..] else { panic!() };
    let dout = w.shape[0];
    let mut d = Vec::with_capacity(n * dout);
    for i in 0..n {
        for o in 0..dout {
            d.push(b.d[o] + (0..din).map(|j| x.d[i * din + j] * w.d[o * din + j]).sum::<f64>());
        }
    }
    Arr { shape: vec![n, dout], d }
}

pub fn self_attention(x: &Arr, wq: &Arr, wk: &Arr, wv: &Arr, wo: &Arr) -> Arr {
    let [n, c, h, w] = x.shape[..] else { panic!() };
    let p = h * w;
    let mut out = x.clone();
    let proj = |m: &Arr, tok: &[f64]| -> Vec<f64> {
        (0..c).map(|o| (0..c).map(|i| m.d[o * c + i] * tok[i]).sum()).collect()
    };
    for b in 0..n {
        let tokens: Vec<Vec<f64>> = (0..p).map(|i| (0..c).map(|ch| x.d[(b * c + ch) * p + i]).collect()).collect();
        let q: Vec<Vec<f64>> = tokens.iter().map(|t| proj(wq, t)).collect();
        let k: Vec<Vec<f64>> = tokens.iter().map(|t| proj(wk, t)).collect();
        let v: Vec<Vec<f64>> = tokens.iter().map(|t| proj(wv, t)).collect();
        for i in 0..p {
            let scores: Vec<f64> = (0..p)
                .map(|j| (0..c).map(|ch| q[i][ch] * k[j][ch]).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let o: Vec<f64> = (0..c).map(|ch| (0..p).map(|j| e[j] / z * v[j][ch]).sum()).collect();
            let y = proj(wo, &o);
            for ch in 0..c {
                out.d[(b * c + ch) * p + i] += y[ch];
            }
        }
    }
    out
}

pub fn softmax_cross_entropy(logits: &Arr, labels: &[u8], ignore: u8) -> f64 {
    let (n, c) = (logits.shape[0], logits.shape[1]);
    let p: usize = logits.shape[2..].iter().product();
    let (mut total, mut count) = (0.0, 0usize);
    for b in 0..n {
        for i in 0..p {
            let label = labels[b * p + i];
            if label == ignore {
                continue;
            }
            let z: Vec<f64> = (0..c).map(|k| logits.d[(b * c + k) * p + i]).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - z[label as usize];
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn mse(pred: &Arr, target: &Arr) -> f64 {
    pred.d.iter().zip(&target.d).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.d.len() as f64
}
