use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major `f32` array with up to four axes (batch, channel,
/// height, width).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::invalid(format!("tensor rank must be 1..=4, got shape {shape:?}")));
        }
        if shape.contains(&0) {
            return Err(Error::invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {numel} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(format!("expected an NCHW tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Batch element `i` of an NCHW tensor, keeping a leading unit axis.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if i >= n {
            return Err(Error::invalid(format!("batch index {i} out of range for batch of {n}")));
        }
        let len = c * h * w;
        Tensor::new(&[1, c, h, w], self.data[i * len..(i + 1) * len].to_vec())
    }

    /// Stacks equally-shaped `1×C×H×W` (or `C×H×W`) tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let inner: Vec<usize> = match first.shape.len() {
            4 if first.shape[0] == 1 => first.shape[1..].to_vec(),
            3 => first.shape.clone(),
            _ => return Err(Error::invalid(format!("cannot stack shape {:?}", first.shape))),
        };
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.numel() != first.numel() || t.shape.len() != first.shape.len() {
                return Err(Error::invalid(format!(
                    "stack: shape mismatch {:?} vs {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(&shape, data)
    }

    /// Mirrors an NCHW tensor along the width axis.
    pub fn flip_horizontal(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let mut out = vec![0.0; self.data.len()];
        for row in 0..n * c * h {
            let base = row * w;
            for x in 0..w {
                out[base + x] = self.data[base + w - 1 - x];
            }
        }
        Tensor::new(&[n, c, h, w], out)
    }

    /// Bilinear resize of an NCHW tensor with half-pixel centers
    /// (`align_corners = false`), edges clamped.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize target must be positive"));
        }
        if out_h == h && out_w == w {
            return Ok(self.clone());
        }
        let ys = interp_taps(h, out_h);
        let xs = interp_taps(w, out_w);
        let mut out = vec![0.0f32; n * c * out_h * out_w];
        for plane in 0..n * c {
            let src = &self.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        Tensor::new(&[n, c, out_h, out_w], out)
    }

    /// Extracts columns `[x0, x0 + width)` of an NCHW tensor.
    pub fn slice_width(&self, x0: usize, width: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if x0 + width > w || width == 0 {
            return Err(Error::invalid(format!("column slice {x0}..{} outside width {w}", x0 + width)));
        }
        let mut out = Vec::with_capacity(n * c * h * width);
        for row in 0..n * c * h {
            out.extend_from_slice(&self.data[row * w + x0..row * w + x0 + width]);
        }
        Tensor::new(&[n, c, h, width], out)
    }

    /// Concatenates NCHW tensors along the width axis.
    pub fn concat_width(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let (n, c, h, _) = first.dims4()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pn, pc, ph) != (n, c, h) {
                return Err(Error::invalid(format!(
                    "width concat: shape mismatch {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            widths.push(pw);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * c * h * total);
        for row in 0..n * c * h {
            for (p, &pw) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[row * pw..(row + 1) * pw]);
            }
        }
        Tensor::new(&[n, c, h, total], out)
    }

    /// Channel argmax per pixel of an NCHW tensor; ties go to the lowest index.
    pub fn argmax_channels(&self) -> Result<Vec<u8>> {
        let (n, c, h, w) = self.dims4()?;
        if c > 255 {
            return Err(Error::invalid("argmax over more than 255 classes"));
        }
        let plane = h * w;
        let mut out = vec![0u8; n * plane];
        for b in 0..n {
            for p in 0..plane {
                let mut best = 0usize;
                let mut best_v = self.data[b * c * plane + p];
                for k in 1..c {
                    let v = self.data[(b * c + k) * plane + p];
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                out[b * plane + p] = best as u8;
            }
        }
        Ok(out)
    }

    /// Little-endian byte image of the buffer; used for checksums and files.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

fn interp_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let t = Tensor::new(&[1, 2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let f = t.flip_horizontal().unwrap();
        assert_eq!(f.data()[..3], [2.0, 1.0, 0.0]);
        assert_eq!(f.flip_horizontal().unwrap(), t);
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = Tensor::full(&[1, 1, 4, 4], 3.5);
        let up = t.resize_bilinear(7, 9).unwrap();
        assert!(up.data().iter().all(|&v| (v - 3.5).abs() < 1e-6));
        let same = t.resize_bilinear(4, 4).unwrap();
        assert_eq!(same, t);
    }

    #[test]
    fn resize_upsample_interpolates() {
        // 1x2 row [0, 1] upsampled to width 4: half-pixel centers give
        // positions -0.25, 0.25, 0.75, 1.25 -> clamped weights.
        let t = Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let up = t.resize_bilinear(1, 4).unwrap();
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in up.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{:?}", up.data());
        }
    }

    #[test]
    fn slice_and_concat_width_roundtrip() {
        let t = Tensor::new(&[1, 2, 2, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let l = t.slice_width(0, 2).unwrap();
        let r = t.slice_width(2, 2).unwrap();
        assert_eq!(Tensor::concat_width(&[l, r]).unwrap(), t);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let t = Tensor::new(&[1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(t.argmax_channels().unwrap(), vec![0, 1]);
    }
}
