//! Dense NCHW `f32` tensors.
//!
//! Every tensor is four-dimensional. Vectors are stored as `[n, c, 1, 1]`
//! and convolution weights as `[out, in, k, k]`, which keeps every kernel
//! in this crate working on a single layout.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn full(dims: [usize; 4], value: f32) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// Panics when `data.len()` disagrees with `dims`.
    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match dims {dims:?}"
        );
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    /// Elements in one `[c, h, w]` sample.
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let plane = self.plane_len();
        let start = (n * self.dims[1] + c) * plane;
        &self.data[start..start + plane]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let plane = self.plane_len();
        let start = (n * self.dims[1] + c) * plane;
        &mut self.data[start..start + plane]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, cc, hh, ww] = self.dims;
        self.data[((n * cc + c) * hh + y) * ww + x]
    }

    /// Reinterpret the same buffer under new dims of equal volume.
    pub fn reshape(mut self, dims: [usize; 4]) -> Self {
        assert_eq!(dims.iter().product::<usize>(), self.data.len());
        self.dims = dims;
        self
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.dims, other.dims, "add_assign dims mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Stack samples along the batch axis; all parts must share `[c, h, w]`.
    pub fn stack(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "cannot stack zero tensors");
        let [_, c, h, w] = parts[0].dims;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for part in parts {
            assert_eq!(&part.dims[1..], &[c, h, w], "stack dims mismatch");
            data.extend_from_slice(&part.data);
            n += part.dims[0];
        }
        Tensor::from_vec([n, c, h, w], data)
    }

    /// Extract samples `range` along the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let len = self.sample_len();
        Tensor::from_vec(
            [end - start, self.dims[1], self.dims[2], self.dims[3]],
            self.data[start * len..end * len].to_vec(),
        )
    }

    /// Select channels `[start, end)` from every sample.
    pub fn slice_channels(&self, start: usize, end: usize) -> Tensor {
        let [n, c, h, w] = self.dims;
        assert!(start <= end && end <= c);
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (end - start) * plane);
        for s in 0..n {
            let base = s * c * plane;
            out.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Tensor::from_vec([n, end - start, h, w], out)
    }

    /// FNV-1a over the raw bit patterns; used to compare parameter states.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                hash ^= u64::from(b);
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        hash
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Bilinear resize of every plane to `[out_h, out_w]` (align-corners off).
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = t.dims();
    if h == out_h && w == out_w {
        return t.clone();
    }
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let taps = |o: usize, scale: f32, size: usize| {
        let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(size - 1);
        let i1 = (i0 + 1).min(size - 1);
        (i0, i1, src - i0 as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|y| taps(y, sy, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, w)).collect();
    for s in 0..n {
        for ch in 0..c {
            let src = t.plane(s, ch).to_vec();
            let dst = out.plane_mut(s, ch);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour resize; keeps binary masks binary.
pub fn resize_nearest(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = t.dims();
    if h == out_h && w == out_w {
        return t.clone();
    }
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for s in 0..n {
        for ch in 0..c {
            let src = t.plane(s, ch).to_vec();
            let dst = out.plane_mut(s, ch);
            for oy in 0..out_h {
                let y = (oy * h / out_h).min(h - 1);
                for ox in 0..out_w {
                    let x = (ox * w / out_w).min(w - 1);
                    dst[oy * out_w + ox] = src[y * w + x];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_channels_picks_planes() {
        let t = Tensor::from_vec([2, 3, 1, 2], (0..12).map(|v| v as f32).collect());
        let s = t.slice_channels(1, 3);
        assert_eq!(s.dims(), [2, 2, 1, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = Tensor::full([1, 2, 4, 4], 0.25);
        assert_eq!(resize_bilinear(&t, 4, 4), t);
        let up = resize_bilinear(&t, 8, 6);
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn nearest_keeps_binary_values() {
        let t = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let up = resize_nearest(&t, 4, 4);
        assert!(up.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(up.at(0, 0, 0, 3), 1.0);
    }
}
