//! Planar RGB images with values in `[0, 1]`.

use crate::tensor::Tensor;

/// Channel-major (`[C, H, W]`) image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image buffer size");
        Image {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Rounds to the nearest 8-bit level so the image survives PPM storage.
    pub fn quantize8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn crop(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> Image {
        assert!(top + size_h <= self.height && left + size_w <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(self.channels * size_h * size_w);
        for c in 0..self.channels {
            for y in top..top + size_h {
                let start = (c * self.height + y) * self.width + left;
                data.extend_from_slice(&self.data[start..start + size_w]);
            }
        }
        Image::new(self.channels, size_h, size_w, data)
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Image {
        assert!(factor >= 1);
        let (h, w) = (self.height / factor, self.width / factor);
        let area = (factor * factor) as f64;
        let mut out = Image::filled(self.channels, h, w, 0.0);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(c, y * factor + dy, x * factor + dx);
                        }
                    }
                    out.set(c, y, x, acc / area);
                }
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        let mut out = Image::filled(self.channels, height, width, 0.0);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let coord = |dst: usize, scale: f64, n: usize| -> (usize, usize, f64) {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, src - lo as f64)
        };
        for y in 0..height {
            let (y0, y1, fy) = coord(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, sx, self.width);
                for c in 0..self.channels {
                    let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
                    let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
                    out.set(c, y, x, top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        out
    }

    /// Separable `[1, 2, 1] / 4` blur mixed with the original by `strength`.
    pub fn blur3(&self, strength: f64) -> Image {
        if strength == 0.0 {
            return self.clone();
        }
        let k = [0.25, 0.5, 0.25];
        let (h, w) = (self.height, self.width);
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (dy, ky) in k.iter().enumerate() {
                        let yy = (y + dy).saturating_sub(1).min(h - 1);
                        for (dx, kx) in k.iter().enumerate() {
                            let xx = (x + dx).saturating_sub(1).min(w - 1);
                            acc += ky * kx * self.get(c, yy, xx);
                        }
                    }
                    let v = self.get(c, y, x);
                    out.set(c, y, x, (1.0 - strength) * v + strength * acc);
                }
            }
        }
        out
    }

    /// Mean absolute 4-neighbour Laplacian over interior pixels: a proxy for
    /// high-frequency energy.
    pub fn laplacian_energy(&self) -> f64 {
        let (h, w) = (self.height, self.width);
        if h < 3 || w < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for c in 0..self.channels {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let lap = 4.0 * self.get(c, y, x)
                        - self.get(c, y - 1, x)
                        - self.get(c, y + 1, x)
                        - self.get(c, y, x - 1)
                        - self.get(c, y, x + 1);
                    acc += lap.abs();
                }
            }
        }
        acc / (self.channels * (h - 2) * (w - 2)) as f64
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }
}

/// Stacks equally sized images into a `[N, C, H, W]` tensor.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    let mut dims = None;
    for img in images {
        let d = (img.channels, img.height, img.width);
        assert!(dims.is_none_or(|prev| prev == d), "images in a batch must share a shape");
        dims = Some(d);
        data.extend_from_slice(&img.data);
        n += 1;
    }
    let (c, h, w) = dims.expect("batch must not be empty");
    Tensor::new(vec![n, c, h, w], data).expect("consistent batch")
}
