//! Pixel containers.
//!
//! [`ImagePatch`] stores `height × width × channels` samples interleaved in
//! row-major HWC order, the same order 8-bit PNG rows use. Network code works
//! on NCHW tensors; the conversions live here.

use std::path::Path;

use guidnoise_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

/// A noisy/clean pair whose residual carries the noise distribution to imitate.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidancePair {
    pub noisy: ImagePatch,
    pub clean: ImagePatch,
}

impl GuidancePair {
    pub fn new(noisy: ImagePatch, clean: ImagePatch) -> Result<Self> {
        if noisy.shape() != clean.shape() {
            return Err(Error::shape(clean.shape(), noisy.shape()));
        }
        Ok(Self { noisy, clean })
    }

    pub fn residual(&self) -> Vec<f32> {
        self.noisy.residual(&self.clean).expect("shapes checked at construction")
    }
}

impl ImagePatch {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height * width * channels != data.len() || height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape((height, width, channels), data.len()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
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

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(
                (self.height, self.width),
                (top, left, height, width),
            ));
        }
        Ok(Self::from_fn(height, width, self.channels, |y, x, c| {
            self.get(top + y, left + x, c)
        }))
    }

    /// Replicate-pads to at least `height × width`, keeping the content at the top-left.
    pub fn pad_to(&self, height: usize, width: usize) -> Self {
        let h = height.max(self.height);
        let w = width.max(self.width);
        Self::from_fn(h, w, self.channels, |y, x, c| {
            self.get(y.min(self.height - 1), x.min(self.width - 1), c)
        })
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// `self - clean`, elementwise.
    pub fn residual(&self, clean: &ImagePatch) -> Result<Vec<f32>> {
        if self.shape() != clean.shape() {
            return Err(Error::shape(clean.shape(), self.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&clean.data)
            .map(|(a, b)| a - b)
            .collect())
    }

    /// Rounds to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantize_u8(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
        out
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Self::batch_to_tensor(&[self])
    }

    /// `[B, C, H, W]` tensor from equally shaped patches.
    pub fn batch_to_tensor(patches: &[&ImagePatch]) -> Result<Tensor> {
        let first = patches.first().ok_or(Error::Empty("patch batch"))?;
        let (h, w, c) = first.shape();
        let mut out = Vec::with_capacity(patches.len() * h * w * c);
        for p in patches {
            if p.shape() != (h, w, c) {
                return Err(Error::shape((h, w, c), p.shape()));
            }
            for ch in 0..c {
                out.extend((0..h * w).map(|i| p.data[i * c + ch]));
            }
        }
        Ok(Tensor::new(out, &[patches.len(), c, h, w])?)
    }

    /// Splits a `[B, C, H, W]` (or `[C, H, W]`) tensor into patches.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<ImagePatch>> {
        let t = if t.rank() == 3 {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.reshape(&s)?
        } else {
            t.clone()
        };
        let (b, c, h, w) = t.dims4()?;
        let flat = t.data();
        let plane = h * w;
        Ok((0..b)
            .map(|i| {
                let base = i * c * plane;
                let mut data = vec![0f32; c * plane];
                for ch in 0..c {
                    for p in 0..plane {
                        data[p * c + ch] = flat[base + ch * plane + p];
                    }
                }
                ImagePatch {
                    height: h,
                    width: w,
                    channels: c,
                    data,
                }
            })
            .collect())
    }

    pub fn from_tensor(t: &Tensor) -> Result<ImagePatch> {
        let mut v = Self::batch_from_tensor(t)?;
        if v.len() != 1 {
            return Err(Error::shape("batch of 1", v.len()));
        }
        Ok(v.remove(0))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, 3, data)
    }

    /// Writes an 8-bit RGB PNG. Single-channel patches are replicated to RGB.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut raw = Vec::with_capacity(self.height * self.width * 3);
        for i in 0..self.height * self.width {
            for c in 0..3 {
                let ch = if self.channels == 1 { 0 } else { c.min(self.channels - 1) };
                raw.push(to_u8(self.data[i * self.channels + ch]));
            }
        }
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer sized from dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Little-endian f32 sidecar: u32 height, u32 width, u32 channels, then HWC samples.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(12 + self.data.len() * 4);
        for d in [self.height, self.width, self.channels] {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_raw(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_raw(&bytes).map_err(|msg| Error::Dataset {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn decode_raw(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 {
            return Err("raw sidecar shorter than its header".into());
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or("raw sidecar dimensions overflow")?;
        if n == 0 || bytes.len() - 12 != n * 4 {
            return Err(format!("raw sidecar payload does not match {h}x{w}x{c}"));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(h, w, c, data).map_err(|e| e.to_string())
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_layout_round_trip() {
        let p = ImagePatch::from_fn(3, 4, 3, |y, x, c| (y * 100 + x * 10 + c) as f32);
        let t = p.to_tensor().unwrap();
        assert_eq!(t.shape(), &[1, 3, 3, 4]);
        let v = t.data()[(2 * 3 + 1) * 4 + 3];
        assert_eq!(v, 132.0);
        assert_eq!(ImagePatch::from_tensor(&t).unwrap(), p);
    }

    #[test]
    fn png_round_trip_is_lossless_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = ImagePatch::from_fn(5, 7, 3, |y, x, c| ((y * 31 + x * 7 + c * 13) % 256) as f32 / 255.0);
        let path = dir.path().join("a.png");
        p.write_png(&path).unwrap();
        let q = ImagePatch::read_png(&path).unwrap();
        assert_eq!(q, p.quantize_u8());
        assert_eq!(q, p);
    }

    #[test]
    fn raw_sidecar_rejects_truncation() {
        let p = ImagePatch::filled(2, 2, 3, 0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.f32");
        p.write_raw(&path).unwrap();
        assert_eq!(ImagePatch::read_raw(&path).unwrap(), p);
        let bytes = std::fs::read(&path).unwrap();
        assert!(ImagePatch::decode_raw(&bytes[..bytes.len() - 1]).is_err());
        assert!(ImagePatch::decode_raw(&bytes[..5]).is_err());
    }

    #[test]
    fn crop_bounds() {
        let p = ImagePatch::filled(4, 4, 1, 0.0);
        assert!(p.crop(2, 2, 3, 1).is_err());
        assert_eq!(p.crop(1, 1, 3, 3).unwrap().shape(), (3, 3, 1));
    }
}
