//! RGB images in `[0, 1]`, bilinear resizing, PNG I/O and patch tokenization.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const MIN_SIDE: usize = 8;

/// `height x width x 3`, row-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Image(format!("image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Image(format!("expected {} values, got {}", height * width * 3, data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Image(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(ImageTensor { height, width, data })
    }

    /// Builds an image by clamping arbitrary finite values into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite pixel value".into()));
        }
        Self::new(height, width, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data).expect("valid fill")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.height, self.width, self.data.iter().map(|v| f(*v)).collect())
    }

    /// Bilinear resize with corner-aligned sampling: output pixel `(i, j)`
    /// samples input coordinate `(i * (H_in - 1) / (H_out - 1), j * (W_in - 1) / (W_out - 1))`
    /// (coordinate 0 when the output side is 1), interpolating the four
    /// neighbouring input pixels.
    pub fn resize(&self, out_h: usize, out_w: usize) -> ImageTensor {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let mut out = vec![0f32; out_h * out_w * 3];
        let ratio = |inp: usize, outp: usize| if outp > 1 { (inp - 1) as f64 / (outp - 1) as f64 } else { 0.0 };
        let ry = ratio(self.height, out_h);
        let rx = ratio(self.width, out_w);
        for i in 0..out_h {
            let sy = i as f64 * ry;
            let y0 = (sy.floor() as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = (sy - y0 as f64) as f32;
            for j in 0..out_w {
                let sx = j as f64 * rx;
                let x0 = (sx.floor() as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = (sx - x0 as f64) as f32;
                for c in 0..3 {
                    let p = |y: usize, x: usize| self.data[(y * self.width + x) * 3 + c];
                    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                    out[(i * out_w + j) * 3 + c] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
                }
            }
        }
        ImageTensor { height: out_h, width: out_w, data: out }
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<ImageTensor> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::Image(format!("cannot downsample {}x{} by {factor}", self.height, self.width)));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = vec![0f32; h * w * 3];
        let inv = 1.0 / (factor * factor) as f32;
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out[((y / factor) * w + x / factor) * 3 + c] += self.data[(y * self.width + x) * 3 + c] * inv;
                }
            }
        }
        ImageTensor::from_clamped(h, w, out)
    }

    /// The `k x k` grid of equal non-overlapping regions, in row-major order.
    pub fn regions(&self, k: usize) -> Result<Vec<ImageTensor>> {
        if k == 0 || !self.height.is_multiple_of(k) || !self.width.is_multiple_of(k) {
            return Err(Error::InvalidInput(format!(
                "image {}x{} cannot be split into a {k}x{k} grid",
                self.height, self.width
            )));
        }
        let (rh, rw) = (self.height / k, self.width / k);
        let mut out = Vec::with_capacity(k * k);
        for gy in 0..k {
            for gx in 0..k {
                let mut data = Vec::with_capacity(rh * rw * 3);
                for y in gy * rh..(gy + 1) * rh {
                    let start = (y * self.width + gx * rw) * 3;
                    data.extend_from_slice(&self.data[start..start + rw * 3]);
                }
                out.push(ImageTensor::new(rh, rw, data)?);
            }
        }
        Ok(out)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|b| *b as f32 / 255.0).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer.write_image_data(&self.to_rgb8()).map_err(|e| Error::Image(e.to_string()))?;
        writer.finish().map_err(|e| Error::Image(e.to_string()))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(std::io::BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Image("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => bytes.to_vec(),
            png::ColorType::Rgba => bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => bytes.iter().flat_map(|g| [*g, *g, *g]).collect(),
            png::ColorType::GrayscaleAlpha => bytes.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(Error::Image(format!("unsupported PNG color type {other:?}"))),
        };
        Self::from_rgb8(h, w, &rgb)
    }

    /// Horizontal concatenation of equal-height images (for sample grids).
    pub fn hstack(images: &[ImageTensor]) -> Result<ImageTensor> {
        let h = images.first().ok_or_else(|| Error::Image("empty stack".into()))?.height;
        if images.iter().any(|i| i.height != h) {
            return Err(Error::Image("hstack needs equal heights".into()));
        }
        let w: usize = images.iter().map(|i| i.width).sum();
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for im in images {
                data.extend_from_slice(&im.data[y * im.width * 3..(y + 1) * im.width * 3]);
            }
        }
        ImageTensor::new(h, w, data)
    }

    pub fn vstack(images: &[ImageTensor]) -> Result<ImageTensor> {
        let w = images.first().ok_or_else(|| Error::Image("empty stack".into()))?.width;
        if images.iter().any(|i| i.width != w) {
            return Err(Error::Image("vstack needs equal widths".into()));
        }
        let h = images.iter().map(|i| i.height).sum();
        let data = images.iter().flat_map(|i| i.data.iter().copied()).collect();
        ImageTensor::new(h, w, data)
    }
}

/// Splits an `H x W x 3` pixel array into `(H/p)(W/p)` tokens of width
/// `p * p * 3`, ordered row-major over patches and `(py, px, channel)` inside.
pub fn patchify<F: Float>(pixels: &[F], height: usize, width: usize, patch: usize) -> Tensor<F> {
    assert!(height.is_multiple_of(patch) && width.is_multiple_of(patch), "{height}x{width} not divisible by patch {patch}");
    let (gh, gw) = (height / patch, width / patch);
    let pd = patch * patch * 3;
    let mut out = Vec::with_capacity(gh * gw * pd);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * width + gx * patch) * 3;
                out.extend_from_slice(&pixels[start..start + patch * 3]);
            }
        }
    }
    Tensor::matrix(gh * gw, pd, out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<F: Float>(tokens: &[F], height: usize, width: usize, patch: usize) -> Vec<F> {
    let (gh, gw) = (height / patch, width / patch);
    assert_eq!(tokens.len(), height * width * 3);
    let mut out = vec![F::zero(); height * width * 3];
    let mut k = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * width + gx * patch) * 3;
                out[start..start + patch * 3].copy_from_slice(&tokens[k..k + patch * 3]);
                k += patch * 3;
            }
        }
    }
    out
}
