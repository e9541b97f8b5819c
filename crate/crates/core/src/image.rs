//! RGB raster buffer bridging PNG files and tensors.
//!
//! Pixels live in [-1, 1] as f64, channel-planar (CHW) so a buffer maps
//! onto a [3, H, W] tensor without shuffling. Quantization to u8 is
//! round((v+1)/2 * 255) with clamping; dequantization is the exact inverse
//! map b -> 2*b/255 - 1, so u8 -> f64 -> u8 round-trips bit-exactly.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::{resample_plane_bicubic, Tensor};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    /// Planar data: channel c at data[c * w * h ..][row * w + col].
    data: Vec<f64>,
}

impl ImageBuf {
    /// A black (v = -1) image.
    pub fn new(width: usize, height: usize) -> Result<ImageBuf> {
        if width == 0 || height == 0 {
            return Err(CoreError::invalid("image_new", "zero-sized image"));
        }
        Ok(ImageBuf {
            width,
            height,
            data: vec![-1.0; CHANNELS * width * height],
        })
    }

    pub fn from_planar(data: Vec<f64>, width: usize, height: usize) -> Result<ImageBuf> {
        if data.len() != CHANNELS * width * height {
            return Err(CoreError::invalid(
                "image_from_planar",
                format!("{} values for {width}x{height} rgb", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { op: "image_from_planar" });
        }
        Ok(ImageBuf {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; CHANNELS] {
        let plane = self.width * self.height;
        let idx = y * self.width + x;
        [self.data[idx], self.data[plane + idx], self.data[2 * plane + idx]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; CHANNELS]) {
        let plane = self.width * self.height;
        let idx = y * self.width + x;
        for (c, v) in rgb.iter().enumerate() {
            self.data[c * plane + idx] = *v;
        }
    }

    // ── Tensor bridge ───────────────────────────────────────────────

    /// Accepts [3, H, W] or [1, 3, H, W].
    pub fn from_tensor(t: &Tensor) -> Result<ImageBuf> {
        let shape = t.shape();
        let (h, w) = match shape {
            [c, h, w] if *c == CHANNELS => (*h, *w),
            [1, c, h, w] if *c == CHANNELS => (*h, *w),
            _ => {
                return Err(CoreError::invalid(
                    "image_from_tensor",
                    format!("expected [3,H,W] or [1,3,H,W], got {shape:?}"),
                ))
            }
        };
        ImageBuf::from_planar(t.to_vec(), w, h)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[CHANNELS, self.height, self.width])
            .expect("buffer data is finite")
    }

    // ── Quantization ────────────────────────────────────────────────

    /// Interleaved RGB8, row-major.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(CHANNELS * plane);
        for idx in 0..plane {
            for c in 0..CHANNELS {
                let v = (self.data[c * plane + idx] + 1.0) / 2.0 * 255.0;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn from_rgb8(rgb: &[u8], width: usize, height: usize) -> Result<ImageBuf> {
        let plane = width * height;
        if rgb.len() != CHANNELS * plane {
            return Err(CoreError::invalid(
                "image_from_rgb8",
                format!("{} bytes for {width}x{height} rgb", rgb.len()),
            ));
        }
        let mut data = vec![0.0; CHANNELS * plane];
        for idx in 0..plane {
            for c in 0..CHANNELS {
                data[c * plane + idx] = rgb[idx * CHANNELS + c] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
        Ok(ImageBuf {
            width,
            height,
            data,
        })
    }

    // ── PNG I/O ─────────────────────────────────────────────────────

    pub fn load_png(path: &Path) -> Result<ImageBuf> {
        let img = image::open(path).map_err(|e| CoreError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        ImageBuf::from_rgb8(rgb.as_raw(), w, h)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("raw buffer sized to dimensions");
        buf.save(path).map_err(|e| CoreError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    // ── Geometry ────────────────────────────────────────────────────

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<ImageBuf> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(CoreError::invalid(
                "image_crop",
                format!(
                    "crop {w}x{h}+{x}+{y} outside {}x{}",
                    self.width, self.height
                ),
            ));
        }
        let src_plane = self.width * self.height;
        let dst_plane = w * h;
        let mut data = vec![0.0; CHANNELS * dst_plane];
        for c in 0..CHANNELS {
            for row in 0..h {
                let src = c * src_plane + (y + row) * self.width + x;
                let dst = c * dst_plane + row * w;
                data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(ImageBuf {
            width: w,
            height: h,
            data,
        })
    }

    /// Copy `other` into this buffer with its top-left corner at (x, y).
    pub fn place(&mut self, other: &ImageBuf, x: usize, y: usize) -> Result<()> {
        if x + other.width > self.width || y + other.height > self.height {
            return Err(CoreError::invalid(
                "image_place",
                format!(
                    "{}x{} at +{x}+{y} overflows {}x{}",
                    other.width, other.height, self.width, self.height
                ),
            ));
        }
        let dst_plane = self.width * self.height;
        let src_plane = other.width * other.height;
        for c in 0..CHANNELS {
            for row in 0..other.height {
                let src = c * src_plane + row * other.width;
                let dst = c * dst_plane + (y + row) * self.width + x;
                self.data[dst..dst + other.width]
                    .copy_from_slice(&other.data[src..src + other.width]);
            }
        }
        Ok(())
    }

    /// Catmull-Rom resampling, channel by channel. Values may leave [-1, 1]
    /// slightly near sharp edges; they are kept as-is and only clamped at
    /// quantization time.
    pub fn resize_bicubic(&self, out_w: usize, out_h: usize) -> Result<ImageBuf> {
        if out_w == 0 || out_h == 0 {
            return Err(CoreError::invalid("image_resize", "zero output size"));
        }
        let src_plane = self.width * self.height;
        let dst_plane = out_w * out_h;
        let mut data = Vec::with_capacity(CHANNELS * dst_plane);
        for c in 0..CHANNELS {
            let plane = &self.data[c * src_plane..(c + 1) * src_plane];
            data.extend(resample_plane_bicubic(
                plane,
                self.height,
                self.width,
                out_h,
                out_w,
            ));
        }
        ImageBuf::from_planar(data, out_w, out_h)
    }
}
