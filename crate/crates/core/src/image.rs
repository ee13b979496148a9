//! 8-bit RGB images and their PNG container.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width * 3] }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// `[1, 3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = self.get(y, x);
                for c in 0..3 {
                    out[c * h * w + y * w + x] = px[c] as f64 / 255.0;
                }
            }
        }
        Tensor::from_vec(&[1, 3, h, w], out).expect("image tensor")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor) for a single-image batch;
    /// values are clamped and rounded.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (b, c, h, w) = t.dims4();
        if b != 1 || c != 3 {
            return Err(Error::Shape(format!("expected [1, 3, H, W], got {:?}", t.shape())));
        }
        let mut img = RgbImage::new(h, w);
        let d = t.data();
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for (ch, p) in px.iter_mut().enumerate() {
                    *p = (d[ch * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                img.set(y, x, px);
            }
        }
        Ok(img)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Sub-rectangle `[y0, y1) x [x0, x1)`.
    pub fn crop(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        let mut out = RgbImage::new(y1 - y0, x1 - x0);
        for y in y0..y1 {
            for x in x0..x1 {
                out.set(y - y0, x - x0, self.get(y, x));
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let mut out = RgbImage::new(height, width);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                let mut px = [0u8; 3];
                for (c, p) in px.iter_mut().enumerate() {
                    let v = |yy: usize, xx: usize| self.get(yy, xx)[c] as f64;
                    let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
                    let bot = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
                    *p = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
                }
                out.set(y, x, px);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Data(format!("png header {}: {e}", path.display())))?;
        writer.write_image_data(&self.data).map_err(|e| Error::Data(format!("png write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(std::io::BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::Data(format!("png {}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Data(format!("png {}: {e}", path.display())))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let buf = &buf[..info.buffer_size()];
        let data = match info.color_type {
            png::ColorType::Rgb => buf.to_vec(),
            png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(Error::Data(format!("unsupported png color type {other:?}"))),
        };
        Ok(Self { height: h, width: w, data })
    }
}
