//! Planar RGB images with values in [0, 1].

use std::path::Path;

use fas_nn::kernels;
use fas_nn::Tensor;

use crate::error::{FasError, Result};

/// `3×H×W` planar float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * h * w {
            return Err(FasError::Shape(format!("{h}x{w} RGB image needs {} values, got {}", 3 * h * w, data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: f32) -> Self {
        Self { h, w, data: vec![v; 3 * h * w] }
    }

    /// Builds an image from `f(channel, y, x)`.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// `[3, H, W]` tensor view (copied).
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[3, self.h, self.w], self.data.clone()).expect("image tensor")
    }

    /// Accepts `[3,H,W]` or `[1,3,H,W]`.
    pub fn from_tensor<T: fas_nn::Float>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => return Err(FasError::Shape(format!("expected a single RGB image tensor, got {s:?}"))),
        };
        Self::new(h, w, t.data().iter().map(|v| v.to_f64() as f32).collect())
    }

    /// Stacks images of equal size into `[N, 3, H, W]`.
    pub fn batch(images: &[&Image]) -> Result<Tensor<f32>> {
        let first = images.first().ok_or_else(|| FasError::Shape("empty batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if (im.h, im.w) != (first.h, first.w) {
                return Err(FasError::Shape(format!("batch mixes {}x{} and {}x{}", first.h, first.w, im.h, im.w)));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::new(&[images.len(), 3, first.h, first.w], data)?)
    }

    /// Luminance plane (row-major `H×W`).
    pub fn luma(&self) -> Vec<f64> {
        let n = self.h * self.w;
        (0..n)
            .map(|i| LUMA[0] * self.data[i] as f64 + LUMA[1] * self.data[n + i] as f64 + LUMA[2] * self.data[2 * n + i] as f64)
            .collect()
    }

    /// Pixel window `[y0, y1) × [x0, x1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x1 > self.w || y1 > self.h || x0 >= x1 || y0 >= y1 {
            return Err(FasError::Geometry(format!(
                "window ({x0},{y0})-({x1},{y1}) outside {}x{} image",
                self.w, self.h
            )));
        }
        Ok(Self::from_fn(y1 - y0, x1 - x0, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    /// Bilinear resize (half-pixel centres).
    pub fn resize(&self, h: usize, w: usize) -> Self {
        if (h, w) == (self.h, self.w) {
            return self.clone();
        }
        let t = self.to_tensor().reshape(&[1, 3, self.h, self.w]).expect("reshape");
        let r = kernels::resize_bilinear(&t, h, w);
        Self { h, w, data: r.into_data() }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.h * self.w;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push(quantize(self.data[c * n + i]));
            }
        }
        out
    }

    pub fn from_rgb8(h: usize, w: usize, px: &[u8]) -> Result<Self> {
        if px.len() != 3 * h * w {
            return Err(FasError::Shape("rgb8 buffer size".into()));
        }
        Ok(Self::from_fn(h, w, |c, y, x| px[(y * w + x) * 3 + c] as f32 / 255.0))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_rgb8_png(path, self.w, self.h, &self.to_rgb8())
    }

    /// PNG with a `fas-provenance` text chunk.
    pub fn save_png_stamped(&self, path: &Path, stamp: &str) -> Result<()> {
        write_png(path, self.w, self.h, &self.to_rgb8(), Some(stamp))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, px) = read_png_rgb8(path)?;
        Self::from_rgb8(h, w, &px)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub const PNG_STAMP_KEY: &str = "fas-provenance";

pub fn save_rgb8_png(path: &Path, w: usize, h: usize, px: &[u8]) -> Result<()> {
    write_png(path, w, h, px, None)
}

pub fn write_png(path: &Path, w: usize, h: usize, px: &[u8], stamp: Option<&str>) -> Result<()> {
    let img_err = |m: String| FasError::Image { path: path.into(), msg: m };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| FasError::io(dir, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| FasError::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(s) = stamp {
        enc.add_text_chunk(PNG_STAMP_KEY.to_string(), s.to_string()).map_err(|e| img_err(e.to_string()))?;
    }
    let mut wr = enc.write_header().map_err(|e| img_err(e.to_string()))?;
    wr.write_image_data(px).map_err(|e| img_err(e.to_string()))?;
    wr.finish().map_err(|e| img_err(e.to_string()))
}

fn open_png(path: &Path) -> Result<png::Reader<std::io::BufReader<std::fs::File>>> {
    let file = std::fs::File::open(path).map_err(|e| FasError::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    dec.read_info().map_err(|e| FasError::Image { path: path.into(), msg: e.to_string() })
}

/// Decodes any 8/16-bit gray, gray-alpha, RGB, RGBA or palette PNG to RGB8.
pub fn read_png_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img_err = |m: String| FasError::Image { path: path.into(), msg: m };
    let mut rd = open_png(path)?;
    let size = rd.output_buffer_size().ok_or_else(|| img_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = rd.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let ch = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(img_err("unexpanded palette image".into())),
    };
    let mut out = Vec::with_capacity(w * h * 3);
    for p in buf.chunks(ch) {
        match ch {
            1 | 2 => out.extend([p[0]; 3]),
            _ => out.extend(&p[..3]),
        }
    }
    Ok((w, h, out))
}

/// The provenance text chunk of a PNG, if present.
pub fn read_png_stamp(path: &Path) -> Result<Option<String>> {
    let rd = open_png(path)?;
    Ok(rd.info().uncompressed_latin1_text.iter().find(|t| t.keyword == PNG_STAMP_KEY).map(|t| t.text.clone()))
}
