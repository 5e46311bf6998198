//! Sobel magnitude maps, overlay-band spectral energy, Canny + Hough line
//! detection and simple panel figures.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{FasError, Result};
use crate::image::Image;

/// Single-channel `H×W` map.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Gray {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(FasError::Shape(format!("{h}x{w} map needs {} values, got {}", h * w, data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self { h, w, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Edge-replicated read.
    #[inline]
    fn at_clamped(&self, y: isize, x: isize) -> f64 {
        let yy = y.clamp(0, self.h as isize - 1) as usize;
        let xx = x.clamp(0, self.w as isize - 1) as usize;
        self.data[yy * self.w + xx]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// Luminance conversion with ITU-R 601 weights.
pub fn to_gray(img: &Image) -> Gray {
    Gray { h: img.height(), w: img.width(), data: img.luma() }
}

/// 3×3 Sobel responses `(gx, gy)` with edge replication.
pub fn sobel(g: &Gray) -> (Gray, Gray) {
    let mut gx = Vec::with_capacity(g.h * g.w);
    let mut gy = Vec::with_capacity(g.h * g.w);
    for y in 0..g.h as isize {
        for x in 0..g.w as isize {
            let p = |dy: isize, dx: isize| g.at_clamped(y + dy, x + dx);
            gx.push((p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1)));
            gy.push((p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1)));
        }
    }
    (Gray { h: g.h, w: g.w, data: gx }, Gray { h: g.h, w: g.w, data: gy })
}

pub fn sobel_magnitude(g: &Gray) -> Gray {
    let (gx, gy) = sobel(g);
    Gray {
        h: g.h,
        w: g.w,
        data: gx.data.iter().zip(&gy.data).map(|(a, b)| (a * a + b * b).sqrt()).collect(),
    }
}

/// Sobel magnitude of an RGB image; the luminance conversion must be
/// requested explicitly.
pub fn sobel_magnitude_rgb(img: &Image, convert_luma: bool) -> Result<Gray> {
    if !convert_luma {
        return Err(FasError::Usage("sobel_magnitude needs a single channel; enable luminance conversion".into()));
    }
    Ok(sobel_magnitude(&to_gray(img)))
}

fn fft2(g: &Gray) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::<f64>::new();
    let row: Arc<dyn rustfft::Fft<f64>> = planner.plan_fft_forward(g.w);
    let col = planner.plan_fft_forward(g.h);
    let mut buf: Vec<Complex<f64>> = g.data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for r in buf.chunks_mut(g.w) {
        row.process(r);
    }
    let mut tmp = vec![Complex::new(0.0, 0.0); g.h];
    for x in 0..g.w {
        for y in 0..g.h {
            tmp[y] = buf[y * g.w + x];
        }
        col.process(&mut tmp);
        for y in 0..g.h {
            buf[y * g.w + x] = tmp[y];
        }
    }
    buf
}

/// Signed DFT frequency of bin `k` out of `n`, in cycles per sample.
fn fftfreq(k: usize, n: usize) -> f64 {
    let k = if k <= (n - 1) / 2 { k as f64 } else { k as f64 - n as f64 };
    k / n as f64
}

/// Sum of squared spectral magnitudes of `map` over the annulus
/// `|f| ∈ [freq·(1-rel), freq·(1+rel)]`.
pub fn spectral_band_energy(map: &Gray, freq: f64, rel: f64) -> f64 {
    let spec = fft2(map);
    let (lo, hi) = (freq * (1.0 - rel), freq * (1.0 + rel));
    let mut e = 0.0;
    for y in 0..map.h {
        let fy = fftfreq(y, map.h);
        for x in 0..map.w {
            let fx = fftfreq(x, map.w);
            let r = (fx * fx + fy * fy).sqrt();
            if r >= lo && r <= hi {
                e += spec[y * map.w + x].norm_sqr();
            }
        }
    }
    e
}

pub const BAND_REL: f64 = 0.15;

/// Overlay-band energy of an image's Sobel magnitude map.
pub fn band_energy(img: &Image, freq: f64) -> f64 {
    spectral_band_energy(&sobel_magnitude(&to_gray(img)), freq, BAND_REL)
}

/// Location of the largest non-DC spectral magnitude, as `(fy, fx)` in cycles/pixel.
pub fn peak_frequency(g: &Gray) -> (f64, f64) {
    let spec = fft2(g);
    let mut best = (0.0, 0, 0);
    for y in 0..g.h {
        for x in 0..g.w {
            if x == 0 && y == 0 {
                continue;
            }
            let m = spec[y * g.w + x].norm_sqr();
            if m > best.0 {
                best = (m, y, x);
            }
        }
    }
    (fftfreq(best.1, g.h), fftfreq(best.2, g.w))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineParams {
    pub canny_low: f64,
    pub canny_high: f64,
    /// Votes needed, as a fraction of the image side.
    pub hough_threshold_frac: f64,
    pub rho_res: f64,
    pub theta_res_deg: f64,
}

impl Default for LineParams {
    fn default() -> Self {
        Self { canny_low: 50.0, canny_high: 150.0, hough_threshold_frac: 0.4, rho_res: 1.0, theta_res_deg: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Line {
    pub rho: f64,
    pub theta: f64,
    pub votes: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LineSet {
    pub lines: Vec<Line>,
    pub source_size: (usize, usize),
    pub params: LineParams,
    pub threshold_votes: u32,
}

impl LineSet {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rho,theta,votes\n");
        for l in &self.lines {
            s.push_str(&format!("{},{:.6},{}\n", l.rho, l.theta, l.votes));
        }
        s
    }
}

/// Canny edges on an 8-bit-scaled map: Sobel gradient, 4-direction
/// non-maximum suppression, 8-connected hysteresis. No pre-smoothing.
pub fn canny(g255: &Gray, low: f64, high: f64) -> Result<Vec<bool>> {
    if !(low > 0.0 && high > 0.0 && low < high) {
        return Err(FasError::Argument(format!("canny thresholds need 0 < low < high, got {low}, {high}")));
    }
    let (gx, gy) = sobel(g255);
    let (h, w) = (g255.h, g255.w);
    let mag: Vec<f64> = gx.data.iter().zip(&gy.data).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    let mut nms = vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let ang = (gy.data[i].atan2(gx.data[i]).to_degrees() + 180.0) % 180.0;
            let (n1, n2) = if !(22.5..157.5).contains(&ang) {
                (mag[i - 1], mag[i + 1])
            } else if ang < 67.5 {
                (mag[i - w + 1], mag[i + w - 1])
            } else if ang < 112.5 {
                (mag[i - w], mag[i + w])
            } else {
                (mag[i - w - 1], mag[i + w + 1])
            };
            if mag[i] >= n1 && mag[i] >= n2 {
                nms[i] = mag[i];
            }
        }
    }
    let mut edge = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| nms[i] >= high).collect();
    for &i in &stack {
        edge[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                if !edge[j] && nms[j] >= low {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    Ok(edge)
}

/// ρ–θ Hough accumulation over an edge mask with local-maximum peak picking.
pub fn hough(edges: &[bool], h: usize, w: usize, threshold: u32, rho_res: f64, theta_res_deg: f64) -> Vec<Line> {
    let n_theta = (180.0 / theta_res_deg).round() as usize;
    let diag = ((h * h + w * w) as f64).sqrt().ceil();
    let n_rho = (2.0 * diag / rho_res).round() as usize + 1;
    let offset = (diag / rho_res).round() as isize;
    let trig: Vec<(f64, f64)> = (0..n_theta)
        .map(|t| {
            let th = (t as f64 * theta_res_deg).to_radians();
            (th.cos(), th.sin())
        })
        .collect();
    let mut acc = vec![0u32; n_rho * n_theta];
    for y in 0..h {
        for x in 0..w {
            if !edges[y * w + x] {
                continue;
            }
            for (t, &(c, s)) in trig.iter().enumerate() {
                let r = ((x as f64 * c + y as f64 * s) / rho_res).round() as isize + offset;
                acc[r as usize * n_theta + t] += 1;
            }
        }
    }
    let mut lines = Vec::new();
    for r in 0..n_rho {
        for t in 0..n_theta {
            let v = acc[r * n_theta + t];
            if v < threshold || v == 0 {
                continue;
            }
            let mut is_max = true;
            'nb: for dr in -1isize..=1 {
                for dt in -1isize..=1 {
                    let (rr, tt) = (r as isize + dr, t as isize + dt);
                    if rr < 0 || tt < 0 || rr >= n_rho as isize || tt >= n_theta as isize {
                        continue;
                    }
                    if acc[rr as usize * n_theta + tt as usize] > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                lines.push(Line {
                    rho: (r as isize - offset) as f64 * rho_res,
                    theta: (t as f64 * theta_res_deg).to_radians(),
                    votes: v,
                });
            }
        }
    }
    lines
}

/// Canny + Hough on a luminance map in [0, 1].
pub fn detect_lines(g: &Gray, p: &LineParams) -> Result<LineSet> {
    if p.hough_threshold_frac <= 0.0 || p.rho_res <= 0.0 || p.theta_res_deg <= 0.0 {
        return Err(FasError::Argument("hough parameters must be positive".into()));
    }
    let g255 = Gray { h: g.h, w: g.w, data: g.data.iter().map(|v| v * 255.0).collect() };
    let edges = canny(&g255, p.canny_low, p.canny_high)?;
    let thr = (p.hough_threshold_frac * g.h.min(g.w) as f64).ceil() as u32;
    let lines = hough(&edges, g.h, g.w, thr, p.rho_res, p.theta_res_deg);
    Ok(LineSet { lines, source_size: (g.h, g.w), params: *p, threshold_votes: thr })
}

pub fn count_lines(img: &Image, p: &LineParams) -> Result<usize> {
    Ok(detect_lines(&to_gray(img), p)?.len())
}

// ---------------------------------------------------------------------------
// Figures

pub enum PanelContent {
    Rgb(Image),
    /// Rendered in gray levels after dividing by the map maximum.
    Map(Gray),
}

pub struct Panel {
    pub title: String,
    pub content: PanelContent,
}

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
const MIN_PANEL: usize = 128;
const GUTTER: usize = 6;
const TITLE_H: usize = GLYPH_H * 2 + 6;

/// Lays out panels left to right, titles above, on a white background.
/// `stamp` goes into the PNG text metadata.
pub fn emit_figure(panels: &[Panel], path: &Path, stamp: Option<&str>) -> Result<()> {
    let (w, h, px) = render_figure(panels)?;
    crate::image::write_png(path, w, h, &px, stamp)
}

pub fn render_figure(panels: &[Panel]) -> Result<(usize, usize, Vec<u8>)> {
    if panels.is_empty() {
        return Err(FasError::Argument("figure needs at least one panel".into()));
    }
    let dims: Vec<(usize, usize)> = panels
        .iter()
        .map(|p| match &p.content {
            PanelContent::Rgb(i) => (i.height(), i.width()),
            PanelContent::Map(g) => (g.h, g.w),
        })
        .collect();
    let scale = dims.iter().map(|&(h, w)| MIN_PANEL.div_ceil(h.min(w).max(1))).max().unwrap_or(1).max(1);
    let cell_h = dims.iter().map(|d| d.0 * scale).max().unwrap_or(0);
    let width = GUTTER + dims.iter().map(|d| d.1 * scale + GUTTER).sum::<usize>();
    let height = GUTTER + TITLE_H + cell_h + GUTTER;
    let mut px = vec![255u8; width * height * 3];
    let mut x0 = GUTTER;
    for (p, &(ph, pw)) in panels.iter().zip(&dims) {
        draw_text(&mut px, width, x0, GUTTER, &p.title, 2);
        let top = GUTTER + TITLE_H;
        let norm = match &p.content {
            PanelContent::Map(g) => g.max(),
            _ => 1.0,
        };
        for y in 0..ph * scale {
            for x in 0..pw * scale {
                let (sy, sx) = (y / scale, x / scale);
                let rgb = match &p.content {
                    PanelContent::Rgb(i) => [0, 1, 2].map(|c| crate::image::quantize(i.get(c, sy, sx))),
                    PanelContent::Map(g) => {
                        let v = if norm > 0.0 { g.at(sy, sx) / norm } else { 0.0 };
                        [crate::image::quantize(v as f32); 3]
                    }
                };
                let o = ((top + y) * width + x0 + x) * 3;
                px[o..o + 3].copy_from_slice(&rgb);
            }
        }
        x0 += pw * scale + GUTTER;
    }
    Ok((width, height, px))
}

fn draw_text(px: &mut [u8], width: usize, x0: usize, y0: usize, text: &str, scale: usize) {
    let height = px.len() / 3 / width;
    let mut x = x0;
    for ch in text.chars() {
        let g = glyph(ch);
        for (r, bits) in g.iter().enumerate() {
            for c in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - c) & 1 == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let (yy, xx) = (y0 + r * scale + dy, x + c * scale + dx);
                        if yy < height && xx < width {
                            let o = (yy * width + xx) * 3;
                            px[o..o + 3].copy_from_slice(&[0, 0, 0]);
                        }
                    }
                }
            }
        }
        x += (GLYPH_W + 1) * scale;
    }
}

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        ' ' => [0; 7],
        'A' => [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'B' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'D' => [0b11110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11110],
        'E' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
        'F' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
        'G' => [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
        'H' => [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'I' => [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'J' => [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
        'K' => [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        'N' => [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001],
        'O' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'P' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
        'Q' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'V' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'W' => [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
        'X' => [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
        'Y' => [0b10001, 0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100],
        'Z' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        '-' => [0, 0, 0, 0b11111, 0, 0, 0],
        '.' => [0, 0, 0, 0, 0, 0b01100, 0b01100],
        ':' => [0, 0b01100, 0b01100, 0, 0b01100, 0b01100, 0],
        '_' => [0, 0, 0, 0, 0, 0, 0b11111],
        '/' => [0, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0],
        '(' => [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010],
        ')' => [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000],
        '=' => [0, 0, 0b11111, 0, 0b11111, 0, 0],
        '+' => [0, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0],
        '%' => [0b11000, 0b11001, 0b00010, 0b00100, 0b01000, 0b10011, 0b00011],
        _ => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0, 0b00100],
    }
}
