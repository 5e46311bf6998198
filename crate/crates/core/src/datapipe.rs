//! Manifests, face cropping, patch extraction, set merging and the
//! procedural moiré benchmark.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{FasError, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Live,
    Attack,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Live => 0,
            Label::Attack => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Live),
            1 => Some(Label::Attack),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Live => "live",
            Label::Attack => "attack",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "live" => Some(Label::Live),
            "attack" => Some(Label::Attack),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Synthesized,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Synthesized => "synthesized",
        }
    }
}

/// Face bounding box in pixels (`x`, `y` may be negative for boxes hanging off the frame).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    pub image: Image,
    pub label: Label,
    pub domain: String,
    pub attack_type: Option<String>,
    pub identity: Option<String>,
    pub provenance: Provenance,
    pub bbox: Option<BBox>,
}

impl FaceSample {
    pub fn new(image: Image, label: Label, domain: &str) -> Self {
        Self {
            image,
            label,
            domain: domain.to_string(),
            attack_type: None,
            identity: None,
            provenance: Provenance::Original,
            bbox: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub domain: String,
    pub attack_type: Option<String>,
    pub identity: Option<String>,
    pub provenance: Provenance,
    pub bbox: Option<BBox>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub live: usize,
    pub attack: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(name: &str, root: impl Into<PathBuf>) -> Self {
        Self { name: name.to_string(), root: root.into(), entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn label_counts(&self) -> LabelCounts {
        let mut c = LabelCounts::default();
        for e in &self.entries {
            match e.label {
                Label::Live => c.live += 1,
                Label::Attack => c.attack += 1,
            }
        }
        c
    }

    pub fn domain_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.domain.clone()).or_insert(0) += 1;
        }
        m
    }

    /// Entries whose domain is in `domains`, order kept.
    pub fn filter_domains(&self, domains: &[String]) -> Self {
        Self {
            name: self.name.clone(),
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| domains.contains(&e.domain)).cloned().collect(),
        }
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        if e.path.is_absolute() {
            e.path.clone()
        } else {
            self.root.join(&e.path)
        }
    }

    /// Reads every image (in parallel) and returns samples in manifest order.
    pub fn load_samples(&self) -> Result<Vec<FaceSample>> {
        let out = fas_nn::par::map_indexed(self.entries.len(), |i| {
            let e = &self.entries[i];
            let image = Image::load_png(&self.resolve(e))?;
            Ok(FaceSample {
                image,
                label: e.label,
                domain: e.domain.clone(),
                attack_type: e.attack_type.clone(),
                identity: e.identity.clone(),
                provenance: e.provenance,
                bbox: e.bbox,
            })
        });
        out.into_iter().collect()
    }

    /// Serialised form. `header` lines are written as `# ` comments.
    pub fn to_text(&self, header: &[String]) -> String {
        let mut s = String::new();
        for h in header {
            let _ = writeln!(s, "# {h}");
        }
        let opt = |o: &Option<String>| o.clone().unwrap_or_else(|| "-".into());
        for e in &self.entries {
            let bbox = match e.bbox {
                Some(b) => format!("{}\t{}\t{}\t{}", b.x, b.y, b.w, b.h),
                None => "-\t-\t-\t-".into(),
            };
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.path.display(),
                e.label.as_str(),
                e.domain,
                opt(&e.attack_type),
                opt(&e.identity),
                e.provenance.as_str(),
                bbox
            );
        }
        s
    }

    pub fn write(&self, path: &Path, header: &[String]) -> Result<()> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d).map_err(|e| FasError::io(d, e))?;
        }
        std::fs::write(path, self.to_text(header)).map_err(|e| FasError::io(path, e))
    }
}

/// Parses a manifest file; image paths are resolved relative to its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| FasError::io(path, e))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    // Absolute, so entries stay resolvable after merging manifests from different places.
    let root = std::path::absolute(&dir).unwrap_or(dir);
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_manifest(&text, path, &name, root)
}

pub fn parse_manifest(text: &str, path: &Path, name: &str, root: PathBuf) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::new(name, root);
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let err = |msg: String| FasError::Parse { path: path.into(), line: ln, msg };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 && f.len() != 7 {
            return Err(err(format!("expected 10 tab-separated fields, found {}", f.len())));
        }
        let label = Label::parse(f[1]).ok_or_else(|| FasError::Label {
            path: path.into(),
            line: ln,
            label: f[1].to_string(),
        })?;
        let opt = |s: &str| if s == "-" { None } else { Some(s.to_string()) };
        let provenance = match f[5] {
            "original" => Provenance::Original,
            "synthesized" => Provenance::Synthesized,
            other => return Err(err(format!("unknown provenance `{other}`"))),
        };
        let bbox = if f.len() == 7 || f[6..].iter().all(|s| *s == "-") {
            if f.len() == 7 && f[6] != "-" {
                return Err(err("bbox needs four fields".into()));
            }
            None
        } else {
            let mut v = [0i64; 4];
            for (k, s) in f[6..10].iter().enumerate() {
                v[k] = s.parse().map_err(|_| err(format!("bad bbox value `{s}`")))?;
            }
            if v[2] <= 0 || v[3] <= 0 {
                return Err(err("bbox width and height must be positive".into()));
            }
            Some(BBox { x: v[0], y: v[1], w: v[2], h: v[3] })
        };
        if f[0].is_empty() {
            return Err(err("empty path".into()));
        }
        if !seen.insert(f[0].to_string()) {
            return Err(err(format!("duplicate path `{}`", f[0])));
        }
        m.entries.push(ManifestEntry {
            path: PathBuf::from(f[0]),
            label,
            domain: f[2].to_string(),
            attack_type: opt(f[3]),
            identity: opt(f[4]),
            provenance,
            bbox,
        });
    }
    Ok(m)
}

/// Padded square region around `b` in continuous pixel coordinates
/// `(x0, y0, x1, y1)`, before clipping.
pub fn padded_region(b: BBox, padding: f64) -> (f64, f64, f64, f64) {
    let m = b.w.max(b.h) as f64 * padding;
    let (x0, y0) = (b.x as f64 - m, b.y as f64 - m);
    let (x1, y1) = ((b.x + b.w) as f64 + m, (b.y + b.h) as f64 + m);
    let side = (x1 - x0).max(y1 - y0);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    (cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0)
}

/// Integer window of the padded region clipped to a `w×h` image.
pub fn clipped_region(b: BBox, padding: f64, w: usize, h: usize) -> Result<(usize, usize, usize, usize)> {
    if b.x >= w as i64 || b.y >= h as i64 || b.x + b.w <= 0 || b.y + b.h <= 0 {
        return Err(FasError::Geometry(format!("bbox {b:?} lies outside the {w}x{h} image")));
    }
    let (x0, y0, x1, y1) = padded_region(b, padding);
    let cx0 = x0.floor().max(0.0) as usize;
    let cy0 = y0.floor().max(0.0) as usize;
    let cx1 = (x1.ceil() as i64).clamp(0, w as i64) as usize;
    let cy1 = (y1.ceil() as i64).clamp(0, h as i64) as usize;
    Ok((cx0, cy0, cx1, cy1))
}

pub fn crop_face(sample: &FaceSample, padding: f64, output_size: usize) -> Result<FaceSample> {
    let b = sample.bbox.ok_or_else(|| FasError::Precondition("crop_face needs a bbox".into()))?;
    if padding.is_nan() || padding < 0.0 {
        return Err(FasError::Precondition(format!("padding must be >= 0, got {padding}")));
    }
    let (x0, y0, x1, y1) = clipped_region(b, padding, sample.image.width(), sample.image.height())?;
    let img = sample.image.crop(x0, y0, x1, y1)?.resize(output_size, output_size);
    let mut out = sample.clone();
    out.image = img;
    out.bbox = None;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropStrategy {
    Random,
    Center,
    LeftUp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    pub strategy: CropStrategy,
    pub scale_min: f64,
    pub scale_max: f64,
    pub output_size: usize,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self { strategy: CropStrategy::Random, scale_min: 0.2, scale_max: 1.0, output_size: 224 }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |s: f64| s > 0.0 && s <= 1.0;
        if !ok(self.scale_min) || !ok(self.scale_max) || self.scale_min > self.scale_max {
            return Err(FasError::Config(format!(
                "crop scales must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if self.output_size == 0 {
            return Err(FasError::Config("crop output_size must be positive".into()));
        }
        Ok(())
    }
}

/// Minimum crop side in pixels.
pub const MIN_PATCH_SIDE: usize = 8;

/// Crop window `(x0, y0, side)` for an `h×w` image.
pub fn patch_window(h: usize, w: usize, spec: &CropSpec, rng: &mut Rng) -> Result<(usize, usize, usize)> {
    spec.validate()?;
    let s = if spec.scale_min == spec.scale_max { spec.scale_min } else { rng.random_range(spec.scale_min..=spec.scale_max) };
    let side = (s * h.min(w) as f64).round() as usize;
    if side < MIN_PATCH_SIDE {
        return Err(FasError::Geometry(format!("crop side {side}px below {MIN_PATCH_SIDE}px")));
    }
    let (x0, y0) = match spec.strategy {
        CropStrategy::Random => (rng.random_range(0..=w - side), rng.random_range(0..=h - side)),
        CropStrategy::Center => ((w - side) / 2, (h - side) / 2),
        CropStrategy::LeftUp => (0, 0),
    };
    Ok((x0, y0, side))
}

pub fn extract_patch(image: &Image, spec: &CropSpec, rng: &mut Rng) -> Result<Image> {
    let (x0, y0, side) = patch_window(image.height(), image.width(), spec, rng)?;
    Ok(image.crop(x0, y0, x0 + side, y0 + side)?.resize(spec.output_size, spec.output_size))
}

/// Concatenates an original and a synthetic set, refusing merges that shift
/// the live:attack ratio by more than one sample.
pub fn merge_sets(original: &DatasetManifest, synthetic: &DatasetManifest) -> Result<DatasetManifest> {
    let o = original.label_counts();
    let s = synthetic.label_counts();
    let (l, a) = ((o.live + s.live) as f64, (o.attack + s.attack) as f64);
    let ok = match (o.live, o.attack) {
        (0, 0) => true,
        (0, _) => s.live == 0,
        (_, 0) => s.attack == 0,
        (ol, oa) => {
            let want_a = l * oa as f64 / ol as f64;
            let want_l = a * ol as f64 / oa as f64;
            (a - want_a).abs() <= 1.0 || (l - want_l).abs() <= 1.0
        }
    };
    if !ok {
        return Err(FasError::Merge(format!(
            "original live:attack {}:{} but merged {}:{}",
            o.live, o.attack, l, a
        )));
    }
    let mut m = original.clone();
    for e in &synthetic.entries {
        let mut e = e.clone();
        if e.path.is_relative() && synthetic.root != original.root {
            e.path = synthetic.root.join(&e.path);
        }
        m.entries.push(e);
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Procedural benchmark

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub identities: usize,
    pub per_identity: usize,
    /// Overlay frequency in cycles per pixel.
    pub overlay_freq: f64,
    pub overlay_theta_deg: f64,
    pub theta_jitter_deg: f64,
    pub overlay_amp: f64,
    /// Face-size offset: live faces are scaled by `1 - size_bias`, attack faces by `1 + size_bias`.
    pub size_bias: f64,
    pub attack_type: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub image_size: usize,
    /// Per-sample face-centre jitter in pixels (at 64 px; scaled with size).
    pub center_jitter: f64,
    /// Per-sample multiplicative brightness jitter.
    pub brightness_jitter: f64,
    pub domains: Vec<DomainSpec>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            center_jitter: 1.0,
            brightness_jitter: 0.03,
            domains: vec![
                DomainSpec {
                    name: "A".into(),
                    identities: 50,
                    per_identity: 2,
                    overlay_freq: 0.40,
                    overlay_theta_deg: 0.0,
                    theta_jitter_deg: 5.0,
                    overlay_amp: 0.05,
                    size_bias: 0.3,
                    attack_type: "replay".into(),
                },
                DomainSpec {
                    name: "B".into(),
                    identities: 25,
                    per_identity: 2,
                    overlay_freq: 0.36,
                    overlay_theta_deg: 45.0,
                    theta_jitter_deg: 5.0,
                    overlay_amp: 0.06,
                    size_bias: 0.0,
                    attack_type: "replay".into(),
                },
            ],
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(FasError::Config(format!("benchmark needs at least 2 domains, got {}", self.domains.len())));
        }
        if self.image_size < 16 {
            return Err(FasError::Config("benchmark image_size must be >= 16".into()));
        }
        let mut names = HashSet::new();
        for d in &self.domains {
            if !names.insert(&d.name) {
                return Err(FasError::Config(format!("duplicate domain `{}`", d.name)));
            }
            if d.overlay_freq <= 0.0 || d.overlay_freq >= 0.5 {
                return Err(FasError::Config(format!("domain {}: overlay_freq must be in (0, 0.5)", d.name)));
            }
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.name == name)
    }
}

/// Appearance parameters of one synthetic person.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Identity {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub skin: [f64; 3],
    pub bg: [f64; 3],
    pub eye: f64,
    pub mouth: f64,
}

impl Identity {
    pub fn sample(size: usize, rng: &mut Rng) -> Self {
        let k = size as f64 / 64.0;
        let c = size as f64 / 2.0;
        let tint = [1.0, 0.85, 0.75];
        let cx = c + rng.random_range(-4.0..4.0) * k;
        let cy = c + rng.random_range(-4.0..4.0) * k;
        let rx = rng.random_range(14.0..19.0) * k;
        let ry = rng.random_range(17.0..23.0) * k;
        let mut skin = [0.0; 3];
        for (s, t) in skin.iter_mut().zip(tint) {
            *s = rng.random_range(0.45..0.7) * t + 0.1;
        }
        let mut bg = [0.0; 3];
        for b in bg.iter_mut() {
            *b = rng.random_range(0.2..0.4);
        }
        let eye = rng.random_range(0.15..0.25);
        let mouth = rng.random_range(0.1..0.2);
        Self { cx, cy, rx, ry, skin, bg, eye, mouth }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.rx *= 1.0 + s;
        self.ry *= 1.0 + s;
        self
    }

    /// Approximate face box.
    pub fn bbox(&self) -> BBox {
        BBox {
            x: (self.cx - self.rx).round() as i64,
            y: (self.cy - self.ry).round() as i64,
            w: (2.0 * self.rx).round().max(1.0) as i64,
            h: (2.0 * self.ry).round().max(1.0) as i64,
        }
    }
}

/// Smooth face: soft ellipse on a flat background with dark eye and mouth blobs.
pub fn render_face(id: &Identity, size: usize, dx: f64, dy: f64, brightness: f64) -> Vec<[f64; 3]> {
    let k = size as f64 / 64.0;
    let (cx, cy) = (id.cx + dx, id.cy + dy);
    let sig = 2.5 * k;
    let mut out = vec![[0.0; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let d = (((xf - cx) / id.rx).powi(2) + ((yf - cy) / id.ry).powi(2)).sqrt();
            let m = 1.0 / (1.0 + ((d - 1.0) / 0.18).exp());
            let mut shade = 0.0;
            for ex in [-0.4, 0.4] {
                let (ux, uy) = (xf - (cx + ex * id.rx), yf - (cy - 0.25 * id.ry));
                shade += id.eye * (-(ux * ux + uy * uy) / (2.0 * sig * sig)).exp();
            }
            let (mx, my) = ((xf - cx) / (0.35 * id.rx), (yf - (cy + 0.45 * id.ry)) / sig);
            shade += id.mouth * (-(mx * mx + my * my) / 2.0).exp();
            for c in 0..3 {
                let v = id.bg[c] + (id.skin[c] - id.bg[c]) * m - shade;
                out[y * size + x][c] = v * brightness;
            }
        }
    }
    out
}

/// Oriented sinusoidal grating, `amp·sin(2πf(x cosθ + y sinθ) + φ)`.
pub fn overlay(size: usize, freq: f64, theta: f64, amp: f64, phase: f64) -> Vec<f64> {
    let (c, s) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let t = 2.0 * std::f64::consts::PI * freq * (x as f64 * c + y as f64 * s) + phase;
            out.push(amp * t.sin());
        }
    }
    out
}

fn to_image(px: &[[f64; 3]], size: usize, add: Option<&[f64]>) -> Image {
    Image::from_fn(size, size, |c, y, x| {
        let i = y * size + x;
        let v = px[i][c] + add.map_or(0.0, |a| a[i]);
        v.clamp(0.0, 1.0) as f32
    })
}

/// One rendered benchmark sample. Attacks carry the same render without the
/// overlay as `clean`.
#[derive(Clone, Debug)]
pub struct BenchSample {
    pub image: Image,
    pub clean: Image,
    pub label: Label,
    pub domain: String,
    pub identity: String,
    pub bbox: BBox,
}

/// Renders identities `ids` of `dom`. Each identity index yields a live
/// person and an attack person, `per_identity` samples each, interleaved
/// live/attack. Identities are keyed by index, so disjoint ranges give
/// disjoint people.
pub fn render_domain(cfg: &BenchmarkConfig, dom: &DomainSpec, seed: u64, ids: std::ops::Range<usize>) -> Vec<BenchSample> {
    let size = cfg.image_size;
    let k = size as f64 / 64.0;
    let start = ids.start;
    let per_id = fas_nn::par::map_indexed(ids.len(), |j| {
        let i = start + j;
        let mut r = rng::stream(seed, &format!("bench/{}/id", dom.name), i as u64);
        let live_id = Identity::sample(size, &mut r).scaled(-dom.size_bias);
        let atk_id = Identity::sample(size, &mut r).scaled(dom.size_bias);
        let mut out = Vec::with_capacity(2 * dom.per_identity);
        for s in 0..dom.per_identity {
            let mut r = rng::stream(seed, &format!("bench/{}/sample", dom.name), (i * dom.per_identity + s) as u64);
            for (label, id) in [(Label::Live, &live_id), (Label::Attack, &atk_id)] {
                let dx = r.random_range(-1.0..=1.0) * cfg.center_jitter * k;
                let dy = r.random_range(-1.0..=1.0) * cfg.center_jitter * k;
                let b = 1.0 + r.random_range(-1.0..=1.0) * cfg.brightness_jitter;
                let px = render_face(id, size, dx, dy, b);
                let clean = to_image(&px, size, None);
                let image = if label == Label::Attack {
                    let th = (dom.overlay_theta_deg + r.random_range(-1.0..=1.0) * dom.theta_jitter_deg).to_radians();
                    let phase = r.random_range(0.0..std::f64::consts::TAU);
                    let ov = overlay(size, dom.overlay_freq, th, dom.overlay_amp, phase);
                    to_image(&px, size, Some(&ov))
                } else {
                    clean.clone()
                };
                let tag = if label == Label::Live { "L" } else { "A" };
                out.push(BenchSample {
                    image,
                    clean,
                    label,
                    domain: dom.name.clone(),
                    identity: format!("{}-{tag}{i:04}", dom.name),
                    bbox: id.bbox(),
                });
            }
        }
        out
    });
    per_id.into_iter().flatten().collect()
}

pub fn bench_to_samples(b: &[BenchSample], attack_type: &str) -> Vec<FaceSample> {
    b.iter()
        .map(|s| FaceSample {
            image: s.image.clone(),
            label: s.label,
            domain: s.domain.clone(),
            attack_type: (s.label == Label::Attack).then(|| attack_type.to_string()),
            identity: Some(s.identity.clone()),
            provenance: Provenance::Original,
            bbox: Some(s.bbox),
        })
        .collect()
}

/// Renders every domain, writes PNGs under `out/images/<domain>/` and the
/// manifest to `out/manifest.tsv`.
pub fn make_synthetic_benchmark(cfg: &BenchmarkConfig, seed: u64, out: &Path, header: &[String]) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut m = DatasetManifest::new("manifest", out);
    for dom in &cfg.domains {
        let samples = render_domain(cfg, dom, seed, 0..dom.identities);
        let dir = out.join("images").join(&dom.name);
        std::fs::create_dir_all(&dir).map_err(|e| FasError::io(&dir, e))?;
        let mut counter: BTreeMap<String, usize> = BTreeMap::new();
        let mut jobs = Vec::new();
        for s in &samples {
            let n = counter.entry(s.identity.clone()).or_insert(0);
            let rel = PathBuf::from("images").join(&dom.name).join(format!("{}_{}_{}.png", s.label.as_str(), s.identity, n));
            *n += 1;
            m.entries.push(ManifestEntry {
                path: rel.clone(),
                label: s.label,
                domain: dom.name.clone(),
                attack_type: (s.label == Label::Attack).then(|| dom.attack_type.clone()),
                identity: Some(s.identity.clone()),
                provenance: Provenance::Original,
                bbox: Some(s.bbox),
            });
            jobs.push((out.join(rel), &s.image));
        }
        let stamp = header.join("; ");
        let res = fas_nn::par::map_indexed(jobs.len(), |i| jobs[i].1.save_png_stamped(&jobs[i].0, &stamp));
        res.into_iter().collect::<Result<Vec<_>>>()?;
    }
    m.write(&out.join("manifest.tsv"), header)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_region_hand_values() {
        let b = BBox { x: 100, y: 100, w: 100, h: 100 };
        assert_eq!(padded_region(b, 0.6), (40.0, 40.0, 260.0, 260.0));
        assert_eq!(padded_region(b, 0.0), (100.0, 100.0, 200.0, 200.0));
    }

    #[test]
    fn tall_box_becomes_square() {
        let b = BBox { x: 10, y: 0, w: 10, h: 30 };
        let (x0, y0, x1, y1) = padded_region(b, 0.0);
        assert_eq!((x1 - x0, y1 - y0), (30.0, 30.0));
        assert_eq!((x0, y0), (0.0, 0.0));
    }

    #[test]
    fn label_strings() {
        for l in [Label::Live, Label::Attack] {
            assert_eq!(Label::parse(l.as_str()), Some(l));
            assert_eq!(Label::from_index(l.index()), Some(l));
        }
        assert_eq!(Label::parse("genuine"), None);
    }
}
