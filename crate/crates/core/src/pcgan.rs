//! Pattern conversion GAN: an encoder that splits an image into a content
//! vector and a spatial pattern map, a generator that recombines them, an
//! image discriminator and a co-occurrence patch discriminator.

use std::collections::VecDeque;
use std::path::Path;

use fas_nn::archive::Archive;
use fas_nn::layers::{Conv2d, Linear};
use fas_nn::{Adam, AdamConfig, CropBox, Float, GradBuf, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datapipe::{FaceSample, Label, Provenance};
use crate::error::{FasError, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

const SLOPE: f64 = 0.2;
const IN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecNorm {
    /// Plain Euclidean norm of the per-sample difference.
    Sum,
    /// Square root of the per-element mean squared difference.
    Rms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcganConfig {
    pub image_size: usize,
    pub z_con_dim: usize,
    pub z_pat_channels: usize,
    pub enc_width: usize,
    pub gen_width: usize,
    pub gen_out_width: usize,
    pub disc_width: usize,
    pub patch_feat: usize,
    pub patch_size: usize,
    pub patch_crops: usize,
    pub ref_crops: usize,
    pub crop_min_frac: f64,
    pub crop_max_frac: f64,
    pub r1_weight: f64,
    pub rec_norm: RecNorm,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub iterations: u64,
    pub checkpoint_every: u64,
    pub history_len: usize,
}

impl Default for PcganConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PcganConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            z_con_dim: 8,
            z_pat_channels: 8,
            enc_width: 16,
            gen_width: 32,
            gen_out_width: 16,
            disc_width: 16,
            patch_feat: 32,
            patch_size: 16,
            patch_crops: 8,
            ref_crops: 4,
            crop_min_frac: 0.125,
            crop_max_frac: 0.25,
            r1_weight: 10.0,
            rec_norm: RecNorm::Sum,
            adam: AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            batch_size: 4,
            iterations: 1000,
            checkpoint_every: 500,
            history_len: 10_000,
        }
    }

    pub fn paper() -> Self {
        Self {
            image_size: 1024,
            rec_norm: RecNorm::Rms,
            adam: AdamConfig { lr: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            batch_size: 1,
            iterations: 4000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FasError::Config(format!("pcgan: {m}")));
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return bad(format!("image_size must be a positive multiple of 8, got {}", self.image_size));
        }
        if !self.z_pat_channels.is_multiple_of(4) || self.z_pat_channels == 0 {
            return bad("z_pat_channels must be a positive multiple of 4".into());
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(4) {
            return bad("patch_size must be a positive multiple of 4".into());
        }
        if !(0.0 < self.crop_min_frac && self.crop_min_frac <= self.crop_max_frac && self.crop_max_frac <= 1.0) {
            return bad("need 0 < crop_min_frac <= crop_max_frac <= 1".into());
        }
        if self.patch_crops == 0 || self.ref_crops == 0 || self.batch_size == 0 {
            return bad("crop counts and batch_size must be positive".into());
        }
        if self.r1_weight < 0.0 || self.adam.lr < 0.0 {
            return bad("r1_weight and lr must be non-negative".into());
        }
        Ok(())
    }

    fn crop_sides(&self) -> (usize, usize) {
        let s = self.image_size as f64;
        let lo = ((s * self.crop_min_frac).round() as usize).max(1);
        let hi = ((s * self.crop_max_frac).round() as usize).max(lo);
        (lo, hi)
    }
}

// ---------------------------------------------------------------------------
// Networks

#[derive(Clone, Debug)]
struct Encoder {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    pat: Conv2d,
    con1: Conv2d,
    con2: Linear,
}

#[derive(Clone, Debug)]
struct Modulation {
    gamma: Conv2d,
    beta: Conv2d,
}

#[derive(Clone, Debug)]
struct Generator {
    fc: Linear,
    convs: Vec<Conv2d>,
    mods: Vec<Modulation>,
    out: Conv2d,
}

#[derive(Clone, Debug)]
struct Discriminator {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    fc: Linear,
}

#[derive(Clone, Debug)]
struct PatchDiscriminator {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    fe: Linear,
    // first head layer split into candidate and reference halves
    h1: Linear,
    h1_ref: ParamId,
    h2: Linear,
}

/// Content vector `[N, z_con_dim]` and pattern map `[N, C', S/2, S/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair<T: Float> {
    pub z_con: Tensor<T>,
    pub z_pat: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Pcgan<T: Float> {
    pub cfg: PcganConfig,
    pub store: ParamStore<T>,
    enc: Encoder,
    gen: Generator,
    disc: Discriminator,
    pdisc: PatchDiscriminator,
}

/// Crop windows for one evaluation of the patch loss: `n` candidates and
/// `m` references per batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBoxes {
    pub cand: Vec<CropBox>,
    pub refs: Vec<CropBox>,
    pub n: usize,
    pub m: usize,
}

pub fn sample_boxes(cfg: &PcganConfig, batch: usize, per_item: usize, rng: &mut Rng) -> Vec<CropBox> {
    let (lo, hi) = cfg.crop_sides();
    let s = cfg.image_size;
    let mut out = Vec::with_capacity(batch * per_item);
    for b in 0..batch {
        for _ in 0..per_item {
            let side = rng.random_range(lo..=hi);
            let y0 = rng.random_range(0..=s - side);
            let x0 = rng.random_range(0..=s - side);
            out.push((b, y0, x0, side));
        }
    }
    out
}

pub fn sample_patch_boxes(cfg: &PcganConfig, batch: usize, rng: &mut Rng) -> PatchBoxes {
    let cand = sample_boxes(cfg, batch, cfg.patch_crops, rng);
    let refs = sample_boxes(cfg, batch, cfg.ref_crops, rng);
    PatchBoxes { cand, refs, n: cfg.patch_crops, m: cfg.ref_crops }
}

fn to_signed<T: Float>(g: &mut Graph<T>, x: Var) -> Var {
    let y = g.mul_scalar(x, 2.0);
    g.add_scalar(y, -1.0)
}

impl<T: Float> Pcgan<T> {
    pub fn new(cfg: PcganConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "pcgan/init", 0);
        let mut st = ParamStore::new();
        let (s, ew, gw, dw) = (cfg.image_size, cfg.enc_width, cfg.gen_width, cfg.disc_width);
        let zc = cfg.z_pat_channels;
        let enc = Encoder {
            c1: Conv2d::new(&mut st, "enc.c1", 3, ew, 3, 1, 1, &mut r),
            c2: Conv2d::new(&mut st, "enc.c2", ew, 2 * ew, 3, 2, 1, &mut r),
            c3: Conv2d::new(&mut st, "enc.c3", 2 * ew, 2 * ew, 3, 1, 1, &mut r),
            pat: Conv2d::new(&mut st, "enc.pat", 2 * ew, zc, 1, 1, 0, &mut r),
            con1: Conv2d::new(&mut st, "enc.con1", 2 * ew, 4, 1, 1, 0, &mut r),
            con2: Linear::new(&mut st, "enc.con2", 4 * (s / 2) * (s / 2), cfg.z_con_dim, &mut r),
        };
        let widths = [gw, gw, cfg.gen_out_width];
        let zchan = [zc, zc, zc / 4];
        let mut convs = Vec::new();
        let mut mods = Vec::new();
        let mut cin = gw;
        for k in 0..3 {
            convs.push(Conv2d::new(&mut st, &format!("gen.conv{k}"), cin, widths[k], 3, 1, 1, &mut r));
            mods.push(Modulation {
                gamma: Conv2d::new(&mut st, &format!("gen.mod{k}.gamma"), zchan[k], widths[k], 3, 1, 1, &mut r),
                beta: Conv2d::new(&mut st, &format!("gen.mod{k}.beta"), zchan[k], widths[k], 3, 1, 1, &mut r),
            });
            cin = widths[k];
        }
        let gen = Generator {
            fc: Linear::new(&mut st, "gen.fc", cfg.z_con_dim, gw * (s / 8) * (s / 8), &mut r),
            convs,
            mods,
            out: Conv2d::new(&mut st, "gen.out", cfg.gen_out_width, 3, 3, 1, 1, &mut r),
        };
        let disc = Discriminator {
            c1: Conv2d::new(&mut st, "disc.c1", 3, dw, 3, 2, 1, &mut r),
            c2: Conv2d::new(&mut st, "disc.c2", dw, 2 * dw, 3, 2, 1, &mut r),
            c3: Conv2d::new(&mut st, "disc.c3", 2 * dw, 2 * dw, 3, 2, 1, &mut r),
            fc: Linear::new(&mut st, "disc.fc", 2 * dw * (s / 8) * (s / 8), 1, &mut r),
        };
        let (p, f) = (cfg.patch_size, cfg.patch_feat);
        let h1w = st.add_uniform("pdisc.h1.weight", &[f, f], 2 * f, &mut r);
        let h1b = st.add_uniform("pdisc.h1.bias", &[f], 2 * f, &mut r);
        let h1_ref = st.add_uniform("pdisc.h1_ref.weight", &[f, f], 2 * f, &mut r);
        let pdisc = PatchDiscriminator {
            c1: Conv2d::new(&mut st, "pdisc.c1", 3, dw, 3, 1, 1, &mut r),
            c2: Conv2d::new(&mut st, "pdisc.c2", dw, 2 * dw, 3, 2, 1, &mut r),
            c3: Conv2d::new(&mut st, "pdisc.c3", 2 * dw, 2 * dw, 3, 2, 1, &mut r),
            fe: Linear::new(&mut st, "pdisc.fe", 2 * dw * (p / 4) * (p / 4), f, &mut r),
            h1: Linear { w: h1w, b: h1b },
            h1_ref,
            h2: Linear::new(&mut st, "pdisc.h2", f, 1, &mut r),
        };
        Ok(Self { cfg, store: st, enc, gen, disc, pdisc })
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        let mut v = self.store.ids_with_prefix("enc.");
        v.extend(self.store.ids_with_prefix("gen."));
        v
    }

    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        let mut v = self.store.ids_with_prefix("disc.");
        v.extend(self.store.ids_with_prefix("pdisc."));
        v
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 3 {
            return Err(FasError::Shape(format!("expected [N, 3, H, W], got {shape:?}")));
        }
        if shape[2] != shape[3] || !shape[2].is_multiple_of(2) {
            return Err(FasError::Shape(format!("encoder input must be square with an even side, got {}x{}", shape[2], shape[3])));
        }
        if shape[2] != s {
            return Err(FasError::Shape(format!("model expects {s}x{s} images, got {}x{}", shape[2], shape[3])));
        }
        Ok(())
    }

    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var) -> (Var, Var) {
        let st = &self.store;
        let e = &self.enc;
        let h = to_signed(g, x);
        let h = e.c1.forward(g, st, h);
        let h = g.leaky_relu(h, SLOPE);
        let h = e.c2.forward(g, st, h);
        let h = g.leaky_relu(h, SLOPE);
        let h = e.c3.forward(g, st, h);
        let h = g.leaky_relu(h, SLOPE);
        let zp = e.pat.forward(g, st, h);
        let c = e.con1.forward(g, st, h);
        let c = g.leaky_relu(c, SLOPE);
        let c = g.flatten(c);
        let zc = e.con2.forward(g, st, c);
        (zc, zp)
    }

    pub fn generate_graph(&self, g: &mut Graph<T>, zc: Var, zp: Var) -> Var {
        let st = &self.store;
        let gn = &self.gen;
        let n = g.shape(zc)[0];
        let s8 = self.cfg.image_size / 8;
        let h = gn.fc.forward(g, st, zc);
        let h = g.leaky_relu(h, SLOPE);
        let mut h = g.reshape(h, &[n, self.cfg.gen_width, s8, s8]);
        let zs = [g.avgpool2(zp), zp, g.pixel_shuffle(zp, 2)];
        for k in 0..3 {
            h = g.upsample2x(h);
            h = gn.convs[k].forward(g, st, h);
            h = g.instance_norm(h, IN_EPS);
            let gam = gn.mods[k].gamma.forward(g, st, zs[k]);
            let bet = gn.mods[k].beta.forward(g, st, zs[k]);
            let hg = g.mul(h, gam);
            let h2 = g.add(h, hg);
            h = g.add(h2, bet);
            h = g.leaky_relu(h, SLOPE);
        }
        let o = gn.out.forward(g, st, h);
        let o = g.tanh(o);
        let o = g.add_scalar(o, 1.0);
        g.mul_scalar(o, 0.5)
    }

    /// Real/fake logits `[N]`.
    pub fn disc_graph(&self, g: &mut Graph<T>, x: Var) -> Var {
        let st = &self.store;
        let d = &self.disc;
        let n = g.shape(x)[0];
        let h = to_signed(g, x);
        let h = d.c1.forward(g, st, h);
        let h = g.leaky_relu(h, SLOPE);
        let h = d.c2.forward(g, st, h);
        let h = g.leaky_relu(h, SLOPE);
        let h = d.c3.forward(g, st, h);
        let h = g.leaky_relu(h, SLOPE);
        let h = g.flatten(h);
        let o = d.fc.forward(g, st, h);
        g.reshape(o, &[n])
    }

    fn patch_features(&self, g: &mut Graph<T>, crops: Var) -> Var {
        let st = &self.store;
        let p = &self.pdisc;
        let h = to_signed(g, crops);
        let h = p.c1.forward(g, st, h);
        let h = g.leaky_relu(h, SLOPE);
        let h = p.c2.forward(g, st, h);
        let h = g.leaky_relu(h, SLOPE);
        let h = p.c3.forward(g, st, h);
        let h = g.leaky_relu(h, SLOPE);
        let h = g.flatten(h);
        let h = p.fe.forward(g, st, h);
        g.leaky_relu(h, SLOPE)
    }

    /// Co-occurrence logits `[B·n]`: does each candidate crop of `cand_src`
    /// share the pattern statistics of the reference crops of `ref_src`?
    pub fn patch_disc_graph(&self, g: &mut Graph<T>, cand_src: Var, ref_src: Var, boxes: &PatchBoxes) -> Var {
        let st = &self.store;
        let p = &self.pdisc;
        let f = self.cfg.patch_feat;
        let b = boxes.cand.len() / boxes.n;
        let cand = g.crop_resize(cand_src, &boxes.cand, self.cfg.patch_size);
        let refs = g.crop_resize(ref_src, &boxes.refs, self.cfg.patch_size);
        let fc = self.patch_features(g, cand);
        let fr = self.patch_features(g, refs);
        let fr = g.reshape(fr, &[b, boxes.m, f]);
        let fr = g.mean_axes(fr, &[1]);
        let fr = g.reshape(fr, &[b, f]);
        let wr = g.param(st, p.h1_ref);
        let hr = g.linear(fr, wr, None);
        let hr = g.reshape(hr, &[b, 1, f]);
        let hc = p.h1.forward(g, st, fc);
        let hc = g.reshape(hc, &[b, boxes.n, f]);
        let h = g.add(hc, hr);
        let h = g.reshape(h, &[b * boxes.n, f]);
        let h = g.leaky_relu(h, SLOPE);
        let o = p.h2.forward(g, st, h);
        g.reshape(o, &[b * boxes.n])
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<LatentPair<T>> {
        let x = batched(x)?;
        self.check_images(x.shape())?;
        let mut g = Graph::new();
        g.set_freeze_params(true);
        let xv = g.constant(x);
        let (zc, zp) = self.encode_graph(&mut g, xv);
        Ok(LatentPair { z_con: g.value(zc).clone(), z_pat: g.value(zp).clone() })
    }

    pub fn generate(&self, z_con: &Tensor<T>, z_pat: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, half) = (self.cfg.z_pat_channels, self.cfg.image_size / 2);
        let zs = z_con.shape();
        let ps = z_pat.shape();
        if zs.len() != 2 || zs[1] != self.cfg.z_con_dim {
            return Err(FasError::Shape(format!("z_con must be [N, {}], got {zs:?}", self.cfg.z_con_dim)));
        }
        if ps != [zs[0], c, half, half] {
            return Err(FasError::Shape(format!("z_pat must be [{}, {c}, {half}, {half}], got {ps:?}", zs[0])));
        }
        let mut g = Graph::new();
        g.set_freeze_params(true);
        let a = g.constant(z_con.clone());
        let b = g.constant(z_pat.clone());
        let o = self.generate_graph(&mut g, a, b);
        Ok(g.value(o).clone())
    }

    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let l = self.encode(x)?;
        self.generate(&l.z_con, &l.z_pat)
    }

    /// Content of `content`, artifact pattern of `pattern`.
    pub fn convert(&self, content: &Tensor<T>, pattern: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.encode(content)?;
        let b = self.encode(pattern)?;
        self.generate(&a.z_con, &b.z_pat)
    }

    pub fn num_params(&self, prefix: &str) -> usize {
        self.store.ids_with_prefix(prefix).iter().map(|&id| self.store.get(id).numel()).sum()
    }
}

fn batched<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.rank() {
        4 => Ok(x.clone()),
        3 => {
            let s = x.shape();
            Ok(x.clone().reshape(&[1, s[0], s[1], s[2]])?)
        }
        _ => Err(FasError::Shape(format!("expected an image or image batch, got {:?}", x.shape()))),
    }
}

// ---------------------------------------------------------------------------
// Losses

/// `-ln p` for a discriminator probability; outside `(0, 1]` is a guard error.
pub fn neg_log_prob(p: f64) -> Result<f64> {
    if p.is_nan() || p <= 0.0 || p > 1.0 {
        return Err(FasError::Numerical(format!("discriminator output {p} outside (0, 1]")));
    }
    Ok(-p.ln())
}

/// Mean of `-ln σ(l)` over logits, computed stably as `softplus(-l)`.
pub fn adversarial_loss<T: Float>(g: &mut Graph<T>, logits: Var) -> Var {
    let n = g.neg(logits);
    let s = g.softplus(n);
    g.mean(s)
}

/// Batch mean of the per-sample norm of `a - b`.
pub fn reconstruction_loss<T: Float>(g: &mut Graph<T>, a: Var, b: Var, norm: RecNorm) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    let per = match norm {
        RecNorm::Sum => g.sum_axes(sq, &[1, 2, 3]),
        RecNorm::Rms => g.mean_axes(sq, &[1, 2, 3]),
    };
    let r = g.sqrt(per);
    g.mean(r)
}

pub fn blur<T: Float>(g: &mut Graph<T>, x: Var) -> Var {
    g.avgpool2(x)
}

/// 2×2 average pooling of a `[.., H, W]` image tensor.
pub fn blur_tensor<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 3 || !s[s.len() - 1].is_multiple_of(2) || !s[s.len() - 2].is_multiple_of(2) {
        return Err(FasError::Shape(format!("blur needs even spatial sides, got {s:?}")));
    }
    let x4 = batched(x)?;
    let out = fas_nn::kernels::avgpool2(&x4);
    if s.len() == 3 {
        let o = out.shape().to_vec();
        return Ok(out.reshape(&o[1..])?);
    }
    Ok(out)
}

pub fn blurred_reconstruction_loss<T: Float>(g: &mut Graph<T>, x_tgt: Var, x_mix: Var, norm: RecNorm) -> Var {
    let a = blur(g, x_tgt);
    let b = blur(g, x_mix);
    reconstruction_loss(g, a, b, norm)
}

/// Unnormalised `‖a - b‖₂` over all elements.
pub fn l2_distance<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(FasError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2)).sum::<f64>().sqrt())
}

/// Graph nodes of the five generator-side terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct GenLosses {
    pub rec: Var,
    pub rec_blur: Var,
    pub adv_rec: Var,
    pub adv_mix: Var,
    pub pat: Var,
    pub total: Var,
}

pub fn total_loss<T: Float>(g: &mut Graph<T>, parts: [Var; 5]) -> Var {
    let mut t = parts[0];
    for &p in &parts[1..] {
        t = g.add(t, p);
    }
    t
}

impl<T: Float> Pcgan<T> {
    pub fn pattern_conversion_loss(&self, g: &mut Graph<T>, mix: Var, x_src: Var, boxes: &PatchBoxes) -> Var {
        let l = self.patch_disc_graph(g, mix, x_src, boxes);
        adversarial_loss(g, l)
    }

    /// Builds the generator objective on `(x_src, x_tgt)`. Discriminator
    /// parameters enter as constants.
    pub fn generator_losses(&self, g: &mut Graph<T>, xs: Var, xt: Var, boxes: &PatchBoxes) -> GenLosses {
        let (zs_c, zs_p) = self.encode_graph(g, xs);
        let (zt_c, _) = self.encode_graph(g, xt);
        let rec_img = self.generate_graph(g, zs_c, zs_p);
        let mix = self.generate_graph(g, zt_c, zs_p);
        let norm = self.cfg.rec_norm;
        let rec = reconstruction_loss(g, xs, rec_img, norm);
        let rec_blur = blurred_reconstruction_loss(g, xt, mix, norm);
        g.set_freeze_params(true);
        let dr = self.disc_graph(g, rec_img);
        let adv_rec = adversarial_loss(g, dr);
        let dm = self.disc_graph(g, mix);
        let adv_mix = adversarial_loss(g, dm);
        let pat = self.pattern_conversion_loss(g, mix, xs, boxes);
        g.set_freeze_params(false);
        let total = total_loss(g, [rec, rec_blur, adv_rec, adv_mix, pat]);
        GenLosses { rec, rec_blur, adv_rec, adv_mix, pat, total }
    }

    /// Discriminator objective with fixed fakes: non-saturating loss for the
    /// image discriminator (fakes weighted ½ each) plus the patch loss.
    pub fn discriminator_loss(
        &self,
        g: &mut Graph<T>,
        real: Var,
        rec: Var,
        mix: Var,
        real_boxes: &PatchBoxes,
        fake_boxes: &PatchBoxes,
    ) -> (Var, Var) {
        let dr = self.disc_graph(g, real);
        let nr = g.neg(dr);
        let lr = g.softplus(nr);
        let lr = g.mean(lr);
        let drec = self.disc_graph(g, rec);
        let lrec = g.softplus(drec);
        let lrec = g.mean(lrec);
        let dmix = self.disc_graph(g, mix);
        let lmix = g.softplus(dmix);
        let lmix = g.mean(lmix);
        let fake = g.add(lrec, lmix);
        let fake = g.mul_scalar(fake, 0.5);
        let ld = g.add(lr, fake);
        let pr = self.patch_disc_graph(g, real, real, real_boxes);
        let npr = g.neg(pr);
        let lpr = g.softplus(npr);
        let lpr = g.mean(lpr);
        let pf = self.patch_disc_graph(g, mix, real, fake_boxes);
        let lpf = g.softplus(pf);
        let lpf = g.mean(lpf);
        let lp = g.add(lpr, lpf);
        (ld, lp)
    }

    /// `mean_b ‖∇ₓ D(x_b)‖²` and the per-sample input gradients.
    pub fn r1_value(&self, x: &Tensor<T>) -> (f64, Tensor<T>) {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let d = self.disc_graph(&mut g, xv);
        let s = g.sum(d);
        let grads = g.backward(s);
        let gx = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let n = x.shape()[0];
        (gx.sum_sq().to_f64() / n as f64, gx)
    }

    /// Parameter gradient of `(γ/2)·mean_b ‖∇ₓ D(x_b)‖²`, as a central
    /// difference of `∇_θ Σ D` along the input gradient direction.
    pub fn r1_param_grads(&self, x: &Tensor<T>, gamma: f64) -> (f64, GradBuf<T>) {
        let (r1, gx) = self.r1_value(x);
        let mut buf = GradBuf::new();
        let m = gx.max_abs().to_f64();
        if gamma == 0.0 || m == 0.0 {
            return (r1, buf);
        }
        let eps = 0.01 / m;
        let n = x.shape()[0] as f64;
        for sign in [1.0, -1.0] {
            let xp = x.zip_map(&gx, |a, b| a + T::from_f64(sign * eps) * b);
            let mut g = Graph::new();
            let xv = g.constant(xp);
            let d = self.disc_graph(&mut g, xv);
            let s = g.sum(d);
            buf.add_scaled(&g.backward(s), sign * gamma / (2.0 * eps * n));
        }
        (r1, buf)
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub rec: f64,
    pub rec_blur: f64,
    pub adv_rec: f64,
    pub adv_mix: f64,
    pub pat: f64,
    pub total: f64,
    pub disc: f64,
    pub patch_disc: f64,
    pub r1: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iteration,rec,rec_blur,adv_rec,adv_mix,pat,total,disc,patch_disc,r1";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.iteration,
            self.rec,
            self.rec_blur,
            self.adv_rec,
            self.adv_mix,
            self.pat,
            self.total,
            self.disc,
            self.patch_disc,
            self.r1
        )
    }

    fn finite(&self) -> bool {
        [self.rec, self.rec_blur, self.adv_rec, self.adv_mix, self.pat, self.total, self.disc, self.patch_disc, self.r1]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub struct PcganTrainer<T: Float> {
    pub model: Pcgan<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub iteration: u64,
    pub history: VecDeque<LossRecord>,
    rng: Rng,
    seed: u64,
}

impl<T: Float> PcganTrainer<T> {
    pub fn new(cfg: PcganConfig, seed: u64) -> Result<Self> {
        let model = Pcgan::new(cfg, seed)?;
        Ok(Self::from_model(model, seed))
    }

    pub fn from_model(model: Pcgan<T>, seed: u64) -> Self {
        let opt_g = Adam::new(model.cfg.adam, &model.store, model.generator_ids());
        let opt_d = Adam::new(model.cfg.adam, &model.store, model.discriminator_ids());
        Self { model, opt_g, opt_d, iteration: 0, history: VecDeque::new(), rng: rng::stream(seed, "pcgan/train", 0), seed }
    }

    fn check_pair(&self, xs: &Tensor<T>, xt: &Tensor<T>) -> Result<()> {
        self.model.check_images(xs.shape())?;
        if xs.shape() != xt.shape() {
            return Err(FasError::Shape(format!("source {:?} vs target {:?}", xs.shape(), xt.shape())));
        }
        let per = xs.numel() / xs.shape()[0];
        for (i, (a, b)) in xs.data().chunks(per).zip(xt.data().chunks(per)).enumerate() {
            if a == b {
                return Err(FasError::Precondition(format!("batch item {i}: source and target images are identical")));
            }
        }
        Ok(())
    }

    /// One discriminator update; returns `(image loss, patch loss, r1)`.
    pub fn discriminator_step(&mut self, xs: &Tensor<T>, xt: &Tensor<T>) -> Result<(f64, f64, f64)> {
        let m = &self.model;
        let (rec, mix) = {
            let mut g = Graph::new();
            g.set_freeze_params(true);
            let a = g.constant(xs.clone());
            let b = g.constant(xt.clone());
            let (zs_c, zs_p) = m.encode_graph(&mut g, a);
            let (zt_c, _) = m.encode_graph(&mut g, b);
            let r = m.generate_graph(&mut g, zs_c, zs_p);
            let x = m.generate_graph(&mut g, zt_c, zs_p);
            (g.value(r).clone(), g.value(x).clone())
        };
        let b = xs.shape()[0];
        let real_boxes = sample_patch_boxes(&m.cfg, b, &mut self.rng);
        let fake_boxes = PatchBoxes { cand: sample_boxes(&m.cfg, b, m.cfg.patch_crops, &mut self.rng), ..real_boxes.clone() };
        let mut g = Graph::new();
        let real = g.constant(xs.clone());
        let rv = g.constant(rec);
        let mv = g.constant(mix);
        let (ld, lp) = m.discriminator_loss(&mut g, real, rv, mv, &real_boxes, &fake_boxes);
        let loss = g.add(ld, lp);
        let mut buf = GradBuf::from_grads(&g.backward(loss));
        let (ldv, lpv) = (g.value(ld).item().to_f64(), g.value(lp).item().to_f64());
        let (r1, rb) = m.r1_param_grads(xs, m.cfg.r1_weight);
        for (id, t) in rb.iter() {
            buf.add_tensor(id, t);
        }
        if !(ldv.is_finite() && lpv.is_finite() && r1.is_finite() && buf.all_finite()) {
            return Err(FasError::Numerical(format!(
                "non-finite discriminator step at iteration {}: disc {ldv} patch {lpv} r1 {r1}",
                self.iteration
            )));
        }
        self.opt_d.step_buf(&mut self.model.store, &buf);
        Ok((ldv, lpv, r1))
    }

    pub fn generator_step(&mut self, xs: &Tensor<T>, xt: &Tensor<T>) -> Result<LossRecord> {
        let m = &self.model;
        let boxes = sample_patch_boxes(&m.cfg, xs.shape()[0], &mut self.rng);
        let mut g = Graph::new();
        let a = g.constant(xs.clone());
        let b = g.constant(xt.clone());
        let l = m.generator_losses(&mut g, a, b, &boxes);
        let v = |x: Var| g.value(x).item().to_f64();
        let rec = LossRecord {
            iteration: self.iteration,
            rec: v(l.rec),
            rec_blur: v(l.rec_blur),
            adv_rec: v(l.adv_rec),
            adv_mix: v(l.adv_mix),
            pat: v(l.pat),
            total: v(l.total),
            ..Default::default()
        };
        if !rec.finite() {
            return Err(FasError::Numerical(format!("non-finite generator loss: {rec:?}")));
        }
        let grads = g.backward(l.total);
        self.opt_g.step(&mut self.model.store, &grads);
        Ok(rec)
    }

    /// Alternating update: discriminators first, then encoder + generator.
    pub fn train_step(&mut self, xs: &Tensor<T>, xt: &Tensor<T>) -> Result<LossRecord> {
        self.check_pair(xs, xt)?;
        let (d, pd, r1) = self.discriminator_step(xs, xt)?;
        let mut rec = self.generator_step(xs, xt)?;
        rec.disc = d;
        rec.patch_disc = pd;
        rec.r1 = r1;
        if !self.model.store.all_finite() {
            return Err(FasError::Numerical(format!("non-finite parameters after iteration {}: {rec:?}", self.iteration)));
        }
        self.iteration += 1;
        rec.iteration = self.iteration;
        self.history.push_back(rec);
        while self.history.len() > self.model.cfg.history_len.max(1) {
            self.history.pop_front();
        }
        Ok(rec)
    }

    /// Draws `(x_src, x_tgt)` batches of distinct images from `data`.
    pub fn sample_pair(&mut self, data: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = data.shape()[0];
        if n < 2 {
            return Err(FasError::Precondition("training needs at least two images".into()));
        }
        let per = data.numel() / n;
        let bs = self.model.cfg.batch_size;
        let mut si = Vec::with_capacity(bs);
        let mut ti = Vec::with_capacity(bs);
        for _ in 0..bs {
            let mut tries = 0;
            loop {
                let i = self.rng.random_range(0..n);
                let j = (i + self.rng.random_range(1..n)) % n;
                tries += 1;
                if data.data()[i * per..(i + 1) * per] != data.data()[j * per..(j + 1) * per] || tries > 16 {
                    si.push(i);
                    ti.push(j);
                    break;
                }
            }
        }
        Ok((gather(data, &si), gather(data, &ti)))
    }

    /// Runs until `iterations` total steps, calling `hook` after each one.
    pub fn fit(
        &mut self,
        data: &Tensor<T>,
        iterations: u64,
        mut hook: impl FnMut(&Self, &LossRecord) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < iterations {
            let (xs, xt) = self.sample_pair(data)?;
            let rec = self.train_step(&xs, &xt)?;
            hook(self, &rec)?;
        }
        Ok(())
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from(LossRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.history {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn save_checkpoint(&self, path: &Path, config_hash: &str, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "pcgan",
            "config_hash": config_hash,
            "iteration": self.iteration,
            "seed": self.seed,
            "config": self.model.cfg,
            "extra": extra,
        });
        let mut a = Archive::new(meta);
        for (_, name, t) in self.model.store.iter() {
            a.insert(&format!("param.{name}"), t);
        }
        for (n, t) in self.opt_g.state("opt_g", &self.model.store) {
            a.insert(&n, &t);
        }
        for (n, t) in self.opt_d.state("opt_d", &self.model.store) {
            a.insert(&n, &t);
        }
        a.insert("opt_g.step", &Tensor::<f64>::scalar(self.opt_g.step as f64));
        a.insert("opt_d.step", &Tensor::<f64>::scalar(self.opt_d.step as f64));
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| FasError::io(dir, e))?;
        }
        a.save(path)?;
        Ok(())
    }

    /// Restores a checkpoint. A config-hash mismatch is refused unless `force`.
    pub fn load_checkpoint(path: &Path, config_hash: &str, force: bool) -> Result<Self> {
        let a = Archive::load(path)?;
        let meta = &a.meta;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("pcgan") {
            return Err(FasError::Checkpoint(format!("{} is not a pcgan checkpoint", path.display())));
        }
        let stored = meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or("");
        if stored != config_hash && !force {
            return Err(FasError::Checkpoint(format!(
                "{}: config hash {stored} does not match current {config_hash} (use --force to override)",
                path.display()
            )));
        }
        let cfg: PcganConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| FasError::Checkpoint(format!("bad embedded config: {e}")))?;
        let seed = meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut model = Pcgan::<T>::new(cfg, seed)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t = a
                .get::<T>(&format!("param.{name}"))
                .ok_or_else(|| FasError::Checkpoint(format!("missing tensor param.{name}")))?;
            model.store.set(id, t).map_err(|e| FasError::Checkpoint(format!("{name}: {e}")))?;
        }
        let mut tr = Self::from_model(model, seed);
        let ok_g = tr.opt_g.load_state("opt_g", &tr.model.store, |n| a.get::<T>(n));
        let ok_d = tr.opt_d.load_state("opt_d", &tr.model.store, |n| a.get::<T>(n));
        if !(ok_g && ok_d) {
            return Err(FasError::Checkpoint("optimizer state incomplete".into()));
        }
        tr.opt_g.step = a.get::<f64>("opt_g.step").map(|t| t.item() as u64).unwrap_or(0);
        tr.opt_d.step = a.get::<f64>("opt_d.step").map(|t| t.item() as u64).unwrap_or(0);
        tr.iteration = meta.get("iteration").and_then(|v| v.as_u64()).unwrap_or(0);
        tr.rng = rng::stream(seed, "pcgan/train", tr.iteration);
        Ok(tr)
    }
}

pub fn gather<T: Float>(data: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let parts: Vec<Tensor<T>> = idx.iter().map(|&i| data.index0(i)).collect();
    Tensor::stack(&parts).expect("gather of equal-shape rows")
}

// ---------------------------------------------------------------------------
// Conversion

fn convert_samples(model: &Pcgan<f32>, content: &FaceSample, pattern: &FaceSample) -> Result<Image> {
    let s = model.cfg.image_size;
    for smp in [content, pattern] {
        if smp.image.height() != s || smp.image.width() != s {
            return Err(FasError::Shape(format!(
                "conversion needs {s}x{s} faces, got {}x{}",
                smp.image.height(),
                smp.image.width()
            )));
        }
    }
    let out = model.convert(&content.image.to_tensor(), &pattern.image.to_tensor())?;
    Image::from_tensor(&out)
}

/// Live content with the attack's artifact pattern; labelled attack.
pub fn inject_artifact(model: &Pcgan<f32>, live: &FaceSample, attack: &FaceSample) -> Result<FaceSample> {
    if live.label != Label::Live || attack.label != Label::Attack {
        return Err(FasError::Misuse(format!(
            "inject_artifact needs (live, attack), got ({}, {})",
            live.label.as_str(),
            attack.label.as_str()
        )));
    }
    let image = convert_samples(model, live, attack)?;
    Ok(FaceSample {
        image,
        label: Label::Attack,
        domain: live.domain.clone(),
        attack_type: attack.attack_type.clone(),
        identity: live.identity.clone(),
        provenance: Provenance::Synthesized,
        bbox: None,
    })
}

/// Attack content with a live pattern; labelled live.
pub fn remove_artifact(model: &Pcgan<f32>, attack: &FaceSample, live: &FaceSample) -> Result<FaceSample> {
    if attack.label != Label::Attack || live.label != Label::Live {
        return Err(FasError::Misuse(format!(
            "remove_artifact needs (attack, live), got ({}, {})",
            attack.label.as_str(),
            live.label.as_str()
        )));
    }
    let image = convert_samples(model, attack, live)?;
    Ok(FaceSample {
        image,
        label: Label::Live,
        domain: attack.domain.clone(),
        attack_type: None,
        identity: attack.identity.clone(),
        provenance: Provenance::Synthesized,
        bbox: None,
    })
}
