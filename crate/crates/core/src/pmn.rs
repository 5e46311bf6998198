//! Patch-based multi-task detector: a small dual encoder (image + frozen
//! text), a shared feature MLP with separate face and patch heads, and the
//! CLIP / face / patch / center objectives.

use std::path::Path;

use fas_nn::archive::Archive;
use fas_nn::layers::{Conv2d, Linear};
use fas_nn::{Adam, AdamConfig, Float, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datapipe::{extract_patch, CropSpec, CropStrategy, Label};
use crate::error::{FasError, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-12;

pub const LIVE_PROMPTS: [&str; 6] = [
    "This is an example of a real face",
    "This is a bonafide face",
    "This is a real face",
    "This is how a real face looks like",
    "a photo of a real face",
    "This is not a spoof face",
];

pub const ATTACK_PROMPTS: [&str; 6] = [
    "This is an example of a spoof face",
    "This is an example of an attack face",
    "This is not a real face",
    "This is how a spoof face looks like",
    "a photo of a spoof face",
    "a printout shown to be a spoof face",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBank {
    pub live: Vec<String>,
    pub attack: Vec<String>,
}

impl Default for PromptBank {
    fn default() -> Self {
        Self {
            live: LIVE_PROMPTS.iter().map(|s| s.to_string()).collect(),
            attack: ATTACK_PROMPTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PromptBank {
    pub fn validate(&self) -> Result<()> {
        if self.live.len() != 6 || self.attack.len() != 6 {
            return Err(FasError::Validation(format!(
                "prompt bank needs 6 prompts per class, got {} live / {} attack",
                self.live.len(),
                self.attack.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PmnConfig {
    pub input_size: usize,
    pub enc_width: usize,
    pub embed_dim: usize,
    pub feat_dim: usize,
    pub text_vocab: usize,
    /// Initial temperature in log space, `ln(1/0.07)`.
    pub logit_scale_init: f64,
    pub alpha: f64,
    pub beta: f64,
    pub center_rate: f64,
    pub crop: CropSpec,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub prompts: PromptBank,
}

impl Default for PmnConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PmnConfig {
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            enc_width: 16,
            embed_dim: 32,
            feat_dim: 32,
            text_vocab: 512,
            logit_scale_init: (1.0f64 / 0.07).ln(),
            alpha: 0.2,
            beta: 1e-6,
            center_rate: 0.5,
            crop: CropSpec { strategy: CropStrategy::Random, scale_min: 0.2, scale_max: 1.0, output_size: 64 },
            adam: AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            batch_size: 32,
            epochs: 20,
            steps_per_epoch: 20,
            prompts: PromptBank::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            input_size: 224,
            crop: CropSpec { output_size: 224, ..Self::desk().crop },
            adam: AdamConfig { lr: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            batch_size: 1,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FasError::Config(format!("pmn: {m}")));
        if self.input_size < 8 {
            return bad("input_size must be >= 8");
        }
        if self.crop.output_size != self.input_size {
            return bad("crop.output_size must equal input_size");
        }
        self.crop.validate()?;
        if self.alpha < 0.0 || self.beta < 0.0 {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.center_rate >= 0.0 && self.center_rate <= 1.0) {
            return bad("center_rate must be in [0, 1]");
        }
        if self.batch_size == 0 || self.embed_dim == 0 || self.feat_dim == 0 || self.text_vocab == 0 {
            return bad("sizes must be positive");
        }
        self.prompts.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

// ---------------------------------------------------------------------------
// Backbone

#[derive(Clone, Debug)]
struct ImageEncoder {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    fc: Linear,
}

/// Bag-of-hashed-tokens text encoder: mean token embedding, then a linear map.
#[derive(Clone, Debug)]
struct TextEncoder {
    table: ParamId,
    proj: Linear,
    vocab: usize,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(|t| t.to_lowercase()).collect()
}

fn token_id(tok: &str, vocab: usize) -> usize {
    let h = tok.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    (h % vocab as u64) as usize
}

#[derive(Clone, Debug)]
pub struct Pmn<T: Float> {
    pub cfg: PmnConfig,
    pub store: ParamStore<T>,
    img: ImageEncoder,
    text: TextEncoder,
    f: Linear,
    m1: Linear,
    m2: Linear,
    logit_scale: ParamId,
    /// `[2, d]` unit-norm class text embeddings (live, attack).
    pub prompt_means: Tensor<T>,
    /// `[2, d']` class centers of face features.
    pub centers: Tensor<T>,
}

/// Per-step values of the five terms of the objective and their total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PmnLossRecord {
    pub step: u64,
    pub clip: f64,
    pub face: f64,
    pub patch: f64,
    pub center: f64,
    pub l2: f64,
    pub total: f64,
}

impl PmnLossRecord {
    pub const CSV_HEADER: &'static str = "step,clip,face,patch,center,l2,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.clip, self.face, self.patch, self.center, self.l2, self.total
        )
    }
}

/// `clip + face + patch + α·center + β·l2`.
pub fn total_pmn_loss(clip: f64, face: f64, patch: f64, center: f64, l2: f64, alpha: f64, beta: f64) -> f64 {
    clip + face + patch + alpha * center + beta * l2
}

pub fn check_labels(labels: &[usize]) -> Result<()> {
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(FasError::Validation(format!("label {l} outside {{0, 1}}")));
    }
    Ok(())
}

/// Mean over the batch of `½‖f_i − c_{y_i}‖²`.
pub fn center_loss<T: Float>(g: &mut Graph<T>, feats: Var, labels: &[usize], centers: &Tensor<T>) -> Result<Var> {
    check_labels(labels)?;
    let c = g.constant(centers.clone());
    let cy = g.gather0(c, labels);
    let d = g.sub(feats, cy);
    let sq = g.square(d);
    let s = g.sum_axes(sq, &[1]);
    let m = g.mean(s);
    Ok(g.mul_scalar(m, 0.5))
}

/// `c_y ← c_y − rate · mean_{i: y_i = y}(c_y − f_i)`; absent classes keep their center.
pub fn update_centers<T: Float>(centers: &Tensor<T>, feats: &Tensor<T>, labels: &[usize], rate: f64) -> Result<Tensor<T>> {
    check_labels(labels)?;
    let d = centers.shape()[1];
    if feats.shape() != [labels.len(), d] {
        return Err(FasError::Shape(format!("features {:?} vs {} labels of dim {d}", feats.shape(), labels.len())));
    }
    let mut out = centers.clone();
    for k in 0..centers.shape()[0] {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if rows.is_empty() {
            continue;
        }
        for j in 0..d {
            let c = centers.data()[k * d + j].to_f64();
            let mean_gap = rows.iter().map(|&i| c - feats.data()[i * d + j].to_f64()).sum::<f64>() / rows.len() as f64;
            out.data_mut()[k * d + j] = T::from_f64(c - rate * mean_gap);
        }
    }
    Ok(out)
}

/// Cross-entropy of `exp(s) · ⟨x̂, m_k⟩` logits against labels.
pub fn clip_loss<T: Float>(g: &mut Graph<T>, emb: Var, labels: &[usize], means: Var, logit_scale: Var) -> Var {
    let e = g.l2_normalize(emb, NORM_EPS);
    let sim = g.matmul(e, means, true);
    let s = g.exp(logit_scale);
    let logits = g.mul(sim, s);
    g.cross_entropy(logits, labels)
}

fn softmax_attack(row: &[f64]) -> f64 {
    let m = row[0].max(row[1]);
    let (a, b) = ((row[0] - m).exp(), (row[1] - m).exp());
    b / (a + b)
}

/// Attack probability from a pair of face-head logits.
pub fn attack_probability(logits: [f64; 2]) -> f64 {
    softmax_attack(&logits)
}

impl<T: Float> Pmn<T> {
    pub fn new(cfg: PmnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "pmn/init", 0);
        let mut st = ParamStore::new();
        let (w, d, fd) = (cfg.enc_width, cfg.embed_dim, cfg.feat_dim);
        let img = ImageEncoder {
            c1: Conv2d::new(&mut st, "img.c1", 3, w, 3, 2, 1, &mut r),
            c2: Conv2d::new(&mut st, "img.c2", w, 2 * w, 3, 2, 1, &mut r),
            c3: Conv2d::new(&mut st, "img.c3", 2 * w, 2 * w, 3, 2, 1, &mut r),
            fc: Linear::new(&mut st, "img.fc", 2 * w, d, &mut r),
        };
        let table = st.add(
            "txt.table",
            Tensor::from_fn(&[cfg.text_vocab, d], |_| T::from_f64(r.random_range(-1.0..1.0))),
        );
        let proj = Linear::new(&mut st, "txt.proj", d, d, &mut r);
        for id in st.ids_with_prefix("txt.") {
            st.set_trainable(id, false);
        }
        let text = TextEncoder { table, proj, vocab: cfg.text_vocab };
        let f = Linear::new(&mut st, "head.f", d, fd, &mut r);
        let m1 = Linear::new(&mut st, "head.m1", fd, 2, &mut r);
        let m2 = Linear::new(&mut st, "head.m2", fd, 2, &mut r);
        let logit_scale = st.add("logit_scale", Tensor::scalar(T::from_f64(cfg.logit_scale_init)));
        let mut pmn = Self {
            prompt_means: Tensor::zeros(&[2, d]),
            centers: Tensor::zeros(&[2, fd]),
            cfg,
            store: st,
            img,
            text,
            f,
            m1,
            m2,
            logit_scale,
        };
        pmn.prompt_means = pmn.embed_prompts(&pmn.cfg.prompts.clone())?;
        Ok(pmn)
    }

    /// Parameters updated by training: image encoder, heads, logit scale.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.store.trainable(id)).collect()
    }

    /// Text embedding of one prompt.
    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Err(FasError::Validation(format!("empty prompt `{text}`")));
        }
        let d = self.cfg.embed_dim;
        let table = self.store.get(self.text.table);
        let mut mean = vec![0.0; d];
        for t in &toks {
            let row = token_id(t, self.text.vocab);
            for j in 0..d {
                mean[j] += table.data()[row * d + j].to_f64() / toks.len() as f64;
            }
        }
        let w = self.store.get(self.text.proj.w);
        let b = self.store.get(self.text.proj.b);
        Ok((0..d)
            .map(|i| b.data()[i].to_f64() + (0..d).map(|j| w.data()[i * d + j].to_f64() * mean[j]).sum::<f64>())
            .collect())
    }

    /// Normalise each prompt embedding, average per class, re-normalise.
    pub fn embed_prompts(&self, bank: &PromptBank) -> Result<Tensor<T>> {
        let d = self.cfg.embed_dim;
        let mut out = Vec::with_capacity(2 * d);
        for class in [&bank.live, &bank.attack] {
            if class.is_empty() {
                return Err(FasError::Validation("prompt class is empty".into()));
            }
            let mut acc = vec![0.0; d];
            for p in class {
                let e = self.encode_text(p)?;
                let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !n.is_finite() || n == 0.0 {
                    return Err(FasError::Numerical(format!("degenerate text embedding for `{p}`")));
                }
                for (a, v) in acc.iter_mut().zip(&e) {
                    *a += v / n / class.len() as f64;
                }
            }
            let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            out.extend(acc.iter().map(|v| T::from_f64(v / n)));
        }
        Ok(Tensor::new(&[2, d], out)?)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(FasError::Shape(format!("expected [N, 3, {s}, {s}], got {shape:?}")));
        }
        Ok(())
    }

    pub fn image_embed_graph(&self, g: &mut Graph<T>, x: Var) -> Var {
        let st = &self.store;
        let e = &self.img;
        let h = g.mul_scalar(x, 2.0);
        let h = g.add_scalar(h, -1.0);
        let h = e.c1.forward(g, st, h);
        let h = g.leaky_relu(h, SLOPE);
        let h = e.c2.forward(g, st, h);
        let h = g.leaky_relu(h, SLOPE);
        let h = e.c3.forward(g, st, h);
        let h = g.leaky_relu(h, SLOPE);
        let h = g.mean_axes(h, &[2, 3]);
        let h = g.flatten(h);
        e.fc.forward(g, st, h)
    }

    pub fn features_graph(&self, g: &mut Graph<T>, emb: Var) -> Var {
        let h = self.f.forward(g, &self.store, emb);
        g.leaky_relu(h, SLOPE)
    }

    pub fn face_logits_graph(&self, g: &mut Graph<T>, feats: Var) -> Var {
        self.m1.forward(g, &self.store, feats)
    }

    pub fn patch_logits_graph(&self, g: &mut Graph<T>, feats: Var) -> Var {
        self.m2.forward(g, &self.store, feats)
    }

    /// Squared L2 norm of every trainable parameter.
    pub fn l2_graph(&self, g: &mut Graph<T>) -> Var {
        let mut acc: Option<Var> = None;
        for id in self.trainable_ids() {
            let p = g.param(&self.store, id);
            let sq = g.square(p);
            let s = g.sum(sq);
            acc = Some(match acc {
                Some(a) => g.add(a, s),
                None => s,
            });
        }
        acc.unwrap_or_else(|| g.scalar(0.0))
    }

    /// Builds the full objective; returns `(record without step, total var, face features var)`.
    pub fn objective(
        &self,
        g: &mut Graph<T>,
        faces: Var,
        patches: Var,
        labels: &[usize],
    ) -> Result<(PmnLossRecord, Var, Var)> {
        check_labels(labels)?;
        let e = self.image_embed_graph(g, faces);
        let f = self.features_graph(g, e);
        let means = g.constant(self.prompt_means.clone());
        let ls = g.param(&self.store, self.logit_scale);
        let clip = clip_loss(g, e, labels, means, ls);
        let fl = self.face_logits_graph(g, f);
        let face = g.cross_entropy(fl, labels);
        let ep = self.image_embed_graph(g, patches);
        let fp = self.features_graph(g, ep);
        let pl = self.patch_logits_graph(g, fp);
        let patch = g.cross_entropy(pl, labels);
        let center = center_loss(g, f, labels, &self.centers)?;
        let l2 = self.l2_graph(g);
        let ca = g.mul_scalar(center, self.cfg.alpha);
        let lb = g.mul_scalar(l2, self.cfg.beta);
        let t = g.add(clip, face);
        let t = g.add(t, patch);
        let t = g.add(t, ca);
        let total = g.add(t, lb);
        let v = |x: Var| g.value(x).item().to_f64();
        let rec = PmnLossRecord {
            step: 0,
            clip: v(clip),
            face: v(face),
            patch: v(patch),
            center: v(center),
            l2: v(l2),
            total: v(total),
        };
        Ok((rec, total, f))
    }

    /// Face-head logits `[N, 2]`; never touches the patch head or the text side.
    pub fn face_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        g.set_freeze_params(true);
        let xv = g.constant(x.clone());
        let e = self.image_embed_graph(&mut g, xv);
        let f = self.features_graph(&mut g, e);
        let l = self.face_logits_graph(&mut g, f);
        Ok(g.value(l).clone())
    }

    /// Attack probability per image.
    pub fn score(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let l = self.face_logits(x)?;
        Ok(l.data().chunks(2).map(|r| softmax_attack(&[r[0].to_f64(), r[1].to_f64()])).collect())
    }

    pub fn score_images(&self, images: &[&Image], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let t = Image::batch(part)?.cast::<T>();
            out.extend(self.score(&t)?);
        }
        Ok(out)
    }

    pub fn logit_scale(&self) -> f64 {
        self.store.get(self.logit_scale).item().to_f64()
    }

    pub fn patch_head_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("head.m2.")
    }

    pub fn text_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("txt.")
    }
}

// ---------------------------------------------------------------------------
// Training

pub struct PmnTrainer<T: Float> {
    pub model: Pmn<T>,
    pub opt: Adam<T>,
    pub step: u64,
    pub history: Vec<PmnLossRecord>,
    seed: u64,
    rng: Rng,
}

/// One labelled training image at the model's input size.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub image: Image,
    pub label: Label,
}

impl<T: Float> PmnTrainer<T> {
    pub fn new(cfg: PmnConfig, seed: u64) -> Result<Self> {
        let model = Pmn::new(cfg, seed)?;
        Ok(Self::from_model(model, seed))
    }

    pub fn from_model(model: Pmn<T>, seed: u64) -> Self {
        let opt = Adam::new(model.cfg.adam, &model.store, model.trainable_ids());
        Self { model, opt, step: 0, history: Vec::new(), seed, rng: rng::stream(seed, "pmn/train", 0) }
    }

    /// Optimizer step on the objective, then the center update with the
    /// pre-step face features.
    pub fn train_step(&mut self, faces: &Tensor<T>, patches: &Tensor<T>, labels: &[usize]) -> Result<PmnLossRecord> {
        self.model.check_input(faces.shape())?;
        self.model.check_input(patches.shape())?;
        if faces.shape()[0] != labels.len() || patches.shape()[0] != labels.len() {
            return Err(FasError::Shape("face batch, patch batch and labels must have equal length".into()));
        }
        let mut g = Graph::new();
        let fv = g.constant(faces.clone());
        let pv = g.constant(patches.clone());
        let (mut rec, total, feats) = self.model.objective(&mut g, fv, pv, labels)?;
        if !rec.total.is_finite() {
            return Err(FasError::Numerical(format!("non-finite pmn loss at step {}: {rec:?}", self.step)));
        }
        let grads = g.backward(total);
        self.opt.step(&mut self.model.store, &grads);
        if !self.model.store.all_finite() {
            return Err(FasError::Numerical(format!("non-finite pmn parameters after step {}", self.step)));
        }
        self.model.centers =
            update_centers(&self.model.centers, g.value(feats), labels, self.model.cfg.center_rate)?;
        self.step += 1;
        rec.step = self.step;
        self.history.push(rec);
        Ok(rec)
    }

    /// Draws a batch with replacement plus one patch per drawn image.
    pub fn sample_batch(&mut self, data: &[TrainItem]) -> Result<(Tensor<T>, Tensor<T>, Vec<usize>)> {
        if data.is_empty() {
            return Err(FasError::Precondition("empty training set".into()));
        }
        let bs = self.model.cfg.batch_size;
        let idx: Vec<usize> = (0..bs).map(|_| self.rng.random_range(0..data.len())).collect();
        let base: u64 = self.rng.random();
        let spec = self.model.cfg.crop;
        let seed = self.seed;
        let patches = fas_nn::par::map_indexed(bs, |k| {
            let mut r = rng::stream(seed, "pmn/patch", base.wrapping_add(k as u64));
            extract_patch(&data[idx[k]].image, &spec, &mut r)
        });
        let patches = patches.into_iter().collect::<Result<Vec<_>>>()?;
        let faces: Vec<&Image> = idx.iter().map(|&i| &data[i].image).collect();
        let labels = idx.iter().map(|&i| data[i].label.index()).collect();
        let pr: Vec<&Image> = patches.iter().collect();
        Ok((Image::batch(&faces)?.cast(), Image::batch(&pr)?.cast(), labels))
    }

    /// Trains for the configured epochs, calling `on_epoch(trainer, epoch)`
    /// (1-based) after each one.
    pub fn fit(&mut self, data: &[TrainItem], mut on_epoch: impl FnMut(&Self, usize) -> Result<()>) -> Result<()> {
        for epoch in 1..=self.model.cfg.epochs {
            for _ in 0..self.model.cfg.steps_per_epoch {
                let (f, p, y) = self.sample_batch(data)?;
                self.train_step(&f, &p, &y)?;
            }
            on_epoch(self, epoch)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path, config_hash: &str, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "pmn",
            "config_hash": config_hash,
            "step": self.step,
            "seed": self.seed,
            "config": self.model.cfg,
            "extra": extra,
        });
        let mut a = Archive::new(meta);
        for (_, name, t) in self.model.store.iter() {
            a.insert(&format!("param.{name}"), t);
        }
        for (n, t) in self.opt.state("opt", &self.model.store) {
            a.insert(&n, &t);
        }
        a.insert("opt.step", &Tensor::<f64>::scalar(self.opt.step as f64));
        a.insert("prompt_means", &self.model.prompt_means);
        a.insert("centers", &self.model.centers);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| FasError::io(dir, e))?;
        }
        a.save(path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path, config_hash: &str, force: bool) -> Result<Self> {
        let a = Archive::load(path)?;
        let meta = &a.meta;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("pmn") {
            return Err(FasError::Checkpoint(format!("{} is not a pmn checkpoint", path.display())));
        }
        let stored = meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or("");
        if stored != config_hash && !force {
            return Err(FasError::Checkpoint(format!(
                "{}: config hash {stored} does not match current {config_hash} (use --force to override)",
                path.display()
            )));
        }
        let cfg: PmnConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| FasError::Checkpoint(format!("bad embedded config: {e}")))?;
        let seed = meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut model = Pmn::<T>::new(cfg, seed)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t = a
                .get::<T>(&format!("param.{name}"))
                .ok_or_else(|| FasError::Checkpoint(format!("missing tensor param.{name}")))?;
            model.store.set(id, t).map_err(|e| FasError::Checkpoint(format!("{name}: {e}")))?;
        }
        model.prompt_means = a.get("prompt_means").ok_or_else(|| FasError::Checkpoint("missing prompt_means".into()))?;
        model.centers = a.get("centers").ok_or_else(|| FasError::Checkpoint("missing centers".into()))?;
        let mut tr = Self::from_model(model, seed);
        if !tr.opt.load_state("opt", &tr.model.store, |n| a.get::<T>(n)) {
            return Err(FasError::Checkpoint("optimizer state incomplete".into()));
        }
        tr.opt.step = a.get::<f64>("opt.step").map(|t| t.item() as u64).unwrap_or(0);
        tr.step = meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        tr.rng = rng::stream(seed, "pmn/train", tr.step);
        Ok(tr)
    }
}
