//! `fas` command line: benchmark generation, PCGAN training and conversion,
//! PMN training with per-epoch score files, evaluation and figures.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;

use crate::artifactviz::{self, detect_lines, sobel_magnitude_rgb, to_gray, Panel, PanelContent};
use crate::config::{Config, Profile, REVISION};
use crate::datapipe::{
    crop_face, load_manifest, make_synthetic_benchmark, merge_sets, DatasetManifest, FaceSample, Label, ManifestEntry,
    Provenance,
};
use crate::error::{FasError, Result};
use crate::eval::{self, Averaging, ProtocolSpec, ScoreRecord, ScoreSet};
use crate::image::Image;
use crate::pcgan::{inject_artifact, remove_artifact, LossRecord, PcganTrainer};
use crate::pmn::{PmnTrainer, TrainItem};
use crate::rng;

#[derive(Debug, Parser)]
#[command(name = "fas", version = REVISION, about = "Synthesized spoof-artifact augmentation for face anti-spoofing")]
pub struct Cli {
    /// TOML config; keys override the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// desk or paper.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Output root. Each command writes into its own subdirectory.
    #[arg(long, global = true, env = "FAS_OUT", default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural two-domain moire benchmark.
    SynthData,
    /// Train the pattern-conversion GAN.
    TrainPcgan(TrainPcganArgs),
    /// Inject and remove artifact patterns with a trained PCGAN.
    Convert(ConvertArgs),
    /// Train the patch multi-task detector and score the test domain each epoch.
    TrainPmn(TrainPmnArgs),
    /// Compute best-epoch and last-k reports from per-epoch score files.
    Evaluate(EvaluateArgs),
    /// Conversion figures, Sobel panels and Hough line tables.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct TrainPcganArgs {
    /// Defaults to <out>/data/manifest.tsv.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Domains to train on (default: all).
    #[arg(long, value_delimiter = ',')]
    pub domains: Vec<String>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Accept a checkpoint whose config hash differs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Defaults to <out>/pcgan/pcgan.ckpt.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Domains to convert (default: those the checkpoint was trained on).
    #[arg(long, value_delimiter = ',')]
    pub domains: Vec<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainPmnArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Synthetic manifests to merge into the training set.
    #[arg(long)]
    pub extra: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub train_domains: Vec<String>,
    /// Default: the last domain in sorted order.
    #[arg(long)]
    pub test_domain: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Subdirectory of <out> for this run (default "pmn").
    #[arg(long, default_value = "pmn")]
    pub run_name: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directories holding epoch_<n>.scores (default <out>/pmn).
    #[arg(long)]
    pub scores: Vec<PathBuf>,
    /// best or last<k>, e.g. last10.
    #[arg(long)]
    pub mode: Option<String>,
    /// eer or a fixed threshold value.
    #[arg(long)]
    pub threshold: Option<String>,
    /// Used when a score directory has no protocol.json.
    #[arg(long)]
    pub test_domain: Option<String>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub pairs: usize,
}

/// Parses `args`, runs the command and returns the process exit code. Errors
/// are reported as a single JSON line on stderr.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            report_error("usage", 1, &e.render().to_string());
            return 1;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            report_error(e.kind(), code, &e.to_string());
            code
        }
    }
}

fn report_error(kind: &str, code: i32, msg: &str) {
    let line = serde_json::json!({ "error": kind, "code": code, "message": msg.trim() });
    eprintln!("{line}");
}

pub fn run(cli: Cli) -> Result<()> {
    let profile = cli.profile.as_deref().map(Profile::parse).transpose()?;
    let mut cfg = Config::load(cli.config.as_deref(), profile)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out;
    match cli.command {
        Command::SynthData => cmd_synth_data(&cfg, &out),
        Command::TrainPcgan(a) => cmd_train_pcgan(cfg, &out, a),
        Command::Convert(a) => cmd_convert(&cfg, &out, a),
        Command::TrainPmn(a) => cmd_train_pmn(cfg, &out, a),
        Command::Evaluate(a) => cmd_evaluate(cfg, &out, a),
        Command::Viz(a) => cmd_viz(&cfg, &out, a),
    }
}

// ---------------------------------------------------------------------------
// Helpers

fn create_dir(d: &Path) -> Result<()> {
    std::fs::create_dir_all(d).map_err(|e| FasError::io(d, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        create_dir(d)?;
    }
    std::fs::write(path, text).map_err(|e| FasError::io(path, e))
}

fn with_header(header: &[String], body: &str) -> String {
    let mut s = String::new();
    for h in header {
        let _ = writeln!(s, "# {h}");
    }
    s.push_str(body);
    s
}

/// Writes the effective config next to a command's outputs.
fn write_run_config(dir: &Path, cfg: &Config) -> Result<()> {
    write_file(&dir.join("config.toml"), &with_header(&cfg.header_lines(), &cfg.to_toml()))
}

fn default_manifest(out: &Path, m: &Option<PathBuf>) -> PathBuf {
    m.clone().unwrap_or_else(|| out.join("data").join("manifest.tsv"))
}

fn default_pcgan_ckpt(out: &Path, c: &Option<PathBuf>) -> PathBuf {
    c.clone().unwrap_or_else(|| out.join("pcgan").join("pcgan.ckpt"))
}

fn domains_of(m: &DatasetManifest) -> Vec<String> {
    m.domain_counts().into_keys().collect()
}

fn check_domains(m: &DatasetManifest, want: &[String]) -> Result<()> {
    let have = domains_of(m);
    for d in want {
        if !have.contains(d) {
            return Err(FasError::Validation(format!("domain `{d}` not in manifest (have {})", have.join(","))));
        }
    }
    Ok(())
}

/// Loads images at `size`, face-cropping first when configured.
fn load_at_size(m: &DatasetManifest, cfg: &Config, size: usize) -> Result<Vec<FaceSample>> {
    let samples = m.load_samples()?;
    samples
        .into_iter()
        .map(|s| {
            if cfg.data.crop_faces && s.bbox.is_some() {
                crop_face(&s, cfg.data.padding, size)
            } else if s.image.height() != size || s.image.width() != size {
                let mut s = s;
                s.image = s.image.resize(size, size);
                Ok(s)
            } else {
                Ok(s)
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_synth_data(cfg: &Config, out: &Path) -> Result<()> {
    let dir = out.join("data");
    let m = make_synthetic_benchmark(&cfg.benchmark, cfg.seed, &dir, &cfg.header_lines())?;
    write_run_config(&dir, cfg)?;
    let c = m.label_counts();
    eprintln!("wrote {} samples ({} live, {} attack) to {}", m.len(), c.live, c.attack, dir.display());
    Ok(())
}

pub fn cmd_train_pcgan(mut cfg: Config, out: &Path, a: TrainPcganArgs) -> Result<()> {
    if let Some(n) = a.iterations {
        cfg.pcgan.iterations = n;
    }
    cfg.validate()?;
    let dir = out.join("pcgan");
    let manifest = load_manifest(&default_manifest(out, &a.manifest))?;
    let domains = if a.domains.is_empty() { domains_of(&manifest) } else { a.domains.clone() };
    check_domains(&manifest, &domains)?;
    let m = manifest.filter_domains(&domains);
    let samples = load_at_size(&m, &cfg, cfg.pcgan.image_size)?;
    if samples.len() < 2 {
        return Err(FasError::Precondition("pcgan training needs at least two images".into()));
    }
    let imgs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let data = Image::batch(&imgs)?;
    let hash = cfg.pcgan_hash();
    let mut tr = match &a.resume {
        Some(p) => PcganTrainer::<f32>::load_checkpoint(p, &hash, a.force)?,
        None => PcganTrainer::<f32>::new(cfg.pcgan.clone(), cfg.seed)?,
    };
    create_dir(&dir)?;
    write_run_config(&dir, &cfg)?;
    let csv_path = dir.join("losses.csv");
    let mut kept = Vec::new();
    if a.resume.is_some() {
        // Keep the rows logged up to the resumed iteration.
        if let Ok(text) = std::fs::read_to_string(&csv_path) {
            for line in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("iteration")) {
                let it: u64 = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
                if it <= tr.iteration {
                    kept.push(line.to_string());
                }
            }
        }
    }
    let mut csv = String::new();
    for h in cfg.header_lines() {
        let _ = writeln!(csv, "# {h}");
    }
    let _ = writeln!(csv, "{}", LossRecord::CSV_HEADER);
    for l in &kept {
        let _ = writeln!(csv, "{l}");
    }
    let file = std::fs::File::create(&csv_path).map_err(|e| FasError::io(&csv_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(csv.as_bytes()).map_err(|e| FasError::io(&csv_path, e))?;
    let extra = serde_json::json!({ "domains": domains, "revision": REVISION, "run_hash": cfg.hash() });
    let every = cfg.pcgan.checkpoint_every;
    let total = cfg.pcgan.iterations;
    tr.fit(&data, total, |t, r| {
        writeln!(w, "{}", r.csv_row()).map_err(|e| FasError::io(&csv_path, e))?;
        if r.iteration % 50 == 0 || r.iteration == total {
            eprintln!(
                "pcgan {:>5}/{total} total {:.4} rec {:.4} adv {:.3}/{:.3} pat {:.3} disc {:.3} patch {:.3}",
                r.iteration, r.total, r.rec, r.adv_rec, r.adv_mix, r.pat, r.disc, r.patch_disc
            );
        }
        if every > 0 && r.iteration % every == 0 {
            w.flush().map_err(|e| FasError::io(&csv_path, e))?;
            t.save_checkpoint(&dir.join(format!("ckpt_{}.ckpt", r.iteration)), &hash, extra.clone())?;
        }
        Ok(())
    })?;
    w.flush().map_err(|e| FasError::io(&csv_path, e))?;
    tr.save_checkpoint(&dir.join("pcgan.ckpt"), &hash, extra)?;
    eprintln!("pcgan checkpoint: {}", dir.join("pcgan.ckpt").display());
    Ok(())
}

fn checkpoint_domains(path: &Path) -> Vec<String> {
    fas_nn::archive::Archive::load(path)
        .ok()
        .and_then(|a| a.meta.get("extra")?.get("domains")?.as_array().cloned())
        .map(|v| v.iter().filter_map(|d| d.as_str().map(String::from)).collect())
        .unwrap_or_default()
}

pub fn cmd_convert(cfg: &Config, out: &Path, a: ConvertArgs) -> Result<()> {
    let ckpt = default_pcgan_ckpt(out, &a.checkpoint);
    let tr = PcganTrainer::<f32>::load_checkpoint(&ckpt, &cfg.pcgan_hash(), a.force)?;
    let manifest = load_manifest(&default_manifest(out, &a.manifest))?;
    let domains = if !a.domains.is_empty() {
        a.domains.clone()
    } else {
        let d = checkpoint_domains(&ckpt);
        if d.is_empty() { domains_of(&manifest) } else { d }
    };
    check_domains(&manifest, &domains)?;
    let m = manifest.filter_domains(&domains);
    let samples = load_at_size(&m, cfg, tr.model.cfg.image_size)?;
    let dir = out.join("synth");
    let stamp = cfg.stamp();
    let mut synth = DatasetManifest::new("synthetic", &dir);
    let mut by_domain: BTreeMap<&str, (Vec<&FaceSample>, Vec<&FaceSample>)> = BTreeMap::new();
    for s in &samples {
        let e = by_domain.entry(s.domain.as_str()).or_default();
        if s.label == Label::Live { e.0.push(s) } else { e.1.push(s) }
    }
    for (dom, (live, atk)) in by_domain {
        let n = live.len().min(atk.len());
        if n < live.len().max(atk.len()) {
            eprintln!(
                "warning: domain {dom}: {} live / {} attack, pairing exhausted after {n} conversions per direction",
                live.len(),
                atk.len()
            );
        }
        let mut r = rng::stream(cfg.seed, &format!("convert/{dom}"), 0);
        let mut pa: Vec<usize> = (0..atk.len()).collect();
        pa.shuffle(&mut r);
        let mut pl: Vec<usize> = (0..live.len()).collect();
        pl.shuffle(&mut r);
        let mut jobs: Vec<(String, FaceSample)> = Vec::new();
        if cfg.convert.inject {
            for k in 0..n {
                jobs.push((format!("inject_{k:04}"), inject_artifact(&tr.model, live[k], atk[pa[k]])?));
            }
        }
        if cfg.convert.remove {
            for k in 0..n {
                jobs.push((format!("remove_{k:04}"), remove_artifact(&tr.model, atk[k], live[pl[k]])?));
            }
        }
        for (name, s) in jobs {
            let rel = PathBuf::from("images").join(dom).join(format!("{name}.png"));
            s.image.save_png_stamped(&dir.join(&rel), &stamp)?;
            synth.entries.push(ManifestEntry {
                path: rel,
                label: s.label,
                domain: s.domain.clone(),
                attack_type: s.attack_type.clone(),
                identity: s.identity.clone(),
                provenance: Provenance::Synthesized,
                bbox: None,
            });
        }
    }
    synth.write(&dir.join("synthetic.tsv"), &cfg.header_lines())?;
    write_run_config(&dir, cfg)?;
    let c = synth.label_counts();
    eprintln!("wrote {} synthetic samples ({} live, {} attack) to {}", synth.len(), c.live, c.attack, dir.display());
    Ok(())
}

fn parse_mode(s: &str) -> Result<(Averaging, Option<usize>)> {
    if s == "best" || s == "best_epoch" {
        return Ok((Averaging::BestEpoch, None));
    }
    if let Some(k) = s.strip_prefix("last") {
        let k = k.trim_start_matches(['-', '_']);
        if k.is_empty() {
            return Ok((Averaging::LastK, None));
        }
        let k: usize = k.parse().map_err(|_| FasError::Usage(format!("bad --mode `{s}`")))?;
        return Ok((Averaging::LastK, Some(k)));
    }
    Err(FasError::Usage(format!("bad --mode `{s}` (expected best or last<k>)")))
}

fn parse_threshold(s: &str) -> Result<eval::ThresholdRule> {
    if s == "eer" {
        return Ok(eval::ThresholdRule::Eer);
    }
    s.parse::<f64>()
        .map(eval::ThresholdRule::Fixed)
        .map_err(|_| FasError::Usage(format!("bad --threshold `{s}` (expected eer or a number)")))
}

pub fn cmd_train_pmn(mut cfg: Config, out: &Path, a: TrainPmnArgs) -> Result<()> {
    if let Some(v) = a.alpha {
        cfg.pmn.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.pmn.beta = v;
    }
    if let Some(e) = a.epochs {
        cfg.pmn.epochs = e;
    }
    cfg.validate()?;
    let manifest = load_manifest(&default_manifest(out, &a.manifest))?;
    let all = domains_of(&manifest);
    let test = match &a.test_domain {
        Some(t) => t.clone(),
        None => all.last().cloned().ok_or_else(|| FasError::Validation("manifest is empty".into()))?,
    };
    let train_domains: Vec<String> =
        if a.train_domains.is_empty() { all.iter().filter(|d| **d != test).cloned().collect() } else { a.train_domains.clone() };
    check_domains(&manifest, &train_domains)?;
    check_domains(&manifest, std::slice::from_ref(&test))?;
    let k = cfg.eval.k.min(cfg.pmn.epochs);
    let spec = ProtocolSpec {
        name: format!("{}→{test}", train_domains.concat()),
        train_domains: train_domains.clone(),
        test_domain: test.clone(),
        epochs: cfg.pmn.epochs,
        averaging: cfg.eval.averaging,
        k,
    };
    spec.validate()?;

    let mut train_m = manifest.filter_domains(&train_domains);
    for p in &a.extra {
        let extra = load_manifest(p)?.filter_domains(&train_domains);
        train_m = merge_sets(&train_m, &extra)?;
    }
    let test_m = manifest.filter_domains(std::slice::from_ref(&test));
    let size = cfg.pmn.input_size;
    let train: Vec<TrainItem> =
        load_at_size(&train_m, &cfg, size)?.into_iter().map(|s| TrainItem { image: s.image, label: s.label }).collect();
    let test_s = load_at_size(&test_m, &cfg, size)?;
    let test_imgs: Vec<&Image> = test_s.iter().map(|s| &s.image).collect();

    let dir = out.join(&a.run_name);
    create_dir(&dir)?;
    write_run_config(&dir, &cfg)?;
    let spec_json = serde_json::to_string_pretty(&spec).expect("protocol serializes");
    write_file(&dir.join("protocol.json"), &(spec_json + "\n"))?;
    let header = cfg.header_lines();
    let mut tr = PmnTrainer::<f32>::new(cfg.pmn.clone(), cfg.seed)?;
    eprintln!(
        "pmn {}: {} train ({} synthetic), {} test, {} epochs x {} steps",
        spec.name,
        train.len(),
        train_m.entries.iter().filter(|e| e.provenance == Provenance::Synthesized).count(),
        test_s.len(),
        cfg.pmn.epochs,
        cfg.pmn.steps_per_epoch
    );
    tr.fit(&train, |t, epoch| {
        let scores = t.model.score_images(&test_imgs, 64)?;
        let set = ScoreSet::new(
            test_m
                .entries
                .iter()
                .zip(&scores)
                .map(|(e, &score)| ScoreRecord {
                    path: e.path.display().to_string(),
                    score,
                    label: e.label,
                    domain: e.domain.clone(),
                })
                .collect(),
        );
        let mut h = header.clone();
        h.push(format!("protocol={} epoch={epoch}", spec.name));
        write_file(&eval::epoch_file(&dir, epoch), &with_header(&h, &set.to_text()))?;
        let last = t.history.last().map(|r| r.total).unwrap_or(f64::NAN);
        let auc = eval::auc(&set).map(|v| format!("{v:.4}")).unwrap_or_else(|_| "-".into());
        eprintln!("pmn epoch {epoch:>3} loss {last:.4} test auc {auc}");
        Ok(())
    })?;
    let mut csv = with_header(&header, crate::pmn::PmnLossRecord::CSV_HEADER);
    csv.push('\n');
    for r in &tr.history {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_file(&dir.join("losses.csv"), &csv)?;
    let extra = serde_json::json!({ "protocol": spec, "revision": REVISION, "alpha": cfg.pmn.alpha, "beta": cfg.pmn.beta });
    tr.save_checkpoint(&dir.join("pmn.ckpt"), &cfg.hash(), extra)?;
    Ok(())
}

pub fn cmd_evaluate(cfg: Config, out: &Path, a: EvaluateArgs) -> Result<()> {
    let dirs = if a.scores.is_empty() { vec![out.join("pmn")] } else { a.scores.clone() };
    let rule = match &a.threshold {
        Some(t) => parse_threshold(t)?,
        None => cfg.eval.threshold,
    };
    let mode = a.mode.as_deref().map(parse_mode).transpose()?;
    let mut reports = Vec::new();
    for d in &dirs {
        let pj = d.join("protocol.json");
        let mut spec: ProtocolSpec = if pj.exists() {
            let text = std::fs::read_to_string(&pj).map_err(|e| FasError::io(&pj, e))?;
            serde_json::from_str(&text).map_err(|e| FasError::Parse { path: pj.clone(), line: 1, msg: e.to_string() })?
        } else {
            let test = a
                .test_domain
                .clone()
                .ok_or_else(|| FasError::Usage(format!("{} has no protocol.json; pass --test-domain", d.display())))?;
            let epochs = eval::count_epochs(d);
            if epochs == 0 {
                return Err(FasError::Protocol(format!("no epoch_<n>.scores files in {}", d.display())));
            }
            ProtocolSpec {
                name: format!("→{test}"),
                train_domains: Vec::new(),
                test_domain: test,
                epochs,
                averaging: cfg.eval.averaging,
                k: cfg.eval.k.min(epochs),
            }
        };
        if let Some((avg, k)) = mode {
            spec.averaging = avg;
            if let Some(k) = k {
                spec.k = k;
            }
        }
        reports.push(eval::run_protocol(&spec, d, rule)?);
    }
    let dir = out.join("report");
    let header = cfg.header_lines();
    let table = eval::report_table(&reports);
    write_file(&dir.join("report.csv"), &with_header(&header, &eval::report_csv(&reports)))?;
    write_file(&dir.join("report.txt"), &with_header(&header, &table))?;
    let json = serde_json::json!({ "stamp": cfg.stamp(), "reports": reports });
    write_file(&dir.join("report.json"), &(serde_json::to_string_pretty(&json).expect("report serializes") + "\n"))?;
    print!("{table}");
    Ok(())
}

pub fn cmd_viz(cfg: &Config, out: &Path, a: VizArgs) -> Result<()> {
    let ckpt = default_pcgan_ckpt(out, &a.checkpoint);
    let tr = PcganTrainer::<f32>::load_checkpoint(&ckpt, &cfg.pcgan_hash(), true)?;
    let manifest = load_manifest(&default_manifest(out, &a.manifest))?;
    let domain = match &a.domain {
        Some(d) => d.clone(),
        None => checkpoint_domains(&ckpt)
            .into_iter()
            .next()
            .or_else(|| domains_of(&manifest).into_iter().next())
            .ok_or_else(|| FasError::Validation("manifest is empty".into()))?,
    };
    check_domains(&manifest, std::slice::from_ref(&domain))?;
    let samples = load_at_size(&manifest.filter_domains(std::slice::from_ref(&domain)), cfg, tr.model.cfg.image_size)?;
    let live: Vec<&FaceSample> = samples.iter().filter(|s| s.label == Label::Live).collect();
    let atk: Vec<&FaceSample> = samples.iter().filter(|s| s.label == Label::Attack).collect();
    let n = a.pairs.min(live.len()).min(atk.len());
    if n < a.pairs {
        eprintln!("warning: only {n} live/attack pairs available in domain {domain}");
    }
    let dir = out.join("viz");
    create_dir(&dir)?;
    let stamp = cfg.stamp();
    let freq = cfg.benchmark.domain(&domain).map_or(cfg.viz.overlay_freq, |d| d.overlay_freq);
    let mut summary = with_header(
        &cfg.header_lines(),
        "pair,band_live,band_attack,band_inject,band_remove,lines_live,lines_attack,lines_inject,lines_remove\n",
    );
    for k in 0..n {
        let inj = inject_artifact(&tr.model, live[k], atk[k])?;
        let rem = remove_artifact(&tr.model, atk[k], live[k])?;
        let imgs = [("live", &live[k].image), ("attack", &atk[k].image), ("inject", &inj.image), ("remove", &rem.image)];
        let rgb: Vec<Panel> =
            imgs.iter().map(|(t, i)| Panel { title: t.to_string(), content: PanelContent::Rgb((*i).clone()) }).collect();
        artifactviz::emit_figure(&rgb, &dir.join(format!("conversion_{k}.png")), Some(&stamp))?;
        let mut sob = Vec::new();
        let mut bands = Vec::new();
        let mut counts = Vec::new();
        let mut lines_csv = with_header(&cfg.header_lines(), "image,rho,theta,votes\n");
        for (t, i) in &imgs {
            let m = sobel_magnitude_rgb(i, true)?;
            bands.push(artifactviz::spectral_band_energy(&m, freq, cfg.viz.band_rel));
            sob.push(Panel { title: format!("sobel {t}"), content: PanelContent::Map(m) });
            let ls = detect_lines(&to_gray(i), &cfg.viz.lines)?;
            counts.push(ls.len());
            for l in &ls.lines {
                let _ = writeln!(lines_csv, "{t},{:.3},{:.6},{}", l.rho, l.theta, l.votes);
            }
        }
        artifactviz::emit_figure(&sob, &dir.join(format!("sobel_{k}.png")), Some(&stamp))?;
        write_file(&dir.join(format!("lines_{k}.csv")), &lines_csv)?;
        let _ = writeln!(
            summary,
            "{k},{:.6e},{:.6e},{:.6e},{:.6e},{},{},{},{}",
            bands[0], bands[1], bands[2], bands[3], counts[0], counts[1], counts[2], counts[3]
        );
    }
    write_file(&dir.join("summary.csv"), &summary)?;
    eprintln!("wrote {n} conversion figures to {}", dir.display());
    Ok(())
}
