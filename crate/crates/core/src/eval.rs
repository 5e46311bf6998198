//! APCER / BPCER / ACER / AUC, equal-error thresholding, per-epoch protocol
//! reports and last-k averaging. Attack is the positive class: higher
//! scores mean "more attack-like".

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::Label;
use crate::error::{FasError, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub path: String,
    pub score: f64,
    pub label: Label,
    pub domain: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ScoreSet {
    pub records: Vec<ScoreRecord>,
}

impl ScoreSet {
    pub fn new(records: Vec<ScoreRecord>) -> Self {
        Self { records }
    }

    pub fn from_pairs(scores: &[f64], labels: &[Label]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(FasError::Metric(format!("{} scores vs {} labels", scores.len(), labels.len())));
        }
        Ok(Self {
            records: scores
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&score, &label))| ScoreRecord { path: format!("item{i}"), score, label, domain: "-".into() })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn filter_domain(&self, domain: &str) -> Self {
        Self { records: self.records.iter().filter(|r| r.domain == domain).cloned().collect() }
    }

    fn split(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut atk = Vec::new();
        let mut live = Vec::new();
        for r in &self.records {
            if !r.score.is_finite() {
                return Err(FasError::Metric(format!("non-finite score for {}", r.path)));
            }
            match r.label {
                Label::Attack => atk.push(r.score),
                Label::Live => live.push(r.score),
            }
        }
        if atk.is_empty() || live.is_empty() {
            return Err(FasError::Metric(format!(
                "metrics need both classes ({} attack, {} live)",
                atk.len(),
                live.len()
            )));
        }
        Ok((atk, live))
    }

    /// One `path score label domain` line per record.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(s, "{} {:.9} {} {}", r.path, r.score, r.label.as_str(), r.domain);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d).map_err(|e| FasError::io(d, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| FasError::io(path, e))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(FasError::Parse { path: path.into(), line: ln, msg: format!("expected 4 fields, got {}", f.len()) });
            }
            let score: f64 = f[1]
                .parse()
                .map_err(|_| FasError::Parse { path: path.into(), line: ln, msg: format!("bad score `{}`", f[1]) })?;
            let label = Label::parse(f[2])
                .ok_or_else(|| FasError::Label { path: path.into(), line: ln, label: f[2].to_string() })?;
            records.push(ScoreRecord { path: f[0].to_string(), score, label, domain: f[3].to_string() });
        }
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FasError::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// `(APCER, BPCER)` at `threshold`: attacks scored below it, lives at or above it.
pub fn apcer_bpcer(set: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    let (atk, live) = set.split()?;
    Ok(rates(&atk, &live, threshold))
}

fn rates(atk: &[f64], live: &[f64], t: f64) -> (f64, f64) {
    let a = atk.iter().filter(|&&s| s < t).count() as f64 / atk.len() as f64;
    let b = live.iter().filter(|&&s| s >= t).count() as f64 / live.len() as f64;
    (a, b)
}

pub fn acer(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

/// Mann–Whitney AUC with ties counted one half.
pub fn auc(set: &ScoreSet) -> Result<f64> {
    let (atk, live) = set.split()?;
    let mut all: Vec<(f64, bool)> = atk.iter().map(|&s| (s, true)).chain(live.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (na, nl) = (atk.len() as f64, live.len() as f64);
    Ok((rank_sum - na * (na + 1.0) / 2.0) / (na * nl))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Test-set equal-error point over midpoints of sorted unique scores.
    Eer,
    Fixed(f64),
}

impl ThresholdRule {
    pub fn name(&self) -> String {
        match self {
            ThresholdRule::Eer => "eer".into(),
            ThresholdRule::Fixed(t) => format!("fixed:{t}"),
        }
    }
}

/// Threshold minimising `|APCER − BPCER|`, lower candidate on ties.
pub fn select_threshold(set: &ScoreSet) -> Result<f64> {
    let (atk, live) = set.split()?;
    let mut u: Vec<f64> = atk.iter().chain(&live).copied().collect();
    u.sort_by(|a, b| a.total_cmp(b));
    u.dedup();
    if u.len() == 1 {
        return Ok(u[0]);
    }
    let mut best = (f64::INFINITY, u[0]);
    for w in u.windows(2) {
        let t = (w[0] + w[1]) / 2.0;
        let (a, b) = rates(&atk, &live, t);
        let gap = (a - b).abs();
        if gap < best.0 {
            best = (gap, t);
        }
    }
    Ok(best.1)
}

pub fn threshold_for(set: &ScoreSet, rule: ThresholdRule) -> Result<f64> {
    match rule {
        ThresholdRule::Eer => select_threshold(set),
        ThresholdRule::Fixed(t) => Ok(t),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub auc: f64,
    pub threshold: f64,
}

pub fn epoch_metrics(epoch: usize, set: &ScoreSet, rule: ThresholdRule) -> Result<EpochMetrics> {
    let threshold = threshold_for(set, rule)?;
    let (apcer, bpcer) = apcer_bpcer(set, threshold)?;
    Ok(EpochMetrics { epoch, apcer, bpcer, acer: acer(apcer, bpcer), auc: auc(set)?, threshold })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    BestEpoch,
    LastK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub name: String,
    pub train_domains: Vec<String>,
    pub test_domain: String,
    pub epochs: usize,
    pub averaging: Averaging,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    10
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_domains.iter().any(|d| d == &self.test_domain) {
            return Err(FasError::Protocol(format!("{}: test domain {} is also a training domain", self.name, self.test_domain)));
        }
        if self.epochs == 0 {
            return Err(FasError::Protocol(format!("{}: epochs must be positive", self.name)));
        }
        if self.k == 0 || self.k > self.epochs {
            return Err(FasError::Argument(format!("{}: k = {} must be in 1..={}", self.name, self.k, self.epochs)));
        }
        Ok(())
    }

    /// Leave-one-out name such as `AB→C`.
    pub fn leave_one_out(domains: &[String], test: &str, epochs: usize, averaging: Averaging, k: usize) -> Self {
        let train: Vec<String> = domains.iter().filter(|d| *d != test).cloned().collect();
        Self { name: format!("{}→{test}", train.concat()), train_domains: train, test_domain: test.into(), epochs, averaging, k }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub auc: f64,
    pub threshold: f64,
}

/// Means over the final `k` epochs and `last-k ACER − best ACER`.
pub fn last_k_average(series: &[EpochMetrics], k: usize) -> Result<(MetricSummary, f64)> {
    if k == 0 || k > series.len() {
        return Err(FasError::Argument(format!("k = {k} but the series has {} epochs", series.len())));
    }
    let tail = &series[series.len() - k..];
    let mean = |f: fn(&EpochMetrics) -> f64| tail.iter().map(f).sum::<f64>() / k as f64;
    let s = MetricSummary {
        apcer: mean(|e| e.apcer),
        bpcer: mean(|e| e.bpcer),
        acer: mean(|e| e.acer),
        auc: mean(|e| e.auc),
        threshold: mean(|e| e.threshold),
    };
    let best = best_epoch(series)?;
    Ok((s, s.acer - best.acer))
}

/// Lowest-ACER epoch, earliest on ties.
pub fn best_epoch(series: &[EpochMetrics]) -> Result<EpochMetrics> {
    let mut it = series.iter();
    let first = *it.next().ok_or_else(|| FasError::Argument("empty epoch series".into()))?;
    Ok(it.fold(first, |b, e| if e.acer < b.acer { *e } else { b }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProtocolReport {
    pub protocol: String,
    pub rule: String,
    pub k: usize,
    pub primary: Averaging,
    pub best_epoch: usize,
    pub best: MetricSummary,
    pub last_k: Option<MetricSummary>,
    pub stability_gap: Option<f64>,
    pub per_epoch: Vec<EpochMetrics>,
}

impl ProtocolReport {
    pub fn primary_summary(&self) -> MetricSummary {
        match (self.primary, self.last_k) {
            (Averaging::LastK, Some(s)) => s,
            _ => self.best,
        }
    }
}

pub fn epoch_file(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch}.scores"))
}

/// Metrics from per-epoch score sets (`sets[i]` is epoch `i + 1`).
pub fn report_from_sets(spec: &ProtocolSpec, sets: &[ScoreSet], rule: ThresholdRule) -> Result<ProtocolReport> {
    spec.validate()?;
    if sets.len() != spec.epochs {
        return Err(FasError::Protocol(format!("{}: expected {} epochs, got {}", spec.name, spec.epochs, sets.len())));
    }
    let per = fas_nn::par::map_indexed(sets.len(), |i| {
        let s = sets[i].filter_domain(&spec.test_domain);
        if s.is_empty() {
            return Err(FasError::Protocol(format!(
                "{}: epoch {} has no records for test domain {}",
                spec.name,
                i + 1,
                spec.test_domain
            )));
        }
        epoch_metrics(i + 1, &s, rule)
    });
    let per_epoch = per.into_iter().collect::<Result<Vec<_>>>()?;
    let b = best_epoch(&per_epoch)?;
    let best = MetricSummary { apcer: b.apcer, bpcer: b.bpcer, acer: b.acer, auc: b.auc, threshold: b.threshold };
    let (last_k, gap) = match last_k_average(&per_epoch, spec.k) {
        Ok((s, g)) => (Some(s), Some(g)),
        Err(_) => (None, None),
    };
    Ok(ProtocolReport {
        protocol: spec.name.clone(),
        rule: rule.name(),
        k: spec.k,
        primary: spec.averaging,
        best_epoch: b.epoch,
        best,
        last_k,
        stability_gap: gap,
        per_epoch,
    })
}

/// Reads `epoch_1.scores ..= epoch_<epochs>.scores` from `dir`.
pub fn run_protocol(spec: &ProtocolSpec, dir: &Path, rule: ThresholdRule) -> Result<ProtocolReport> {
    spec.validate()?;
    let mut sets = Vec::with_capacity(spec.epochs);
    for e in 1..=spec.epochs {
        let p = epoch_file(dir, e);
        if !p.exists() {
            return Err(FasError::Protocol(format!("{}: missing score file for epoch {e} ({})", spec.name, p.display())));
        }
        sets.push(ScoreSet::load(&p)?);
    }
    report_from_sets(spec, &sets, rule)
}

/// Highest `n` such that `epoch_<n>.scores` exists with all lower epochs present.
pub fn count_epochs(dir: &Path) -> usize {
    let mut n = 0;
    while epoch_file(dir, n + 1).exists() {
        n += 1;
    }
    n
}

/// `ACER / AUC` in percent with two decimals, e.g. `2.50 / 99.35`.
pub fn format_row(acer: f64, auc: f64) -> String {
    format!("{:.2} / {:.2}", acer * 100.0, auc * 100.0)
}

pub const CSV_HEADER: &str = "protocol,mode,apcer,bpcer,acer,auc,threshold,stability_gap";

pub fn report_csv(reports: &[ProtocolReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    let pct = |v: f64| format!("{:.2}", v * 100.0);
    for r in reports {
        let gap = r.stability_gap.map(pct).unwrap_or_default();
        let mut row = |mode: &str, m: &MetricSummary| {
            let _ = writeln!(
                s,
                "{},{mode},{},{},{},{},{:.6},{gap}",
                r.protocol,
                pct(m.apcer),
                pct(m.bpcer),
                pct(m.acer),
                pct(m.auc),
                m.threshold
            );
        };
        row("best_epoch", &r.best);
        if let Some(l) = &r.last_k {
            row(&format!("last{}", r.k), l);
        }
    }
    s
}

/// Plain-text table: one row per protocol, ACER / AUC per mode.
pub fn report_table(reports: &[ProtocolReport]) -> String {
    let mut s = String::new();
    let k = reports.first().map_or(10, |r| r.k);
    let _ = writeln!(s, "{:<12} {:<18} {:<18} {:>8}  threshold rule", "protocol", "best ACER / AUC", format!("last-{k} ACER / AUC"), "gap");
    for r in reports {
        let last = r.last_k.map(|l| format_row(l.acer, l.auc)).unwrap_or_else(|| "-".into());
        let gap = r.stability_gap.map(|g| format!("({:.2})", g * 100.0)).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<12} {:<18} {:<18} {:>8}  {} (best epoch {})",
            r.protocol,
            format_row(r.best.acer, r.best.auc),
            last,
            gap,
            r.rule,
            r.best_epoch
        );
    }
    s
}

/// Per-domain record counts, for diagnostics.
pub fn domain_histogram(set: &ScoreSet) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in &set.records {
        *m.entry(r.domain.clone()).or_insert(0) += 1;
    }
    m
}
