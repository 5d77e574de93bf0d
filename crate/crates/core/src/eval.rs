//! Evaluation harness: labeled score sets, ROC curves, return degradation and
//! report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{self, VisitedState};
use crate::attacks::{self, AttackConfig, Method};
use crate::detector::{self, CalibrationProfile, Statistic};
use crate::env::{GridEnv, GridSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::net::Model;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Base,
    Adversarial,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Base => "base",
            Label::Adversarial => "adversarial",
        }
    }
}

/// One scored observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredState {
    pub episode: usize,
    pub step: usize,
    pub label: Label,
    /// Set on adversarial records.
    pub attack: Option<Method>,
    pub stat: Statistic,
    /// `None` when the statistic is undefined or scoring failed.
    pub stat_value: Option<f64>,
    pub z_abs: f64,
    pub flagged: bool,
    /// Whether the attack changed the greedy action; `None` on base records.
    pub success: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

fn scored(
    profile: &CalibrationProfile,
    episode: usize,
    step: usize,
    label: Label,
    attack: Option<Method>,
    success: Option<bool>,
    detection: Result<detector::Detection>,
) -> ScoredState {
    let (stat_value, z_abs, flagged, error) = match detection {
        Ok(d) => (d.stat_value, d.z_abs, d.flagged, d.reason),
        Err(e) => (None, f64::NAN, false, Some(e.to_string())),
    };
    ScoredState {
        episode,
        step,
        label,
        attack,
        stat: profile.statistic,
        stat_value,
        z_abs,
        flagged,
        success,
        error,
    }
}

/// Scores already recorded base observations.
pub fn score_base<M: Model + ?Sized>(
    model: &M,
    visited: &[VisitedState],
    profile: &CalibrationProfile,
) -> Vec<ScoredState> {
    visited
        .par_iter()
        .map(|v| {
            let d = detector::detect(model, &v.obs, profile);
            scored(profile, v.episode, v.step, Label::Base, None, None, d)
        })
        .collect()
}

/// Greedy episode in which every observation is replaced by its attacked
/// version before the agent acts. Returns the per-step attack results and the
/// episode return.
pub fn attacked_episode<M: Model + ?Sized>(
    model: &M,
    spec: &GridSpec,
    cfg: &AttackConfig,
    env_seed: u64,
) -> Result<(Vec<attacks::AttackResult>, f64)> {
    let mut env = GridEnv::reset(spec, env_seed)?;
    let mut results = Vec::new();
    let mut ret = 0.0;
    while !env.is_done() {
        let r = attacks::run(model, env.observation(), cfg)?;
        let a = model.greedy_action(&r.s_adv)?;
        results.push(r);
        ret += env.step(a)?.reward;
    }
    Ok((results, ret))
}

/// Base arm plus one attacked arm per config, all on the environment seeds
/// `derive(seed, episode)`. Scoring failures are recorded per state.
pub fn build_eval_set<M: Model + ?Sized>(
    model: &M,
    spec: &GridSpec,
    profile: &CalibrationProfile,
    attack_cfgs: &[AttackConfig],
    episodes: usize,
    seed: u64,
) -> Result<Vec<ScoredState>> {
    profile.threshold()?;
    let visited = agent::base_rollout(model, spec, episodes, seed)?;
    let mut out = score_base(model, &visited, profile);
    for cfg in attack_cfgs {
        cfg.validate()?;
        let arms: Vec<Vec<ScoredState>> = (0..episodes)
            .into_par_iter()
            .map(|ep| -> Result<Vec<ScoredState>> {
                let (results, _) = attacked_episode(model, spec, cfg, seed::derive(seed, ep as u64))?;
                Ok(results
                    .into_iter()
                    .enumerate()
                    .map(|(step, r)| {
                        let d = detector::detect(model, &r.s_adv, profile);
                        scored(profile, ep, step, Label::Adversarial, Some(cfg.method), Some(r.success), d)
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        out.extend(arms.into_iter().flatten());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from the strictest threshold to the loosest, starting at
    /// `(0, 0)` and ending at `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score threshold of each point after the first (flag when `score ≥ v`).
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// ROC of scores where `positives` should score higher than `negatives`.
/// The area is accumulated in integer counts, so it equals the Mann-Whitney
/// statistic `P(pos > neg) + ½P(pos = neg)` exactly.
pub fn roc_from_scores(negatives: &[f64], positives: &[f64]) -> Result<RocCurve> {
    if negatives.is_empty() || positives.is_empty() {
        return Err(Error::InvalidArgument("ROC needs both base and adversarial scores".into()));
    }
    if negatives.iter().chain(positives).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("ROC score"));
    }
    let mut all: Vec<(f64, bool)> = negatives
        .iter()
        .map(|&v| (v, false))
        .chain(positives.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nn, np) = (negatives.len() as u128, positives.len() as u128);
    let (mut fp, mut tp) = (0u128, 0u128);
    let mut twice_area = 0u128;
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        let (fp0, tp0) = (fp, tp);
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) * (tp + tp0);
        points.push((fp as f64 / nn as f64, tp as f64 / np as f64));
        thresholds.push(v);
    }
    Ok(RocCurve {
        points,
        thresholds,
        auc: twice_area as f64 / (2 * nn * np) as f64,
    })
}

/// ROC over `z_abs`, adversarial records as positives. Records without a
/// score are skipped.
pub fn roc(scores: &[ScoredState]) -> Result<RocCurve> {
    let pick = |l: Label| -> Vec<f64> {
        scores
            .iter()
            .filter(|s| s.label == l && !s.z_abs.is_nan())
            .map(|s| s.z_abs)
            .collect()
    };
    roc_from_scores(&pick(Label::Base), &pick(Label::Adversarial))
}

/// TPR at the largest achievable FPR not above `fpr`; with `interpolate`,
/// linear interpolation between the bracketing points instead.
pub fn tpr_at_fpr(curve: &RocCurve, fpr: f64, interpolate: bool) -> f64 {
    let pts = &curve.points;
    let below = pts.iter().filter(|p| p.0 <= fpr).map(|p| p.1).fold(0.0, f64::max);
    if !interpolate {
        return below;
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 <= fpr && fpr <= x1 && x1 > x0 {
            return y0 + (y1 - y0) * (fpr - x0) / (x1 - x0);
        }
    }
    below
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub clean: f64,
    pub attacked: f64,
    pub random: f64,
    /// `(clean − attacked)/(clean − random)`.
    pub fraction: f64,
}

/// Mean greedy return with and without the per-state attack on the same
/// environment seeds, with a uniformly random policy for reference.
pub fn return_degradation<M: Model + ?Sized>(
    model: &M,
    spec: &GridSpec,
    cfg: &AttackConfig,
    episodes: usize,
    seed: u64,
) -> Result<Degradation> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    let clean = agent::evaluate(model, spec, episodes, seed)?;
    let returns: Vec<f64> = (0..episodes)
        .into_par_iter()
        .map(|ep| attacked_episode(model, spec, cfg, seed::derive(seed, ep as u64)).map(|r| r.1))
        .collect::<Result<_>>()?;
    let attacked = linalg::compensated_sum(returns) / episodes as f64;
    let random = agent::random_policy_return(spec, episodes, seed)?;
    Ok(Degradation {
        clean,
        attacked,
        random,
        fraction: (clean - attacked) / (clean - random),
    })
}

/// Per-arm summary row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub attack: Method,
    pub stat: Statistic,
    pub states: usize,
    pub success_rate: f64,
    /// Share of attacked states flagged at the profile threshold.
    pub tpr: f64,
    /// Share of base states flagged at the profile threshold.
    pub fpr: f64,
    pub auc: f64,
    /// ROC-based TPR at the requested FPR (conservative step).
    pub roc_tpr: f64,
    pub mean_stat_base: f64,
    pub mean_stat_adversarial: f64,
}

fn rate<'a, I: Iterator<Item = &'a ScoredState>>(it: I, f: impl Fn(&ScoredState) -> bool) -> f64 {
    let (mut n, mut k) = (0usize, 0usize);
    for s in it {
        n += 1;
        k += f(s) as usize;
    }
    if n == 0 {
        f64::NAN
    } else {
        k as f64 / n as f64
    }
}

fn mean_stat<'a, I: Iterator<Item = &'a ScoredState>>(it: I) -> f64 {
    let v: Vec<f64> = it.filter_map(|s| s.stat_value).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        linalg::mean_std(&v).0
    }
}

/// One summary row per (statistic, attack) pair present in `records`.
pub fn summarize(records: &[ScoredState], fpr: f64) -> Result<Vec<ArmSummary>> {
    let mut keys: Vec<(Statistic, Method)> = Vec::new();
    for r in records {
        if let (Label::Adversarial, Some(m)) = (r.label, r.attack) {
            if !keys.contains(&(r.stat, m)) {
                keys.push((r.stat, m));
            }
        }
    }
    let mut out = Vec::new();
    for (stat, method) in keys {
        let base: Vec<ScoredState> = records
            .iter()
            .filter(|r| r.stat == stat && r.label == Label::Base)
            .cloned()
            .collect();
        let adv: Vec<ScoredState> = records
            .iter()
            .filter(|r| r.stat == stat && r.attack == Some(method))
            .cloned()
            .collect();
        let both: Vec<ScoredState> = base.iter().chain(&adv).cloned().collect();
        let curve = roc(&both)?;
        out.push(ArmSummary {
            attack: method,
            stat,
            states: adv.len(),
            success_rate: rate(adv.iter(), |s| s.success == Some(true)),
            tpr: rate(adv.iter(), |s| s.flagged),
            fpr: rate(base.iter(), |s| s.flagged),
            auc: curve.auc,
            roc_tpr: tpr_at_fpr(&curve, fpr, false),
            mean_stat_base: mean_stat(base.iter()),
            mean_stat_adversarial: mean_stat(adv.iter()),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target_fpr: f64,
    pub summary: Vec<ArmSummary>,
    pub records: Vec<ScoredState>,
}

impl EvalReport {
    pub fn new(records: Vec<ScoredState>, target_fpr: f64) -> Result<Self> {
        let summary = if records.iter().any(|r| r.label == Label::Adversarial) {
            summarize(&records, target_fpr)?
        } else {
            Vec::new()
        };
        Ok(Self {
            target_fpr,
            summary,
            records,
        })
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Results CSV: one row per record, header always present.
pub fn results_csv(records: &[ScoredState]) -> String {
    let mut out = String::from("episode,step,label,attack,stat,z_abs,flagged,success\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.episode,
            r.step,
            r.label.name(),
            opt(r.attack),
            r.stat,
            r.z_abs,
            r.flagged,
            opt(r.success)
        );
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `results.csv`, `results.json`, one `roc_<stat>_<attack>.csv` per
/// arm, `trace_<stat>.csv` with the statistic per record, and `roc.svg`.
/// Returns the written paths in order.
pub fn emit_report(dir: &Path, report: &EvalReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let p = dir.join("results.csv");
    write(&p, &results_csv(&report.records))?;
    written.push(p);

    let p = dir.join("results.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::json(&p, e))?;
    write(&p, &(json + "\n"))?;
    written.push(p);

    let mut series = Vec::new();
    for arm in &report.summary {
        let subset: Vec<ScoredState> = report
            .records
            .iter()
            .filter(|r| r.stat == arm.stat && (r.label == Label::Base || r.attack == Some(arm.attack)))
            .cloned()
            .collect();
        let curve = roc(&subset)?;
        let mut csv = String::from("fpr,tpr\n");
        for (x, y) in &curve.points {
            let _ = writeln!(csv, "{x},{y}");
        }
        let p = dir.join(format!("roc_{}_{}.csv", arm.stat, arm.attack));
        write(&p, &csv)?;
        written.push(p);
        series.push((format!("{} {} (AUC {:.3})", arm.stat, arm.attack, curve.auc), curve.points));
    }

    let mut stats: Vec<Statistic> = report.records.iter().map(|r| r.stat).collect();
    stats.dedup();
    for stat in stats {
        let mut csv = String::from("index,episode,step,label,attack,stat_value\n");
        for (i, r) in report.records.iter().filter(|r| r.stat == stat).enumerate() {
            let _ = writeln!(
                csv,
                "{i},{},{},{},{},{}",
                r.episode,
                r.step,
                r.label.name(),
                opt(r.attack),
                opt(r.stat_value)
            );
        }
        let p = dir.join(format!("trace_{stat}.csv"));
        write(&p, &csv)?;
        written.push(p);
    }

    let p = dir.join("roc.svg");
    write(&p, &roc_svg(&series))?;
    written.push(p);
    Ok(written)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Minimal static SVG of ROC curves on the unit square.
pub fn roc_svg(series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (size, pad) = (400.0, 40.0);
    let map = |x: f64, y: f64| (pad + x * size, pad + (1.0 - y) * size);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#,
        w = size + 2.0 * pad + 220.0,
        h = size + 2.0 * pad
    );
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{size}" height="{size}" fill="none" stroke="black"/>"#
    );
    let ((x0, y0), (x1, y1)) = (map(0.0, 0.0), map(1.0, 1.0));
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="gray" stroke-dasharray="4 4"/>"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}">false positive rate</text>"#, pad + size / 2.0 - 45.0, pad + size + 28.0);
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})">true positive rate</text>"#,
        pad + size / 2.0 + 45.0,
        pad + size / 2.0 + 45.0
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (px, py) = map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            coords.join(" ")
        );
        let ly = pad + 14.0 * (i as f64 + 1.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#,
            pad + size + 12.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mann_whitney(neg: &[f64], pos: &[f64]) -> f64 {
        let mut twice = 0u128;
        for p in pos {
            for n in neg {
                twice += if p > n { 2 } else if p == n { 1 } else { 0 };
            }
        }
        twice as f64 / (2 * neg.len() * pos.len()) as f64
    }

    #[test]
    fn perfect_separation() {
        let c = roc_from_scores(&[0.0, 1.0], &[2.0, 3.0]).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!(tpr_at_fpr(&c, 0.01, false), 1.0);
        assert_eq!(tpr_at_fpr(&c, 1.0, false), 1.0);
    }

    #[test]
    fn auc_is_mann_whitney_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..50 {
            let n = rng.random_range(1..12);
            let m = rng.random_range(1..12);
            let neg: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
            let pos: Vec<f64> = (0..m).map(|_| rng.random_range(0..6) as f64).collect();
            let c = roc_from_scores(&neg, &pos).unwrap();
            assert_eq!(c.auc, mann_whitney(&neg, &pos));
        }
    }

    #[test]
    fn curve_is_monotone_and_area_is_trapezoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let neg: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
        let pos: Vec<f64> = (0..30).map(|_| rng.random::<f64>() + 0.3).collect();
        let c = roc_from_scores(&neg, &pos).unwrap();
        assert_eq!(c.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(c.points.last(), Some(&(1.0, 1.0)));
        let mut trap = 0.0;
        for w in c.points.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            trap += (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0;
        }
        assert!((trap - c.auc).abs() < 1e-12);
    }

    #[test]
    fn tpr_matches_threshold_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let neg: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
        let pos: Vec<f64> = (0..10).map(|_| rng.random::<f64>() + 0.2).collect();
        let c = roc_from_scores(&neg, &pos).unwrap();
        for target in [0.0, 0.05, 0.1, 0.25, 0.5, 0.99] {
            let mut best: f64 = 0.0;
            for &t in neg.iter().chain(&pos).chain([f64::INFINITY].iter()) {
                let fpr = neg.iter().filter(|&&v| v >= t).count() as f64 / 10.0;
                let tpr = pos.iter().filter(|&&v| v >= t).count() as f64 / 10.0;
                if fpr <= target {
                    best = best.max(tpr);
                }
            }
            assert_eq!(tpr_at_fpr(&c, target, false), best, "target {target}");
        }
    }

    #[test]
    fn interpolation_lies_between_steps() {
        let c = roc_from_scores(&[0.0, 1.0, 2.0, 3.0], &[1.5, 2.5, 3.5, 4.5]).unwrap();
        let lo = tpr_at_fpr(&c, 0.1, false);
        let hi = tpr_at_fpr(&c, 0.1, true);
        assert!(hi >= lo);
        assert!(hi <= tpr_at_fpr(&c, 0.25, false));
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(roc_from_scores(&[], &[1.0]).is_err());
        assert!(roc_from_scores(&[1.0], &[]).is_err());
    }

    #[test]
    fn empty_results_give_header_only_csv() {
        assert_eq!(results_csv(&[]), "episode,step,label,attack,stat,z_abs,flagged,success\n");
    }

    #[test]
    fn svg_escapes_names() {
        let svg = roc_svg(&[("a<b".into(), vec![(0.0, 0.0), (1.0, 1.0)])]);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.starts_with("<svg"));
    }
}
