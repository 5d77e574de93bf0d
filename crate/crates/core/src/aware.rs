//! Detection-aware adversaries.
//!
//! Three attacks try to evade the detectors: logit feature matching, C&W with
//! a penalty on the second-order statistic (sign handled by a straight-through
//! backward pass), and C&W with a penalty on the first-order statistic
//! averaged over detector noise. [`grid_search`] tunes the penalized attacks
//! under a cap on the success-rate drop.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, cw_engine, original_action, project, AttackConfig, AttackResult, CwSelect, Method};
use crate::detector::{self, CalibrationProfile, Statistic};
use crate::error::{Error, Result};
use crate::linalg;
use crate::net::{ActionDist, Model};
use crate::seed;

pub const DEFAULT_EOT_SAMPLES: usize = 50;
/// Central-difference step for Hessian-vector products.
const HVP_STEP: f64 = 1e-4;
/// Feature matching stops once backtracking shrinks the step below this.
const FEATURE_MIN_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AwareKind {
    So,
    Fo,
    Featmatch,
}

impl std::fmt::Display for AwareKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AwareKind::So => "so",
            AwareKind::Fo => "fo",
            AwareKind::Featmatch => "featmatch",
        })
    }
}

impl std::str::FromStr for AwareKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "so" => Ok(AwareKind::So),
            "fo" => Ok(AwareKind::Fo),
            "featmatch" => Ok(AwareKind::Featmatch),
            other => Err(Error::InvalidArgument(format!("unknown aware attack {other:?}"))),
        }
    }
}

/// Hyperparameter lists swept by [`grid_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AwareGrid {
    pub lr: Vec<f64>,
    pub iters: Vec<usize>,
    pub kappa: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Default for AwareGrid {
    fn default() -> Self {
        Self {
            lr: vec![0.01],
            iters: vec![200],
            kappa: vec![0.0],
            lambda: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AwareConfig {
    /// C&W settings shared by the penalized attacks and the baseline.
    pub base: AttackConfig,
    /// Penalty weight on the detector statistic.
    pub lambda: f64,
    /// Straight-through sign in the backward pass; `false` switches to the
    /// sign-free statistic in both passes.
    pub bpda: bool,
    pub eot_samples: usize,
    /// Largest tolerated relative drop in success rate.
    pub success_drop_cap: f64,
    pub grid: AwareGrid,
    pub seed: u64,
}

impl Default for AwareConfig {
    fn default() -> Self {
        Self {
            base: AttackConfig::for_method(Method::Cw),
            lambda: 1.0,
            bpda: true,
            eot_samples: DEFAULT_EOT_SAMPLES,
            success_drop_cap: 0.10,
            grid: AwareGrid::default(),
            seed: 0,
        }
    }
}

impl AwareConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be a finite non-negative number");
        }
        if self.eot_samples == 0 {
            return bad("eot_samples must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.success_drop_cap) {
            return bad("success_drop_cap must lie in [0, 1]");
        }
        let g = &self.grid;
        if g.lr.is_empty() || g.iters.is_empty() || g.kappa.is_empty() || g.lambda.is_empty() {
            return bad("every grid list needs at least one value");
        }
        if g.lr.iter().any(|v| !(*v > 0.0)) || g.iters.contains(&0) {
            return bad("grid lr and iters must be positive");
        }
        if g.kappa.iter().chain(&g.lambda).any(|v| !(*v >= 0.0)) {
            return bad("grid kappa and lambda must be non-negative");
        }
        let mut base = self.base.clone();
        base.method = Method::Cw;
        base.validate()
    }

    fn at(&self, p: &GridPoint) -> Self {
        let mut cfg = self.clone();
        cfg.base.lr = p.lr;
        cfg.base.alpha_step = p.lr;
        cfg.base.iters = p.iters;
        cfg.base.kappa = p.kappa;
        cfg.lambda = p.lambda;
        cfg
    }
}

/// `H·v` at `s` by central differences of the input gradient.
fn hvp<M: Model + ?Sized>(model: &M, s: &[f64], tau: &ActionDist, v: &[f64]) -> Result<Vec<f64>> {
    let vn = linalg::norm2(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let h = HVP_STEP / vn;
    let plus: Vec<f64> = s.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = s.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let gp = model.cost_grad(&plus, tau)?;
    let gm = model.cost_grad(&minus, tau)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// Second-order statistic at `s` and its backward-pass gradient.
///
/// With `bpda`, the value is the true sign-based `L` and only the gradient
/// treats `sign(g)` as `g/‖g‖∞`. Without it, both passes use the sign-free
/// probe `ε·√D·g/‖g‖₂²`. A degenerate gradient contributes nothing.
pub fn so_penalty<M: Model + ?Sized>(model: &M, s: &[f64], epsilon: f64, bpda: bool) -> Result<(f64, Vec<f64>)> {
    let scale = epsilon * (s.len() as f64).sqrt();
    let (value, tau, g, eta) = if bpda {
        match detector::so_evaluate(model, s, epsilon) {
            Ok(ev) => (ev.value, ev.tau, ev.grad, ev.eta),
            Err(Error::DegenerateGradient) => return Ok((0.0, vec![0.0; s.len()])),
            Err(e) => return Err(e),
        }
    } else {
        let (tau, j0) = model.greedy_cost(s)?;
        let g = model.cost_grad(s, &tau)?;
        let g2 = linalg::norm2(&g);
        if g2 < 1e-12 {
            return Ok((0.0, vec![0.0; s.len()]));
        }
        let eta = linalg::scale(scale / (g2 * g2), &g);
        let j1 = model.cost(&linalg::add(s, &eta), &tau)?;
        (j1 - (j0 + linalg::dot(&g, &eta)), tau, g, eta)
    };
    let g2 = linalg::norm2(&g);
    let ginf = linalg::norm_inf(&g);
    let probed = linalg::add(s, &eta);
    let gp = model.cost_grad(&probed, &tau)?;
    let diff = linalg::sub(&gp, &g);
    // u = (∂η/∂g)ᵀ (∇J(s+η) − g)
    let u: Vec<f64> = if bpda {
        let sv: f64 = g.iter().zip(&diff).map(|(gi, di)| linalg::sign(*gi) * di).sum();
        diff.iter()
            .zip(&g)
            .map(|(di, gi)| epsilon * (di / (ginf * g2) - gi * sv / g2.powi(3)))
            .collect()
    } else {
        let gv = linalg::dot(&g, &diff);
        diff.iter()
            .zip(&g)
            .map(|(di, gi)| scale * (di / (g2 * g2) - 2.0 * gi * gv / g2.powi(4)))
            .collect()
    };
    let hv = hvp(model, s, &tau, &linalg::sub(&u, &eta))?;
    Ok((value, linalg::add(&diff, &hv)))
}

/// Mean of `K(s, η_k)` over `samples` Gaussian draws and its gradient with
/// the action distribution held at `π*(·|s)`.
pub fn fo_penalty<M: Model + ?Sized>(
    model: &M,
    s: &[f64],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one noise sample".into()));
    }
    let (tau, j0) = model.greedy_cost(s)?;
    let g = model.cost_grad(s, &tau)?;
    let mut values = Vec::with_capacity(samples);
    let mut grad = vec![0.0; s.len()];
    for k in 0..samples {
        let eta = detector::gaussian_probe(s.len(), epsilon, seed::derive(seed, k as u64));
        let x = linalg::add(s, &eta);
        values.push(model.cost(&x, &tau)? - j0);
        linalg::axpy(1.0, &model.cost_grad(&x, &tau)?, &mut grad);
    }
    let n = samples as f64;
    let grad: Vec<f64> = grad.iter().zip(&g).map(|(a, b)| a / n - b).collect();
    Ok((linalg::compensated_sum(values) / n, grad))
}

fn z_abs<M: Model + ?Sized>(model: &M, s: &[f64], profile: &CalibrationProfile) -> Result<f64> {
    match detector::statistic_value(model, s, profile.statistic, profile.epsilon, profile.seed) {
        Ok(v) => Ok(profile.z(v).abs()),
        Err(Error::DegenerateGradient) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

fn require_statistic(profile: &CalibrationProfile, want: Statistic) -> Result<()> {
    if profile.statistic != want {
        return Err(Error::InvalidArgument(format!(
            "attack needs a {want} profile, got {}",
            profile.statistic
        )));
    }
    Ok(())
}

/// C&W on `c·margin + ‖δ‖² + λ·L(s)`; the successful iterate with the
/// smallest detection `|z|` is returned.
pub fn so_aware_cw<M: Model + ?Sized>(
    model: &M,
    s_bar: &[f64],
    profile: &CalibrationProfile,
    cfg: &AwareConfig,
) -> Result<AttackResult> {
    so_aware_traced(model, s_bar, profile, cfg, None)
}

fn so_aware_traced<M: Model + ?Sized>(
    model: &M,
    s_bar: &[f64],
    profile: &CalibrationProfile,
    cfg: &AwareConfig,
    trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<AttackResult> {
    require_statistic(profile, Statistic::So)?;
    let lambda = cfg.lambda;
    let mut penalty = |s: &[f64], _it: usize| -> Result<(f64, Vec<f64>)> {
        let (v, g) = so_penalty(model, s, profile.epsilon, cfg.bpda)?;
        Ok((lambda * v, linalg::scale(lambda, &g)))
    };
    let score = |s: &[f64]| z_abs(model, s, profile);
    let base = AttackConfig { method: Method::Cw, ..cfg.base.clone() };
    let penalty: Option<&mut attacks::CwPenalty<'_>> = if lambda > 0.0 { Some(&mut penalty) } else { None };
    cw_engine(model, s_bar, &base, penalty, CwSelect::MinScore(&score), trace)
}

/// C&W on `c·margin + ‖δ‖² + λ·mean_k K(s, η_k)` with fresh noise draws at
/// every iteration.
pub fn fo_aware_attack<M: Model + ?Sized>(
    model: &M,
    s_bar: &[f64],
    profile: &CalibrationProfile,
    cfg: &AwareConfig,
) -> Result<AttackResult> {
    fo_aware_traced(model, s_bar, profile, cfg, None)
}

fn fo_aware_traced<M: Model + ?Sized>(
    model: &M,
    s_bar: &[f64],
    profile: &CalibrationProfile,
    cfg: &AwareConfig,
    trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<AttackResult> {
    require_statistic(profile, Statistic::Fo)?;
    if cfg.eot_samples == 0 {
        return Err(Error::InvalidArgument("eot_samples must be at least 1".into()));
    }
    let lambda = cfg.lambda;
    let state_seed = seed::for_vector(cfg.seed, s_bar);
    let mut penalty = |s: &[f64], it: usize| -> Result<(f64, Vec<f64>)> {
        let (v, g) = fo_penalty(model, s, profile.epsilon, cfg.eot_samples, seed::derive(state_seed, it as u64))?;
        Ok((lambda * v, linalg::scale(lambda, &g)))
    };
    let score = |s: &[f64]| z_abs(model, s, profile);
    let base = AttackConfig { method: Method::Cw, ..cfg.base.clone() };
    let penalty: Option<&mut attacks::CwPenalty<'_>> = if lambda > 0.0 { Some(&mut penalty) } else { None };
    cw_engine(model, s_bar, &base, penalty, CwSelect::MinScore(&score), trace)
}

/// Nearest candidate (ℓ₂) whose greedy action differs from the one at `s̄`.
pub fn nearest_other_class<M, S>(model: &M, s_bar: &[f64], candidates: &[S]) -> Result<Vec<f64>>
where
    M: Model + ?Sized,
    S: AsRef<[f64]>,
{
    let a = model.greedy_action(s_bar)?;
    let mut best: Option<(f64, &[f64])> = None;
    for c in candidates {
        let c = c.as_ref();
        if model.greedy_action(c)? == a {
            continue;
        }
        let d = linalg::norm2(&linalg::sub(c, s_bar));
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, c));
        }
    }
    best.map(|(_, c)| c.to_vec())
        .ok_or_else(|| Error::InvalidArgument("no candidate state with a different greedy action".into()))
}

/// Projected gradient descent on `‖z(s) − z(target)‖²` inside the ℓ∞ ball of
/// radius `cfg.epsilon` and the box. The step starts at `cfg.alpha_step`,
/// halves on every rejected move and doubles back (up to `alpha_step`) after
/// an accepted one, so the objective never increases.
pub fn feature_match_attack<M: Model + ?Sized>(
    model: &M,
    s_bar: &[f64],
    target_state: &[f64],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if target_state.len() != s_bar.len() || s_bar.len() != model.input_dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            got: if s_bar.len() != model.input_dim() { s_bar.len() } else { target_state.len() },
        });
    }
    if !(cfg.alpha_step > 0.0) || cfg.iters == 0 {
        return Err(Error::InvalidArgument("feature matching needs alpha_step > 0 and iters >= 1".into()));
    }
    let original = original_action(model, s_bar, cfg)?;
    let zt = model.logits(target_state)?;
    let loss = |z: &[f64]| -> f64 { z.iter().zip(&zt).map(|(a, b)| (a - b) * (a - b)).sum() };

    let mut x = s_bar.to_vec();
    let mut z = model.logits(&x)?;
    let mut fx = loss(&z);
    let mut step = cfg.alpha_step;
    let mut accepted = 0;
    'outer: for _ in 0..cfg.iters {
        if fx == 0.0 {
            break;
        }
        let r: Vec<f64> = z.iter().zip(&zt).map(|(a, b)| 2.0 * (a - b)).collect();
        let grad = model.logits_vjp(&x, &r)?;
        loop {
            let mut cand: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi - step * gi).collect();
            project(&mut cand, s_bar, Some(cfg.epsilon), cfg.clip_box);
            let zc = model.logits(&cand)?;
            let fc = loss(&zc);
            if fc < fx {
                x = cand;
                z = zc;
                fx = fc;
                accepted += 1;
                step = (2.0 * step).min(cfg.alpha_step);
                break;
            }
            step /= 2.0;
            if step < FEATURE_MIN_STEP {
                break 'outer;
            }
        }
    }
    let success = linalg::argmax(&z) != original;
    Ok(AttackResult::new(s_bar, x, success, accepted, cfg.method))
}

/// Outcome of one configuration over the evaluation states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub lr: f64,
    pub iters: usize,
    pub kappa: f64,
    pub lambda: f64,
    pub success_rate: f64,
    /// Fraction of attacked states the detector flags.
    pub tpr: f64,
    pub median_z_abs: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub kind: AwareKind,
    pub statistic: Statistic,
    pub cap: f64,
    pub states: usize,
    /// Plain C&W with the base settings.
    pub baseline: PointResult,
    pub points: Vec<PointResult>,
    /// Index into `points`; `None` when no point met the cap.
    pub selected: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct GridPoint {
    lr: f64,
    iters: usize,
    kappa: f64,
    lambda: f64,
}

fn grid_points(kind: AwareKind, grid: &AwareGrid) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for &lr in &grid.lr {
        for &iters in &grid.iters {
            if kind == AwareKind::Featmatch {
                out.push(GridPoint { lr, iters, kappa: 0.0, lambda: 0.0 });
                continue;
            }
            for &kappa in &grid.kappa {
                for &lambda in &grid.lambda {
                    out.push(GridPoint { lr, iters, kappa, lambda });
                }
            }
        }
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn score_results<M: Model + ?Sized>(
    model: &M,
    results: &[AttackResult],
    profile: &CalibrationProfile,
    p: GridPoint,
) -> Result<PointResult> {
    let detections: Vec<detector::Detection> = results
        .par_iter()
        .map(|r| detector::detect(model, &r.s_adv, profile))
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    Ok(PointResult {
        lr: p.lr,
        iters: p.iters,
        kappa: p.kappa,
        lambda: p.lambda,
        success_rate: results.iter().filter(|r| r.success).count() as f64 / n,
        tpr: detections.iter().filter(|d| d.flagged).count() as f64 / n,
        median_z_abs: median(detections.iter().map(|d| d.z_abs).collect()),
        feasible: false,
    })
}

/// Runs one aware attack on `s̄`. `targets` supplies feature-matching targets.
pub fn run_aware<M, T>(
    kind: AwareKind,
    model: &M,
    s_bar: &[f64],
    targets: &[T],
    profile: &CalibrationProfile,
    cfg: &AwareConfig,
) -> Result<AttackResult>
where
    M: Model + ?Sized,
    T: AsRef<[f64]>,
{
    match kind {
        AwareKind::So => so_aware_cw(model, s_bar, profile, cfg),
        AwareKind::Fo => fo_aware_attack(model, s_bar, profile, cfg),
        AwareKind::Featmatch => {
            let target = nearest_other_class(model, s_bar, targets)?;
            let base = AttackConfig { method: Method::Cw, ..cfg.base.clone() };
            feature_match_attack(model, s_bar, &target, &base)
        }
    }
}

/// Sweeps the grid and picks the point with the lowest TPR whose success rate
/// is at least `(1 − cap)` times the plain C&W baseline. Falls back to the
/// baseline settings when nothing qualifies.
pub fn grid_search<M, S, T>(
    kind: AwareKind,
    model: &M,
    states: &[S],
    targets: &[T],
    profile: &CalibrationProfile,
    cfg: &AwareConfig,
) -> Result<(AwareConfig, GridReport)>
where
    M: Model + ?Sized,
    S: AsRef<[f64]> + Sync,
    T: AsRef<[f64]> + Sync,
{
    cfg.validate()?;
    profile.threshold()?;
    if states.is_empty() {
        return Err(Error::InvalidArgument("grid search needs at least one state".into()));
    }
    let base_point = GridPoint {
        lr: cfg.base.lr,
        iters: cfg.base.iters,
        kappa: cfg.base.kappa,
        lambda: 0.0,
    };
    let base_cfg = AttackConfig { method: Method::Cw, ..cfg.base.clone() };
    let base_results: Vec<AttackResult> = states
        .par_iter()
        .map(|s| attacks::carlini_wagner(model, s.as_ref(), &base_cfg))
        .collect::<Result<_>>()?;
    let mut baseline = score_results(model, &base_results, profile, base_point)?;
    baseline.feasible = true;
    let floor = (1.0 - cfg.success_drop_cap) * baseline.success_rate;

    let mut points = Vec::new();
    for p in grid_points(kind, &cfg.grid) {
        let pc = cfg.at(&p);
        let results: Vec<AttackResult> = states
            .par_iter()
            .map(|s| run_aware(kind, model, s.as_ref(), targets, profile, &pc))
            .collect::<Result<_>>()?;
        let mut r = score_results(model, &results, profile, p)?;
        r.feasible = r.success_rate >= floor;
        log::info!(
            "{kind} lr={} iters={} kappa={} lambda={}: success {:.3} tpr {:.3}",
            p.lr,
            p.iters,
            p.kappa,
            p.lambda,
            r.success_rate,
            r.tpr
        );
        points.push(r);
    }

    let selected = points
        .iter()
        .enumerate()
        .filter(|(_, r)| r.feasible)
        .min_by(|(i, a), (j, b)| {
            a.tpr
                .total_cmp(&b.tpr)
                .then(a.median_z_abs.total_cmp(&b.median_z_abs))
                .then(i.cmp(j))
        })
        .map(|(i, _)| i);
    let chosen = match selected {
        Some(i) => {
            let r = &points[i];
            cfg.at(&GridPoint { lr: r.lr, iters: r.iters, kappa: r.kappa, lambda: r.lambda })
        }
        None => {
            log::warn!("no grid point keeps success within the cap; returning the baseline");
            cfg.at(&base_point)
        }
    };
    let report = GridReport {
        kind,
        statistic: profile.statistic,
        cap: cfg.success_drop_cap,
        states: states.len(),
        baseline,
        points,
        selected,
    };
    Ok((chosen, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat64;
    use crate::net::{Activation, PolicyNet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64, dims: &[usize]) -> PolicyNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyNet::random(dims, Activation::Tanh, &mut rng).unwrap()
    }

    fn states(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random_range(0.2..0.8)).collect()).collect()
    }

    fn profile(model: &PolicyNet, stat: Statistic, base: &[Vec<f64>]) -> CalibrationProfile {
        let mut cal = detector::calibrate(model, base, detector::DEFAULT_PROBE_EPSILON, stat, 7).unwrap();
        detector::set_threshold(&mut cal, 0.05).unwrap();
        cal.profile
    }

    /// Penalty value with `ε` and the gradient by central differences.
    fn fd_check(bpda: bool) {
        let m = net(41, &[6, 8, 3]);
        for s in states(42, 5, 6) {
            let eps = 1e-2;
            let (v, g) = so_penalty(&m, &s, eps, bpda).unwrap();
            if bpda {
                assert_eq!(v, detector::so_stat(&m, &s, eps).unwrap());
            }
            // Exactness check only applies where sign(∇J) is locally constant,
            // which the sign-free variant always satisfies.
            if !bpda {
                let f = |x: &[f64]| so_penalty(&m, x, eps, false).unwrap().0;
                let fd = crate::fd::fd_gradient(f, &s, 1e-5).unwrap();
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn bpda_forward_uses_true_statistic() {
        fd_check(true);
    }

    #[test]
    fn sign_free_gradient_matches_differences() {
        fd_check(false);
    }

    #[test]
    fn bpda_gradient_is_frozen_sign_gradient_plus_straight_through_term() {
        // Away from sign changes the exact derivative freezes sign(∇J); the
        // surrogate adds H·ε(∇J(s+η) − ∇J(s))/(‖g‖∞‖g‖₂).
        let m = net(43, &[5, 6, 3]);
        let s = states(44, 1, 5).pop().unwrap();
        let eps = 1e-2;
        let tau = ActionDist::one_hot(m.greedy_action(&s).unwrap(), 3);
        let g = m.cost_grad(&s, &tau).unwrap();
        let sg: Vec<f64> = g.iter().map(|&v| linalg::sign(v)).collect();
        let frozen = |x: &[f64]| {
            let g = m.cost_grad(x, &tau).unwrap();
            let n = linalg::norm2(&g);
            let eta: Vec<f64> = sg.iter().map(|v| eps * v / n).collect();
            m.cost(&linalg::add(x, &eta), &tau).unwrap() - m.cost(x, &tau).unwrap() - linalg::dot(&g, &eta)
        };
        let exact = crate::fd::fd_gradient(frozen, &s, 1e-4).unwrap();
        let eta = detector::probe_from_gradient(&g, eps).unwrap();
        let diff = linalg::sub(&m.cost_grad(&linalg::add(&s, &eta), &tau).unwrap(), &g);
        let w = linalg::scale(eps / (linalg::norm_inf(&g) * linalg::norm2(&g)), &diff);
        let h = crate::fd::fd_hessian(|x: &[f64]| m.cost(x, &tau).unwrap(), &s, 1e-3).unwrap();
        let expected = linalg::add(&exact, &h.matvec(&w));
        let (_, got) = so_penalty(&m, &s, eps, true).unwrap();
        let scale = linalg::norm_inf(&expected);
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-4 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_lambda_so_trajectory_matches_cw() {
        let m = net(45, &[8, 12, 4]);
        let base = states(46, 40, 8);
        let prof = profile(&m, Statistic::So, &base);
        let cfg = AwareConfig { lambda: 0.0, base: AttackConfig { iters: 50, ..AwareConfig::default().base }, ..Default::default() };
        let s = &base[0];
        let mut a = Vec::new();
        let mut b = Vec::new();
        so_aware_traced(&m, s, &prof, &cfg, Some(&mut a)).unwrap();
        cw_engine(&m, s, &cfg.base, None, CwSelect::MinL2, Some(&mut b)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
    }

    #[test]
    fn single_sample_zero_lambda_fo_is_plain_cw() {
        let m = net(47, &[8, 12, 4]);
        let base = states(48, 40, 8);
        let prof = profile(&m, Statistic::Fo, &base);
        let cfg = AwareConfig {
            lambda: 0.0,
            eot_samples: 1,
            base: AttackConfig { iters: 50, ..AwareConfig::default().base },
            ..Default::default()
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        fo_aware_traced(&m, &base[1], &prof, &cfg, Some(&mut a)).unwrap();
        cw_engine(&m, &base[1], &cfg.base, None, CwSelect::MinL2, Some(&mut b)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fo_penalty_variance_shrinks_with_samples() {
        let m = net(49, &[8, 12, 4]);
        let s = states(50, 1, 8).pop().unwrap();
        let spread = |samples: usize| {
            let v: Vec<f64> = (0..200)
                .map(|r| fo_penalty(&m, &s, 1e-2, samples, r).unwrap().0)
                .collect();
            let (_, sd) = linalg::mean_std(&v);
            sd * sd
        };
        let ratio = spread(1) / spread(50);
        assert!((25.0..=100.0).contains(&ratio), "variance ratio {ratio}");
    }

    #[test]
    fn wrong_profile_statistic_is_rejected() {
        let m = net(51, &[4, 4, 2]);
        let base = states(52, 20, 4);
        let prof = profile(&m, Statistic::Fo, &base);
        assert!(so_aware_cw(&m, &base[0], &prof, &AwareConfig::default()).is_err());
    }

    #[test]
    fn feature_match_to_self_is_identity() {
        let m = net(53, &[6, 8, 3]);
        let s = states(54, 1, 6).pop().unwrap();
        let r = feature_match_attack(&m, &s, &s, &AttackConfig::for_method(Method::Cw)).unwrap();
        assert_eq!(r.s_adv, s);
        assert_eq!(r.l2, 0.0);
    }

    #[test]
    fn feature_match_linear_least_squares() {
        // Diagonal logits make the problem separable, so clipping the
        // unconstrained solution into the ball is optimal.
        let w = [2.0, -1.0, 0.5];
        let m = PolicyNet::from_parts(
            vec![3, 3],
            Activation::Relu,
            vec![Mat64::from_diag(&w)],
            vec![vec![0.1, 0.0, -0.2]],
        )
        .unwrap();
        let s = [0.5, 0.5, 0.5];
        let target = [0.53, 0.2, 0.49];
        let cfg = AttackConfig { epsilon: 0.05, iters: 1000, alpha_step: 0.01, ..AttackConfig::for_method(Method::Cw) };
        let r = feature_match_attack(&m, &s, &target, &cfg).unwrap();
        let opt: Vec<f64> = (0..3).map(|i| target[i].clamp(s[i] - 0.05, s[i] + 0.05)).collect();
        let obj = |x: &[f64]| -> f64 { (0..3).map(|i| (w[i] * (x[i] - target[i])).powi(2)).sum() };
        assert!((obj(&r.s_adv) - obj(&opt)).abs() < 1e-4);
    }

    #[test]
    fn feature_match_never_increases_logit_distance() {
        let m = net(55, &[10, 12, 4]);
        let pool = states(56, 30, 10);
        for s in pool.iter().take(5) {
            let t = nearest_other_class(&m, s, &pool).unwrap();
            assert_ne!(m.greedy_action(&t).unwrap(), m.greedy_action(s).unwrap());
            let r = feature_match_attack(&m, s, &t, &AttackConfig::for_method(Method::Cw)).unwrap();
            let zt = m.forward(&t).unwrap();
            let d = |x: &[f64]| linalg::norm2(&linalg::sub(&m.forward(x).unwrap(), &zt));
            assert!(d(&r.s_adv) <= d(s));
            assert!(r.linf <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn nearest_other_class_needs_a_candidate() {
        let m = net(57, &[4, 4, 2]);
        let s = states(58, 1, 4).pop().unwrap();
        assert!(nearest_other_class(&m, &s, &[s.clone()]).is_err());
    }

    #[test]
    fn grid_search_contracts() {
        let m = net(59, &[8, 12, 4]);
        let base = states(60, 40, 8);
        let prof = profile(&m, Statistic::So, &base);
        let eval = &base[..6];
        let mut cfg = AwareConfig { base: AttackConfig { iters: 40, ..AwareConfig::default().base }, ..Default::default() };

        cfg.grid = AwareGrid { lr: vec![cfg.base.lr], iters: vec![40], kappa: vec![0.0], lambda: vec![0.0] };
        let (chosen, report) = grid_search(AwareKind::So, &m, eval, &base, &prof, &cfg).unwrap();
        assert_eq!(chosen.lambda, 0.0);
        assert_eq!(report.selected, Some(0));
        assert_eq!(report.points[0].success_rate, report.baseline.success_rate);

        cfg.grid.lambda = vec![0.0, 0.1, 1.0, 10.0];
        cfg.success_drop_cap = 1.0;
        let (chosen, report) = grid_search(AwareKind::So, &m, eval, &base, &prof, &cfg).unwrap();
        let best = report.points[report.selected.unwrap()].tpr;
        assert!(report.points.iter().all(|p| !p.feasible || best <= p.tpr));
        assert_eq!(chosen.lambda, report.points[report.selected.unwrap()].lambda);

        cfg.success_drop_cap = 0.1;
        let (_, report) = grid_search(AwareKind::So, &m, eval, &base, &prof, &cfg).unwrap();
        if let Some(i) = report.selected {
            assert!(report.points[i].success_rate >= 0.9 * report.baseline.success_rate);
        }
    }

    #[test]
    fn aware_kind_names() {
        for k in [AwareKind::So, AwareKind::Fo, AwareKind::Featmatch] {
            assert_eq!(k.to_string().parse::<AwareKind>().unwrap(), k);
        }
    }
}
