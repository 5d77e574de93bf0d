//! First- and second-order identification of non-robust directions.
//!
//! Both detectors score a state `s₀` by how the cost `J(·, π*(·|s₀))`
//! behaves around it:
//!
//! * first order: `K = J(s₀ + η) − J(s₀)` for Gaussian `η ~ N(0, εI)`;
//! * second order: `L = J(s₀ + η) − J(s₀) − ∇J(s₀)·η` along the
//!   sign-gradient probe `η = ε·sign(∇J)/‖∇J‖₂`.
//!
//! A state is flagged when its statistic sits more than `t` standard
//! deviations from the mean recorded on a base run.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd;
use crate::linalg::{self, Mat64};
use crate::net::{ActionDist, Model};
use crate::seed;

pub const DEFAULT_PROBE_EPSILON: f64 = 1e-2;
const MIN_GRAD_NORM: f64 = 1e-12;

/// `J(s, τ) = −Σ τ(a) log π(a|s)`.
pub fn cost<M: Model + ?Sized>(model: &M, s: &[f64], tau: &ActionDist) -> Result<f64> {
    model.cost(s, tau)
}

/// `π*(·|s)`: all mass on the highest-probability action, lowest index on ties.
pub fn argmax_policy<M: Model + ?Sized>(model: &M, s: &[f64]) -> Result<ActionDist> {
    Ok(ActionDist::one_hot(model.greedy_action(s)?, model.num_actions()))
}

/// `K(s₀, η)` for an explicit perturbation.
pub fn fo_stat_with_noise<M: Model + ?Sized>(model: &M, s0: &[f64], eta: &[f64]) -> Result<f64> {
    let (tau, j0) = model.greedy_cost(s0)?;
    let j1 = model.cost(&linalg::add(s0, eta), &tau)?;
    Ok(j1 - j0)
}

/// Gaussian probe with covariance `εI`.
pub fn gaussian_probe(dim: usize, epsilon: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = epsilon.sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect()
}

/// `K(s₀, η)` with one draw `η ~ N(0, εI)` from the stream `seed`.
pub fn fo_stat<M: Model + ?Sized>(model: &M, s0: &[f64], epsilon: f64, seed: u64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("probe epsilon must be positive".into()));
    }
    let eta = gaussian_probe(s0.len(), epsilon, seed);
    fo_stat_with_noise(model, s0, &eta)
}

/// `η = ε·sign(g)/‖g‖₂`.
pub fn probe_from_gradient(grad: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let norm = linalg::norm2(grad);
    if !(norm >= MIN_GRAD_NORM) {
        return Err(Error::DegenerateGradient);
    }
    Ok(grad.iter().map(|&g| epsilon * linalg::sign(g) / norm).collect())
}

/// Probe direction at `s₀` along the sign of `∇J(s₀, π*(·|s₀))`.
pub fn probe_direction<M: Model + ?Sized>(model: &M, s0: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("probe epsilon must be positive".into()));
    }
    let tau = argmax_policy(model, s0)?;
    probe_from_gradient(&model.cost_grad(s0, &tau)?, epsilon)
}

/// Intermediate quantities of one second-order evaluation.
#[derive(Debug, Clone)]
pub struct SoEvaluation {
    pub value: f64,
    pub tau: ActionDist,
    pub grad: Vec<f64>,
    pub eta: Vec<f64>,
    /// `J(s₀ + η, π*(·|s₀))`.
    pub probed_cost: f64,
    /// Gradient of `J(·, π*(·|s₀))` evaluated at `s₀ + η`, filled on request.
    pub probed_grad: Option<Vec<f64>>,
}

/// `L(s₀, η(s₀))` with its intermediate terms. Uses one gradient and two cost
/// evaluations.
pub fn so_evaluate<M: Model + ?Sized>(model: &M, s0: &[f64], epsilon: f64) -> Result<SoEvaluation> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("probe epsilon must be positive".into()));
    }
    let (tau, j0) = model.greedy_cost(s0)?;
    let grad = model.cost_grad(s0, &tau)?;
    let eta = probe_from_gradient(&grad, epsilon)?;
    let probed = linalg::add(s0, &eta);
    let j1 = model.cost(&probed, &tau)?;
    let taylor = j0 + linalg::dot(&grad, &eta);
    Ok(SoEvaluation {
        value: j1 - taylor,
        tau,
        grad,
        eta,
        probed_cost: j1,
        probed_grad: None,
    })
}

/// `L(s₀, η(s₀)) = J(s₀ + η) − [J(s₀) + ∇J(s₀)·η]`.
pub fn so_stat<M: Model + ?Sized>(model: &M, s0: &[f64], epsilon: f64) -> Result<f64> {
    Ok(so_evaluate(model, s0, epsilon)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    /// First-order, Gaussian probe.
    Fo,
    /// Second-order, sign-gradient probe.
    So,
}

impl std::fmt::Display for Statistic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Statistic::Fo => "fo",
            Statistic::So => "so",
        })
    }
}

impl std::str::FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fo" | "FO" => Ok(Statistic::Fo),
            "so" | "SO" => Ok(Statistic::So),
            other => Err(Error::InvalidArgument(format!("unknown statistic {other:?}"))),
        }
    }
}

/// Evaluates the chosen statistic at `s`. The FO noise draw is keyed on
/// `(seed, s)` so that scoring a state is a pure function.
pub fn statistic_value<M: Model + ?Sized>(
    model: &M,
    s: &[f64],
    statistic: Statistic,
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    match statistic {
        Statistic::So => so_stat(model, s, epsilon),
        Statistic::Fo => fo_stat(model, s, epsilon, seed::for_vector(seed, s)),
    }
}

/// Everything the decision rule needs at test time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub statistic: Statistic,
    pub epsilon: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Threshold in standard deviations; unset until a target FPR is chosen.
    pub t: Option<f64>,
    pub target_fpr: Option<f64>,
    pub seed: u64,
    pub skipped_degenerate: usize,
    #[serde(default)]
    pub one_sided: bool,
}

impl CalibrationProfile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Signed deviation in standard deviations.
    pub fn z(&self, stat: f64) -> f64 {
        (stat - self.mean) / self.std
    }

    /// The score compared against `t`: `|z|`, or `z` for the one-sided rule.
    pub fn score(&self, stat: f64) -> f64 {
        if self.one_sided {
            self.z(stat)
        } else {
            self.z(stat).abs()
        }
    }

    pub fn threshold(&self) -> Result<f64> {
        self.t
            .ok_or_else(|| Error::InvalidArgument("profile has no threshold; run choose_threshold".into()))
    }
}

/// Statistic values over a base run, before the threshold is fixed.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub profile: CalibrationProfile,
    pub values: Vec<f64>,
}

/// Builds a profile from already computed statistic values.
pub fn profile_from_values(
    values: &[f64],
    statistic: Statistic,
    epsilon: f64,
    seed: u64,
    skipped_degenerate: usize,
) -> Result<CalibrationProfile> {
    if values.len() < 2 {
        return Err(Error::DegenerateCalibration(format!(
            "need at least 2 usable states, got {}",
            values.len()
        )));
    }
    let (mean, std) = linalg::mean_std(values);
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::DegenerateCalibration(
            "statistic has zero spread over the base run".into(),
        ));
    }
    Ok(CalibrationProfile {
        statistic,
        epsilon,
        mean,
        std,
        n: values.len(),
        t: None,
        target_fpr: None,
        seed,
        skipped_degenerate,
        one_sided: false,
    })
}

/// Mean and unbiased spread of the statistic over base-run states. States
/// whose probe is undefined are skipped and counted.
pub fn calibrate<M, S>(
    model: &M,
    base_obs: &[S],
    epsilon: f64,
    statistic: Statistic,
    seed: u64,
) -> Result<Calibration>
where
    M: Model + ?Sized,
    S: AsRef<[f64]> + Sync,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("probe epsilon must be positive".into()));
    }
    let raw: Vec<Result<f64>> = base_obs
        .par_iter()
        .map(|s| statistic_value(model, s.as_ref(), statistic, epsilon, seed))
        .collect();
    let mut values = Vec::with_capacity(raw.len());
    let mut skipped = 0;
    for r in raw {
        match r {
            Ok(v) => values.push(v),
            Err(Error::DegenerateGradient) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let profile = profile_from_values(&values, statistic, epsilon, seed, skipped)?;
    Ok(Calibration { profile, values })
}

/// Lower-interpolation empirical quantile of `sorted` (ascending) at `q`.
pub fn lower_quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Threshold `t` such that a `target_fpr` fraction of calibration states
/// score above it.
pub fn choose_threshold(profile: &CalibrationProfile, values: &[f64], target_fpr: f64) -> Result<f64> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::InvalidArgument("target FPR must lie in (0, 1)".into()));
    }
    if values.is_empty() || target_fpr < 1.0 / values.len() as f64 {
        return Err(Error::InvalidArgument(format!(
            "target FPR {target_fpr} below 1/n with n = {}",
            values.len()
        )));
    }
    let mut scores: Vec<f64> = values.iter().map(|&v| profile.score(v)).collect();
    scores.sort_by(f64::total_cmp);
    Ok(lower_quantile(&scores, 1.0 - target_fpr))
}

/// Convenience: fix `t` on the profile in place.
pub fn set_threshold(calibration: &mut Calibration, target_fpr: f64) -> Result<f64> {
    let t = choose_threshold(&calibration.profile, &calibration.values, target_fpr)?;
    calibration.profile.t = Some(t);
    calibration.profile.target_fpr = Some(target_fpr);
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `None` when the probe is undefined at this state.
    pub stat_value: Option<f64>,
    pub z_abs: f64,
    pub flagged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Applies the threshold rule to an already computed statistic.
pub fn decide(profile: &CalibrationProfile, stat: f64) -> Result<Detection> {
    let t = profile.threshold()?;
    Ok(Detection {
        stat_value: Some(stat),
        z_abs: profile.z(stat).abs(),
        flagged: profile.score(stat) > t,
        reason: None,
    })
}

/// Scores `s` and applies the threshold rule. A state whose probe direction is
/// undefined is flagged.
pub fn detect<M: Model + ?Sized>(model: &M, s: &[f64], profile: &CalibrationProfile) -> Result<Detection> {
    profile.threshold()?;
    match statistic_value(model, s, profile.statistic, profile.epsilon, profile.seed) {
        Ok(v) => decide(profile, v),
        Err(Error::DegenerateGradient) => Ok(Detection {
            stat_value: None,
            z_abs: f64::INFINITY,
            flagged: true,
            reason: Some("degenerate_gradient".into()),
        }),
        Err(e) => Err(e),
    }
}

/// Wraps a model and counts cost and gradient evaluations.
pub struct CountingModel<'a, M: Model + ?Sized> {
    inner: &'a M,
    costs: AtomicUsize,
    grads: AtomicUsize,
    logits: AtomicUsize,
}

impl<'a, M: Model + ?Sized> CountingModel<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self {
            inner,
            costs: AtomicUsize::new(0),
            grads: AtomicUsize::new(0),
            logits: AtomicUsize::new(0),
        }
    }

    /// `J` evaluations (including the one fused with the argmax).
    pub fn cost_evals(&self) -> usize {
        self.costs.load(Ordering::Relaxed)
    }

    pub fn grad_evals(&self) -> usize {
        self.grads.load(Ordering::Relaxed)
    }

    /// Bare logit / VJP calls outside the two counters above.
    pub fn other_evals(&self) -> usize {
        self.logits.load(Ordering::Relaxed)
    }
}

impl<M: Model + ?Sized> Model for CountingModel<'_, M> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    fn logits(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.logits.fetch_add(1, Ordering::Relaxed);
        self.inner.logits(s)
    }

    fn logits_vjp(&self, s: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.logits.fetch_add(1, Ordering::Relaxed);
        self.inner.logits_vjp(s, v)
    }

    fn cost(&self, s: &[f64], tau: &ActionDist) -> Result<f64> {
        self.costs.fetch_add(1, Ordering::Relaxed);
        self.inner.cost(s, tau)
    }

    fn cost_grad(&self, s: &[f64], tau: &ActionDist) -> Result<Vec<f64>> {
        self.grads.fetch_add(1, Ordering::Relaxed);
        self.inner.cost_grad(s, tau)
    }

    fn greedy_cost(&self, s: &[f64]) -> Result<(ActionDist, f64)> {
        self.costs.fetch_add(1, Ordering::Relaxed);
        self.inner.greedy_cost(s)
    }
}

/// Optimizer budget for [`verify_prop1`].
#[derive(Debug, Clone, Copy)]
pub struct Prop1Budget {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub hessian_step: f64,
}

impl Default for Prop1Budget {
    fn default() -> Self {
        Self {
            max_iters: 200_000,
            grad_tol: 1e-6,
            hessian_step: fd::DEFAULT_HESSIAN_STEP,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Prop1Report {
    pub converged: bool,
    pub iterations: usize,
    pub s_star: Vec<f64>,
    pub grad_norm: f64,
    /// Smallest eigenvalue of the finite-difference Hessian of `J(·, τ)` at `s*`.
    pub lambda_min: f64,
    /// `λ_min + c`; non-negative at a local minimum.
    pub margin: f64,
    /// `‖∇J(s*, τ) + c (s* − s₀)‖₂`.
    pub identity_residual: f64,
}

/// Minimizes `f(s) = J(s, τ) + (c/2)‖s − s₀‖²` by backtracking gradient descent
/// from `s₀` and measures the curvature of `J` at the minimizer found.
pub fn verify_prop1<M: Model + ?Sized>(
    model: &M,
    s0: &[f64],
    tau: &ActionDist,
    c: f64,
    budget: Prop1Budget,
) -> Result<Prop1Report> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument("c must be positive".into()));
    }
    let objective = |s: &[f64]| -> Result<f64> {
        let d = linalg::sub(s, s0);
        Ok(model.cost(s, tau)? + 0.5 * c * linalg::dot(&d, &d))
    };
    let gradient = |s: &[f64]| -> Result<Vec<f64>> {
        let mut g = model.cost_grad(s, tau)?;
        for ((gi, si), s0i) in g.iter_mut().zip(s).zip(s0) {
            *gi += c * (si - s0i);
        }
        Ok(g)
    };

    let mut s = s0.to_vec();
    let mut f = objective(&s)?;
    let mut g = gradient(&s)?;
    let mut step = 1.0 / c;
    let mut iterations = 0;
    while linalg::norm2(&g) >= budget.grad_tol && iterations < budget.max_iters {
        iterations += 1;
        let gg = linalg::dot(&g, &g);
        loop {
            let trial: Vec<f64> = s.iter().zip(&g).map(|(x, d)| x - step * d).collect();
            let ft = objective(&trial)?;
            if ft <= f - 0.5 * step * gg || step < 1e-12 {
                s = trial;
                f = ft;
                break;
            }
            step *= 0.5;
        }
        g = gradient(&s)?;
        step = (step * 2.0).min(1.0 / c);
        if !f.is_finite() {
            return Err(Error::NonFinite("prop-1 objective"));
        }
    }
    let grad_norm = linalg::norm2(&g);
    let hess: Mat64 = fd::fd_hessian(
        |x| model.cost(x, tau).unwrap_or(f64::NAN),
        &s,
        budget.hessian_step,
    )?;
    let lambda_min = fd::min_eigenvalue(&hess)?;
    let mut residual = model.cost_grad(&s, tau)?;
    for ((r, si), s0i) in residual.iter_mut().zip(&s).zip(s0) {
        *r += c * (si - s0i);
    }
    Ok(Prop1Report {
        converged: grad_norm < budget.grad_tol,
        iterations,
        s_star: s,
        grad_norm,
        lambda_min,
        margin: lambda_min + c,
        identity_residual: linalg::norm2(&residual),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, PolicyNet};
    use crate::surrogate::{LinearCost, QuadraticCost};
    use rand::Rng;

    fn linear_net(w: Vec<f64>, rows: usize, cols: usize) -> PolicyNet {
        PolicyNet::from_parts(
            vec![cols, rows],
            Activation::Relu,
            vec![Mat64::from_row_major(rows, cols, w).unwrap()],
            vec![vec![0.0; rows]],
        )
        .unwrap()
    }

    #[test]
    fn cost_near_zero_for_confident_argmax() {
        let net = linear_net(vec![100.0, 0.0, -100.0, 0.0], 2, 2);
        let j = cost(&net, &[1.0, 0.0], &ActionDist::one_hot(0, 2)).unwrap();
        assert!(j < 1e-9);
    }

    #[test]
    fn cost_uniform_target_matches_scalar() {
        let net = linear_net(vec![1.0, 2.0, -0.5, 0.3, 0.0, 1.0], 3, 2);
        let s = [0.4, -0.2];
        let z = net.forward(&s).unwrap();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let expect = -z.iter().map(|v| (v.exp() / denom).ln()).sum::<f64>() / 3.0;
        let j = cost(&net, &s, &ActionDist::uniform(3)).unwrap();
        assert!((j - expect).abs() < 1e-12);
    }

    #[test]
    fn argmax_policy_cases() {
        let id3 = linear_net(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3);
        assert_eq!(argmax_policy(&id3, &[1.0, 3.0, 2.0]).unwrap().probs(), &[0.0, 1.0, 0.0]);
        assert_eq!(argmax_policy(&id3, &[2.0, 2.0, 0.0]).unwrap().probs(), &[1.0, 0.0, 0.0]);
        assert_eq!(
            argmax_policy(&id3, &[11.0, 13.0, 12.0]).unwrap(),
            argmax_policy(&id3, &[1.0, 3.0, 2.0]).unwrap()
        );
    }

    #[test]
    fn probe_direction_formula() {
        let p = probe_from_gradient(&[3.0, 4.0], 0.1).unwrap();
        assert!((p[0] - 0.02).abs() < 1e-15 && (p[1] - 0.02).abs() < 1e-15);
        let p = probe_from_gradient(&[-3.0, 4.0], 0.1).unwrap();
        assert!((p[0] + 0.02).abs() < 1e-15 && (p[1] - 0.02).abs() < 1e-15);
        assert!(matches!(
            probe_from_gradient(&[0.0, 1e-14], 0.1),
            Err(Error::DegenerateGradient)
        ));
    }

    #[test]
    fn probe_norm_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = PolicyNet::random(&[12, 10, 4], Activation::Tanh, &mut rng).unwrap();
        let eps = 0.05;
        for _ in 0..100 {
            let s: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
            let tau = argmax_policy(&net, &s).unwrap();
            let g = net.cost_grad(&s, &tau).unwrap();
            let eta = probe_direction(&net, &s, eps).unwrap();
            let nonzero = g.iter().filter(|v| **v != 0.0).count() as f64;
            let expect = eps * nonzero.sqrt() / linalg::norm2(&g);
            assert!((linalg::norm2(&eta) - expect).abs() < 1e-12 * expect);
        }
    }

    #[test]
    fn so_stat_on_diagonal_quadratic() {
        let q = QuadraticCost {
            a: Mat64::from_diag(&[2.0, -3.0]),
        };
        // At s0 = (0, 1) the gradient is (0, -6): η = ε(0, -1)/6.
        let s0 = [0.0, 1.0];
        let eps = 0.6;
        let l = so_stat(&q, &s0, eps).unwrap();
        assert!((l - (-3.0 * 0.01)).abs() < 1e-12, "{l}");
    }

    #[test]
    fn so_stat_zero_on_linear() {
        let lin = LinearCost {
            g: vec![0.3, -1.2, 2.0],
            c: 0.5,
        };
        assert!(so_stat(&lin, &[0.1, 0.2, 0.3], 0.01).unwrap().abs() < 1e-10);
    }

    #[test]
    fn fo_stat_on_linear_is_inner_product() {
        let lin = LinearCost {
            g: vec![0.3, -1.2, 2.0],
            c: 0.5,
        };
        let s0 = [0.1, 0.2, 0.3];
        let eta = gaussian_probe(3, 0.01, 5);
        let k = fo_stat(&lin, &s0, 0.01, 5).unwrap();
        assert!((k - linalg::dot(&lin.g, &eta)).abs() < 1e-12);
    }

    #[test]
    fn fo_stat_vanishes_with_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = PolicyNet::random(&[20, 16, 4], Activation::Relu, &mut rng).unwrap();
        let s: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
        assert!(fo_stat(&net, &s, 1e-8, 3).unwrap().abs() < 1e-4);
    }

    #[test]
    fn fo_stat_mean_on_quadratic() {
        let a = Mat64::from_diag(&[1.0, -0.5, 2.0, 0.25]);
        let trace = 2.75;
        let q = QuadraticCost { a };
        let eps = 0.01;
        let n = 10_000;
        let ks: Vec<f64> = (0..n)
            .map(|i| fo_stat(&q, &[0.0; 4], eps, i as u64).unwrap())
            .collect();
        let (mean, sd) = linalg::mean_std(&ks);
        let se = sd / (n as f64).sqrt();
        assert!((mean - eps * trace).abs() < 3.0 * se, "{mean} vs {}", eps * trace);
    }

    #[test]
    fn calibration_arithmetic() {
        let p = profile_from_values(&[-1.0, -3.0], Statistic::So, 0.01, 0, 0).unwrap();
        assert_eq!(p.mean, -2.0);
        assert!((p.std - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_stream_is_degenerate() {
        assert!(matches!(
            profile_from_values(&[0.5; 10], Statistic::So, 0.01, 0, 0),
            Err(Error::DegenerateCalibration(_))
        ));
        assert!(matches!(
            profile_from_values(&[0.5], Statistic::So, 0.01, 0, 0),
            Err(Error::DegenerateCalibration(_))
        ));
    }

    #[test]
    fn threshold_lower_quantile() {
        // mean 0, std 1 so values are their own z-scores.
        let profile = CalibrationProfile {
            statistic: Statistic::So,
            epsilon: 0.01,
            mean: 0.0,
            std: 1.0,
            n: 10,
            t: None,
            target_fpr: None,
            seed: 0,
            skipped_degenerate: 0,
            one_sided: false,
        };
        let values: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let t = choose_threshold(&profile, &values, 0.2).unwrap();
        assert!((t - 0.8).abs() < 1e-15);
        assert!(choose_threshold(&profile, &values, 0.05).is_err());
        let t_hi = choose_threshold(&profile, &values, 0.999).unwrap();
        assert!((t_hi - 0.1).abs() < 1e-15);
    }

    fn profile_with(mean: f64, std: f64, t: f64) -> CalibrationProfile {
        CalibrationProfile {
            statistic: Statistic::So,
            epsilon: 0.01,
            mean,
            std,
            n: 100,
            t: Some(t),
            target_fpr: Some(0.01),
            seed: 0,
            skipped_degenerate: 0,
            one_sided: false,
        }
    }

    #[test]
    fn decision_rule() {
        let p = profile_with(-0.5, 0.1, 3.0);
        let d = decide(&p, 0.2).unwrap();
        assert!((d.z_abs - 7.0).abs() < 1e-12 && d.flagged);
        assert!(!decide(&p, -0.5).unwrap().flagged);
        // Far below the mean is flagged too under the two-sided rule.
        assert!(decide(&p, -1.5).unwrap().flagged);
        let mut one = p.clone();
        one.one_sided = true;
        assert!(!decide(&one, -1.5).unwrap().flagged);
        assert!(decide(&one, 0.2).unwrap().flagged);
    }

    #[test]
    fn decision_invariant_under_affine_rescaling() {
        let p = profile_with(-0.5, 0.1, 2.5);
        let (a, b) = (3.7, -12.0);
        let q = profile_with(a * -0.5 + b, a * 0.1, 2.5);
        for stat in [-1.0, -0.76, -0.74, -0.5, -0.26, -0.24, 0.3] {
            assert_eq!(
                decide(&p, stat).unwrap().flagged,
                decide(&q, a * stat + b).unwrap().flagged
            );
        }
    }

    #[test]
    fn degenerate_state_is_flagged() {
        let flat = LinearCost { g: vec![0.0; 3], c: 1.0 };
        let d = detect(&flat, &[0.1, 0.2, 0.3], &profile_with(0.0, 1.0, 3.0)).unwrap();
        assert!(d.flagged);
        assert_eq!(d.reason.as_deref(), Some("degenerate_gradient"));
    }

    #[test]
    fn detect_requires_threshold() {
        let lin = LinearCost { g: vec![1.0; 3], c: 1.0 };
        let mut p = profile_with(0.0, 1.0, 3.0);
        p.t = None;
        assert!(detect(&lin, &[0.0; 3], &p).is_err());
    }

    #[test]
    fn calibrate_skips_degenerate_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = PolicyNet::random(&[6, 8, 3], Activation::Tanh, &mut rng).unwrap();
        let obs: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let a = calibrate(&net, &obs, 0.01, Statistic::So, 0).unwrap();
        let b = calibrate(&net, &obs, 0.01, Statistic::So, 0).unwrap();
        assert_eq!(a.profile, b.profile);
        assert_eq!(a.profile.n, 20);
        let flat = LinearCost { g: vec![0.0; 6], c: 0.0 };
        assert!(calibrate(&flat, &obs, 0.01, Statistic::So, 0).is_err());
    }

    #[test]
    fn so_stat_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = PolicyNet::random(&[6, 8, 3], Activation::Relu, &mut rng).unwrap();
        let counted = CountingModel::new(&net);
        so_stat(&counted, &[0.2; 6], 0.01).unwrap();
        assert_eq!((counted.cost_evals(), counted.grad_evals(), counted.other_evals()), (2, 1, 0));
    }

    #[test]
    fn prop1_on_convex_quadratic() {
        let q = QuadraticCost {
            a: Mat64::from_diag(&[1.0, 0.5]),
        };
        let tau = ActionDist::one_hot(0, 1);
        let r = verify_prop1(&q, &[0.7, -0.2], &tau, 1.0, Prop1Budget::default()).unwrap();
        assert!(r.converged);
        assert!(r.lambda_min >= 0.0 - 1e-6 && r.margin > 0.0);
        assert!(r.identity_residual < 1e-5);
    }
}
