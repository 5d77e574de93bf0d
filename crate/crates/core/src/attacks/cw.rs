//! Carlini-Wagner ℓ₂ attack with a logit-margin loss.

use super::{AttackConfig, AttackResult, Goal};
use crate::error::{Error, Result};
use crate::linalg;
use crate::net::Model;
use crate::optim::Adam;

/// Keeps `atanh` finite for states on the box faces.
const TANH_LIMIT: f64 = 1.0 - 1e-9;

/// Extra differentiable term added to the C&W objective. Called with the
/// current iterate and the iteration index; returns the value and gradient.
pub(crate) type CwPenalty<'a> = dyn FnMut(&[f64], usize) -> Result<(f64, Vec<f64>)> + 'a;

/// How the returned iterate is chosen among successful ones.
pub(crate) enum CwSelect<'a> {
    /// Smallest ℓ₂ distortion.
    MinL2,
    /// Smallest score; ties keep the earlier iterate.
    MinScore(&'a dyn Fn(&[f64]) -> Result<f64>),
}

/// Margin of the goal at logits `z` (positive means not yet achieved) and its
/// gradient with respect to `z`.
pub(crate) fn margin(z: &[f64], goal: Goal) -> (f64, Vec<f64>) {
    let best_other = |skip: usize| {
        z.iter()
            .enumerate()
            .filter(|&(k, _)| k != skip)
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
    };
    let mut dz = vec![0.0; z.len()];
    match goal {
        Goal::Untargeted { original } => {
            let (k, zk) = best_other(original);
            dz[original] = 1.0;
            dz[k] = -1.0;
            (z[original] - zk, dz)
        }
        Goal::Targeted { target } => {
            let (k, zk) = best_other(target);
            dz[k] = 1.0;
            dz[target] = -1.0;
            (zk - z[target], dz)
        }
    }
}

/// Goal reached with at least `kappa` confidence.
pub(crate) fn cw_success(z: &[f64], goal: Goal, kappa: f64) -> bool {
    goal.achieved(linalg::argmax(z)) && margin(z, goal).0 <= -kappa
}

pub fn carlini_wagner<M: Model + ?Sized>(model: &M, s_bar: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    cw_engine(model, s_bar, cfg, None, CwSelect::MinL2, None)
}

/// Adam on `c·max(margin, −κ) + ‖s − s̄‖² + penalty(s)` in tanh space, with
/// the step size decayed as `lr·√(1 − k/iters)`.
///
/// `s̄` itself is scored as iterate 0. `trace`, when given, receives every
/// point at which the objective gradient was taken. Returns the selected successful
/// iterate, or the final one with `success = false` if none succeeded.
pub(crate) fn cw_engine<M: Model + ?Sized>(
    model: &M,
    s_bar: &[f64],
    cfg: &AttackConfig,
    mut penalty: Option<&mut CwPenalty<'_>>,
    select: CwSelect<'_>,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<AttackResult> {
    if !(cfg.c > 0.0) || !(cfg.lr > 0.0) || cfg.iters == 0 {
        return Err(Error::InvalidArgument("C&W needs c > 0, lr > 0 and iters >= 1".into()));
    }
    let goal = Goal::resolve(model, s_bar, cfg)?;
    let (lo, hi) = cfg.clip_box;
    let half = (hi - lo) / 2.0;
    let to_s = |w: &[f64]| -> Vec<f64> { w.iter().map(|&wi| (lo + half * (wi.tanh() + 1.0)).clamp(lo, hi)).collect() };
    let mut w: Vec<f64> = s_bar
        .iter()
        .map(|&s| ((s - lo) / half - 1.0).clamp(-TANH_LIMIT, TANH_LIMIT).atanh())
        .collect();
    let mut adam = Adam::new([w.len()], cfg.lr);

    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let consider = |s: &[f64], z: &[f64], it: usize, best: &mut Option<(f64, Vec<f64>, usize)>| -> Result<()> {
        if !cw_success(z, goal, cfg.kappa) {
            return Ok(());
        }
        let score = match &select {
            CwSelect::MinL2 => linalg::norm2(&linalg::sub(s, s_bar)),
            CwSelect::MinScore(f) => f(s)?,
        };
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            *best = Some((score, s.to_vec(), it));
        }
        Ok(())
    };

    let z0 = model.logits(s_bar)?;
    consider(s_bar, &z0, 0, &mut best)?;
    for it in 1..=cfg.iters {
        let s = to_s(&w);
        let z = model.logits(&s)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(s.clone());
        }
        if it > 1 {
            consider(&s, &z, it - 1, &mut best)?;
        }
        let (m, dz) = margin(&z, goal);
        let mut grad_s: Vec<f64> = s.iter().zip(s_bar).map(|(a, b)| 2.0 * (a - b)).collect();
        let mut loss = linalg::norm2(&linalg::sub(&s, s_bar)).powi(2) + cfg.c * m.max(-cfg.kappa);
        if m > -cfg.kappa {
            linalg::axpy(cfg.c, &model.logits_vjp(&s, &dz)?, &mut grad_s);
        }
        if let Some(p) = penalty.as_deref_mut() {
            let (pv, pg) = p(&s, it - 1)?;
            loss += pv;
            linalg::axpy(1.0, &pg, &mut grad_s);
        }
        if !loss.is_finite() || !linalg::all_finite(&grad_s) {
            return Err(Error::NonFinite("C&W loss"));
        }
        let grad_w: Vec<f64> = grad_s
            .iter()
            .zip(&w)
            .map(|(g, wi)| {
                let t = wi.tanh();
                g * half * (1.0 - t * t)
            })
            .collect();
        adam.lr = cfg.lr * (1.0 - (it - 1) as f64 / cfg.iters as f64).sqrt();
        adam.step([w.as_mut_slice()], [grad_w.as_slice()]);
    }
    let s_final = to_s(&w);
    let z_final = model.logits(&s_final)?;
    consider(&s_final, &z_final, cfg.iters, &mut best)?;

    let method = cfg.method;
    Ok(match best {
        Some((_, s, it)) => AttackResult::new(s_bar, s, true, it, method),
        None => AttackResult::new(s_bar, s_final, false, cfg.iters, method),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat64;
    use crate::attacks::Method;
    use crate::net::{Activation, PolicyNet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> AttackConfig {
        AttackConfig::for_method(Method::Cw)
    }

    fn two_class(w: &[f64], b: f64) -> PolicyNet {
        let d = w.len();
        let mut rows = vec![0.0; d];
        rows.extend_from_slice(w);
        PolicyNet::from_parts(
            vec![d, 2],
            Activation::Relu,
            vec![Mat64::from_row_major(2, d, rows).unwrap()],
            vec![vec![0.0, b]],
        )
        .unwrap()
    }

    #[test]
    fn already_misclassified_gives_zero_perturbation() {
        let net = two_class(&[1.0, 1.0], 0.5);
        let s = [0.5, 0.5];
        assert_eq!(net.greedy_action(&s).unwrap(), 1);
        let r = carlini_wagner(&net, &s, &AttackConfig { original_action: Some(0), ..cfg() }).unwrap();
        assert!(r.success);
        assert_eq!(r.l2, 0.0);
        assert_eq!(r.iters_used, 0);
    }

    #[test]
    fn large_c_aligns_with_deepfool() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 8;
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..d).map(|_| rng.random_range(0.4..0.6)).collect();
        let net = two_class(&w, -linalg::dot(&w, &s) - 0.05);
        let c = AttackConfig {
            c: 100.0,
            lr: 1e-3,
            iters: 5000,
            ..cfg()
        };
        let cw = carlini_wagner(&net, &s, &c).unwrap();
        let df = super::super::deepfool(&net, &s, &AttackConfig::for_method(Method::Deepfool)).unwrap();
        assert!(cw.success);
        let a = linalg::sub(&cw.s_adv, &s);
        let b = linalg::sub(&df.s_adv, &s);
        let cos = linalg::dot(&a, &b) / (linalg::norm2(&a) * linalg::norm2(&b));
        assert!(cos >= 0.99, "cosine {cos}");
    }

    #[test]
    fn success_implies_margin_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let net = PolicyNet::random(&[10, 16, 4], Activation::Tanh, &mut rng).unwrap();
        for kappa in [0.0, 0.5] {
            let mut wins = 0;
            for _ in 0..10 {
                let s: Vec<f64> = (0..10).map(|_| rng.random_range(0.2..0.8)).collect();
                let a = net.greedy_action(&s).unwrap();
                let r = carlini_wagner(&net, &s, &AttackConfig { kappa, ..cfg() }).unwrap();
                assert!(r.s_adv.iter().all(|v| (0.0..=1.0).contains(v)));
                if r.success {
                    wins += 1;
                    let z = net.forward(&r.s_adv).unwrap();
                    let other = (0..4).filter(|&k| k != a).map(|k| z[k]).fold(f64::NEG_INFINITY, f64::max);
                    assert!(z[a] - other <= -kappa);
                }
            }
            assert!(wins > 0);
        }
    }

    #[test]
    fn targeted_mode_reaches_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let net = PolicyNet::random(&[10, 16, 4], Activation::Relu, &mut rng).unwrap();
        let s: Vec<f64> = (0..10).map(|_| rng.random_range(0.2..0.8)).collect();
        let a = net.greedy_action(&s).unwrap();
        let target = (a + 1) % 4;
        let r = carlini_wagner(&net, &s, &AttackConfig { target: Some(target), iters: 1000, c: 20.0, ..cfg() }).unwrap();
        assert!(r.success);
        assert_eq!(net.greedy_action(&r.s_adv).unwrap(), target);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let net = two_class(&[f64::MAX, f64::MAX], 0.0);
        let err = carlini_wagner(&net, &[0.5, 0.4], &cfg()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn margin_gradient_matches_definition() {
        let z = [0.3, 1.2, -0.4];
        let (m, dz) = margin(&z, Goal::Untargeted { original: 1 });
        assert!((m - 0.9).abs() < 1e-15);
        assert_eq!(dz, vec![-1.0, 1.0, 0.0]);
        let (m, dz) = margin(&z, Goal::Targeted { target: 2 });
        assert!((m - 1.6).abs() < 1e-15);
        assert_eq!(dz, vec![0.0, 1.0, -1.0]);
    }
}
