//! Elastic-net attack: ISTA on `c·margin + λ₂‖δ‖² ` with an `λ₁‖δ‖₁` prox.

use super::cw::{cw_success, margin};
use super::{project, AttackConfig, AttackResult, Goal, Method};
use crate::error::{Error, Result};
use crate::linalg;
use crate::net::Model;

/// Elastic-net distortion `λ₁‖δ‖₁ + λ₂‖δ‖₂²`.
pub fn elastic_net(delta: &[f64], lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * linalg::norm1(delta) + lambda2 * linalg::dot(delta, delta)
}

fn shrink(v: f64, beta: f64) -> f64 {
    if v > beta {
        v - beta
    } else if v < -beta {
        v + beta
    } else {
        0.0
    }
}

/// The step size decays as `lr·√(1 − k/iters)`. Returns the successful
/// iterate with the smallest elastic-net distortion, or the final iterate.
pub fn ead<M: Model + ?Sized>(model: &M, s_bar: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    if !(cfg.c > 0.0) || !(cfg.lr > 0.0) || cfg.iters == 0 {
        return Err(Error::InvalidArgument("EAD needs c > 0, lr > 0 and iters >= 1".into()));
    }
    if !(cfg.lambda1 >= 0.0) || !(cfg.lambda2 > 0.0) {
        return Err(Error::InvalidArgument("EAD needs lambda1 >= 0 and lambda2 > 0".into()));
    }
    let goal = Goal::resolve(model, s_bar, cfg)?;
    let mut x = s_bar.to_vec();
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    for it in 0..=cfg.iters {
        let z = model.logits(&x)?;
        let delta = linalg::sub(&x, s_bar);
        if cw_success(&z, goal, cfg.kappa) {
            let en = elastic_net(&delta, cfg.lambda1, cfg.lambda2);
            if best.as_ref().is_none_or(|(b, _, _)| en < *b) {
                best = Some((en, x.clone(), it));
            }
        }
        if it == cfg.iters {
            break;
        }
        let (m, dz) = margin(&z, goal);
        let mut grad = linalg::scale(2.0 * cfg.lambda2, &delta);
        if m > -cfg.kappa {
            linalg::axpy(cfg.c, &model.logits_vjp(&x, &dz)?, &mut grad);
        }
        if !m.is_finite() || !linalg::all_finite(&grad) {
            return Err(Error::NonFinite("EAD loss"));
        }
        let lr = cfg.lr * (1.0 - it as f64 / cfg.iters as f64).sqrt();
        let beta = lr * cfg.lambda1;
        for ((xi, &si), &gi) in x.iter_mut().zip(s_bar).zip(&grad) {
            *xi = si + shrink(*xi - lr * gi - si, beta);
        }
        project(&mut x, s_bar, None, cfg.clip_box);
    }
    Ok(match best {
        Some((_, s, it)) => AttackResult::new(s_bar, s, true, it, Method::Ead),
        None => AttackResult::new(s_bar, x, false, cfg.iters, Method::Ead),
    })
}
