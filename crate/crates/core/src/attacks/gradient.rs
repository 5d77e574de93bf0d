//! Sign-gradient attacks: FGSM, I-FGSM, MI-FGSM and the Nesterov look-ahead
//! variant.

use super::{fgsm_direction, project, AttackConfig, AttackResult, Goal, Method};
use crate::error::Result;
use crate::linalg;
use crate::net::Model;

const MIN_L1: f64 = 1e-12;

/// One step of size `ε` along `sign(∇J(s̄, π*(·|s̄)))`.
pub fn fgsm<M: Model + ?Sized>(model: &M, s_bar: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    let goal = Goal::resolve(model, s_bar, cfg)?;
    let grad = fgsm_direction(model, s_bar, goal)?;
    let mut x: Vec<f64> = s_bar
        .iter()
        .zip(&grad)
        .map(|(&s, &g)| s + cfg.epsilon * linalg::sign(g))
        .collect();
    project(&mut x, s_bar, Some(cfg.epsilon), cfg.clip_box);
    let success = goal.achieved(model.greedy_action(&x)?);
    Ok(AttackResult::new(s_bar, x, success, 1, Method::Fgsm))
}

/// `x ← clip_ε(x + α·sign(∇J(x)))` from `x = s̄`.
pub fn ifgsm<M: Model + ?Sized>(model: &M, s_bar: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    iterate(model, s_bar, cfg, Update::Plain, Method::Ifgsm)
}

/// I-FGSM with an ℓ₁-normalized momentum accumulator.
pub fn mifgsm<M: Model + ?Sized>(model: &M, s_bar: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    iterate(model, s_bar, cfg, Update::Momentum { lookahead: false }, Method::Mifgsm)
}

/// MI-FGSM with the gradient taken at the look-ahead point `x + α·μ·g`.
pub fn nesterov<M: Model + ?Sized>(model: &M, s_bar: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    iterate(model, s_bar, cfg, Update::Momentum { lookahead: true }, Method::Nesterov)
}

#[derive(Clone, Copy)]
enum Update {
    Plain,
    Momentum { lookahead: bool },
}

fn iterate<M: Model + ?Sized>(
    model: &M,
    s_bar: &[f64],
    cfg: &AttackConfig,
    update: Update,
    method: Method,
) -> Result<AttackResult> {
    let goal = Goal::resolve(model, s_bar, cfg)?;
    let mut x = s_bar.to_vec();
    let mut velocity = vec![0.0; s_bar.len()];
    for _ in 0..cfg.iters {
        let direction = match update {
            Update::Plain => fgsm_direction(model, &x, goal)?,
            Update::Momentum { lookahead } => {
                let grad = if lookahead && cfg.mu != 0.0 {
                    let ahead: Vec<f64> = x
                        .iter()
                        .zip(&velocity)
                        .map(|(xi, vi)| xi + cfg.alpha_step * cfg.mu * vi)
                        .collect();
                    fgsm_direction(model, &ahead, goal)?
                } else {
                    fgsm_direction(model, &x, goal)?
                };
                let l1 = linalg::norm1(&grad);
                let scale = if l1 < MIN_L1 { 1.0 } else { 1.0 / l1 };
                for (v, g) in velocity.iter_mut().zip(&grad) {
                    *v = cfg.mu * *v + g * scale;
                }
                velocity.clone()
            }
        };
        for (xi, d) in x.iter_mut().zip(&direction) {
            *xi += cfg.alpha_step * linalg::sign(*d);
        }
        project(&mut x, s_bar, Some(cfg.epsilon), cfg.clip_box);
    }
    let success = goal.achieved(model.greedy_action(&x)?);
    Ok(AttackResult::new(s_bar, x, success, cfg.iters, method))
}
