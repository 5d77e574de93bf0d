//! Multiclass DeepFool on the logits.

use super::{project, AttackConfig, AttackResult, Goal, Method};
use crate::error::{Error, Result};
use crate::linalg;
use crate::net::Model;

/// Smallest step length taken toward a hyperplane, so a state sitting on the
/// boundary still moves.
const MIN_STEP: f64 = 1e-12;

pub fn deepfool<M: Model + ?Sized>(model: &M, s_bar: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    let n = model.num_actions();
    if n < 2 {
        return Err(Error::InvalidArgument("deepfool needs at least two actions".into()));
    }
    let goal = Goal::resolve(model, s_bar, cfg)?;
    let scale = 1.0 + cfg.overshoot;
    let mut r_total = vec![0.0; s_bar.len()];
    let mut x = s_bar.to_vec();
    let mut iters = 0;
    let mut z = model.logits(&x)?;
    while iters < cfg.iters && !goal.achieved(linalg::argmax(&z)) {
        let Some(step) = nearest_hyperplane(model, &x, &z, goal)? else {
            break;
        };
        linalg::axpy(1.0, &step, &mut r_total);
        x = s_bar.iter().zip(&r_total).map(|(s, r)| s + scale * r).collect();
        project(&mut x, s_bar, None, cfg.clip_box);
        z = model.logits(&x)?;
        iters += 1;
    }
    let success = goal.achieved(linalg::argmax(&z));
    Ok(AttackResult::new(s_bar, x, success, iters, Method::Deepfool))
}

/// Minimal step to the closest linearized boundary, or `None` when every
/// logit gap has a vanishing gradient.
fn nearest_hyperplane<M: Model + ?Sized>(model: &M, x: &[f64], z: &[f64], goal: Goal) -> Result<Option<Vec<f64>>> {
    let n = z.len();
    // Gaps f_k = z_k − z_a toward each rival class k; the attack raises f_k
    // to zero. In targeted mode only the target is a rival, against the
    // current leader.
    let pairs: Vec<(usize, usize)> = match goal {
        Goal::Untargeted { original } => (0..n).filter(|&k| k != original).map(|k| (k, original)).collect(),
        Goal::Targeted { target } => vec![(target, linalg::argmax(z))],
    };
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for (k, a) in pairs {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        v[a] = -1.0;
        let w = model.logits_vjp(x, &v)?;
        let wn = linalg::norm2(&w);
        if !(wn > 0.0) {
            continue;
        }
        let f = z[k] - z[a];
        let dist = f.abs() / wn;
        if best.as_ref().is_none_or(|(d, _, _)| dist < *d) {
            best = Some((dist, w, f));
        }
    }
    Ok(best.map(|(dist, w, _)| {
        let wn = linalg::norm2(&w);
        let len = dist.max(MIN_STEP);
        linalg::scale(len / wn, &w)
    }))
}
