//! Adversarial observation generators.
//!
//! Every attack takes a base observation `s̄` and returns an [`AttackResult`]
//! whose `s_adv` lies inside `clip_box`. Untargeted attacks push away from
//! the greedy action at `s̄`; setting `target` switches to a targeted attack.

mod cw;
mod deepfool;
mod ead;
mod gradient;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cw::carlini_wagner;
pub(crate) use cw::{cw_engine, CwPenalty, CwSelect};
pub use ead::elastic_net;
pub use deepfool::deepfool;
pub use ead::ead;
pub use gradient::{fgsm, ifgsm, mifgsm, nesterov};

use crate::error::{Error, Result};
use crate::linalg;
use crate::net::{ActionDist, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fgsm,
    Ifgsm,
    Mifgsm,
    Nesterov,
    Deepfool,
    Cw,
    Ead,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Fgsm,
        Method::Ifgsm,
        Method::Mifgsm,
        Method::Nesterov,
        Method::Deepfool,
        Method::Cw,
        Method::Ead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fgsm => "fgsm",
            Method::Ifgsm => "ifgsm",
            Method::Mifgsm => "mifgsm",
            Method::Nesterov => "nesterov",
            Method::Deepfool => "deepfool",
            Method::Cw => "cw",
            Method::Ead => "ead",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attack method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub method: Method,
    /// ℓ∞ budget of the FGSM family.
    pub epsilon: f64,
    pub alpha_step: f64,
    pub iters: usize,
    /// Momentum decay (MI-FGSM, Nesterov).
    pub mu: f64,
    /// DeepFool overshoot.
    pub overshoot: f64,
    /// C&W / EAD loss weight.
    pub c: f64,
    pub kappa: f64,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub clip_box: (f64, f64),
    /// Targeted mode: drive the greedy action to this index.
    pub target: Option<usize>,
    /// Action to move away from; defaults to the greedy action at `s̄`.
    pub original_action: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::for_method(Method::Fgsm)
    }
}

impl AttackConfig {
    /// Defaults tuned for the gridworld agent's `[0, 1]` observations.
    pub fn for_method(method: Method) -> Self {
        let base = Self {
            method,
            epsilon: 0.05,
            alpha_step: 0.01,
            iters: 10,
            mu: 1.0,
            overshoot: 0.02,
            c: 1.0,
            kappa: 0.0,
            lr: 0.01,
            lambda1: 1e-2,
            lambda2: 1.0,
            clip_box: (0.0, 1.0),
            target: None,
            original_action: None,
        };
        match method {
            Method::Fgsm | Method::Ifgsm | Method::Mifgsm | Method::Nesterov => base,
            Method::Deepfool => Self { iters: 50, ..base },
            Method::Cw => Self {
                iters: 200,
                c: 5.0,
                lr: 0.01,
                ..base
            },
            Method::Ead => Self {
                iters: 200,
                c: 5.0,
                lr: 0.01,
                ..base
            },
        }
    }

    /// Reads a JSON config; omitted fields take the method's defaults.
    pub fn load(path: &Path, method: Option<Method>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let method = match method {
            Some(m) => m,
            None => match value.get("method") {
                Some(m) => serde_json::from_value(m.clone()).map_err(|e| Error::json(path, e))?,
                None => Method::Fgsm,
            },
        };
        let mut merged = serde_json::to_value(Self::for_method(method)).expect("config serializes");
        if let (Some(dst), Some(src)) = (merged.as_object_mut(), value.as_object_mut()) {
            for (k, v) in std::mem::take(src) {
                dst.insert(k, v);
            }
            dst.insert("method".into(), serde_json::to_value(method).unwrap());
        }
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        let (lo, hi) = self.clip_box;
        if !(lo < hi) {
            return bad("clip_box must satisfy lo < hi");
        }
        if !(self.epsilon >= 0.0) || !(self.overshoot >= 0.0) || !(self.kappa >= 0.0) {
            return bad("epsilon, overshoot and kappa must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad("mu must lie in [0, 1]");
        }
        match self.method {
            Method::Ifgsm | Method::Mifgsm | Method::Nesterov => {
                if self.iters == 0 || !(self.alpha_step > 0.0) {
                    return bad("iterative attacks need iters >= 1 and alpha_step > 0");
                }
            }
            Method::Cw | Method::Ead => {
                if self.iters == 0 || !(self.lr > 0.0) || !(self.c > 0.0) {
                    return bad("C&W/EAD need iters >= 1, lr > 0 and c > 0");
                }
                if self.method == Method::Ead && (!(self.lambda1 >= 0.0) || !(self.lambda2 > 0.0)) {
                    return bad("EAD needs lambda1 >= 0 and lambda2 > 0");
                }
            }
            Method::Fgsm | Method::Deepfool => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub s_adv: Vec<f64>,
    pub linf: f64,
    pub l2: f64,
    pub l1: f64,
    /// The greedy action moved off the original one (or onto the target).
    pub success: bool,
    pub iters_used: usize,
    pub method: Method,
}

impl AttackResult {
    pub(crate) fn new(s_bar: &[f64], s_adv: Vec<f64>, success: bool, iters_used: usize, method: Method) -> Self {
        let delta = linalg::sub(&s_adv, s_bar);
        Self {
            linf: linalg::norm_inf(&delta),
            l2: linalg::norm2(&delta),
            l1: linalg::norm1(&delta),
            s_adv,
            success,
            iters_used,
            method,
        }
    }
}

/// Dispatches on `cfg.method`.
pub fn run<M: Model + ?Sized>(model: &M, s_bar: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if s_bar.len() != model.input_dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            got: s_bar.len(),
        });
    }
    match cfg.method {
        Method::Fgsm => fgsm(model, s_bar, cfg),
        Method::Ifgsm => ifgsm(model, s_bar, cfg),
        Method::Mifgsm => mifgsm(model, s_bar, cfg),
        Method::Nesterov => nesterov(model, s_bar, cfg),
        Method::Deepfool => deepfool(model, s_bar, cfg),
        Method::Cw => carlini_wagner(model, s_bar, cfg),
        Method::Ead => ead(model, s_bar, cfg),
    }
}

/// Action the attack moves away from.
pub fn original_action<M: Model + ?Sized>(model: &M, s_bar: &[f64], cfg: &AttackConfig) -> Result<usize> {
    match cfg.original_action {
        Some(a) if a < model.num_actions() => Ok(a),
        Some(a) => Err(Error::InvalidArgument(format!("original action {a} out of range"))),
        None => model.greedy_action(s_bar),
    }
}

fn check_target(num_actions: usize, cfg: &AttackConfig) -> Result<()> {
    match cfg.target {
        Some(t) if t >= num_actions => Err(Error::InvalidArgument(format!("target action {t} out of range"))),
        _ => Ok(()),
    }
}

/// Attack goal resolved against the model.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Goal {
    /// Leave `original`.
    Untargeted { original: usize },
    /// Reach `target`.
    Targeted { target: usize },
}

impl Goal {
    pub(crate) fn resolve<M: Model + ?Sized>(model: &M, s_bar: &[f64], cfg: &AttackConfig) -> Result<Self> {
        check_target(model.num_actions(), cfg)?;
        Ok(match cfg.target {
            Some(target) => Goal::Targeted { target },
            None => Goal::Untargeted {
                original: original_action(model, s_bar, cfg)?,
            },
        })
    }

    pub(crate) fn achieved(self, action: usize) -> bool {
        match self {
            Goal::Untargeted { original } => action != original,
            Goal::Targeted { target } => action == target,
        }
    }
}

/// Clips into the box and, when given, the ℓ∞ ball of radius `eps` around `center`.
pub fn project(x: &mut [f64], center: &[f64], eps: Option<f64>, clip_box: (f64, f64)) {
    for (xi, &ci) in x.iter_mut().zip(center) {
        if let Some(e) = eps {
            *xi = xi.clamp(ci - e, ci + e);
        }
        *xi = xi.clamp(clip_box.0, clip_box.1);
    }
}

/// Cost the FGSM family climbs (untargeted) or descends (targeted).
pub(crate) fn fgsm_direction<M: Model + ?Sized>(model: &M, x: &[f64], goal: Goal) -> Result<Vec<f64>> {
    let n = model.num_actions();
    Ok(match goal {
        Goal::Untargeted { original } => model.cost_grad(x, &ActionDist::one_hot(original, n))?,
        Goal::Targeted { target } => {
            linalg::scale(-1.0, &model.cost_grad(x, &ActionDist::one_hot(target, n))?)
        }
    })
}
