//! Analytic cost fields that implement [`Model`] so the detector and attack
//! code can be checked against closed forms.
//!
//! These expose a single action; `cost` ignores `τ`.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat64};
use crate::net::{ActionDist, Model};

/// `J(s) = sᵀ A s`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    pub a: Mat64,
}

/// `J(s) = c + gᵀ s`.
#[derive(Debug, Clone)]
pub struct LinearCost {
    pub g: Vec<f64>,
    pub c: f64,
}

fn check_dim(expected: usize, s: &[f64]) -> Result<()> {
    if s.len() != expected {
        return Err(Error::DimMismatch {
            expected,
            got: s.len(),
        });
    }
    Ok(())
}

impl Model for QuadraticCost {
    fn input_dim(&self) -> usize {
        self.a.cols()
    }

    fn num_actions(&self) -> usize {
        1
    }

    fn logits(&self, s: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), s)?;
        Ok(vec![0.0])
    }

    fn logits_vjp(&self, s: &[f64], _v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), s)?;
        Ok(vec![0.0; s.len()])
    }

    fn cost(&self, s: &[f64], _tau: &ActionDist) -> Result<f64> {
        check_dim(self.input_dim(), s)?;
        Ok(self.a.quad_form(s))
    }

    fn cost_grad(&self, s: &[f64], _tau: &ActionDist) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), s)?;
        Ok(linalg::add(&self.a.matvec(s), &self.a.matvec_t(s)))
    }

    fn greedy_cost(&self, s: &[f64]) -> Result<(ActionDist, f64)> {
        let tau = ActionDist::one_hot(0, 1);
        let j = self.cost(s, &tau)?;
        Ok((tau, j))
    }
}

impl Model for LinearCost {
    fn input_dim(&self) -> usize {
        self.g.len()
    }

    fn num_actions(&self) -> usize {
        1
    }

    fn logits(&self, s: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), s)?;
        Ok(vec![0.0])
    }

    fn logits_vjp(&self, s: &[f64], _v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), s)?;
        Ok(vec![0.0; s.len()])
    }

    fn cost(&self, s: &[f64], _tau: &ActionDist) -> Result<f64> {
        check_dim(self.input_dim(), s)?;
        Ok(self.c + linalg::dot(&self.g, s))
    }

    fn cost_grad(&self, s: &[f64], _tau: &ActionDist) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), s)?;
        Ok(self.g.clone())
    }

    fn greedy_cost(&self, s: &[f64]) -> Result<(ActionDist, f64)> {
        let tau = ActionDist::one_hot(0, 1);
        let j = self.cost(s, &tau)?;
        Ok((tau, j))
    }
}
