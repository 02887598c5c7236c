//! Implicit type vectors and the type-compatibility score.
//!
//! A candidate tail `t` is projected into type space as `τ = P · e_t` and
//! the context vector as `τ_B = P_B · t_B`. The Euclidean score is
//! `ψ_TYPE = −‖τ_B − τ‖²` and the combined score is
//! `ψ_OKGIT = ψ_PRED + γ · ψ_TYPE`.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{Binder, TypeScoreVariant};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// `projector · v`.
pub fn project_type(v: &[f64], projector: &Array2<f64>) -> Result<Vec<f64>> {
    if projector.ncols() != v.len() {
        return Err(Error::Dimension {
            context: "type projection",
            expected: projector.ncols(),
            actual: v.len(),
        });
    }
    Ok(projector
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect())
}

/// Type compatibility of two type vectors.
pub fn type_score(tau: &[f64], tau_b: &[f64], variant: TypeScoreVariant) -> Result<f64> {
    if tau.len() != tau_b.len() {
        return Err(Error::Dimension {
            context: "type score",
            expected: tau_b.len(),
            actual: tau.len(),
        });
    }
    let pairs = tau.iter().zip(tau_b);
    Ok(match variant {
        TypeScoreVariant::Euclid => -pairs.map(|(a, b)| (b - a) * (b - a)).sum::<f64>(),
        TypeScoreVariant::Dot => pairs.map(|(a, b)| a * b).sum(),
    })
}

/// The three scores of one candidate triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBundle {
    pub psi_pred: f64,
    pub psi_type: f64,
    pub psi_okgit: f64,
}

impl ScoreBundle {
    pub fn combine(psi_pred: f64, psi_type: f64, gamma: f64) -> Self {
        ScoreBundle {
            psi_pred,
            psi_type,
            psi_okgit: psi_pred + gamma * psi_type,
        }
    }
}

/// The two trainable projectors `P` (`d_τ × d_e`) and `P_B` (`d_τ × d_B`).
#[derive(Debug, Clone)]
pub struct TypeHead {
    pub p: ParamId,
    pub p_b: ParamId,
    pub variant: TypeScoreVariant,
}

fn xavier_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    crate::encoder::uniform_init(rng, (rows, cols), bound)
}

impl TypeHead {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_e: usize,
        d_b: usize,
        d_tau: usize,
        variant: TypeScoreVariant,
    ) -> Self {
        let p = store.add("type.np_projector", &[d_tau, d_e], xavier_uniform(rng, d_tau, d_e), true);
        let p_b = store.add("type.context_projector", &[d_tau, d_b], xavier_uniform(rng, d_tau, d_b), true);
        TypeHead { p, p_b, variant }
    }

    /// `ψ_TYPE` for every (query, candidate) pair: `B × N` from context
    /// vectors (`B × d_B`) and NP encodings (`N × d_e`).
    pub fn scores(&self, tape: &mut Tape, b: &mut Binder, store: &ParamStore, context: Var, nps: Var) -> Var {
        let (p, p_b) = (b.var(tape, store, self.p), b.var(tape, store, self.p_b));
        let tau = tape.matmul_t(nps, p);
        let tau_b = tape.matmul_t(context, p_b);
        match self.variant {
            TypeScoreVariant::Euclid => tape.neg_sq_dist(tau_b, tau),
            TypeScoreVariant::Dot => tape.matmul_t(tau_b, tau),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_identities() {
        let v = [1.5, -2.0, 0.25];
        assert_eq!(project_type(&v, &Array2::eye(3)).unwrap(), v.to_vec());
        assert_eq!(project_type(&v, &Array2::zeros((2, 3))).unwrap(), vec![0.0, 0.0]);
        assert!(project_type(&v, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn score_examples() {
        assert_eq!(type_score(&[1.0, 2.0], &[1.0, 2.0], TypeScoreVariant::Euclid).unwrap(), 0.0);
        assert_eq!(type_score(&[0.0, 0.0], &[3.0, 4.0], TypeScoreVariant::Euclid).unwrap(), -25.0);
        assert_eq!(type_score(&[1.0, 0.0], &[0.0, 7.0], TypeScoreVariant::Dot).unwrap(), 0.0);
        assert!(type_score(&[1.0], &[1.0, 2.0], TypeScoreVariant::Dot).is_err());
    }

    #[test]
    fn combine_arithmetic() {
        let s = ScoreBundle::combine(2.0, -0.5, 5.0);
        assert_eq!(s.psi_okgit, -0.5);
        assert_eq!(ScoreBundle::combine(1.25, -3.0, 0.0).psi_okgit, 1.25);
    }
}
