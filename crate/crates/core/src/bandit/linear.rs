//! Per-action Bayesian linear regression over frozen latents, with
//! Thompson sampling and cost-penalized action choice.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BanditError, ProfilingDataset};
use crate::bandit::mlp::Extractor;
use crate::types::{Action, ActionSet};

#[derive(Debug, Clone)]
pub struct ArmState {
    pub density: u32,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    /// Every (u, label) folded into the arm, used to rebuild A from scratch
    /// if its factorization ever fails. `None` once the history is unknown
    /// (arms loaded from a bundle).
    history: Option<Vec<(Vec<f64>, f64)>>,
    lambda0: f64,
}

impl PartialEq for ArmState {
    fn eq(&self, other: &Self) -> bool {
        self.density == other.density && self.a == other.a && self.b == other.b
    }
}

fn prior(d: usize, lambda0: f64) -> DMatrix<f64> {
    DMatrix::identity(d, d) * lambda0
}

impl ArmState {
    pub fn new(density: u32, d: usize, lambda0: f64) -> Self {
        let a = prior(d, lambda0);
        let chol = Cholesky::new(a.clone()).expect("λ0·I is positive definite for λ0 > 0");
        Self {
            density,
            a,
            b: DVector::zeros(d),
            chol,
            history: Some(Vec::new()),
            lambda0,
        }
    }

    /// Restores persisted statistics; the sample history is not available.
    pub fn from_parts(
        density: u32,
        a: DMatrix<f64>,
        b: DVector<f64>,
        lambda0: f64,
    ) -> Result<Self, BanditError> {
        let chol = Cholesky::new(a.clone()).ok_or(BanditError::SingularArm(density))?;
        Ok(Self {
            density,
            a,
            b,
            chol,
            history: None,
            lambda0,
        })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn samples(&self) -> Option<usize> {
        self.history.as_ref().map(Vec::len)
    }

    /// Lower-triangular L with L·Lᵀ = A.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// β = A⁻¹ b.
    pub fn posterior_mean(&self) -> DVector<f64> {
        self.chol.solve(&self.b)
    }

    /// β + α·L⁻ᵀ·ξ, a draw from Normal(β, α²·A⁻¹).
    pub fn sample(&self, alpha: f64, xi: &DVector<f64>) -> DVector<f64> {
        let beta = self.posterior_mean();
        if alpha == 0.0 {
            return beta;
        }
        let lt = self.chol.l().transpose();
        let noise = lt
            .solve_upper_triangular(xi)
            .expect("Cholesky factor has a positive diagonal");
        beta + noise * alpha
    }

    fn add(&mut self, u: &DVector<f64>, label: f64) -> Result<(), BanditError> {
        self.a += u * u.transpose();
        self.b += u * label;
        if let Some(h) = &mut self.history {
            h.push((u.iter().copied().collect(), label));
        }
        self.refactor()
    }

    fn refactor(&mut self) -> Result<(), BanditError> {
        if let Some(c) = Cholesky::new(self.a.clone()) {
            self.chol = c;
            return Ok(());
        }
        log::warn!(
            "arm {} lost positive definiteness; rebuilding",
            self.density
        );
        let d = self.dim();
        let mut a = prior(d, self.lambda0);
        let mut b = DVector::zeros(d);
        match &self.history {
            Some(h) => {
                for (u, y) in h {
                    let u = DVector::from_column_slice(u);
                    a += &u * u.transpose();
                    b += &u * *y;
                }
            }
            None => {
                a = (&self.a + self.a.transpose()) * 0.5 + prior(d, self.lambda0 * 1e-9);
                b.copy_from(&self.b);
            }
        }
        self.chol = Cholesky::new(a.clone()).ok_or(BanditError::SingularArm(self.density))?;
        self.a = a;
        self.b = b;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditState {
    pub arms: Vec<ArmState>,
    pub lambda0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmScore {
    pub density: u32,
    /// clip(uᵀβ̂, 0, 1) with the sampled β̂.
    pub p_hat: f64,
    /// p̂ − λ·n·a.
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub action: Action,
    pub index: usize,
    pub scores: Vec<ArmScore>,
}

impl BanditState {
    /// Prior-only arms: A = λ0·I, b = 0.
    pub fn new(actions: &ActionSet, latent_dim: usize, lambda0: f64) -> Result<Self, BanditError> {
        if !(lambda0 > 0.0 && lambda0.is_finite()) {
            return Err(BanditError::InvalidPrior(lambda0));
        }
        Ok(Self {
            arms: actions
                .iter()
                .map(|a| ArmState::new(a.density, latent_dim, lambda0))
                .collect(),
            lambda0,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arms.first().map_or(0, ArmState::dim)
    }

    pub fn actions(&self) -> ActionSet {
        ActionSet::new(self.arms.iter().map(|a| a.density).collect())
            .expect("arms were built from an action set")
    }

    pub fn arm_index(&self, action: Action) -> Result<usize, BanditError> {
        self.arms
            .iter()
            .position(|a| a.density == action.density)
            .ok_or(BanditError::UnknownAction {
                row: 0,
                density: action.density,
            })
    }

    /// A_a = λ0·I + Σ u uᵀ and b_a = Σ u·label over the rows for each action.
    pub fn warm_start(
        actions: &ActionSet,
        extractor: &Extractor,
        data: &ProfilingDataset,
        lambda0: f64,
    ) -> Result<Self, BanditError> {
        let latents = data
            .rows
            .iter()
            .map(|r| extractor.forward(&r.context))
            .collect::<Result<Vec<_>, _>>()?;
        let mut state = Self::new(actions, extractor.latent_dim(), lambda0)?;
        for (i, (row, u)) in data.rows.iter().zip(&latents).enumerate() {
            let k = state.arm_index(Action::new(row.density)).map_err(|_| {
                BanditError::UnknownAction {
                    row: i,
                    density: row.density,
                }
            })?;
            let arm = &mut state.arms[k];
            let u = DVector::from_column_slice(u);
            arm.a += &u * u.transpose();
            arm.b += &u * if row.label { 1.0 } else { 0.0 };
            if let Some(h) = &mut arm.history {
                h.push((u.iter().copied().collect(), row.label as u8 as f64));
            }
        }
        for arm in &mut state.arms {
            arm.refactor()?;
        }
        Ok(state)
    }

    /// Thompson-sampled choice maximizing p̂ − λ·n·a; ties go to the
    /// smaller density. One ξ vector is drawn per arm on every call.
    pub fn select_action<R: Rng + ?Sized>(
        &self,
        u: &[f64],
        n_frames: usize,
        lambda: f64,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Selection, BanditError> {
        let d = self.latent_dim();
        if u.len() != d {
            return Err(BanditError::DimMismatch {
                expected: d,
                got: u.len(),
            });
        }
        let u = DVector::from_column_slice(u);
        let mut best: Option<(usize, f64)> = None;
        let mut scores = Vec::with_capacity(self.arms.len());
        for (k, arm) in self.arms.iter().enumerate() {
            let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let beta = arm.sample(alpha, &xi);
            let p_hat = u.dot(&beta).clamp(0.0, 1.0);
            let utility = p_hat - lambda * n_frames as f64 * arm.density as f64;
            scores.push(ArmScore {
                density: arm.density,
                p_hat,
                utility,
            });
            let better = match best {
                None => true,
                Some((j, v)) => utility > v || (utility == v && arm.density < self.arms[j].density),
            };
            if better {
                best = Some((k, utility));
            }
        }
        let (index, _) = best.ok_or(BanditError::EmptyDataset)?;
        Ok(Selection {
            action: Action::new(self.arms[index].density),
            index,
            scores,
        })
    }

    /// Folds one observation into the chosen arm only.
    pub fn update(
        &mut self,
        action: Action,
        u: &[f64],
        reward_bit: bool,
    ) -> Result<(), BanditError> {
        let k = self.arm_index(action)?;
        let d = self.latent_dim();
        if u.len() != d {
            return Err(BanditError::DimMismatch {
                expected: d,
                got: u.len(),
            });
        }
        self.arms[k].add(&DVector::from_column_slice(u), reward_bit as u8 as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub value: f64,
    pub correct_term: f64,
    pub cost_term: f64,
    pub proxy: bool,
}

/// r = bit − λ·n·a.
pub fn compute_reward(
    bit: bool,
    n_frames: usize,
    action: Action,
    lambda: f64,
    proxy: bool,
) -> Reward {
    let correct_term = bit as u8 as f64;
    let cost_term = lambda * n_frames as f64 * action.density as f64;
    Reward {
        value: correct_term - cost_term,
        correct_term,
        cost_term,
        proxy,
    }
}

/// Proxy correctness when ground truth is absent: κ_L strictly above τ.
pub fn proxy_bit(kappa_large: f64, tau_proxy: f64) -> bool {
    kappa_large > tau_proxy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::normalized_lambda;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn actions() -> ActionSet {
        ActionSet::default()
    }

    #[test]
    fn prior_only_picks_cheapest() {
        let s = BanditState::new(&actions(), 4, 0.1).unwrap();
        let mut rng = StdRng::seed_from_u64(0);
        let sel = s
            .select_action(&[1.0, 0.5, 0.0, 2.0], 512, 1.0 / 16384.0, 0.0, &mut rng)
            .unwrap();
        assert_eq!(sel.action, Action::new(2));
        assert!(sel.scores.iter().all(|s| s.p_hat == 0.0));
    }

    #[test]
    fn confident_large_arm_wins() {
        let mut s = BanditState::new(&actions(), 2, 0.1).unwrap();
        // β_32 = e1 exactly: A = I, b = e1 for that arm.
        let k = s.arm_index(Action::new(32)).unwrap();
        s.arms[k] = ArmState::from_parts(
            32,
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
            0.1,
        )
        .unwrap();
        let mut rng = StdRng::seed_from_u64(0);
        let sel = s
            .select_action(&[1.0, 0.0], 512, 1.0 / 16384.0, 0.0, &mut rng)
            .unwrap();
        let u32_ = sel.scores[4].utility;
        let u2 = sel.scores[0].utility;
        assert_eq!(u32_, 0.0);
        assert_eq!(u2, -0.0625);
        assert_eq!(sel.action, Action::new(32));
    }

    #[test]
    fn one_row_ridge() {
        let mut s = BanditState::new(&actions(), 3, 0.1).unwrap();
        s.update(Action::new(8), &[1.0, 0.0, 0.0], true).unwrap();
        let arm = &s.arms[2];
        assert_eq!(arm.a[(0, 0)], 1.1);
        assert_eq!(arm.a[(1, 1)], 0.1);
        let beta = arm.posterior_mean();
        assert!((beta[0] - 1.0 / 1.1).abs() < 1e-15);
        assert_eq!((beta[1], beta[2]), (0.0, 0.0));
    }

    #[test]
    fn seeded_selection_is_reproducible() {
        let mut s = BanditState::new(&actions(), 3, 0.1).unwrap();
        s.update(Action::new(4), &[0.3, 0.2, 0.9], true).unwrap();
        let run = |seed| {
            let mut rng = StdRng::seed_from_u64(seed);
            (0..50)
                .map(|_| {
                    s.select_action(&[0.3, 0.2, 0.9], 128, 1e-4, 0.5, &mut rng)
                        .unwrap()
                        .action
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn zero_latent_leaves_statistics() {
        let mut s = BanditState::new(&actions(), 3, 0.1).unwrap();
        let before = s.clone();
        s.update(Action::new(16), &[0.0; 3], true).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn update_touches_one_arm() {
        let mut s = BanditState::new(&actions(), 2, 0.1).unwrap();
        let before = s.clone();
        s.update(Action::new(4), &[0.5, -1.0], false).unwrap();
        for (k, (a, b)) in s.arms.iter().zip(&before.arms).enumerate() {
            assert_eq!(a == b, k != 1, "arm {k}");
        }
    }

    #[test]
    fn reward_examples() {
        let lambda = normalized_lambda(512, &actions());
        assert_eq!(lambda, 1.0 / 16384.0);
        assert_eq!(
            compute_reward(true, 128, Action::new(8), lambda, false).value,
            0.9375
        );
        assert_eq!(
            compute_reward(false, 512, Action::new(32), lambda, false).value,
            -1.0
        );
        assert!(proxy_bit(0.61, 0.6));
        assert!(!proxy_bit(0.6, 0.6));
    }

    #[test]
    fn cholesky_matches_statistics() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut s = BanditState::new(&actions(), 4, 0.1).unwrap();
        for _ in 0..200 {
            let u: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = actions().get(rng.random_range(0..5)).unwrap();
            s.update(a, &u, rng.random_bool(0.5)).unwrap();
        }
        for arm in &s.arms {
            let l = arm.cholesky_factor();
            assert!((&l * l.transpose() - &arm.a).abs().max() < 1e-9);
        }
    }

    #[test]
    fn rebuild_from_history() {
        let mut s = BanditState::new(&actions(), 2, 0.1).unwrap();
        s.update(Action::new(2), &[1.0, 2.0], true).unwrap();
        let good = s.arms[0].clone();
        s.arms[0].a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        s.arms[0].refactor().unwrap();
        assert_eq!(s.arms[0], good);
    }
}
