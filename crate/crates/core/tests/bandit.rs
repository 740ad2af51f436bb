use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tokenbridge_core::bandit::*;
use tokenbridge_core::config::{normalized_lambda, SystemConfig};
use tokenbridge_core::{Action, ActionSet};

fn identity_extractor(d: usize) -> Extractor {
    let mut weights = vec![0.0; d * d];
    for i in 0..d {
        weights[i * d + i] = 1.0;
    }
    Extractor {
        layers: vec![FrozenLayer {
            rows: d,
            cols: d,
            weights,
            biases: vec![0.0; d],
        }],
    }
}

fn random_rows(n: usize, d: usize, actions: &ActionSet, rng: &mut StdRng) -> Vec<ProfilingRow> {
    (0..n)
        .map(|_| ProfilingRow {
            context: (0..d).map(|_| rng.random_range(0.0..1.0)).collect(),
            density: actions.densities()[rng.random_range(0..actions.len())],
            label: rng.random_bool(0.5),
        })
        .collect()
}

#[test]
fn warm_start_matches_dense_ridge_solve() {
    let mut rng = StdRng::seed_from_u64(21);
    let d = 6;
    let actions = ActionSet::default();
    let data = ProfilingDataset {
        rows: random_rows(100, d, &actions, &mut rng),
    };
    let state = BanditState::warm_start(&actions, &identity_extractor(d), &data, 0.1).unwrap();
    for (k, a) in actions.iter().enumerate() {
        let rows: Vec<&ProfilingRow> = data
            .rows
            .iter()
            .filter(|r| r.density == a.density)
            .collect();
        let u = DMatrix::from_fn(rows.len(), d, |r, c| rows[r].context[c]);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.label as u8 as f64));
        let lhs = DMatrix::identity(d, d) * 0.1 + u.transpose() * &u;
        let rhs = u.transpose() * y;
        let want = lhs.lu().solve(&rhs).unwrap();
        let got = state.arms[k].posterior_mean();
        assert!((got - want).abs().max() < 1e-8, "arm {a}");
    }
}

#[test]
fn empty_warm_start_is_the_prior() {
    let actions = ActionSet::default();
    let state = BanditState::warm_start(
        &actions,
        &identity_extractor(3),
        &ProfilingDataset::default(),
        0.1,
    )
    .unwrap();
    for arm in &state.arms {
        assert_eq!(arm.a, DMatrix::identity(3, 3) * 0.1);
        assert_eq!(arm.posterior_mean(), DVector::zeros(3));
    }
}

#[test]
fn incremental_updates_equal_batch_construction() {
    let mut rng = StdRng::seed_from_u64(8);
    let d = 5;
    let actions = ActionSet::default();
    let rows = random_rows(400, d, &actions, &mut rng);
    let ex = identity_extractor(d);
    let batch =
        BanditState::warm_start(&actions, &ex, &ProfilingDataset { rows: rows.clone() }, 0.1)
            .unwrap();

    let mut shuffled = rows.clone();
    use rand::seq::SliceRandom;
    shuffled.shuffle(&mut rng);
    let (head, tail) = shuffled.split_at(150);
    let mut inc = BanditState::warm_start(
        &actions,
        &ex,
        &ProfilingDataset {
            rows: head.to_vec(),
        },
        0.1,
    )
    .unwrap();
    for r in tail {
        inc.update(Action::new(r.density), &r.context, r.label)
            .unwrap();
    }
    for (a, b) in inc.arms.iter().zip(&batch.arms) {
        assert!((&a.a - &b.a).abs().max() < 1e-9);
        assert!((&a.b - &b.b).abs().max() < 1e-9);
    }
}

#[test]
fn many_updates_keep_arms_positive_definite() {
    let mut rng = StdRng::seed_from_u64(17);
    let d = 8;
    let lambda0 = 0.1;
    let mut s = BanditState::new(&ActionSet::default(), d, lambda0).unwrap();
    for _ in 0..1000 {
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = ActionSet::default().get(rng.random_range(0..5)).unwrap();
        s.update(a, &u, rng.random_bool(0.3)).unwrap();
    }
    for arm in &s.arms {
        assert_eq!(arm.a, arm.a.transpose());
        let min = arm.a.clone().symmetric_eigenvalues().min();
        assert!(min >= lambda0 - 1e-9, "min eigenvalue {min}");
    }
}

#[test]
fn separable_labels_are_learned() {
    let mut rng = StdRng::seed_from_u64(1);
    let dim = 15;
    let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let actions = ActionSet::default();
    let rows = (0..5000)
        .map(|_| {
            let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s: f64 = c.iter().zip(&w).map(|(a, b)| a * b).sum();
            ProfilingRow {
                context: c,
                density: actions.densities()[rng.random_range(0..5)],
                label: s > 0.0,
            }
        })
        .collect();
    let cfg = ExtractorConfig::default();
    let (ex, report) = train_extractor(&ProfilingDataset { rows }, &actions, &cfg).unwrap();
    assert!(report.train_accuracy >= 0.95, "{report:?}");
    assert_eq!(ex.latent_dim(), 64);
    assert_eq!(ex.input_dim(), dim);
}

/// Linear-reward environment: q(a) = clip(uᵀw_a, 0, 1).
struct LinearEnv {
    w: Vec<Vec<f64>>,
    actions: ActionSet,
    lambda: f64,
}

impl LinearEnv {
    fn new(d: usize, rng: &mut StdRng) -> Self {
        let actions = ActionSet::default();
        let w = (0..actions.len())
            .map(|k| {
                let mut v = vec![0.2 + 0.15 * k as f64];
                v.extend((1..d).map(|_| rng.random_range(-0.3..0.3)));
                v
            })
            .collect();
        Self {
            lambda: normalized_lambda(512, &actions),
            w,
            actions,
        }
    }

    fn context(&self, d: usize, rng: &mut StdRng) -> (Vec<f64>, usize) {
        let mut u = vec![1.0];
        u.extend((1..d).map(|_| rng.random_range(0.0..1.0)));
        (u, rng.random_range(32..=512))
    }

    fn q(&self, k: usize, u: &[f64]) -> f64 {
        u.iter()
            .zip(&self.w[k])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    fn utility(&self, k: usize, u: &[f64], n: usize) -> f64 {
        self.q(k, u) - self.lambda * n as f64 * self.actions.densities()[k] as f64
    }

    fn best(&self, u: &[f64], n: usize) -> usize {
        (0..self.actions.len()).fold(0, |b, k| {
            if self.utility(k, u, n) > self.utility(b, u, n) {
                k
            } else {
                b
            }
        })
    }
}

const WARM_QUERIES: usize = 1000;

#[test]
fn thompson_sampling_converges_on_linear_rewards() {
    let d = 8;
    let cfg = SystemConfig::default();
    let mut rng = StdRng::seed_from_u64(2024);
    let env = LinearEnv::new(d, &mut rng);
    // Warm start from a profiling pass that tries every action on each query.
    let mut rows = Vec::new();
    for _ in 0..WARM_QUERIES {
        let (u, _) = env.context(d, &mut rng);
        for (k, a) in env.actions.iter().enumerate() {
            rows.push(ProfilingRow {
                context: u.clone(),
                density: a.density,
                label: rng.random_bool(env.q(k, &u)),
            });
        }
    }
    let mut state = BanditState::warm_start(
        &env.actions,
        &identity_extractor(d),
        &ProfilingDataset { rows },
        cfg.lambda0,
    )
    .unwrap();
    let (mut policy_utility, mut oracle_utility, mut late_hits) = (0.0, 0.0, 0);
    for t in 0..5000 {
        let (u, n) = env.context(d, &mut rng);
        let sel = state
            .select_action(&u, n, env.lambda, cfg.alpha_ts, &mut rng)
            .unwrap();
        let best = env.best(&u, n);
        policy_utility += env.utility(sel.index, &u, n);
        oracle_utility += env.utility(best, &u, n);
        if t >= 4000 && sel.index == best {
            late_hits += 1;
        }
        let bit = rng.random_bool(env.q(sel.index, &u));
        state.update(sel.action, &u, bit).unwrap();
    }
    let ratio = policy_utility / oracle_utility;
    assert!(
        late_hits >= 900,
        "optimal arm in {late_hits}/1000 late rounds"
    );
    assert!(ratio >= 0.95, "utility ratio {ratio}");
}
