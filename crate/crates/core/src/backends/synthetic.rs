//! Seeded synthetic environment with controllable accuracy, calibration and
//! small/large agreement.
//!
//! Every query carries hidden latents: a difficulty δ that lowers both
//! models' accuracy, and a visual complexity c that fixes the token density
//! the large model needs. Asking the large model with fewer levels than
//! needed costs `under_penalty` per level; with more, `over_penalty` per
//! level (inverted-U only). Complexity also shapes the token spectrum and
//! the pooled vision embedding so the context features can see it.
//!
//! Confidences are calibrated by construction: for a per-query success
//! probability p, the reported max probability κ is drawn from the
//! conditional law given the correctness bit, so that P(correct | κ) = κ.
//! Logits are then scaled by γ.

use rand::rngs::{SmallRng, StdRng};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendRequest, BackendResponse, ComputeModel, ModelBackend, Role};
use crate::types::{
    option_letters, ActionSet, FrameRate, LogitVector, Query, TokenTensor, VideoMetadata, VideoRef,
    DEFAULT_CLIP_SIZE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityResponse {
    /// More tokens never hurt.
    Monotone,
    /// Too many tokens dilute attention; accuracy falls past the needed level.
    InvertedU,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VideoModel {
    pub min_s: f64,
    pub max_s: f64,
    pub fps: u64,
    pub gop_min: u64,
    pub gop_max: u64,
    /// Pull of visual complexity toward short videos, in [0, 1]; 0 draws
    /// duration independently.
    pub complexity_coupling: f64,
}

impl Default for VideoModel {
    fn default() -> Self {
        Self {
            min_s: 20.0,
            max_s: 300.0,
            fps: 30,
            gop_min: 30,
            gop_max: 300,
            complexity_coupling: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticProfile {
    pub seed: u64,
    pub options: usize,
    /// Small-model success probability at δ = 0 and δ = 1.
    pub small_accuracy: [f64; 2],
    /// Large-model success probability at its needed density, δ = 0 and 1.
    pub large_accuracy: [f64; 2],
    pub response: DensityResponse,
    /// Distribution of the needed density over the action levels.
    pub need_weights: Vec<f64>,
    pub under_penalty: f64,
    pub over_penalty: f64,
    /// Logit scale; 1 is calibrated, above 1 overconfident.
    pub gamma: f64,
    /// Target P[small answer = large answer] at `agreement_density`;
    /// `None` draws the two models independently.
    pub agreement: Option<f64>,
    pub agreement_density: u32,
    /// Beta concentration of the confidence draw.
    pub concentration: f64,
    pub actions: ActionSet,
    pub raw_tokens_per_frame: usize,
    pub token_dim: usize,
    pub text_tokens: usize,
    /// Round generated embeddings to this many decimals.
    pub token_decimals: Option<i32>,
    pub video: VideoModel,
    pub compute: ComputeModel,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            seed: 0,
            options: 4,
            small_accuracy: [0.92, 0.30],
            large_accuracy: [0.97, 0.62],
            response: DensityResponse::InvertedU,
            need_weights: vec![0.55, 0.10, 0.08, 0.19, 0.08],
            under_penalty: 0.30,
            over_penalty: 0.06,
            gamma: 1.0,
            agreement: Some(0.70),
            agreement_density: 16,
            concentration: 4.0,
            actions: ActionSet::default(),
            raw_tokens_per_frame: 32,
            token_dim: 16,
            text_tokens: 8,
            token_decimals: None,
            video: VideoModel::default(),
            compute: ComputeModel::default(),
        }
    }
}

/// Hidden per-query state, derived from (seed, query id) alone.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryLatents {
    pub difficulty: f64,
    pub complexity: f64,
    /// Action level (index into the action set) the large model needs.
    pub need_level: usize,
    pub truth: usize,
    pub u_small: f64,
    pub u_large: f64,
    pub coupled: bool,
    /// Rank of the wrong answer among the non-truth options.
    pub wrong_small: usize,
    pub wrong_large: usize,
    pub video: VideoMetadata,
    pub token_seed: u64,
}

/// Mixing weight between comonotone and independent correctness draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementCoupling {
    pub rho: f64,
    /// Expected agreement with independent draws.
    pub independent: f64,
    /// Expected agreement with fully shared draws.
    pub comonotone: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    pub profile: SyntheticProfile,
    pub coupling: AgreementCoupling,
    txt_axis: Vec<f64>,
    vis_axis: Vec<f64>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn seed_of(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| mix(acc ^ mix(p)))
}

fn unit_vector(dim: usize, rng: &mut StdRng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn lerp(ends: [f64; 2], t: f64) -> f64 {
    ends[0] + (ends[1] - ends[0]) * t
}

impl SyntheticProfile {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::Profile(m));
        if !(2..=6).contains(&self.options) {
            return bad(format!("options must be in 2..=6, got {}", self.options));
        }
        for (name, v) in [
            ("small_accuracy", self.small_accuracy),
            ("large_accuracy", self.large_accuracy),
        ] {
            if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("{name} must lie in [0,1]"));
            }
        }
        if self.need_weights.len() != self.actions.len() {
            return bad(format!(
                "need_weights has {} entries for {} actions",
                self.need_weights.len(),
                self.actions.len()
            ));
        }
        if self
            .need_weights
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
            || self.need_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("need_weights must be non-negative with a positive sum".into());
        }
        for (name, v) in [
            ("under_penalty", self.under_penalty),
            ("over_penalty", self.over_penalty),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("concentration", self.concentration)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if let Some(a) = self.agreement {
            if !(0.0..=1.0).contains(&a) {
                return bad("agreement must lie in [0,1]".into());
            }
        }
        if self.agreement_density == 0 {
            return bad("agreement_density must be positive".into());
        }
        if self.raw_tokens_per_frame < self.actions.max().unwrap_or(1) as usize {
            return bad(format!(
                "raw_tokens_per_frame {} is below the largest density",
                self.raw_tokens_per_frame
            ));
        }
        if self.token_dim == 0 || self.text_tokens == 0 {
            return bad("token_dim and text_tokens must be positive".into());
        }
        let v = &self.video;
        if !(v.min_s > 0.0
            && v.max_s >= v.min_s
            && v.fps > 0
            && v.gop_min > 0
            && v.gop_max >= v.gop_min
            && (0.0..=1.0).contains(&v.complexity_coupling))
        {
            return bad("video model ranges are inconsistent".into());
        }
        Ok(())
    }

    /// Level of a density on the action ladder: log₂(a / smallest action).
    pub fn level(&self, density: u32) -> f64 {
        let base = self
            .actions
            .densities()
            .first()
            .copied()
            .unwrap_or(1)
            .max(1);
        (density.max(1) as f64 / base as f64).log2()
    }

    fn floor_p(&self, p: f64, k: usize) -> f64 {
        p.clamp(1.0 / k as f64 + 0.01, 1.0)
    }

    pub fn small_success(&self, difficulty: f64, k: usize) -> f64 {
        self.floor_p(lerp(self.small_accuracy, difficulty), k)
    }

    pub fn large_success(&self, difficulty: f64, need_level: usize, density: u32, k: usize) -> f64 {
        let gap = self.level(density) - need_level as f64;
        let mut p = lerp(self.large_accuracy, difficulty);
        if gap < 0.0 {
            p -= self.under_penalty * -gap;
        } else if self.response == DensityResponse::InvertedU {
            p -= self.over_penalty * gap;
        }
        self.floor_p(p, k)
    }

    /// Need level at quantile `c` of `need_weights`.
    pub fn need_level_at(&self, c: f64) -> usize {
        let total: f64 = self.need_weights.iter().sum();
        let mut acc = 0.0;
        for (i, w) in self.need_weights.iter().enumerate() {
            acc += w / total;
            if c < acc {
                return i;
            }
        }
        self.need_weights.len() - 1
    }

    /// Midpoint quadrature of `f(δ, need level)` over the latent distribution.
    pub fn expect(&self, f: impl Fn(f64, usize) -> f64) -> f64 {
        const GRID: usize = 400;
        let total: f64 = self.need_weights.iter().sum();
        let mut s = 0.0;
        for i in 0..GRID {
            let delta = (i as f64 + 0.5) / GRID as f64;
            for (r, w) in self.need_weights.iter().enumerate() {
                s += w / total * f(delta, r);
            }
        }
        s / GRID as f64
    }

    pub fn coupling(&self) -> Result<AgreementCoupling, BackendError> {
        let k = self.options;
        let a = self.agreement_density;
        let both = |d: f64, r: usize| (self.small_success(d, k), self.large_success(d, r, a, k));
        let independent = self.expect(|d, r| {
            let (f, g) = both(d, r);
            f * g + (1.0 - f) * (1.0 - g) / (k - 1) as f64
        });
        let comonotone = self.expect(|d, r| {
            let (f, g) = both(d, r);
            f.min(g) + 1.0 - f.max(g)
        });
        let rho = match self.agreement {
            None => 0.0,
            Some(t) => {
                let span = comonotone - independent;
                let rho = if span.abs() < 1e-12 {
                    0.0
                } else {
                    (t - independent) / span
                };
                if !(-1e-9..=1.0 + 1e-9).contains(&rho) {
                    return Err(BackendError::Profile(format!(
                        "agreement {t} is outside the reachable range [{independent:.3}, {comonotone:.3}]"
                    )));
                }
                rho.clamp(0.0, 1.0)
            }
        };
        Ok(AgreementCoupling {
            rho,
            independent,
            comonotone,
        })
    }
}

/// Draws the reported max probability given the success probability and
/// the correctness bit. κ = 1/k + (1 − 1/k)·X with X ~ Beta(s·m, s·(1−m));
/// conditioning on the bit reweights by κ or 1 − κ.
fn draw_confidence(p: f64, correct: bool, k: usize, s: f64, rng: &mut StdRng) -> f64 {
    let inv_k = 1.0 / k as f64;
    if p >= 1.0 {
        return 1.0 - 1e-6;
    }
    let m = ((p - inv_k) / (1.0 - inv_k)).clamp(1e-6, 1.0 - 1e-6);
    let (a, b) = (s * m, s * (1.0 - m));
    let beta = |a: f64, b: f64, rng: &mut StdRng| {
        Beta::new(a, b)
            .expect("positive beta parameters")
            .sample(rng)
    };
    let x = if correct {
        let w_plain = inv_k / (inv_k + (1.0 - inv_k) * m);
        if rng.random_bool(w_plain) {
            beta(a, b, rng)
        } else {
            beta(a + 1.0, b, rng)
        }
    } else {
        beta(a, b + 1.0, rng)
    };
    (inv_k + (1.0 - inv_k) * x).clamp(inv_k + 1e-6, 1.0 - 1e-6)
}

/// Probability vector with `kappa` on `answer` and the rest spread so that
/// `answer` stays the unique maximum.
fn spread_probs(kappa: f64, answer: usize, k: usize, rng: &mut StdRng) -> Vec<f64> {
    let rest = 1.0 - kappa;
    let uniform = rest / (k - 1) as f64;
    let raw: Vec<f64> = (0..k - 1).map(|_| rng.random_range(0.5..1.5)).collect();
    let sum: f64 = raw.iter().sum();
    let mut others: Vec<f64> = raw.iter().map(|r| rest * r / sum).collect();
    let cap = kappa - 1e-9;
    let max = others.iter().cloned().fold(0.0, f64::max);
    if max > cap {
        let t = if max - uniform > 1e-15 {
            ((cap - uniform) / (max - uniform)).max(0.0)
        } else {
            0.0
        };
        for o in &mut others {
            *o = uniform + t * (*o - uniform);
        }
    }
    let mut probs = Vec::with_capacity(k);
    let mut it = others.into_iter();
    for i in 0..k {
        probs.push(if i == answer {
            kappa
        } else {
            it.next().unwrap()
        });
    }
    probs
}

/// Option index of the `rank`-th wrong answer.
fn wrong_option(truth: usize, rank: usize) -> usize {
    if rank < truth {
        rank
    } else {
        rank + 1
    }
}

impl SyntheticBackend {
    pub fn new(profile: SyntheticProfile) -> Result<Self, BackendError> {
        profile.validate()?;
        let coupling = profile.coupling()?;
        let mut rng = StdRng::seed_from_u64(seed_of(&[profile.seed, 0xA715]));
        let txt_axis = unit_vector(profile.token_dim, &mut rng);
        let vis_axis = unit_vector(profile.token_dim, &mut rng);
        Ok(Self {
            profile,
            coupling,
            txt_axis,
            vis_axis,
        })
    }

    /// `n` queries with consecutive ids starting at `first_id`.
    pub fn queries(&self, first_id: u64, n: usize) -> Vec<Query> {
        let letters = option_letters(self.profile.options);
        (0..n as u64)
            .map(|i| {
                let id = first_id + i;
                Query {
                    id,
                    video: VideoRef::Synthetic(id),
                    question: format!("synthetic question {id}"),
                    options: letters.clone(),
                }
            })
            .collect()
    }

    pub fn latents(&self, qid: u64) -> QueryLatents {
        let p = &self.profile;
        let mut rng = StdRng::seed_from_u64(seed_of(&[p.seed, qid, 1]));
        let k = p.options;
        let difficulty = rng.random::<f64>();
        let complexity = rng.random::<f64>();
        let truth = rng.random_range(0..k);
        let u_small = rng.random::<f64>();
        let u_indep = rng.random::<f64>();
        let coupled = rng.random_bool(self.coupling.rho);
        let wrong_small = rng.random_range(0..k - 1);
        let wrong_indep = rng.random_range(0..k - 1);
        let w = p.video.complexity_coupling;
        let t = (1.0 - w) * rng.random::<f64>() + w * (1.0 - complexity);
        let duration = p.video.min_s + (p.video.max_s - p.video.min_s) * t;
        let gop = rng.random_range(p.video.gop_min..=p.video.gop_max);
        let token_seed = rng.random::<u64>();

        let frame_count = ((duration * p.video.fps as f64).round() as u64).max(1);
        let keys: Vec<u64> = (0..frame_count).step_by(gop as usize).collect();
        QueryLatents {
            difficulty,
            complexity,
            need_level: p.need_level_at(complexity),
            truth,
            u_small,
            u_large: if coupled { u_small } else { u_indep },
            coupled,
            wrong_small,
            wrong_large: if coupled { wrong_small } else { wrong_indep },
            video: VideoMetadata::new(frame_count, FrameRate::integer(p.video.fps), keys),
            token_seed,
        }
    }

    fn round(&self, v: f64) -> f32 {
        match self.profile.token_decimals {
            Some(d) => {
                let s = 10f64.powi(d);
                ((v * s).round() / s) as f32
            }
            None => v as f32,
        }
    }

    fn question_embeddings(&self, lat: &QueryLatents) -> Vec<Vec<f32>> {
        let p = &self.profile;
        let mut rng = StdRng::seed_from_u64(seed_of(&[p.seed, lat.token_seed, 2]));
        let own = unit_vector(p.token_dim, &mut rng);
        (0..p.text_tokens)
            .map(|_| {
                (0..p.token_dim)
                    .map(|j| {
                        let noise: f64 = rng.sample(StandardNormal);
                        self.round(
                            2.0 * lat.difficulty * self.txt_axis[j] + 0.7 * own[j] + 0.3 * noise,
                        )
                    })
                    .collect()
            })
            .collect()
    }

    pub fn is_correct(&self, qid: u64, role: Role, density: Option<u32>, k: usize) -> bool {
        let lat = self.latents(qid);
        self.success(&lat, role, density, k).1
    }

    fn success(
        &self,
        lat: &QueryLatents,
        role: Role,
        density: Option<u32>,
        k: usize,
    ) -> (f64, bool) {
        let p = match role {
            Role::Small => self.profile.small_success(lat.difficulty, k),
            Role::Large => {
                let a = density.unwrap_or(self.profile.raw_tokens_per_frame as u32);
                self.profile
                    .large_success(lat.difficulty, lat.need_level, a, k)
            }
        };
        let u = match role {
            Role::Small => lat.u_small,
            Role::Large => lat.u_large,
        };
        (p, u < p)
    }
}

impl ModelBackend for SyntheticBackend {
    fn video_metadata(&self, query: &Query) -> Result<VideoMetadata, BackendError> {
        match query.video {
            VideoRef::Synthetic(_) => Ok(self.latents(query.id).video),
            _ => Err(BackendError::UnsupportedVideo(query.id)),
        }
    }

    fn encode_frames(&self, query: &Query, frames: &[u64]) -> Result<TokenTensor, BackendError> {
        let p = &self.profile;
        let lat = self.latents(query.id);
        let (d, r) = (p.token_dim, p.raw_tokens_per_frame);
        // Flat spectrum for complex content, steep decay for simple content.
        // Singular values do not care about the noise axes, so they are the
        // coordinate axes in a per-video order.
        let power = 2.5 * (1.0 - lat.complexity);
        let mut sigma: Vec<f64> = (0..d).map(|j| ((j + 1) as f64).powf(-power)).collect();
        sigma.shuffle(&mut StdRng::seed_from_u64(seed_of(&[
            p.seed,
            lat.token_seed,
            3,
        ])));
        let mean: Vec<f64> = self
            .vis_axis
            .iter()
            .map(|v| (0.5 + 1.5 * lat.complexity) * v)
            .collect();

        let mut data = Vec::with_capacity(frames.len() * r * d);
        for &f in frames {
            if f >= lat.video.frame_count {
                return Err(BackendError::FrameOutOfRange {
                    frame: f,
                    frames: lat.video.frame_count as usize,
                });
            }
            let mut frng = SmallRng::seed_from_u64(seed_of(&[lat.token_seed, f, 4]));
            for _ in 0..r {
                for (m, s) in mean.iter().zip(&sigma) {
                    let z: f64 = frng.sample(StandardNormal);
                    data.push(self.round(m + s * z));
                }
            }
        }
        Ok(TokenTensor::new(
            frames.len(),
            r,
            d,
            DEFAULT_CLIP_SIZE,
            data,
        )?)
    }

    fn answer(&self, req: &BackendRequest<'_>) -> Result<BackendResponse, BackendError> {
        let k = req.options.len();
        let lat = self.latents(req.query_id);
        let truth = lat.truth.min(k - 1);
        let density = req.density.map(|a| a.density);
        let (p, correct) = self.success(&lat, req.role, density, k);
        let wrong = match req.role {
            Role::Small => lat.wrong_small,
            Role::Large => lat.wrong_large,
        };
        let answer = if correct {
            truth
        } else {
            wrong_option(truth, wrong % (k - 1))
        };

        let tag = match req.role {
            Role::Small => 0,
            Role::Large => 1 + density.unwrap_or(0) as u64,
        };
        let mut rng = StdRng::seed_from_u64(seed_of(&[self.profile.seed, req.query_id, 5, tag]));
        let kappa = draw_confidence(p, correct, k, self.profile.concentration, &mut rng);
        let probs = spread_probs(kappa, answer, k, &mut rng);
        let logits = LogitVector::new(probs.iter().map(|q| self.profile.gamma * q.ln()).collect());

        let c = &self.profile.compute;
        let (question_embeddings, compute_ms) = match req.role {
            Role::Small => (
                self.question_embeddings(&lat),
                c.small_lm_ms(req.tokens.num_tokens()),
            ),
            Role::Large => (Vec::new(), c.large_lm_ms(req.tokens.num_tokens())),
        };
        Ok(BackendResponse {
            logits,
            question_embeddings,
            compute_ms,
            correct: Some(correct),
        })
    }

    fn compute(&self) -> &ComputeModel {
        &self.profile.compute
    }

    fn raw_tokens_per_frame(&self) -> usize {
        self.profile.raw_tokens_per_frame
    }

    fn ground_truth(&self, query: &Query) -> Option<usize> {
        Some(
            self.latents(query.id)
                .truth
                .min(query.options.len().saturating_sub(1)),
        )
    }
}
