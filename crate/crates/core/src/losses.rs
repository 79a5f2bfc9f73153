//! Scale-wise triplet loss, count ranking loss and their sum.
//!
//! With `d` the squared Euclidean distance and `f` the count scorer:
//!
//! ```text
//! L_ST = sum_i max(0, d(a_i, p_i) - d(a_i, n_i) + m1)
//! L_CR = sum_i max(0, f(n_i) - f(p_i) + m2)
//! L    = L_ST + L_CR
//! ```
//!
//! The sum runs over the mini-batch (`reduce = "mean"` divides by the batch
//! size instead). At a hinge argument of exactly zero the subgradient used is 0.

use serde::{Deserialize, Serialize};

use crate::embedder::{count_score, CountScorerParams, EmbeddingVec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub m1: f64,
    pub m2: f64,
    pub reduce: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            m1: 1.0,
            m2: 1.0,
            reduce: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("m1", self.m1), ("m2", self.m2)] {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {m}")));
            }
        }
        Ok(())
    }

    fn scale(&self, batch: usize) -> f64 {
        match self.reduce {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / batch as f64,
        }
    }
}

/// A non-empty batch of `(z_a, z_p, z_n)` with one common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletEmbeddings {
    items: Vec<[EmbeddingVec; 3]>,
}

impl TripletEmbeddings {
    pub fn new(items: Vec<[EmbeddingVec; 3]>) -> Result<Self> {
        let dim = items
            .first()
            .ok_or_else(|| Error::Shape("triplet batch must be non-empty".into()))?[0]
            .dim();
        if items.iter().flatten().any(|z| z.dim() != dim) {
            return Err(Error::Shape("all embeddings in a batch must share one dimension".into()));
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[[EmbeddingVec; 3]] {
        &self.items
    }

    /// `(z_p, z_n)` pairs for the ranking loss.
    pub fn ranking_pairs(&self) -> Vec<(EmbeddingVec, EmbeddingVec)> {
        self.items.iter().map(|[_, p, n]| (p.clone(), n.clone())).collect()
    }
}

pub fn squared_l2(a: &EmbeddingVec, b: &EmbeddingVec) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("cannot compare embeddings of dimension {} and {}", a.dim(), b.dim())));
    }
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn d(a: &EmbeddingVec, b: &EmbeddingVec) -> f64 {
    squared_l2(a, b).expect("batch dimensions validated")
}

/// Per-sample argument of the triplet hinge: `d(a,p) - d(a,n) + m1`.
pub fn triplet_hinge_argument(z: &[EmbeddingVec; 3], cfg: &LossConfig) -> f64 {
    d(&z[0], &z[1]) - d(&z[0], &z[2]) + cfg.m1
}

pub fn scale_triplet_loss(batch: &TripletEmbeddings, cfg: &LossConfig) -> f64 {
    let sum: f64 = batch
        .items
        .iter()
        .map(|z| triplet_hinge_argument(z, cfg).max(0.0))
        .sum();
    sum * cfg.scale(batch.len())
}

fn check_pairs(pairs: &[(EmbeddingVec, EmbeddingVec)], scorer: &CountScorerParams) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Shape("ranking batch must be non-empty".into()));
    }
    if pairs.iter().any(|(p, n)| p.dim() != scorer.dim() || n.dim() != scorer.dim()) {
        return Err(Error::Shape(format!("ranking batch does not match scorer dimension {}", scorer.dim())));
    }
    Ok(())
}

/// Per-sample argument of the ranking hinge: `f(n) - f(p) + m2`.
pub fn ranking_hinge_argument(
    positive: &EmbeddingVec,
    negative: &EmbeddingVec,
    scorer: &CountScorerParams,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(count_score(scorer, negative)? - count_score(scorer, positive)? + cfg.m2)
}

pub fn count_ranking_loss(
    pairs: &[(EmbeddingVec, EmbeddingVec)],
    scorer: &CountScorerParams,
    cfg: &LossConfig,
) -> Result<f64> {
    check_pairs(pairs, scorer)?;
    let mut sum = 0.0;
    for (p, n) in pairs {
        sum += ranking_hinge_argument(p, n, scorer, cfg)?.max(0.0);
    }
    Ok(sum * cfg.scale(pairs.len()))
}

pub fn total_loss(l_st: f64, l_cr: f64) -> f64 {
    l_st + l_cr
}

/// Triplet loss value with gradients with respect to every embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletLossGrad {
    pub loss: f64,
    /// `grads[i] = [dL/dz_a, dL/dz_p, dL/dz_n]` for sample `i`.
    pub grads: Vec<[Vec<f64>; 3]>,
}

pub fn scale_triplet_loss_with_grad(batch: &TripletEmbeddings, cfg: &LossConfig) -> TripletLossGrad {
    let scale = cfg.scale(batch.len());
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for z in &batch.items {
        let t = triplet_hinge_argument(z, cfg);
        let dim = z[0].dim();
        let mut g = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
        if t > 0.0 {
            loss += t;
            let (a, p, n) = (z[0].as_slice(), z[1].as_slice(), z[2].as_slice());
            for k in 0..dim {
                g[0][k] = scale * 2.0 * (n[k] - p[k]);
                g[1][k] = scale * -2.0 * (a[k] - p[k]);
                g[2][k] = scale * 2.0 * (a[k] - n[k]);
            }
        }
        grads.push(g);
    }
    TripletLossGrad {
        loss: loss * scale,
        grads,
    }
}

/// Ranking loss value with gradients for the embeddings and the scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingLossGrad {
    pub loss: f64,
    /// `grads[i] = [dL/dz_p, dL/dz_n]` for sample `i`.
    pub grads: Vec<[Vec<f64>; 2]>,
    pub scorer: CountScorerParams,
}

pub fn count_ranking_loss_with_grad(
    pairs: &[(EmbeddingVec, EmbeddingVec)],
    scorer: &CountScorerParams,
    cfg: &LossConfig,
) -> Result<RankingLossGrad> {
    check_pairs(pairs, scorer)?;
    let scale = cfg.scale(pairs.len());
    let dim = scorer.dim();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    let mut d_scorer = CountScorerParams::zeros(dim);
    for (p, n) in pairs {
        let u = ranking_hinge_argument(p, n, scorer, cfg)?;
        if u > 0.0 {
            loss += u;
            let dp = scorer.weight.iter().map(|w| -scale * w).collect();
            let dn = scorer.weight.iter().map(|w| scale * w).collect();
            for ((g, pv), nv) in d_scorer.weight.iter_mut().zip(p.as_slice()).zip(n.as_slice()) {
                *g += scale * (nv - pv);
            }
            grads.push([dp, dn]);
        } else {
            grads.push([vec![0.0; dim], vec![0.0; dim]]);
        }
    }
    Ok(RankingLossGrad {
        loss: loss * scale,
        grads,
        scorer: d_scorer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> EmbeddingVec {
        EmbeddingVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn squared_l2_by_hand() {
        assert_eq!(squared_l2(&e(&[1.0, 2.0]), &e(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(squared_l2(&e(&[1.0, 0.0, 0.0]), &e(&[0.0, 1.0, 0.0])).unwrap(), 2.0);
        assert!(squared_l2(&e(&[1.0]), &e(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn triplet_hinge_cases() {
        let cfg = LossConfig::default();
        // d(a,p) = 0.2, d(a,n) = 1.5 -> max(0, 0.2 - 1.5 + 1) = 0.
        let b = TripletEmbeddings::new(vec![[e(&[0.0, 0.0]), e(&[0.2f64.sqrt(), 0.0]), e(&[0.0, 1.5f64.sqrt()])]]).unwrap();
        assert_eq!(scale_triplet_loss(&b, &cfg), 0.0);
        let same = TripletEmbeddings::new(vec![[e(&[0.5, 0.5]), e(&[0.5, 0.5]), e(&[0.5, 0.5])]]).unwrap();
        assert_eq!(scale_triplet_loss(&same, &cfg), 1.0);
    }

    #[test]
    fn ranking_hinge_cases() {
        let cfg = LossConfig::default();
        let s = CountScorerParams {
            weight: vec![1.0],
            bias: 0.0,
        };
        assert_eq!(count_ranking_loss(&[(e(&[2.0]), e(&[-0.5]))], &s, &cfg).unwrap(), 0.0);
        assert_eq!(count_ranking_loss(&[(e(&[0.7]), e(&[0.7]))], &s, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn total_is_sum() {
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert_eq!(total_loss(1.0, 1.0), 2.0);
    }

    #[test]
    fn mean_reduction_divides_by_batch() {
        let z = [e(&[0.0]), e(&[0.0]), e(&[0.0])];
        let b = TripletEmbeddings::new(vec![z.clone(), z.clone(), z]).unwrap();
        let sum = scale_triplet_loss(&b, &LossConfig::default());
        let mean = scale_triplet_loss(
            &b,
            &LossConfig {
                reduce: Reduction::Mean,
                ..Default::default()
            },
        );
        assert_eq!((sum, mean), (3.0, 1.0));
    }

    #[test]
    fn invalid_batches_are_rejected() {
        assert!(TripletEmbeddings::new(vec![]).is_err());
        assert!(TripletEmbeddings::new(vec![[e(&[0.0]), e(&[0.0, 1.0]), e(&[0.0])]]).is_err());
        assert!(count_ranking_loss(&[], &CountScorerParams::zeros(1), &LossConfig::default()).is_err());
        assert!(LossConfig {
            m1: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn kink_subgradient_is_zero() {
        // d(a,p) - d(a,n) + 1 = 0 exactly.
        let b = TripletEmbeddings::new(vec![[e(&[0.0]), e(&[0.0]), e(&[1.0])]]).unwrap();
        let g = scale_triplet_loss_with_grad(&b, &LossConfig::default());
        assert_eq!(g.loss, 0.0);
        assert!(g.grads[0].iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cfg = LossConfig {
            m1: 4.0,
            m2: 4.0,
            reduce: Reduction::Mean,
        };
        let mut raw: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect();
        let scorer = CountScorerParams::init(5, 9);
        let st = |r: &[Vec<f64>]| {
            let b = TripletEmbeddings::new(vec![
                [e(&r[0]), e(&r[1]), e(&r[2])],
                [e(&r[3]), e(&r[4]), e(&r[5])],
            ])
            .unwrap();
            scale_triplet_loss(&b, &cfg) + count_ranking_loss(&b.ranking_pairs(), &scorer, &cfg).unwrap()
        };
        let b = TripletEmbeddings::new(vec![
            [e(&raw[0]), e(&raw[1]), e(&raw[2])],
            [e(&raw[3]), e(&raw[4]), e(&raw[5])],
        ])
        .unwrap();
        let gt = scale_triplet_loss_with_grad(&b, &cfg);
        let gr = count_ranking_loss_with_grad(&b.ranking_pairs(), &scorer, &cfg).unwrap();
        for v in 0..6 {
            let (i, slot) = (v / 3, v % 3);
            for k in 0..5 {
                let mut analytic = gt.grads[i][slot][k];
                if slot > 0 {
                    analytic += gr.grads[i][slot - 1][k];
                }
                let orig = raw[v][k];
                raw[v][k] = orig + 1e-6;
                let up = st(&raw);
                raw[v][k] = orig - 1e-6;
                let down = st(&raw);
                raw[v][k] = orig;
                let fd = (up - down) / 2e-6;
                assert!((fd - analytic).abs() < 1e-7, "vector {v} dim {k}: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn scorer_gradient_matches_central_differences() {
        let cfg = LossConfig::default();
        let pairs = vec![(e(&[0.3, -0.2]), e(&[0.1, 0.4])), (e(&[-0.6, 0.2]), e(&[0.5, 0.5]))];
        let scorer = CountScorerParams {
            weight: vec![0.7, -0.3],
            bias: 0.25,
        };
        let g = count_ranking_loss_with_grad(&pairs, &scorer, &cfg).unwrap();
        for k in 0..3 {
            let mut flat = scorer.to_flat();
            flat[k] += 1e-6;
            let up = count_ranking_loss(&pairs, &CountScorerParams::from_flat(&flat).unwrap(), &cfg).unwrap();
            flat[k] -= 2e-6;
            let down = count_ranking_loss(&pairs, &CountScorerParams::from_flat(&flat).unwrap(), &cfg).unwrap();
            let fd = (up - down) / 2e-6;
            assert!((fd - g.scorer.to_flat()[k]).abs() < 1e-7, "scorer param {k}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec3(dim: usize) -> impl Strategy<Value = [Vec<f64>; 3]> {
            let v = || proptest::collection::vec(-10.0f64..10.0, dim);
            (v(), v(), v()).prop_map(|(a, b, c)| [a, b, c])
        }

        fn batch(raw: &[Vec<f64>; 3], shift: &[f64]) -> TripletEmbeddings {
            let m = |v: &Vec<f64>| e(&v.iter().zip(shift).map(|(x, s)| x + s).collect::<Vec<_>>());
            TripletEmbeddings::new(vec![[m(&raw[0]), m(&raw[1]), m(&raw[2])]]).unwrap()
        }

        proptest! {
            #[test]
            fn losses_are_non_negative(raw in vec3(4), w in proptest::collection::vec(-3.0f64..3.0, 4), bias in -3.0f64..3.0,
                                       m1 in 0.0f64..5.0, m2 in 0.0f64..5.0) {
                let cfg = LossConfig { m1, m2, reduce: Reduction::Sum };
                let b = batch(&raw, &[0.0; 4]);
                let l_st = scale_triplet_loss(&b, &cfg);
                let l_cr = count_ranking_loss(&b.ranking_pairs(), &CountScorerParams { weight: w, bias }, &cfg).unwrap();
                prop_assert!(l_st >= 0.0 && l_cr >= 0.0);
                prop_assert_eq!(total_loss(l_st, l_cr), l_st + l_cr);
            }

            #[test]
            fn triplet_loss_is_translation_invariant(raw in vec3(4), shift in proptest::collection::vec(-5.0f64..5.0, 4)) {
                let cfg = LossConfig::default();
                let a = scale_triplet_loss(&batch(&raw, &[0.0; 4]), &cfg);
                let b = scale_triplet_loss(&batch(&raw, &shift), &cfg);
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }

            #[test]
            fn triplet_loss_vanishes_once_margin_is_met(raw in vec3(3), m1 in 0.0f64..3.0) {
                let cfg = LossConfig { m1, ..Default::default() };
                let b = batch(&raw, &[0.0; 3]);
                let z = &b.items()[0];
                let gap = squared_l2(&z[0], &z[2]).unwrap() - squared_l2(&z[0], &z[1]).unwrap();
                let l = scale_triplet_loss(&b, &cfg);
                if gap >= m1 { prop_assert_eq!(l, 0.0); } else { prop_assert!(l > 0.0); }
            }

            #[test]
            fn ranking_loss_is_zero_iff_scores_are_separated(p in -5.0f64..5.0, n in -5.0f64..5.0, m2 in 0.0f64..2.0) {
                let cfg = LossConfig { m2, ..Default::default() };
                let s = CountScorerParams { weight: vec![1.0], bias: 0.0 };
                let l = count_ranking_loss(&[(e(&[p]), e(&[n]))], &s, &cfg).unwrap();
                prop_assert_eq!(l == 0.0, p - n >= m2);
            }
        }
    }
}
