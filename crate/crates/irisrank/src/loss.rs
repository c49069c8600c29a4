//! Differentiable training objectives.
//!
//! Three pieces: mean binary cross-entropy over a minibatch, a pairwise
//! polynomial surrogate that penalizes positive/negative score pairs whose
//! margin falls short of `gamma`, and their convex combination controlled by
//! `alpha`. Gradients are provided in closed form with respect to the scores,
//! plus a finite-difference checker used as an independent oracle.
//!
//! The surrogate term is computed over the minibatch, not the full dataset:
//! pair enumeration is exact (`|P|·|N|` terms, at most ~4096 pairs at batch
//! size 128) rather than sampled.

use crate::error::{Error, Result};

/// Score clamp applied before logarithms, guarding against sigmoid saturation.
pub const SCORE_EPS: f64 = 1e-7;

/// Hyperparameters of the joint objective.
///
/// `gamma` is the ranking margin in `(0, 1]`, `p > 1` the penalty exponent,
/// and `alpha in [0, 1]` the BCE weight of the convex combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub p: f64,
    pub alpha: f64,
}

impl LossConfig {
    pub fn new(gamma: f64, p: f64, alpha: f64) -> Result<Self> {
        let cfg = Self { gamma, p, alpha };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be in (0,1], got {}",
                self.gamma
            )));
        }
        if !(self.p > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "p must be > 1, got {}",
                self.p
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.4,
            p: 2.0,
            alpha: 0.2,
        }
    }
}

/// Minibatch prediction scores with ±1 labels.
///
/// Scores are clamped into `[SCORE_EPS, 1 - SCORE_EPS]` at construction so the
/// strictly-inside-(0,1) invariant holds for all downstream logarithms.
#[derive(Debug, Clone)]
pub struct BatchScores {
    scores: Vec<f64>,
    labels: Vec<i8>,
    pos: Vec<usize>,
    neg: Vec<usize>,
}

impl BatchScores {
    pub fn new(scores: Vec<f64>, labels: Vec<i8>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyScoreSet);
        }
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "BatchScores".into(),
                expected: format!("{} labels", scores.len()),
                actual: format!("{} labels", labels.len()),
            });
        }
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut clamped = Vec::with_capacity(scores.len());
        for (i, (&s, &y)) in scores.iter().zip(&labels).enumerate() {
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidConfig(format!("score {s} outside [0,1]")));
            }
            clamped.push(s.clamp(SCORE_EPS, 1.0 - SCORE_EPS));
            match y {
                1 => pos.push(i),
                -1 => neg.push(i),
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "label {other} is not in {{-1,+1}}"
                    )))
                }
            }
        }
        Ok(Self {
            scores: clamped,
            labels,
            pos,
            neg,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn positives(&self) -> &[usize] {
        &self.pos
    }

    pub fn negatives(&self) -> &[usize] {
        &self.neg
    }

    pub fn has_both_classes(&self) -> bool {
        !self.pos.is_empty() && !self.neg.is_empty()
    }

    fn with_scores(&self, scores: Vec<f64>) -> Self {
        Self {
            scores,
            labels: self.labels.clone(),
            pos: self.pos.clone(),
            neg: self.neg.clone(),
        }
    }
}

/// Mean binary cross-entropy, labels mapped to {0,1} via `y' = (y+1)/2`.
pub fn bce(batch: &BatchScores) -> f64 {
    let m = batch.len() as f64;
    let mut sum = 0.0;
    for (&g, &y) in batch.scores.iter().zip(&batch.labels) {
        if y == 1 {
            sum -= g.ln();
        } else {
            sum -= (1.0 - g).ln();
        }
    }
    sum / m
}

/// Gradient of [`bce`] with respect to each score.
pub fn bce_grad(batch: &BatchScores) -> Vec<f64> {
    let m = batch.len() as f64;
    batch
        .scores
        .iter()
        .zip(&batch.labels)
        .map(|(&g, &y)| {
            if y == 1 {
                -1.0 / g / m
            } else {
                1.0 / (1.0 - g) / m
            }
        })
        .collect()
}

/// Penalty for one positive/negative score pair.
///
/// Returns `(gamma - (g_pos - g_neg))^p` when the margin falls short of
/// `gamma` and exactly 0 otherwise. Continuous at the boundary since `p > 1`.
pub fn surrogate_pair(g_pos: f64, g_neg: f64, cfg: &LossConfig) -> f64 {
    let diff = g_pos - g_neg;
    if diff < cfg.gamma {
        (cfg.gamma - diff).powf(cfg.p)
    } else {
        0.0
    }
}

/// Partial derivatives of [`surrogate_pair`] w.r.t. `(g_pos, g_neg)`.
pub fn surrogate_pair_grad(g_pos: f64, g_neg: f64, cfg: &LossConfig) -> (f64, f64) {
    let diff = g_pos - g_neg;
    if diff < cfg.gamma {
        let d = cfg.p * (cfg.gamma - diff).powf(cfg.p - 1.0);
        (-d, d)
    } else {
        (0.0, 0.0)
    }
}

/// Mean pairwise penalty over all `|P| x |N|` pairs of the minibatch.
///
/// Zero exactly when every positive outscores every negative by at least
/// `gamma`. Errors on single-class batches; the training loop treats that as
/// "drop the term for this batch" and counts the occurrence.
pub fn auc_surrogate(batch: &BatchScores, cfg: &LossConfig) -> Result<f64> {
    if !batch.has_both_classes() {
        return Err(Error::SingleClassBatch);
    }
    let mut sum = 0.0;
    for &i in &batch.pos {
        for &j in &batch.neg {
            sum += surrogate_pair(batch.scores[i], batch.scores[j], cfg);
        }
    }
    Ok(sum / (batch.pos.len() * batch.neg.len()) as f64)
}

/// Gradient of [`auc_surrogate`] with respect to each score.
pub fn auc_surrogate_grad(batch: &BatchScores, cfg: &LossConfig) -> Result<Vec<f64>> {
    if !batch.has_both_classes() {
        return Err(Error::SingleClassBatch);
    }
    let scale = 1.0 / (batch.pos.len() * batch.neg.len()) as f64;
    let mut grad = vec![0.0; batch.len()];
    for &i in &batch.pos {
        for &j in &batch.neg {
            let (dp, dn) = surrogate_pair_grad(batch.scores[i], batch.scores[j], cfg);
            grad[i] += dp * scale;
            grad[j] += dn * scale;
        }
    }
    Ok(grad)
}

/// Convex combination `alpha * bce + (1 - alpha) * auc_surrogate`.
pub fn joint_loss(batch: &BatchScores, cfg: &LossConfig) -> Result<f64> {
    let auc_term = auc_surrogate(batch, cfg)?;
    Ok(cfg.alpha * bce(batch) + (1.0 - cfg.alpha) * auc_term)
}

/// Gradient of [`joint_loss`] with respect to each score.
pub fn joint_loss_grad(batch: &BatchScores, cfg: &LossConfig) -> Result<Vec<f64>> {
    let auc_g = auc_surrogate_grad(batch, cfg)?;
    let bce_g = bce_grad(batch);
    Ok(bce_g
        .iter()
        .zip(&auc_g)
        .map(|(&b, &a)| cfg.alpha * b + (1.0 - cfg.alpha) * a)
        .collect())
}

/// Gradient of the joint objective with respect to pre-sigmoid logits.
///
/// Uses the algebraically exact chain `d(bce)/dz = (sigma(z) - y') / M`, which
/// stays finite where the score-space form saturates. `scores` here are the
/// unclamped sigmoid outputs of the logits.
pub fn joint_grad_wrt_logits(
    scores: &[f64],
    labels: &[i8],
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    let batch = BatchScores::new(scores.to_vec(), labels.to_vec())?;
    let m = scores.len() as f64;
    let auc_g = if batch.has_both_classes() {
        auc_surrogate_grad(&batch, cfg)?
    } else {
        return Err(Error::SingleClassBatch);
    };
    Ok(scores
        .iter()
        .zip(labels)
        .zip(&auc_g)
        .map(|((&g, &y), &ag)| {
            let y01 = if y == 1 { 1.0 } else { 0.0 };
            let bce_dz = (g - y01) / m;
            let sig_prime = g * (1.0 - g);
            cfg.alpha * bce_dz + (1.0 - cfg.alpha) * ag * sig_prime
        })
        .collect())
}

/// Compares the analytic gradient of [`joint_loss`] against central finite
/// differences (step `1e-5`) and returns the worst relative error, using
/// `|a - n| / max(1, |a|, |n|)` per coordinate.
///
/// Intended for small batches (the oracle costs two loss evaluations per
/// score); results are only meaningful away from the clamp boundaries and the
/// exact pair margin.
pub fn grad_check(batch: &BatchScores, cfg: &LossConfig) -> Result<f64> {
    const H: f64 = 1e-5;
    let analytic = joint_loss_grad(batch, cfg)?;
    let mut worst = 0.0f64;
    for i in 0..batch.len() {
        let mut plus = batch.scores.to_vec();
        plus[i] += H;
        let mut minus = batch.scores.to_vec();
        minus[i] -= H;
        let lp = joint_loss(&batch.with_scores(plus), cfg)?;
        let lm = joint_loss(&batch.with_scores(minus), cfg)?;
        let numeric = (lp - lm) / (2.0 * H);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
