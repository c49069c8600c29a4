//! Seeded end-to-end training: stratified batches in, joint-loss gradients
//! through the classifier, adaptive moment updates, per-epoch evaluation on
//! the test split, and best/final checkpoint retention.
//!
//! Determinism contract: for a fixed (seed, config, manifest) the parameter
//! trajectory, the training log, and the final metrics are bit-identical
//! between runs at a fixed thread configuration. Wall-clock timings are kept
//! out of the deterministic log for that reason.

use std::path::Path;
use std::time::Instant;

use crate::data::{stratified_batches, ComposedDataset, Sample};
use crate::error::{Error, Result};
use crate::loss::{self, BatchScores, LossConfig};
use crate::metrics::{self, ConfusionMatrix, MetricSummary, RocCurve, ScoreSet};
use crate::model::{save_checkpoint, CheckpointMeta, RanConfig, RanModel};
use crate::nn::Visit;

/// Which objective drives the gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    BceOnly,
    Joint,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::BceOnly => "bce_only",
            LossMode::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bce_only" => Ok(LossMode::BceOnly),
            "joint" => Ok(LossMode::Joint),
            other => Err(Error::InvalidConfig(format!("unknown loss_mode {other:?}"))),
        }
    }
}

/// Optimization settings. The defaults mirror the reference protocol
/// (learning rate 0.001, batch 128); epoch counts are experiment-specific.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossConfig,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Decision threshold for the per-epoch ACC/P/R/F1 report.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 30,
            loss: LossConfig::default(),
            loss_mode: LossMode::Joint,
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size < 2 && self.loss_mode == LossMode::Joint {
            return Err(Error::InvalidConfig(
                "joint mode needs batch_size >= 2".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        self.loss.validate()
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bce_term: f64,
    pub auc_term: f64,
    pub total: f64,
    pub test: MetricSummary,
    pub single_class_batches: usize,
    /// Informational only; excluded from the deterministic serialization.
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Deterministic tab-separated rendering, one row per epoch.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "epoch\tbce_term\tauc_term\ttotal\ttest_acc\ttest_p\ttest_r\ttest_f1\ttest_auc\tsingle_class_batches\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.epoch,
                r.bce_term,
                r.auc_term,
                r.total,
                r.test.acc,
                r.test.precision,
                r.test.recall,
                r.test.f1,
                r.test.auc,
                r.single_class_batches
            ));
        }
        out
    }

    /// Per-epoch wall time, serialized separately from the deterministic log.
    pub fn timing_tsv(&self) -> String {
        let mut out = String::from("epoch\twall_secs\n");
        for r in &self.records {
            out.push_str(&format!("{}\t{:.3}\n", r.epoch, r.wall_secs));
        }
        out
    }
}

/// Adaptive per-parameter moment optimizer with the standard defaults.
struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    fn new(lr: f64, model: &mut RanModel) -> Self {
        let mut sizes = Vec::new();
        model.visit_params(&mut |p| sizes.push(p.len()));
        Self {
            lr: lr as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn step(&mut self, model: &mut RanModel) {
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step);
        let bias2 = 1.0 - self.beta2.powi(self.step);
        let mut idx = 0;
        let (beta1, beta2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        model.visit_params(&mut |p| {
            let m = &mut m_all[idx];
            let v = &mut v_all[idx];
            for ((w, &g), (m, v)) in p
                .value
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bias1;
                let vhat = *v / bias2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Everything a finished training run hands back.
pub struct TrainOutcome {
    pub model: RanModel,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_auc: f64,
    /// Parameter/buffer snapshot of the best-test-AUC epoch.
    best_state: Vec<Vec<f32>>,
}

impl TrainOutcome {
    /// Materializes the best-epoch model.
    pub fn best_model(&self, ran_cfg: &RanConfig) -> Result<RanModel> {
        let mut model = RanModel::build(ran_cfg)?;
        restore_state(&mut model, &self.best_state);
        Ok(model)
    }
}

fn capture_state(model: &mut RanModel) -> Vec<Vec<f32>> {
    let mut state = Vec::new();
    model.visit_params(&mut |p| state.push(p.value.clone()));
    model.visit_buffers(&mut |b| state.push(b.value.clone()));
    state
}

fn restore_state(model: &mut RanModel, state: &[Vec<f32>]) {
    let mut idx = 0;
    model.visit_params(&mut |p| {
        p.value.copy_from_slice(&state[idx]);
        idx += 1;
    });
    model.visit_buffers(&mut |b| {
        b.value.copy_from_slice(&state[idx]);
        idx += 1;
    });
}

/// Scores every sample in evaluation mode, in fixed order.
pub fn score_samples(model: &RanModel, samples: &[Sample]) -> Result<ScoreSet> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let chunk = 128usize;
    let mut start = 0;
    while start < samples.len() {
        let end = (start + chunk).min(samples.len());
        let indices: Vec<usize> = (start..end).collect();
        let x = ComposedDataset::batch_of(samples, &indices);
        let out = model.forward_eval(&x)?;
        scores.extend(out.scores);
        labels.extend(samples[start..end].iter().map(|s| s.label));
        start = end;
    }
    ScoreSet::new(scores, labels)
}

/// Full evaluation report for one split.
pub struct EvalReport {
    pub summary: MetricSummary,
    pub roc: RocCurve,
    pub pr: Vec<(f64, f64)>,
    pub confusion: ConfusionMatrix,
    pub scores: ScoreSet,
}

/// Evaluates a model on a set of composed samples at the given threshold.
pub fn evaluate(model: &RanModel, samples: &[Sample], threshold: f64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyScoreSet);
    }
    let scores = score_samples(model, samples)?;
    Ok(EvalReport {
        summary: metrics::summary(&scores, threshold)?,
        roc: metrics::roc(&scores)?,
        pr: metrics::pr_curve(&scores)?,
        confusion: metrics::confusion_at(&scores, threshold),
        scores,
    })
}

/// Trains a fresh model on the dataset's train split.
///
/// When `out_dir` is given, `best.ckpt` / `final.ckpt` (plus metadata
/// sidecars) are written there. Non-finite losses abort with the offending
/// epoch and batch.
pub fn train(
    tc: &TrainConfig,
    ran_cfg: &RanConfig,
    data: &ComposedDataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let labels: Vec<i8> = data.train.iter().map(|s| s.label).collect();
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(Error::SingleClass("training split"));
    }
    let mut model = RanModel::build(ran_cfg)?;
    let mut optimizer = Adam::new(tc.learning_rate, &mut model);
    let mut log = TrainLog::default();
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_state = capture_state(&mut model);

    for epoch in 1..=tc.epochs {
        let t0 = Instant::now();
        let batches = stratified_batches(&labels, tc.batch_size, tc.seed, (epoch - 1) as u64)?;
        let mut bce_sum = 0.0;
        let mut auc_sum = 0.0;
        let mut total_sum = 0.0;
        let mut sample_count = 0usize;
        let mut single_class = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let x = ComposedDataset::batch_of(&data.train, batch);
            let batch_labels: Vec<i8> = batch.iter().map(|&i| labels[i]).collect();
            let out = model.forward_train(x)?;
            let scores = BatchScores::new(out.scores.clone(), batch_labels.clone())?;

            let bce_v = loss::bce(&scores);
            let has_both = scores.has_both_classes();
            let (auc_v, total_v, dlogits) = match tc.loss_mode {
                LossMode::BceOnly => {
                    let d: Vec<f32> = out
                        .scores
                        .iter()
                        .zip(&batch_labels)
                        .map(|(&g, &y)| {
                            let y01 = if y == 1 { 1.0 } else { 0.0 };
                            ((g - y01) / batch.len() as f64) as f32
                        })
                        .collect();
                    (0.0, bce_v, d)
                }
                LossMode::Joint => {
                    if has_both {
                        let auc_v = loss::auc_surrogate(&scores, &tc.loss)?;
                        let dz =
                            loss::joint_grad_wrt_logits(&out.scores, &batch_labels, &tc.loss)?;
                        let total = tc.loss.alpha * bce_v + (1.0 - tc.loss.alpha) * auc_v;
                        (auc_v, total, dz.iter().map(|&d| d as f32).collect())
                    } else {
                        // ranking term undefined; fall back to the BCE part
                        // and count the occurrence
                        single_class += 1;
                        let d: Vec<f32> = out
                            .scores
                            .iter()
                            .zip(&batch_labels)
                            .map(|(&g, &y)| {
                                let y01 = if y == 1 { 1.0 } else { 0.0 };
                                (tc.loss.alpha * (g - y01) / batch.len() as f64) as f32
                            })
                            .collect();
                        (0.0, tc.loss.alpha * bce_v, d)
                    }
                }
            };
            if !total_v.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            let w = batch.len() as f64;
            bce_sum += bce_v * w;
            auc_sum += auc_v * w;
            total_sum += total_v * w;
            sample_count += batch.len();

            model.zero_grads();
            model.backward(out.cache.expect("training cache"), &dlogits);
            optimizer.step(&mut model);
        }

        let test_report = evaluate(&model, &data.test, tc.threshold)?;
        let record = EpochRecord {
            epoch,
            bce_term: bce_sum / sample_count as f64,
            auc_term: auc_sum / sample_count as f64,
            total: total_sum / sample_count as f64,
            test: test_report.summary,
            single_class_batches: single_class,
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        if record.test.auc > best_auc {
            best_auc = record.test.auc;
            best_epoch = epoch;
            best_state = capture_state(&mut model);
        }
        log.records.push(record);
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let digest = ran_cfg.digest(data.compose_mode.as_str());
        let created = timestamp();
        let mut best_model = RanModel::build(ran_cfg)?;
        restore_state(&mut best_model, &best_state);
        save_checkpoint(
            &mut best_model,
            &dir.join("best.ckpt"),
            data.compose_mode.as_str(),
            &CheckpointMeta {
                epoch: best_epoch,
                seed: tc.seed,
                config_digest: digest.clone(),
                created_at: created.clone(),
            },
        )?;
        save_checkpoint(
            &mut model,
            &dir.join("final.ckpt"),
            data.compose_mode.as_str(),
            &CheckpointMeta {
                epoch: tc.epochs,
                seed: tc.seed,
                config_digest: digest,
                created_at: created,
            },
        )?;
        std::fs::write(dir.join("train.log"), log.to_tsv())?;
        std::fs::write(dir.join("timing.txt"), log.timing_tsv())?;
    }

    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_auc,
        best_state,
    })
}

fn timestamp() -> String {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{now}")
}

/// Trains one run per alpha, everything else held fixed, and reports
/// `(alpha, best test AUC)` ordered by alpha.
pub fn sweep_alpha(
    tc: &TrainConfig,
    ran_cfg: &RanConfig,
    data: &ComposedDataset,
    alphas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if alphas.len() < 2 {
        return Err(Error::InvalidConfig(
            "alpha sweep needs at least 2 values".into(),
        ));
    }
    let mut sorted: Vec<f64> = alphas.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut table = Vec::with_capacity(sorted.len());
    for &alpha in &sorted {
        let cfg = TrainConfig {
            loss: LossConfig {
                alpha,
                ..tc.loss
            },
            loss_mode: LossMode::Joint,
            ..tc.clone()
        };
        cfg.loss.validate()?;
        let outcome = train(&cfg, ran_cfg, data, None)?;
        table.push((alpha, outcome.best_auc));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SyntheticSpec};
    use crate::data::ComposeMode;

    fn tiny_ran(seed: u64) -> RanConfig {
        RanConfig {
            input_height: 32,
            input_width: 32,
            input_channels: 3,
            stage_widths: [4, 8, 8, 8, 8],
            attention_modules_per_stage: 1,
            trunk_residual_units: 1,
            seed,
        }
    }

    fn tiny_dataset(seed: u64, per_class: usize) -> (tempfile::TempDir, ComposedDataset) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            seed,
            per_class,
            ..SyntheticSpec::default()
        };
        let manifest = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(manifest.compose_mode, ComposeMode::SideBySide);
        let data = ComposedDataset::load(&manifest, 32, 32).unwrap();
        (dir, data)
    }

    fn tiny_tc(seed: u64, epochs: usize, mode: LossMode, alpha: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 8,
            epochs,
            loss: LossConfig::new(0.4, 2.0, alpha).unwrap(),
            loss_mode: mode,
            seed,
            threshold: 0.5,
        }
    }

    #[test]
    fn deterministic_training_log() {
        let (_tmp, data) = tiny_dataset(1, 10);
        let tc = tiny_tc(3, 2, LossMode::Joint, 0.4);
        let rc = tiny_ran(5);
        let a = train(&tc, &rc, &data, None).unwrap();
        let b = train(&tc, &rc, &data, None).unwrap();
        assert_eq!(a.log.to_tsv(), b.log.to_tsv());
        // parameters bit-identical too
        let mut wa = Vec::new();
        let mut ma = a.model;
        ma.visit_params(&mut |p| wa.extend(p.value.iter().map(|v| v.to_bits())));
        let mut wb = Vec::new();
        let mut mb = b.model;
        mb.visit_params(&mut |p| wb.extend(p.value.iter().map(|v| v.to_bits())));
        assert_eq!(wa, wb);
    }

    #[test]
    fn loss_decomposition_holds_per_epoch() {
        let (_tmp, data) = tiny_dataset(2, 10);
        let tc = tiny_tc(4, 2, LossMode::Joint, 0.3);
        let outcome = train(&tc, &tiny_ran(6), &data, None).unwrap();
        for r in &outcome.log.records {
            let want = 0.3 * r.bce_term + 0.7 * r.auc_term;
            assert!(
                (r.total - want).abs() < 1e-9,
                "epoch {}: total {} vs decomposition {}",
                r.epoch,
                r.total,
                want
            );
            assert_eq!(r.single_class_batches, 0);
        }
    }

    #[test]
    fn alpha_one_joint_equals_bce_only_trajectory() {
        let (_tmp, data) = tiny_dataset(3, 8);
        let rc = tiny_ran(7);
        let joint = train(&tiny_tc(5, 2, LossMode::Joint, 1.0), &rc, &data, None).unwrap();
        let bce = train(&tiny_tc(5, 2, LossMode::BceOnly, 1.0), &rc, &data, None).unwrap();
        let mut wj = Vec::new();
        let mut mj = joint.model;
        mj.visit_params(&mut |p| wj.extend(p.value.iter().map(|v| v.to_bits())));
        let mut wb = Vec::new();
        let mut mb = bce.model;
        mb.visit_params(&mut |p| wb.extend(p.value.iter().map(|v| v.to_bits())));
        assert_eq!(wj, wb, "alpha=1 joint must match bce_only exactly");
    }

    #[test]
    fn one_small_step_decreases_joint_loss() {
        // gradient-flow contract: a small enough step on one batch reduces
        // the loss on that batch, across seeds
        let (_tmp, data) = tiny_dataset(4, 6);
        let rc = tiny_ran(0);
        for seed in 0..5u64 {
            let rc = RanConfig { seed, ..rc.clone() };
            let mut model = RanModel::build(&rc).unwrap();
            let indices: Vec<usize> = (0..data.train.len()).collect();
            let x = ComposedDataset::batch_of(&data.train, &indices);
            let labels: Vec<i8> = data.train.iter().map(|s| s.label).collect();
            let cfg = LossConfig::new(0.4, 2.0, 0.4).unwrap();

            let out = model.forward_train(x.clone()).unwrap();
            let before = loss::joint_loss(
                &BatchScores::new(out.scores.clone(), labels.clone()).unwrap(),
                &cfg,
            )
            .unwrap();
            let dz = loss::joint_grad_wrt_logits(&out.scores, &labels, &cfg).unwrap();
            let dlogits: Vec<f32> = dz.iter().map(|&d| d as f32).collect();
            model.zero_grads();
            model.backward(out.cache.unwrap(), &dlogits);
            // plain gradient step with the contract's small rate
            model.visit_params(&mut |p| {
                for (w, &g) in p.value.iter_mut().zip(&p.grad) {
                    *w -= 1e-4 * g;
                }
            });
            let after_scores = model.forward_train(x).unwrap().scores;
            let after = loss::joint_loss(
                &BatchScores::new(after_scores, labels.clone()).unwrap(),
                &cfg,
            )
            .unwrap();
            assert!(
                after < before,
                "seed {seed}: loss did not decrease ({before} -> {after})"
            );
        }
    }

    #[test]
    fn best_checkpoint_auc_matches_reevaluation() {
        let (_tmp, data) = tiny_dataset(5, 8);
        let rc = tiny_ran(11);
        let tc = tiny_tc(6, 3, LossMode::Joint, 0.4);
        let outcome = train(&tc, &rc, &data, None).unwrap();
        let logged = outcome
            .log
            .records
            .iter()
            .find(|r| r.epoch == outcome.best_epoch)
            .unwrap()
            .test
            .auc;
        assert_eq!(logged, outcome.best_auc);
        let best = outcome.best_model(&rc).unwrap();
        let report = evaluate(&best, &data.test, 0.5).unwrap();
        assert_eq!(report.summary.auc, outcome.best_auc);
    }

    #[test]
    fn checkpoints_written_when_out_dir_given() {
        let (_tmp, data) = tiny_dataset(6, 6);
        let out = tempfile::tempdir().unwrap();
        let tc = tiny_tc(7, 2, LossMode::Joint, 0.4);
        train(&tc, &tiny_ran(12), &data, Some(out.path())).unwrap();
        for f in ["best.ckpt", "best.ckpt.meta", "final.ckpt", "final.ckpt.meta", "train.log", "timing.txt"] {
            assert!(out.path().join(f).exists(), "{f} missing");
        }
        let log = std::fs::read_to_string(out.path().join("train.log")).unwrap();
        assert_eq!(log.lines().count(), 3, "header + one row per epoch");
        assert!(!log.contains("wall"), "wall time stays out of train.log");
    }

    #[test]
    fn sweep_needs_two_alphas_and_is_sorted() {
        let (_tmp, data) = tiny_dataset(7, 6);
        let rc = tiny_ran(13);
        let tc = tiny_tc(8, 1, LossMode::Joint, 0.4);
        assert!(sweep_alpha(&tc, &rc, &data, &[0.4]).is_err());
        let table = sweep_alpha(&tc, &rc, &data, &[1.0, 0.0]).unwrap();
        assert_eq!(table.len(), 2);
        assert!(table[0].0 < table[1].0, "sorted by alpha");
        let again = sweep_alpha(&tc, &rc, &data, &[1.0, 0.0]).unwrap();
        assert_eq!(table, again, "equal seeds give identical sweep tables");
    }

    #[test]
    fn rejects_single_class_training_split() {
        let (_tmp, mut data) = tiny_dataset(8, 4);
        data.train.retain(|s| s.label == 1);
        let tc = tiny_tc(9, 1, LossMode::Joint, 0.4);
        assert!(matches!(
            train(&tc, &tiny_ran(14), &data, None),
            Err(Error::SingleClass(_))
        ));
    }
}
