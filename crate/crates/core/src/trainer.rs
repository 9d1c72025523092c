//! Pre-training and fine-tuning loops.
//!
//! An epoch draws `draws_per_subject` augmented patches from every training
//! subject (topped up round-robin to `min_draws_per_epoch`), shuffles them with a per-epoch stream and runs
//! `ceil(n_patches / batch_size)` Adam steps at a constant learning rate.
//! Every patch has its own seed derived from (seed, subject, epoch, draw),
//! so patch content does not depend on scheduling.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{self, AugmentConfig};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{evaluate_subject, MetricOptions, MetricReport};
use crate::nn::{sliding_window_predict, Adam, AdamConfig, ModelCheckpoint, Provenance, SegNet, SegNetConfig};
use crate::rng;
use crate::tensor::Tensor;
use crate::types::{Patch, SubjectRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch_size: usize,
    pub epochs: usize,
    pub draws_per_subject: usize,
    /// Lower bound on patches per epoch, so that tiny pools still take a
    /// useful number of steps.
    #[serde(default)]
    pub min_draws_per_epoch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    /// Options for the per-epoch evaluations.
    #[serde(default)]
    pub metrics: MetricOptions,
}

impl TrainConfig {
    pub fn paper_pretrain() -> Self {
        TrainConfig {
            batch_size: 2,
            patch_size: 112,
            epochs: 100,
            draws_per_subject: 8,
            min_draws_per_epoch: 0,
            seed: 0,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            metrics: MetricOptions::default(),
        }
    }

    pub fn paper_finetune() -> Self {
        TrainConfig { epochs: 20, ..Self::paper_pretrain() }
    }

    pub fn desk_pretrain() -> Self {
        TrainConfig {
            patch_size: 32,
            epochs: 30,
            draws_per_subject: 16,
            adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            augment: AugmentConfig::desk(),
            ..Self::paper_pretrain()
        }
    }

    pub fn desk_finetune() -> Self {
        TrainConfig {
            epochs: 20,
            draws_per_subject: 2,
            min_draws_per_epoch: 16,
            adam: AdamConfig { lr: 4e-4, ..AdamConfig::default() },
            ..Self::desk_pretrain()
        }
    }

    pub fn validate(&self, net: &SegNetConfig) -> Result<()> {
        if self.batch_size == 0 || self.draws_per_subject == 0 || self.patch_size == 0 {
            return Err(Error::Config("batch_size, draws_per_subject and patch_size must be positive".into()));
        }
        if !(self.adam.lr >= 0.0) || !self.adam.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.adam.lr)));
        }
        let k = net.divisor();
        if self.patch_size % k != 0 {
            return Err(Error::Config(format!(
                "patch size {} must be divisible by {k}",
                self.patch_size
            )));
        }
        if self.augment.crop_size != self.patch_size {
            return Err(Error::Config(format!(
                "augment.crop_size {} differs from patch_size {}",
                self.augment.crop_size, self.patch_size
            )));
        }
        self.augment.validate()
    }

    pub fn draws_per_epoch(&self, n_subjects: usize) -> usize {
        if n_subjects == 0 {
            return 0;
        }
        (n_subjects * self.draws_per_subject).max(self.min_draws_per_epoch)
    }

    pub fn steps_per_epoch(&self, n_subjects: usize) -> usize {
        self.draws_per_epoch(n_subjects).div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub wall_time_s: f64,
    pub report: Option<MetricReport>,
}

/// Appends one JSON object per line.
pub fn write_jsonl<W: Write + ?Sized>(w: &mut W, log: &EpochLog) -> Result<()> {
    serde_json::to_writer(&mut *w, log)?;
    w.write_all(b"\n").map_err(|e| Error::io("training log", e))
}

/// Hash of subject ids and image content.
pub fn manifest_hash(records: &[SubjectRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.subject_id.as_bytes());
        for v in r.t1w.data().iter().chain(r.flair.data()) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn check_pool(pool: &[SubjectRecord]) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::Training("training pool is empty".into()));
    }
    if let Some(r) = pool.iter().find(|r| !r.is_labeled()) {
        return Err(Error::Training(format!("training subject {} has no lesion mask", r.subject_id)));
    }
    Ok(())
}

fn batch_tensor(patches: &[Patch]) -> Result<(Tensor<f32>, Vec<f32>)> {
    let p = patches[0].size;
    let mut x = Vec::with_capacity(patches.len() * 2 * p * p * p);
    let mut y = Vec::with_capacity(patches.len() * p * p * p);
    for q in patches {
        x.extend_from_slice(&q.t1w);
        x.extend_from_slice(&q.flair);
        y.extend(q.label.iter().map(|&v| f32::from(v)));
    }
    Ok((Tensor::new(vec![patches.len(), 2, p, p, p], x)?, y))
}

/// Runs one epoch in place; returns the mean step loss and the step count.
pub fn train_epoch(
    net: &mut SegNet<f32>,
    opt: &mut Adam,
    cfg: &TrainConfig,
    pool: &[SubjectRecord],
    epoch: usize,
) -> Result<(f64, usize)> {
    let n = pool.len();
    let mut draws: Vec<(usize, usize)> = (0..cfg.draws_per_epoch(n)).map(|k| (k % n, k / n)).collect();
    draws.shuffle(&mut rng::stream(cfg.seed, &["epoch-order", &epoch.to_string()]));
    let mut total = 0.0;
    let mut steps = 0;
    for batch in draws.chunks(cfg.batch_size) {
        let patches = exec::map_indexed(batch.len(), |i| {
            let (s, d) = batch[i];
            let rec = &pool[s];
            augment::draw_patch(rec, &cfg.augment, augment::draw_seed(cfg.seed, &rec.subject_id, epoch, d))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (x, y) = batch_tensor(&patches)?;
        let (loss, grads) = net.loss_and_grads(&x, &y)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at epoch {epoch}, step {steps}")));
        }
        opt.update(net, &grads);
        total += f64::from(loss);
        steps += 1;
    }
    debug_assert_eq!(steps, cfg.steps_per_epoch(pool.len()));
    Ok((total / steps.max(1) as f64, steps))
}

/// Full-volume predictions on `roster` scored against their lesion masks.
pub fn evaluate(net: &SegNet<f32>, roster: &[SubjectRecord], window: usize, epoch: usize, opts: MetricOptions) -> Result<MetricReport> {
    let rows = roster
        .iter()
        .map(|r| {
            let gt = r
                .lesion_mask
                .as_ref()
                .ok_or_else(|| Error::Training(format!("evaluation subject {} has no labels", r.subject_id)))?;
            let pred = sliding_window_predict(net, r, window)?;
            evaluate_subject(&r.subject_id, epoch, &pred, gt, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(epoch, rows))
}

pub struct PretrainResult {
    pub best: ModelCheckpoint,
    pub last: ModelCheckpoint,
    pub best_epoch: usize,
    pub logs: Vec<EpochLog>,
}

/// Trains from a fresh initialization. The best checkpoint maximizes mean
/// validation DSC (earliest epoch on ties); without validation subjects it
/// is the final one.
pub fn pretrain(
    net_cfg: &SegNetConfig,
    cfg: &TrainConfig,
    train: &[SubjectRecord],
    val: &[SubjectRecord],
    mut log: Option<&mut dyn Write>,
) -> Result<PretrainResult> {
    cfg.validate(net_cfg)?;
    check_pool(train)?;
    let mut net = SegNet::<f32>::build(net_cfg.clone(), rng::derive_seed(cfg.seed, &["init"]))?;
    let mut opt = Adam::new(cfg.adam.clone(), &net);
    let prov = |label: &str| Provenance {
        data_hash: manifest_hash(train),
        seed: cfg.seed,
        label: label.into(),
    };
    let mut best: Option<(f64, usize, SegNet<f32>)> = None;
    let mut logs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let (mean_loss, steps) = train_epoch(&mut net, &mut opt, cfg, train, epoch)?;
        let report = if val.is_empty() {
            None
        } else {
            Some(evaluate(&net, val, cfg.patch_size, epoch, cfg.metrics)?)
        };
        if let Some(r) = &report {
            let d = r.mean_dsc();
            if best.as_ref().map_or(true, |(b, _, _)| d > *b) {
                best = Some((d, epoch, net.clone()));
            }
        }
        let entry = EpochLog { epoch, mean_loss, steps, wall_time_s: t0.elapsed().as_secs_f64(), report };
        if let Some(w) = log.as_deref_mut() {
            write_jsonl(w, &entry)?;
        }
        logs.push(entry);
    }
    let last = ModelCheckpoint { net: net.clone(), epoch: cfg.epochs, optimizer: Some(opt), provenance: prov("final") };
    let (best_epoch, best_net) = match best {
        Some((_, e, n)) => (e, n),
        None => (cfg.epochs, net),
    };
    Ok(PretrainResult {
        best: ModelCheckpoint::new(best_net, best_epoch, prov("best")),
        last,
        best_epoch,
        logs,
    })
}

pub struct FinetuneResult {
    /// Evaluation of the unmodified input checkpoint.
    pub baseline: MetricReport,
    pub logs: Vec<EpochLog>,
    pub net: SegNet<f32>,
}

/// Fine-tunes a copy of `ck` with a fresh optimizer state, evaluating on
/// `roster` after every epoch. `on_epoch` sees each epoch's model.
pub fn finetune(
    ck: &ModelCheckpoint,
    cfg: &TrainConfig,
    pool: &[SubjectRecord],
    roster: &[SubjectRecord],
    mut on_epoch: impl FnMut(&SegNet<f32>, &EpochLog) -> Result<()>,
) -> Result<FinetuneResult> {
    cfg.validate(ck.net.config())?;
    check_pool(pool)?;
    let mut net = ck.net.clone();
    let mut opt = Adam::new(cfg.adam.clone(), &net);
    let opts = cfg.metrics;
    let baseline = evaluate(&net, roster, cfg.patch_size, 0, opts)?;
    let mut logs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let (mean_loss, steps) = train_epoch(&mut net, &mut opt, cfg, pool, epoch)?;
        let report = evaluate(&net, roster, cfg.patch_size, epoch, opts)?;
        let entry = EpochLog {
            epoch,
            mean_loss,
            steps,
            wall_time_s: t0.elapsed().as_secs_f64(),
            report: Some(report),
        };
        on_epoch(&net, &entry)?;
        logs.push(entry);
    }
    Ok(FinetuneResult { baseline, logs, net })
}
