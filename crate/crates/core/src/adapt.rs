//! Domain-adaptation strategies as declarative fold plans, their execution
//! on top of the trainer, and cross-fold aggregation.
//!
//! Folds are built over persons (see [`crate::types::person_id`]), so all
//! timepoints of one person land on the same side of a split.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonize::Harmonizer;
use crate::metrics::{mean, volume_correlation, SubjectMetrics};
use crate::nn::ModelCheckpoint;
use crate::rng;
use crate::exec;
use crate::trainer::{evaluate, finetune, TrainConfig};
use crate::types::{person_id, SubjectRecord};

pub const FT_EPOCHS: usize = 20;
pub const TARGET_CV_EPOCHS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    OneShot,
    ZeroShot,
    HarmonizationEnriched,
    TargetCv,
    NoAdapt,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::OneShot => "one-shot",
            Strategy::ZeroShot => "zero-shot",
            Strategy::HarmonizationEnriched => "harmonization-enriched",
            Strategy::TargetCv => "target-cv",
            Strategy::NoAdapt => "no-adapt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    /// Harmonized source subjects in the training pool.
    pub train_source: Vec<String>,
    /// Labeled target subjects in the training pool.
    pub train_target: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Fold {
    pub fn train_ids(&self) -> impl Iterator<Item = &String> {
        self.train_source.iter().chain(&self.train_target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationPlan {
    pub strategy: Strategy,
    /// Row label in result tables; defaults to the strategy name.
    pub label: String,
    pub source_ids: Vec<String>,
    pub target_ids: Vec<String>,
    pub harmonizer: Option<String>,
    pub folds: Vec<Fold>,
    pub ft_epochs: usize,
    pub seed: u64,
}

fn ids(records: &[SubjectRecord]) -> Vec<String> {
    records.iter().map(|r| r.subject_id.clone()).collect()
}

/// Subject ids grouped by person, in order of first appearance.
fn persons(records: &[SubjectRecord]) -> Vec<Vec<String>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in records {
        let p = person_id(&r.subject_id).to_string();
        if !groups.contains_key(&p) {
            order.push(p.clone());
        }
        groups.entry(p).or_default().push(r.subject_id.clone());
    }
    order.into_iter().map(|p| groups.remove(&p).expect("grouped")).collect()
}

fn check_harmonizer(h: &Harmonizer, target: &[SubjectRecord]) -> Result<()> {
    if let Some(r) = target.iter().find(|r| &r.site != h.target_site()) {
        return Err(Error::Plan(format!(
            "harmonizer targets site {} but test subject {} is from site {}",
            h.target_site(),
            r.subject_id,
            r.site
        )));
    }
    Ok(())
}

fn plan(strategy: Strategy, source: Vec<String>, target: &[SubjectRecord], harmonizer: Option<&Harmonizer>, folds: Vec<Fold>, ft_epochs: usize, seed: u64) -> AdaptationPlan {
    AdaptationPlan {
        strategy,
        label: strategy.name().into(),
        source_ids: source,
        target_ids: ids(target),
        harmonizer: harmonizer.map(|h| h.name().to_string()),
        folds,
        ft_epochs,
        seed,
    }
}

fn leave_one_person_in(target: &[SubjectRecord], source: &[String]) -> Result<Vec<Fold>> {
    let groups = persons(target);
    if groups.len() < 2 {
        return Err(Error::Plan(format!("need at least 2 target persons, got {}", groups.len())));
    }
    Ok((0..groups.len())
        .map(|k| Fold {
            train_source: source.to_vec(),
            train_target: groups[k].clone(),
            val: Vec::new(),
            test: groups
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .flat_map(|(_, g)| g.iter().cloned())
                .collect(),
        })
        .collect())
}

/// One fold per target person: train on that person, test on the rest.
pub fn plan_one_shot(target: &[SubjectRecord], seed: u64) -> Result<AdaptationPlan> {
    let folds = leave_one_person_in(target, &[])?;
    Ok(plan(Strategy::OneShot, Vec::new(), target, None, folds, FT_EPOCHS, seed))
}

/// Single fold: all harmonized source subjects, tested on the whole target
/// cohort.
pub fn plan_zero_shot(source: &[SubjectRecord], h: &Harmonizer, target: &[SubjectRecord], seed: u64) -> Result<AdaptationPlan> {
    check_harmonizer(h, target)?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Plan("zero-shot needs source and target subjects".into()));
    }
    let fold = Fold {
        train_source: ids(source),
        train_target: Vec::new(),
        val: Vec::new(),
        test: ids(target),
    };
    Ok(plan(Strategy::ZeroShot, ids(source), target, Some(h), vec![fold], FT_EPOCHS, seed))
}

/// One fold per target person: all harmonized source subjects plus that
/// person.
pub fn plan_harmonization_enriched(source: &[SubjectRecord], h: &Harmonizer, target: &[SubjectRecord], seed: u64) -> Result<AdaptationPlan> {
    check_harmonizer(h, target)?;
    if source.is_empty() {
        return Err(Error::Plan("harmonization-enriched needs source subjects".into()));
    }
    let folds = leave_one_person_in(target, &ids(source))?;
    Ok(plan(Strategy::HarmonizationEnriched, ids(source), target, Some(h), folds, FT_EPOCHS, seed))
}

/// Two folds over the target cohort. The cohort is halved; each fold tests
/// on one half and splits the other into `⌈n/10⌉` validation persons (taken
/// last) and the rest for training. Ten persons give 4/1/5.
pub fn plan_target_cv(target: &[SubjectRecord], seed: u64) -> Result<AdaptationPlan> {
    let groups = persons(target);
    let n = groups.len();
    if n < 4 {
        return Err(Error::Plan(format!("target CV needs at least 4 persons, got {n}")));
    }
    let halves = [&groups[..n / 2], &groups[n / 2..]];
    let n_val = n.div_ceil(10);
    let flat = |g: &[Vec<String>]| -> Vec<String> { g.iter().flatten().cloned().collect() };
    let folds = (0..2)
        .map(|k| {
            let other = halves[1 - k];
            let cut = other.len() - n_val;
            Fold {
                train_source: Vec::new(),
                train_target: flat(&other[..cut]),
                val: flat(&other[cut..]),
                test: flat(halves[k]),
            }
        })
        .collect();
    Ok(plan(Strategy::TargetCv, Vec::new(), target, None, folds, TARGET_CV_EPOCHS, seed))
}

/// Evaluation of the pretrained model only.
pub fn plan_no_adapt(target: &[SubjectRecord], seed: u64) -> AdaptationPlan {
    let fold = Fold { train_source: Vec::new(), train_target: Vec::new(), val: Vec::new(), test: ids(target) };
    plan(Strategy::NoAdapt, Vec::new(), target, None, vec![fold], 0, seed)
}

impl AdaptationPlan {
    /// Disjointness within folds and, for CV strategies, test coverage.
    pub fn validate(&self) -> Result<()> {
        let targets: HashSet<&String> = self.target_ids.iter().collect();
        for (k, f) in self.folds.iter().enumerate() {
            let train: HashSet<&String> = f.train_ids().collect();
            let val: HashSet<&String> = f.val.iter().collect();
            let test: HashSet<&String> = f.test.iter().collect();
            if !train.is_disjoint(&val) || !train.is_disjoint(&test) || !val.is_disjoint(&test) {
                return Err(Error::Plan(format!("fold {k}: train/val/test overlap")));
            }
            let person_of = |s: &HashSet<&String>| -> HashSet<String> {
                s.iter().map(|i| person_id(i).to_string()).collect()
            };
            if !person_of(&train).is_disjoint(&person_of(&test)) {
                return Err(Error::Plan(format!("fold {k}: a person appears in both train and test")));
            }
            if self.strategy == Strategy::ZeroShot && f.train_ids().any(|i| targets.contains(i)) {
                return Err(Error::Plan(format!("fold {k}: zero-shot pool contains target subjects")));
            }
        }
        if matches!(self.strategy, Strategy::TargetCv) {
            let mut seen: Vec<&String> = self.folds.iter().flat_map(|f| &f.test).collect();
            seen.sort();
            let mut all: Vec<&String> = self.target_ids.iter().collect();
            all.sort();
            if seen != all {
                return Err(Error::Plan("test sets do not partition the target cohort".into()));
            }
        }
        Ok(())
    }

    /// True when no fold trains on any target-cohort subject.
    pub fn uses_no_target_labels(&self) -> bool {
        let targets: HashSet<&String> = self.target_ids.iter().collect();
        self.folds.iter().all(|f| f.train_ids().all(|i| !targets.contains(i)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One per-subject metric row of one fold at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub fold: usize,
    pub metrics: SubjectMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub epoch: usize,
    pub mean_dsc: f64,
    pub mean_f1: f64,
    pub vc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub label: String,
    pub strategy: Strategy,
    pub rows: Vec<ResultRow>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentResult {
    pub fn at_epoch(&self, epoch: usize) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|a| a.epoch == epoch)
    }

    /// Highest mean DSC over epochs ≥ 1 (earliest on ties).
    pub fn best_epoch(&self) -> Option<&AggregateRow> {
        self.aggregate
            .iter()
            .filter(|a| a.epoch >= 1)
            .fold(None, |best: Option<&AggregateRow>, a| match best {
                Some(b) if b.mean_dsc >= a.mean_dsc => Some(b),
                _ => Some(a),
            })
    }
}

/// Per-subject mean over the folds that test it, then the cohort mean, for
/// every epoch present in `rows`.
pub fn aggregate(label: &str, rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut by_epoch: BTreeMap<usize, BTreeMap<&str, Vec<&SubjectMetrics>>> = BTreeMap::new();
    for r in rows {
        by_epoch
            .entry(r.metrics.epoch)
            .or_default()
            .entry(&r.metrics.subject_id)
            .or_default()
            .push(&r.metrics);
    }
    by_epoch
        .into_iter()
        .map(|(epoch, subjects)| {
            let per: Vec<[f64; 4]> = subjects
                .values()
                .map(|ms| {
                    let m = |f: fn(&SubjectMetrics) -> f64| mean(ms.iter().map(|x| f(x)));
                    [m(|x| x.dsc), m(|x| x.f1), m(|x| x.gt_volume), m(|x| x.pred_volume)]
                })
                .collect();
            let gt: Vec<f64> = per.iter().map(|p| p[2]).collect();
            let pr: Vec<f64> = per.iter().map(|p| p[3]).collect();
            AggregateRow {
                label: label.to_string(),
                epoch,
                mean_dsc: mean(per.iter().map(|p| p[0])),
                mean_f1: mean(per.iter().map(|p| p[1])),
                vc: volume_correlation(&gt, &pr).ok(),
            }
        })
        .collect()
}

fn lookup(pool: &[SubjectRecord], ids: &[String], what: &str) -> Result<Vec<SubjectRecord>> {
    ids.iter()
        .map(|i| {
            pool.iter()
                .find(|r| &r.subject_id == i)
                .cloned()
                .ok_or_else(|| Error::Plan(format!("{what} subject {i} not supplied")))
        })
        .collect()
}

/// Runs every fold of `plan` from `pretrained`. `source` holds the
/// harmonized source subjects, `target` the preprocessed target cohort.
/// `ft` supplies everything except the epoch count and seed, which come
/// from the plan. Up to `jobs` folds run concurrently; rows are always
/// collected in fold order.
pub fn execute(
    plan: &AdaptationPlan,
    pretrained: &ModelCheckpoint,
    source: &[SubjectRecord],
    target: &[SubjectRecord],
    ft: &TrainConfig,
    jobs: usize,
    mut progress: Option<&mut dyn Write>,
) -> Result<ExperimentResult> {
    plan.validate()?;
    let run_fold = |k: usize| -> Result<Vec<ResultRow>> {
        let fold = &plan.folds[k];
        let test = lookup(target, &fold.test, "test")?;
        let mut pool = lookup(source, &fold.train_source, "source")?;
        pool.extend(lookup(target, &fold.train_target, "target")?);
        let cfg = TrainConfig {
            epochs: plan.ft_epochs,
            seed: rng::derive_seed(plan.seed, &["fold", &plan.label, &k.to_string()]),
            ..ft.clone()
        };
        let reports = if pool.is_empty() || plan.ft_epochs == 0 {
            vec![evaluate(&pretrained.net, &test, cfg.patch_size, 0, cfg.metrics)?]
        } else {
            let r = finetune(pretrained, &cfg, &pool, &test, |_, _| Ok(()))?;
            std::iter::once(r.baseline)
                .chain(r.logs.into_iter().filter_map(|l| l.report))
                .collect()
        };
        Ok(reports
            .into_iter()
            .flat_map(|rep| rep.rows)
            .map(|m| ResultRow { label: plan.label.clone(), fold: k, metrics: m })
            .collect())
    };
    let n = plan.folds.len();
    let outcomes: Vec<Result<Vec<ResultRow>>> = if jobs > 1 {
        exec::with_threads(jobs, || exec::map_indexed(n, run_fold))
    } else {
        (0..n).map(run_fold).collect()
    };
    let mut rows = Vec::new();
    for (k, out) in outcomes.into_iter().enumerate() {
        let fold_rows = out.map_err(|e| Error::Fold {
            strategy: plan.label.clone(),
            fold: k,
            source: Box::new(e),
        })?;
        if let Some(w) = progress.as_deref_mut() {
            let last = fold_rows.iter().map(|r| r.metrics.epoch).max().unwrap_or(0);
            let d = mean(fold_rows.iter().filter(|r| r.metrics.epoch == last).map(|r| r.metrics.dsc));
            let _ = writeln!(w, "{} fold {k}: epoch {last} mean DSC {d:.4}", plan.label);
        }
        rows.extend(fold_rows);
    }
    let aggregate = aggregate(&plan.label, &rows);
    Ok(ExperimentResult { label: plan.label.clone(), strategy: plan.strategy, rows, aggregate })
}

#[derive(Serialize)]
struct RowRecord<'a> {
    strategy: &'a str,
    fold: usize,
    epoch: usize,
    subject: &'a str,
    dsc: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    gt_volume: f64,
    pred_volume: f64,
}

#[derive(Serialize)]
struct AggregateRecord<'a> {
    strategy: &'a str,
    epoch: usize,
    mean_dsc: f64,
    mean_f1: f64,
    vc: Option<f64>,
}

/// One line per (strategy, fold, epoch, subject).
pub fn write_rows_csv<W: Write>(w: W, results: &[ExperimentResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for res in results {
        for r in &res.rows {
            let m = &r.metrics;
            out.serialize(RowRecord {
                strategy: &r.label,
                fold: r.fold,
                epoch: m.epoch,
                subject: &m.subject_id,
                dsc: m.dsc,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                gt_volume: m.gt_volume,
                pred_volume: m.pred_volume,
            })?;
        }
    }
    out.flush().map_err(|e| Error::io("rows csv", e))
}

/// One line per (strategy, epoch); `vc` is empty where undefined.
pub fn write_aggregate_csv<W: Write>(w: W, results: &[ExperimentResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for res in results {
        for a in &res.aggregate {
            out.serialize(AggregateRecord {
                strategy: &a.label,
                epoch: a.epoch,
                mean_dsc: a.mean_dsc,
                mean_f1: a.mean_f1,
                vc: a.vc,
            })?;
        }
    }
    out.flush().map_err(|e| Error::io("aggregate csv", e))
}
