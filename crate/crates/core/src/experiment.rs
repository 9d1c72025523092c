//! Experiment configuration and the staged on-disk pipeline behind the CLI.
//!
//! Stages read their inputs from and write their outputs to one run
//! directory, named after the configuration hash and the seed:
//!
//! ```text
//! <root>/<hash>-seed<seed>/
//!   config.json                    resolved configuration
//!   data/{raw,preprocessed,harmonized}/manifest.json + NIfTI files
//!   harmonizer.json
//!   pretrain/{best,last}.ckpt, pretrain/log.jsonl
//!   adapt/results.json, adapt/plans/*.json, adapt/{rows,aggregate}.csv
//!   evaluate/summary.json
//!   report/{dsc,lesion_f1,vc}.svg, report/{rows,aggregate}.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{self, AdaptationPlan, ExperimentResult, Strategy};
use crate::error::{Error, Result};
use crate::harmonize::{fit_histogram_matcher, Harmonizer, DEFAULT_QUANTILES, MIN_QUANTILES};
use crate::metrics::{MetricOptions, MetricReport};
use crate::nifti;
use crate::nn::{ModelCheckpoint, SegNetConfig};
use crate::phantom::{generate_cohort, PhantomSpec, SiteTransform};
use crate::preprocess::preprocess_subject;
use crate::rng;
use crate::trainer::{self, TrainConfig};
use crate::types::SubjectRecord;

/// Environment variable overriding the run-directory root.
pub const RUN_ROOT_ENV: &str = "HARMOSEG_RUN_ROOT";
pub const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HarmonizerKind {
    #[default]
    HistogramMatching,
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSizes {
    /// Labeled source-site subjects: pretraining pool and harmonized pool.
    pub source: usize,
    /// Of `source`, how many are held back for pretraining validation.
    pub source_val: usize,
    /// Extra source-site subjects only used to measure in-domain accuracy.
    pub heldout: usize,
    pub target: usize,
}

impl Default for CohortSizes {
    fn default() -> Self {
        CohortSizes { source: 5, source_val: 1, heldout: 5, target: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Run-directory root; the environment variable wins over this.
    #[serde(default)]
    pub run_root: Option<PathBuf>,
    pub cohorts: CohortSizes,
    pub phantom: PhantomSpec,
    pub source_site: SiteTransform,
    pub target_site: SiteTransform,
    pub harmonizer: HarmonizerKind,
    pub n_quantiles: usize,
    pub network: SegNetConfig,
    pub pretrain: TrainConfig,
    /// Fine-tuning settings; `epochs` applies to every strategy except
    /// target CV, which uses `target_cv_epochs`.
    pub finetune: TrainConfig,
    pub target_cv_epochs: usize,
    pub strategies: Vec<Strategy>,
    pub metrics: MetricOptions,
    /// Folds run concurrently.
    pub jobs: usize,
}

impl ExperimentConfig {
    pub fn paper() -> Self {
        ExperimentConfig {
            seed: 0,
            run_root: None,
            cohorts: CohortSizes::default(),
            phantom: PhantomSpec::default(),
            source_site: SiteTransform::site_a(),
            target_site: SiteTransform::site_b(),
            harmonizer: HarmonizerKind::HistogramMatching,
            n_quantiles: DEFAULT_QUANTILES,
            network: SegNetConfig::paper(),
            pretrain: TrainConfig::paper_pretrain(),
            finetune: TrainConfig::paper_finetune(),
            target_cv_epochs: adapt::TARGET_CV_EPOCHS,
            strategies: vec![Strategy::OneShot, Strategy::ZeroShot, Strategy::HarmonizationEnriched],
            metrics: MetricOptions::default(),
            jobs: 1,
        }
    }

    pub fn desk() -> Self {
        ExperimentConfig {
            phantom: PhantomSpec::desk(),
            network: SegNetConfig::desk(),
            pretrain: TrainConfig::desk_pretrain(),
            finetune: TrainConfig::desk_finetune(),
            ..Self::paper()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Parses TOML or JSON (by extension; JSON when unknown). Unknown keys
    /// are rejected. Missing keys are an error too: start from a preset
    /// file written by `--dump-config`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cohorts;
        if c.source < 2 || c.source_val == 0 || c.source_val >= c.source {
            return Err(Error::Config(format!(
                "cohorts: need ≥ 2 source subjects and 1 ≤ source_val < source (got {} / {})",
                c.source, c.source_val
            )));
        }
        if c.target < 2 || c.heldout == 0 {
            return Err(Error::Config("cohorts: need ≥ 2 target and ≥ 1 held-out subjects".into()));
        }
        if self.n_quantiles < MIN_QUANTILES {
            return Err(Error::Config(format!("n_quantiles must be ≥ {MIN_QUANTILES}")));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies selected".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be ≥ 1".into()));
        }
        if self.source_site.site == self.target_site.site {
            return Err(Error::Config("source and target sites must differ".into()));
        }
        let ctx = |what: &'static str| move |e: Error| Error::Config(format!("{what}: {e}"));
        self.phantom.validate().map_err(ctx("phantom"))?;
        self.source_site.validate().map_err(ctx("source_site"))?;
        self.target_site.validate().map_err(ctx("target_site"))?;
        self.network.validate().map_err(ctx("network"))?;
        self.pretrain.validate(&self.network).map_err(ctx("pretrain"))?;
        self.finetune.validate(&self.network).map_err(ctx("finetune"))?;
        Ok(())
    }

    /// Hash of everything that affects results, excluding the seed and the
    /// execution knobs.
    pub fn hash(&self) -> String {
        let canon = ExperimentConfig { seed: 0, run_root: None, jobs: 1, ..self.clone() };
        let json = serde_json::to_vec(&canon).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(RUN_ROOT_ENV)
            .map(PathBuf::from)
            .or_else(|| self.run_root.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT));
        root.join(format!("{}-seed{}", self.hash(), self.seed))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn ft_config(&self) -> TrainConfig {
        TrainConfig { metrics: self.metrics, ..self.finetune.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Source,
    Heldout,
    Target,
}

/// The three raw cohorts of one experiment.
#[derive(Clone, Debug)]
pub struct Cohorts {
    pub source: Vec<SubjectRecord>,
    pub heldout: Vec<SubjectRecord>,
    pub target: Vec<SubjectRecord>,
}

impl Cohorts {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let c = &cfg.cohorts;
        let n_src = c.source + c.heldout;
        let mut a = generate_cohort(n_src, &cfg.phantom, &cfg.source_site, rng::derive_seed(cfg.seed, &["cohort", "source"]))?;
        let heldout = a.split_off(c.source);
        let target = generate_cohort(c.target, &cfg.phantom, &cfg.target_site, rng::derive_seed(cfg.seed, &["cohort", "target"]))?;
        Ok(Cohorts { source: a, heldout, target })
    }

    pub fn preprocess(&self) -> Result<Cohorts> {
        let p = |v: &[SubjectRecord]| v.iter().map(preprocess_subject).collect::<Result<Vec<_>>>();
        Ok(Cohorts { source: p(&self.source)?, heldout: p(&self.heldout)?, target: p(&self.target)? })
    }

    pub fn with_role(&self) -> impl Iterator<Item = (Role, &SubjectRecord)> {
        let tag = |r: Role| move |s| (r, s);
        self.source
            .iter()
            .map(tag(Role::Source))
            .chain(self.heldout.iter().map(tag(Role::Heldout)))
            .chain(self.target.iter().map(tag(Role::Target)))
    }
}

/// Fits the configured contrast transfer towards the target site. The
/// histogram matcher only looks at target images, never their labels.
pub fn build_harmonizer(cfg: &ExperimentConfig, kind: HarmonizerKind, target_pre: &[SubjectRecord]) -> Result<Harmonizer> {
    match kind {
        HarmonizerKind::HistogramMatching => fit_histogram_matcher(target_pre, cfg.n_quantiles),
        HarmonizerKind::Oracle => Ok(Harmonizer::oracle(cfg.source_site.clone(), cfg.target_site.clone())),
    }
}

pub fn harmonize_all(h: &Harmonizer, raw: &[SubjectRecord]) -> Result<Vec<SubjectRecord>> {
    raw.iter().map(|r| h.harmonize_raw(r)).collect()
}

/// Pretrains on the source cohort minus its last `source_val` subjects,
/// which select the best epoch.
pub fn pretrain_source(cfg: &ExperimentConfig, source_pre: &[SubjectRecord], log: Option<&mut dyn std::io::Write>) -> Result<trainer::PretrainResult> {
    let split = source_pre.len() - cfg.cohorts.source_val;
    let tc = TrainConfig { seed: rng::derive_seed(cfg.seed, &["pretrain"]), ..cfg.pretrain.clone() };
    trainer::pretrain(&cfg.network, &tc, &source_pre[..split], &source_pre[split..], log)
}

/// Builds the plan for one strategy, with epochs taken from the config.
pub fn make_plan(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    harmonized: &[SubjectRecord],
    h: &Harmonizer,
    target_pre: &[SubjectRecord],
) -> Result<AdaptationPlan> {
    let seed = rng::derive_seed(cfg.seed, &["adapt"]);
    let mut plan = match strategy {
        Strategy::OneShot => adapt::plan_one_shot(target_pre, seed)?,
        Strategy::ZeroShot => adapt::plan_zero_shot(harmonized, h, target_pre, seed)?,
        Strategy::HarmonizationEnriched => adapt::plan_harmonization_enriched(harmonized, h, target_pre, seed)?,
        Strategy::TargetCv => adapt::plan_target_cv(target_pre, seed)?,
        Strategy::NoAdapt => adapt::plan_no_adapt(target_pre, seed),
    };
    plan.ft_epochs = match strategy {
        Strategy::TargetCv => cfg.target_cv_epochs,
        Strategy::NoAdapt => 0,
        _ => cfg.finetune.epochs,
    };
    Ok(plan)
}

pub fn run_plan(
    cfg: &ExperimentConfig,
    plan: &AdaptationPlan,
    pretrained: &ModelCheckpoint,
    harmonized: &[SubjectRecord],
    target_pre: &[SubjectRecord],
    progress: Option<&mut dyn std::io::Write>,
) -> Result<ExperimentResult> {
    adapt::execute(plan, pretrained, harmonized, target_pre, &cfg.ft_config(), cfg.jobs, progress)
}

/// In-domain vs cross-site accuracy of the pretrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainGap {
    pub heldout: MetricReport,
    pub target: MetricReport,
}

impl DomainGap {
    pub fn measure(cfg: &ExperimentConfig, net: &ModelCheckpoint, heldout_pre: &[SubjectRecord], target_pre: &[SubjectRecord]) -> Result<Self> {
        let w = cfg.finetune.patch_size;
        Ok(DomainGap {
            heldout: trainer::evaluate(&net.net, heldout_pre, w, 0, cfg.metrics)?,
            target: trainer::evaluate(&net.net, target_pre, w, 0, cfg.metrics)?,
        })
    }

    pub fn dsc_gap(&self) -> f64 {
        self.heldout.mean_dsc() - self.target.mean_dsc()
    }
}

// ---------------------------------------------------------------------------
// On-disk stages

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub site: String,
    pub role: Role,
    pub t1w: PathBuf,
    pub flair: PathBuf,
    pub brain_mask: PathBuf,
    pub lesion_mask: Option<PathBuf>,
    pub harmonized_by: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub preprocessed: bool,
    pub entries: Vec<ManifestEntry>,
}

/// Handle on one run directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, hint: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.to_path_buf(), hint: hint.into() });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

const RAW: &str = "data/raw";
const PRE: &str = "data/preprocessed";
const HARM: &str = "data/harmonized";

impl Run {
    /// Opens (creating if needed) the run directory of `config` and stores
    /// the resolved configuration there. An existing directory must hold
    /// the same configuration.
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.run_dir();
        let path = dir.join("config.json");
        let stored = ExperimentConfig { jobs: 1, run_root: None, ..config.clone() };
        if path.exists() {
            let prev: ExperimentConfig = read_json(&path, "")?;
            if prev != stored {
                return Err(Error::Config(format!("{} holds a different configuration", dir.display())));
            }
        } else {
            write_file(&path, stored.to_json())?;
        }
        Ok(Run { config, dir })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.dir.join(rel)
    }

    fn write_cohort<'a>(&self, stage: &str, records: impl Iterator<Item = (Role, &'a SubjectRecord)>, preprocessed: bool) -> Result<Manifest> {
        let dir = self.path(stage);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut entries = Vec::new();
        for (role, r) in records {
            let rel = |kind: &str| PathBuf::from(stage).join(format!("{}_{kind}.nii.gz", r.subject_id));
            nifti::write_volume(&r.t1w, self.path(rel("t1w")))?;
            nifti::write_volume(&r.flair, self.path(rel("flair")))?;
            nifti::write_mask(&r.brain_mask, self.path(rel("brainmask")))?;
            let lesion = match &r.lesion_mask {
                Some(m) => {
                    nifti::write_mask(m, self.path(rel("lesion")))?;
                    Some(rel("lesion"))
                }
                None => None,
            };
            entries.push(ManifestEntry {
                subject_id: r.subject_id.clone(),
                site: r.site.to_string(),
                role,
                t1w: rel("t1w"),
                flair: rel("flair"),
                brain_mask: rel("brainmask"),
                lesion_mask: lesion,
                harmonized_by: r.harmonized_by.clone(),
            });
        }
        let m = Manifest { preprocessed, entries };
        write_file(&self.path(stage).join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(m)
    }

    fn read_cohort(&self, stage: &str, hint: &str) -> Result<Vec<(Role, SubjectRecord)>> {
        let m: Manifest = read_json(&self.path(stage).join("manifest.json"), hint)?;
        m.entries
            .iter()
            .map(|e| {
                let rec = SubjectRecord {
                    subject_id: e.subject_id.clone(),
                    site: crate::SiteTag::new(e.site.clone())?,
                    t1w: nifti::read_volume(self.path(&e.t1w))?,
                    flair: nifti::read_volume(self.path(&e.flair))?,
                    brain_mask: nifti::read_mask(self.path(&e.brain_mask))?,
                    lesion_mask: e.lesion_mask.as_ref().map(|p| nifti::read_mask(self.path(p))).transpose()?,
                    preprocessed: m.preprocessed,
                    harmonized_by: e.harmonized_by.clone(),
                };
                Ok((e.role, crate::types::validate_subject(rec)?))
            })
            .collect()
    }

    fn cohorts(&self, stage: &str, hint: &str) -> Result<Cohorts> {
        let mut c = Cohorts { source: vec![], heldout: vec![], target: vec![] };
        for (role, r) in self.read_cohort(stage, hint)? {
            match role {
                Role::Source => c.source.push(r),
                Role::Heldout => c.heldout.push(r),
                Role::Target => c.target.push(r),
            }
        }
        Ok(c)
    }

    pub fn raw(&self) -> Result<Cohorts> {
        self.cohorts(RAW, "run the `phantom` stage first")
    }

    pub fn preprocessed(&self) -> Result<Cohorts> {
        self.cohorts(PRE, "run the `preprocess` stage first")
    }

    pub fn harmonized(&self) -> Result<Vec<SubjectRecord>> {
        Ok(self.read_cohort(HARM, "run the `harmonize` stage first")?.into_iter().map(|(_, r)| r).collect())
    }

    pub fn stage_phantom(&self) -> Result<Manifest> {
        let c = Cohorts::generate(&self.config)?;
        self.write_cohort(RAW, c.with_role(), false)
    }

    pub fn stage_preprocess(&self) -> Result<Manifest> {
        let c = self.raw()?.preprocess()?;
        self.write_cohort(PRE, c.with_role(), true)
    }

    pub fn harmonizer(&self) -> Result<Harmonizer> {
        let path = self.path("harmonizer.json");
        if !path.exists() {
            return Err(Error::MissingArtifact { path, hint: "run the `harmonize` stage first".into() });
        }
        Harmonizer::from_json(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
    }

    pub fn stage_harmonize(&self) -> Result<Manifest> {
        let pre = self.preprocessed()?;
        let h = build_harmonizer(&self.config, self.config.harmonizer, &pre.target)?;
        write_file(&self.path("harmonizer.json"), h.to_json()?)?;
        let raw = self.raw()?;
        let out = harmonize_all(&h, &raw.source)?;
        self.write_cohort(HARM, out.iter().map(|r| (Role::Source, r)), true)
    }

    pub fn checkpoint(&self) -> Result<ModelCheckpoint> {
        let path = self.path("pretrain/best.ckpt");
        if !path.exists() {
            return Err(Error::MissingArtifact { path, hint: "run the `pretrain` stage first".into() });
        }
        let ck = ModelCheckpoint::load(&path)?;
        if ck.net.config() != &self.config.network {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different network configuration",
                path.display()
            )));
        }
        Ok(ck)
    }

    pub fn stage_pretrain(&self) -> Result<trainer::PretrainResult> {
        let pre = self.preprocessed()?;
        let log_path = self.path("pretrain/log.jsonl");
        write_file(&log_path, "")?;
        let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let res = pretrain_source(&self.config, &pre.source, Some(&mut log))?;
        res.best.save(&self.path("pretrain/best.ckpt"))?;
        res.last.save(&self.path("pretrain/last.ckpt"))?;
        Ok(res)
    }

    pub fn stage_adapt(&self, strategies: &[Strategy], mut progress: Option<&mut dyn std::io::Write>) -> Result<Vec<ExperimentResult>> {
        let ck = self.checkpoint()?;
        let pre = self.preprocessed()?;
        let harmonized = self.harmonized()?;
        let h = self.harmonizer()?;
        let mut results = Vec::new();
        for &s in strategies {
            let plan = make_plan(&self.config, s, &harmonized, &h, &pre.target)?;
            write_file(&self.path(format!("adapt/plans/{}.json", plan.label)), plan.to_json()?)?;
            results.push(run_plan(&self.config, &plan, &ck, &harmonized, &pre.target, progress.as_deref_mut().map(|w| w as &mut dyn std::io::Write))?);
        }
        write_file(&self.path("adapt/results.json"), serde_json::to_string(&results)?)?;
        self.write_tables("adapt", &results)?;
        Ok(results)
    }

    pub fn results(&self) -> Result<Vec<ExperimentResult>> {
        read_json(&self.path("adapt/results.json"), "run the `adapt` stage first")
    }

    pub fn stage_evaluate(&self) -> Result<DomainGap> {
        let ck = self.checkpoint()?;
        let pre = self.preprocessed()?;
        let gap = DomainGap::measure(&self.config, &ck, &pre.heldout, &pre.target)?;
        write_file(&self.path("evaluate/summary.json"), serde_json::to_string_pretty(&gap)?)?;
        Ok(gap)
    }

    /// Curve images plus both tables under `report/`; returns the written
    /// paths.
    pub fn stage_report(&self) -> Result<Vec<PathBuf>> {
        let results = self.results()?;
        let mut out = self.write_tables("report", &results)?;
        out.extend(crate::report::write_curves(&self.path("report"), &results)?);
        Ok(out)
    }

    fn write_tables(&self, stage: &str, results: &[ExperimentResult]) -> Result<Vec<PathBuf>> {
        for r in results {
            let plan: AdaptationPlan = read_json(&self.path(format!("adapt/plans/{}.json", r.label)), "run the `adapt` stage first")?;
            let expected: usize = plan.folds.iter().map(|f| f.test.len() * (plan.ft_epochs + 1)).sum();
            if r.rows.len() != expected {
                return Err(Error::Training(format!(
                    "{}: {} metric rows, plan implies {expected}",
                    r.label,
                    r.rows.len()
                )));
            }
        }
        let mut rows = Vec::new();
        adapt::write_rows_csv(&mut rows, results)?;
        let mut agg = Vec::new();
        adapt::write_aggregate_csv(&mut agg, results)?;
        let (p_rows, p_agg) = (self.path(format!("{stage}/rows.csv")), self.path(format!("{stage}/aggregate.csv")));
        write_file(&p_rows, rows)?;
        write_file(&p_agg, agg)?;
        Ok(vec![p_rows, p_agg])
    }
}
