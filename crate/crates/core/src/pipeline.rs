//! Config-driven runs: a fixed stage graph with resumable, checksummed
//! artifacts under `<out>/<run-name>/<stage>/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{robust_accuracy, AttackModels, AttackSpec, Objective};
use crate::data::{generate_planted, load_dataset, save_dataset, LabeledDataset, PlantedSpec, Provenance};
use crate::distill::{construct_nonrobust_dataset, construct_robust_dataset, log_csv, DistillMode, DistillSpec, TargetRule};
use crate::error::{io_err, Error, Result};
use crate::metrics::{build_report, render_table, CrossParadigmReport, ParadigmScore, ParadigmSet, TableMetric};
use crate::paradigms::{self, Encoder, Paradigm, ParadigmConfig, TrainReport};
use crate::probe::{evaluate_accuracy, train_probe, ProbeConfig, ProbeHead};
use crate::rng;
use crate::transfer::{
    ablation_csv, ablation_ladder, loss_trajectory, retrain_projector, transfer_matrix, AblationRow, LossTrajectory,
    ProjectorConfig, TransferMatrix, TransferModel,
};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "XPARADIGM_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const NATURAL: &str = "natural";
const RECORD_FILE: &str = ".stage.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Distill,
    Train,
    Probe,
    Attack,
    Metrics,
    Transfer,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::Distill,
        Stage::Train,
        Stage::Probe,
        Stage::Attack,
        Stage::Metrics,
        Stage::Transfer,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Distill => "distill",
            Stage::Train => "train",
            Stage::Probe => "probe",
            Stage::Attack => "attack",
            Stage::Metrics => "metrics",
            Stage::Transfer => "transfer",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::GenData => &[],
            Stage::Distill => &[Stage::GenData],
            Stage::Train => &[Stage::GenData, Stage::Distill],
            Stage::Probe => &[Stage::GenData, Stage::Distill, Stage::Train],
            Stage::Attack => &[Stage::GenData, Stage::Train, Stage::Probe],
            Stage::Metrics => &[Stage::Distill, Stage::Probe, Stage::Attack],
            Stage::Transfer => &[Stage::GenData, Stage::Train, Stage::Probe],
            Stage::Report => &[Stage::Metrics, Stage::Transfer],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Planted(PlantedSpec),
    /// A dataset directory or manifest written by `save_dataset`.
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillJob {
    /// Name of the emitted dataset.
    pub id: String,
    /// Paradigm of the source encoder, trained on the natural split unless `source_dir` is set.
    pub source: Paradigm,
    /// Saved encoder directory; a `head.json` next to it is used for non-robust jobs.
    #[serde(default)]
    pub source_dir: Option<PathBuf>,
    pub spec: DistillSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttack {
    pub id: String,
    pub spec: AttackSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSelection {
    /// Attack id used for robust accuracy.
    pub attack: String,
    /// Leading test images attacked per model.
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSelection {
    pub attack: String,
    pub ablation_attack: String,
    pub trajectory_attack: String,
    pub samples: usize,
    #[serde(default)]
    pub projector: ProjectorConfig,
}

/// A run description. Seeds inside nested specs are replaced by seeds derived
/// from `seed`, the stage name and the item key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub run_name: String,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    /// Fraction of the natural dataset held out as the evaluation split.
    pub test_fraction: f64,
    #[serde(default)]
    pub distill: Vec<DistillJob>,
    #[serde(default)]
    pub paradigms: Vec<ParadigmConfig>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub attacks: Vec<NamedAttack>,
    #[serde(default)]
    pub metrics: Option<MetricsSelection>,
    #[serde(default)]
    pub transfer: Option<TransferSelection>,
    /// Stages to run; by default every stage whose inputs are configured.
    #[serde(default)]
    pub stages: Option<Vec<Stage>>,
    /// Train independent encoders concurrently.
    #[serde(default)]
    pub concurrent_training: bool,
}

impl RunConfig {
    /// The full desk-scale experiment on planted 8x8 data.
    pub fn desk(run_name: &str, seed: u64) -> Self {
        let shape = [1, 8, 8];
        let robust = DistillSpec { iterations: 200, step_size: 0.1, ..DistillSpec::robust_default() };
        let nonrobust =
            DistillSpec { iterations: 200, step_size: 0.1, target_rule: TargetRule::Uniform, ..DistillSpec::nonrobust_default() };
        let attack = AttackSpec::linf(0.1, 10, Objective::Ce, 0).strong();
        Self {
            schema_version: SCHEMA_VERSION,
            run_name: run_name.into(),
            seed,
            output_dir: None,
            dataset: DatasetSource::Planted(PlantedSpec { n_per_class: 1250, ..PlantedSpec::desk(0) }),
            test_fraction: 0.2,
            distill: vec![
                DistillJob { id: "robust".into(), source: Paradigm::Cl, source_dir: None, spec: robust },
                DistillJob { id: "non-robust".into(), source: Paradigm::Sl, source_dir: None, spec: nonrobust },
            ],
            paradigms: Paradigm::ALL.iter().map(|&p| ParadigmConfig::desk_default(p, shape, 0)).collect(),
            probe: ProbeConfig::default(),
            attacks: vec![
                NamedAttack { id: "linf-strong".into(), spec: attack },
                NamedAttack { id: "linf-pgd".into(), spec: AttackSpec::linf(0.1, 10, Objective::Ce, 0) },
            ],
            metrics: Some(MetricsSelection { attack: "linf-strong".into(), samples: 200 }),
            transfer: Some(TransferSelection {
                attack: "linf-strong".into(),
                ablation_attack: "linf-strong".into(),
                trajectory_attack: "linf-pgd".into(),
                samples: 200,
                projector: ProjectorConfig::default(),
            }),
            stages: None,
            concurrent_training: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stages run by default, in dependency order.
    pub fn enabled_stages(&self) -> Vec<Stage> {
        let mut v = match &self.stages {
            Some(s) => s.clone(),
            None => {
                let mut v = vec![Stage::GenData];
                if !self.distill.is_empty() {
                    v.push(Stage::Distill);
                }
                if !self.paradigms.is_empty() {
                    v.extend([Stage::Train, Stage::Probe]);
                    if self.metrics.is_some() {
                        v.extend([Stage::Attack, Stage::Metrics]);
                    }
                    if self.transfer.is_some() {
                        v.push(Stage::Transfer);
                    }
                    if self.metrics.is_some() || self.transfer.is_some() {
                        v.push(Stage::Report);
                    }
                }
                v
            }
        };
        v.sort();
        v.dedup();
        v
    }

    fn attack(&self, id: &str) -> Option<&AttackSpec> {
        self.attacks.iter().find(|a| a.id == id).map(|a| &a.spec)
    }

    fn paradigm_config(&self, p: Paradigm) -> Option<&ParadigmConfig> {
        self.paradigms.iter().find(|c| c.paradigm() == p)
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errs.push(format!("schema_version: expected {SCHEMA_VERSION}, found {}", self.schema_version));
        }
        if !valid_name(&self.run_name) {
            errs.push(format!("run_name: `{}` must be non-empty and use only letters, digits, '-', '_' or '.'", self.run_name));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            errs.push(format!("test_fraction: {} outside (0,1)", self.test_fraction));
        }
        let shape = match &self.dataset {
            DatasetSource::Planted(p) => {
                if let Err(e) = p.validate() {
                    errs.push(format!("dataset.planted: {e}"));
                }
                Some([p.shape[0], p.shape[1], p.shape[2]])
            }
            DatasetSource::Manifest(path) => {
                if !path.exists() {
                    errs.push(format!("dataset.manifest: {} does not exist", path.display()));
                }
                None
            }
        };
        let mut seen = Vec::new();
        for (i, c) in self.paradigms.iter().enumerate() {
            if let Err(e) = c.validate() {
                errs.push(format!("paradigms[{i}]: {e}"));
            }
            if seen.contains(&c.paradigm()) {
                errs.push(format!("paradigms[{i}]: {} configured twice", c.paradigm()));
            }
            seen.push(c.paradigm());
            if let Some(s) = shape {
                if let Some(a) = c.arch.in_shape().filter(|a| *a != s) {
                    errs.push(format!("paradigms[{i}]: architecture input {a:?} does not match dataset shape {s:?}"));
                }
            }
        }
        let mut ids = vec![NATURAL.to_string()];
        for (i, j) in self.distill.iter().enumerate() {
            if !valid_name(&j.id) || ids.contains(&j.id) || j.id == "sources" {
                errs.push(format!("distill[{i}].id: `{}` is invalid or not unique", j.id));
            }
            ids.push(j.id.clone());
            if let Err(e) = j.spec.validate() {
                errs.push(format!("distill[{i}].spec: {e}"));
            }
            if j.source_dir.is_none() && self.paradigm_config(j.source).is_none() {
                errs.push(format!("distill[{i}].source: no paradigm config for {}", j.source));
            }
        }
        let mut attack_ids = Vec::new();
        for (i, a) in self.attacks.iter().enumerate() {
            if a.id.is_empty() || attack_ids.contains(&a.id) {
                errs.push(format!("attacks[{i}].id: `{}` is empty or not unique", a.id));
            }
            attack_ids.push(a.id.clone());
            if let Err(e) = a.spec.validate() {
                errs.push(format!("attacks[{i}].spec: {e}"));
            }
        }
        if let Some(m) = &self.metrics {
            if self.attack(&m.attack).is_none() {
                errs.push(format!("metrics.attack: unknown attack id `{}`", m.attack));
            }
            if m.samples == 0 {
                errs.push("metrics.samples: must be positive".into());
            }
        }
        if let Some(t) = &self.transfer {
            for (field, id) in [("attack", &t.attack), ("ablation_attack", &t.ablation_attack), ("trajectory_attack", &t.trajectory_attack)] {
                if self.attack(id).is_none() {
                    errs.push(format!("transfer.{field}: unknown attack id `{id}`"));
                }
            }
            if t.samples < 2 {
                errs.push("transfer.samples: need at least 2".into());
            }
            for p in [Paradigm::Cl, Paradigm::Sl] {
                if self.paradigm_config(p).is_none() {
                    errs.push(format!("transfer: needs a {p} paradigm config"));
                }
            }
        }
        let stages = self.enabled_stages();
        for s in &stages {
            let needs_paradigms = matches!(s, Stage::Train | Stage::Probe | Stage::Attack | Stage::Metrics | Stage::Transfer);
            if needs_paradigms && self.paradigms.is_empty() {
                errs.push(format!("stages: {s} needs at least one paradigm config"));
            }
            if matches!(s, Stage::Attack | Stage::Metrics) && self.metrics.is_none() {
                errs.push(format!("stages: {s} needs a metrics selection"));
            }
            if *s == Stage::Transfer && self.transfer.is_none() {
                errs.push("stages: transfer needs a transfer selection".into());
            }
            if *s == Stage::Distill && self.distill.is_empty() {
                errs.push("stages: distill needs at least one distill job".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s != "." && s != ".." && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Digest of the stage's config section and its upstream files.
    pub inputs: String,
    pub files: Vec<FileEntry>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub stages: Vec<StageRecord>,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RunArtifacts {
    /// Every listed file exists and matches its checksum.
    pub fn verify(&self) -> Result<()> {
        for r in &self.stages {
            verify_files(&self.run_dir, &r.files)?;
        }
        Ok(())
    }

    pub fn files(&self) -> impl Iterator<Item = &FileEntry> {
        self.stages.iter().flat_map(|r| r.files.iter())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Output root; falls back to the config, then `$XPARADIGM_OUT`, then `runs`.
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Continue an existing run directory, skipping stages whose inputs and files are unchanged.
    pub resume: bool,
    /// Stop after this stage.
    pub through: Option<Stage>,
    /// Run just this stage against an existing run directory.
    pub only: Option<Stage>,
}

pub fn run_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    let root = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    root.join(&cfg.run_name)
}

pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunArtifacts> {
    run_config(RunConfig::load(config_path)?, opts)
}

pub fn run_config(mut cfg: RunConfig, opts: &RunOptions) -> Result<RunArtifacts> {
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dir = run_dir(&cfg, opts.out.as_deref());
    if dir.exists() && !opts.resume && opts.only.is_none() {
        return Err(Error::OutputExists(dir));
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let cp = dir.join("config.json");
    fs::write(&cp, cfg.to_json()).map_err(io_err(&cp))?;
    let enabled = cfg.enabled_stages();
    let todo: Vec<Stage> = match opts.only {
        Some(s) => {
            if !enabled.contains(&s) {
                return Err(Error::InvalidConfig(format!("stage {s} is not enabled by this config")));
            }
            vec![s]
        }
        None => enabled.iter().copied().filter(|s| opts.through.is_none_or(|t| *s <= t)).collect(),
    };
    let ctx = Ctx { cfg, dir: dir.clone(), enabled: enabled.clone() };
    let mut executed = Vec::new();
    let mut skipped = Vec::new();
    let mut warnings = Vec::new();
    for stage in todo {
        let inputs = ctx.inputs_digest(stage)?;
        if opts.resume {
            if let Some(r) = ctx.record(stage) {
                if r.inputs == inputs && verify_files(&dir, &r.files).is_ok() {
                    skipped.push(stage);
                    continue;
                }
            }
        }
        let sd = ctx.stage_dir(stage);
        if sd.exists() {
            fs::remove_dir_all(&sd).map_err(io_err(&sd))?;
        }
        fs::create_dir_all(&sd).map_err(io_err(&sd))?;
        let t = Instant::now();
        warnings.extend(ctx.execute(stage)?);
        let files = list_files(&dir, &sd)?;
        let record = StageRecord { stage, inputs, files, seconds: t.elapsed().as_secs_f64() };
        let rp = sd.join(RECORD_FILE);
        fs::write(&rp, serde_json::to_string_pretty(&record)?).map_err(io_err(&rp))?;
        executed.push(stage);
    }
    let stages = enabled.iter().filter_map(|&s| ctx.record(s)).collect();
    let art = RunArtifacts { run_dir: dir.clone(), stages, executed, skipped, warnings };
    let ap = dir.join("artifacts.json");
    fs::write(&ap, serde_json::to_string_pretty(&art)?).map_err(io_err(&ap))?;
    Ok(art)
}

fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

fn list_files(run_dir: &Path, dir: &Path) -> Result<Vec<FileEntry>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let p = entry.map_err(io_err(dir))?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n != RECORD_FILE) {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    let mut files = paths
        .iter()
        .map(|p| {
            let (sha256, bytes) = sha256_file(p)?;
            let rel = p.strip_prefix(run_dir).unwrap_or(p);
            let path = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/");
            Ok(FileEntry { path, sha256, bytes })
        })
        .collect::<Result<Vec<_>>>()?;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(files)
}

fn verify_files(run_dir: &Path, files: &[FileEntry]) -> Result<()> {
    for f in files {
        let p = run_dir.join(&f.path);
        if !p.exists() || sha256_file(&p)?.0 != f.sha256 {
            return Err(Error::Checksum { path: p });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ScoreRow {
    dataset: String,
    paradigm: Paradigm,
    accuracy: f64,
}

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
    enabled: Vec<Stage>,
}

impl Ctx {
    fn stage_dir(&self, s: Stage) -> PathBuf {
        self.dir.join(s.as_str())
    }

    fn seed(&self, s: Stage) -> u64 {
        rng::derive(self.cfg.seed, s.as_str())
    }

    fn record(&self, s: Stage) -> Option<StageRecord> {
        let text = fs::read_to_string(self.stage_dir(s).join(RECORD_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn section(&self, s: Stage) -> serde_json::Value {
        use serde_json::json;
        let c = &self.cfg;
        match s {
            Stage::GenData => json!({ "dataset": c.dataset, "test_fraction": c.test_fraction }),
            Stage::Distill => json!({ "distill": c.distill, "paradigms": c.paradigms, "probe": c.probe }),
            Stage::Train => json!({ "paradigms": c.paradigms }),
            Stage::Probe => json!({ "probe": c.probe, "test_fraction": c.test_fraction }),
            Stage::Attack => json!({ "metrics": c.metrics, "attacks": c.attacks }),
            Stage::Metrics => json!({ "metrics": c.metrics }),
            Stage::Transfer => json!({ "transfer": c.transfer, "attacks": c.attacks, "test_fraction": c.test_fraction }),
            Stage::Report => json!({}),
        }
    }

    fn inputs_digest(&self, s: Stage) -> Result<String> {
        let mut up = Vec::new();
        for &u in s.upstream().iter().filter(|u| self.enabled.contains(u)) {
            let r = self.record(u).ok_or_else(|| Error::MissingComponent(format!("stage {u} has not completed; run it before {s}")))?;
            verify_files(&self.dir, &r.files)?;
            up.push(serde_json::json!({ "stage": u, "files": r.files }));
        }
        let doc = serde_json::json!({ "stage": s, "seed": self.cfg.seed, "config": self.section(s), "upstream": up });
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&doc)?)))
    }

    fn execute(&self, s: Stage) -> Result<Vec<String>> {
        match s {
            Stage::GenData => self.gen_data(),
            Stage::Distill => self.distill(),
            Stage::Train => self.train(),
            Stage::Probe => self.probe(),
            Stage::Attack => self.attack(),
            Stage::Metrics => return self.metrics(),
            Stage::Transfer => self.transfer(),
            Stage::Report => self.report(),
        }?;
        Ok(Vec::new())
    }

    fn write(&self, path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(io_err(p))?;
        }
        fs::write(&path, contents).map_err(io_err(&path))
    }

    fn write_json<T: Serialize>(&self, path: PathBuf, value: &T) -> Result<()> {
        self.write(path, serde_json::to_string_pretty(value)?)
    }

    fn read_json<T: serde::de::DeserializeOwned>(&self, path: PathBuf) -> Result<T> {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn gen_data(&self) -> Result<()> {
        let d = match &self.cfg.dataset {
            DatasetSource::Planted(p) => generate_planted(&PlantedSpec { seed: rng::derive(self.seed(Stage::GenData), "planted"), ..p.clone() })?,
            DatasetSource::Manifest(path) => load_dataset(path)?,
        };
        save_dataset(&d, &self.stage_dir(Stage::GenData).join(NATURAL))?;
        Ok(())
    }

    /// Seeded train / held-out split of the natural dataset.
    fn natural_split(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        use rand::seq::SliceRandom;
        let d = load_dataset(&self.stage_dir(Stage::GenData).join(NATURAL))?;
        let n = d.len();
        let k = ((n as f64) * self.cfg.test_fraction).round() as usize;
        if k == 0 || k >= n {
            return Err(Error::InvalidConfig(format!("test_fraction {} leaves an empty split of {n} images", self.cfg.test_fraction)));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::rng(rng::derive(self.seed(Stage::GenData), "split")));
        let (test, train) = idx.split_at(k);
        let (mut test, mut train) = (test.to_vec(), train.to_vec());
        test.sort_unstable();
        train.sort_unstable();
        Ok((d.subset(&train), d.subset(&test)))
    }

    fn datasets(&self) -> Vec<String> {
        let mut v = vec![NATURAL.to_string()];
        if self.enabled.contains(&Stage::Distill) {
            v.extend(self.cfg.distill.iter().map(|j| j.id.clone()));
        }
        v
    }

    fn train_dataset(&self, name: &str, natural: &LabeledDataset) -> Result<LabeledDataset> {
        if name == NATURAL {
            Ok(natural.clone())
        } else {
            load_dataset(&self.stage_dir(Stage::Distill).join(name))
        }
    }

    fn paradigms(&self) -> Vec<Paradigm> {
        let mut v: Vec<Paradigm> = self.cfg.paradigms.iter().map(ParadigmConfig::paradigm).collect();
        v.sort();
        v
    }

    fn encoder_dir(&self, ds: &str, p: Paradigm) -> PathBuf {
        self.stage_dir(Stage::Train).join(ds).join(p.as_str())
    }

    fn head_path(&self, ds: &str, p: Paradigm) -> PathBuf {
        self.stage_dir(Stage::Probe).join(ds).join(format!("{}.json", p.as_str()))
    }

    fn distill(&self) -> Result<()> {
        let (train, _) = self.natural_split()?;
        let seed = self.seed(Stage::Distill);
        let out = self.stage_dir(Stage::Distill);
        let mut sources: BTreeMap<String, (Encoder, ProbeHead)> = BTreeMap::new();
        for job in &self.cfg.distill {
            let key = match &job.source_dir {
                Some(d) => d.display().to_string(),
                None => job.source.as_str().to_string(),
            };
            if !sources.contains_key(&key) {
                let pc = ProbeConfig { seed: rng::derive(seed, &format!("source-probe/{key}")), ..self.cfg.probe.clone() };
                let pair = match &job.source_dir {
                    Some(dir) => {
                        let e = Encoder::load(dir)?;
                        let hp = dir.join("head.json");
                        let h = if hp.exists() { self.read_json(hp)? } else { train_probe(&e, &train, &pc)? };
                        (e, h)
                    }
                    None => {
                        let base = self.cfg.paradigm_config(job.source).expect("validated");
                        let c = ParadigmConfig { seed: rng::derive(seed, &format!("source/{key}")), ..base.clone() };
                        let (e, _, _) = paradigms::train(&train, &c)?;
                        let h = train_probe(&e, &train, &pc)?;
                        let sd = out.join("sources").join(&key);
                        e.save(&sd)?;
                        self.write_json(sd.join("head.json"), &h)?;
                        (e, h)
                    }
                };
                sources.insert(key.clone(), pair);
            }
            let (e, h) = &sources[&key];
            let spec = DistillSpec { seed: rng::derive(seed, &job.id), ..job.spec.clone() };
            let (d, logs) = match spec.mode {
                DistillMode::Robust => construct_robust_dataset(&train, e, &spec)?,
                DistillMode::NonRobust => construct_nonrobust_dataset(&train, e, h, &spec)?,
            };
            save_dataset(&d, &out.join(&job.id))?;
            self.write(out.join(&job.id).join("samples.csv"), log_csv(&logs))?;
        }
        Ok(())
    }

    fn train(&self) -> Result<()> {
        let (natural, _) = self.natural_split()?;
        let seed = self.seed(Stage::Train);
        let data: Vec<(String, LabeledDataset)> =
            self.datasets().into_iter().map(|n| Ok((n.clone(), self.train_dataset(&n, &natural)?))).collect::<Result<_>>()?;
        let jobs: Vec<(usize, ParadigmConfig)> = data
            .iter()
            .enumerate()
            .flat_map(|(i, (name, _))| {
                self.cfg.paradigms.iter().map(move |c| {
                    (i, ParadigmConfig { seed: rng::derive(seed, &format!("{name}/{}", c.paradigm())), ..c.clone() })
                })
            })
            .collect();
        let fit = |(i, c): &(usize, ParadigmConfig)| -> Result<(Encoder, TrainReport)> {
            let (e, _, r) = paradigms::train(&data[*i].1, c)?;
            Ok((e, r))
        };
        let results: Vec<Result<(Encoder, TrainReport)>> =
            if self.cfg.concurrent_training { jobs.par_iter().map(fit).collect() } else { jobs.iter().map(fit).collect() };
        for ((i, c), res) in jobs.iter().zip(results) {
            let (e, report) = res?;
            let dir = self.encoder_dir(&data[*i].0, c.paradigm());
            e.save(&dir)?;
            self.write_json(dir.join("report.json"), &report)?;
        }
        Ok(())
    }

    fn probe(&self) -> Result<()> {
        let (natural, test) = self.natural_split()?;
        let seed = self.seed(Stage::Probe);
        let mut rows = Vec::new();
        for ds in self.datasets() {
            let d = self.train_dataset(&ds, &natural)?;
            for p in self.paradigms() {
                let e = Encoder::load(&self.encoder_dir(&ds, p))?;
                let cfg = ProbeConfig { seed: rng::derive(seed, &format!("{ds}/{p}")), ..self.cfg.probe.clone() };
                let h = train_probe(&e, &d, &cfg)?;
                let accuracy = evaluate_accuracy(&e, &h, &test)?;
                self.write_json(self.head_path(&ds, p), &h)?;
                rows.push(ScoreRow { dataset: ds.clone(), paradigm: p, accuracy });
            }
        }
        self.write_json(self.stage_dir(Stage::Probe).join("usefulness.json"), &rows)
    }

    fn eval_subset(&self, test: &LabeledDataset, samples: usize) -> LabeledDataset {
        let k = samples.min(test.len());
        test.subset(&(0..k).collect::<Vec<_>>())
    }

    fn attack(&self) -> Result<()> {
        let sel = self.cfg.metrics.as_ref().expect("validated");
        let base = self.cfg.attack(&sel.attack).expect("validated");
        let (_, test) = self.natural_split()?;
        let sub = self.eval_subset(&test, sel.samples);
        let seed = self.seed(Stage::Attack);
        let mut rows = Vec::new();
        for ds in self.datasets() {
            for p in self.paradigms() {
                let e = Encoder::load(&self.encoder_dir(&ds, p))?;
                let h: ProbeHead = self.read_json(self.head_path(&ds, p))?;
                let spec = AttackSpec { seed: rng::derive(seed, &format!("{ds}/{p}")), ..base.clone() };
                let accuracy = robust_accuracy(&e, &h, &sub, &spec)?;
                rows.push(ScoreRow { dataset: ds.clone(), paradigm: p, accuracy });
            }
        }
        self.write_json(self.stage_dir(Stage::Attack).join("robustness.json"), &rows)
    }

    fn provenance(&self, ds: &str) -> Result<Provenance> {
        if ds == NATURAL {
            return Ok(Provenance::natural());
        }
        Ok(load_dataset(&self.stage_dir(Stage::Distill).join(ds))?.provenance().clone())
    }

    fn metrics(&self) -> Result<Vec<String>> {
        let u: Vec<ScoreRow> = self.read_json(self.stage_dir(Stage::Probe).join("usefulness.json"))?;
        let r: Vec<ScoreRow> = self.read_json(self.stage_dir(Stage::Attack).join("robustness.json"))?;
        let get = |rows: &[ScoreRow], ds: &str, p: Paradigm| {
            rows.iter()
                .find(|x| x.dataset == ds && x.paradigm == p)
                .map(|x| x.accuracy)
                .ok_or_else(|| Error::MissingComponent(format!("score for {ds}/{p}")))
        };
        let paradigms = self.paradigms();
        let set = if paradigms == Paradigm::ALL { ParadigmSet::Full } else { ParadigmSet::Reduced(paradigms.clone()) };
        let mut warnings = Vec::new();
        for ds in self.datasets() {
            let prov = self.provenance(&ds)?;
            let entries = paradigms
                .iter()
                .map(|&p| {
                    let s = ParadigmScore::new(p, get(&u, &ds, p)?, get(&r, &ds, p)?, get(&u, NATURAL, p)?, get(&r, NATURAL, p)?)?;
                    Ok((s, prov.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            let report = build_report(&entries, &set)?;
            warnings.extend(report.warnings().into_iter().map(|w| format!("{ds}: {w}")));
            self.write(self.stage_dir(Stage::Metrics).join(format!("{ds}.json")), report.to_json()?)?;
        }
        Ok(warnings)
    }

    fn transfer(&self) -> Result<()> {
        let sel = self.cfg.transfer.as_ref().expect("validated");
        let (natural, test) = self.natural_split()?;
        let sub = self.eval_subset(&test, sel.samples);
        let seed = self.seed(Stage::Transfer);
        let out = self.stage_dir(Stage::Transfer);
        let mut encoders = Vec::new();
        for p in self.paradigms() {
            let e = Encoder::load(&self.encoder_dir(NATURAL, p))?;
            let h: ProbeHead = self.read_json(self.head_path(NATURAL, p))?;
            encoders.push((p, e, h));
        }
        let models: Vec<TransferModel> =
            encoders.iter().map(|(p, e, h)| TransferModel { name: p.as_str(), encoder: e, head: h }).collect();
        let spec = AttackSpec { seed: rng::derive(seed, "matrix"), ..self.cfg.attack(&sel.attack).expect("validated").clone() };
        let m = transfer_matrix(&models, &sub, &spec)?;
        self.write(out.join("matrix.csv"), m.to_csv())?;
        self.write_json(out.join("matrix.json"), &m)?;

        let find = |p: Paradigm| encoders.iter().find(|(q, _, _)| *q == p).expect("validated");
        let (_, cl, clh) = find(Paradigm::Cl);
        let (_, sl, slh) = find(Paradigm::Sl);
        let spec =
            AttackSpec { seed: rng::derive(seed, "ablation"), ..self.cfg.attack(&sel.ablation_attack).expect("validated").clone() };
        let rows = ablation_ladder(cl, cl, clh, &sub, &spec)?;
        self.write(out.join("ablation.csv"), ablation_csv(&rows))?;
        self.write_json(out.join("ablation.json"), &rows)?;

        let pc = ProjectorConfig { seed: rng::derive(seed, "projector"), ..sel.projector.clone() };
        let proj = retrain_projector(sl, &natural, &pc)?;
        let base = self.cfg.attack(&sel.trajectory_attack).expect("validated");
        let measured = [Objective::Ce, Objective::INFONCE_DEFAULT];
        let x = sub.all_images();
        let labels = sub.label_vec();
        let mut trajs: Vec<LossTrajectory> = Vec::new();
        for (name, models) in [
            ("CL", AttackModels::classifier(cl, clh)),
            ("SL", AttackModels::classifier(sl, slh).with_projector(&proj)),
        ] {
            for obj in measured {
                let spec = AttackSpec { objective: obj, seed: rng::derive(seed, &format!("trajectory/{name}/{}", obj.id())), ..base.clone() };
                trajs.extend(loss_trajectory(&models, name, &measured, &x, &labels, &spec)?);
            }
        }
        let mut csv = String::from("backbone,attack_objective,measured_objective,step,value\n");
        for t in &trajs {
            for (i, v) in t.values.iter().enumerate() {
                writeln!(csv, "{},{},{},{i},{v:e}", t.backbone, t.attack_objective, t.measured_objective).unwrap();
            }
        }
        self.write(out.join("trajectories.csv"), csv)?;
        self.write_json(out.join("trajectories.json"), &trajs)
    }

    fn report(&self) -> Result<()> {
        for (name, body) in report(&self.dir)? {
            self.write(self.stage_dir(Stage::Report).join(name), body)?;
        }
        Ok(())
    }
}

/// Markdown rendering of a transfer matrix.
pub fn matrix_markdown(m: &TransferMatrix) -> String {
    let mut s = format!("| source \\ target | {} |\n|---|{}\n", m.models.join(" | "), "---|".repeat(m.models.len()));
    for (a, row) in m.models.iter().zip(&m.accuracy) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        writeln!(s, "| {a} | {} |", cells.join(" | ")).unwrap();
    }
    s
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| Attack configuration | Accuracy |\n|---|---|\n");
    for r in rows {
        writeln!(s, "| {} | {:.3} |", r.configuration, r.accuracy).unwrap();
    }
    s
}

/// Renders the tables of a run directory as `(file name, contents)` pairs:
/// relative usefulness and robustness tables from the metrics stage, and the
/// transfer matrix and ablation ladder when present.
pub fn report(run_dir: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let md = run_dir.join(Stage::Metrics.as_str());
    let mut reports: Vec<CrossParadigmReport> = Vec::new();
    if md.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(&md)
            .map_err(io_err(&md))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != RECORD_FILE))
            .collect();
        paths.sort();
        for p in paths {
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            reports.push(serde_json::from_str(&text)?);
        }
    }
    if !reports.is_empty() {
        let distilled: Vec<CrossParadigmReport> =
            reports.iter().filter(|r| r.dataset_provenance.kind != crate::data::DatasetKind::Natural).cloned().collect();
        let t1 = render_table(if distilled.is_empty() { &reports } else { &distilled }, TableMetric::RelativeUsefulness);
        let t2 = render_table(&reports, TableMetric::Robustness);
        out.push(("table1.csv".into(), t1.to_csv()));
        out.push(("table1.md".into(), t1.to_markdown()));
        out.push(("table2b.csv".into(), t2.to_csv()));
        out.push(("table2b.md".into(), t2.to_markdown()));
    }
    let td = run_dir.join(Stage::Transfer.as_str());
    let mp = td.join("matrix.json");
    if mp.exists() {
        let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
        out.push(("transfer_matrix.md".into(), matrix_markdown(&serde_json::from_str(&text)?)));
    }
    let ap = td.join("ablation.json");
    if ap.exists() {
        let text = fs::read_to_string(&ap).map_err(io_err(&ap))?;
        let rows: Vec<AblationRow> = serde_json::from_str(&text)?;
        out.push(("ablation.md".into(), ablation_markdown(&rows)));
    }
    if out.is_empty() {
        return Err(Error::NoReports(run_dir.to_path_buf()));
    }
    Ok(out)
}
