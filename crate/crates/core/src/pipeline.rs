//! Experiment lifecycle on disk.
//!
//! Every stage writes into a directory named after a hash of its inputs:
//! the config sections it reads plus the manifests of the stages it builds
//! on. Re-running a stage with identical inputs is a no-op, changed inputs
//! land in a new directory, and nothing already written is modified.
//!
//! ```text
//! <root>/world/<hash>/     world.json corpus.jsonl probes.jsonl
//! <root>/base/<hash>/      checkpoint.json curve.tsv
//! <root>/cache/<hash>/     base_cache.jsonl
//! <root>/runs/<name>-<hash>/  config.resolved.toml run.json metrics.tsv checkpoint.json report.json
//! <root>/reports/          compare-<hash>.tsv sweep-<axis>-<hash>.tsv
//! <root>/theory/<hash>/    study.tsv summary.json
//! <root>/exports/          metrics.tsv reports.tsv study.tsv
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{
    self, BaseCache, KnowledgeProbe, PreferenceExample, PreferenceType, ProbeCategory, Split, World,
};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::loss::{LossConfig, Method};
use crate::model::checkpoint::{self, Checkpoint};
use crate::model::{AdapterConfig, Reference, SeqModel};
use crate::provenance;
use crate::theory::{self, LinearBTInstance, StudySummary};
use crate::trainer::{self, PreferenceTrainer};

const MANIFEST: &str = "manifest.json";

/// Record of a completed stage. Written last, so a directory without one is
/// an interrupted stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    /// Upstream stage name → hash of its manifest file.
    pub upstream: BTreeMap<String, String>,
    /// File name → SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

/// A completed stage directory.
#[derive(Debug, Clone)]
pub struct Stage {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// Hash of the manifest file itself; downstream stages key on it.
    pub manifest_hash: String,
    /// Whether this call produced the stage (false if it already existed).
    pub created: bool,
}

impl Stage {
    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Loads a stage and checks every listed file against its recorded hash.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                hint: "stage has not completed".into(),
            });
        }
        let manifest: Manifest = provenance::read_json(&path)?;
        for (name, hash) in &manifest.files {
            let f = dir.join(name);
            if !f.exists() {
                return Err(Error::MissingArtifact {
                    path: f,
                    hint: format!("listed in the {} manifest", manifest.stage),
                });
            }
            let actual = provenance::file_sha256(&f)?;
            if &actual != hash {
                return Err(Error::StaleArtifact {
                    path: f,
                    reason: format!("content hash {} differs from the recorded {}", provenance::short(&actual), provenance::short(hash)),
                });
            }
        }
        Ok(Self {
            manifest_hash: provenance::file_sha256(&path)?,
            dir: dir.to_path_buf(),
            manifest,
            created: false,
        })
    }
}

fn finish_stage(dir: &Path, stage: &str, config_hash: &str, upstream: BTreeMap<String, String>, files: &[&str]) -> Result<Stage> {
    let mut hashes = BTreeMap::new();
    for f in files {
        hashes.insert(f.to_string(), provenance::file_sha256(&dir.join(f))?);
    }
    let manifest = Manifest {
        stage: stage.into(),
        config_hash: config_hash.into(),
        upstream,
        files: hashes,
    };
    let manifest_hash = provenance::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(Stage {
        dir: dir.to_path_buf(),
        manifest,
        manifest_hash,
        created: true,
    })
}

fn missing(path: PathBuf, command: &str) -> Error {
    Error::MissingArtifact {
        path,
        hint: format!("run `bapo {command}` with the same configuration first"),
    }
}

/// The world, corpus and probes of a generated stage.
#[derive(Debug, Clone)]
pub struct WorldData {
    pub world: World,
    pub corpus: Vec<PreferenceExample>,
    pub probes: Vec<KnowledgeProbe>,
}

/// Facts describing one preference-optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub method: Method,
    pub type_id: String,
    pub lambda: f64,
    pub rank: usize,
    pub config_hash: String,
    pub world_dir: String,
    pub base_dir: String,
    pub cache_dir: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    Rank,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "rank" => Ok(SweepAxis::Rank),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?} (expected lambda or rank)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    Metrics,
    Reports,
    Study,
}

impl std::str::FromStr for ExportKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "metrics" => Ok(ExportKind::Metrics),
            "reports" => Ok(ExportKind::Reports),
            "study" => Ok(ExportKind::Study),
            _ => Err(Error::Config(format!("unknown export {s:?} (expected metrics, reports or study)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryOutcome {
    pub summary: StudySummary,
    pub bound_constant: f64,
    pub bound_coverage: f64,
    pub delta: f64,
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned()
}

fn fmt_num(x: f64) -> String {
    // Shortest round-trip form without exponent for ordinary values.
    let s = format!("{x}");
    s.replace('.', "p")
}

pub struct Pipeline {
    pub root: PathBuf,
    pub config: RunConfig,
}

impl Pipeline {
    /// Resolves `config` and binds it to an output root.
    pub fn new(root: impl Into<PathBuf>, config: RunConfig) -> Result<Self> {
        Ok(Self {
            root: root.into(),
            config: config.resolve()?,
        })
    }

    fn stage_dir(&self, kind: &str, key: &str) -> PathBuf {
        self.root.join(kind).join(provenance::short(key))
    }

    // ---- gen -------------------------------------------------------------

    fn world_key(&self) -> String {
        let c = &self.config;
        provenance::content_hash(&(
            "world",
            c.seed,
            &c.world,
            c.corpus.n_prompts,
            c.corpus.valid_fraction,
            c.corpus.probe_count,
        ))
    }

    fn world_stage(&self) -> Result<Stage> {
        let dir = self.stage_dir("world", &self.world_key());
        if !dir.join(MANIFEST).exists() {
            return Err(missing(dir, "gen"));
        }
        Stage::open(&dir)
    }

    /// Generates the world, every preference corpus and the probes.
    pub fn gen(&self) -> Result<Stage> {
        let key = self.world_key();
        let dir = self.stage_dir("world", &key);
        if dir.join(MANIFEST).exists() {
            return Stage::open(&dir);
        }
        let c = &self.config;
        let world = data::build_world(c.seed, c.world)?;
        let mut corpus = Vec::new();
        let groups: [&[PreferenceType]; 4] = [
            &[PreferenceType::P1A, PreferenceType::P1B],
            &[PreferenceType::P2A, PreferenceType::P2B],
            &[PreferenceType::P3A, PreferenceType::P3B],
            &PreferenceType::DOMAINS,
        ];
        for specs in groups {
            corpus.extend(data::gen_preference_corpus(&world, specs, c.corpus.n_prompts, c.corpus.valid_fraction, c.seed)?);
        }
        let pool = data::probe_pool(&world).len();
        let probes = data::gen_probes(&world, c.corpus.probe_count.unwrap_or(pool), c.seed)?;
        provenance::write_json(&dir.join("world.json"), &world)?;
        provenance::write_jsonl(&dir.join("corpus.jsonl"), &corpus)?;
        provenance::write_jsonl(&dir.join("probes.jsonl"), &probes)?;
        finish_stage(&dir, "gen", &key, BTreeMap::new(), &["world.json", "corpus.jsonl", "probes.jsonl"])
    }

    pub fn load_world(stage: &Stage) -> Result<WorldData> {
        Ok(WorldData {
            world: provenance::read_json(&stage.file("world.json"))?,
            corpus: provenance::read_jsonl(&stage.file("corpus.jsonl"))?,
            probes: provenance::read_jsonl(&stage.file("probes.jsonl"))?,
        })
    }

    // ---- pretrain --------------------------------------------------------

    fn base_key(&self, world: &Stage) -> String {
        let c = &self.config;
        provenance::content_hash(&("base", &world.manifest_hash, c.seed, &c.model, &c.pretrain))
    }

    fn base_stage(&self) -> Result<Stage> {
        let world = self.world_stage()?;
        let dir = self.stage_dir("base", &self.base_key(&world));
        if !dir.join(MANIFEST).exists() {
            return Err(missing(dir, "pretrain"));
        }
        Stage::open(&dir)
    }

    /// Pretrains the base model on the neutral corpus and freezes it as the
    /// reference checkpoint.
    pub fn pretrain(&self) -> Result<Stage> {
        let world = self.world_stage()?;
        let key = self.base_key(&world);
        let dir = self.stage_dir("base", &key);
        if dir.join(MANIFEST).exists() {
            return Stage::open(&dir);
        }
        let w = Self::load_world(&world)?;
        let c = &self.config;
        let model = SeqModel::new(c.model, w.world.vocab.clone(), c.seed)?;
        let out = trainer::pretrain_base(model, &data::neutral_corpus(&w.world), &w.probes, &c.pretrain)?;
        let mut curve = String::from("epoch\tloss\tprobe_accuracy\n");
        for e in &out.curve {
            curve.push_str(&format!("{}\t{:e}\t{:e}\n", e.epoch, e.loss, e.probe_accuracy));
        }
        provenance::write_atomic(&dir.join("curve.tsv"), curve.as_bytes())?;
        let epochs = out.curve.len() as u64;
        checkpoint::save(&dir.join("checkpoint.json"), &Checkpoint::new(out.model, &key, epochs))?;
        let upstream = BTreeMap::from([("gen".to_string(), world.manifest_hash.clone())]);
        finish_stage(&dir, "pretrain", &key, upstream, &["checkpoint.json", "curve.tsv"])
    }

    pub fn load_reference(base: &Stage) -> Result<Reference> {
        Ok(checkpoint::load_expecting(&base.file("checkpoint.json"), &base.manifest.config_hash)?
            .model
            .freeze())
    }

    // ---- cache-base ------------------------------------------------------

    fn cache_key(&self, base: &Stage) -> String {
        let c = &self.config;
        provenance::content_hash(&("cache", &base.manifest_hash, c.corpus.base_max_len, &c.corpus.base_decode))
    }

    fn cache_stage(&self, base: &Stage) -> Result<Option<Stage>> {
        let dir = self.stage_dir("cache", &self.cache_key(base));
        if dir.join(MANIFEST).exists() {
            Stage::open(&dir).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Decodes and scores the reference's own answer to every prompt.
    /// Resumable: an interrupted cache file is extended, not rewritten.
    pub fn cache_base(&self) -> Result<Stage> {
        let world = self.world_stage()?;
        let base = self.base_stage()?;
        let key = self.cache_key(&base);
        let dir = self.stage_dir("cache", &key);
        if dir.join(MANIFEST).exists() {
            return Stage::open(&dir);
        }
        let w = Self::load_world(&world)?;
        let reference = Self::load_reference(&base)?;
        let ref_hash = &base.manifest.files["checkpoint.json"];
        let mut cache = BaseCache::open(&dir.join("base_cache.jsonl"), ref_hash)?;
        cache.fill(&reference, &w.corpus, self.config.corpus.base_max_len, self.config.corpus.base_decode)?;
        let upstream = BTreeMap::from([
            ("gen".to_string(), world.manifest_hash.clone()),
            ("pretrain".to_string(), base.manifest_hash.clone()),
        ]);
        finish_stage(&dir, "cache-base", &key, upstream, &["base_cache.jsonl"])
    }

    fn attach_cache(cache: &Stage, base: &Stage, examples: &[PreferenceExample]) -> Result<Vec<PreferenceExample>> {
        let path = cache.file("base_cache.jsonl");
        let c = BaseCache::open(&path, &base.manifest.files["checkpoint.json"])?;
        examples
            .iter()
            .map(|ex| {
                let r = c.get(&ex.prompt).ok_or_else(|| Error::StaleArtifact {
                    path: path.clone(),
                    reason: format!("no cached base response for prompt {}", data::prompt_hash(&ex.prompt)),
                })?;
                Ok(PreferenceExample {
                    base: Some(r.base.clone()),
                    lp_ref_base: Some(r.lp_ref_base),
                    ..ex.clone()
                })
            })
            .collect()
    }

    // ---- train -----------------------------------------------------------

    /// One preference-optimization run with the configured method, type, λ
    /// and adapter rank.
    pub fn train(&self) -> Result<Stage> {
        let c = &self.config;
        self.train_with(c.loss, c.adapter, c.experiment.preference_type, true)
    }

    fn train_with(&self, mut loss: LossConfig, adapter: AdapterConfig, ty: PreferenceType, require_cache_for_bapo: bool) -> Result<Stage> {
        let c = &self.config;
        if loss.method != Method::Bapo {
            loss.lambda = 0.0;
        }
        let world = self.world_stage()?;
        let base = self.base_stage()?;
        let cache = self.cache_stage(&base)?;
        if loss.method == Method::Bapo && cache.is_none() && require_cache_for_bapo {
            return Err(Error::MissingArtifact {
                path: self.stage_dir("cache", &self.cache_key(&base)),
                hint: "BAPO needs cached base responses; run `bapo cache-base` first".into(),
            });
        }
        let mut upstream = BTreeMap::from([
            ("gen".to_string(), world.manifest_hash.clone()),
            ("pretrain".to_string(), base.manifest_hash.clone()),
        ]);
        if let Some(cs) = &cache {
            upstream.insert("cache-base".into(), cs.manifest_hash.clone());
        }
        let mut run_cfg = c.clone();
        run_cfg.loss = loss;
        run_cfg.adapter = adapter;
        run_cfg.experiment.preference_type = ty;
        let key = provenance::content_hash(&("run", &upstream, c.seed, &loss, &adapter, &c.train, ty));
        let name = format!(
            "{}-{}-lam{}-r{}-{}",
            loss.method,
            ty.id(),
            fmt_num(loss.lambda),
            adapter.rank,
            provenance::short(&key)
        );
        let dir = self.root.join("runs").join(name);
        if dir.join(MANIFEST).exists() {
            return Stage::open(&dir);
        }

        let w = Self::load_world(&world)?;
        let reference = Self::load_reference(&base)?;
        let train_set = Self::examples_for(&w, ty, Split::Train);
        let train_set = match &cache {
            Some(cs) => Self::attach_cache(cs, &base, &train_set)?,
            None => train_set,
        };
        let mut policy = reference.thaw();
        policy.attach_adapters(adapter, c.seed)?;
        let trainer = PreferenceTrainer::new(policy, &reference, &train_set, loss, c.train, &key)?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let outcome = match trainer.run() {
            Ok(o) => o,
            Err(Error::Diverged { step, reason, last_good }) => {
                checkpoint::save(&dir.join("last_good.json"), &Checkpoint::new((*last_good).clone(), &key, step as u64))?;
                return Err(Error::Diverged { step, reason, last_good });
            }
            Err(e) => return Err(e),
        };
        let info = RunInfo {
            method: loss.method,
            type_id: ty.id().into(),
            lambda: loss.lambda,
            rank: adapter.rank,
            config_hash: key.clone(),
            world_dir: rel(&self.root, &world.dir),
            base_dir: rel(&self.root, &base.dir),
            cache_dir: cache.as_ref().map(|cs| rel(&self.root, &cs.dir)),
        };
        provenance::write_atomic(
            &dir.join("config.resolved.toml"),
            format!("# config hash {key}\n{}", run_cfg.to_toml()).as_bytes(),
        )?;
        provenance::write_json(&dir.join("run.json"), &info)?;
        trainer::write_metrics(&dir.join("metrics.tsv"), &outcome.metrics)?;
        checkpoint::save(
            &dir.join("checkpoint.json"),
            &Checkpoint::new(outcome.policy, &key, outcome.metrics.len() as u64),
        )?;
        finish_stage(&dir, "train", &key, upstream, &["config.resolved.toml", "run.json", "metrics.tsv", "checkpoint.json"])
    }

    fn examples_for(w: &WorldData, ty: PreferenceType, split: Split) -> Vec<PreferenceExample> {
        w.corpus
            .iter()
            .filter(|e| e.type_id == ty.id() && e.split == split)
            .cloned()
            .collect()
    }

    // ---- eval ------------------------------------------------------------

    /// Evaluates a finished run and writes `report.json` into its directory.
    pub fn eval(root: &Path, run_dir: &Path) -> Result<EvalReport> {
        let run = Stage::open(run_dir)?;
        let info: RunInfo = provenance::read_json(&run.file("run.json"))?;
        let world = Stage::open(&root.join(&info.world_dir))?;
        let base = Stage::open(&root.join(&info.base_dir))?;
        for (name, stage) in [("gen", &world), ("pretrain", &base)] {
            if run.manifest.upstream.get(name) != Some(&stage.manifest_hash) {
                return Err(Error::StaleArtifact {
                    path: stage.dir.clone(),
                    reason: format!("{name} stage no longer matches the one this run was trained against"),
                });
            }
        }
        let cache = match &info.cache_dir {
            Some(d) => Some(Stage::open(&root.join(d))?),
            None => None,
        };
        let w = Self::load_world(&world)?;
        let reference = Self::load_reference(&base)?;
        let policy = checkpoint::load_expecting(&run.file("checkpoint.json"), &info.config_hash)?.model;
        let ty: PreferenceType = info.type_id.parse()?;
        let valid = Self::examples_for(&w, ty, Split::Valid);
        let mut train_set = Self::examples_for(&w, ty, Split::Train);
        if let Some(cs) = &cache {
            train_set = Self::attach_cache(cs, &base, &train_set)?;
        }
        let valid = if valid.is_empty() { train_set.clone() } else { valid };
        let gaps = trainer::mean_gaps(&policy, &reference, &train_set)?;
        let report = EvalReport {
            method: info.method,
            type_id: info.type_id.clone(),
            lambda: info.lambda,
            rank: info.rank,
            reward_accuracy: eval::reward_accuracy(&policy, &valid)?,
            fact_accuracy: eval::category_accuracy(&policy, &w.probes, ProbeCategory::Fact)?,
            safety_accuracy: eval::category_accuracy(&policy, &w.probes, ProbeCategory::Safety)?,
            delta_w_final: gaps.d_w,
            delta_l_final: gaps.d_l,
            delta_b_final: gaps.d_b,
            config_hash: info.config_hash.clone(),
            run_dir: rel(root, run_dir),
        };
        let path = run.file("report.json");
        if path.exists() {
            let old: EvalReport = provenance::read_json(&path)?;
            if old.to_row() != report.to_row() {
                return Err(Error::StaleArtifact {
                    path,
                    reason: "existing report differs from a fresh evaluation".into(),
                });
            }
        } else {
            provenance::write_json(&path, &report)?;
        }
        Ok(report)
    }

    /// Probe accuracies of the base checkpoint, the retention baseline.
    pub fn base_accuracy(&self) -> Result<(f64, f64)> {
        let world = self.world_stage()?;
        let base = self.base_stage()?;
        let w = Self::load_world(&world)?;
        let reference = Self::load_reference(&base)?;
        Ok((
            eval::category_accuracy(reference.model(), &w.probes, ProbeCategory::Fact)?,
            eval::category_accuracy(reference.model(), &w.probes, ProbeCategory::Safety)?,
        ))
    }

    fn require_shared(&self) -> Result<()> {
        let base = self.base_stage()?;
        if self.cache_stage(&base)?.is_none() {
            return Err(missing(self.stage_dir("cache", &self.cache_key(&base)), "cache-base"));
        }
        Ok(())
    }

    fn run_and_eval(&self, loss: LossConfig, adapter: AdapterConfig, ty: PreferenceType) -> Result<EvalReport> {
        let stage = self.train_with(loss, adapter, ty, true)?;
        Self::eval(&self.root, &stage.dir)
    }

    fn write_report_table(&self, name: &str, reports: &[EvalReport]) -> Result<PathBuf> {
        let hashes: Vec<&str> = reports.iter().map(|r| r.config_hash.as_str()).collect();
        let path = self
            .root
            .join("reports")
            .join(format!("{name}-{}.tsv", provenance::short(&provenance::content_hash(&hashes))));
        if !path.exists() {
            eval::write_reports(&path, reports)?;
        }
        Ok(path)
    }

    /// One run per (method, type) over the shared base and cache.
    pub fn compare(&self) -> Result<(PathBuf, Vec<EvalReport>)> {
        self.require_shared()?;
        let c = &self.config;
        let mut reports = Vec::new();
        for &method in &c.experiment.methods {
            for &ty in &c.experiment.types {
                if ty.contrast().is_none() && ty.kind() != crate::data::PreferenceKind::Domain {
                    continue;
                }
                let loss = LossConfig { method, ..c.loss };
                reports.push(self.run_and_eval(loss, c.adapter, ty)?);
            }
        }
        Ok((self.write_report_table("compare", &reports)?, reports))
    }

    /// λ sweep (a DPO row plus BAPO at every λ) or rank sweep (every method
    /// at every rank, α = 2r) on the configured preference type.
    pub fn sweep(&self, axis: SweepAxis) -> Result<(PathBuf, Vec<EvalReport>)> {
        self.require_shared()?;
        let c = &self.config;
        let ty = c.experiment.preference_type;
        let mut reports = Vec::new();
        match axis {
            SweepAxis::Lambda => {
                if !c.experiment.lambdas.contains(&0.0) {
                    return Err(Error::Config("experiment.lambdas must include 0 for a lambda sweep".into()));
                }
                let dpo = LossConfig { method: Method::Dpo, ..c.loss };
                reports.push(self.run_and_eval(dpo, c.adapter, ty)?);
                for &lambda in &c.experiment.lambdas {
                    let bapo = LossConfig { method: Method::Bapo, lambda, ..c.loss };
                    reports.push(self.run_and_eval(bapo, c.adapter, ty)?);
                }
            }
            SweepAxis::Rank => {
                for &rank in &c.experiment.ranks {
                    for &method in &c.experiment.methods {
                        let loss = LossConfig { method, ..c.loss };
                        reports.push(self.run_and_eval(loss, AdapterConfig::with_rank(rank), ty)?);
                    }
                }
            }
        }
        let name = match axis {
            SweepAxis::Lambda => "sweep-lambda",
            SweepAxis::Rank => "sweep-rank",
        };
        Ok((self.write_report_table(name, &reports)?, reports))
    }

    // ---- theory ----------------------------------------------------------

    pub fn theory(&self) -> Result<(Stage, TheoryOutcome)> {
        let c = &self.config;
        let key = provenance::content_hash(&("theory", c.seed, &c.theory));
        let dir = self.stage_dir("theory", &key);
        if !dir.join(MANIFEST).exists() {
            let instance = LinearBTInstance::new(&c.theory, c.seed)?;
            let rows = theory::scaling_study(&instance, &c.theory)?;
            let summary = theory::summarize(&rows)?;
            let outcome = TheoryOutcome {
                bound_coverage: theory::bound_coverage(&rows, theory::CALIBRATED_BOUND_CONSTANT),
                bound_constant: theory::CALIBRATED_BOUND_CONSTANT,
                delta: c.theory.delta,
                summary,
            };
            theory::write_study(&dir.join("study.tsv"), &rows)?;
            provenance::write_json(&dir.join("instance.json"), &instance)?;
            provenance::write_json(&dir.join("summary.json"), &outcome)?;
            finish_stage(&dir, "theory", &key, BTreeMap::new(), &["study.tsv", "instance.json", "summary.json"])?;
        }
        let stage = Stage::open(&dir)?;
        let outcome = provenance::read_json(&stage.file("summary.json"))?;
        Ok((stage, outcome))
    }

    // ---- export ----------------------------------------------------------

    fn completed(root: &Path, kind: &str) -> Result<Vec<Stage>> {
        let dir = root.join(kind);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST).exists())
            .collect();
        entries.sort();
        entries.iter().map(|p| Stage::open(p)).collect()
    }

    /// Merges per-run artifacts under `root` into one delimited table.
    pub fn export(root: &Path, what: ExportKind) -> Result<PathBuf> {
        let (name, text) = match what {
            ExportKind::Metrics => {
                let mut text = format!("run\t{}\n", trainer::METRICS_HEADER);
                for run in Self::completed(root, "runs")? {
                    let run_name = rel(root, &run.dir);
                    for m in trainer::read_metrics(&run.file("metrics.tsv"))? {
                        text.push_str(&format!("{run_name}\t{}\n", m.to_row()));
                    }
                }
                ("metrics.tsv", text)
            }
            ExportKind::Reports => {
                let mut reports = Vec::new();
                for run in Self::completed(root, "runs")? {
                    let p = run.file("report.json");
                    if p.exists() {
                        reports.push(provenance::read_json::<EvalReport>(&p)?);
                    }
                }
                if reports.is_empty() {
                    return Err(missing(root.join("runs"), "eval"));
                }
                ("reports.tsv", eval::render_reports(&reports))
            }
            ExportKind::Study => {
                let mut text = format!("study\t{}\n", theory::STUDY_HEADER);
                let studies = Self::completed(root, "theory")?;
                if studies.is_empty() {
                    return Err(missing(root.join("theory"), "theory"));
                }
                for st in studies {
                    let name = rel(root, &st.dir);
                    for r in theory::read_study(&st.file("study.tsv"))? {
                        text.push_str(&format!("{name}\t{}\n", r.to_row()));
                    }
                }
                ("study.tsv", text)
            }
        };
        let path = root.join("exports").join(name);
        provenance::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::PretrainConfig;

    /// A small, fast configuration.
    pub(crate) fn quick_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.corpus.n_prompts = 40;
        c.pretrain = PretrainConfig { epochs: 3, ..c.pretrain };
        c.experiment.types = vec![PreferenceType::P2A, PreferenceType::P2B];
        c.experiment.lambdas = vec![0.0, 5.0];
        c.experiment.ranks = vec![2];
        c.theory.n_grid = vec![64, 128];
        c.theory.trials = 2;
        c.theory.dim = 8;
        c
    }

    #[test]
    fn stages_require_their_upstream() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(dir.path(), quick_config()).unwrap();
        let err = p.pretrain().unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { ref hint, .. } if hint.contains("bapo gen")), "{err}");
        p.gen().unwrap();
        assert!(matches!(p.cache_base().unwrap_err(), Error::MissingArtifact { ref hint, .. } if hint.contains("pretrain")));
        p.pretrain().unwrap();
        let err = p.train().unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { ref hint, .. } if hint.contains("cache-base")), "{err}");
        assert!(matches!(p.compare().unwrap_err(), Error::MissingArtifact { .. }));
    }

    #[test]
    fn full_lifecycle_is_idempotent_and_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(dir.path(), quick_config()).unwrap();
        assert!(p.gen().unwrap().created);
        assert!(!p.gen().unwrap().created);
        p.pretrain().unwrap();
        let cache = p.cache_base().unwrap();
        let cache_bytes = std::fs::read(cache.file("base_cache.jsonl")).unwrap();
        assert!(!p.cache_base().unwrap().created);
        assert_eq!(std::fs::read(cache.file("base_cache.jsonl")).unwrap(), cache_bytes);

        let run = p.train().unwrap();
        let report = Pipeline::eval(dir.path(), &run.dir).unwrap();
        assert_eq!(report, Pipeline::eval(dir.path(), &run.dir).unwrap());
        assert!(dir.path().join(&report.run_dir).join("config.resolved.toml").exists());
        assert!(run.dir.file_name().unwrap().to_str().unwrap().starts_with("bapo-P2A-lam5-r4-"));

        // Changing λ gives a new run directory; the old one is untouched.
        let before = std::fs::read(run.file("metrics.tsv")).unwrap();
        let mut c2 = quick_config();
        c2.loss.lambda = 1.0;
        let run2 = Pipeline::new(dir.path(), c2).unwrap().train().unwrap();
        assert_ne!(run.dir, run2.dir);
        assert_eq!(std::fs::read(run.file("metrics.tsv")).unwrap(), before);

        // Tampering is detected downstream.
        std::fs::write(run.file("metrics.tsv"), "oops").unwrap();
        assert!(matches!(Stage::open(&run.dir), Err(Error::StaleArtifact { .. })));
    }

    #[test]
    fn compare_and_sweeps_count_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(dir.path(), quick_config()).unwrap();
        p.gen().unwrap();
        p.pretrain().unwrap();
        p.cache_base().unwrap();
        let (path, reports) = p.compare().unwrap();
        assert_eq!(reports.len(), 4);
        assert_eq!(eval::read_reports(&path).unwrap(), reports);
        let runs = std::fs::read_dir(dir.path().join("runs")).unwrap().count();
        assert_eq!(runs, 4);

        let (_, lam) = p.sweep(SweepAxis::Lambda).unwrap();
        assert_eq!(lam.len(), 3);
        let dpo = &lam[0];
        let zero = &lam[1];
        assert_eq!((dpo.method, zero.method, zero.lambda), (Method::Dpo, Method::Bapo, 0.0));
        let dpo_metrics = std::fs::read(dir.path().join(&dpo.run_dir).join("metrics.tsv")).unwrap();
        let zero_metrics = std::fs::read(dir.path().join(&zero.run_dir).join("metrics.tsv")).unwrap();
        assert_eq!(dpo_metrics, zero_metrics);
        assert_eq!(dpo.to_row().split('\t').skip(4).take(6).collect::<Vec<_>>(), zero.to_row().split('\t').skip(4).take(6).collect::<Vec<_>>());

        let (_, ranks) = p.sweep(SweepAxis::Rank).unwrap();
        assert_eq!(ranks.len(), 2);
        assert!(ranks.iter().all(|r| r.rank == 2));
        let info: RunInfo = provenance::read_json(&dir.path().join(&ranks[0].run_dir).join("run.json")).unwrap();
        assert_eq!(info.rank, 2);
        let resolved = std::fs::read_to_string(dir.path().join(&ranks[0].run_dir).join("config.resolved.toml")).unwrap();
        assert!(resolved.contains("alpha = 4.0"));

        let mut bad = quick_config();
        bad.experiment.lambdas = vec![1.0];
        assert!(matches!(
            Pipeline::new(dir.path(), bad).unwrap().sweep(SweepAxis::Lambda),
            Err(Error::Config(_))
        ));

        let m = Pipeline::export(dir.path(), ExportKind::Metrics).unwrap();
        let text = std::fs::read_to_string(m).unwrap();
        assert!(text.lines().count() > 5);
        Pipeline::export(dir.path(), ExportKind::Reports).unwrap();
        assert!(Pipeline::export(dir.path(), ExportKind::Study).is_err());
    }

    #[test]
    fn theory_stage_writes_study() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(dir.path(), quick_config()).unwrap();
        let (stage, outcome) = p.theory().unwrap();
        assert_eq!(outcome.summary.n_grid, vec![64, 128]);
        let rows = theory::read_study(&stage.file("study.tsv")).unwrap();
        assert_eq!(rows.len(), 8);
        let (again, _) = p.theory().unwrap();
        assert!(!again.created);
        let exported = Pipeline::export(dir.path(), ExportKind::Study).unwrap();
        assert_eq!(std::fs::read_to_string(exported).unwrap().lines().count(), 9);
    }
}
