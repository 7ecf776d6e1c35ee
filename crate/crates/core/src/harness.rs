//! End-to-end competition runs (attack, save, reload, score) and the
//! append-only annotation store behind the labeling service.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    epsilon_search_attack, perceptual_attack, rdti_attack, rotation_ensemble_attack, tdmi_attack,
    AttackResult, ImageBudget,
};
use crate::data::{
    load_dataset, save_images, to_byte, AttackConfig, AttackMethod, ImageBatch, ScoreReport,
    MANIFEST_NAME,
};
use crate::error::{Error, Result};
use crate::frequency::frequency_attack;
use crate::scoring::{aggregate_annotations, score_submission, AnnotationRecord, IncompletePolicy};
use crate::scoring::{SubjectiveReport, VOTES_PER_IMAGE};
use crate::zoo::{Classifier, DefenseConfig, Zoo};

pub const RUN_FILE: &str = "run.json";
pub const SCORE_FILE: &str = "score.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const ADV_DIR: &str = "adv";
pub const ANNOTATION_LOG: &str = "annotations.jsonl";

fn default_zoo_dir() -> PathBuf {
    PathBuf::from("zoo")
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_train() -> Vec<String> {
    vec!["s0".into(), "s1".into(), "s2".into()]
}

fn default_validation() -> Vec<String> {
    vec!["v0".into()]
}

fn default_target() -> String {
    "t0".into()
}

fn default_fid() -> String {
    "fid".into()
}

fn default_lpips() -> String {
    "lpips".into()
}

/// One declarative run: which attack, which models play which role, where
/// the data lives. `attack` holds overrides on top of the method's preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: AttackMethod,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_zoo_dir")]
    pub zoo_dir: PathBuf,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_train")]
    pub train_models: Vec<String>,
    #[serde(default = "default_validation")]
    pub validation_models: Vec<String>,
    #[serde(default = "default_target")]
    pub target_model: String,
    #[serde(default = "default_fid")]
    pub fid_model: String,
    #[serde(default = "default_lpips")]
    pub lpips_model: String,
    #[serde(default)]
    pub attack: toml::Table,
    #[serde(default)]
    pub defense: DefenseConfig,
}

fn format_error(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Format {
        what: what.into(),
        message: e.to_string(),
    }
}

fn merge(base: &mut toml::Table, overrides: &toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl RunConfig {
    pub fn new(method: AttackMethod) -> Self {
        Self {
            method,
            seed: 0,
            zoo_dir: default_zoo_dir(),
            data_dir: default_data_dir(),
            train_models: default_train(),
            validation_models: default_validation(),
            target_model: default_target(),
            fid_model: default_fid(),
            lpips_model: default_lpips(),
            attack: toml::Table::new(),
            defense: DefenseConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| format_error("run config", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| format_error("run config", e))
    }

    /// Method preset with the `attack` overrides applied and the run seed.
    pub fn attack_config(&self) -> Result<AttackConfig> {
        let preset = AttackConfig::preset(self.method);
        let mut table =
            toml::Table::try_from(&preset).map_err(|e| format_error("attack config", e))?;
        merge(&mut table, &self.attack);
        table.insert("seed".into(), toml::Value::Integer(self.seed as i64));
        let cfg: AttackConfig = table
            .try_into()
            .map_err(|e| Error::InvalidConfig(format!("attack overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_models.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one training model is required".into(),
            ));
        }
        if self.method == AttackMethod::EpsSearch && self.validation_models.is_empty() {
            return Err(Error::InvalidConfig(
                "ε-search needs validation models".into(),
            ));
        }
        if self.train_models.contains(&self.target_model)
            || self.validation_models.contains(&self.target_model)
        {
            return Err(Error::InvalidConfig(format!(
                "target model {} must not be used for training or validation",
                self.target_model
            )));
        }
        if self.attack.contains_key("seed") {
            return Err(Error::InvalidConfig(
                "set the seed at the top level, not in [attack]".into(),
            ));
        }
        self.attack_config()?;
        Ok(())
    }
}

/// Content digest of a dataset: ids, labels and stored bytes.
pub fn dataset_digest(batch: &ImageBatch) -> String {
    let mut h = Sha256::new();
    for (id, label) in batch.ids().iter().zip(batch.labels()) {
        h.update(id.as_bytes());
        h.update([0]);
        h.update((*label as u64).to_le_bytes());
    }
    let bytes: Vec<u8> = batch.pixels().iter().map(|&v| to_byte(v)).collect();
    h.update(&bytes);
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct HashedRun<'a> {
    method: AttackMethod,
    seed: u64,
    attack: &'a AttackConfig,
    train_models: &'a [String],
    validation_models: &'a [String],
    target_model: &'a str,
    fid_model: &'a str,
    lpips_model: &'a str,
    defense: &'a DefenseConfig,
    dataset: &'a str,
    zoo: BTreeMap<&'a str, &'a str>,
}

/// SHA-256 of the canonical JSON of everything that determines a run's output.
pub fn config_hash(
    cfg: &RunConfig,
    attack: &AttackConfig,
    dataset: &str,
    zoo: &Zoo,
) -> Result<String> {
    let hashed = HashedRun {
        method: cfg.method,
        seed: cfg.seed,
        attack,
        train_models: &cfg.train_models,
        validation_models: &cfg.validation_models,
        target_model: &cfg.target_model,
        fid_model: &cfg.fid_model,
        lpips_model: &cfg.lpips_model,
        defense: &cfg.defense,
        dataset,
        zoo: zoo
            .entries()
            .iter()
            .map(|e| (e.model_id.as_str(), e.sha256.as_str()))
            .collect(),
    };
    // serde_json objects are key-sorted, so this text is canonical
    let value = serde_json::to_value(&hashed).map_err(|e| format_error("config hash", e))?;
    Ok(hex::encode(Sha256::digest(value.to_string().as_bytes())))
}

/// Metadata written next to the adversarial images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub method: AttackMethod,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub dataset_digest: String,
    pub target_model: String,
    /// Images the target model evaluated while the attack ran; always 0.
    pub target_queries_during_attack: u64,
    pub attack: AttackConfig,
    pub images: Vec<ImageBudget>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub report: ScoreReport,
    pub metadata: RunMetadata,
    pub clean: ImageBatch,
    pub adversarial: ImageBatch,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| format_error("json", e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| format_error(&path.display().to_string(), e))
}

/// Attack the dataset with the training models, store the examples, reload
/// them from disk and score them against the held-out target.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    let attack_cfg = cfg.attack_config().map_err(|e| e.at_stage("config"))?;

    let zoo = Zoo::load(&cfg.zoo_dir).map_err(|e| e.at_stage("load"))?;
    let target = zoo
        .handle(&cfg.target_model)
        .map_err(|e| e.at_stage("load"))?;
    let clean = load_dataset(
        &cfg.data_dir,
        &cfg.data_dir.join(MANIFEST_NAME),
        target.num_classes(),
    )
    .map_err(|e| e.at_stage("load"))?;
    if clean.is_empty() {
        return Err(Error::EmptyBatch.at_stage("load"));
    }
    cfg.defense
        .validate(clean.size())
        .map_err(|e| e.at_stage("config"))?;
    let digest = dataset_digest(&clean);
    let hash = config_hash(cfg, &attack_cfg, &digest, &zoo).map_err(|e| e.at_stage("config"))?;

    let result = run_attack(cfg, &attack_cfg, &zoo, &clean).map_err(|e| e.at_stage("attack"))?;
    let target_queries = target.queries();
    if target_queries != 0 {
        return Err(Error::InvalidConfig(format!(
            "target model was queried {target_queries} times during the attack"
        ))
        .at_stage("attack"));
    }

    let adv_dir = out_dir.join(ADV_DIR);
    let manifest = save_images(&result.adversarial, &adv_dir).map_err(|e| e.at_stage("save"))?;
    let adversarial =
        load_dataset(&adv_dir, &manifest, target.num_classes()).map_err(|e| e.at_stage("save"))?;

    let report = score_submission(
        &clean,
        &adversarial,
        &target,
        &cfg.defense,
        &zoo.fid_extractor(&cfg.fid_model)
            .map_err(|e| e.at_stage("score"))?,
        &zoo.lpips_extractor(&cfg.lpips_model)
            .map_err(|e| e.at_stage("score"))?,
    )
    .map_err(|e| e.at_stage("score"))?;

    let metadata = RunMetadata {
        config_hash: hash,
        method: cfg.method,
        seed: cfg.seed,
        data_dir: cfg.data_dir.clone(),
        dataset_digest: digest,
        target_model: cfg.target_model.clone(),
        target_queries_during_attack: target_queries,
        attack: attack_cfg,
        images: result.budgets(),
    };
    let write = || -> Result<()> {
        write_json(&out_dir.join(RUN_FILE), &metadata)?;
        write_json(&out_dir.join(SCORE_FILE), &report)?;
        let path = out_dir.join(CONFIG_FILE);
        fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
    };
    write().map_err(|e| e.at_stage("report"))?;
    Ok(RunOutcome {
        report,
        metadata,
        clean,
        adversarial,
    })
}

/// Dispatch to the configured attack using only training/validation models.
pub fn run_attack(
    cfg: &RunConfig,
    attack: &AttackConfig,
    zoo: &Zoo,
    clean: &ImageBatch,
) -> Result<AttackResult> {
    let train = zoo.ensemble(&cfg.train_models)?;
    let uniform = |adv: ImageBatch| AttackResult::uniform(adv, attack.epsilon, attack.iterations);
    Ok(match cfg.method {
        AttackMethod::Tdmi => uniform(tdmi_attack(clean, &train, attack)?),
        AttackMethod::EpsSearch => {
            let validation = zoo.ensemble(&cfg.validation_models)?;
            epsilon_search_attack(clean, &train, &validation, attack)?
        }
        AttackMethod::Perceptual => {
            let lpips = zoo.lpips_extractor(&cfg.lpips_model)?;
            uniform(perceptual_attack(clean, &train, &lpips, attack)?)
        }
        AttackMethod::Rdti => uniform(rdti_attack(clean, &train, attack)?),
        AttackMethod::Rotation => uniform(rotation_ensemble_attack(clean, &train, attack)?),
        AttackMethod::Frequency => {
            let adv = frequency_attack(clean, &train, attack)?;
            let linf = clean.linf_distances(&adv);
            let mut r = AttackResult::uniform(adv, 0.0, attack.frequency.steps);
            r.chosen_epsilon = linf;
            r
        }
    })
}

pub fn load_run_metadata(run_dir: &Path) -> Result<RunMetadata> {
    read_json(&run_dir.join(RUN_FILE))
}

pub fn load_score_report(run_dir: &Path) -> Result<ScoreReport> {
    read_json(&run_dir.join(SCORE_FILE))
}

/// Pair shown to annotators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub image_id: String,
    pub clean_url: String,
    pub adv_url: String,
    pub remaining_slots: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageProgress {
    pub image_id: String,
    pub votes: usize,
    pub remaining_slots: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub images: usize,
    pub votes_per_image: usize,
    pub records: usize,
    pub complete_images: usize,
    pub per_image: Vec<ImageProgress>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageKind {
    Clean,
    Adversarial,
}

#[derive(Clone, Debug)]
struct StoredImage {
    id: String,
    clean: PathBuf,
    adv: PathBuf,
    attacked: bool,
}

/// Annotation tasks of one run plus the append-only judgement log
/// `<run>/annotations.jsonl`. Everything reported is recomputed from the
/// logged records.
#[derive(Debug)]
pub struct AnnotationStore {
    log_path: PathBuf,
    images: Vec<StoredImage>,
    asr: Option<f64>,
    records: Mutex<Vec<AnnotationRecord>>,
}

/// Parse a JSON-lines annotation log; blank lines are skipped.
pub fn read_annotation_log(reader: impl BufRead) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| format_error("annotation log", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| format_error(&format!("annotation log line {}", i + 1), e))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

impl AnnotationStore {
    /// Open the store of the run in `run_dir` (as written by [`run_pipeline`]).
    pub fn open(run_dir: &Path) -> Result<Self> {
        let meta = load_run_metadata(run_dir)?;
        let adv_dir = run_dir.join(ADV_DIR);
        let adv_manifest = read_manifest(&adv_dir.join(MANIFEST_NAME))?;
        let clean_manifest: BTreeMap<String, String> =
            read_manifest(&meta.data_dir.join(MANIFEST_NAME))?
                .into_iter()
                .collect();
        let score = load_score_report(run_dir).ok();
        let flags: BTreeMap<String, bool> = score
            .as_ref()
            .map(|s| {
                s.per_image
                    .iter()
                    .map(|p| (p.id.clone(), p.attacked_successfully))
                    .collect()
            })
            .unwrap_or_default();
        let mut images = Vec::new();
        for (id, file) in adv_manifest {
            let clean = clean_manifest
                .get(&id)
                .ok_or_else(|| Error::UnknownImage(id.clone()))?;
            images.push(StoredImage {
                attacked: flags.get(&id).copied().unwrap_or(true),
                clean: meta.data_dir.join(clean),
                adv: adv_dir.join(file),
                id,
            });
        }
        let log_path = run_dir.join(ANNOTATION_LOG);
        let records = match File::open(&log_path) {
            Ok(f) => read_annotation_log(BufReader::new(f))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&log_path, e)),
        };
        Ok(Self {
            log_path,
            images,
            asr: score.map(|s| s.asr),
            records: Mutex::new(records),
        })
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.clone()).collect()
    }

    /// `(id, attacked successfully)` for every task, in manifest order.
    pub fn attack_flags(&self) -> Vec<(String, bool)> {
        self.images
            .iter()
            .map(|i| (i.id.clone(), i.attacked))
            .collect()
    }

    pub fn asr(&self) -> Option<f64> {
        self.asr
    }

    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.records.lock().expect("store lock").clone()
    }

    pub fn image_path(&self, id: &str, kind: ImageKind) -> Result<PathBuf> {
        let img = self
            .images
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::UnknownImage(id.to_string()))?;
        Ok(match kind {
            ImageKind::Clean => img.clean.clone(),
            ImageKind::Adversarial => img.adv.clone(),
        })
    }

    fn votes(records: &[AnnotationRecord]) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut votes: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for r in records {
            votes
                .entry(&r.image_id)
                .or_default()
                .insert(&r.annotator_id);
        }
        votes
    }

    /// First image in manifest order that still has open slots and that
    /// `annotator` has not judged yet.
    pub fn next_task(&self, annotator: &str) -> Option<AnnotationTask> {
        let records = self.records();
        let votes = Self::votes(&records);
        self.images.iter().find_map(|img| {
            let judged = votes.get(img.id.as_str());
            let count = judged.map_or(0, BTreeSet::len);
            let mine = judged.is_some_and(|s| s.contains(annotator));
            (count < VOTES_PER_IMAGE && !mine).then(|| AnnotationTask {
                image_id: img.id.clone(),
                clean_url: format!("/images/{}/clean", img.id),
                adv_url: format!("/images/{}/adv", img.id),
                remaining_slots: VOTES_PER_IMAGE - count,
            })
        })
    }

    /// Validate and append one record. Rejects duplicates, unknown images and
    /// images that already have all their votes.
    pub fn submit(&self, record: AnnotationRecord) -> Result<()> {
        record.validate()?;
        if !self.images.iter().any(|i| i.id == record.image_id) {
            return Err(Error::UnknownImage(record.image_id));
        }
        let mut records = self.records.lock().expect("store lock");
        let votes = Self::votes(&records);
        let judged = votes.get(record.image_id.as_str());
        if judged.is_some_and(|s| s.contains(record.annotator_id.as_str())) {
            return Err(Error::DuplicateAnnotation {
                annotator: record.annotator_id,
                image: record.image_id,
            });
        }
        if judged.map_or(0, BTreeSet::len) >= VOTES_PER_IMAGE {
            return Err(Error::InvalidAnnotation(format!(
                "image {} already has {VOTES_PER_IMAGE} judgements",
                record.image_id
            )));
        }
        let mut line = serde_json::to_string(&record).map_err(|e| format_error("annotation", e))?;
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.log_path)
            .map_err(|e| Error::io(&self.log_path, e))?;
        file.write_all(line.as_bytes())
            .and_then(|_| file.sync_data())
            .map_err(|e| Error::io(&self.log_path, e))?;
        records.push(record);
        Ok(())
    }

    pub fn progress(&self) -> Progress {
        let records = self.records();
        let votes = Self::votes(&records);
        let per_image: Vec<ImageProgress> = self
            .images
            .iter()
            .map(|img| {
                let n = votes.get(img.id.as_str()).map_or(0, BTreeSet::len);
                ImageProgress {
                    image_id: img.id.clone(),
                    votes: n,
                    remaining_slots: VOTES_PER_IMAGE.saturating_sub(n),
                }
            })
            .collect();
        Progress {
            images: per_image.len(),
            votes_per_image: VOTES_PER_IMAGE,
            records: records.len(),
            complete_images: per_image.iter().filter(|p| p.remaining_slots == 0).count(),
            per_image,
        }
    }

    pub fn aggregate(&self) -> Result<SubjectiveReport> {
        aggregate_annotations(
            &self.records(),
            &self.attack_flags(),
            self.asr,
            IncompletePolicy::Exclude,
        )
    }
}

fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    #[derive(Deserialize)]
    struct Row {
        filename: String,
        #[allow(dead_code)]
        label: usize,
        id: String,
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    reader
        .deserialize::<Row>()
        .map(|r| {
            r.map(|r| (r.id, r.filename)).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}
