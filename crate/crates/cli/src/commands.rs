use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use advcomp_core::data::{load_dataset, save_images, AttackMethod, ScoreReport, MANIFEST_NAME};
use advcomp_core::harness::{
    load_score_report, read_annotation_log, run_pipeline, AnnotationStore, RunConfig,
    ANNOTATION_LOG, RUN_FILE,
};
use advcomp_core::scoring::{
    aggregate_annotations, score_submission, IncompletePolicy, SubjectiveReport,
};
use advcomp_core::zoo::{
    correctly_classified_fixture, default_zoo, train_zoo, Classifier, DefenseConfig, Zoo,
    ZooTrainOptions,
};
use anyhow::{Context, Result};
use serde::Serialize;

pub fn train_zoo_command(out: &Path, opts: &ZooTrainOptions, only: &[String]) -> Result<()> {
    let mut members = default_zoo(opts.image_size);
    if !only.is_empty() {
        members.retain(|m| only.iter().any(|o| o == m.id));
        anyhow::ensure!(!members.is_empty(), "no zoo member matches {only:?}");
    }
    train_zoo(out, &members, opts, |s| {
        eprintln!(
            "trained {:<6} loss {:.4}  test accuracy {:.3}",
            s.model_id, s.final_loss, s.test_accuracy
        );
    })?;
    Ok(())
}

/// Run config for `attack`: the file when given, otherwise the method preset.
/// Flags given on the command line win over the file.
pub fn resolve_run_config(
    method: Option<AttackMethod>,
    config: Option<&Path>,
    data: Option<&Path>,
    zoo: Option<&Path>,
) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => RunConfig::new(method.context("either --method or --config is required")?),
    };
    if let Some(m) = method {
        anyhow::ensure!(
            config.is_none() || m == cfg.method,
            "--method {} contradicts the config file ({})",
            m.name(),
            cfg.method.name()
        );
        cfg.method = m;
    }
    if let Some(d) = data {
        cfg.data_dir = d.to_path_buf();
    }
    if let Some(z) = zoo {
        cfg.zoo_dir = z.to_path_buf();
    }
    Ok(cfg)
}

pub fn attack_command(cfg: &RunConfig, out: &Path) -> Result<ScoreReport> {
    let outcome = run_pipeline(cfg, out)?;
    eprintln!(
        "{} on {} images: config {}",
        cfg.method.name(),
        outcome.clean.len(),
        &outcome.metadata.config_hash[..12]
    );
    Ok(outcome.report)
}

pub fn score_command(
    clean: &Path,
    adv: &Path,
    target: &str,
    zoo_dir: &Path,
) -> Result<ScoreReport> {
    let zoo = Zoo::load(zoo_dir)?;
    let model = zoo.handle(target)?;
    let classes = model.num_classes();
    let clean = load_dataset(clean, &clean.join(MANIFEST_NAME), classes)?;
    let adv = load_dataset(adv, &adv.join(MANIFEST_NAME), classes)?;
    Ok(score_submission(
        &clean,
        &adv,
        &model,
        &DefenseConfig::default(),
        &zoo.fid_extractor("fid")?,
        &zoo.lpips_extractor("lpips")?,
    )?)
}

/// Aggregate a judgement log. With a run directory the success flags and
/// ASR come from its score; otherwise every judged image counts as attacked.
pub fn aggregate_command(annotations: &Path, run: Option<&Path>) -> Result<SubjectiveReport> {
    let file =
        File::open(annotations).with_context(|| format!("opening {}", annotations.display()))?;
    let records = read_annotation_log(BufReader::new(file))?;
    let (images, asr) = match run {
        Some(dir) => {
            let store = AnnotationStore::open(dir)?;
            (store.attack_flags(), store.asr())
        }
        None => {
            let mut ids: Vec<String> = Vec::new();
            for r in &records {
                if !ids.contains(&r.image_id) {
                    ids.push(r.image_id.clone());
                }
            }
            (ids.into_iter().map(|id| (id, true)).collect(), None)
        }
    };
    Ok(aggregate_annotations(
        &records,
        &images,
        asr,
        IncompletePolicy::Exclude,
    )?)
}

#[derive(Serialize)]
pub struct RunReport {
    pub machine: ScoreReport,
    pub subjective: Option<SubjectiveReport>,
    pub final_score: Option<f64>,
}

/// Machine score of a run plus its human evaluation when annotations exist.
/// The final score is the quality score once all votes are in.
pub fn report_command(run: &Path) -> Result<RunReport> {
    anyhow::ensure!(
        run.join(RUN_FILE).exists(),
        "{} is not a run directory",
        run.display()
    );
    let machine = load_score_report(run)?;
    let subjective = if run.join(ANNOTATION_LOG).exists() {
        Some(AnnotationStore::open(run)?.aggregate()?)
    } else {
        None
    };
    let final_score = subjective.as_ref().and_then(|s| s.s_quality);
    Ok(RunReport {
        machine,
        subjective,
        final_score,
    })
}

/// Write `n` synthetic images that the target classifies correctly through
/// the default defense.
pub fn make_dataset_command(
    zoo_dir: &Path,
    target: &str,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let zoo = Zoo::load(zoo_dir)?;
    let model = zoo.handle(target)?;
    let size = model.network().input_shape().h;
    let batch = correctly_classified_fixture(&model, &DefenseConfig::default(), n, size, seed)?;
    let manifest = save_images(&batch, out)?;
    eprintln!("wrote {} images to {}", batch.len(), manifest.display());
    Ok(())
}

pub fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}
