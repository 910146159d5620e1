//! One function per subcommand.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use osasc_core::c2ae::{c2ae_decide_all, train_c2ae, write_reconstruction_errors};
use osasc_core::classifier::{train_classifier as fit_classifier, write_logit_records};
use osasc_core::dataio::{generate_synthetic_scene, load_wav, write_wav, ManifestEntry};
use osasc_core::evaluation::evaluate as score;
use osasc_core::features::{fit_standardization, standardize};
use osasc_core::nn::write_log;
use osasc_core::openmax::{fit_openmax as fit_evt, openmax_decide};
use osasc_core::thresholding::threshold_decide;
use osasc_core::{
    DatasetManifest, EvaluationReport, Example, FeaturePipeline, LabelKind, LogitRecord, OpenSetDecision, Outcome,
    SceneLabel, Split, ThresholdPolicy,
};

use crate::config::PipelineConfig;
use crate::workspace::{fingerprint_of, Workspace};
use crate::{Backend, InputError};

fn create_file(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn synthesize(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let s = cfg.synthesis.as_ref().ok_or_else(|| InputError("config has no [synthesis] section".into()))?;
    for known in &cfg.known_classes {
        if !s.classes.iter().any(|c| &c.name == known) {
            return Err(InputError(format!("known class `{known}` has no synthesis recipe")).into());
        }
    }
    let settings = s.settings(cfg.features.sample_rate);
    let root = &cfg.paths.dataset_root;
    let n = s.clips_per_class;
    let n_test = ((s.test_fraction * n as f64).round() as usize).min(n);
    let mut entries = Vec::with_capacity(n * s.classes.len());
    for class in &s.classes {
        if class.name.is_empty() || class.name.contains(['/', '\\', '\t']) || class.name == "unknown" {
            return Err(InputError(format!("class name {:?} is not usable as a directory", class.name)).into());
        }
        fs::create_dir_all(root.join(&class.name))?;
        for i in 0..n {
            let seed = fingerprint_of(&("clip", cfg.seed, &class.name, i));
            let clip = generate_synthetic_scene(class, &settings, seed);
            let rel = PathBuf::from(&class.name).join(format!("{}_{i:04}.wav", class.name));
            write_wav(&root.join(&rel), &clip)?;
            let split = if i >= n - n_test { Split::Test } else { Split::Train };
            entries.push(ManifestEntry { path: rel, label: class.name.clone(), split });
        }
    }
    if let Some(dir) = cfg.paths.manifest.parent() {
        fs::create_dir_all(dir)?;
    }
    DatasetManifest { entries }.save(&cfg.paths.manifest)?;
    log::info!("wrote {} clips and {}", n * s.classes.len(), cfg.paths.manifest.display());
    Ok(())
}

pub fn featurize(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let ws = Workspace::open(cfg)?;
    let pipeline = FeaturePipeline::new(cfg.features.extraction(), cfg.features.sample_rate)?;
    let dir = ws.features_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(&dir)?;
    let mut train = Vec::new();
    for e in &ws.manifest.entries {
        let path = ws.clip_path(&e.path);
        let clip = load_wav(&path).map_err(|err| {
            log::error!("cannot read {}: {err}", path.display());
            err
        });
        let clip = clip.with_context(|| format!("reading {}", path.display()))?;
        let m = pipeline.extract(&clip).with_context(|| format!("featurizing {}", path.display()))?.quantized();
        m.to_container(ws.features_fp).save(&ws.feature_path(&e.id()))?;
        if e.split == Split::Train {
            train.push(m);
        }
    }
    let stats = fit_standardization(&train, cfg.features.std_floor)?;
    stats.save(&ws.stats_path(), ws.features_fp)?;
    log::info!("cached {} feature matrices in {}", ws.manifest.entries.len(), dir.display());
    Ok(())
}

fn check_known_present(ws: &Workspace, examples: &[Example], split: Split) -> anyhow::Result<()> {
    for (c, name) in ws.cfg.known_classes.iter().enumerate() {
        if !examples.iter().any(|e| e.label.kind == LabelKind::Known(c)) {
            return Err(InputError(format!("known class `{name}` has no {split} clips")).into());
        }
    }
    Ok(())
}

pub fn train_classifier(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let ws = Workspace::open(cfg)?;
    let stats = ws.load_stats()?;
    let train = ws.classifier_examples(Split::Train, &stats)?;
    let val = ws.classifier_examples(Split::Validation, &stats)?;
    check_known_present(&ws, &train, Split::Train)?;
    let trained = fit_classifier(&cfg.classifier_config(), &train, &val)?;
    let fp = ws.classifier_fp(&stats);
    let path = ws.checkpoint("classifier.ckpt");
    fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
    trained.classifier.network.to_container(fp)?.save(&path)?;
    write_log(&trained.outcome.log, create_file(&ws.checkpoint("classifier_log.tsv"))?)?;
    log::info!(
        "classifier: best epoch {} (validation loss {:.5}) -> {}",
        trained.outcome.best_epoch,
        trained.outcome.best_val_loss,
        path.display()
    );
    Ok(())
}

pub fn train_autoencoder(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let ws = Workspace::open(cfg)?;
    let stats = ws.load_stats()?;
    let train = ws.examples(Split::Train, &stats, true)?;
    let val = ws.examples(Split::Validation, &stats, true)?;
    check_known_present(&ws, &train, Split::Train)?;
    let (model, outcome) = train_c2ae(&cfg.c2ae_config(), cfg.num_known(), &train, &val)?;
    let path = ws.checkpoint("autoencoder.ckpt");
    fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
    model.network.to_container(ws.autoencoder_fp(&stats))?.save(&path)?;
    write_log(&outcome.log, create_file(&ws.checkpoint("autoencoder_log.tsv"))?)?;
    log::info!(
        "autoencoder: best epoch {} (validation loss {:.5}) -> {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        path.display()
    );
    Ok(())
}

pub fn fit_openmax(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let ws = Workspace::open(cfg)?;
    let stats = ws.load_stats()?;
    let (classifier, cfp) = ws.load_classifier(&stats)?;
    let train = ws.classifier_examples(Split::Train, &stats)?;
    let records = classifier.predict_all(&train)?;
    let model = fit_evt(&records, &cfg.openmax_config(), cfg.regime, cfg.num_known())?;
    let path = ws.checkpoint("openmax.txt");
    model.save(&path, ws.openmax_fp(cfp))?;
    log::info!("openmax: {} class models -> {}", model.classes.len(), path.display());
    Ok(())
}

/// Writes `summary.txt`, `roc.tsv`, `histogram.tsv` and `decisions.tsv`.
fn write_report(
    ws: &Workspace,
    dir: &Path,
    fingerprint: u64,
    report: &EvaluationReport,
    records: &[LogitRecord],
    decisions: &[OpenSetDecision],
) -> anyhow::Result<()> {
    let mut summary = create_file(&dir.join("summary.txt"))?;
    writeln!(summary, "fingerprint: {fingerprint:016x}")?;
    report.write_summary(&ws.cfg.known_classes, &mut summary)?;
    summary.flush()?;
    report.write_roc(create_file(&dir.join("roc.tsv"))?)?;
    report.write_histograms(create_file(&dir.join("histogram.tsv"))?)?;
    let mut d = create_file(&dir.join("decisions.tsv"))?;
    writeln!(d, "id\ttrue\tdecision\tunknownness")?;
    for (r, dec) in records.iter().zip(decisions) {
        let decided = match dec.outcome {
            Outcome::Known(c) => ws.class_name(LabelKind::Known(c)),
            Outcome::Unknown => "unknown".into(),
        };
        writeln!(d, "{}\t{}\t{decided}\t{:e}", r.id, ws.class_name(r.truth), dec.unknownness)?;
    }
    d.flush()?;
    Ok(())
}

/// Reports produced by one `evaluate` run.
#[derive(Debug, Clone)]
pub struct EvaluationRun {
    pub threshold: Vec<(f64, EvaluationReport)>,
    pub openmax: Option<EvaluationReport>,
    pub c2ae: Option<EvaluationReport>,
}

pub fn evaluate(cfg: &PipelineConfig, backend: Backend) -> anyhow::Result<EvaluationRun> {
    let ws = Workspace::open(cfg)?;
    let stats = ws.load_stats()?;
    let (classifier, cfp) = ws.load_classifier(&stats)?;
    let test = ws.examples(Split::Test, &stats, false)?;
    if test.is_empty() {
        return Err(InputError("the manifest has no test clips".into()).into());
    }
    let records = classifier.predict_all(&test)?;
    let truths: Vec<LabelKind> = records.iter().map(|r| r.truth).collect();
    let reports = &cfg.paths.report_dir;
    write_logit_records(&records, create_file(&reports.join("test_logits.tsv"))?)?;
    let k = cfg.num_known();
    let bins = cfg.evaluation.histogram_bins;
    let mut run = EvaluationRun { threshold: Vec::new(), openmax: None, c2ae: None };

    if matches!(backend, Backend::Threshold | Backend::All) {
        let mut sweep = create_file(&reports.join("threshold").join("sweep.tsv"))?;
        writeln!(sweep, "epsilon\tacc_known\tacc_unknown\tacc\tauroc")?;
        for &eps in &cfg.threshold.epsilons {
            let policy = ThresholdPolicy::new(eps, cfg.regime, k)?;
            let decisions =
                records.iter().map(|r| threshold_decide(r, &policy)).collect::<osasc_core::Result<Vec<_>>>()?;
            let report = score("threshold", &decisions, &truths, k, bins)?;
            let dir = reports.join("threshold").join(format!("eps_{eps}"));
            write_report(&ws, &dir, fingerprint_of(&("threshold", cfp, eps)), &report, &records, &decisions)?;
            let s = report.score;
            writeln!(sweep, "{eps}\t{:.4}\t{:.4}\t{:.4}\t{:.6}", s.acc_known, s.acc_unknown, s.acc, report.roc.auc)?;
            run.threshold.push((eps, report));
        }
        sweep.flush()?;
    }

    if matches!(backend, Backend::Openmax | Backend::All) {
        let (model, ofp) = ws.load_openmax(cfp)?;
        let eps = cfg.openmax.epsilon;
        let decisions = records
            .iter()
            .map(|r| openmax_decide(r, &model, eps).map(|o| o.decision))
            .collect::<osasc_core::Result<Vec<_>>>()?;
        let report = score("openmax", &decisions, &truths, k, bins)?;
        write_report(
            &ws,
            &reports.join("openmax"),
            fingerprint_of(&("openmax", ofp, eps)),
            &report,
            &records,
            &decisions,
        )?;
        run.openmax = Some(report);
    }

    if matches!(backend, Backend::C2ae | Backend::All) {
        let (model, afp) = ws.load_autoencoder(&stats)?;
        let c2 = cfg.c2ae_config();
        let features: Vec<_> = test.iter().map(|e| &e.features).collect();
        let outputs = c2ae_decide_all(&records, &features, &model, &c2, cfg.regime)?;
        let decisions: Vec<OpenSetDecision> = outputs.iter().map(|o| o.decision).collect();
        let report = score("c2ae", &decisions, &truths, k, bins)?;
        let dir = reports.join("c2ae");
        let fp = fingerprint_of(&("c2ae", cfp, afp, c2.threshold));
        write_report(&ws, &dir, fp, &report, &records, &decisions)?;
        write_reconstruction_errors(&records, &outputs, create_file(&dir.join("reconstruction_errors.tsv"))?)?;
        run.c2ae = Some(report);
    }
    log::info!("reports written to {}", reports.display());
    Ok(run)
}

/// Prints `path, decision, unknownness` for each clip. The threshold
/// back-end uses the first configured epsilon.
pub fn infer<W: Write>(cfg: &PipelineConfig, backend: Backend, clips: &[PathBuf], mut out: W) -> anyhow::Result<()> {
    if backend == Backend::All {
        return Err(InputError("infer needs a single back-end".into()).into());
    }
    let ws = Workspace::open(cfg)?;
    let stats = ws.load_stats()?;
    let (classifier, cfp) = ws.load_classifier(&stats)?;
    let pipeline = FeaturePipeline::new(cfg.features.extraction(), cfg.features.sample_rate)?;
    let mut examples = Vec::with_capacity(clips.len());
    for path in clips {
        let clip = load_wav(path).with_context(|| format!("reading {}", path.display()))?;
        let features = standardize(&pipeline.extract(&clip)?.quantized(), &stats)?;
        let label = SceneLabel { name: String::new(), kind: LabelKind::Unknown };
        examples.push(Example { id: path.display().to_string(), features, label });
    }
    let records = classifier.predict_all(&examples)?;
    let decisions: Vec<OpenSetDecision> = match backend {
        Backend::Threshold => {
            let policy = ThresholdPolicy::new(cfg.threshold.epsilons[0], cfg.regime, cfg.num_known())?;
            records.iter().map(|r| threshold_decide(r, &policy)).collect::<osasc_core::Result<_>>()?
        }
        Backend::Openmax => {
            let (model, _) = ws.load_openmax(cfp)?;
            records
                .iter()
                .map(|r| openmax_decide(r, &model, cfg.openmax.epsilon).map(|o| o.decision))
                .collect::<osasc_core::Result<_>>()?
        }
        Backend::C2ae => {
            let (model, _) = ws.load_autoencoder(&stats)?;
            let features: Vec<_> = examples.iter().map(|e| &e.features).collect();
            c2ae_decide_all(&records, &features, &model, &cfg.c2ae_config(), cfg.regime)?
                .into_iter()
                .map(|o| o.decision)
                .collect()
        }
        Backend::All => unreachable!("rejected above"),
    };
    for (r, d) in records.iter().zip(&decisions) {
        let label = match d.outcome {
            Outcome::Known(c) => ws.class_name(LabelKind::Known(c)),
            Outcome::Unknown => "unknown".into(),
        };
        writeln!(out, "{}\t{label}\t{:.6}", r.id, d.unknownness)?;
    }
    Ok(())
}
