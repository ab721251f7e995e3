//! End-to-end steps behind the command-line tool: synthetic data export,
//! training runs, split evaluation and explanation rendering.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::loader::load_image;
use crate::data::pnm::quantize;
use crate::data::{
    balance_dataset, load_dataset_dir, stratified_split, synthetic_images, write_manifest, Dataset,
    ManifestRecord, PnmImage, Split, SYNTHETIC_CLASSES,
};
use crate::error::{param_err, Error, Result};
use crate::metrics::{roc_curve_ovr, roc_to_csv, EvaluationReport};
use crate::model::{Branch, FusionModel};
use crate::train::{
    fit_with_early_stopping, load_checkpoint, predict_probabilities, save_checkpoint, Checkpoint, TrainLog,
};
use crate::xai::{grad_cam, integrated_gradients, render_overlay, upsample_heatmap, AttributionMap};

const CONFIG_META_PREFIX: &str = "config.";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

/// Writes `per_class` synthetic PGM images per class under
/// `out/<class>/` plus `out/manifest.csv`. Returns the number of images.
pub fn export_synthetic(out: &Path, per_class: usize, size: usize, noise: f64, seed: u64) -> Result<usize> {
    if per_class == 0 {
        return Err(param_err!("per-class must be positive"));
    }
    if size == 0 {
        return Err(param_err!("size must be positive"));
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(param_err!("noise must be a finite non-negative number"));
    }
    create_dir(out)?;
    let mut records = Vec::new();
    for (i, (label, img)) in synthetic_images(per_class, size, noise, seed).into_iter().enumerate() {
        let class = SYNTHETIC_CLASSES[label];
        let dir = out.join(class);
        if i % per_class == 0 {
            create_dir(&dir)?;
        }
        let name = format!("{class}_{:05}.pgm", i % per_class);
        let bytes = img.pixels().iter().map(|&v| quantize(v)).collect();
        PnmImage::gray(size, size, bytes).write(&dir.join(&name))?;
        records.push(ManifestRecord {
            path: format!("{class}/{name}"),
            class: class.to_string(),
            split: "unassigned".to_string(),
        });
    }
    write_manifest(&out.join("manifest.csv"), &records)?;
    Ok(records.len())
}

/// Loads a class-per-directory tree, balances it and splits it, all driven
/// by the config's data options and seed.
pub fn prepare_dataset(root: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let raw = load_dataset_dir(root, cfg.load_options())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let balanced = balance_dataset(raw, &mut rng)?;
    let mut d = stratified_split(balanced, cfg.fractions(), &mut rng)?;
    d.seed = cfg.data_seed;
    Ok(d)
}

pub fn split_manifest(d: &Dataset) -> Vec<ManifestRecord> {
    let mut split_of = vec![""; d.samples.len()];
    for (split, idx) in &d.splits {
        for &i in idx {
            split_of[i] = split.name();
        }
    }
    d.samples
        .iter()
        .zip(split_of)
        .map(|(s, split)| ManifestRecord {
            path: s.source_id.clone(),
            class: d.class_names[s.label].clone(),
            split: split.to_string(),
        })
        .collect()
}

/// Evaluation-mode report for one split.
pub fn evaluate_split(
    model: &FusionModel,
    d: &Dataset,
    split: Split,
    batch_size: usize,
) -> Result<(EvaluationReport, Vec<Vec<f64>>, Vec<usize>)> {
    let samples = d.split_samples(split)?;
    if samples.is_empty() {
        return Err(crate::error::validation_err!("{split} split is empty"));
    }
    let scores = predict_probabilities(model, &samples, batch_size)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let report = EvaluationReport::from_scores(split.name(), model.class_names(), &truth, &scores)?;
    Ok((report, scores, truth))
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub best_val_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub test_macro_f1: f64,
    pub test_auc: Vec<Option<f64>>,
    pub split_sizes: BTreeMap<String, usize>,
    pub class_names: Vec<String>,
    pub data_seed: u64,
    pub model_seed: u64,
    pub train_seed: u64,
    pub config: BTreeMap<String, String>,
}

pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log_csv: PathBuf,
    pub summary_json: PathBuf,
    pub split_manifest: PathBuf,
}

impl TrainOutputs {
    /// Log, summary and manifest paths derived from the checkpoint path.
    pub fn beside(checkpoint: &Path, log_csv: Option<PathBuf>) -> Self {
        let with = |suffix: &str| {
            let mut s = checkpoint.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self {
            checkpoint: checkpoint.to_path_buf(),
            log_csv: log_csv.unwrap_or_else(|| with(".log.csv")),
            summary_json: with(".summary.json"),
            split_manifest: with(".split.csv"),
        }
    }
}

/// Balance, split, fit with early stopping, score the test split and write
/// every artifact.
pub fn train_run(data: &Path, cfg: &RunConfig, out: &TrainOutputs) -> Result<(RunSummary, TrainLog)> {
    cfg.validate()?;
    let d = prepare_dataset(data, cfg)?;
    let mut model = FusionModel::build(cfg.model_spec(d.class_names.clone()))?;
    for prefix in cfg.freeze_prefixes() {
        let hits = model.set_trainable_mask(|n| n.starts_with(prefix), false);
        log::info!("froze {hits} parameter tensors matching `{prefix}`");
    }
    let sizes: BTreeMap<String, usize> =
        d.splits.iter().map(|(s, v)| (s.name().to_string(), v.len())).collect();
    log::info!("dataset: {} classes, split sizes {sizes:?}", d.num_classes());

    let tc = cfg.train_config();
    let fit = fit_with_early_stopping(&mut model, &d, &tc)?;
    let (report, _, _) = evaluate_split(&model, &d, Split::Test, tc.batch_size)?;

    let config: BTreeMap<String, String> =
        cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    save_checkpoint(&model, &fit.adam, &fit.log, &config_meta(cfg), &out.checkpoint)?;
    fs::write(&out.log_csv, fit.log.to_csv())?;
    write_manifest(&out.split_manifest, &split_manifest(&d))?;

    let best = fit.log.best();
    let summary = RunSummary {
        epochs_run: fit.log.epochs.len(),
        best_epoch: fit.log.best_epoch,
        best_val_loss: best.map(|e| e.val_loss),
        best_val_accuracy: best.map(|e| e.val_acc),
        test_accuracy: report.report.accuracy,
        test_macro_f1: report.report.macro_f1,
        test_auc: report.auc.clone(),
        split_sizes: sizes,
        class_names: d.class_names.clone(),
        data_seed: cfg.data_seed,
        model_seed: cfg.model_seed,
        train_seed: cfg.train_seed,
        config,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&out.summary_json, json + "\n")?;
    Ok((summary, fit.log))
}

/// Checkpoint metadata that records `cfg`, read back by [`checkpoint_config`].
pub fn config_meta(cfg: &RunConfig) -> BTreeMap<String, String> {
    cfg.entries().into_iter().map(|(k, v)| (format!("{CONFIG_META_PREFIX}{k}"), v)).collect()
}

/// Rebuilds the run configuration stored in a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut found = 0;
    for (k, v) in &ck.meta {
        if let Some(key) = k.strip_prefix(CONFIG_META_PREFIX) {
            cfg.set(key, v).map_err(|e| Error::Format(format!("checkpoint configuration: {e}")))?;
            found += 1;
        }
    }
    if found == 0 {
        return Err(Error::Format("checkpoint carries no run configuration".into()));
    }
    Ok(cfg)
}

/// Recomputes the checkpoint's data split and writes `report.txt`,
/// `report.json` and one `roc_<class>.csv` per class into `out_dir`.
pub fn eval_run(checkpoint: &Path, data: &Path, split: Split, out_dir: &Path) -> Result<EvaluationReport> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(&ck)?;
    let d = prepare_dataset(data, &cfg)?;
    if d.class_names != ck.model.class_names() {
        return Err(Error::Format(format!(
            "checkpoint classes {:?} do not match data classes {:?}",
            ck.model.class_names(),
            d.class_names
        )));
    }
    let (report, scores, truth) = evaluate_split(&ck.model, &d, split, cfg.batch_size)?;
    create_dir(out_dir)?;
    fs::write(out_dir.join("report.txt"), report.to_text())?;
    fs::write(out_dir.join("report.json"), report.to_json() + "\n")?;
    for (k, name) in d.class_names.iter().enumerate() {
        match roc_curve_ovr(&truth, &scores, k) {
            Ok(points) => fs::write(out_dir.join(format!("roc_{name}.csv")), roc_to_csv(&points))?,
            Err(e) => log::warn!("no ROC curve for class {name}: {e}"),
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExplainMethod {
    GradCam,
    IntegratedGradients,
    Both,
}

pub struct Explanation {
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    pub target: usize,
    pub written: Vec<PathBuf>,
}

/// Predicts one image and renders the requested attributions into
/// `out_dir`. `class = None` explains the predicted class. Grad-CAM is
/// produced for every branch in `branches`.
pub fn explain_run(
    checkpoint: &Path,
    image: &Path,
    class: Option<usize>,
    method: ExplainMethod,
    branches: &[Branch],
    out_dir: &Path,
) -> Result<Explanation> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(&ck)?;
    let model = &ck.model;
    if let Some(c) = class {
        if c >= model.num_classes() {
            return Err(param_err!(
                "class {c} out of range: the model has {} classes (0..={})",
                model.num_classes(),
                model.num_classes() - 1
            ));
        }
    }
    let x = load_image(image, cfg.load_options())?;
    let (predicted, probabilities) = model.predict(&x)?;
    let target = class.unwrap_or(predicted);
    create_dir(out_dir)?;

    let mut maps: Vec<(String, AttributionMap)> = Vec::new();
    if matches!(method, ExplainMethod::GradCam | ExplainMethod::Both) {
        for &b in branches {
            if model.backbone(b).is_some() {
                maps.push((format!("gradcam_{b}"), grad_cam(model, &x, target, b)?));
            }
        }
    }
    if matches!(method, ExplainMethod::IntegratedGradients | ExplainMethod::Both) {
        maps.push(("ig".to_string(), integrated_gradients(model, &x, target, &cfg.ig_config())?));
    }
    let (_, size) = model.input_spec();
    let mut written = Vec::new();
    for (stem, map) in &maps {
        let display = match map.method {
            crate::xai::Method::IntegratedGradients => {
                // magnitude of attribution, since display maps are unsigned
                let mut m = map.clone();
                m.values.pixels_mut().iter_mut().for_each(|v| *v = v.abs());
                upsample_heatmap(&m, size, size)?
            }
            crate::xai::Method::GradCam => upsample_heatmap(map, size, size)?,
        };
        let overlay = out_dir.join(format!("{stem}.ppm"));
        render_overlay(&x, &display.values, cfg.overlay_alpha)?.write(&overlay)?;
        let raw = out_dir.join(format!("{stem}.vol"));
        map.write_raw(&raw)?;
        written.push(overlay);
        written.push(raw);
    }
    Ok(Explanation { predicted, probabilities, target, written })
}
