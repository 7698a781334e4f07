use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use bleedseg_core::data::{
    generate_phantom, read_labels_vvol, read_vvol, write_labels_vvol, write_vvol, Manifest, ManifestEntry,
    PhantomSpec, Split,
};
use bleedseg_core::gradcheck::{run_suite, GradCheckOptions};
use bleedseg_core::metrics::{Evaluator, ReportFormat};
use bleedseg_core::optim::{grid_search, write_grid_csv, GridCell, GridSpec};
use bleedseg_core::preprocess::Pipeline;
use bleedseg_core::rng::derive_seed;
use bleedseg_core::train::{predict_volume, LossLog, Trainer};
use bleedseg_core::unet::{checkpoint_dtype, load_checkpoint, Model, ModelConfig};
use bleedseg_core::{DType, Error, LabelVolume, Result, Scalar, Volume};
use log::info;

use crate::run::{load_pair, read_json, RunConfig};

const SPACING: [f32; 3] = [1.0; 3];

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn gen_data(spec: Option<&Path>, out: &Path, count: usize, seed: u64, extents: [usize; 3]) -> Result<()> {
    let spec: PhantomSpec = match spec {
        Some(p) => read_json(p, "phantom spec")?,
        None => PhantomSpec::desk(extents, seed),
    };
    spec.validate()?;
    create_dir(out)?;
    let mut manifest = Manifest::new(spec.class_names());
    for i in 0..count {
        let (image, labels) = generate_phantom(&spec.with_seed(derive_seed(seed, i as u64)))?;
        let entry = ManifestEntry {
            image: format!("case_{i:03}_image.vvol").into(),
            label: Some(format!("case_{i:03}_label.vvol").into()),
            split: Manifest::standard_split(i, count),
        };
        write_vvol(out.join(&entry.image), &image, SPACING)?;
        write_labels_vvol(out.join(entry.label.as_ref().expect("set above")), &labels, SPACING)?;
        manifest.entries.push(entry);
    }
    manifest.save(out.join("manifest.json"))?;
    info!("wrote {count} phantoms to {}", out.display());
    Ok(())
}

pub fn preprocess(pipeline: &Path, in_manifest: &Path, out: &Path) -> Result<()> {
    let pipeline: Pipeline = read_json(pipeline, "pipeline")?;
    let (manifest, base) = Manifest::load(in_manifest)?;
    create_dir(out)?;
    let mut processed = Manifest {
        entries: Vec::new(),
        ..manifest.clone()
    };
    for (i, e) in manifest.entries.iter().enumerate() {
        let (image, spacing) = read_vvol(base.join(&e.image))?;
        let labels = match &e.label {
            Some(l) => Some(read_labels_vvol(base.join(l))?),
            None => None,
        };
        let (image, labels_out) = pipeline.apply(&image, labels.as_ref().map(|l| &l.0), i as u64)?;
        let name = |p: &Path| -> Result<PathBuf> {
            p.file_name()
                .map(PathBuf::from)
                .ok_or_else(|| Error::Config(format!("{} has no file name", p.display())))
        };
        let entry = ManifestEntry {
            image: name(&e.image)?,
            label: e.label.as_deref().map(name).transpose()?,
            split: e.split,
        };
        write_vvol(out.join(&entry.image), &image, spacing)?;
        if let (Some(l), Some(path), Some((_, sp))) = (labels_out, &entry.label, labels) {
            write_labels_vvol(out.join(path), &l, sp)?;
        }
        processed.entries.push(entry);
    }
    processed.save(out.join("manifest.json"))?;
    info!("preprocessed {} volumes into {}", processed.entries.len(), out.display());
    Ok(())
}

pub fn train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let run = RunConfig::load(config)?;
    match run.train.model.dtype {
        DType::F32 => train_typed::<f32>(&run, resume),
        DType::F64 => train_typed::<f64>(&run, resume),
    }
}

fn train_typed<T: Scalar>(run: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let (_, volumes) = run.load_split::<T>(Split::Train)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(run.train.clone(), load_checkpoint::<T>(p)?, volumes)?,
        None => Trainer::new(run.train.clone(), volumes)?,
    };
    if let Some(dir) = run.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut log = LossLog::open(&run.loss_csv, trainer.step())?;
    info!("training from step {} to {}", trainer.step(), run.train.steps);
    let every = run.train.checkpoint_every;
    trainer.run(|t, step, loss| {
        log.record(step, loss)?;
        if step % 50 == 0 {
            info!("step {step} loss {loss:.5}");
        }
        if every > 0 && step % every == 0 {
            t.save_checkpoint(&run.checkpoint)?;
        }
        Ok(())
    })?;
    trainer.save_checkpoint(&run.checkpoint)?;
    info!("saved checkpoint at step {} to {}", trainer.step(), run.checkpoint.display());
    Ok(())
}

/// Largest valid tile per axis not exceeding the requested one.
fn fit_tile(model: &ModelConfig, tile: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for (a, &t) in tile.iter().enumerate() {
        out[a] = model
            .largest_valid_at_most(t)
            .ok_or_else(|| Error::Tiling(format!("no valid tile extent up to {t}")))?
            .0;
    }
    Ok(out)
}

fn cell_objective<T: Scalar>(run: &RunConfig, cell: &GridCell, budget: usize) -> Result<f64> {
    let mut cfg = run.train.clone();
    cfg.model.conv_kernel = cell.conv_kernel;
    cfg.model.pool_kernel = cell.pool_kernel;
    cfg.model.dropout_p = cell.dropout;
    cfg.optimizer = cfg.optimizer.with_lr(cell.lr);
    cfg.tile = fit_tile(&cfg.model, cfg.tile)?;
    cfg.steps = budget as u64;
    let (manifest, train) = run.load_split::<T>(Split::Train)?;
    let (_, val) = run.load_split::<T>(Split::Val)?;
    if val.is_empty() {
        return Err(Error::Config("grid search needs a validation split".into()));
    }
    let mut trainer = Trainer::new(cfg.clone(), train)?;
    trainer.run(|_, _, _| Ok(()))?;
    let mut eval = Evaluator::new(manifest.num_classes);
    for (image, labels) in &val {
        let p = predict_volume(trainer.model(), image, cfg.tile)?;
        eval.add::<T>(&p.labels, labels, None)?;
    }
    Ok(eval.report(&manifest.class_names)?.mean_iou.unwrap_or(0.0))
}

pub fn gridsearch(grid: &Path, config: &Path) -> Result<()> {
    let spec: GridSpec = read_json(grid, "grid")?;
    let run = RunConfig::load(config)?;
    let budget = run.train.steps as usize;
    info!("grid search over {} cells, {budget} steps each", spec.len());
    let result = grid_search(&spec, budget, |cell, budget| match run.train.model.dtype {
        DType::F32 => cell_objective::<f32>(&run, cell, budget),
        DType::F64 => cell_objective::<f64>(&run, cell, budget),
    })?;
    let out = run
        .grid_csv
        .clone()
        .unwrap_or_else(|| config.with_file_name("grid.csv"));
    write_grid_csv(&result, &out)?;
    if let Some(best) = result.best() {
        info!("best cell {:?} with mean IoU {:?}", best.cell, best.metric);
    }
    Ok(())
}

fn default_tile(model: &ModelConfig) -> Result<[usize; 3]> {
    model
        .largest_valid_at_most(96)
        .or_else(|| model.smallest_input_covering(1))
        .map(|(t, _)| [t; 3])
        .ok_or_else(|| Error::Tiling("the model admits no valid tile".into()))
}

fn stem(path: &Path) -> String {
    let s = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    s.strip_suffix("_image").map(str::to_string).unwrap_or(s)
}

fn predict_one<T: Scalar>(model: &Model<T>, image: &Volume<f32>, tile: [usize; 3], out: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let p = predict_volume(model, &image.cast::<T>(), tile)?;
    let probs = PathBuf::from(format!("{stem}_probs.vvol"));
    let labels = PathBuf::from(format!("{stem}_pred.vvol"));
    write_vvol(out.join(&probs), &p.probs.cast::<f32>(), SPACING)?;
    write_labels_vvol(out.join(&labels), &p.labels, SPACING)?;
    Ok((probs, labels))
}

pub fn predict(checkpoint: &Path, input: &Path, out: &Path, tile: Option<[usize; 3]>) -> Result<()> {
    match checkpoint_dtype(checkpoint)? {
        DType::F32 => predict_typed::<f32>(checkpoint, input, out, tile),
        DType::F64 => predict_typed::<f64>(checkpoint, input, out, tile),
    }
}

fn predict_typed<T: Scalar>(checkpoint: &Path, input: &Path, out: &Path, tile: Option<[usize; 3]>) -> Result<()> {
    let model = load_checkpoint::<T>(checkpoint)?.model;
    let tile = match tile {
        Some(t) => t,
        None => default_tile(model.config())?,
    };
    model.config().check_tile(tile)?;
    create_dir(out)?;
    if input.extension().is_some_and(|e| e == "json") {
        let (manifest, base) = Manifest::load(input)?;
        let mut preds = Manifest {
            entries: Vec::new(),
            ..manifest.clone()
        };
        for e in &manifest.entries {
            let (image, _) = read_vvol(base.join(&e.image))?;
            let (probs, labels) = predict_one(&model, &image, tile, out, &stem(&e.image))?;
            preds.entries.push(ManifestEntry {
                image: probs,
                label: Some(labels),
                split: e.split,
            });
        }
        preds.save(out.join("predictions.json"))?;
        info!("predicted {} volumes into {}", preds.entries.len(), out.display());
    } else {
        let (image, _) = read_vvol(input)?;
        predict_one(&model, &image, tile, out, &stem(input))?;
    }
    Ok(())
}

pub fn eval(pred_manifest: &Path, truth_manifest: &Path, report: &Path, decimals: usize) -> Result<()> {
    let (pred, pbase) = Manifest::load(pred_manifest)?;
    let (truth, tbase) = Manifest::load(truth_manifest)?;
    if pred.entries.len() != truth.entries.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} ground-truth volumes",
            pred.entries.len(),
            truth.entries.len()
        )));
    }
    let classes = truth.num_classes;
    let mut evaluator = Evaluator::new(classes);
    for (p, t) in pred.entries.iter().zip(&truth.entries) {
        let missing = |e: &ManifestEntry| Error::Config(format!("{} has no label volume", e.image.display()));
        let (_, truth_labels) = load_pair(&tbase, t)?;
        let truth_labels: LabelVolume = truth_labels.ok_or_else(|| missing(t))?;
        let (scores, pred_labels) = load_pair(&pbase, p)?;
        let pred_labels = pred_labels.ok_or_else(|| missing(p))?;
        let probs = (scores.channels() == classes && scores.extents() == truth_labels.extents()).then_some(&scores);
        evaluator.add(&pred_labels, &truth_labels, probs)?;
    }
    let r = evaluator.report(&truth.class_names)?;
    r.write(report, ReportFormat::from_path(report), decimals)?;
    info!("mAP {:?}, mean IoU {:?} over {} voxels", r.map, r.mean_iou, r.voxels);
    Ok(())
}

pub fn gradcheck(config: Option<&Path>, samples: Option<usize>) -> Result<()> {
    let mut opts: GradCheckOptions = match config {
        Some(p) => read_json(p, "gradcheck options")?,
        None => GradCheckOptions::default(),
    };
    if let Some(n) = samples {
        opts.network_samples = n;
    }
    let report = run_suite(&opts)?;
    println!("check,seeds,max_rel_error,tolerance,status");
    for (name, seeds, worst, tol, ok) in report.summary() {
        println!("{name},{seeds},{worst:.3e},{tol:e},{}", if ok { "PASS" } else { "FAIL" });
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numerical("gradient check exceeded its tolerance".into()))
    }
}

pub fn shapes(
    config: Option<&Path>,
    depth: Option<usize>,
    conv_kernel: Option<usize>,
    pool_kernel: Option<usize>,
    range: RangeInclusive<usize>,
) -> Result<()> {
    let mut model: ModelConfig = match config {
        Some(p) => read_json(p, "model config")?,
        None => ModelConfig::canonical(),
    };
    model.depth = depth.unwrap_or(model.depth);
    model.conv_kernel = conv_kernel.unwrap_or(model.conv_kernel);
    model.pool_kernel = pool_kernel.unwrap_or(model.pool_kernel);
    model.validate()?;
    println!("input,output");
    for (i, o) in model.valid_tile_shapes(range) {
        println!("{i},{o}");
    }
    Ok(())
}
