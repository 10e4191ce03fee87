use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use pecnn::config::RunConfig;
use pecnn::dicom::{assemble_series, parse_dicom_slice_with_diagnostics, SliceRecord};
use pecnn::manifest::{DatasetManifest, Group};
use pecnn::metrics::{confusion, roc_auc};
use pecnn::nifti::write_nifti_file;
use pecnn::nn::{read_checkpoint_file, write_checkpoint_file, Model};
use pecnn::phantom::{generate_dataset, DatasetSpec};
use pecnn::trainer::{evaluate_test, history_table, load_cases, make_folds, summarize, train_fold};
use pecnn::{Error, Result};

use crate::report::{Evaluation, Row, EVALUATION_FILE};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance line written at the top of every output table.
fn stamp(cfg: &RunConfig) -> String {
    format!("pecnn {VERSION} config {}", cfg.hash())
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::read(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn convert(dicom_dir: &Path, out: &Path) -> Result<()> {
    let entries = fs::read_dir(dicom_dir)
        .map_err(|e| Error::io(format!("reading {}", dicom_dir.display()), e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::io(format!("reading {}", dicom_dir.display()), e))?
            .path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Format(format!(
            "no slices found in {}",
            dicom_dir.display()
        )));
    }

    let mut slices: Vec<(PathBuf, SliceRecord)> = Vec::with_capacity(files.len());
    let mut failures = 0;
    for path in files {
        let bytes =
            fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        match parse_dicom_slice_with_diagnostics(&bytes) {
            Ok((record, diagnostics)) => {
                for d in diagnostics {
                    warn!("{}: {d:?}", path.display());
                }
                slices.push((path, record));
            }
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(Error::Format(format!(
            "{failures} of {} files in {} failed to parse",
            failures + slices.len(),
            dicom_dir.display()
        )));
    }
    let (first_path, first) = &slices[0];
    if let Some((path, s)) = slices
        .iter()
        .find(|(_, s)| (s.rows, s.cols) != (first.rows, first.cols))
    {
        return Err(Error::Consistency(format!(
            "{} is {}x{} but {} is {}x{}",
            path.display(),
            s.rows,
            s.cols,
            first_path.display(),
            first.rows,
            first.cols
        )));
    }
    let records: Vec<SliceRecord> = slices.into_iter().map(|(_, s)| s).collect();
    let vol = assemble_series(&records)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    write_nifti_file(&vol, out)?;
    info!("wrote {} ({:?})", out.display(), vol.dims());
    Ok(())
}

pub fn preprocess(cfg: &RunConfig, workers: usize) -> Result<()> {
    let window = cfg.checked_window()?;
    let manifest = DatasetManifest::read(&cfg.manifest)?;
    let data = load_cases(
        &manifest,
        &[Group::TrainVal, Group::Test],
        window,
        cfg.input_dims,
        workers,
    )?;
    let out_dir = &cfg.preprocessed;
    for (case, vol) in manifest.cases.iter().zip(&data.volumes) {
        let vol = vol.as_ref().expect("every group was loaded");
        let path = out_dir.join(&case.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
        write_nifti_file(vol, &path)?;
    }
    let out = DatasetManifest::new(out_dir, manifest.cases.clone())?;
    out.write(&out_dir.join("manifest.tsv"))?;
    info!(
        "preprocessed {} cases with window {window} into {}",
        out.cases.len(),
        out_dir.display()
    );
    Ok(())
}

fn parse_dims(text: &str) -> Result<[usize; 3]> {
    let bad = || Error::Argument(format!("dims must look like 64x64x32, got {text:?}"));
    let parts: Vec<usize> = text
        .split('x')
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|_| bad())
}

#[allow(clippy::too_many_arguments)]
pub fn phantom(
    n_pos: usize,
    n_neg: usize,
    seed: u64,
    out: &Path,
    test: usize,
    dims: &str,
    lesions: usize,
    workers: usize,
) -> Result<()> {
    let spec = DatasetSpec {
        n_test: test,
        dims: parse_dims(dims)?,
        n_lesions: lesions,
        ..DatasetSpec::new(n_pos, n_neg, seed)
    };
    let manifest = generate_dataset(&spec, out, workers)?;
    info!(
        "wrote {} phantoms and {}",
        manifest.cases.len(),
        out.join("manifest.tsv").display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, workers: usize) -> Result<()> {
    let tc = cfg.train_config()?;
    let manifest = DatasetManifest::read(&cfg.manifest)?;
    let plan = make_folds(&manifest, tc.k_folds, tc.seeds.folds)?;
    let data = load_cases(
        &manifest,
        &[Group::TrainVal],
        tc.window,
        tc.model.input_dims,
        workers,
    )?;
    let out = &cfg.output;
    write_file(
        &out.join("run.txt"),
        format!("# {}\n{}", stamp(cfg), cfg.to_text()),
    )?;

    let mut folds = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let result = train_fold(&data, &plan, fold, &tc)?;
        write_checkpoint_file(
            &out.join(format!("fold{fold}.ckpt")),
            &result.model,
            Some(&result.optimizer),
        )?;
        write_file(
            &out.join(format!("fold{fold}.history.tsv")),
            history_table(&result.history),
        )?;
        info!(
            "fold {fold}: best epoch {} val acc {:.3} loss {:.4}",
            result.best.epoch, result.best.val_acc, result.best.val_loss
        );
        folds.push(result);
    }
    let summary = summarize(folds);
    let auc = |a: Option<f64>| a.map_or_else(|| "NA".into(), |v| format!("{v:.4}"));
    let mut table = format!(
        "# {}\nfold\tbest_epoch\tval_loss\tval_acc\tval_auc\n",
        stamp(cfg)
    );
    for f in &summary.folds {
        writeln!(
            table,
            "{}\t{}\t{:.6}\t{:.4}\t{}",
            f.fold,
            f.best.epoch,
            f.best.val_loss,
            f.best.val_acc,
            auc(f.best.val_auc)
        )
        .expect("write to string");
    }
    writeln!(
        table,
        "mean\t-\t{:.6}\t{:.4}\t{}",
        summary.mean_val_loss,
        summary.mean_val_acc,
        auc(summary.mean_val_auc)
    )
    .expect("write to string");
    write_file(&out.join("cv.tsv"), &table)?;
    print!(
        "{}",
        table.lines().skip(1).collect::<Vec<_>>().join("\n") + "\n"
    );
    Ok(())
}

/// `fold<k>.ckpt` files under `dir`, ordered by fold.
fn fold_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?
            .path();
        let fold = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("fold")?.strip_suffix(".ckpt")?.parse().ok());
        if let Some(fold) = fold {
            found.push((fold, path));
        }
    }
    if found.is_empty() {
        return Err(Error::Format(format!(
            "no fold checkpoints in {}",
            dir.display()
        )));
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

pub fn evaluate(cfg: &RunConfig, checkpoint: Option<&Path>, workers: usize) -> Result<()> {
    let window = cfg.checked_window()?;
    let model_config = cfg.model_config();
    let manifest = DatasetManifest::read(&cfg.manifest)?;
    let data = load_cases(
        &manifest,
        &[Group::Test],
        window,
        model_config.input_dims,
        workers,
    )?;
    let paths = match checkpoint {
        Some(p) => vec![p.to_path_buf()],
        None => fold_checkpoints(&cfg.output)?,
    };

    let mut rows = Vec::with_capacity(paths.len() + 2);
    let mut ensemble: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        let (model, _): (Model<f32>, _) = read_checkpoint_file(path)?.restore(&model_config)?;
        let (scores, l) = evaluate_test(&model, &manifest, &data, cfg.batch)?;
        let cm = confusion(&scores, &l, 0.5)?;
        let auc = roc_auc(&scores, &l).ok().map(|r| r.auc);
        rows.push(Row::from_matrix(&format!("fold{i}"), cm, auc));
        if ensemble.is_empty() {
            ensemble = vec![0.0; scores.len()];
        }
        for (e, s) in ensemble.iter_mut().zip(&scores) {
            *e += s / paths.len() as f64;
        }
        labels = l;
    }
    let mean = Row::mean("mean", &rows);
    let cm = confusion(&ensemble, &labels, 0.5)?;
    let roc = roc_auc(&ensemble, &labels).ok();
    let ens = Row::from_matrix("ensemble", cm, roc.as_ref().map(|r| r.auc));
    rows.push(mean);
    rows.push(ens);

    let eval = Evaluation { window, rows };
    let text = eval.to_text(&stamp(cfg));
    write_file(&cfg.output.join(EVALUATION_FILE), &text)?;
    if let Some(roc) = roc {
        write_file(&cfg.output.join("roc.tsv"), roc.to_text())?;
    }
    print!(
        "{}",
        text.lines().skip(1).collect::<Vec<_>>().join("\n") + "\n"
    );
    Ok(())
}
