//! Stratified k-fold cross-validation and the training loop.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Group, Label};
use crate::metrics::{confusion, roc_auc};
use crate::nifti::read_nifti_file;
use crate::nn::{bce_loss, AdamState, Mode, Model, ModelConfig, Tensor};
use crate::preprocess::{preprocess_volume, rotate_axial, AugmentationPlan, HuWindow};
use crate::rng::{self, derive_path};
use crate::volume::{Unit, Volume};

pub const DEFAULT_FOLDS: usize = 5;

/// Case-to-fold assignment over the train/validation group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Fold per manifest case; `None` for test-group cases.
    pub assignments: Vec<Option<usize>>,
}

impl FoldPlan {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == Some(fold))
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        (0..self.k).map(|f| self.members(f).len()).collect()
    }
}

/// Stratified assignment: each class is shuffled with the seed, positives
/// then negatives are concatenated, and position `p` goes to fold `p % k`.
/// Per-class and total fold sizes therefore differ by at most one.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!(
            "cross-validation needs k >= 2, got {k}"
        )));
    }
    let pool = manifest.indices(Group::TrainVal);
    let mut order = Vec::with_capacity(pool.len());
    for (stream, label) in [Label::Positive, Label::Negative].into_iter().enumerate() {
        let mut class: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&i| manifest.cases[i].label == label)
            .collect();
        if class.len() < k {
            return Err(Error::Config(format!(
                "{k}-fold cross-validation needs at least {k} {label:?} cases, found {}",
                class.len()
            )));
        }
        class.shuffle(&mut rng::rng(rng::derive_seed(seed, stream as u64)));
        order.extend(class);
    }
    let mut assignments = vec![None; manifest.cases.len()];
    for (pos, &case) in order.iter().enumerate() {
        assignments[case] = Some(pos % k);
    }
    Ok(FoldPlan {
        k,
        seed,
        assignments,
    })
}

/// One training sample: a case and its augmentation variant (0 is the
/// original, `v >= 1` is the rotation by plan angle `v - 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub case: usize,
    pub variant: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<SampleRef>,
    pub validation: Vec<usize>,
}

/// Training samples from every fold but `fold`, validation cases from
/// `fold`. Augmented variants are only generated for training cases.
pub fn fold_split(plan: &FoldPlan, fold: usize, augment: bool) -> Result<FoldSplit> {
    if fold >= plan.k {
        return Err(Error::Argument(format!(
            "fold {fold} out of range for k = {}",
            plan.k
        )));
    }
    let variants = if augment {
        1 + AugmentationPlan::ANGLES.len()
    } else {
        1
    };
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (case, a) in plan.assignments.iter().enumerate() {
        match a {
            Some(f) if *f == fold => validation.push(case),
            Some(_) => train.extend((0..variants).map(|variant| SampleRef { case, variant })),
            None => {}
        }
    }
    Ok(FoldSplit { train, validation })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
    pub folds: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 1,
            shuffle: 2,
            dropout: 3,
            folds: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub window: HuWindow,
    /// `model.input_dims` is the preprocessing target.
    pub model: ModelConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub seeds: Seeds,
    pub augment: bool,
    pub k_folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: HuWindow::default(),
            model: ModelConfig::default(),
            batch_size: 2,
            max_epochs: 100,
            patience: 15,
            learning_rate: 1e-4,
            seeds: Seeds::default(),
            augment: true,
            k_folds: DEFAULT_FOLDS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch size and max epochs must be >= 1".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        self.model.validate()
    }
}

/// Preprocessed model inputs for the cases of a manifest.
#[derive(Debug, Clone)]
pub struct CaseData {
    /// Per manifest case; `None` for cases that were not loaded.
    pub volumes: Vec<Option<Volume>>,
    pub labels: Vec<Label>,
}

impl CaseData {
    fn volume(&self, case: usize) -> Result<&Volume> {
        self.volumes
            .get(case)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::State(format!("case {case} was not loaded")))
    }
}

/// Brings one volume to model input: HU volumes are windowed and resized,
/// normalized volumes must already have the target dims.
pub fn prepare_volume(vol: &Volume, window: HuWindow, dims: [usize; 3]) -> Result<Volume> {
    match vol.unit() {
        Unit::HounsfieldUnits => preprocess_volume(vol, window, dims),
        Unit::Normalized if vol.dims() == dims => Ok(vol.clone()),
        Unit::Normalized => Err(Error::Config(format!(
            "normalized volume has dims {:?} but the model expects {dims:?}",
            vol.dims()
        ))),
    }
}

/// Reads and prepares every case of `groups`, `workers` at a time. The
/// result does not depend on the worker count.
pub fn load_cases(
    manifest: &DatasetManifest,
    groups: &[Group],
    window: HuWindow,
    dims: [usize; 3],
    workers: usize,
) -> Result<CaseData> {
    let load = |i: usize| -> Result<Option<Volume>> {
        let case = &manifest.cases[i];
        if !groups.contains(&case.group) {
            return Ok(None);
        }
        let path = manifest.resolve(case);
        let vol = read_nifti_file(&path).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(format!("case {}", path.display()), source),
            other => other,
        })?;
        prepare_volume(&vol, window, dims).map(Some)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let volumes = pool.install(|| {
        (0..manifest.cases.len())
            .into_par_iter()
            .map(load)
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(CaseData {
        volumes,
        labels: manifest.cases.iter().map(|c| c.label).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_auc: Option<f64>,
}

impl EpochRecord {
    /// Early-stopping order: higher accuracy, then lower loss, then earlier.
    fn beats(&self, other: &EpochRecord) -> bool {
        (self.val_acc, -self.val_loss, -(self.epoch as f64))
            .partial_cmp(&(other.val_acc, -other.val_loss, -(other.epoch as f64)))
            .is_some_and(|o| o.is_gt())
    }
}

pub fn history_table(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc\n");
    for r in history {
        writeln!(
            out,
            "{}\t{:.6}\t{:.4}\t{:.6}\t{:.4}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        )
        .expect("write to string");
    }
    out
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub history: Vec<EpochRecord>,
    pub best: EpochRecord,
    /// Weights from the best epoch.
    pub model: Model<f32>,
    pub optimizer: AdamState<f32>,
    /// Validation scores of the best model, in `validation` order.
    pub val_cases: Vec<usize>,
    pub val_scores: Vec<f64>,
    /// Optimizer steps taken per epoch.
    pub steps_per_epoch: usize,
}

fn batch_tensor(data: &CaseData, samples: &[SampleRef]) -> Result<Tensor<f32>> {
    let angles = AugmentationPlan::default();
    let mut owned = Vec::with_capacity(samples.len());
    for s in samples {
        let vol = data.volume(s.case)?;
        owned.push(match s.variant {
            0 => vol.clone(),
            v => rotate_axial(vol, angles.angles()[v - 1])?,
        });
    }
    let refs: Vec<&Volume> = owned.iter().collect();
    Tensor::from_volumes(&refs)
}

/// Infer-mode probabilities for `cases`, batched.
pub fn score_cases(
    model: &Model<f32>,
    data: &CaseData,
    cases: &[usize],
    batch: usize,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(batch.max(1)) {
        let samples: Vec<SampleRef> = chunk
            .iter()
            .map(|&case| SampleRef { case, variant: 0 })
            .collect();
        let probs = model.infer(&batch_tensor(data, &samples)?)?;
        scores.extend(probs.iter().map(|&p| p as f64));
    }
    Ok(scores)
}

fn label_values(data: &CaseData, cases: &[usize]) -> Vec<u8> {
    cases.iter().map(|&c| data.labels[c].as_u8()).collect()
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} became {v}")))
    }
}

/// Trains on every fold except `fold` and validates on `fold` after each
/// epoch, keeping the best epoch's weights.
pub fn train_fold(
    data: &CaseData,
    plan: &FoldPlan,
    fold: usize,
    config: &TrainConfig,
) -> Result<FoldResult> {
    config.validate()?;
    if data.volumes.len() != plan.assignments.len() {
        return Err(Error::Consistency(format!(
            "fold plan covers {} cases, data has {}",
            plan.assignments.len(),
            data.volumes.len()
        )));
    }
    let split = fold_split(plan, fold, config.augment)?;
    let train_cases: HashSet<usize> = split.train.iter().map(|s| s.case).collect();
    if let Some(c) = split.validation.iter().find(|c| train_cases.contains(c)) {
        return Err(Error::Consistency(format!(
            "case {c} is in both training and validation"
        )));
    }
    for &c in train_cases.iter().chain(&split.validation) {
        let dims = data.volume(c)?.dims();
        if dims != config.model.input_dims {
            return Err(Error::Config(format!(
                "case {c} has dims {dims:?}, model expects {:?}",
                config.model.input_dims
            )));
        }
    }
    let val_labels = label_values(data, &split.validation);
    let val_targets: Vec<f64> = val_labels.iter().map(|&l| l as f64).collect();

    let fold_id = fold as u64;
    let mut model = Model::<f32>::new(
        config.model.clone(),
        derive_path(config.seeds.init, &[fold_id]),
    )?;
    let mut adam = AdamState::new(config.learning_rate);
    let mut history = Vec::new();
    let mut best: Option<(EpochRecord, Model<f32>, AdamState<f32>, Vec<f64>)> = None;
    let steps_per_epoch = split.train.len().div_ceil(config.batch_size);

    for epoch in 1..=config.max_epochs {
        let ep = epoch as u64;
        let mut order = split.train.clone();
        order.shuffle(&mut rng::rng(derive_path(
            config.seeds.shuffle,
            &[fold_id, ep],
        )));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let x = batch_tensor(data, batch)?;
            let labels: Vec<f32> = batch
                .iter()
                .map(|s| data.labels[s.case].as_u8() as f32)
                .collect();
            let mode = Mode::Train {
                dropout_seed: derive_path(config.seeds.dropout, &[fold_id, ep, b as u64]),
            };
            let probs = model.forward(&x, mode)?;
            let loss = check_finite(model.backward_bce(&labels)? as f64, "training loss")?;
            adam.update(&mut model.params_mut())?;
            loss_sum += loss * batch.len() as f64;
            correct += probs
                .iter()
                .zip(&labels)
                .filter(|(&p, &y)| (p >= 0.5) == (y == 1.0))
                .count();
        }
        let scores = score_cases(&model, data, &split.validation, config.batch_size)?;
        let probs: Vec<f64> = scores.clone();
        let (val_loss, _) = bce_loss(&probs, &val_targets)?;
        let cm = confusion(&scores, &val_labels, 0.5)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
            val_loss: check_finite(val_loss, "validation loss")?,
            val_acc: cm.accuracy()?,
            val_auc: roc_auc(&scores, &val_labels).ok().map(|r| r.auc),
        };
        log::info!(
            "fold {fold} epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}",
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc
        );
        history.push(record);
        if best.as_ref().is_none_or(|(b, ..)| record.beats(b)) {
            best = Some((record, model.clone(), adam.clone(), scores));
        }
        let best_epoch = best.as_ref().map_or(epoch, |(b, ..)| b.epoch);
        if epoch - best_epoch >= config.patience {
            break;
        }
    }
    let (best, model, optimizer, val_scores) = best.expect("at least one epoch");
    Ok(FoldResult {
        fold,
        history,
        best,
        model,
        optimizer,
        val_cases: split.validation,
        val_scores,
        steps_per_epoch,
    })
}

#[derive(Debug, Clone)]
pub struct CvSummary {
    pub folds: Vec<FoldResult>,
    pub mean_val_acc: f64,
    pub mean_val_loss: f64,
    /// Mean over folds whose validation set holds both classes.
    pub mean_val_auc: Option<f64>,
}

pub fn summarize(folds: Vec<FoldResult>) -> CvSummary {
    let n = folds.len() as f64;
    let mean_val_acc = folds.iter().map(|f| f.best.val_acc).sum::<f64>() / n;
    let mean_val_loss = folds.iter().map(|f| f.best.val_loss).sum::<f64>() / n;
    let aucs: Vec<f64> = folds.iter().filter_map(|f| f.best.val_auc).collect();
    let mean_val_auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    CvSummary {
        folds,
        mean_val_acc,
        mean_val_loss,
        mean_val_auc,
    }
}

/// Trains every fold in turn.
pub fn run_cv(data: &CaseData, plan: &FoldPlan, config: &TrainConfig) -> Result<CvSummary> {
    let folds = (0..plan.k)
        .map(|f| train_fold(data, plan, f, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(folds))
}

/// Infer-mode scores for the manifest's test group, paired with labels.
pub fn evaluate_test(
    model: &Model<f32>,
    manifest: &DatasetManifest,
    data: &CaseData,
    batch: usize,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let cases = manifest.indices(Group::Test);
    if cases.is_empty() {
        return Err(Error::Config("manifest has no test-group cases".into()));
    }
    let scores = score_cases(model, data, &cases, batch)?;
    Ok((scores, label_values(data, &cases)))
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use super::*;
    use crate::manifest::Case;
    use crate::nn::Padding;

    fn manifest(n_pos: usize, n_neg: usize, n_test: usize) -> DatasetManifest {
        let mut cases = Vec::new();
        for i in 0..n_pos + n_neg + n_test {
            let label = if i < n_pos || (i >= n_pos + n_neg && i % 2 == 0) {
                Label::Positive
            } else {
                Label::Negative
            };
            let group = if i >= n_pos + n_neg {
                Group::Test
            } else {
                Group::TrainVal
            };
            cases.push(Case {
                path: PathBuf::from(format!("c{i}.nii")),
                label,
                seed: None,
                group,
            });
        }
        DatasetManifest::new("/", cases).unwrap()
    }

    #[test]
    fn fold_sizes_for_172() {
        let m = manifest(86, 86, 20);
        let plan = make_folds(&m, 5, 7).unwrap();
        let mut sizes = plan.fold_sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![35, 35, 34, 34, 34]);
        for i in m.indices(Group::Test) {
            assert_eq!(plan.assignments[i], None);
        }
        let uneven = manifest(34, 138, 0);
        let mut sizes = make_folds(&uneven, 5, 1).unwrap().fold_sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![35, 35, 34, 34, 34]);
    }

    #[test]
    fn perfect_stratification() {
        let m = manifest(5, 5, 0);
        let plan = make_folds(&m, 5, 3).unwrap();
        for f in 0..5 {
            let members = plan.members(f);
            assert_eq!(members.len(), 2);
            let pos = members
                .iter()
                .filter(|&&i| m.cases[i].label == Label::Positive)
                .count();
            assert_eq!(pos, 1);
        }
        assert_eq!(plan, make_folds(&m, 5, 3).unwrap());
        assert_ne!(plan, make_folds(&m, 5, 4).unwrap());
    }

    #[test]
    fn too_few_cases_is_config_error() {
        let m = manifest(4, 10, 0);
        assert!(matches!(make_folds(&m, 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_counts_and_augmentation() {
        let m = manifest(10, 10, 4);
        let plan = make_folds(&m, 5, 0).unwrap();
        let plain = fold_split(&plan, 2, false).unwrap();
        assert_eq!(plain.train.len(), 16);
        assert_eq!(plain.validation.len(), 4);
        let aug = fold_split(&plan, 2, true).unwrap();
        assert_eq!(aug.train.len(), 7 * 16);
        for s in &aug.train {
            assert_ne!(plan.assignments[s.case], Some(2));
        }
        assert!(fold_split(&plan, 5, false).is_err());
    }

    #[test]
    fn early_stopping_order() {
        let r = |epoch, val_acc, val_loss| EpochRecord {
            epoch,
            train_loss: 0.0,
            train_acc: 0.0,
            val_loss,
            val_acc,
            val_auc: None,
        };
        assert!(r(2, 0.8, 0.5).beats(&r(1, 0.7, 0.1)));
        assert!(r(2, 0.8, 0.4).beats(&r(1, 0.8, 0.5)));
        assert!(!r(2, 0.8, 0.5).beats(&r(1, 0.8, 0.5)));
    }

    #[test]
    fn history_table_columns() {
        let t = history_table(&[EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            train_acc: 0.75,
            val_loss: 0.6,
            val_acc: 0.5,
            val_auc: Some(0.5),
        }]);
        let mut lines = t.lines();
        assert_eq!(
            lines.next(),
            Some("epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc")
        );
        assert_eq!(lines.next().unwrap().split('\t').count(), 5);
    }

    fn tiny_data(m: &DatasetManifest) -> CaseData {
        // Positives are bright, negatives dark: separable by construction.
        let volumes = m
            .cases
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let base = if c.label == Label::Positive { 0.7 } else { 0.3 };
                let data = (0..512)
                    .map(|v| base + 0.05 * (((v * 7 + i * 13) % 11) as f32 / 11.0))
                    .collect();
                Some(Volume::from_data([8, 8, 8], data, Unit::Normalized).unwrap())
            })
            .collect();
        CaseData {
            volumes,
            labels: m.cases.iter().map(|c| c.label).collect(),
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                input_dims: [8, 8, 8],
                widths: vec![2, 4],
                dense_units: 4,
                padding: Padding::Same,
                ..ModelConfig::default()
            },
            max_epochs: 4,
            patience: 2,
            learning_rate: 1e-2,
            augment: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_bookkept() {
        let m = manifest(5, 5, 2);
        let data = tiny_data(&m);
        let plan = make_folds(&m, 5, 0).unwrap();
        let cfg = tiny_config();
        let a = train_fold(&data, &plan, 0, &cfg).unwrap();
        let b = train_fold(&data, &plan, 0, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.val_scores, b.val_scores);
        assert!(a.history.len() <= cfg.max_epochs);
        assert!(a.best.epoch <= a.history.last().unwrap().epoch);
        let max_acc = a.history.iter().map(|r| r.val_acc).fold(0.0, f64::max);
        assert_eq!(a.best.val_acc, max_acc);
        assert_eq!(a.steps_per_epoch, 4);

        let aug = train_fold(
            &data,
            &plan,
            0,
            &TrainConfig {
                augment: true,
                max_epochs: 1,
                patience: 1,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(aug.steps_per_epoch, 7 * 4);

        let (scores, labels) = evaluate_test(&a.model, &m, &data, 2).unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(labels.len(), 2);
        assert!(scores.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn wrong_dims_are_config_errors() {
        let m = manifest(5, 5, 0);
        let data = tiny_data(&m);
        let plan = make_folds(&m, 5, 0).unwrap();
        let mut cfg = tiny_config();
        cfg.model.input_dims = [8, 8, 16];
        assert!(matches!(
            train_fold(&data, &plan, 0, &cfg),
            Err(Error::Config(_))
        ));
        let v = Volume::filled([4, 4, 4], 0.5, Unit::Normalized).unwrap();
        assert!(matches!(
            prepare_volume(&v, HuWindow::default(), [8, 8, 8]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn summary_means() {
        let m = manifest(5, 5, 0);
        let data = tiny_data(&m);
        let plan = make_folds(&m, 5, 0).unwrap();
        let cfg = TrainConfig {
            max_epochs: 1,
            patience: 1,
            ..tiny_config()
        };
        let s = run_cv(&data, &plan, &cfg).unwrap();
        assert_eq!(s.folds.len(), 5);
        let mean = s.folds.iter().map(|f| f.best.val_acc).sum::<f64>() / 5.0;
        assert_eq!(s.mean_val_acc, mean);
    }
}
