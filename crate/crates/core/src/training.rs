//! Adam with weight/bias penalties, the epoch loop, stratified k-fold cross-validation,
//! and classification metrics.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::model::{Dropouts, Model, ModelConfig};
use crate::params::{Gradients, ModelParams, ParamKind, Session};
use crate::tape::{Mode, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter; each must have a gradient of matching shape.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        for key in grads.keys() {
            if !params.contains(key) {
                return Err(Error::MissingParam(key.clone()));
            }
        }
        for (key, _) in params.iter() {
            if !grads.contains_key(key) {
                return Err(Error::MissingGrad(key.to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (key, p) in params.iter_mut() {
            let g = &grads[key];
            if g.shape() != p.value.shape() {
                return Err(crate::error::dim_err("adam_step", p.value.shape(), g.shape()));
            }
            let m = self
                .m
                .entry(key.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(key.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub weight_l2: f64,
    pub bias_l1: f64,
    pub bias_l2: f64,
    pub folds: usize,
    pub seed: u64,
    /// Folds trained concurrently; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            epochs: 100,
            p1: 0.5,
            p2: 0.3,
            p3: 0.3,
            weight_l2: 0.005,
            bias_l1: 0.005,
            bias_l2: 0.005,
            folds: 5,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.folds < 2 {
            return bad(format!("folds {} must be at least 2", self.folds));
        }
        for (name, p) in [("p1", self.p1), ("p2", self.p2), ("p3", self.p3)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} must lie in [0, 1)"));
            }
        }
        for (name, r) in [
            ("weight_l2", self.weight_l2),
            ("bias_l1", self.bias_l1),
            ("bias_l2", self.bias_l2),
        ] {
            if !(r >= 0.0 && r.is_finite()) {
                return bad(format!("{name} {r} must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn dropouts(&self, model: &ModelConfig) -> Dropouts {
        Dropouts {
            p1: self.p1,
            p2: self.p2,
            p3: self.p3,
            head: model.head_dropout,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// `bce + weight_l2·Σ‖W‖² + bias_l1·Σ‖b‖₁ + bias_l2·Σ‖b‖²`, recorded on the session tape.
/// Layer-norm parameters are not penalized.
pub fn regularized_loss(
    s: &mut Session,
    bce: Var,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<Var> {
    let mut total = bce;
    for (key, p) in params.iter() {
        let w = s.param(key)?;
        let mut add = |s: &mut Session, term: Var, rate: f64| -> Result<()> {
            if rate != 0.0 {
                let t = s.tape.sum(term);
                let t = s.tape.scale(t, rate);
                total = s.tape.add(total, t)?;
            }
            Ok(())
        };
        match p.kind {
            ParamKind::Weight => {
                let sq = s.tape.mul(w, w)?;
                add(s, sq, cfg.weight_l2)?;
            }
            ParamKind::Bias => {
                let a = s.tape.abs(w);
                add(s, a, cfg.bias_l1)?;
                let sq = s.tape.mul(w, w)?;
                add(s, sq, cfg.bias_l2)?;
            }
            ParamKind::Norm => {}
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Class-stratified `k` folds: each class is shuffled, the classes are concatenated, and
/// position `i` goes to fold `i mod k`.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k = {k} folds; need at least 2")));
    }
    let mut classes: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    if let Some((c, idx)) = classes.iter().find(|(_, v)| v.len() < k) {
        return Err(Error::Config(format!(
            "k = {k} folds exceeds the {} subjects of class {c}",
            idx.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(labels.len());
    for idx in classes.values_mut() {
        idx.shuffle(&mut rng);
        order.extend_from_slice(idx);
    }
    let mut tests = vec![Vec::new(); k];
    for (pos, &i) in order.iter().enumerate() {
        tests[pos % k].push(i);
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let held: BTreeSet<usize> = test.iter().copied().collect();
            let train = (0..labels.len()).filter(|i| !held.contains(i)).collect();
            Fold { train, test }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Macro averages over the two classes.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Index 0 = HC, 1 = SZ.
    pub per_class: [ClassMetrics; 2],
}

pub const THRESHOLD: f64 = 0.5;

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Metrics at the 0.5 threshold. Undefined ratios (0/0) count as 0.
pub fn metrics(probs: &[f64], labels: &[u8]) -> Result<Metrics> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    // confusion[truth][pred]
    let mut confusion = [[0usize; 2]; 2];
    for (&p, &l) in probs.iter().zip(labels) {
        if l > 1 {
            return Err(Error::Label(l as f64));
        }
        confusion[l as usize][(p >= THRESHOLD) as usize] += 1;
    }
    let per_class = [0, 1].map(|c| {
        let tp = confusion[c][c];
        let predicted = confusion[0][c] + confusion[1][c];
        let actual = confusion[c][0] + confusion[c][1];
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            support: actual,
        }
    });
    let mean = |f: fn(&ClassMetrics) -> f64| (f(&per_class[0]) + f(&per_class[1])) / 2.0;
    Ok(Metrics {
        accuracy: ratio(confusion[0][0] + confusion[1][1], probs.len()),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub label: String,
    pub folds: Vec<Metrics>,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

impl FoldReport {
    pub fn from_folds(label: impl Into<String>, folds: Vec<Metrics>) -> Self {
        let col = |f: fn(&Metrics) -> f64| MeanStd::of(&folds.iter().map(f).collect::<Vec<_>>());
        Self {
            label: label.into(),
            accuracy: col(|m| m.accuracy),
            precision: col(|m| m.precision),
            recall: col(|m| m.recall),
            f1: col(|m| m.f1),
            folds,
        }
    }
}

fn cell(m: MeanStd) -> String {
    format!("{:.2}(±{:.2})", 100.0 * m.mean, 100.0 * m.std)
}

/// Aligned text table, one row per report, values in percent.
pub fn format_table(reports: &[FoldReport]) -> String {
    let header = ["Model", "Accuracy", "Precision", "Recall", "F1"];
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                cell(r.accuracy),
                cell(r.precision),
                cell(r.recall),
                cell(r.f1),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for r in &rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: [&str; 5]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(width)
            .enumerate()
            .map(|(i, (c, w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (width.len() - 1)));
    out.push('\n');
    for r in &rows {
        out.push_str(&line([&r[0], &r[1], &r[2], &r[3], &r[4]]));
        out.push('\n');
    }
    out
}

/// Result of training one model.
#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Every subject index that contributed to a gradient update.
    pub trained_on: BTreeSet<usize>,
}

/// One optimizer step on `indices`; returns the loss before the step.
pub fn train_step(
    model: &Model,
    params: &mut ModelParams,
    adam: &mut Adam,
    cohort: &Cohort,
    indices: &[usize],
    cfg: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let batch = cohort.batch(indices, &model.config().modalities)?;
    let (loss_value, grads, rng) = {
        let mut s = Session::new(params, Mode::Train, dropout_rng.clone());
        let fwd = model.forward(&mut s, &batch, cfg.dropouts(model.config()), false)?;
        let bce = model.loss(&mut s, &fwd, &batch.labels)?;
        let loss = regularized_loss(&mut s, bce, params, cfg)?;
        let value = s.tape.value(loss).item()?;
        let grads = s.backward(loss)?;
        (value, grads, s.rng)
    };
    *dropout_rng = rng;
    adam.step(params, &grads)?;
    Ok(loss_value)
}

/// Trains a fresh model on `train` indices with all randomness derived from `seed`.
pub fn train_model(
    model: &Model,
    cohort: &Cohort,
    train: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Trained> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut params = model.init_params(seed);
    let mut adam = Adam::new(cfg.adam());
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let mut order = train.to_vec();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut trained_on = BTreeSet::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let l = train_step(model, &mut params, &mut adam, cohort, chunk, cfg, &mut dropout_rng)?;
            total += l * chunk.len() as f64;
            trained_on.extend(chunk.iter().copied());
        }
        epoch_loss.push(total / order.len() as f64);
    }
    Ok(Trained {
        params,
        epoch_loss,
        trained_on,
    })
}

/// Eval-mode probabilities for `indices`, in order.
pub fn predict(
    model: &Model,
    params: &ModelParams,
    cohort: &Cohort,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = cohort.batch(chunk, &model.config().modalities)?;
        let mut s = Session::new(params, Mode::Eval, ChaCha8Rng::seed_from_u64(0)).frozen();
        let fwd = model.forward(&mut s, &batch, Dropouts::NONE, false)?;
        out.extend_from_slice(s.tape.value(fwd.probs).data());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub index: usize,
    pub split: Fold,
    pub trained: Trained,
    pub test_probs: Vec<f64>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: FoldReport,
    pub folds: Vec<FoldOutcome>,
}

/// Checks that the cohort's widths match the model configuration.
pub fn check_compatible(cohort: &Cohort, cfg: &ModelConfig) -> Result<()> {
    use crate::model::Modality;
    let mismatch = |what: &str, a: String, b: String| {
        Err(Error::Config(format!(
            "{what}: cohort has {a}, model config expects {b}"
        )))
    };
    if cohort.is_empty() {
        return Err(Error::Config("cohort has no subjects".into()));
    }
    if cfg.has(Modality::Genomic) && cohort.snp_dim() != cfg.snp_dim {
        return mismatch("snp_dim", cohort.snp_dim().to_string(), cfg.snp_dim.to_string());
    }
    if cfg.has(Modality::Connectome) && cohort.fnc_dim() != cfg.fnc_dim {
        return mismatch("fnc_dim", cohort.fnc_dim().to_string(), cfg.fnc_dim.to_string());
    }
    if cfg.has(Modality::Volume) && cohort.volume_extents() != cfg.volume_extents {
        return mismatch(
            "volume_extents",
            format!("{:?}", cohort.volume_extents()),
            format!("{:?}", cfg.volume_extents),
        );
    }
    Ok(())
}

fn run_fold(
    model: &Model,
    cohort: &Cohort,
    labels: &[u8],
    cfg: &TrainConfig,
    index: usize,
    split: &Fold,
) -> Result<FoldOutcome> {
    let trained = train_model(model, cohort, &split.train, cfg, cfg.seed + index as u64)?;
    let test_probs = predict(model, &trained.params, cohort, &split.test, cfg.batch_size)?;
    let test_labels: Vec<u8> = split.test.iter().map(|&i| labels[i]).collect();
    let metrics = metrics(&test_probs, &test_labels)?;
    Ok(FoldOutcome {
        index,
        split: split.clone(),
        trained,
        test_probs,
        metrics,
    })
}

/// Cross-validation on the given splits: a freshly seeded model per fold (`seed + fold`).
pub fn run_cv_with_splits(
    cohort: &Cohort,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    splits: &[Fold],
) -> Result<CvOutcome> {
    cfg.validate()?;
    check_compatible(cohort, model_cfg)?;
    let model = Model::new(model_cfg.clone())?;
    let labels = cohort.labels();
    let threads = cfg.threads.max(1).min(splits.len());
    let mut results: Vec<Option<Result<FoldOutcome>>> = (0..splits.len()).map(|_| None).collect();
    if threads <= 1 {
        for (i, split) in splits.iter().enumerate() {
            results[i] = Some(run_fold(&model, cohort, &labels, cfg, i, split));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let (model, labels) = (&model, &labels);
                    scope.spawn(move || {
                        (t..splits.len())
                            .step_by(threads)
                            .map(|i| (i, run_fold(model, cohort, labels, cfg, i, &splits[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("fold worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }
    let folds = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    let report = FoldReport::from_folds(
        model_cfg.label(),
        folds.iter().map(|f| f.metrics.clone()).collect(),
    );
    Ok(CvOutcome { report, folds })
}

/// Stratified k-fold cross-validation with splits drawn from `cfg.seed`.
pub fn run_cv(cohort: &Cohort, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<CvOutcome> {
    let splits = stratified_kfold(&cohort.labels(), cfg.folds, cfg.seed)?;
    run_cv_with_splits(cohort, model_cfg, cfg, &splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = ModelParams::new();
        p.insert("x", ParamKind::Weight, Tensor::from_vec(vec![0.0]));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        });
        let mut steps = 0;
        while (p.tensor("x").unwrap().data()[0] - 3.0).abs() >= 1e-3 {
            let x = p.tensor("x").unwrap().data()[0];
            let g = BTreeMap::from([("x".to_string(), Tensor::from_vec(vec![2.0 * (x - 3.0)]))]);
            adam.step(&mut p, &g).unwrap();
            steps += 1;
            assert!(steps <= 2000, "not converged: x = {x}");
        }
    }

    #[test]
    fn adam_zero_grad_and_first_step() {
        let mut p = ModelParams::new();
        p.insert("w", ParamKind::Weight, Tensor::from_vec(vec![1.0, -2.0]));
        let mut adam = Adam::new(AdamConfig::default());
        let zero = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        adam.step(&mut p, &zero).unwrap();
        assert_eq!(p.tensor("w").unwrap().data(), &[1.0, -2.0]);

        let mut adam = Adam::new(AdamConfig::default());
        for scale in [1e-3, 1.0, 1e4] {
            let mut q = p.clone();
            let g = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![scale, -scale]))]);
            adam.step(&mut q, &g).unwrap();
            let d = q.tensor("w").unwrap().data();
            assert!((1.0 - d[0] - 1e-3).abs() < 1e-8);
            adam = Adam::new(AdamConfig::default());
        }
        assert!(matches!(
            adam.step(&mut p, &BTreeMap::new()),
            Err(Error::MissingGrad(_))
        ));
    }

    #[test]
    fn penalty_examples() {
        let mut p = ModelParams::new();
        p.insert("w", ParamKind::Weight, Tensor::from_vec(vec![2.0]));
        p.insert("b", ParamKind::Bias, Tensor::from_vec(vec![0.0]));
        p.insert("n", ParamKind::Norm, Tensor::from_vec(vec![5.0]));
        let cfg = TrainConfig::default();
        let mut s = Session::new(&p, Mode::Train, ChaCha8Rng::seed_from_u64(0));
        let bce = s.tape.constant(Tensor::scalar(0.25));
        let l = regularized_loss(&mut s, bce, &p, &cfg).unwrap();
        assert!((s.tape.value(l).item().unwrap() - 0.27).abs() < 1e-15);

        let mut z = ModelParams::new();
        z.insert("w", ParamKind::Weight, Tensor::zeros(&[3]));
        z.insert("b", ParamKind::Bias, Tensor::zeros(&[3]));
        let mut s = Session::new(&z, Mode::Train, ChaCha8Rng::seed_from_u64(0));
        let bce = s.tape.constant(Tensor::scalar(0.7));
        let l = regularized_loss(&mut s, bce, &z, &cfg).unwrap();
        assert_eq!(s.tape.value(l).item().unwrap(), 0.7);
    }

    #[test]
    fn balanced_ten_subjects() {
        let labels = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        for f in stratified_kfold(&labels, 5, 3).unwrap() {
            let ones = f.test.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!((f.test.len(), ones), (2, 1));
        }
        assert!(stratified_kfold(&[0, 0, 1], 2, 0).is_err());
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let labels = [0, 1, 0, 1];
        let m = metrics(&[0.9; 4], &labels).unwrap();
        assert_eq!(m.accuracy, 0.5);
        // SZ: p = 0.5, r = 1, F1 = 2/3; HC: all zero
        assert!((m.f1 - 1.0 / 3.0).abs() < 1e-15);
        let perfect = metrics(&[0.1, 0.9, 0.2, 0.8], &labels).unwrap();
        assert_eq!((perfect.accuracy, perfect.f1), (1.0, 1.0));
    }

    #[test]
    fn table_layout() {
        let r = FoldReport::from_folds(
            "GC-trans",
            vec![metrics(&[0.9, 0.1], &[1, 0]).unwrap(), metrics(&[0.9, 0.9], &[1, 0]).unwrap()],
        );
        assert!((r.accuracy.mean - 0.75).abs() < 1e-15);
        assert!((r.accuracy.std - 0.5f64.sqrt() / 2.0).abs() < 1e-15);
        let t = format_table(&[r]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("GC-trans"));
        assert!(lines[2].contains("75.00(±35.36)"));
    }
}
