//! Batch front end for the multimodal imaging-genomics classifier: cohort generation,
//! cross-validated training, the ablation grid and saliency export.
//!
//! Every command writes the effective configuration as `config.json` into its output
//! directory. Artifacts depend only on the arguments and seed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mgt_core::data::{generate_cohort, read_cohort, write_cohort, Cohort, CohortSpec};
use mgt_core::interpret::{SaliencyBundle, SaliencyOptions, TargetClass};
use mgt_core::training::{
    check_compatible, format_table, run_cv_with_splits, stratified_kfold, CvOutcome, Fold,
    FoldReport, Metrics, TrainConfig,
};
use mgt_core::{FusionKind, Model, ModelConfig, ModelParams, Modality};
use serde::{Deserialize, Serialize};

/// Everything a run depends on. Missing JSON fields fall back to the built-in defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Used by `generate`, and by `train`/`ablate` when no cohort directory is given.
    pub cohort: CohortSpec,
    pub cohort_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Defaults, overlaid by the JSON file when one is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_json_file(p),
            None => Ok(Self::default()),
        }
    }

    /// The seed drives both the generator and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.cohort.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("config.json"), self)
    }

    /// Reads the configured cohort directory, or generates the configured spec in memory.
    pub fn load_cohort(&self) -> Result<Cohort> {
        match &self.cohort_dir {
            Some(dir) => {
                read_cohort(dir).with_context(|| format!("reading cohort {}", dir.display()))
            }
            None => Ok(generate_cohort(&self.cohort)?),
        }
    }
}

/// Flag values that override the configuration; `None` leaves the configured value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub cohort_dir: Option<PathBuf>,
    pub subjects: Option<usize>,
    pub modalities: Option<Vec<Modality>>,
    pub fusion: Option<FusionKind>,
    pub epochs: Option<usize>,
    pub folds: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(d) = &self.cohort_dir {
            cfg.cohort_dir = Some(d.clone());
        }
        if let Some(n) = self.subjects {
            cfg.cohort.n_subjects = n;
        }
        if let Some(m) = &self.modalities {
            cfg.model.modalities = m.clone();
        }
        if let Some(f) = self.fusion {
            cfg.model.fusion = f;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(k) = self.folds {
            cfg.train.folds = k;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(t) = self.threads {
            cfg.train.threads = t;
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub subjects: usize,
    pub sz: usize,
    pub hc: usize,
    pub snp_dim: usize,
    pub fnc_dim: usize,
    pub volume_extents: [usize; 3],
}

impl CohortSummary {
    pub fn of(cohort: &Cohort) -> Self {
        let sz = cohort.labels().iter().filter(|&&l| l == 1).count();
        Self {
            subjects: cohort.len(),
            sz,
            hc: cohort.len() - sz,
            snp_dim: cohort.snp_dim(),
            fnc_dim: cohort.fnc_dim(),
            volume_extents: cohort.volume_extents(),
        }
    }
}

impl std::fmt::Display for CohortSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [d, h, w] = self.volume_extents;
        write!(
            f,
            "{} subjects ({} SZ, {} HC); snp_dim {}, fnc_dim {}, volume {d}x{h}x{w}",
            self.subjects, self.sz, self.hc, self.snp_dim, self.fnc_dim
        )
    }
}

/// Generates the configured cohort and writes it (plus `config.json`) under `out`.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<CohortSummary> {
    cfg.cohort.validate()?;
    let cohort = generate_cohort(&cfg.cohort)?;
    write_cohort(&cohort, out)?;
    cfg.write_to(out)?;
    Ok(CohortSummary::of(&cohort))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub index: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub final_loss: f64,
    pub metrics: Metrics,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub summary: FoldReport,
    pub folds: Vec<FoldRecord>,
}

impl TrainReport {
    pub fn of(cv: &CvOutcome) -> Self {
        Self {
            summary: cv.report.clone(),
            folds: cv
                .folds
                .iter()
                .map(|f| FoldRecord {
                    index: f.index,
                    train_size: f.split.train.len(),
                    test_size: f.split.test.len(),
                    final_loss: f.trained.epoch_loss.last().copied().unwrap_or(f64::NAN),
                    metrics: f.metrics.clone(),
                })
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format_table(std::slice::from_ref(&self.summary));
        s.push('\n');
        for f in &self.folds {
            s.push_str(&format!(
                "fold {}: train {} test {}  acc {:.4}  f1 {:.4}  final loss {:.6}\n",
                f.index, f.train_size, f.test_size, f.metrics.accuracy, f.metrics.f1, f.final_loss
            ));
        }
        s
    }
}

/// One fold checkpoint directory: parameters, model config and the split it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldCheckpointMeta {
    pub index: usize,
    pub split: Fold,
}

pub fn fold_dir(out: &Path, index: usize) -> PathBuf {
    out.join("checkpoints").join(format!("fold_{index}"))
}

pub fn save_checkpoint(
    dir: &Path,
    model: &ModelConfig,
    params: &ModelParams,
    meta: &FoldCheckpointMeta,
) -> Result<()> {
    params.save_dir(dir)?;
    write_json(&dir.join("model.json"), model)?;
    write_json(&dir.join("fold.json"), meta)?;
    Ok(())
}

pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub meta: Option<FoldCheckpointMeta>,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let model: ModelConfig = read_json(&dir.join("model.json"))?;
    let params = ModelParams::load_dir(dir)
        .with_context(|| format!("loading parameters from {}", dir.display()))?;
    let meta_path = dir.join("fold.json");
    let meta = if meta_path.exists() {
        Some(read_json(&meta_path)?)
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        params,
        meta,
    })
}

/// Cross-validated training. Writes `config.json`, `report.json`, `report.txt` and
/// `checkpoints/fold_<k>/` under `out`. Dimension mismatches are rejected before training.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let cohort = cfg.load_cohort()?;
    check_compatible(&cohort, &cfg.model)?;
    let splits = stratified_kfold(&cohort.labels(), cfg.train.folds, cfg.train.seed)?;
    let cv = run_cv_with_splits(&cohort, &cfg.model, &cfg.train, &splits)?;
    fs::create_dir_all(out)?;
    cfg.write_to(out)?;
    let report = TrainReport::of(&cv);
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("report.txt"), report.to_text())?;
    for f in &cv.folds {
        let meta = FoldCheckpointMeta {
            index: f.index,
            split: f.split.clone(),
        };
        save_checkpoint(&fold_dir(out, f.index), &cfg.model, &f.trained.params, &meta)?;
    }
    Ok(report)
}

/// The nine rows of the ablation grid, in table order.
pub fn ablation_rows() -> Vec<(Vec<Modality>, FusionKind)> {
    use FusionKind::*;
    use Modality::*;
    let mut rows = vec![
        (vec![Genomic], None),
        (vec![Connectome], None),
        (vec![Volume], None),
    ];
    for set in [vec![Genomic, Connectome], vec![Genomic, Connectome, Volume]] {
        for fusion in [Concat, Aff, Trans] {
            rows.push((set.clone(), fusion));
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub report: FoldReport,
    /// Test indices per fold, recorded for the shared-split audit.
    pub test_folds: Vec<Vec<usize>>,
}

/// Contents of `ablation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub shared_splits: bool,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn accuracy(&self, label: &str) -> Option<f64> {
        self.row(label).map(|r| r.report.accuracy.mean)
    }

    pub fn to_text(&self) -> String {
        let reports: Vec<FoldReport> = self.rows.iter().map(|r| r.report.clone()).collect();
        let mut s = format_table(&reports);
        s.push_str(&format!(
            "\nshared fold splits across rows: {}\n",
            if self.shared_splits { "yes" } else { "NO" }
        ));
        s
    }
}

/// Trains every grid row on one cohort with one set of fold splits. `on_row` sees each row
/// as it finishes, together with its cross-validation outcome.
pub fn run_ablation(
    cfg: &RunConfig,
    cohort: &Cohort,
    mut on_row: impl FnMut(&AblationRow, &CvOutcome),
) -> Result<AblationReport> {
    cfg.validate()?;
    let splits = stratified_kfold(&cohort.labels(), cfg.train.folds, cfg.train.seed)?;
    let mut rows = Vec::new();
    for (modalities, fusion) in ablation_rows() {
        let model = cfg.model.clone().with(&modalities, fusion);
        check_compatible(cohort, &model)?;
        let cv = run_cv_with_splits(cohort, &model, &cfg.train, &splits)?;
        let row = AblationRow {
            label: model.label(),
            report: cv.report.clone(),
            test_folds: cv.folds.iter().map(|f| f.split.test.clone()).collect(),
        };
        on_row(&row, &cv);
        rows.push(row);
    }
    let shared_splits = rows.windows(2).all(|w| w[0].test_folds == w[1].test_folds);
    Ok(AblationReport {
        rows,
        shared_splits,
    })
}

/// Runs the grid and writes `config.json`, `ablation.json` and `ablation.txt` under `out`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    out: &Path,
    on_row: impl FnMut(&AblationRow, &CvOutcome),
) -> Result<AblationReport> {
    let cohort = cfg.load_cohort()?;
    let report = run_ablation(cfg, &cohort, on_row)?;
    fs::create_dir_all(out)?;
    cfg.write_to(out)?;
    write_json(&out.join("ablation.json"), &report)?;
    fs::write(out.join("ablation.txt"), report.to_text())?;
    Ok(report)
}

/// Which subjects a saliency run explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubjectSet {
    /// The checkpoint's held-out fold (all subjects when it has no fold record).
    Test,
    All,
}

#[derive(Debug, Clone)]
pub struct InterpretRequest {
    pub checkpoint: PathBuf,
    pub subjects: SubjectSet,
    pub options: SaliencyOptions,
}

pub struct InterpretOutcome {
    pub bundle: SaliencyBundle,
    /// Set when every score is zero, e.g. for a zeroed checkpoint.
    pub warning: Option<String>,
}

/// Writes the saliency bundle under `out/saliency/` and `config.json` under `out`.
pub fn cmd_interpret(cfg: &RunConfig, req: &InterpretRequest, out: &Path) -> Result<InterpretOutcome> {
    let ck = load_checkpoint(&req.checkpoint)?;
    let cohort = cfg.load_cohort()?;
    check_compatible(&cohort, &ck.model)?;
    let model = Model::new(ck.model.clone())?;
    model.check_params(&ck.params)?;
    let indices: Vec<usize> = match (req.subjects, &ck.meta) {
        (SubjectSet::Test, Some(meta)) => {
            if let Some(&bad) = meta.split.test.iter().find(|&&i| i >= cohort.len()) {
                bail!(
                    "checkpoint fold refers to subject {bad}, cohort has only {}",
                    cohort.len()
                );
            }
            meta.split.test.clone()
        }
        _ => (0..cohort.len()).collect(),
    };
    let bundle = SaliencyBundle::compute(&model, &ck.params, &cohort, &indices, &req.options)?;
    fs::create_dir_all(out)?;
    let mut echoed = cfg.clone();
    echoed.model = ck.model;
    echoed.write_to(out)?;
    bundle.write(out.join("saliency"))?;
    let warning = bundle.is_all_zero().then(|| {
        format!(
            "all saliency scores are zero for checkpoint {}; the model output does not depend on its inputs",
            req.checkpoint.display()
        )
    });
    Ok(InterpretOutcome { bundle, warning })
}

pub fn parse_target(s: &str) -> Result<TargetClass> {
    match s.to_ascii_lowercase().as_str() {
        "sz" => Ok(TargetClass::Sz),
        "hc" => Ok(TargetClass::Hc),
        other => bail!("unknown target class `{other}` (expected sz or hc)"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_nine_distinct_rows() {
        let labels: Vec<String> = ablation_rows()
            .into_iter()
            .map(|(m, f)| ModelConfig::default().with(&m, f).label())
            .collect();
        assert_eq!(labels.len(), 9);
        let mut dedup = labels.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 9);
        assert_eq!(labels[0], "G");
        assert_eq!(labels[8], "GCS-trans");
    }

    #[test]
    fn flags_override_json_override_defaults() {
        let json = r#"{"train": {"epochs": 7, "lr": 0.01}, "model": {"fusion": "concat"}}"#;
        let mut cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model.fusion, FusionKind::Concat);
        Overrides {
            epochs: Some(3),
            seed: Some(9),
            ..Overrides::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!((cfg.train.seed, cfg.cohort.seed), (9, 9));
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn target_names() {
        assert_eq!(parse_target("SZ").unwrap(), TargetClass::Sz);
        assert_eq!(parse_target("hc").unwrap(), TargetClass::Hc);
        assert!(parse_target("x").is_err());
    }
}
