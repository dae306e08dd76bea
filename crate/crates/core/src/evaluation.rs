//! Accuracy over the clean / FGSM / BIM / PGD x white-box / black-box grid,
//! report files, and feature export.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{run_attack, transfer_attack, AttackConfig, AttackError, AttackKind};
use crate::data::{DataError, Dataset, ImageBatch};
use crate::models::{argmax_rows, canonical_json, Classifier, ModelError};
use crate::par;
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("black-box cells requested but no surrogate model was given")]
    MissingSurrogate,
    #[error("surrogate id `{0}` must differ from the evaluated model's id")]
    SurrogateId(String),
    #[error("limit {limit} exceeds dataset size {size}")]
    LimitTooLarge { limit: usize, size: usize },
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
    #[error("unknown report format `{0}` (expected json or csv)")]
    UnknownFormat(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Fraction of rows whose arg-max (ties to the lowest index) is the label.
pub fn accuracy(model: &Classifier, images: &Tensor, labels: &[usize]) -> Result<f64, EvalError> {
    let pred = argmax_rows(&model.forward(images)?);
    Ok(count_correct(&pred, labels) as f64 / labels.len().max(1) as f64)
}

fn count_correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Collects per-batch correct counts over `ds` in fixed batch order.
fn scored(
    ds: &Dataset,
    batch_size: usize,
    score: impl Fn(usize, &ImageBatch) -> Result<Vec<usize>, EvalError> + Sync + Send,
) -> Result<Vec<usize>, EvalError> {
    if ds.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let batches: Vec<ImageBatch> = ds.ordered_batches(batch_size)?.collect();
    let per_batch = par::map_range(batches.len(), |bi| score(bi, &batches[bi]));
    let mut totals: Vec<usize> = Vec::new();
    for counts in per_batch {
        let counts = counts?;
        totals.resize(counts.len(), 0);
        totals.iter_mut().zip(&counts).for_each(|(t, c)| *t += c);
    }
    Ok(totals)
}

pub fn clean_accuracy(model: &Classifier, ds: &Dataset, batch_size: usize) -> Result<f64, EvalError> {
    let c = scored(ds, batch_size, |_, b| {
        Ok(vec![count_correct(&model.predict(b.images())?, b.labels())])
    })?;
    Ok(c[0] as f64 / ds.len() as f64)
}

/// White-box accuracy under one attack; batch `i` uses a start seed derived
/// from `cfg.seed` and `i`.
pub fn attack_accuracy(
    model: &Classifier,
    ds: &Dataset,
    kind: AttackKind,
    cfg: &AttackConfig,
    batch_size: usize,
) -> Result<f64, EvalError> {
    let c = scored(ds, batch_size, |bi, b| {
        let cfg = batch_config(cfg, bi);
        let adv = run_attack(kind, model, b, &cfg)?;
        Ok(vec![count_correct(&model.predict(&adv.perturbed)?, b.labels())])
    })?;
    Ok(c[0] as f64 / ds.len() as f64)
}

fn batch_config(cfg: &AttackConfig, batch: usize) -> AttackConfig {
    AttackConfig {
        seed: derive_seed(cfg.seed, "eval-batch", batch as u64),
        ..*cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellAttack {
    Clean,
    Fgsm,
    Bim,
    Pgd,
}

impl From<AttackKind> for CellAttack {
    fn from(k: AttackKind) -> Self {
        match k {
            AttackKind::Fgsm => CellAttack::Fgsm,
            AttackKind::Bim => CellAttack::Bim,
            AttackKind::Pgd => CellAttack::Pgd,
        }
    }
}

impl CellAttack {
    fn kind(self) -> Option<AttackKind> {
        match self {
            CellAttack::Clean => None,
            CellAttack::Fgsm => Some(AttackKind::Fgsm),
            CellAttack::Bim => Some(AttackKind::Bim),
            CellAttack::Pgd => Some(AttackKind::Pgd),
        }
    }
}

impl fmt::Display for CellAttack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind() {
            None => f.write_str("clean"),
            Some(k) => k.fmt(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    WhiteBox,
    BlackBox,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::WhiteBox => "white_box",
            Setting::BlackBox => "black_box",
        })
    }
}

/// One requested grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellRequest {
    pub attack: CellAttack,
    pub setting: Setting,
    pub config: AttackConfig,
}

impl CellRequest {
    pub fn clean() -> Self {
        Self {
            attack: CellAttack::Clean,
            setting: Setting::WhiteBox,
            config: AttackConfig {
                epsilon: 0.0,
                step: 0.0,
                iterations: 0,
                ..AttackConfig::mnist(AttackKind::Fgsm)
            },
        }
    }

    pub fn white_box(kind: AttackKind, config: AttackConfig) -> Self {
        Self {
            attack: kind.into(),
            setting: Setting::WhiteBox,
            config,
        }
    }

    pub fn black_box(kind: AttackKind, config: AttackConfig) -> Self {
        Self {
            attack: kind.into(),
            setting: Setting::BlackBox,
            config,
        }
    }
}

/// Clean plus FGSM/BIM/PGD white-box cells, and the three black-box cells
/// when `black_box` is set. `preset` supplies each attack's settings.
pub fn standard_grid(preset: impl Fn(AttackKind) -> AttackConfig, black_box: bool) -> Vec<CellRequest> {
    let mut cells = vec![CellRequest::clean()];
    cells.extend(AttackKind::ALL.map(|k| CellRequest::white_box(k, preset(k))));
    if black_box {
        cells.extend(AttackKind::ALL.map(|k| CellRequest::black_box(k, preset(k))));
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub attack: CellAttack,
    pub setting: Setting,
    pub epsilon: f32,
    pub step: f32,
    pub iterations: usize,
    /// Fraction in `[0, 1]`.
    pub accuracy: f64,
    pub n_examples: usize,
    pub surrogate: Option<String>,
}

impl Cell {
    /// Column key such as `clean` or `pgd_black_box`.
    pub fn key(&self) -> String {
        match self.attack {
            CellAttack::Clean => "clean".into(),
            a => format!("{a}_{}", self.setting),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub surrogate: Option<String>,
    pub cells: Vec<Cell>,
}

impl EvalReport {
    pub fn cell(&self, attack: CellAttack, setting: Setting) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.attack == attack && (c.setting == setting || attack == CellAttack::Clean))
    }

    pub fn to_json(&self) -> String {
        canonical_json(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Header plus one row: the model id, then each cell as a percentage
    /// with two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for c in &self.cells {
            out.push(',');
            out.push_str(&c.key());
        }
        out.push('\n');
        out.push_str(&self.model);
        for c in &self.cells {
            let _ = write!(out, ",{}", percent(c.accuracy));
        }
        out.push('\n');
        out
    }

    /// Aligned two-line table for terminal output.
    pub fn table(&self) -> String {
        let keys: Vec<String> = std::iter::once("model".to_string())
            .chain(self.cells.iter().map(Cell::key))
            .collect();
        let vals: Vec<String> = std::iter::once(self.model.clone())
            .chain(self.cells.iter().map(|c| percent(c.accuracy)))
            .collect();
        let widths: Vec<usize> = keys.iter().zip(&vals).map(|(k, v)| k.len().max(v.len())).collect();
        let line = |items: &[String]| {
            items
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!("{}\n{}\n", line(&keys), line(&vals))
    }
}

/// `0.9916` as `99.16`.
pub fn percent(fraction: f64) -> String {
    format!("{:.2}", 100.0 * fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(EvalError::UnknownFormat(other.into())),
        }
    }
}

pub fn write_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<(), EvalError> {
    let text = match format {
        ReportFormat::Json => report.to_json() + "\n",
        ReportFormat::Csv => report.to_csv(),
    };
    fs::write(path, text).map_err(io_err(path))
}

/// A model and the id it is reported under.
#[derive(Debug, Clone, Copy)]
pub struct Named<'a> {
    pub model: &'a Classifier,
    pub id: &'a str,
}

/// Scores every requested cell over the whole of `ds`. Black-box cells craft
/// examples on the surrogate and score them on `model`.
pub fn evaluate_grid(
    model: Named<'_>,
    surrogate: Option<Named<'_>>,
    ds: &Dataset,
    cells: &[CellRequest],
    batch_size: usize,
) -> Result<EvalReport, EvalError> {
    let wants_black = cells.iter().any(|c| c.setting == Setting::BlackBox && c.attack != CellAttack::Clean);
    if wants_black {
        match surrogate {
            None => return Err(EvalError::MissingSurrogate),
            Some(s) if s.id == model.id => return Err(EvalError::SurrogateId(s.id.into())),
            _ => {}
        }
    }
    for c in cells {
        if c.attack != CellAttack::Clean {
            c.config.validate()?;
        }
    }
    let correct = scored(ds, batch_size, |bi, b| {
        let mut clean: Option<usize> = None;
        let mut counts = Vec::with_capacity(cells.len());
        for c in cells {
            let n = match (c.attack.kind(), c.setting) {
                (None, _) => match clean {
                    Some(n) => n,
                    None => {
                        let n = count_correct(&model.model.predict(b.images())?, b.labels());
                        clean = Some(n);
                        n
                    }
                },
                (Some(kind), Setting::WhiteBox) => {
                    let adv = run_attack(kind, model.model, b, &batch_config(&c.config, bi))?;
                    count_correct(&model.model.predict(&adv.perturbed)?, b.labels())
                }
                (Some(kind), Setting::BlackBox) => {
                    let s = surrogate.ok_or(EvalError::MissingSurrogate)?;
                    let adv = transfer_attack(s.model, model.model, b, kind, &batch_config(&c.config, bi))?;
                    count_correct(&model.model.predict(&adv.perturbed)?, b.labels())
                }
            };
            counts.push(n);
        }
        Ok(counts)
    })?;
    let report_cells = cells
        .iter()
        .zip(&correct)
        .map(|(c, &n)| {
            let black = c.setting == Setting::BlackBox && c.attack != CellAttack::Clean;
            Cell {
                attack: c.attack,
                setting: c.setting,
                epsilon: c.config.epsilon,
                step: c.config.step,
                iterations: c.config.iterations,
                accuracy: n as f64 / ds.len() as f64,
                n_examples: ds.len(),
                surrogate: black.then(|| surrogate.expect("checked above").id.to_string()),
            }
        })
        .collect();
    Ok(EvalReport {
        dataset: ds.id(),
        model: model.id.into(),
        surrogate: surrogate.filter(|_| wants_black).map(|s| s.id.to_string()),
        cells: report_cells,
    })
}

/// Writes `label,f0,...,f{D-1}` rows for the first `limit` items of `ds`
/// in dataset order.
pub fn export_features(model: &Classifier, ds: &Dataset, limit: usize, path: &Path) -> Result<(), EvalError> {
    if limit > ds.len() {
        return Err(EvalError::LimitTooLarge { limit, size: ds.len() });
    }
    let d = model.feature_width();
    let mut out = String::from("label");
    for j in 0..d {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    if limit > 0 {
        for b in ds.take(limit)?.ordered_batches(256)? {
            let z = model.extract_features(b.images())?;
            for (row, label) in z.data().chunks(d).zip(b.labels()) {
                let _ = write!(out, "{label}");
                for v in row {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
    }
    fs::write(path, out).map_err(io_err(path))
}
