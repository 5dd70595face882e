//! Few-shot and full-data fine-tuning sweeps with AUROC aggregation.

mod report;
mod train;

pub use report::{
    aggregate_csv, emit_report, read_aggregate_csv, read_results_csv, render_table, write_aggregate_csv,
    results_csv, write_results_csv, ReportFiles,
};
pub use train::{finetune, run_cell, sweep, CellFailure, Classifier, SweepContext, SweepOutcome, TrainOutcome};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::baselines::BaselineKind;
use crate::cohortgen::Cohort;
use crate::error::{Error, Result};
use crate::heads::{HeadKind, Supervision};
use crate::numkit::{key_of, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Head(HeadKind),
    Baseline(BaselineKind),
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::Head(HeadKind::Bc),
        ModelKind::Head(HeadKind::Sum),
        ModelKind::Head(HeadKind::Mask),
        ModelKind::Baseline(BaselineKind::Lr),
        ModelKind::Baseline(BaselineKind::Gru),
        ModelKind::Baseline(BaselineKind::Bigru),
        ModelKind::Baseline(BaselineKind::Lstm),
        ModelKind::Baseline(BaselineKind::Bilstm),
    ];

    pub const BC: ModelKind = ModelKind::Head(HeadKind::Bc);
    pub const SUM: ModelKind = ModelKind::Head(HeadKind::Sum);
    pub const MASK: ModelKind = ModelKind::Head(HeadKind::Mask);
    pub const LR: ModelKind = ModelKind::Baseline(BaselineKind::Lr);

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Head(h) => h.name(),
            ModelKind::Baseline(b) => b.name(),
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, ModelKind::Head(_))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("grid.models", format!("unknown model kind {s:?}")))
    }
}

impl Serialize for ModelKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ModelKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|_| {
            serde::de::Error::custom(format!(
                "unknown model kind {s:?}, expected one of bc|sum|mask|lr|gru|bigru|lstm|bilstm"
            ))
        })
    }
}

/// Number of labelled training patients, or the whole split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrainSize {
    N(usize),
    Full,
}

impl TrainSize {
    fn key(self) -> u64 {
        match self {
            TrainSize::N(n) => n as u64,
            TrainSize::Full => u64::MAX,
        }
    }
}

impl fmt::Display for TrainSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainSize::N(n) => write!(f, "{n}"),
            TrainSize::Full => f.write_str("full"),
        }
    }
}

impl FromStr for TrainSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(TrainSize::Full);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 2 => Ok(TrainSize::N(n)),
            _ => Err(Error::config("grid.train_sizes", format!("bad train size {s:?}"))),
        }
    }
}

impl Serialize for TrainSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TrainSize::N(n) => s.serialize_u64(*n as u64),
            TrainSize::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for TrainSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) if n >= 2 => Ok(TrainSize::N(n as usize)),
            Raw::N(n) => Err(serde::de::Error::custom(format!("train size {n} is below 2"))),
            Raw::S(s) => s.parse().map_err(|_| serde::de::Error::custom(format!("bad train size {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub bc: f64,
    pub sum: f64,
    pub mask: f64,
    pub lr: f64,
    pub gru: f64,
    pub bigru: f64,
    pub lstm: f64,
    pub bilstm: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            bc: 1e-3,
            sum: 1e-3,
            mask: 1e-3,
            lr: 1e-3,
            gru: 1e-3,
            bigru: 1e-5,
            lstm: 1e-3,
            bilstm: 1e-5,
        }
    }
}

impl LearningRates {
    pub fn get(&self, m: ModelKind) -> f64 {
        match m.name() {
            "bc" => self.bc,
            "sum" => self.sum,
            "mask" => self.mask,
            "lr" => self.lr,
            "gru" => self.gru,
            "bigru" => self.bigru,
            "lstm" => self.lstm,
            _ => self.bilstm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation AUROC improvement before stopping.
    pub patience: usize,
    pub learning_rates: LearningRates,
    pub freeze_label_tensor: bool,
    /// Start `Sum`/`Mask` sub-scores standardized over the training subset
    /// (label gain and bias); the initial ranking is unchanged.
    pub calibrate_label_scores: bool,
    pub supervision: Supervision,
    /// Record per-cell wall time; off makes result files reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            batch_size: 100,
            max_epochs: 100,
            patience: 5,
            learning_rates: LearningRates::default(),
            freeze_label_tensor: false,
            calibrate_label_scores: true,
            supervision: Supervision::Max,
            record_wall_time: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("finetune.batch_size", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("finetune.patience", "must be positive"));
        }
        for m in ModelKind::ALL {
            let lr = self.learning_rates.get(m);
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("finetune.learning_rates.{}", m.name()), "must be positive"));
            }
        }
        Ok(())
    }
}

pub const DEFAULT_TRAIN_SIZES: [usize; 16] = [
    10, 20, 30, 40, 50, 100, 200, 300, 400, 500, 1000, 2000, 3000, 4000, 5000, 10000,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentGrid {
    pub models: Vec<ModelKind>,
    pub train_sizes: Vec<TrainSize>,
    pub runs: usize,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        let mut train_sizes: Vec<TrainSize> = DEFAULT_TRAIN_SIZES.iter().map(|&n| TrainSize::N(n)).collect();
        train_sizes.push(TrainSize::Full);
        ExperimentGrid {
            models: ModelKind::ALL.to_vec(),
            train_sizes,
            runs: 3,
        }
    }
}

impl ExperimentGrid {
    /// Checks the grid against the size of the training split.
    pub fn validate(&self, train_split: Option<usize>) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("grid.runs", "must be at least 1"));
        }
        if self.models.is_empty() || self.train_sizes.is_empty() {
            return Err(Error::config("grid.models", "grid is empty"));
        }
        if let Some(limit) = train_split {
            for s in &self.train_sizes {
                if let TrainSize::N(n) = s {
                    if *n > limit {
                        return Err(Error::config(
                            "grid.train_sizes",
                            format!("size {n} exceeds the training split ({limit})"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Cells in output order: size, then model, then run.
    pub fn cells(&self) -> Vec<(ModelKind, TrainSize, usize)> {
        let mut sizes = self.train_sizes.clone();
        sizes.sort();
        sizes.dedup();
        let mut models = self.models.clone();
        models.sort();
        models.dedup();
        let mut out = Vec::new();
        for &s in &sizes {
            for &m in &models {
                for r in 0..self.runs {
                    out.push((m, s, r));
                }
            }
        }
        out
    }
}

/// Patient indices (into the cohort) for one fine-tuning run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShot {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Largest size whose validation subset is also subsampled.
pub const BALANCED_VAL_MAX: usize = 1000;

fn balanced(cohort: &Cohort, pool: &[usize], n: usize, rng: &mut Rng, what: &str) -> Result<Vec<usize>> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = pool.iter().partition(|&&i| cohort.patients[i].is_case());
    let (np, nn) = (n / 2, n - n / 2);
    if pos.len() < np || neg.len() < nn {
        return Err(Error::Sampling(format!(
            "{what}: need {np} cases and {nn} controls, have {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    let mut out: Vec<usize> = rng.sample_indices(pos.len(), np).into_iter().map(|i| pos[i]).collect();
    out.extend(rng.sample_indices(neg.len(), nn).into_iter().map(|i| neg[i]));
    out.sort_unstable();
    Ok(out)
}

/// Balanced few-shot subsets; the test split is always used whole.
pub fn sample_fewshot(cohort: &Cohort, size: TrainSize, rng: &mut Rng) -> Result<FewShot> {
    match size {
        TrainSize::Full => Ok(FewShot {
            train: cohort.split.train.clone(),
            val: cohort.split.val.clone(),
        }),
        TrainSize::N(n) => {
            let train = balanced(cohort, &cohort.split.train, n, rng, "training subset")?;
            let val = if n <= BALANCED_VAL_MAX {
                balanced(cohort, &cohort.split.val, n, rng, "validation subset")?
            } else {
                cohort.split.val.clone()
            };
            Ok(FewShot { train, val })
        }
    }
}

/// Sampling stream for one (size, run): identical for every model, so model
/// comparisons are paired on data.
pub fn fewshot_rng(base_seed: u64, size: TrainSize, run: usize) -> Rng {
    Rng::new(base_seed).derive_path(&[key_of("fewshot"), size.key(), run as u64])
}

/// Training seed of one cell, `hash(base, model, size, run)`.
pub fn cell_seed(base_seed: u64, model: ModelKind, size: TrainSize, run: usize) -> u64 {
    Rng::new(base_seed)
        .derive_path(&[key_of("cell"), key_of(model.name()), size.key(), run as u64])
        .next_u64()
}

/// Mann–Whitney AUROC: `(concordant + ties / 2) / (positives * negatives)`.
///
/// Computed from mid-ranks; numerators are integer or half-integer counts, so
/// the only rounding is the final division.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dims("auroc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let p = labels.iter().filter(|&&y| y == 1).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!("need both classes, got {p} positives and {n} negatives")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives keeps every quantity integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2
        let pos_in_group = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += pos_in_group * (i + j + 2) as u128;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (p as u128) * (p as u128 + 1);
    Ok(twice_u as f64 / (2.0 * p as f64 * n as f64))
}

/// One fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub model: ModelKind,
    pub train_size: TrainSize,
    pub run: usize,
    pub seed: u64,
    pub test_auc: f64,
    pub val_auc: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: ModelKind,
    pub train_size: TrainSize,
    pub auc_mean: f64,
    pub auc_std: f64,
    /// Mean AUROC minus the BC mean at the same size, in points (×100).
    pub boost_vs_bc: Option<f64>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per (size, model) mean/std of test AUROC, ordered by size then model.
pub fn aggregate(results: &[RunResult]) -> Vec<AggregateRow> {
    let mut keys: Vec<(TrainSize, ModelKind)> = results.iter().map(|r| (r.train_size, r.model)).collect();
    keys.sort();
    keys.dedup();
    let stats = |s: TrainSize, m: ModelKind| {
        let xs: Vec<f64> = results
            .iter()
            .filter(|r| r.train_size == s && r.model == m)
            .map(|r| r.test_auc)
            .collect();
        (!xs.is_empty()).then(|| mean_std(&xs))
    };
    keys.iter()
        .map(|&(s, m)| {
            let (mean, std) = stats(s, m).expect("key comes from results");
            let boost = stats(s, ModelKind::BC).map(|(bc, _)| (mean - bc) * 100.0);
            AggregateRow {
                model: m,
                train_size: s,
                auc_mean: mean,
                auc_std: std,
                boost_vs_bc: boost,
            }
        })
        .collect()
}
