//! Synthetic longitudinal cohorts with a planted onset signal.
//!
//! A patient is a sequence of visits whose codes come from a few
//! patient-specific background clusters plus occasional risk codes. Onset
//! probability is `sigmoid(beta * distinct_risk + gamma * risk_pairs + bias)`,
//! where `risk_pairs` counts designated risk-code pairs that both occur. Every
//! trajectory ends in a one-code index visit: a uniformly chosen onset code
//! for cases, an ordinary background code for controls. Would-be controls
//! carrying an exclusion ("other cancer") code are discarded and redrawn.

mod dataset;
mod record;

pub use dataset::{read_dataset, write_dataset, DatasetHeader, DATASET_FORMAT};
pub use record::{PatientRecord, Visit};

use serde::{Deserialize, Serialize};

use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::numkit::{key_of, sigmoid_scalar, Rng};

/// The eight onset codes of the reference task.
pub const TARGET_CODES: [&str; 8] = [
    "C25.0", "C25.1", "C25.2", "C25.3", "C25.4", "C25.7", "C25.8", "C25.9",
];

/// Case fraction of the reference cohort, 12,273 of 31,243.
pub const REFERENCE_CASE_FRACTION: f64 = 12_273.0 / 31_243.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_patients: usize,
    pub visits_min: usize,
    pub visits_max: usize,
    pub codes_per_visit_min: usize,
    pub codes_per_visit_max: usize,
    pub n_risk_codes: usize,
    /// Probability that any single history code is a risk code.
    pub risk_prevalence: f64,
    pub n_confounder_codes: usize,
    /// Fraction of would-be controls that carry an exclusion code.
    pub confounder_rate: f64,
    pub n_background_codes: usize,
    pub n_clusters: usize,
    pub clusters_per_patient: usize,
    /// Probability that a background code comes from the patient's own clusters.
    pub cluster_affinity: f64,
    /// Probability that a risk draw repeats the patient's own recurring risk code.
    pub risk_affinity: f64,
    pub signal_strength: f64,
    /// Weight of repeated risk occurrences relative to distinct risk codes.
    pub repeat_weight: f64,
    /// Target case fraction; the onset bias is tuned to reach it.
    pub case_fraction: f64,
    /// Set from the run's master seed, never from a config section.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_patients: 20_000,
            visits_min: 2,
            visits_max: 10,
            codes_per_visit_min: 1,
            codes_per_visit_max: 4,
            n_risk_codes: 12,
            risk_prevalence: 0.04,
            n_confounder_codes: 20,
            confounder_rate: 0.05,
            n_background_codes: 457,
            n_clusters: 16,
            clusters_per_patient: 2,
            cluster_affinity: 0.8,
            risk_affinity: 0.0,
            signal_strength: 1.0,
            repeat_weight: 0.0,
            case_fraction: REFERENCE_CASE_FRACTION,
            seed: 17,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: &str| Err(Error::config(format!("gen.{k}"), m));
        if self.visits_min == 0 || self.visits_min > self.visits_max {
            return err("visits_min", "need 1 <= visits_min <= visits_max");
        }
        if self.codes_per_visit_min == 0 || self.codes_per_visit_min > self.codes_per_visit_max {
            return err("codes_per_visit_min", "need 1 <= min <= max");
        }
        for (k, p) in [
            ("risk_prevalence", self.risk_prevalence),
            ("confounder_rate", self.confounder_rate),
            ("cluster_affinity", self.cluster_affinity),
            ("risk_affinity", self.risk_affinity),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(k, "must be a probability");
            }
        }
        if self.confounder_rate >= 1.0 {
            return err("confounder_rate", "every control would be excluded");
        }
        if !(0.0..1.0).contains(&self.case_fraction) {
            return err("case_fraction", "must be in [0, 1)");
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return err("signal_strength", "must be nonnegative");
        }
        if !(self.repeat_weight >= 0.0 && self.repeat_weight.is_finite()) {
            return err("repeat_weight", "must be nonnegative");
        }
        if self.n_background_codes == 0 || self.n_clusters == 0 {
            return err("n_background_codes", "need background codes and clusters");
        }
        if self.n_clusters > self.n_background_codes {
            return err("n_clusters", "more clusters than background codes");
        }
        if self.clusters_per_patient == 0 || self.clusters_per_patient > self.n_clusters {
            return err("clusters_per_patient", "must be in 1..=n_clusters");
        }
        if self.risk_prevalence > 0.0 && self.n_risk_codes == 0 {
            return err("n_risk_codes", "risk prevalence needs risk codes");
        }
        if self.confounder_rate > 0.0 && self.n_confounder_codes == 0 {
            return err("n_confounder_codes", "confounder rate needs confounder codes");
        }
        Ok(())
    }

    /// Largest trajectory length in codes, history plus the index visit.
    pub fn max_trajectory_codes(&self) -> usize {
        self.visits_max * self.codes_per_visit_max + 1
    }
}

/// Disjoint partitions of the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeUniverse {
    pub vocab: Vocabulary,
    pub targets: Vec<usize>,
    pub risk: Vec<usize>,
    pub confounders: Vec<usize>,
    pub background: Vec<usize>,
    /// Background ids grouped into clusters.
    pub clusters: Vec<Vec<usize>>,
}

impl CodeUniverse {
    pub fn from_config(cfg: &GenConfig) -> Result<Self> {
        let mut vocab = Vocabulary::new();
        let mut add_all = |names: Vec<String>| -> Result<Vec<usize>> {
            names.iter().map(|n| vocab.insert(n)).collect()
        };
        let targets = add_all(TARGET_CODES.iter().map(|s| s.to_string()).collect())?;
        let risk = add_all((0..cfg.n_risk_codes).map(|i| format!("RSK{i:03}")).collect())?;
        let confounders =
            add_all((0..cfg.n_confounder_codes).map(|i| format!("CAN{i:03}")).collect())?;
        let background =
            add_all((0..cfg.n_background_codes).map(|i| format!("BG{i:04}")).collect())?;
        let clusters = (0..cfg.n_clusters)
            .map(|c| {
                background
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|(i, _)| i % cfg.n_clusters == c)
                    .map(|(_, id)| id)
                    .collect()
            })
            .collect();
        Ok(CodeUniverse {
            vocab,
            targets,
            risk,
            confounders,
            background,
            clusters,
        })
    }

    pub fn is_target(&self, id: usize) -> bool {
        self.targets.contains(&id)
    }

    pub fn is_confounder(&self, id: usize) -> bool {
        self.confounders.contains(&id)
    }
}

/// Latent onset model shared by every patient of a cohort.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OnsetModel {
    pub signal_strength: f64,
    pub repeat_weight: f64,
    pub bias: f64,
}

impl OnsetModel {
    /// `β · (distinct risk codes + ρ · repeated risk occurrences)`.
    pub fn risk_score(&self, universe: &CodeUniverse, history: &[Visit]) -> f64 {
        let mut present = vec![false; universe.risk.len()];
        let mut occurrences = 0usize;
        for code in history.iter().flat_map(|v| &v.codes) {
            if let Some(i) = universe.risk.iter().position(|r| r == code) {
                present[i] = true;
                occurrences += 1;
            }
        }
        let distinct = present.iter().filter(|p| **p).count();
        let repeats = (occurrences - distinct) as f64;
        self.signal_strength * (distinct as f64 + self.repeat_weight * repeats)
    }

    pub fn onset_probability(&self, universe: &CodeUniverse, history: &[Visit]) -> f64 {
        if self.bias == f64::NEG_INFINITY {
            return 0.0;
        }
        sigmoid_scalar(self.risk_score(universe, history) + self.bias)
    }
}

fn draw_background(
    cfg: &GenConfig,
    universe: &CodeUniverse,
    own: &[usize],
    rng: &mut Rng,
) -> usize {
    if rng.bernoulli(cfg.cluster_affinity) {
        let cluster = &universe.clusters[own[rng.below(own.len())]];
        cluster[rng.below(cluster.len())]
    } else {
        universe.background[rng.below(universe.background.len())]
    }
}

fn draw_history(cfg: &GenConfig, universe: &CodeUniverse, rng: &mut Rng) -> (Vec<Visit>, Vec<usize>) {
    let own = rng.sample_indices(cfg.n_clusters, cfg.clusters_per_patient);
    let own_risk = (cfg.risk_affinity > 0.0 && !universe.risk.is_empty())
        .then(|| universe.risk[rng.below(universe.risk.len())]);
    let n_visits = rng.range_inclusive(cfg.visits_min, cfg.visits_max);
    let visits = (0..n_visits)
        .map(|_| {
            let n = rng.range_inclusive(cfg.codes_per_visit_min, cfg.codes_per_visit_max);
            let codes = (0..n)
                .map(|_| {
                    if !universe.risk.is_empty() && rng.bernoulli(cfg.risk_prevalence) {
                        match own_risk {
                            Some(r) if rng.bernoulli(cfg.risk_affinity) => r,
                            _ => universe.risk[rng.below(universe.risk.len())],
                        }
                    } else {
                        draw_background(cfg, universe, &own, rng)
                    }
                })
                .collect();
            Visit::new(codes)
        })
        .collect();
    (visits, own)
}

/// Draws one patient; excluded controls are redrawn until one is accepted.
pub fn gen_patient(
    cfg: &GenConfig,
    universe: &CodeUniverse,
    onset: &OnsetModel,
    patient_id: u64,
    rng: &mut Rng,
) -> PatientRecord {
    loop {
        let (mut history, own) = draw_history(cfg, universe, rng);
        let p = onset.onset_probability(universe, &history);
        let is_case = rng.bernoulli(p);
        if !is_case && rng.bernoulli(cfg.confounder_rate) {
            let v = rng.below(history.len());
            let code = universe.confounders[rng.below(universe.confounders.len())];
            history[v].codes.push(code);
        }
        if !is_case && history.iter().flat_map(|v| &v.codes).any(|&c| universe.is_confounder(c)) {
            continue;
        }
        let index_code = if is_case {
            universe.targets[rng.below(universe.targets.len())]
        } else {
            draw_background(cfg, universe, &own, rng)
        };
        let index_visit = history.len();
        history.push(Visit::new(vec![index_code]));
        return PatientRecord {
            patient_id,
            label: u8::from(is_case),
            visits: history,
            index_visit,
        };
    }
}

/// Chooses the onset bias so the expected case fraction matches the target,
/// accounting for excluded controls being redrawn.
pub fn tune_bias(cfg: &GenConfig, universe: &CodeUniverse, rng: &Rng) -> Result<f64> {
    let f = cfg.case_fraction;
    if !(0.0..1.0).contains(&f) {
        return Err(Error::config("gen.case_fraction", "infeasible case fraction"));
    }
    if f == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let q = cfg.confounder_rate;
    // f = p / (1 - q (1 - p))  =>  p = f (1 - q) / (1 - f q)
    let p = f * (1.0 - q) / (1.0 - f * q);
    let mut pilot_rng = rng.derive_str("bias_pilot");
    let scores: Vec<f64> = (0..4000)
        .map(|_| {
            let (h, _) = draw_history(cfg, universe, &mut pilot_rng);
            OnsetModel {
                signal_strength: cfg.signal_strength,
                repeat_weight: cfg.repeat_weight,
                bias: 0.0,
            }
            .risk_score(universe, &h)
        })
        .collect();
    let mean_rate =
        |b: f64| scores.iter().map(|s| sigmoid_scalar(s + b)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_rate(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// Patient indices per split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn kind_of(&self, n: usize) -> Vec<SplitKind> {
        let mut kinds = vec![SplitKind::Train; n];
        for &i in &self.val {
            kinds[i] = SplitKind::Val;
        }
        for &i in &self.test {
            kinds[i] = SplitKind::Test;
        }
        kinds
    }

    pub fn from_kinds(kinds: &[SplitKind]) -> Self {
        let mut s = Split::default();
        for (i, k) in kinds.iter().enumerate() {
            match k {
                SplitKind::Train => s.train.push(i),
                SplitKind::Val => s.val.push(i),
                SplitKind::Test => s.test.push(i),
            }
        }
        s
    }
}

/// 7:1:2 split sizes; validation and test round down, train takes the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 5;
    (n - val - test, val, test)
}

/// Shuffled 7:1:2 assignment of `n` patients.
pub fn split_cohort(n: usize, rng: &mut Rng) -> Result<Split> {
    if n < 10 {
        return Err(Error::Sampling(format!("cannot split {n} patients 7:1:2")));
    }
    let (train, val, _) = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut s = Split {
        train: order[..train].to_vec(),
        val: order[train..train + val].to_vec(),
        test: order[train + val..].to_vec(),
    };
    s.train.sort_unstable();
    s.val.sort_unstable();
    s.test.sort_unstable();
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub config: GenConfig,
    pub universe: CodeUniverse,
    pub onset: OnsetModel,
    pub patients: Vec<PatientRecord>,
    pub split: Split,
}

impl Cohort {
    pub fn case_count(&self) -> usize {
        self.patients.iter().filter(|p| p.is_case()).count()
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&PatientRecord> {
        idx.iter().map(|&i| &self.patients[i]).collect()
    }

    pub fn train(&self) -> Vec<&PatientRecord> {
        self.subset(&self.split.train)
    }

    pub fn val(&self) -> Vec<&PatientRecord> {
        self.subset(&self.split.val)
    }

    pub fn test(&self) -> Vec<&PatientRecord> {
        self.subset(&self.split.test)
    }
}

/// Generates `cfg.n_patients` patients from per-patient streams, then splits them.
pub fn gen_cohort(cfg: &GenConfig) -> Result<Cohort> {
    cfg.validate()?;
    let universe = CodeUniverse::from_config(cfg)?;
    let root = Rng::new(cfg.seed);
    let bias = tune_bias(cfg, &universe, &root)?;
    let onset = OnsetModel {
        signal_strength: cfg.signal_strength,
        repeat_weight: cfg.repeat_weight,
        bias,
    };
    let patient_root = root.derive_str("patients");
    let patients = (0..cfg.n_patients as u64)
        .map(|id| {
            let mut rng = patient_root.derive(id);
            gen_patient(cfg, &universe, &onset, id, &mut rng)
        })
        .collect();
    let split = split_cohort(cfg.n_patients, &mut root.derive(key_of("split")))?;
    Ok(Cohort {
        config: cfg.clone(),
        universe,
        onset,
        patients,
        split,
    })
}
