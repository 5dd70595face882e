//! Line-delimited JSON dataset files: a header record, then one patient per line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Cohort, CodeUniverse, GenConfig, OnsetModel, PatientRecord, Split, SplitKind, Visit};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "onset-dataset v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub seed: u64,
    pub n_patients: usize,
    /// Tuned onset bias; absent when the case fraction is zero.
    pub onset_bias: Option<f64>,
    pub config: GenConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientLine {
    patient_id: u64,
    label: u8,
    split: SplitKind,
    visits: Vec<Visit>,
    index_visit: usize,
}

pub fn write_dataset<W: Write>(cohort: &Cohort, mut out: W) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<dataset>", e);
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        seed: cohort.config.seed,
        n_patients: cohort.patients.len(),
        onset_bias: cohort.onset.bias.is_finite().then_some(cohort.onset.bias),
        config: cohort.config.clone(),
    };
    writeln!(out, "{}", json(&header)).map_err(io)?;
    let kinds = cohort.split.kind_of(cohort.patients.len());
    for (p, kind) in cohort.patients.iter().zip(kinds) {
        let line = PatientLine {
            patient_id: p.patient_id,
            label: p.label,
            split: kind,
            visits: p.visits.clone(),
            index_visit: p.index_visit,
        };
        writeln!(out, "{}", json(&line)).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("dataset records always serialize")
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Cohort> {
    let bad = |line: usize, message: String| Error::Format {
        what: "dataset",
        line,
        message,
    };
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| bad(1, "empty file".into()))?
        .map_err(|e| Error::io("<dataset>", e))?;
    let mut header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| bad(1, e.to_string()))?;
    header.config.seed = header.seed;
    if header.format != DATASET_FORMAT {
        return Err(bad(1, format!("unsupported format {:?}", header.format)));
    }
    header.config.validate()?;
    let universe = CodeUniverse::from_config(&header.config)?;
    let mut patients = Vec::with_capacity(header.n_patients);
    let mut kinds = Vec::with_capacity(header.n_patients);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.is_empty() {
            continue;
        }
        let p: PatientLine = serde_json::from_str(&line).map_err(|e| bad(lineno, e.to_string()))?;
        if p.label > 1 || p.index_visit >= p.visits.len() {
            return Err(bad(lineno, "label or index_visit out of range".into()));
        }
        if p.visits.iter().flat_map(|v| &v.codes).any(|&c| c >= universe.vocab.len()) {
            return Err(bad(lineno, "code id outside the vocabulary".into()));
        }
        kinds.push(p.split);
        patients.push(PatientRecord {
            patient_id: p.patient_id,
            label: p.label,
            visits: p.visits,
            index_visit: p.index_visit,
        });
    }
    if patients.len() != header.n_patients {
        return Err(bad(
            1,
            format!("header declares {} patients, found {}", header.n_patients, patients.len()),
        ));
    }
    Ok(Cohort {
        onset: OnsetModel {
            signal_strength: header.config.signal_strength,
            repeat_weight: header.config.repeat_weight,
            bias: header.onset_bias.unwrap_or(f64::NEG_INFINITY),
        },
        config: header.config,
        universe,
        patients,
        split: Split::from_kinds(&kinds),
    })
}
