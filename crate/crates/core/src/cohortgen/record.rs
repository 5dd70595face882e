use serde::{Deserialize, Serialize};

/// One encounter: the token ids of the codes recorded at it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Visit {
    pub codes: Vec<usize>,
}

impl Visit {
    pub fn new(codes: Vec<usize>) -> Self {
        Visit { codes }
    }
}

/// A patient's full trajectory.
///
/// `visits[index_visit]` is the index visit: for cases the visit holding the
/// first onset code, for controls a final visit of ordinary codes. Models see
/// only `visits[..index_visit]`; pretraining sees the whole trajectory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: u64,
    pub label: u8,
    pub visits: Vec<Visit>,
    pub index_visit: usize,
}

impl PatientRecord {
    pub fn is_case(&self) -> bool {
        self.label == 1
    }

    pub fn history(&self) -> &[Visit] {
        &self.visits[..self.index_visit.min(self.visits.len())]
    }

    pub fn trajectory(&self) -> &[Visit] {
        &self.visits
    }

    pub fn history_codes(&self) -> impl Iterator<Item = usize> + '_ {
        self.history().iter().flat_map(|v| v.codes.iter().copied())
    }

    pub fn display_id(&self) -> String {
        format!("P{:06}", self.patient_id)
    }
}
