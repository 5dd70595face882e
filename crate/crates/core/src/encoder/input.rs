use serde::{Deserialize, Serialize};

use super::vocab::PAD;
use crate::cohortgen::{PatientRecord, Visit};
use crate::error::{Error, Result};

/// Flattened code sequence with parallel visit indices.
///
/// `pad[i] == true` marks padding; padding only appears at the tail.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSequence {
    pub token_ids: Vec<usize>,
    pub visit_ids: Vec<usize>,
    pub pad: Vec<bool>,
}

impl InputSequence {
    pub fn new(token_ids: Vec<usize>, visit_ids: Vec<usize>) -> Result<Self> {
        let pad = vec![false; token_ids.len()];
        let seq = InputSequence {
            token_ids,
            visit_ids,
            pad,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.pad.iter().filter(|p| !**p).count()
    }

    pub fn keep_mask(&self) -> Vec<bool> {
        self.pad.iter().map(|p| !p).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.token_ids.len();
        if self.visit_ids.len() != n || self.pad.len() != n {
            return Err(Error::dims(
                "input_sequence",
                &[n],
                &[self.visit_ids.len(), self.pad.len()],
            ));
        }
        let real = self.real_len();
        if self.pad[..real].iter().any(|p| *p) {
            return Err(Error::Sampling("padding must only appear at the tail".into()));
        }
        if self.visit_ids[..real].windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Sampling("visit ids must be nondecreasing".into()));
        }
        Ok(())
    }

    /// Appends `PAD` positions up to `len`.
    pub fn padded_to(mut self, len: usize) -> Self {
        while self.token_ids.len() < len {
            self.token_ids.push(PAD);
            self.visit_ids.push(0);
            self.pad.push(true);
        }
        self
    }

    /// Appends one token in a new visit directly after the last real one.
    pub fn push_next_visit(&mut self, token: usize) {
        let real = self.real_len();
        let next = self.visit_ids[..real].last().map_or(0, |v| v + 1);
        self.token_ids.truncate(real);
        self.visit_ids.truncate(real);
        self.pad.truncate(real);
        self.token_ids.push(token);
        self.visit_ids.push(next);
        self.pad.push(false);
    }
}

/// Flattens visits in event order, keeping the most recent `budget` codes and
/// re-basing visit ids so the earliest retained visit is 0.
pub fn flatten_recent(visits: &[Visit], budget: usize) -> Option<InputSequence> {
    let total: usize = visits.iter().map(|v| v.codes.len()).sum();
    if total == 0 || budget == 0 {
        return None;
    }
    let mut skip = total.saturating_sub(budget);
    let mut token_ids = Vec::with_capacity(total.min(budget));
    let mut raw_visits = Vec::with_capacity(total.min(budget));
    for (vi, visit) in visits.iter().enumerate() {
        for &code in &visit.codes {
            if skip > 0 {
                skip -= 1;
                continue;
            }
            token_ids.push(code);
            raw_visits.push(vi);
        }
    }
    let base = raw_visits[0];
    let visit_ids = raw_visits.into_iter().map(|v| v - base).collect();
    let pad = vec![false; token_ids.len()];
    Some(InputSequence {
        token_ids,
        visit_ids,
        pad,
    })
}

/// Model input from the visible history (visits before the index visit).
///
/// With `reserve_query_slot` one position is left free for a query token.
pub fn build_input(
    patient: &PatientRecord,
    max_len: usize,
    reserve_query_slot: bool,
) -> Result<InputSequence> {
    let budget = max_len - usize::from(reserve_query_slot);
    flatten_recent(patient.history(), budget)
        .ok_or_else(|| Error::EmptyHistory(patient.display_id()))
}

/// Input over the whole trajectory including the index visit, for pretraining.
pub fn build_trajectory_input(patient: &PatientRecord, max_len: usize) -> Result<InputSequence> {
    flatten_recent(patient.trajectory(), max_len)
        .ok_or_else(|| Error::EmptyHistory(patient.display_id()))
}
