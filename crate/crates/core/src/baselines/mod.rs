//! Comparison models: logistic regression on a bag of codes, and GRU/LSTM
//! classifiers trained from scratch. All read the same truncated window the
//! encoder sees.

mod rnn;

pub use rnn::{gru_cell, lstm_cell, rnn_classify, BoundRnn, CellKind, GruCell, LstmCell, RnnModel};

use serde::{Deserialize, Serialize};

use crate::cohortgen::PatientRecord;
use crate::encoder::{build_input, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::numkit::{sigmoid_scalar, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Lr,
    Gru,
    Bigru,
    Lstm,
    Bilstm,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Lr => "lr",
            BaselineKind::Gru => "gru",
            BaselineKind::Bigru => "bigru",
            BaselineKind::Lstm => "lstm",
            BaselineKind::Bilstm => "bilstm",
        }
    }
}

/// Multi-hot presence vector over the vocabulary, stored as sorted ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BagOfCodes {
    pub vocab_size: usize,
    pub present: Vec<usize>,
}

impl BagOfCodes {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.vocab_size];
        for &i in &self.present {
            v[i] = 1.0;
        }
        v
    }
}

pub fn featurize_multi_hot(patient: &PatientRecord, vocab_size: usize, max_len: usize) -> Result<BagOfCodes> {
    let seq = build_input(patient, max_len, false)?;
    let mut present: Vec<usize> = seq
        .token_ids
        .iter()
        .copied()
        .filter(|&t| t >= NUM_RESERVED)
        .collect();
    present.sort_unstable();
    present.dedup();
    if let Some(&bad) = present.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::Index {
            what: "vocabulary",
            index: bad,
            bound: vocab_size,
        });
    }
    Ok(BagOfCodes { vocab_size, present })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LrParams {
    pub fn zeros(n: usize) -> Self {
        LrParams { w: vec![0.0; n], b: 0.0 }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid_scalar(self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b)
    }
}

/// Full-batch gradient descent on mean binary cross-entropy.
pub fn lr_train(features: &[Vec<f64>], labels: &[u8], lr: f64, epochs: usize) -> Result<LrParams> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::dims("lr_train", &[features.len()], &[labels.len()]));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateData("logistic regression needs both classes".into()));
    }
    let n = features[0].len();
    let mut p = LrParams::zeros(n);
    let m = features.len() as f64;
    for _ in 0..epochs {
        let mut gw = vec![0.0; n];
        let mut gb = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let r = p.predict(x) - f64::from(y);
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += r * xi;
            }
            gb += r;
        }
        for (w, g) in p.w.iter_mut().zip(&gw) {
            *w -= lr * g / m;
        }
        p.b -= lr * gb / m;
    }
    Ok(p)
}

/// Logistic regression as a tape model, for the shared fine-tuning loop.
#[derive(Clone, Debug)]
pub struct LrModel {
    pub store: ParamStore,
    pub w: ParamId,
    pub b: ParamId,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl LrModel {
    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        let mut store = ParamStore::new();
        let w = store.add("lr.w", Tensor::zeros(&[vocab_size]));
        let b = store.add("lr.b", Tensor::scalar(0.0));
        LrModel {
            store,
            w,
            b,
            vocab_size,
            max_len,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> (Var, Var) {
        (tape.param(&self.store, self.w), tape.param(&self.store, self.b))
    }

    pub fn logit(&self, tape: &mut Tape, bound: (Var, Var), patient: &PatientRecord) -> Result<Var> {
        let x = featurize_multi_hot(patient, self.vocab_size, self.max_len)?;
        let x = tape.constant(Tensor::vector(x.to_dense()));
        let z = tape.matmul_bt(x, bound.0)?;
        tape.add(z, bound.1)
    }

    pub fn params(&self) -> LrParams {
        LrParams {
            w: self.store.value(self.w).data().to_vec(),
            b: self.store.value(self.b).item(),
        }
    }

    pub fn score(&self, patient: &PatientRecord) -> Result<f64> {
        let x = featurize_multi_hot(patient, self.vocab_size, self.max_len)?;
        let w = self.store.value(self.w).data();
        Ok(x.present.iter().map(|&i| w[i]).sum::<f64>() + self.store.value(self.b).item())
    }
}
