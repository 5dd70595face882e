//! Prediction heads on top of the encoder.
//!
//! * `Bc`: logistic regression on the sum-pooled contextual vector.
//! * `Sum`: the pooled vector dotted with each label-tensor row.
//! * `Mask`: a `MASK` token appended as the next visit; its contextual vector
//!   dotted with each label-tensor row.
//!
//! `Sum` and `Mask` squash each row score with a sigmoid and report the
//! largest as the patient's probability.

use serde::{Deserialize, Serialize};

use crate::cohortgen::PatientRecord;
use crate::encoder::{build_input, Encoder, EncoderParams, InputSequence, Mode, Vocabulary, MASK};
use crate::error::{Error, Result};
use crate::numkit::{sigmoid_scalar, ParamId, ParamStore, Rng, Tape, Tensor, Var};

pub const BC_WEIGHT: &str = "head.bc.w";
pub const BC_BIAS: &str = "head.bc.b";
pub const LABEL_BIAS: &str = "head.label_bias";
pub const LABEL_GAIN: &str = "head.label_gain";

/// Clamp applied to probabilities inside the fine-tuning loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Bc,
    Sum,
    Mask,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Bc => "bc",
            HeadKind::Sum => "sum",
            HeadKind::Mask => "mask",
        }
    }
}

/// How `Sum` and `Mask` heads are supervised during fine-tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Binary cross-entropy on the largest sub-probability.
    #[default]
    Max,
    /// Mean binary cross-entropy over every row, positive only for the onset
    /// code observed at the index visit.
    MultiLabel,
}

/// Onset codes and their token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetCodeSet {
    pub codes: Vec<String>,
    pub ids: Vec<usize>,
}

impl TargetCodeSet {
    pub fn new<S: AsRef<str>>(vocab: &Vocabulary, codes: &[S]) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::Vocabulary("target code set is empty".into()));
        }
        let ids = codes
            .iter()
            .map(|c| vocab.require(c.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        for (i, id) in ids.iter().enumerate() {
            if Vocabulary::is_reserved(*id) || ids[..i].contains(id) {
                return Err(Error::Vocabulary(format!("target code {} repeated or reserved", codes[i].as_ref())));
            }
        }
        Ok(TargetCodeSet {
            codes: codes.iter().map(|c| c.as_ref().to_string()).collect(),
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks the set against codes that must never be targets.
    pub fn ensure_disjoint(&self, excluded: &[usize]) -> Result<()> {
        match self.ids.iter().find(|id| excluded.contains(id)) {
            Some(id) => Err(Error::Vocabulary(format!("target id {id} is also an excluded code"))),
            None => Ok(()),
        }
    }
}

/// `K × d` rows of the token embedding for the target codes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTensor {
    pub code_ids: Vec<usize>,
    pub matrix: Tensor,
}

pub fn extract_label_tensor(params: &EncoderParams, targets: &TargetCodeSet) -> Result<LabelTensor> {
    let emb = params.token_embedding();
    if let Some(&bad) = targets.ids.iter().find(|&&id| id >= emb.rows()) {
        return Err(Error::Vocabulary(format!("target id {bad} outside the embedding table")));
    }
    Ok(LabelTensor {
        code_ids: targets.ids.clone(),
        matrix: emb.gather_rows(&targets.ids)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub head_kind: HeadKind,
    pub sub_scores: Option<Vec<f64>>,
    pub sub_probs: Option<Vec<f64>>,
    pub final_prob: f64,
}

impl Prediction {
    pub fn from_logit(head_kind: HeadKind, logit: f64) -> Self {
        Prediction {
            head_kind,
            sub_scores: None,
            sub_probs: None,
            final_prob: sigmoid_scalar(logit),
        }
    }

    pub fn from_sub_scores(head_kind: HeadKind, scores: Vec<f64>) -> Self {
        let probs: Vec<f64> = scores.iter().map(|&s| sigmoid_scalar(s)).collect();
        let final_prob = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Prediction {
            head_kind,
            sub_scores: Some(scores),
            sub_probs: Some(probs),
            final_prob,
        }
    }

    /// The largest raw sub-score, or the logit of `final_prob` for `Bc`.
    pub fn max_score(&self) -> f64 {
        match &self.sub_scores {
            Some(s) => s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            None => (self.final_prob / (1.0 - self.final_prob)).ln(),
        }
    }
}

/// Column sums over non-pad rows.
pub fn pool_sum(contextual: &Tensor, pad: &[bool]) -> Result<Tensor> {
    let (r, c) = contextual.dims2();
    if pad.len() != r {
        return Err(Error::dims("pool_sum", contextual.shape(), &[pad.len()]));
    }
    if pad.iter().all(|p| *p) {
        return Err(Error::EmptyHistory("<all-pad input>".into()));
    }
    let mut out = vec![0.0; c];
    for i in (0..r).filter(|&i| !pad[i]) {
        for (o, x) in out.iter_mut().zip(contextual.row(i)) {
            *o += x;
        }
    }
    Ok(Tensor::vector(out))
}

pub fn predict_bc(contextual: &Tensor, pad: &[bool], w: &Tensor, b: f64) -> Result<Prediction> {
    let pooled = pool_sum(contextual, pad)?;
    if w.len() != pooled.len() {
        return Err(Error::dims("predict_bc", w.shape(), pooled.shape()));
    }
    let z: f64 = w.data().iter().zip(pooled.data()).map(|(a, b)| a * b).sum::<f64>() + b;
    Ok(Prediction::from_logit(HeadKind::Bc, z))
}

fn label_scores(label: &LabelTensor, v: &Tensor) -> Result<Vec<f64>> {
    let (k, d) = label.matrix.dims2();
    if v.len() != d {
        return Err(Error::dims("label_scores", label.matrix.shape(), v.shape()));
    }
    Ok((0..k)
        .map(|j| label.matrix.row(j).iter().zip(v.data()).map(|(a, b)| a * b).sum())
        .collect())
}

pub fn predict_sum(contextual: &Tensor, pad: &[bool], label: &LabelTensor) -> Result<Prediction> {
    let pooled = pool_sum(contextual, pad)?;
    Ok(Prediction::from_sub_scores(HeadKind::Sum, label_scores(label, &pooled)?))
}

/// History with one slot reserved, then `MASK` in the following visit.
pub fn build_mask_query(patient: &PatientRecord, max_len: usize) -> Result<InputSequence> {
    let mut seq = build_input(patient, max_len, true)?;
    seq.push_next_visit(MASK);
    Ok(seq)
}

pub fn predict_mask(
    patient: &PatientRecord,
    params: &EncoderParams,
    label: &LabelTensor,
) -> Result<Prediction> {
    let seq = build_mask_query(patient, params.config().max_seq_len)?;
    let ctx = params.encode(&seq)?;
    let query = Tensor::vector(ctx.row(seq.len() - 1).to_vec());
    Ok(Prediction::from_sub_scores(HeadKind::Mask, label_scores(label, &query)?))
}

fn bce(p: f64, label: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Binary cross-entropy of a prediction, using `final_prob` (the largest
/// sub-probability for `Sum`/`Mask`).
pub fn finetune_loss(pred: &Prediction, label: u8) -> f64 {
    bce(pred.final_prob, f64::from(label))
}

/// Multi-label alternative: mean BCE over rows against a one-hot onset code.
pub fn finetune_loss_multilabel(pred: &Prediction, positive_row: Option<usize>) -> Result<f64> {
    let probs = pred
        .sub_probs
        .as_ref()
        .ok_or_else(|| Error::config("finetune.supervision", "multi-label loss needs sub-scores"))?;
    Ok(probs
        .iter()
        .enumerate()
        .map(|(j, &p)| bce(p, if Some(j) == positive_row { 1.0 } else { 0.0 }))
        .sum::<f64>()
        / probs.len() as f64)
}

/// A trainable encoder plus one head, all in one parameter store.
#[derive(Clone, Debug)]
pub struct HeadModel {
    pub kind: HeadKind,
    pub encoder: Encoder,
    pub store: ParamStore,
    pub bc: Option<(ParamId, ParamId)>,
    /// Per-row `[1, K]` factor on label-tensor sub-scores (`Sum` and `Mask`).
    pub label_gain: Option<ParamId>,
    /// Per-row offset added to label-tensor sub-scores after the gain.
    pub label_bias: Option<ParamId>,
    pub targets: TargetCodeSet,
    /// Label rows fixed at construction; `None` means a live re-gather.
    frozen_label: Option<Tensor>,
    pub supervision: Supervision,
}

impl HeadModel {
    /// Starts from pretrained (or freshly initialised) encoder parameters.
    /// `Bc` weights are drawn from `N(0, init_std)` with zero bias.
    pub fn new(
        kind: HeadKind,
        params: &EncoderParams,
        targets: &TargetCodeSet,
        freeze_label: bool,
        supervision: Supervision,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        for (_, p) in params.store.iter() {
            if p.name.starts_with("encoder.") {
                let id = store.add(&p.name, p.value.clone());
                store.get_mut(id).trainable = p.trainable;
            }
        }
        let encoder = Encoder::attach(params.config(), &store)?;
        let d = params.config().d_model;
        let bc = (kind == HeadKind::Bc).then(|| {
            let std = params.config().init_std;
            let w = Tensor::vector((0..d).map(|_| std * rng.normal()).collect());
            (store.add(BC_WEIGHT, w), store.add(BC_BIAS, Tensor::scalar(0.0)))
        });
        let k = targets.len();
        let label_gain = (kind != HeadKind::Bc).then(|| store.add(LABEL_GAIN, Tensor::full(&[1, k], 1.0)));
        let label_bias = (kind != HeadKind::Bc).then(|| store.add(LABEL_BIAS, Tensor::zeros(&[k])));
        let frozen_label = if freeze_label && kind != HeadKind::Bc {
            Some(extract_label_tensor(params, targets)?.matrix)
        } else {
            None
        };
        Ok(HeadModel {
            kind,
            encoder,
            store,
            bc,
            label_gain,
            label_bias,
            targets: targets.clone(),
            frozen_label,
            supervision,
        })
    }

    pub fn encoder_params(&self) -> EncoderParams {
        EncoderParams {
            encoder: self.encoder.clone(),
            store: self.store.clone(),
        }
    }

    /// Current label tensor (the frozen copy, or the live embedding rows).
    pub fn label_tensor(&self) -> Result<LabelTensor> {
        match &self.frozen_label {
            Some(m) => Ok(LabelTensor {
                code_ids: self.targets.ids.clone(),
                matrix: m.clone(),
            }),
            None => extract_label_tensor(&self.encoder_params(), &self.targets),
        }
    }

    pub fn input_for(&self, patient: &PatientRecord) -> Result<InputSequence> {
        let max_len = self.encoder.config().max_seq_len;
        match self.kind {
            HeadKind::Mask => build_mask_query(patient, max_len),
            _ => build_input(patient, max_len, false),
        }
    }

    /// Records the head output for one patient: a `[1, 1]` logit for `Bc`,
    /// `[1, K]` sub-scores otherwise.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundHead, seq: &InputSequence, mode: &mut Mode) -> Result<Var> {
        let ctx = bound.encoder.encode(tape, seq, mode)?;
        match self.kind {
            HeadKind::Bc => {
                let pooled = tape.sum_rows(ctx, &seq.keep_mask())?;
                let (w, b) = bound.bc.expect("bc head has weights");
                let z = tape.matmul_bt(pooled, w)?;
                tape.add(z, b)
            }
            HeadKind::Sum | HeadKind::Mask => {
                let v = if self.kind == HeadKind::Sum {
                    tape.sum_rows(ctx, &seq.keep_mask())?
                } else {
                    tape.gather(ctx, &[seq.real_len() - 1])?
                };
                let mut scores = tape.matmul_bt(v, bound.label)?;
                if let Some(g) = bound.label_gain {
                    scores = tape.mul(scores, g)?;
                }
                match bound.label_bias {
                    Some(b) => tape.add_row(scores, b),
                    None => Ok(scores),
                }
            }
        }
    }

    /// Standardizes the top sub-score over `patients`: every row gets gain
    /// `1/sd` and bias `-mean/sd`. Training then starts near probability one
    /// half with unit-scale logits, and no score is reordered. No-op for `Bc`.
    pub fn calibrate_scores(&mut self, patients: &[&PatientRecord]) -> Result<()> {
        let (Some(gain), Some(bias)) = (self.label_gain, self.label_bias) else {
            return Ok(());
        };
        let k = self.targets.len();
        self.store.get_mut(gain).value = Tensor::full(&[1, k], 1.0);
        self.store.get_mut(bias).value = Tensor::zeros(&[k]);
        let top = self.scores(patients)?;
        let n = top.len().max(1) as f64;
        let mean = top.iter().sum::<f64>() / n;
        let sd = (top.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n).sqrt();
        let g = if sd.is_finite() && sd > 1e-12 { 1.0 / sd } else { 1.0 };
        self.store.get_mut(gain).value = Tensor::full(&[1, k], g);
        self.store.get_mut(bias).value = Tensor::vector(vec![-mean * g; k]);
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundHead> {
        let encoder = self.encoder.bind(tape, &self.store);
        let bc = self
            .bc
            .map(|(w, b)| (tape.param(&self.store, w), tape.param(&self.store, b)));
        let label = match &self.frozen_label {
            Some(m) => tape.constant(m.clone()),
            None => tape.gather(encoder.token_embedding, &self.targets.ids)?,
        };
        let label_gain = self.label_gain.map(|g| tape.param(&self.store, g));
        let label_bias = self.label_bias.map(|b| tape.param(&self.store, b));
        Ok(BoundHead {
            encoder,
            bc,
            label,
            label_gain,
            label_bias,
        })
    }

    /// Fine-tuning loss for one patient on the tape.
    pub fn loss(&self, tape: &mut Tape, bound: &BoundHead, patient: &PatientRecord, mode: &mut Mode) -> Result<Var> {
        let seq = self.input_for(patient)?;
        let out = self.forward(tape, bound, &seq, mode)?;
        let y = f64::from(patient.label);
        match (self.kind, self.supervision) {
            (HeadKind::Bc, _) | (_, Supervision::Max) => {
                let top = tape.max(out);
                Ok(tape.bce_logit(top, y))
            }
            (_, Supervision::MultiLabel) => {
                let row = self.observed_target_row(patient);
                let k = self.targets.len();
                let mut total: Option<Var> = None;
                for j in 0..k {
                    let s = tape.slice_cols(out, j, 1)?;
                    let l = tape.bce_logit(s, if Some(j) == row { 1.0 } else { 0.0 });
                    total = Some(match total {
                        Some(t) => tape.add(t, l)?,
                        None => l,
                    });
                }
                Ok(tape.scale(total.expect("K >= 1"), 1.0 / k as f64))
            }
        }
    }

    fn observed_target_row(&self, patient: &PatientRecord) -> Option<usize> {
        if !patient.is_case() {
            return None;
        }
        let index = patient.visits.get(patient.index_visit)?;
        index
            .codes
            .iter()
            .find_map(|c| self.targets.ids.iter().position(|t| t == c))
    }

    pub fn predict(&self, patient: &PatientRecord) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let seq = self.input_for(patient)?;
        let out = self.forward(&mut tape, &bound, &seq, &mut Mode::Eval)?;
        let values = tape.value(out).data().to_vec();
        Ok(match self.kind {
            HeadKind::Bc => Prediction::from_logit(HeadKind::Bc, values[0]),
            kind => Prediction::from_sub_scores(kind, values),
        })
    }

    /// Ranking scores for many patients (largest raw score per patient), one tape.
    pub fn scores(&self, patients: &[&PatientRecord]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let mut out = Vec::with_capacity(patients.len());
        for p in patients {
            let mark = tape.len();
            let seq = self.input_for(p)?;
            let v = self.forward(&mut tape, &bound, &seq, &mut Mode::Eval)?;
            out.push(tape.value(v).data().iter().copied().fold(f64::NEG_INFINITY, f64::max));
            tape.truncate(mark);
        }
        Ok(out)
    }
}

/// Head parameters recorded on one tape.
pub struct BoundHead {
    pub encoder: crate::encoder::BoundEncoder,
    pub bc: Option<(Var, Var)>,
    pub label: Var,
    pub label_gain: Option<Var>,
    pub label_bias: Option<Var>,
}

#[cfg(test)]
mod tests;
