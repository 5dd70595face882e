//! Masked-token pretraining of the encoder.

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerState, Provenance};
use crate::cohortgen::PatientRecord;
use crate::encoder::{
    build_trajectory_input, Encoder, EncoderConfig, EncoderParams, InputSequence, Mode, MASK,
    NUM_RESERVED,
};
use crate::error::{Error, Result};
use crate::numkit::{Adam, ParamId, ParamStore, Rng, Tape, Tensor, Var};

pub const MLM_BIAS: &str = "mlm.bias";

/// Corruption recipe applied to selected positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingPolicy {
    pub select_rate: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
    /// Select one uniformly chosen position when the draw selects none.
    pub force_selection: bool,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            select_rate: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
            force_selection: true,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.mask_frac, self.random_frac, self.keep_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("pretrain.masking", "mask/random/keep fractions must sum to 1"));
        }
        if !(0.0..1.0).contains(&self.select_rate) {
            return Err(Error::config("pretrain.masking.select_rate", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// What happened to one selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Masked,
    Random,
    Kept,
}

/// A corrupted sequence; `targets[i]` is the original token at selected
/// positions and `None` elsewhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmExample {
    pub input: InputSequence,
    pub targets: Vec<Option<usize>>,
    pub corruptions: Vec<Option<Corruption>>,
}

impl MlmExample {
    pub fn selected(&self) -> (Vec<usize>, Vec<usize>) {
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (i, t)))
            .unzip()
    }
}

pub fn apply_masking(
    seq: &InputSequence,
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<MlmExample> {
    seq.validate()?;
    let real = seq.real_len();
    if real == 0 {
        return Err(Error::EmptyHistory("<masking input>".into()));
    }
    let mut selected: Vec<bool> = (0..seq.len())
        .map(|i| !seq.pad[i] && rng.bernoulli(policy.select_rate))
        .collect();
    if policy.force_selection && !selected.iter().any(|s| *s) {
        selected[rng.below(real)] = true;
    }
    let mut input = seq.clone();
    let mut targets = vec![None; seq.len()];
    let mut corruptions = vec![None; seq.len()];
    for i in (0..seq.len()).filter(|&i| selected[i]) {
        targets[i] = Some(seq.token_ids[i]);
        let u = rng.uniform();
        let kind = if u < policy.mask_frac {
            input.token_ids[i] = MASK;
            Corruption::Masked
        } else if u < policy.mask_frac + policy.random_frac {
            input.token_ids[i] = NUM_RESERVED + rng.below(vocab_size - NUM_RESERVED);
            Corruption::Random
        } else {
            Corruption::Kept
        };
        corruptions[i] = Some(kind);
    }
    Ok(MlmExample {
        input,
        targets,
        corruptions,
    })
}

/// `contextual × token_embeddingᵀ + bias`, recorded on the tape.
pub fn mlm_logits_var(tape: &mut Tape, contextual: Var, token_embedding: Var, bias: Var) -> Result<Var> {
    let scores = tape.matmul_bt(contextual, token_embedding)?;
    tape.add_row(scores, bias)
}

pub fn mlm_logits(contextual: &Tensor, token_embedding: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c = tape.constant(contextual.clone());
    let e = tape.constant(token_embedding.clone());
    let b = tape.constant(bias.clone());
    let out = mlm_logits_var(&mut tape, c, e, b)?;
    Ok(tape.value(out).clone())
}

/// Encoder plus the output bias of the tied MLM projection.
#[derive(Clone, Debug)]
pub struct MlmModel {
    pub encoder: Encoder,
    pub bias: ParamId,
    pub store: ParamStore,
}

impl MlmModel {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let EncoderParams { encoder, mut store } = EncoderParams::init(config, rng)?;
        let bias = store.add(MLM_BIAS, Tensor::zeros(&[config.vocab_size]));
        Ok(MlmModel { encoder, bias, store })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let encoder = Encoder::attach(&ck.encoder_config, &ck.params)?;
        let mut store = ck.params.clone();
        let bias = match store.id(MLM_BIAS) {
            Some(id) => id,
            None => store.add(MLM_BIAS, Tensor::zeros(&[ck.encoder_config.vocab_size])),
        };
        Ok(MlmModel { encoder, bias, store })
    }

    /// Summed cross-entropy over the selected positions of `examples`, and the
    /// number of positions it covers.
    fn record_loss(&self, tape: &mut Tape, examples: &[MlmExample], mode: &mut Mode) -> Result<(Option<Var>, usize)> {
        let bound = self.encoder.bind(tape, &self.store);
        let bias = tape.param(&self.store, self.bias);
        let mut total: Option<Var> = None;
        let mut count = 0;
        for ex in examples {
            let (pos, tgt) = ex.selected();
            if pos.is_empty() {
                continue;
            }
            let ctx = bound.encode(tape, &ex.input, mode)?;
            let rows = tape.gather(ctx, &pos)?;
            let logits = mlm_logits_var(tape, rows, bound.token_embedding, bias)?;
            let mean = tape.cross_entropy(logits, &tgt)?;
            let sum = tape.scale(mean, pos.len() as f64);
            total = Some(match total {
                Some(t) => tape.add(t, sum)?,
                None => sum,
            });
            count += pos.len();
        }
        Ok((total, count))
    }

    /// Mean cross-entropy per selected position, evaluation mode.
    pub fn eval_loss(&self, examples: &[MlmExample]) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in examples.chunks(64) {
            let mut tape = Tape::new();
            let (total, n) = self.record_loss(&mut tape, chunk, &mut Mode::Eval)?;
            if let Some(t) = total {
                sum += tape.scalar(t);
                count += n;
            }
        }
        if count == 0 {
            return Err(Error::Sampling("no selected positions to evaluate".into()));
        }
        Ok(sum / count as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Share of the training split held out for MLM loss reporting.
    pub heldout_fraction: f64,
    pub masking: MaskingPolicy,
    pub save_optimizer_state: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            heldout_fraction: 0.05,
            masking: MaskingPolicy::default(),
            save_optimizer_state: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("pretrain.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::config("pretrain.heldout_fraction", "must be in [0, 1)"));
        }
        self.masking.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch; absent for epoch 0 (before training).
    pub train_loss: Option<f64>,
    pub heldout_loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Non-finite intermediate values during training mean the run diverged.
fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(_) => Error::Training { step, loss: f64::NAN },
        e => e,
    }
}

/// Pretrains on full trajectories of `corpus` (the training split).
///
/// A fixed slice of the corpus is held out and masked once, so held-out
/// losses are comparable across epochs. `epochs = 0` returns the
/// initialisation, which gives a reproducible untrained checkpoint.
pub fn pretrain(
    corpus: &[&PatientRecord],
    encoder_config: &EncoderConfig,
    cfg: &PretrainConfig,
    rng: &Rng,
    provenance: Provenance,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    encoder_config.validate()?;
    if corpus.is_empty() {
        return Err(Error::DegenerateData("empty pretraining corpus".into()));
    }
    let v = encoder_config.vocab_size;
    let seqs = corpus
        .iter()
        .map(|p| build_trajectory_input(p, encoder_config.max_seq_len))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..seqs.len()).collect();
    rng.derive_str("heldout_split").shuffle(&mut order);
    let n_held = ((seqs.len() as f64 * cfg.heldout_fraction).round() as usize).clamp(1, seqs.len());
    let (held_idx, train_idx) = order.split_at(n_held);
    let train_idx = if train_idx.is_empty() { held_idx } else { train_idx };
    let mut held_rng = rng.derive_str("heldout_masking");
    let heldout = held_idx
        .iter()
        .map(|&i| apply_masking(&seqs[i], &cfg.masking, v, &mut held_rng))
        .collect::<Result<Vec<_>>>()?;

    let mut model = MlmModel::init(encoder_config, &mut rng.derive_str("init"))?;
    let mut adam = Adam::new(&model.store, cfg.learning_rate);
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: None,
        heldout_loss: model.eval_loss(&heldout)?,
    }];
    info!("epoch 0 held-out mlm loss {:.4}", log[0].heldout_loss);

    let mut step = 0;
    let mut batch_order = train_idx.to_vec();
    for epoch in 1..=cfg.epochs {
        let erng = rng.derive_path(&[crate::numkit::key_of("epoch"), epoch as u64]);
        erng.derive_str("order").shuffle(&mut batch_order);
        let (mut sum, mut count) = (0.0, 0usize);
        for (b, batch) in batch_order.chunks(cfg.batch_size).enumerate() {
            let brng = erng.derive(b as u64);
            let mut mrng = brng.derive_str("masking");
            let examples = batch
                .iter()
                .map(|&i| apply_masking(&seqs[i], &cfg.masking, v, &mut mrng))
                .collect::<Result<Vec<_>>>()?;
            let mut drng = brng.derive_str("dropout");
            let mut tape = Tape::new();
            let (total, n) = model
                .record_loss(&mut tape, &examples, &mut Mode::Train(&mut drng))
                .map_err(|e| diverged(e, step))?;
            let Some(total) = total else { continue };
            let loss = tape.scale(total, 1.0 / n as f64);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training { step, loss: value });
            }
            model.store.zero_grad();
            tape.backward(loss)?.accumulate_into(&tape, &mut model.store);
            if !model.store.grads_finite() {
                return Err(Error::Training { step, loss: f64::NAN });
            }
            adam.step(&mut model.store);
            sum += value * n as f64;
            count += n;
            step += 1;
        }
        let heldout_loss = model.eval_loss(&heldout).map_err(|e| diverged(e, step))?;
        if !heldout_loss.is_finite() {
            return Err(Error::Training { step, loss: heldout_loss });
        }
        let train_loss = (count > 0).then(|| sum / count as f64);
        info!(
            "epoch {epoch} train mlm loss {:.4} held-out {:.4}",
            train_loss.unwrap_or(f64::NAN),
            heldout_loss
        );
        log.push(EpochLog {
            epoch,
            train_loss,
            heldout_loss,
        });
    }

    model.store.zero_grad();
    let optimizer = cfg.save_optimizer_state.then(|| {
        let (m, v) = adam.moments();
        OptimizerState {
            step: adam.step_count(),
            m: m.to_vec(),
            v: v.to_vec(),
        }
    });
    Ok(PretrainOutput {
        checkpoint: Checkpoint {
            encoder_config: encoder_config.clone(),
            params: model.store,
            optimizer,
            rng_state: rng.state(),
            provenance,
        },
        log,
    })
}
