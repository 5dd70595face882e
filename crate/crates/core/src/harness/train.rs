use std::time::Instant;

use log::{debug, warn};
use rayon::prelude::*;

use super::{auroc, cell_seed, fewshot_rng, sample_fewshot, FinetuneConfig, ModelKind, RunResult, TrainSize};
use crate::baselines::{BaselineKind, CellKind, LrModel, RnnModel};
use crate::checkpoint::Checkpoint;
use crate::cohortgen::{Cohort, PatientRecord};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::heads::{HeadModel, TargetCodeSet};
use crate::numkit::{Adam, ParamStore, Rng, Tape, Var};

/// A model the fine-tuning loop can train and score.
pub trait Classifier: Send {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Summed loss over `batch`, recorded on `tape`.
    fn batch_loss(&self, tape: &mut Tape, batch: &[&PatientRecord], mode: &mut Mode) -> Result<Var>;
    /// Ranking scores; larger means more likely a case.
    fn scores(&self, patients: &[&PatientRecord]) -> Result<Vec<f64>>;
}

fn sum_losses(tape: &mut Tape, losses: Vec<Var>) -> Result<Var> {
    let mut it = losses.into_iter();
    let mut total = it.next().ok_or_else(|| Error::DegenerateData("empty batch".into()))?;
    for l in it {
        total = tape.add(total, l)?;
    }
    Ok(total)
}

impl Classifier for HeadModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn batch_loss(&self, tape: &mut Tape, batch: &[&PatientRecord], mode: &mut Mode) -> Result<Var> {
        let bound = self.bind(tape)?;
        let losses = batch
            .iter()
            .map(|p| self.loss(tape, &bound, p, mode))
            .collect::<Result<Vec<_>>>()?;
        sum_losses(tape, losses)
    }
    fn scores(&self, patients: &[&PatientRecord]) -> Result<Vec<f64>> {
        HeadModel::scores(self, patients)
    }
}

impl Classifier for LrModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn batch_loss(&self, tape: &mut Tape, batch: &[&PatientRecord], _: &mut Mode) -> Result<Var> {
        let bound = self.bind(tape);
        let losses = batch
            .iter()
            .map(|p| {
                let z = self.logit(tape, bound, p)?;
                Ok(tape.bce_logit(z, f64::from(p.label)))
            })
            .collect::<Result<Vec<_>>>()?;
        sum_losses(tape, losses)
    }
    fn scores(&self, patients: &[&PatientRecord]) -> Result<Vec<f64>> {
        patients.iter().map(|p| self.score(p)).collect()
    }
}

impl Classifier for RnnModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn batch_loss(&self, tape: &mut Tape, batch: &[&PatientRecord], _: &mut Mode) -> Result<Var> {
        let bound = self.bind(tape);
        let losses = batch
            .iter()
            .map(|p| {
                let z = self.logit(tape, &bound, p)?;
                Ok(tape.bce_logit(z, f64::from(p.label)))
            })
            .collect::<Result<Vec<_>>>()?;
        sum_losses(tape, losses)
    }
    fn scores(&self, patients: &[&PatientRecord]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut out = Vec::with_capacity(patients.len());
        for p in patients {
            let mark = tape.len();
            let z = self.logit(&mut tape, &bound, p)?;
            out.push(tape.scalar(z));
            tape.truncate(mark);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best_val_auc: f64,
    /// Epoch whose parameters were kept; 0 is the starting point.
    pub best_epoch: usize,
    pub epochs_run: usize,
}

fn evaluate(model: &dyn Classifier, patients: &[&PatientRecord]) -> Result<f64> {
    let scores = model.scores(patients)?;
    let labels: Vec<u8> = patients.iter().map(|p| p.label).collect();
    auroc(&scores, &labels)
}

/// Mini-batch Adam on mean BCE with early stopping on validation AUROC.
///
/// Validation AUROC is measured before training and after every epoch; the
/// best parameters seen are restored at the end.
pub fn finetune(
    model: &mut dyn Classifier,
    train: &[&PatientRecord],
    val: &[&PatientRecord],
    cfg: &FinetuneConfig,
    lr: f64,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    let cases = train.iter().filter(|p| p.is_case()).count();
    if cases == 0 || cases == train.len() {
        return Err(Error::DegenerateData(format!(
            "training subset has {cases} cases among {} patients",
            train.len()
        )));
    }
    let mut adam = Adam::new(model.store(), lr);
    let mut best = (evaluate(model, val)?, 0usize, model.store().clone());
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PatientRecord> = chunk.iter().map(|&i| train[i]).collect();
            let mut tape = Tape::new();
            let mut drng = rng.derive(step as u64);
            let total = model.batch_loss(&mut tape, &batch, &mut Mode::Train(&mut drng))?;
            let loss = tape.scale(total, 1.0 / batch.len() as f64);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training { step, loss: value });
            }
            let store = model.store_mut();
            store.zero_grad();
            tape.backward(loss)?.accumulate_into(&tape, store);
            adam.step(store);
            step += 1;
        }
        epochs_run = epoch;
        let auc = evaluate(model, val)?;
        debug!("epoch {epoch} val auroc {auc:.4}");
        if auc > best.0 {
            best = (auc, epoch, model.store().clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.store_mut().load_values_from(&best.2);
    Ok(TrainOutcome {
        best_val_auc: best.0,
        best_epoch: best.1,
        epochs_run,
    })
}

/// Everything a cell needs besides its (model, size, run) key.
pub struct SweepContext<'a> {
    pub cohort: &'a Cohort,
    /// Pretrained encoder; required for the encoder heads.
    pub checkpoint: Option<&'a Checkpoint>,
    pub targets: TargetCodeSet,
    pub finetune: FinetuneConfig,
    pub max_len: usize,
    /// Recurrent hidden size, matched to the encoder width.
    pub hidden: usize,
    pub base_seed: u64,
}

fn build_model(ctx: &SweepContext, kind: ModelKind, train: &[&PatientRecord], rng: &mut Rng) -> Result<Box<dyn Classifier>> {
    let v = ctx.cohort.universe.vocab.len();
    Ok(match kind {
        ModelKind::Head(h) => {
            let ck = ctx.checkpoint.ok_or_else(|| {
                Error::io(
                    "<checkpoint>",
                    std::io::Error::new(std::io::ErrorKind::NotFound, "encoder heads need a pretrained checkpoint"),
                )
            })?;
            let params = ck.encoder_params()?;
            let mut head = HeadModel::new(
                h,
                &params,
                &ctx.targets,
                ctx.finetune.freeze_label_tensor,
                ctx.finetune.supervision,
                rng,
            )?;
            if ctx.finetune.calibrate_label_scores {
                head.calibrate_scores(train)?;
            }
            Box::new(head)
        }
        ModelKind::Baseline(BaselineKind::Lr) => Box::new(LrModel::new(v, ctx.max_len)),
        ModelKind::Baseline(b) => {
            let (cell, bi) = match b {
                BaselineKind::Gru => (CellKind::Gru, false),
                BaselineKind::Bigru => (CellKind::Gru, true),
                BaselineKind::Lstm => (CellKind::Lstm, false),
                _ => (CellKind::Lstm, true),
            };
            Box::new(RnnModel::new(cell, bi, v, ctx.hidden, ctx.max_len, rng))
        }
    })
}

/// One fine-tuning run, fully determined by `(base seed, model, size, run)`.
pub fn run_cell(ctx: &SweepContext, model: ModelKind, size: TrainSize, run: usize) -> Result<RunResult> {
    let start = Instant::now();
    let cohort = ctx.cohort;
    let shot = sample_fewshot(cohort, size, &mut fewshot_rng(ctx.base_seed, size, run))?;
    let seed = cell_seed(ctx.base_seed, model, size, run);
    let root = Rng::new(seed);
    let train = cohort.subset(&shot.train);
    let mut m = build_model(ctx, model, &train, &mut root.derive_str("init"))?;
    let val = cohort.subset(&shot.val);
    let lr = ctx.finetune.learning_rates.get(model);
    let outcome = finetune(m.as_mut(), &train, &val, &ctx.finetune, lr, &mut root.derive_str("train"))?;
    let test_auc = evaluate(m.as_ref(), &cohort.test())?;
    debug!(
        "{model} n={size} run={run}: test {test_auc:.4} val {:.4} (epoch {} of {})",
        outcome.best_val_auc, outcome.best_epoch, outcome.epochs_run
    );
    Ok(RunResult {
        model,
        train_size: size,
        run,
        seed,
        test_auc,
        val_auc: outcome.best_val_auc,
        wall_time_s: if ctx.finetune.record_wall_time {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub model: ModelKind,
    pub train_size: TrainSize,
    pub run: usize,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepOutcome {
    pub results: Vec<RunResult>,
    pub failures: Vec<CellFailure>,
}

/// Runs every cell on `jobs` worker threads. Output order is the grid order
/// regardless of scheduling; failed cells are collected, not fatal.
pub fn sweep(ctx: &SweepContext, cells: &[(ModelKind, TrainSize, usize)], jobs: usize) -> Result<SweepOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let outcomes: Vec<Result<RunResult>> =
        pool.install(|| cells.par_iter().map(|&(m, s, r)| run_cell(ctx, m, s, r)).collect());
    let mut out = SweepOutcome::default();
    for (&(model, train_size, run), res) in cells.iter().zip(outcomes) {
        match res {
            Ok(r) => out.results.push(r),
            Err(e) => {
                warn!("cell {model} n={train_size} run={run} failed: {e}");
                out.failures.push(CellFailure {
                    model,
                    train_size,
                    run,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}
